//! Transfer-operator backend for the first-return map of the LSV map
//! `f(x) = x(1 + 2^alpha x^alpha)` on `[0, 1/2]`, `2x - 1` on `(1/2, 1]`,
//! induced on `Y = (1/2, 1]`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::quad::gl8;
use crate::numerics::roots::illinois;
use crate::oracle::log_partition;
use crate::pressure::flow_pressure;
use crate::shiftmodel::{fit_power_tail, from_cylinder_masses, CylinderTable, PotentialSpec, TailFit, DELTA0};

pub const MAX_BRANCHES: usize = 10_000;
pub const MAX_GRID: usize = 1 << 14;
/// Grids with more nodes than this are applied matrix-free.
const DENSE_LIMIT: usize = 4097;
const MAX_POWER_STEPS: usize = 20_000;

#[derive(Debug, Clone)]
pub struct LsvModel {
    pub alpha: f64,
    /// Right-branch scale; always 1.
    pub b: f64,
    /// `ladder[0] = 1`, `ladder[n] = z_n` with `z_1 = 1/2`, `f_L(z_{n+1}) = z_n`.
    pub ladder: Vec<f64>,
    pub n: usize,
    pub pot: PotentialSpec,
    /// `psi` on `X_n = (z_n, z_{n-1}]`, index `n - 1`.
    pub psi_on_x: Vec<f64>,
    /// Number of grid intervals on `Y`; the grid has `grid_size + 1` nodes.
    pub grid_size: usize,
    /// Preimages `T_n^{-1}(y_i)`, row `i`, column `n - 1`.
    pre: Vec<f64>,
    /// `|T_n^{-1}'(y_i)|`, same layout.
    deriv: Vec<f64>,
}

fn f_left(alpha: f64, x: f64) -> f64 {
    x * (1.0 + 2f64.powf(alpha) * x.powf(alpha))
}

fn f_left_prime(alpha: f64, x: f64) -> f64 {
    1.0 + (1.0 + alpha) * 2f64.powf(alpha) * x.powf(alpha)
}

/// Full map on `[0, 1]` with `b = 1`.
pub fn lsv_map(alpha: f64, x: f64) -> f64 {
    if x <= 0.5 {
        f_left(alpha, x)
    } else {
        2.0 * x - 1.0
    }
}

/// `f_L^{-1}(z)` for `z` in `(0, 1]`: Newton from below, bisection if it
/// leaves the bracket or stalls.
pub fn left_inverse(alpha: f64, z: f64) -> Result<f64> {
    let c = 2f64.powf(alpha);
    let mut x = z / (1.0 + c * z.powf(alpha));
    for _ in 0..60 {
        let dx = (f_left(alpha, x) - z) / f_left_prime(alpha, x);
        x -= dx;
        if !(x > 0.0 && x <= z) {
            break;
        }
        if dx.abs() <= 1e-16 * x {
            return Ok(x);
        }
    }
    let (mut lo, mut hi) = (0.0, z.min(0.5));
    if !(f_left(alpha, hi) >= z) {
        return Err(Error::NewtonStall(format!("no bracket for f_L^-1({z})")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f_left(alpha, mid) < z {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-17 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

impl LsvModel {
    pub fn beta(&self) -> f64 {
        1.0 / self.alpha
    }

    pub fn nodes(&self) -> usize {
        self.grid_size + 1
    }

    pub fn spacing(&self) -> f64 {
        0.5 / self.grid_size as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.nodes()).map(|i| self.node(i)).collect()
    }

    fn node(&self, i: usize) -> f64 {
        if i == self.grid_size {
            1.0
        } else {
            0.5 + i as f64 * self.spacing()
        }
    }

    pub fn z(&self, n: usize) -> f64 {
        self.ladder[n]
    }

    /// `psibar_n`, the sum of `psi` along the climb of cylinder `n`.
    pub fn psibar(&self, n: usize) -> f64 {
        self.pot.psibar(n as f64)
    }

    /// `T_n^{-1}(y_i)`.
    pub fn preimage(&self, i: usize, n: usize) -> f64 {
        self.pre[i * self.n + n - 1]
    }

    /// `|T_n^{-1}'(y_i)|`.
    pub fn branch_derivative(&self, i: usize, n: usize) -> f64 {
        self.deriv[i * self.n + n - 1]
    }

    /// `max_n (max_i - min_i) ln |T_n^{-1}'(y_i)|`.
    pub fn distortion(&self, n: usize) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..self.nodes() {
            let l = self.branch_derivative(i, n).ln();
            lo = lo.min(l);
            hi = hi.max(l);
        }
        hi - lo
    }

    pub fn write_ladder_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n,z_n")?;
        for (n, z) in self.ladder.iter().enumerate().skip(1) {
            writeln!(w, "{n},{z:e}")?;
        }
        Ok(())
    }
}

pub fn build_lsv(alpha: f64, n: usize, grid_size: usize, pot: PotentialSpec) -> Result<LsvModel> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::RejectedSpec(format!("alpha = {alpha} outside (0, 1)")));
    }
    if n == 0 || n > MAX_BRANCHES {
        return Err(Error::RejectedSpec(format!("N = {n} outside [1, {MAX_BRANCHES}]")));
    }
    if !grid_size.is_power_of_two() || grid_size < 4 || grid_size > MAX_GRID {
        return Err(Error::RejectedSpec(format!("grid_size = {grid_size} must be a power of two in [4, {MAX_GRID}]")));
    }
    let mut ladder = vec![1.0, 0.5];
    for k in 1..n {
        ladder.push(left_inverse(alpha, ladder[k])?);
    }
    let psi_on_x = (1..=n)
        .map(|k| if k == 1 { pot.c0 - pot.c1 } else { pot.c1 * ((k as f64 - 1.0).powf(pot.gamma) - (k as f64).powf(pot.gamma)) })
        .collect();
    let mut model = LsvModel { alpha, b: 1.0, ladder, n, pot, psi_on_x, grid_size, pre: Vec::new(), deriv: Vec::new() };
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..model.nodes())
        .into_par_iter()
        .map(|i| backward_chain(alpha, model.node(i), n))
        .collect::<Result<Vec<_>>>()?;
    model.pre.reserve(model.nodes() * n);
    model.deriv.reserve(model.nodes() * n);
    for (x, d) in rows {
        model.pre.extend(x);
        model.deriv.extend(d);
    }
    Ok(model)
}

/// Preimages and inverse-branch derivatives for branches `1..=n` at `y`.
fn backward_chain(alpha: f64, y: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut xs = Vec::with_capacity(n);
    let mut ds = Vec::with_capacity(n);
    let mut b = y;
    let mut log_d = -std::f64::consts::LN_2;
    xs.push(0.5 * (1.0 + b));
    ds.push(0.5);
    for _ in 1..n {
        b = left_inverse(alpha, b)?;
        log_d -= f_left_prime(alpha, b).ln();
        xs.push(0.5 * (1.0 + b));
        ds.push(log_d.exp());
    }
    Ok((xs, ds))
}

/// `(T_n^{-1}(y), ln |T_n^{-1}'(y)|)` for any `y` in `Y`.
pub fn inverse_branch(model: &LsvModel, n: usize, y: f64) -> Result<(f64, f64)> {
    if !(y > 0.5 && y <= 1.0) {
        return Err(Error::OutOfRange(format!("y = {y} outside (1/2, 1]")));
    }
    if n == 0 || n > model.n {
        return Err(Error::OutOfRange(format!("branch {n} outside [1, {}]", model.n)));
    }
    let mut b = y;
    let mut log_d = -std::f64::consts::LN_2;
    for _ in 1..n {
        b = left_inverse(model.alpha, b)?;
        log_d -= f_left_prime(model.alpha, b).ln();
    }
    Ok((0.5 * (1.0 + b), log_d))
}

/// `T(x) = f^{tau(x)}(x)` with its return time.
pub fn first_return(alpha: f64, x: f64) -> (f64, usize) {
    let mut y = lsv_map(alpha, x);
    let mut k = 1;
    while y <= 0.5 {
        y = lsv_map(alpha, y);
        k += 1;
    }
    (y, k)
}

/// Cubic Lagrange stencil start and weights at `x` on a uniform grid.
fn stencil(x: f64, h: f64, nodes: usize) -> (usize, [f64; 4]) {
    let t = (x - 0.5) / h;
    let j = ((t.floor() as isize) - 1).clamp(0, nodes as isize - 4) as usize;
    let r = t - j as f64;
    (
        j,
        [
            -(r - 1.0) * (r - 2.0) * (r - 3.0) / 6.0,
            r * (r - 2.0) * (r - 3.0) / 2.0,
            -r * (r - 1.0) * (r - 3.0) / 2.0,
            r * (r - 1.0) * (r - 2.0) / 6.0,
        ],
    )
}

/// Piecewise-cubic interpolant of grid values.
pub fn interpolate(values: &[f64], x: f64) -> f64 {
    let h = 0.5 / (values.len() - 1) as f64;
    let (j, w) = stencil(x, h, values.len());
    (0..4).map(|k| w[k] * values[j + k]).sum()
}

/// Per-branch, per-node roof values `tau_n(y_i)`; `None` means `tau_n = n`.
#[derive(Debug, Clone)]
pub struct RoofTable {
    /// Row `i`, column `n - 1`.
    pub values: Vec<f64>,
    /// `tau_n` averaged over the grid.
    pub averages: Vec<f64>,
    pub min_roof: f64,
    /// `min rho`, a lower bound for the roof gained per step.
    pub rho_min: f64,
    n: usize,
}

impl RoofTable {
    pub fn at(&self, i: usize, n: usize) -> f64 {
        self.values[i * self.n + n - 1]
    }
}

/// Samples of a speed function `rho` on a uniform grid of `[0, 1]`,
/// linearly interpolated.
#[derive(Debug, Clone)]
pub struct RhoSamples(pub Vec<f64>);

impl RhoSamples {
    pub fn from_fn(count: usize, f: impl Fn(f64) -> f64) -> Self {
        RhoSamples((0..count).map(|i| f(i as f64 / (count - 1) as f64)).collect())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let m = self.0.len() - 1;
        let t = (x.clamp(0.0, 1.0) * m as f64).min(m as f64);
        let j = (t.floor() as usize).min(m - 1);
        let r = t - j as f64;
        (1.0 - r) * self.0[j] + r * self.0[j + 1]
    }
}

/// `tau_n(y) = sum_{j < n} rho(f^j x)` with `x = T_n^{-1}(y)`, summed along
/// the backward chain: `f^j x = b_{n-j}` and `b_j = 2 T_{j+1}^{-1}(y) - 1`.
pub fn orbit_sum_roof(model: &LsvModel, rho: &RhoSamples) -> Result<RoofTable> {
    let min = rho.0.iter().cloned().fold(f64::INFINITY, f64::min);
    if rho.0.len() < 2 || !(min > 0.0) {
        return Err(Error::InvalidRoof(format!("min sampled rho = {min}")));
    }
    let n = model.n;
    let mut values = vec![0.0; model.nodes() * n];
    values.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        // climb[k] = sum_{j=1}^{k} rho(b_j), b_j = 2 x_{j+1} - 1.
        let mut climb = 0.0;
        for k in 1..=n {
            row[k - 1] = rho.eval(model.preimage(i, k)) + climb;
            if k < n {
                climb += rho.eval(2.0 * model.preimage(i, k + 1) - 1.0);
            }
        }
    });
    let nodes = model.nodes() as f64;
    let averages = (1..=n)
        .map(|k| (0..model.nodes()).map(|i| values[i * n + k - 1]).sum::<f64>() / nodes)
        .collect();
    let min_roof = values.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(RoofTable { values, averages, min_roof, rho_min: min, n })
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralData {
    pub grid_size: usize,
    pub u: f64,
    pub s: f64,
    pub lambda: f64,
    /// Bound on `|ln lambda|` error: iteration tolerance plus truncated branches.
    pub log_lambda_err: f64,
    pub tail_bound: f64,
    /// Sup-normalized right eigenfunction on the grid.
    pub right_eig: Vec<f64>,
    /// Left eigenvector of the discretized operator, when requested.
    pub left_eig: Option<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

/// Discretized operator at `(u, s)` over every `stride`-th node.
struct Discrete<'a> {
    model: &'a LsvModel,
    stride: usize,
    nodes: usize,
    coef: Vec<f64>,
    roof: Option<&'a RoofTable>,
    u: f64,
    s: f64,
    dense: Option<Vec<f64>>,
}

impl<'a> Discrete<'a> {
    fn new(model: &'a LsvModel, u: f64, s: f64, stride: usize, roof: Option<&'a RoofTable>) -> Self {
        let coef = (1..=model.n)
            .map(|k| match roof {
                None => (s * model.psibar(k) - u * k as f64).exp(),
                Some(_) => (s * model.psibar(k)).exp(),
            })
            .collect();
        let nodes = model.grid_size / stride + 1;
        let mut d = Discrete { model, stride, nodes, coef, roof, u, s, dense: None };
        if nodes <= DENSE_LIMIT {
            let mut a = vec![0.0; nodes * nodes];
            a.par_chunks_mut(nodes).enumerate().for_each(|(r, row)| d.accumulate_row(r, |c, w| row[c] += w));
            d.dense = Some(a);
        }
        d
    }

    fn entry_weight(&self, i: usize, k: usize) -> f64 {
        let w = self.coef[k - 1] * self.model.branch_derivative(i, k);
        match self.roof {
            None => w,
            Some(r) => w * (-self.u * r.at(i, k)).exp(),
        }
    }

    fn accumulate_row(&self, r: usize, mut add: impl FnMut(usize, f64)) {
        let i = r * self.stride;
        let h = 0.5 / (self.nodes - 1) as f64;
        for k in 1..=self.model.n {
            let w = self.entry_weight(i, k);
            let (j, st) = stencil(self.model.preimage(i, k), h, self.nodes);
            for (q, sq) in st.iter().enumerate() {
                add(j + q, w * sq);
            }
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.nodes;
        match &self.dense {
            Some(a) => a.par_chunks(n).map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect(),
            None => (0..n)
                .into_par_iter()
                .map(|r| {
                    let mut acc = 0.0;
                    self.accumulate_row(r, |c, w| acc += w * v[c]);
                    acc
                })
                .collect(),
        }
    }

    fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let n = self.nodes;
        let mut out = vec![0.0; n];
        match &self.dense {
            Some(a) => {
                for (r, row) in a.chunks(n).enumerate() {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x * v[r];
                    }
                }
            }
            None => {
                for r in 0..n {
                    self.accumulate_row(r, |c, w| out[c] += w * v[r]);
                }
            }
        }
        out
    }

    /// Upper bound on the relative contribution of branches `n > N`.
    fn tail_bound(&self, v: &[f64], lambda: f64) -> f64 {
        let m = self.model;
        let k = m.n + 1;
        let roof = self.roof.map_or(k as f64, |r| r.rho_min * k as f64);
        let c = (self.s * m.psibar(k) - self.u * roof).exp();
        let ratio = v.iter().cloned().fold(0.0, f64::max) / v.iter().cloned().fold(f64::INFINITY, f64::min);
        c * m.z(m.n) * m.distortion(m.n).exp() * ratio / lambda
    }
}

fn power_iteration(op: &Discrete<'_>, tol: f64, start: Option<&[f64]>) -> Result<(f64, Vec<f64>, usize, f64)> {
    let mut v: Vec<f64> = match start {
        Some(s) if s.len() == op.nodes => s.to_vec(),
        _ => vec![1.0; op.nodes],
    };
    let mut lambda = 0.0;
    for it in 1..=MAX_POWER_STEPS {
        let w = op.apply(&v);
        let l = w.iter().cloned().fold(0.0, f64::max);
        if !(l > 0.0) {
            return Err(Error::NotPositive("operator image vanished".into()));
        }
        let next: Vec<f64> = w.iter().map(|x| x / l).collect();
        let done = (l - lambda).abs() < tol * l;
        lambda = l;
        v = next;
        if done {
            let av = op.apply(&v);
            let residual = av.iter().zip(&v).map(|(a, b)| (a - lambda * b).abs()).fold(0.0, f64::max);
            if let Some(x) = v.iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::NotPositive(format!("eigenfunction value {x}")));
            }
            return Ok((lambda, v, it, residual));
        }
    }
    Err(Error::NoConvergence { iterations: MAX_POWER_STEPS, increment: lambda })
}

fn eigen_inner(
    model: &LsvModel,
    u: f64,
    s: f64,
    tol: f64,
    stride: usize,
    roof: Option<&RoofTable>,
    start: Option<&[f64]>,
    with_left: bool,
) -> Result<SpectralData> {
    let op = Discrete::new(model, u, s, stride, roof);
    let (lambda, v, iterations, residual) = power_iteration(&op, tol, start)?;
    let left_eig = if with_left {
        let mut l = vec![1.0; op.nodes];
        let mut prev = 0.0;
        for _ in 0..MAX_POWER_STEPS {
            let w = op.apply_transpose(&l);
            let m = w.iter().cloned().fold(0.0, f64::max);
            l = w.iter().map(|x| x / m).collect();
            if (m - prev).abs() < tol * m {
                break;
            }
            prev = m;
        }
        Some(l)
    } else {
        None
    };
    let tail_bound = op.tail_bound(&v, lambda);
    Ok(SpectralData {
        grid_size: model.grid_size / stride,
        u,
        s,
        lambda,
        log_lambda_err: 10.0 * tol + residual / lambda + tail_bound,
        tail_bound,
        right_eig: v,
        left_eig,
        iterations,
        residual,
    })
}

/// Leading eigenvalue of `(L v)(y) = sum_n e^{s psibar_n - u n} |T_n^{-1}'(y)| v(T_n^{-1} y)`.
pub fn leading_eigen(model: &LsvModel, u: f64, s: f64, tol: f64) -> Result<SpectralData> {
    if !(u >= 0.0) {
        return Err(Error::OutOfDomain(format!("u = {u} < 0")));
    }
    if !(0.0..=DELTA0).contains(&s) {
        return Err(Error::OutOfDomain(format!("s = {s} outside [0, {DELTA0}]")));
    }
    if !(tol >= 1e-10) {
        return Err(Error::OutOfDomain(format!("tol = {tol} below 1e-10")));
    }
    eigen_inner(model, u, s, tol, 1, None, None, false)
}

/// As [`leading_eigen`], also returning the left eigenvector.
pub fn leading_eigen_pair(model: &LsvModel, u: f64, s: f64, tol: f64) -> Result<SpectralData> {
    let mut d = leading_eigen(model, u, s, tol)?;
    d.left_eig = eigen_inner(model, u, s, tol, 1, None, Some(&d.right_eig), true)?.left_eig;
    Ok(d)
}

pub fn write_eigenfunction_csv<W: Write>(model: &LsvModel, data: &SpectralData, mut w: W) -> std::io::Result<()> {
    writeln!(w, "y,v")?;
    let stride = model.grid_size / data.grid_size;
    for (k, v) in data.right_eig.iter().enumerate() {
        writeln!(w, "{:e},{:e}", model.node(k * stride), v)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CylinderWeights {
    /// `mu_Y(a_n)` for `n = 1..=N`.
    pub masses: Vec<f64>,
    /// `mu_Y(tau > N)`.
    pub tail_mass: f64,
    /// `mu_Y(tau >= n)`, index `n - 1`.
    pub tail: Vec<f64>,
    pub fit: TailFit,
    pub lambda: f64,
}

impl CylinderWeights {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n,mu_n")?;
        for (k, m) in self.masses.iter().enumerate() {
            writeln!(w, "{},{m:e}", k + 1)?;
        }
        Ok(())
    }

    /// Synthetic table with these masses and the theoretical tail exponent.
    pub fn to_table(&self, model: &LsvModel) -> Result<CylinderTable> {
        from_cylinder_masses(&self.masses, self.tail_mass, model.beta(), model.pot)
    }
}

/// Tail window for the exponent fit.
pub const WEIGHT_FIT_RANGE: (usize, usize) = (10, 1000);

/// `mu_Y(a_n) = int_{a_n} h` with `h` the normalized eigenfunction at
/// `(0, 0)`; `a_n = ((1 + z_n)/2, (1 + z_{n-1})/2]`.
pub fn cylinder_weights(model: &LsvModel) -> Result<CylinderWeights> {
    let eig = leading_eigen(model, 0.0, 0.0, 1e-10)?;
    let h = &eig.right_eig;
    let spacing = model.spacing();
    let cell = |lo: f64, hi: f64| gl8().integrate(lo, hi, |x| interpolate(h, x));
    // Cumulative integral of h from 1/2 to each node.
    let mut cum = vec![0.0; h.len()];
    for i in 1..h.len() {
        cum[i] = cum[i - 1] + cell(model.node(i - 1), model.node(i));
    }
    let antideriv = |x: f64| {
        let i = (((x - 0.5) / spacing).floor() as usize).min(h.len() - 2);
        cum[i] + cell(model.node(i), x)
    };
    let total = cum[h.len() - 1];
    let tail: Vec<f64> = (1..=model.n + 1).map(|k| antideriv(0.5 * (1.0 + model.z(k - 1))) / total).collect();
    let masses: Vec<f64> = tail.windows(2).map(|w| w[0] - w[1]).collect();
    if let Some(m) = masses.iter().find(|&&m| !(m > 0.0)) {
        return Err(Error::NotPositive(format!("cylinder mass {m}")));
    }
    let tail_mass = tail[model.n];
    let (lo, hi) = WEIGHT_FIT_RANGE;
    let hi = hi.min(model.n);
    let xs: Vec<f64> = (lo..=hi).map(|k| k as f64).collect();
    let fit = fit_power_tail(&xs, &tail[lo - 1..hi])?;
    Ok(CylinderWeights { masses, tail_mass, tail: tail[..model.n].to_vec(), fit, lambda: eig.lambda })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LsvPressure {
    pub s: f64,
    pub u0: f64,
    pub err: f64,
    pub eigen_err: f64,
    pub tail_err: f64,
    /// `|u0(grid) - u0(grid/2)|`.
    pub refinement_err: f64,
}

const EIGEN_TOL: f64 = 1e-13;

fn root_on(model: &LsvModel, s: f64, stride: usize, roof: Option<&RoofTable>) -> Result<(f64, SpectralData)> {
    let start = std::cell::RefCell::new(None::<Vec<f64>>);
    let log_lambda = |u: f64| -> Result<f64> {
        let prev = start.borrow().clone();
        let d = eigen_inner(model, u, s, EIGEN_TOL, stride, roof, prev.as_deref(), false)?;
        *start.borrow_mut() = Some(d.right_eig);
        Ok(d.lambda.ln())
    };
    // d/du ln lambda <= -rho_min, so one step of this size crosses zero.
    let lo = -1e-2;
    let slope = roof.map_or(1.0, |r| r.rho_min);
    let hi = lo + log_lambda(lo)?.max(0.0) / slope + 1e-9;
    let u0 = illinois(log_lambda, lo, hi, 1e-13, 200)?;
    let d = eigen_inner(model, u0, s, EIGEN_TOL, stride, roof, start.borrow().as_deref(), false)?;
    Ok((u0, d))
}

fn lsv_pressure_inner(model: &LsvModel, s: f64, roof: Option<&RoofTable>) -> Result<LsvPressure> {
    if !(0.0..=DELTA0).contains(&s) {
        return Err(Error::OutOfDomain(format!("s = {s} outside [0, {DELTA0}]")));
    }
    let (u0, d) = root_on(model, s, 1, roof)?;
    let (u_coarse, _) = root_on(model, s, 2, roof)?;
    let slope = roof.map_or(1.0, |r| r.rho_min);
    let eigen_err = (10.0 * EIGEN_TOL + d.residual / d.lambda) / slope;
    let tail_err = d.tail_bound / slope;
    let refinement_err = (u0 - u_coarse).abs();
    Ok(LsvPressure { s, u0, err: eigen_err + tail_err + refinement_err, eigen_err, tail_err, refinement_err })
}

/// Root of `u -> ln lambda(u, s)` with roof `tau_n = n`.
pub fn lsv_flow_pressure(model: &LsvModel, s: f64) -> Result<LsvPressure> {
    lsv_pressure_inner(model, s, None)
}

/// Root of `u -> ln lambda(u, s)` with a pointwise roof table.
pub fn lsv_flow_pressure_roof(model: &LsvModel, roof: &RoofTable, s: f64) -> Result<LsvPressure> {
    lsv_pressure_inner(model, s, Some(roof))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossBackend {
    pub s: f64,
    pub u_operator: f64,
    pub u_operator_err: f64,
    pub u_table: f64,
    pub u_table_err: f64,
    /// Collatz-Wielandt bound on `|u_operator - u_table|` from the operator
    /// evaluated at `(u_table, s)` on the eigenfunction at `(0, 0)`.
    pub projection_bracket: f64,
    pub diff: f64,
    pub combined_err: f64,
    pub agrees: bool,
}

/// Compares the operator pressure with the oracle pressure of the table
/// built from the operator's own cylinder weights.
pub fn cross_backend(model: &LsvModel, table: &CylinderTable, s: f64) -> Result<CrossBackend> {
    let op = lsv_flow_pressure(model, s)?;
    let tb = flow_pressure(table, s)?;
    let h0 = leading_eigen(model, 0.0, 0.0, 1e-10)?.right_eig;
    let d = Discrete::new(model, tb.u0, s, 1, None);
    let lh = d.apply(&h0);
    let ratios = lh.iter().zip(&h0).map(|(a, b)| (a / b).ln());
    let (lo, hi) = ratios.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(r), h.max(r)));
    let projection_bracket = lo.abs().max(hi.abs());
    let diff = (op.u0 - tb.u0).abs();
    let combined_err = op.err + tb.err.u0 + projection_bracket;
    // Residual of the table root in the table's own pressure.
    let _ = log_partition(table, tb.u0, s)?;
    Ok(CrossBackend {
        s,
        u_operator: op.u0,
        u_operator_err: op.err,
        u_table: tb.u0,
        u_table_err: tb.err.u0,
        projection_bracket,
        diff,
        combined_err,
        agrees: diff <= combined_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo(grid: usize, n: usize) -> LsvModel {
        build_lsv(0.75, n, grid, PotentialSpec::new(1.0, 5.0, 1.0)).unwrap()
    }

    #[test]
    fn ladder() {
        let m = build_lsv(0.5, 50, 16, PotentialSpec::new(1.0, 5.0, 1.0)).unwrap();
        assert_eq!(f_left(0.5, 0.5), 1.0);
        assert_eq!(f_left(0.75, 0.5), 1.0);
        // Bisection oracle for x(1 + sqrt(2) sqrt(x)) = 1/2.
        let (mut lo, mut hi) = (0.0f64, 0.5f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * (1.0 + 2f64.sqrt() * mid.sqrt()) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((m.z(2) - lo).abs() < 1e-15);
        assert!((m.z(2) - 0.2849).abs() < 1e-4, "{}", m.z(2));
        for k in 1..50 {
            assert!(m.z(k + 1) < m.z(k));
            assert!((f_left(0.5, m.z(k + 1)) - m.z(k)).abs() < 1e-13);
        }
    }

    #[test]
    fn telescoping_psi() {
        let m = build_lsv(0.75, 200, 16, PotentialSpec::new(0.8, 5.0, 1.0)).unwrap();
        for n in [1, 2, 7, 200] {
            let s: f64 = m.psi_on_x[..n].iter().sum();
            assert!((s - (5.0 - (n as f64).powf(0.8))).abs() < 1e-11);
        }
    }

    #[test]
    fn inverse_branches() {
        let m = demo(16, 300);
        let (x, ld) = inverse_branch(&m, 1, 0.8).unwrap();
        assert_eq!(x, 0.9);
        assert!((ld.exp() - 0.5).abs() < 1e-16);
        assert!(matches!(inverse_branch(&m, 0, 0.8), Err(Error::OutOfRange(_))));
        assert!(matches!(inverse_branch(&m, 1, 0.4), Err(Error::OutOfRange(_))));
        let (x, _) = inverse_branch(&m, 300, 0.6).unwrap();
        assert!(x > 0.5 * (1.0 + m.z(300)) && x <= 0.5 * (1.0 + m.z(299)));
    }

    #[test]
    fn distortion_is_uniform() {
        let m = demo(64, 2000);
        let d: Vec<f64> = [2, 10, 100, 1000, 2000].iter().map(|&n| m.distortion(n)).collect();
        assert!(d[3] < 1.05 * d[2] && d[4] < 1.05 * d[2], "{d:?}");
        assert!(d.iter().all(|&x| x < 2.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn forward_check(n in 1usize..=100, y in 0.5001f64..1.0) {
            let m = demo(4, 200);
            let (x, ld) = inverse_branch(&m, n, y).unwrap();
            let (back, k) = first_return(0.75, x);
            prop_assert_eq!(k, n);
            prop_assert!((back - y).abs() < 1e-11, "{} vs {}", back, y);
            let h = 1e-7;
            let (x2, _) = inverse_branch(&m, n, (y - h).max(0.50001)).unwrap();
            let fd = (x - x2) / (y - (y - h).max(0.50001));
            prop_assert!((fd / ld.exp() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eigenvalue_at_origin() {
        let m = demo(2048, 2000);
        let d = leading_eigen(&m, 0.0, 0.0, 1e-10).unwrap();
        assert!((d.lambda - 1.0).abs() < 1e-3, "{}", d.lambda);
        assert!(d.right_eig.iter().all(|&v| v > 0.0));
        assert!(1.0 - d.lambda <= d.tail_bound, "{} {}", d.lambda, d.tail_bound);
    }

    #[test]
    fn monotone_and_convex() {
        let m = demo(256, 1000);
        let mut prev = f64::INFINITY;
        for u in [0.0, 0.01, 0.05, 0.2] {
            let l = leading_eigen(&m, u, 0.0, 1e-10).unwrap().lambda;
            assert!(l < prev);
            prev = l;
        }
        let ls: Vec<f64> = [0.0, 0.05, 0.1, 0.15, 0.2]
            .iter()
            .map(|&s| leading_eigen(&m, 0.05, s, 1e-10).unwrap().lambda.ln())
            .collect();
        for w in ls.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-8);
        }
        assert!(matches!(leading_eigen(&m, -0.1, 0.0, 1e-10), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn weights_and_tail() {
        let m = demo(512, 2000);
        let w = cylinder_weights(&m).unwrap();
        let total: f64 = w.masses.iter().sum::<f64>() + w.tail_mass;
        assert!((total - 1.0).abs() < 1e-12);
        assert!(w.masses.iter().all(|&x| x > 0.0));
        assert!((w.fit.beta_hat / (4.0 / 3.0) - 1.0).abs() < 0.05, "{}", w.fit.beta_hat);
    }

    #[test]
    fn pressure_at_zero_and_growth() {
        let m = demo(256, 2000);
        let p0 = lsv_flow_pressure(&m, 0.0).unwrap();
        assert!(p0.u0.abs() < 1e-3);
        let p1 = lsv_flow_pressure(&m, 0.02).unwrap();
        let p2 = lsv_flow_pressure(&m, 0.05).unwrap();
        assert!(p0.u0 < p1.u0 && p1.u0 < p2.u0);
    }

    #[test]
    fn slope_consistent_with_weights() {
        let m = demo(256, 2000);
        let w = cylinder_weights(&m).unwrap();
        let t = w.to_table(&m).unwrap();
        let s = 1e-3;
        let p0 = lsv_flow_pressure(&m, 0.0).unwrap();
        let p1 = lsv_flow_pressure(&m, s).unwrap();
        let slope = (p1.u0 - p0.u0) / s;
        let x = cross_backend(&m, &t, s).unwrap();
        let err = (p0.err + p1.err + x.projection_bracket + x.u_table_err) / s;
        assert!((slope - x.u_table / s).abs() <= err, "{slope} {} {err}", x.u_table / s);
    }

    #[test]
    fn roofs() {
        let m = demo(16, 100);
        let one = orbit_sum_roof(&m, &RhoSamples(vec![1.0; 11])).unwrap();
        let two = orbit_sum_roof(&m, &RhoSamples(vec![2.0; 11])).unwrap();
        for n in [1, 5, 100] {
            for i in 0..m.nodes() {
                assert_eq!(one.at(i, n), n as f64);
                assert_eq!(two.at(i, n), 2.0 * n as f64);
            }
        }
        assert!(matches!(orbit_sum_roof(&m, &RhoSamples(vec![1.0, 0.0])), Err(Error::InvalidRoof(_))));
        let lin = RhoSamples::from_fn(101, |x| 1.0 + x);
        let r = orbit_sum_roof(&m, &lin).unwrap();
        let mut state = 12345u64;
        for _ in 0..100 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let i = (state >> 33) as usize % m.nodes();
            let n = 1 + (state >> 13) as usize % 100;
            let mut x = m.preimage(i, n);
            let mut sum = 0.0;
            for _ in 0..n {
                sum += 1.0 + x;
                x = lsv_map(0.75, x);
            }
            assert!((sum - r.at(i, n)).abs() < 1e-10, "{n}: {sum} vs {}", r.at(i, n));
        }
    }

    #[test]
    fn roof_one_matches_plain() {
        let m = demo(64, 500);
        let r = orbit_sum_roof(&m, &RhoSamples(vec![1.0; 3])).unwrap();
        let a = lsv_flow_pressure(&m, 0.05).unwrap();
        let b = lsv_flow_pressure_roof(&m, &r, 0.05).unwrap();
        assert!((a.u0 - b.u0).abs() < 1e-12);
    }
}
