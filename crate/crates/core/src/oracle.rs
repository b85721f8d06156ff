//! Exact series backend.
//!
//! Every quantity is a sum over cylinders `sum_n p_n g(tau_n, psibar_n)
//! exp(s psibar_n - u tau_n)`. The stored cylinders are summed with
//! compensated arithmetic; the rest is the Euler–Maclaurin completion
//! `int_N^inf f - f(N)/2 - f'(N)/12` of the table's continuous tail model,
//! with the integral done by Gauss–Legendre panels in `t = ln(x/N)`.

use std::sync::OnceLock;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::fit::{decades, line_fit, loglog_fit, LineFit};
use crate::numerics::quad::{gl16, gl8, Rule};
use crate::numerics::sum::sharded_sum;
use crate::shiftmodel::CylinderTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesValue {
    pub value: f64,
    pub abs_error: f64,
}

impl SeriesValue {
    pub fn new(value: f64, abs_error: f64) -> Self {
        SeriesValue { value, abs_error }
    }
    pub fn exact(value: f64) -> Self {
        SeriesValue { value, abs_error: 0.0 }
    }
    pub fn rel_error(&self) -> f64 {
        self.abs_error / self.value.abs()
    }
}

/// Data of one cylinder (or of the continuous tail at roof `tau`).
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub tau: f64,
    pub psibar: f64,
    pub p: f64,
    pub log_p: f64,
    /// `s psibar - u tau`.
    pub x: f64,
}

fn divergent(u: f64, s: f64, reason: &str) -> Error {
    Error::DivergentSeries { u, s, reason: reason.into() }
}

/// Convergence of `sum_n p_n exp(s psibar_n - u tau_n)`.
pub fn check_domain(table: &CylinderTable, u: f64, s: f64) -> Result<()> {
    if !u.is_finite() || !s.is_finite() {
        return Err(Error::OutOfDomain(format!("non-finite parameters u={u}, s={s}")));
    }
    if u < 0.0 {
        return Err(divergent(u, s, "u < 0 amplifies long returns"));
    }
    if s < 0.0 {
        let pot = table.potential();
        if u == 0.0 {
            return Err(divergent(u, s, "s psibar_n -> +inf when s < 0 and u = 0"));
        }
        if pot.gamma > 1.0 || (pot.gamma == 1.0 && u + s * pot.c1 <= 0.0) {
            return Err(divergent(u, s, "-s C1 tau^gamma outgrows u tau"));
        }
    }
    Ok(())
}

const NEGLIGIBLE: f64 = 1e-19;
const POWER_EFOLDS: f64 = 40.0;

fn rule_vec<const K: usize>(rule: &Rule, a: f64, b: f64, g: &impl Fn(f64) -> [f64; K]) -> [f64; K] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut out = [0.0; K];
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let v = g(c + h * x);
        for k in 0..K {
            out[k] += w * v[k];
        }
    }
    out.map(|v| v * h)
}

impl CylinderTable {
    /// Continuous tail model at real roof `x`.
    #[inline]
    pub fn tail_cell(&self, x: f64, u: f64, s: f64) -> Cell {
        let lx = x.ln();
        let log_p = self.tail_coef.ln() - (self.beta() + 1.0) * lx;
        let psibar = self.potential().psibar(x);
        Cell { tau: x, psibar, p: log_p.exp(), log_p, x: s * psibar - u * x }
    }

    #[inline]
    fn cell(&self, i: usize, u: f64, s: f64) -> Cell {
        let tau = self.roofs[i];
        let psibar = self.psibar[i];
        Cell { tau, psibar, p: self.weights[i], log_p: self.log_weights[i], x: s * psibar - u * tau }
    }
}

/// `sum_n f(cell_n)` over all cylinders, component-wise, with error bounds.
///
/// `growth` is the largest power of `tau` carried by a component that is
/// still summable; it sets how far the tail integral must run when
/// `u = s = 0`.
pub fn cylinder_sum<const K: usize, F>(table: &CylinderTable, u: f64, s: f64, growth: f64, f: F) -> [SeriesValue; K]
where
    F: Fn(&Cell) -> [f64; K] + Sync,
{
    let head = sharded_sum(table.n(), |i| f(&table.cell(i, u, s)));
    let (tail, tail_err) = tail_sum(table, u, s, growth, &f);
    let mut out = [SeriesValue::exact(0.0); K];
    for k in 0..K {
        let v = head[k].value() + tail[k];
        out[k] = SeriesValue::new(
            v,
            head[k].rounding_bound() + tail_err[k] + 4.0 * f64::EPSILON * (tail[k].abs() + v.abs()),
        );
    }
    out
}

fn tail_sum<const K: usize, F>(table: &CylinderTable, u: f64, s: f64, growth: f64, f: &F) -> ([f64; K], [f64; K])
where
    F: Fn(&Cell) -> [f64; K],
{
    let n = table.n() as f64;
    let beta = table.beta();
    let pot = table.potential();
    let at = |x: f64| f(&table.tail_cell(x, u, s));
    let g = |t: f64| {
        let x = n * t.exp();
        at(x).map(|v| v * x)
    };

    let mut value = [0.0; K];
    let mut err = [0.0; K];
    let t_max = (690.0 - n.ln()).min(600.0);
    let mut t = 0.0;
    let mut prev = g(0.0);
    loop {
        let w = if t < 4.0 {
            0.25
        } else if t < 16.0 {
            0.5
        } else {
            1.0
        };
        let b = t + w;
        let fine = rule_vec(gl16(), t, b, &g);
        let coarse = rule_vec(gl8(), t, b, &g);
        for k in 0..K {
            value[k] += fine[k];
            err[k] += (fine[k] - coarse[k]).abs();
        }
        t = b;
        let x = n * t.exp();
        let gt = g(t);
        let exp_decreasing = -s * pot.c1 * pot.gamma * x.powf(pot.gamma - 1.0) - u <= 0.0;
        let negligible = (0..K).all(|k| {
            gt[k] == 0.0 || (gt[k].abs() <= NEGLIGIBLE * value[k].abs() && gt[k].abs() <= prev[k].abs())
        });
        if exp_decreasing && negligible {
            for k in 0..K {
                err[k] += gt[k].abs();
            }
            break;
        }
        let power_done = growth < beta && (growth - beta) * t < -POWER_EFOLDS;
        if (exp_decreasing && power_done) || t >= t_max {
            // Remaining integrand decays at least like exp((growth - beta) t).
            let rate = beta - growth;
            for k in 0..K {
                let r = if rate > 0.0 { gt[k] / rate } else { f64::INFINITY };
                value[k] += r;
                err[k] += 2.0 * r.abs();
            }
            break;
        }
        prev = gt;
    }

    // Euler–Maclaurin endpoint corrections at x = N.
    let h = 0.5;
    let f0 = at(n);
    let fp = at(n + h);
    let fm = at(n - h);
    let fpp = at(n + 2.0 * h);
    let fmm = at(n - 2.0 * h);
    for k in 0..K {
        let d1 = (fp[k] - fm[k]) / (2.0 * h);
        let d3 = (fpp[k] - 2.0 * fp[k] + 2.0 * fm[k] - fmm[k]) / (2.0 * h * h * h);
        value[k] += -0.5 * f0[k] - d1 / 12.0;
        err[k] += d3.abs() / 60.0;
    }
    (value, err)
}

/// Power of `tau` carried by `psibar^a tau^b` (since `psibar ~ tau^gamma`).
fn moment_power(a: usize, b: usize, gamma: f64) -> f64 {
    b as f64 + a as f64 * gamma
}

fn infinite_moment(what: String, a: usize, b: usize, table: &CylinderTable) -> Error {
    let gamma = table.potential().gamma;
    Error::InfiniteMoment {
        what,
        condition: format!(
            "{b} + {a}*gamma < beta, but {} >= {}",
            moment_power(a, b, gamma),
            table.beta()
        ),
    }
}

struct FirstPass {
    log_z: SeriesValue,
    mass: SeriesValue,
    /// Unnormalized total weight `sum p e^x`.
    z_sum: SeriesValue,
    mean_tau: SeriesValue,
    mean_psibar: SeriesValue,
}

fn first_pass(table: &CylinderTable, u: f64, s: f64) -> Result<FirstPass> {
    check_domain(table, u, s)?;
    let growth = table.potential().gamma.max(1.0);
    let [d, m, wt, wp] = cylinder_sum(table, u, s, growth, |c| {
        let e = c.x.exp();
        [c.p * c.x.exp_m1(), c.p, c.p * e * c.tau, c.p * e * c.psibar]
    });
    let r = d.value / m.value;
    let r_err = d.abs_error / m.value + d.value.abs() * m.abs_error / (m.value * m.value);
    let lz = r.ln_1p();
    let log_z = SeriesValue::new(lz, r_err / (1.0 + r) + f64::EPSILON * lz.abs());
    let zs = m.value + d.value;
    let z_sum = SeriesValue::new(zs, m.abs_error + d.abs_error);
    let ratio = |w: SeriesValue| {
        let v = w.value / zs;
        SeriesValue::new(v, w.abs_error / zs + v.abs() * z_sum.abs_error / zs)
    };
    Ok(FirstPass { log_z, mass: m, z_sum, mean_tau: ratio(wt), mean_psibar: ratio(wp) })
}

/// `pbar(u, s) = log sum_n p_n exp(s psibar_n - u tau_n)`.
pub fn log_partition(table: &CylinderTable, u: f64, s: f64) -> Result<SeriesValue> {
    Ok(first_pass(table, u, s)?.log_z)
}

/// `pbar(u, s)` together with `E_m[tau]`, the ingredients of a Newton step
/// in `u`.
pub fn log_partition_and_mean_tau(table: &CylinderTable, u: f64, s: f64) -> Result<(SeriesValue, SeriesValue)> {
    let fp = first_pass(table, u, s)?;
    Ok((fp.log_z, fp.mean_tau))
}

// Central-moment slots: (psibar power, tau power).
const CENTRAL: [(usize, usize); 7] = [(2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)];

fn central_slot(a: usize, b: usize) -> Option<usize> {
    CENTRAL.iter().position(|&p| p == (a, b))
}

/// Equilibrium cylinder measure `m_n ∝ p_n exp(s psibar_n - u tau_n)`.
#[derive(Debug)]
pub struct TiltedMeasure<'a> {
    table: &'a CylinderTable,
    pub u: f64,
    pub s: f64,
    /// `pbar(u, s)`.
    pub log_z: SeriesValue,
    /// `sum_n m_n`, one up to the error bound.
    pub total: SeriesValue,
    pub mean_tau: SeriesValue,
    pub mean_psibar: SeriesValue,
    /// `-sum_n m_n ln m_n`.
    pub entropy: SeriesValue,
    /// `E_m[ln p_n]` with `p` normalized to total mass one.
    pub mean_log_p: SeriesValue,
    central: [Option<SeriesValue>; 7],
    raw: OnceLock<Vec<Option<SeriesValue>>>,
}

/// Builds the tilted measure with entropy and central moments up to order 3.
pub fn tilt(table: &CylinderTable, u: f64, s: f64) -> Result<TiltedMeasure<'_>> {
    let fp = first_pass(table, u, s)?;
    let gamma = table.potential().gamma;
    let beta = table.beta();
    let at_origin = u == 0.0 && s == 0.0;
    let finite: Vec<bool> = CENTRAL
        .iter()
        .map(|&(a, b)| !at_origin || moment_power(a, b, gamma) < beta)
        .collect();
    let growth = if at_origin {
        CENTRAL
            .iter()
            .map(|&(a, b)| moment_power(a, b, gamma))
            .filter(|&m| m < beta)
            .fold(gamma.max(1.0), f64::max)
    } else {
        3.0f64.max(3.0 * gamma)
    };

    let zs = fp.z_sum.value;
    let mt = fp.mean_tau.value;
    let mp = fp.mean_psibar.value;
    let ln_mass = fp.mass.value.ln();
    let ln_zs = ln_mass + fp.log_z.value;
    let sums = cylinder_sum(table, u, s, growth, |c| {
        let m = c.p * c.x.exp() / zs;
        let dp = c.psibar - mp;
        let dt = c.tau - mt;
        [
            m,
            m * dp,
            m * dt,
            m * dp * dp,
            m * dp * dt,
            m * dt * dt,
            m * dp * dp * dp,
            m * dp * dp * dt,
            m * dp * dt * dt,
            m * dt * dt * dt,
            if m > 0.0 { m * (c.log_p + c.x - ln_zs) } else { 0.0 },
            m * c.log_p,
        ]
    });
    let rel_z = fp.z_sum.abs_error / zs;
    let scaled = |v: SeriesValue| SeriesValue::new(v.value, v.abs_error + v.value.abs() * rel_z);
    let total = scaled(sums[0]);
    let eps_p = sums[1].value;
    let eps_t = sums[2].value;
    let raw_central: Vec<SeriesValue> = (0..7).map(|k| scaled(sums[3 + k])).collect();
    let get = |a: usize, b: usize| -> f64 {
        match (a, b) {
            (0, 0) => 1.0,
            (1, 0) | (0, 1) => 0.0,
            _ => raw_central[central_slot(a, b).unwrap()].value,
        }
    };
    let mut central = [None; 7];
    for (k, &(a, b)) in CENTRAL.iter().enumerate() {
        if !finite[k] {
            continue;
        }
        let v = raw_central[k];
        let ma = if a > 0 { get(a - 1, b) } else { 0.0 };
        let mb = if b > 0 { get(a, b - 1) } else { 0.0 };
        let corrected = v.value - a as f64 * eps_p * ma - b as f64 * eps_t * mb;
        let err = v.abs_error
            + a as f64 * ma.abs() * (fp.mean_psibar.abs_error + sums[1].abs_error)
            + b as f64 * mb.abs() * (fp.mean_tau.abs_error + sums[2].abs_error);
        central[k] = Some(SeriesValue::new(corrected, err));
    }
    let entropy = SeriesValue::new(-sums[10].value, scaled(sums[10]).abs_error + f64::EPSILON * sums[10].value.abs());
    let mlp = SeriesValue::new(sums[11].value - ln_mass, scaled(sums[11]).abs_error + fp.mass.abs_error);
    Ok(TiltedMeasure {
        table,
        u,
        s,
        log_z: fp.log_z,
        total,
        mean_tau: SeriesValue::new(mt + eps_t, fp.mean_tau.abs_error),
        mean_psibar: SeriesValue::new(mp + eps_p, fp.mean_psibar.abs_error),
        entropy,
        mean_log_p: mlp,
        central,
        raw: OnceLock::new(),
    })
}

impl<'a> TiltedMeasure<'a> {
    pub fn table(&self) -> &'a CylinderTable {
        self.table
    }

    /// `E_m[(psibar - E psibar)^a (tau - E tau)^b]` for `2 <= a + b <= 3`.
    pub fn central(&self, a: usize, b: usize) -> Result<SeriesValue> {
        let k = central_slot(a, b).ok_or(Error::UnsupportedOrder { order_s: a, order_u: b })?;
        self.central[k].ok_or_else(|| infinite_moment(format!("E[psibar^{a} tau^{b}]"), a, b, self.table))
    }

    /// `E_m[ln p + s psibar - u tau] + entropy`, which equals `pbar(u, s)`
    /// and therefore vanishes on the pressure curve.
    pub fn gibbs_residual(&self) -> f64 {
        self.entropy.value + self.mean_log_p.value + self.s * self.mean_psibar.value
            - self.u * self.mean_tau.value
    }

    /// `E_m[tau^j psi0^k]` with `psi0 = C1 tau^gamma`, for `j, k <= 4`.
    /// Computed on first use for all pairs at once.
    pub fn raw_moment(&self, j: usize, k: usize) -> Result<SeriesValue> {
        if j > 4 || k > 4 {
            return Err(Error::UnsupportedOrder { order_s: k, order_u: j });
        }
        let cache = self.raw.get_or_init(|| self.compute_raw());
        cache[j * 5 + k].ok_or_else(|| {
            let gamma = self.table.potential().gamma;
            Error::InfiniteMoment {
                what: format!("E[tau^{j} psi0^{k}]"),
                condition: format!("{j} + {k}*gamma < beta, but {} >= {}", j as f64 + k as f64 * gamma, self.table.beta()),
            }
        })
    }

    fn compute_raw(&self) -> Vec<Option<SeriesValue>> {
        let t = self.table;
        let pot = t.potential();
        let at_origin = self.u == 0.0 && self.s == 0.0;
        let beta = t.beta();
        let powers: Vec<f64> = (0..25).map(|i| (i / 5) as f64 + (i % 5) as f64 * pot.gamma).collect();
        let growth = if at_origin {
            powers.iter().cloned().filter(|&m| m < beta).fold(0.0, f64::max)
        } else {
            4.0 + 4.0 * pot.gamma
        };
        // The tail integral runs with the largest finite power; divergent
        // slots are discarded below.
        let zs = (self.log_z.value).exp();
        let sums = cylinder_sum(t, self.u, self.s, growth, |c| {
            let m = c.p * c.x.exp() / zs;
            let psi0 = pot.c1 * c.tau.powf(pot.gamma);
            let mut out = [0.0; 25];
            let mut tj = m;
            for j in 0..5 {
                let mut v = tj;
                for k in 0..5 {
                    out[j * 5 + k] = v;
                    v *= psi0;
                }
                tj *= c.tau;
            }
            out
        });
        let scale = 1.0 / self.total.value;
        sums.iter()
            .zip(&powers)
            .map(|(v, &m)| {
                if at_origin && m >= beta {
                    None
                } else {
                    Some(SeriesValue::new(v.value * scale, v.abs_error * scale + v.value.abs() * self.total.abs_error))
                }
            })
            .collect()
    }
}

/// Mixed partial `d^{i+j} pbar / ds^i du^j`: the joint cumulant of
/// `(psibar, -tau)` under the tilt.
pub fn partials(table: &CylinderTable, u: f64, s: f64, order_s: usize, order_u: usize) -> Result<SeriesValue> {
    if order_s > 3 || order_u > 2 || order_s + order_u > 3 {
        return Err(Error::UnsupportedOrder { order_s, order_u });
    }
    if order_s + order_u == 0 {
        return log_partition(table, u, s);
    }
    let m = tilt(table, u, s)?;
    cumulant(&m, order_s, order_u)
}

/// Joint cumulant of `(psibar, -tau)` from an existing tilt.
pub fn cumulant(m: &TiltedMeasure<'_>, order_s: usize, order_u: usize) -> Result<SeriesValue> {
    let sign = if order_u % 2 == 1 { -1.0 } else { 1.0 };
    let v = match (order_s, order_u) {
        (1, 0) => m.mean_psibar,
        (0, 1) => m.mean_tau,
        (a, b) => m.central(a, b)?,
    };
    Ok(SeriesValue::new(sign * v.value, v.abs_error))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MomentKind {
    /// `int tau^{gamma+1} e^{-u tau}`.
    TauGammaPlusOne,
    /// `int tau^{2 gamma} e^{-u tau}`.
    TauTwoGamma,
    /// `int tau^{2 gamma + 1} e^{-u tau}`.
    TauTwoGammaPlusOne,
    /// `int psibar^2 e^{s psibar}`.
    PsibarSquared,
    /// `int psibar^3 e^{s psibar}`.
    PsibarCubed,
}

impl MomentKind {
    /// Power of `tau` in the integrand.
    fn power(&self, gamma: f64) -> f64 {
        match self {
            MomentKind::TauGammaPlusOne => gamma + 1.0,
            MomentKind::TauTwoGamma | MomentKind::PsibarSquared => 2.0 * gamma,
            MomentKind::TauTwoGammaPlusOne => 2.0 * gamma + 1.0,
            MomentKind::PsibarCubed => 3.0 * gamma,
        }
    }

    fn in_s(&self) -> bool {
        matches!(self, MomentKind::PsibarSquared | MomentKind::PsibarCubed)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticsFit {
    pub kind: MomentKind,
    /// Slope of `ln |M|` against `ln u` (or of `M` against `ln(1/u)` for the
    /// logarithmic case).
    pub slope: f64,
    pub intercept: f64,
    /// Exponent predicted from the tail law: `beta - power` for `tau`
    /// moments, `beta/gamma - power/gamma` for `psibar` moments; zero when
    /// the moment stays finite.
    pub theory_exponent: f64,
    pub log_law: bool,
    pub max_rel_residual: f64,
    pub fit: LineFit,
    pub values: Vec<f64>,
}

/// Single moment `M(u)` (or `M(s)` for the `psibar` kinds).
pub fn moment_value(table: &CylinderTable, kind: MomentKind, x: f64) -> Result<SeriesValue> {
    let pot = table.potential();
    let a = kind.power(pot.gamma);
    let (u, s) = if kind.in_s() { (0.0, x) } else { (x, 0.0) };
    check_domain(table, u, s)?;
    if x <= 0.0 {
        return Err(Error::OutOfDomain(format!("moment parameter must be positive, got {x}")));
    }
    let [v] = match kind {
        MomentKind::PsibarSquared => cylinder_sum(table, u, s, a, |c| [c.p * c.psibar * c.psibar * c.x.exp()]),
        MomentKind::PsibarCubed => cylinder_sum(table, u, s, a, |c| [c.p * c.psibar.powi(3) * c.x.exp()]),
        _ => cylinder_sum(table, u, s, a, |c| [c.p * c.tau.powf(a) * c.x.exp()]),
    };
    Ok(v)
}

/// Regression of a Laplace-type moment against its small-parameter law.
pub fn moment_asymptotics_check(table: &CylinderTable, kind: MomentKind, grid: &[f64]) -> Result<AsymptoticsFit> {
    if grid.len() < 12 {
        return Err(Error::InsufficientRange(format!("need >= 12 grid points, got {}", grid.len())));
    }
    if grid.iter().any(|&x| !(x > 0.0 && x <= 0.1)) {
        return Err(Error::InsufficientRange("grid must lie in (0, 0.1]".into()));
    }
    if decades(grid) < 1.0 {
        return Err(Error::InsufficientRange("grid spans less than one decade".into()));
    }
    let pot = table.potential();
    let beta = table.beta();
    let power = kind.power(pot.gamma);
    let values: Vec<f64> = grid
        .iter()
        .map(|&x| moment_value(table, kind, x).map(|v| v.value))
        .collect::<Result<_>>()?;
    let (raw_exp, log_law) = if kind.in_s() {
        ((beta - power) / pot.gamma, ((beta - power) / pot.gamma).abs() < 1e-12)
    } else {
        (beta - power, (beta - power).abs() < 1e-12)
    };
    let theory_exponent = if raw_exp < 0.0 && !log_law { raw_exp } else { 0.0 };
    if log_law {
        let lx: Vec<f64> = grid.iter().map(|x| (1.0 / x).ln()).collect();
        let fit = line_fit(&lx, &values)?;
        let max_rel_residual = lx
            .iter()
            .zip(&values)
            .map(|(l, v)| ((v - fit.intercept - fit.slope * l) / v).abs())
            .fold(0.0, f64::max);
        return Ok(AsymptoticsFit {
            kind,
            slope: fit.slope,
            intercept: fit.intercept,
            theory_exponent,
            log_law,
            max_rel_residual,
            fit,
            values,
        });
    }
    let mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let fit = loglog_fit(grid, &mags)?;
    let max_rel_residual = fit.max_abs_residual.exp_m1();
    Ok(AsymptoticsFit {
        kind,
        slope: fit.slope,
        intercept: fit.intercept,
        theory_exponent,
        log_law,
        max_rel_residual,
        fit,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fit::log_grid;
    use crate::shiftmodel::{build_synthetic, PotentialSpec};

    fn table(beta: f64, gamma: f64, n: usize) -> CylinderTable {
        build_synthetic(beta, PotentialSpec::new(gamma, 5.0, 1.0), n).unwrap()
    }

    /// Brute-force `sum_{n <= limit} n^{-(beta+1)} e^{w(n)}` in plain f64,
    /// independent of the library's summation path.
    fn brute(beta: f64, limit: u64, w: impl Fn(f64) -> f64) -> f64 {
        let mut s = 0.0;
        for n in (1..=limit).rev() {
            let x = n as f64;
            s += x.powf(-(beta + 1.0)) * w(x).exp();
        }
        s
    }

    #[test]
    fn origin_is_exactly_zero() {
        let t = table(1.5, 1.0, 10_000);
        let v = log_partition(&t, 0.0, 0.0).unwrap();
        assert_eq!(v.value, 0.0);
        assert_eq!(v.abs_error, 0.0);
    }

    #[test]
    fn damped_value_matches_direct_sum() {
        let t = table(1.5, 1.0, 100_000);
        let v = log_partition(&t, 0.1, 0.0).unwrap();
        let z = crate::numerics::zeta::zeta(2.5).value;
        let direct = (brute(1.5, 10_000_000, |x| -0.1 * x) / z).ln();
        assert!((v.value - direct).abs() < 1e-13, "{} vs {direct}", v.value);
        // ln(Li_{5/2}(e^{-1/10}) / zeta(5/2)) to 16 digits.
        assert!((v.value + 0.156_005_266_828_198_26).abs() < 1e-14);
        assert!(v.value < 0.0);
    }

    #[test]
    fn tail_completion_is_honest() {
        // Halving N must move the value by less than the reported error.
        for (u, s) in [(1e-3, 0.0), (2e-2, 1e-2), (1e-4, 1e-3), (0.0, 0.05)] {
            let a = log_partition(&table(1.5, 0.9, 100_000), u, s).unwrap();
            let b = log_partition(&table(1.5, 0.9, 50_000), u, s).unwrap();
            assert!((a.value - b.value).abs() <= a.abs_error.max(b.abs_error), "({u},{s}): {a:?} {b:?}");
        }
    }

    #[test]
    fn divergent_domains() {
        let t = table(1.5, 1.0, 1000);
        assert!(matches!(log_partition(&t, 0.0, -0.01), Err(Error::DivergentSeries { .. })));
        assert!(matches!(log_partition(&t, 0.005, -0.01), Err(Error::DivergentSeries { .. })));
        assert!(log_partition(&t, 0.02, -0.01).is_ok());
        assert!(matches!(log_partition(&t, -0.1, 0.0), Err(Error::DivergentSeries { .. })));
    }

    #[test]
    fn identity_tilt() {
        let t = table(1.5, 1.0, 100_000);
        let m = tilt(&t, 0.0, 0.0).unwrap();
        let b = t.base();
        assert!((m.mean_tau.value - b.tau_star).abs() < 1e-12);
        assert!((m.mean_psibar.value - b.psibar_star).abs() < 1e-12);
        assert!((m.total.value - 1.0).abs() <= m.total.abs_error.max(1e-15));
        // Entropy of p from a direct sum.
        let z = crate::numerics::zeta::zeta(2.5).value;
        let mut h = 0.0;
        for n in (1..=20_000_000u64).rev() {
            let p = (n as f64).powf(-2.5) / z;
            h -= p * p.ln();
        }
        assert!((m.entropy.value - h).abs() < 1e-8, "{} vs {h}", m.entropy.value);
        assert!(m.entropy.value > 0.0);
    }

    #[test]
    fn tilted_mean_tau_against_direct_sum() {
        let t = table(1.5, 1.0, 100_000);
        let m = tilt(&t, 0.02, 0.01).unwrap();
        let w = |x: f64| 0.01 * (5.0 - x) - 0.02 * x;
        let num = {
            let mut s = 0.0;
            for n in (1..=5_000u64).rev() {
                let x = n as f64;
                s += x.powf(-1.5) * w(x).exp();
            }
            s
        };
        let den = brute(1.5, 5_000, w);
        assert!(m.mean_tau.value.is_finite());
        assert!((m.mean_tau.value - num / den).abs() < 1e-12);
        assert!(m.mean_tau.value < t.base().tau_star);
    }

    #[test]
    fn first_partials_at_origin() {
        let t = table(1.5, 1.0, 100_000);
        let ds = partials(&t, 0.0, 0.0, 1, 0).unwrap();
        let du = partials(&t, 0.0, 0.0, 0, 1).unwrap();
        assert!((ds.value - 3.0526).abs() < 1e-4);
        assert!((du.value + 1.9474).abs() < 1e-4);
        assert!((ds.value - t.base().psibar_star).abs() < 1e-12);
    }

    #[test]
    fn infinite_second_moment_reported() {
        let t = table(1.5, 1.0, 10_000);
        let err = partials(&t, 0.0, 0.0, 0, 2).unwrap_err();
        assert!(matches!(err, Error::InfiniteMoment { .. }), "{err:?}");
        assert!(partials(&t, 1e-3, 0.0, 0, 2).is_ok());
        assert!(matches!(partials(&t, 0.1, 0.0, 3, 1), Err(Error::UnsupportedOrder { .. })));
    }

    #[test]
    fn cumulants_match_finite_differences() {
        let t = table(1.5, 0.9, 100_000);
        let (u, s) = (0.02, 0.05);
        let h = 1e-3;
        let f = |x: f64| log_partition(&t, u, x).unwrap().value;
        let d1 = |h: f64| (f(s + h) - f(s - h)) / (2.0 * h);
        let rich1 = (4.0 * d1(h / 2.0) - d1(h)) / 3.0;
        let k1 = partials(&t, u, s, 1, 0).unwrap().value;
        assert!(((rich1 - k1) / k1).abs() < 1e-6, "{rich1} {k1}");
        let g = |x: f64| partials(&t, u, x, 1, 0).unwrap().value;
        let d2 = |h: f64| (g(s + h) - g(s - h)) / (2.0 * h);
        let rich2 = (4.0 * d2(h / 2.0) - d2(h)) / 3.0;
        let k2 = partials(&t, u, s, 2, 0).unwrap().value;
        assert!(((rich2 - k2) / k2).abs() < 1e-6, "{rich2} {k2}");
        let hh = |x: f64| partials(&t, u, x, 2, 0).unwrap().value;
        let d3 = |h: f64| (hh(s + h) - hh(s - h)) / (2.0 * h);
        let rich3 = (4.0 * d3(h / 2.0) - d3(h)) / 3.0;
        let k3 = partials(&t, u, s, 3, 0).unwrap().value;
        assert!(((rich3 - k3) / k3).abs() < 1e-6, "{rich3} {k3}");
        // Mixed derivative in u.
        let gu = |x: f64| partials(&t, x, s, 1, 0).unwrap().value;
        let du = (gu(u + 1e-5) - gu(u - 1e-5)) / 2e-5;
        let k11 = partials(&t, u, s, 1, 1).unwrap().value;
        assert!(((du - k11) / k11).abs() < 1e-6, "{du} {k11}");
    }

    #[test]
    fn convex_in_s_and_decreasing_in_u() {
        let t = table(1.5, 0.6, 50_000);
        let u = 0.01;
        let grid: Vec<f64> = (0..20).map(|i| 0.01 * i as f64).collect();
        let vals: Vec<SeriesValue> = grid.iter().map(|&s| log_partition(&t, u, s).unwrap()).collect();
        for w in vals.windows(3) {
            let second = w[0].value - 2.0 * w[1].value + w[2].value;
            assert!(second >= -(w[0].abs_error + 2.0 * w[1].abs_error + w[2].abs_error));
        }
        let us: Vec<f64> = log_grid(1e-4, 0.1, 12);
        let vals: Vec<f64> = us.iter().map(|&u| log_partition(&t, u, 0.02).unwrap().value).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn raw_moments() {
        let t = table(1.5, 1.0, 20_000);
        let m = tilt(&t, 0.0, 0.0).unwrap();
        assert!((m.raw_moment(0, 0).unwrap().value - 1.0).abs() < 1e-14);
        assert!((m.raw_moment(1, 0).unwrap().value - t.base().tau_star).abs() < 1e-12);
        assert!(matches!(m.raw_moment(1, 1), Err(Error::InfiniteMoment { .. })));
        let m = tilt(&t, 0.05, 0.0).unwrap();
        let v = m.raw_moment(2, 1).unwrap().value;
        let direct = brute(1.5, 20_000, |x| -0.05 * x + 3.0 * x.ln()) / brute(1.5, 20_000, |x| -0.05 * x);
        assert!((v / direct - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tauberian_exponents() {
        let grid = log_grid(1e-4, 1e-2, 16);
        let t = table(1.5, 0.9, 100_000);
        let f = moment_asymptotics_check(&t, MomentKind::TauGammaPlusOne, &grid).unwrap();
        assert!((f.theory_exponent + 0.4).abs() < 1e-12);
        assert!((f.slope + 0.4).abs() < 0.03, "{}", f.slope);

        let t = table(1.5, 0.75, 100_000);
        let f = moment_asymptotics_check(&t, MomentKind::TauTwoGamma, &grid).unwrap();
        assert!(f.log_law);
        assert!(f.max_rel_residual < 0.05);

        let t = table(1.5, 0.6, 100_000);
        let f = moment_asymptotics_check(&t, MomentKind::TauTwoGamma, &log_grid(1e-8, 1e-5, 12)).unwrap();
        assert_eq!(f.theory_exponent, 0.0);
        assert!(f.slope.abs() < 0.05, "{}", f.slope);

        assert!(matches!(
            moment_asymptotics_check(&t, MomentKind::TauTwoGamma, &grid[..8]),
            Err(Error::InsufficientRange(_))
        ));
    }

    #[test]
    fn psibar_moment_law() {
        // beta/gamma = 2.5: int psibar^3 e^{s psibar} = const - C s^{-1/2} + ...,
        // so successive differences isolate the singular part.
        let t = table(1.5, 0.6, 100_000);
        let grid = log_grid(1e-6, 1e-3, 12);
        let f = moment_asymptotics_check(&t, MomentKind::PsibarCubed, &grid).unwrap();
        assert!((f.theory_exponent + 0.5).abs() < 1e-12);
        // Reference from an independent quadrature of the same series.
        assert!((f.values[0] / -2128.96542 - 1.0).abs() < 1e-6, "{}", f.values[0]);
        let diffs: Vec<f64> = f.values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let d = loglog_fit(&grid[..11], &diffs).unwrap();
        assert!((d.slope + 0.5).abs() < 0.02, "{}", d.slope);
    }
}
