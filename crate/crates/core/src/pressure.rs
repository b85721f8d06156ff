//! Flow pressure `p(s) = u0(s)`, the root of `u -> pbar(u, s)`, and its
//! derivatives by implicit differentiation through `u0`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::fit::{decades, loglog_fit, LineFit};
use crate::numerics::sum::Compensated;
use crate::oracle::{log_partition, log_partition_and_mean_tau, tilt, SeriesValue, TiltedMeasure};
use crate::shiftmodel::{CylinderTable, Regime, DELTA0};

/// Relative bracket width at which bisection hands over to Newton.
pub const BISECTION_REL_WIDTH: f64 = 1e-3;
pub const MAX_NEWTON: usize = 60;
pub const RESIDUAL_TOL: f64 = 1e-12;
/// Relative agreement required between analytic and finite-difference
/// derivatives.
pub const FD_TOL: f64 = 1e-6;
/// Third derivatives are only formed for `s` at or above this.
pub const D3_MIN_S: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointErrors {
    pub u0: f64,
    pub d1: f64,
    pub d2: Option<f64>,
    pub d3: Option<f64>,
    pub h_f: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PressurePoint {
    pub s: f64,
    pub u0: f64,
    pub d1: f64,
    pub d2: Option<f64>,
    pub d3: Option<f64>,
    /// Flow integral of `psi` under the equilibrium state; equals `d1`.
    pub a: f64,
    /// Flow entropy `h_T(m) / E_m[tau]`.
    pub h_f: f64,
    /// `E_m[ln p] / E_m[tau]`, the flow integral of `phi`.
    pub integral_phi: f64,
    /// `p(s) - s a`.
    pub q: f64,
    pub mean_tau: f64,
    /// `|pbar(u0, s)|`.
    pub residual: f64,
    /// Entropy plus `E_m[ln p + s psibar - u0 tau]`.
    pub gibbs_residual: f64,
    pub newton_steps: usize,
    pub err: PointErrors,
}

impl PressurePoint {
    /// `h_F + int phi + s a - p(s)`.
    pub fn abramov_residual(&self) -> f64 {
        self.h_f + self.integral_phi + self.s * self.a - self.u0
    }

    /// `q(p'(s)) + s p'(s) - p(s)`.
    pub fn duality_residual(&self) -> f64 {
        self.q + self.s * self.d1 - self.u0
    }
}

fn check_s(s: f64) -> Result<()> {
    if !(0.0..=DELTA0).contains(&s) {
        return Err(Error::OutOfDomain(format!("s = {s} outside [0, {DELTA0}]")));
    }
    Ok(())
}

struct Root {
    u0: f64,
    err: f64,
    steps: usize,
}

/// Bracket `[0, pbar(0,s)/min tau]`, bisection to relative width, Newton.
fn solve_root(table: &CylinderTable, s: f64) -> Result<Root> {
    if s == 0.0 {
        return Ok(Root { u0: 0.0, err: 0.0, steps: 0 });
    }
    let f = |u: f64| log_partition(table, u, s).map(|v| v.value);
    let top = log_partition(table, 0.0, s)?.value;
    if top <= 0.0 {
        return Err(Error::BracketFailure(format!("pbar(0, {s}) = {top:e} is not positive")));
    }
    let mut lo = 0.0;
    let mut hi = top / table.min_roof();
    if f(hi)? > 0.0 {
        return Err(Error::BracketFailure(format!("pbar({hi}, {s}) still positive")));
    }
    while hi - lo > BISECTION_REL_WIDTH * hi {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut u = 0.5 * (lo + hi);
    for step in 1..=MAX_NEWTON {
        let (v, tau) = log_partition_and_mean_tau(table, u, s)?;
        if v.value == 0.0 {
            return Ok(Root { u0: u, err: v.abs_error / tau.value, steps: step });
        }
        if v.value > 0.0 {
            lo = lo.max(u);
        } else {
            hi = hi.min(u);
        }
        let mut next = u + v.value / tau.value;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let du = next - u;
        u = next;
        if du.abs() <= 4.0 * f64::EPSILON * u.abs() {
            let (v, tau) = log_partition_and_mean_tau(table, u, s)?;
            return Ok(Root { u0: u, err: (v.value.abs() + v.abs_error) / tau.value, steps: step });
        }
    }
    Err(Error::NoConvergence { iterations: MAX_NEWTON, increment: hi - lo })
}

/// Root by bisection alone, to an absolute width; an independent path to
/// compare Newton against.
pub fn flow_pressure_bisection(table: &CylinderTable, s: f64, width: f64) -> Result<f64> {
    check_s(s)?;
    if s == 0.0 {
        return Ok(0.0);
    }
    let top = log_partition(table, 0.0, s)?.value;
    let (lo, hi) = crate::numerics::roots::bisect(
        |u| log_partition(table, u, s).map(|v| v.value),
        0.0,
        top / table.min_roof(),
        width,
        400,
    )?;
    Ok(0.5 * (lo + hi))
}

fn assemble(s: f64, root: &Root, m: &TiltedMeasure<'_>, max_order: usize) -> Result<PressurePoint> {
    let b = m.mean_tau;
    let a = m.mean_psibar;
    let d1 = a.value / b.value;
    let c = |i, j| m.central(i, j);
    // Sensitivity of d1 to an error in u0 is -Cov(X, tau)/E tau.
    let (d2, e2, cov_xt) = if max_order >= 2 {
        let (m20, m11, m02) = (c(2, 0)?, c(1, 1)?, c(0, 2)?);
        let var_x = m20.value - 2.0 * d1 * m11.value + d1 * d1 * m02.value;
        let e_var = m20.abs_error + 2.0 * d1 * m11.abs_error + d1 * d1 * m02.abs_error;
        let d2 = var_x / b.value;
        let cov = m11.value - d1 * m02.value;
        (Some(d2), Some(e_var / b.value + d2 * b.rel_error()), Some(cov))
    } else {
        (None, None, None)
    };
    let e1 = a.abs_error / b.value + d1.abs() * b.rel_error() + cov_xt.map_or(0.0, |v| v.abs() / b.value * root.err);
    let (d3, e3) = if max_order >= 3 {
        let d2v = d2.unwrap();
        let cov = cov_xt.unwrap();
        let (m30, m21, m12, m03) = (c(3, 0)?, c(2, 1)?, c(1, 2)?, c(0, 3)?);
        let k3 = m30.value - 3.0 * d1 * m21.value + 3.0 * d1 * d1 * m12.value - d1.powi(3) * m03.value;
        let ek3 = m30.abs_error
            + 3.0 * d1 * m21.abs_error
            + 3.0 * d1 * d1 * m12.abs_error
            + d1.powi(3) * m03.abs_error;
        let d3 = (k3 - 3.0 * d2v * cov) / b.value;
        let e = ek3 / b.value + 3.0 * e2.unwrap() * cov.abs() / b.value + d3.abs() * b.rel_error();
        (Some(d3), Some(e))
    } else {
        (None, None)
    };
    let h_f = m.entropy.value / b.value;
    let integral_phi = m.mean_log_p.value / b.value;
    let q = root.u0 - s * d1;
    let e_hf = m.entropy.abs_error / b.value + h_f.abs() * b.rel_error();
    Ok(PressurePoint {
        s,
        u0: root.u0,
        d1,
        d2,
        d3,
        a: d1,
        h_f,
        integral_phi,
        q,
        mean_tau: b.value,
        residual: m.log_z.value.abs(),
        gibbs_residual: m.gibbs_residual(),
        newton_steps: root.steps,
        err: PointErrors { u0: root.err, d1: e1, d2: e2, d3: e3, h_f: e_hf, q: root.err + s * e1 },
    })
}

/// `p(s)` with first-order functionals (`a`, `h_F`, `q`).
pub fn flow_pressure(table: &CylinderTable, s: f64) -> Result<PressurePoint> {
    derivatives(table, s, 1)
}

/// `p(s)` with derivatives up to `max_order` from tilted cumulants.
pub fn derivatives(table: &CylinderTable, s: f64, max_order: usize) -> Result<PressurePoint> {
    check_s(s)?;
    if max_order == 0 || max_order > 3 {
        return Err(Error::UnsupportedOrder { order_s: max_order, order_u: 0 });
    }
    let root = solve_root(table, s)?;
    let m = tilt(table, root.u0, s)?;
    assemble(s, &root, &m, max_order)
}

/// `p'(0+)` from analytic `d1` on `s = 1e-4, 1e-6, ...`, Aitken-accelerated.
///
/// The error is the last change of the accelerated sequence.
pub fn right_derivative_at_zero(table: &CylinderTable) -> Result<SeriesValue> {
    let mut d = Vec::new();
    let mut est: Vec<f64> = Vec::new();
    let mut s = 1e-4;
    while s > 1e-60 {
        d.push(flow_pressure(table, s)?.d1);
        if d.len() >= 3 {
            let n = d.len();
            let (x0, x1, x2) = (d[n - 3], d[n - 2], d[n - 1]);
            let den = (x2 - x1) - (x1 - x0);
            est.push(if den != 0.0 { x2 - (x2 - x1).powi(2) / den } else { x2 });
            if est.len() >= 2 {
                let change = (est[est.len() - 1] - est[est.len() - 2]).abs();
                if change < 1e-13 {
                    return Ok(SeriesValue::new(*est.last().unwrap(), change));
                }
            }
        }
        s *= 1e-2;
    }
    let n = est.len();
    Ok(SeriesValue::new(est[n - 1], (est[n - 1] - est[n - 2]).abs()))
}

/// Analytic derivative against a Richardson-extrapolated central
/// difference of the next-lower analytic order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdCheck {
    pub order: usize,
    pub s: f64,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_diff: f64,
    pub agrees: bool,
}

/// Step used by [`fd_check`]: a fixed fraction of `s`.
pub fn fd_step(s: f64) -> f64 {
    1e-3 * s
}

pub fn fd_check(table: &CylinderTable, point: &PressurePoint, order: usize) -> Result<FdCheck> {
    let s = point.s;
    if !(s > 0.0) {
        return Err(Error::OutOfDomain("finite differences need s > 0".into()));
    }
    let g = |x: f64| -> Result<f64> {
        match order {
            1 => Ok(derivatives(table, x, 1)?.u0),
            2 => Ok(derivatives(table, x, 1)?.d1),
            3 => derivatives(table, x, 2)?.d2.ok_or(Error::UnsupportedOrder { order_s: 2, order_u: 0 }),
            _ => Err(Error::UnsupportedOrder { order_s: order, order_u: 0 }),
        }
    };
    let analytic = match order {
        1 => Some(point.d1),
        2 => point.d2,
        _ => point.d3,
    }
    .ok_or(Error::UnsupportedOrder { order_s: order, order_u: 0 })?;
    let h = fd_step(s);
    let d = |h: f64| -> Result<f64> { Ok((g(s + h)? - g(s - h)?) / (2.0 * h)) };
    let fd = (4.0 * d(0.5 * h)? - d(h)?) / 3.0;
    let rel_diff = ((fd - analytic) / analytic).abs();
    Ok(FdCheck { order, s, analytic, finite_difference: fd, rel_diff, agrees: rel_diff < FD_TOL })
}

/// Derivatives plus finite-difference cross-checks of every order formed.
pub fn derivatives_checked(table: &CylinderTable, s: f64, max_order: usize) -> Result<(PressurePoint, Vec<FdCheck>)> {
    let order = if s < D3_MIN_S { max_order.min(2) } else { max_order };
    let point = derivatives(table, s, order)?;
    let checks = if s > 0.0 {
        (1..=order).map(|k| fd_check(table, &point, k)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok((point, checks))
}

/// Derivatives on a grid, in grid order. Third derivatives are dropped
/// below [`D3_MIN_S`].
pub fn sweep(table: &CylinderTable, grid: &[f64], max_order: usize) -> Result<Vec<PressurePoint>> {
    grid.par_iter()
        .map(|&s| {
            let order = if s < D3_MIN_S { max_order.min(2) } else { max_order };
            derivatives(table, s, order)
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(points: &[PressurePoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "s,u0,d1,d2,d3,a,hF,q,err_u0")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    for p in points {
        writeln!(
            w,
            "{:e},{:e},{:e},{},{},{:e},{:e},{:e},{:e}",
            p.s,
            p.u0,
            p.d1,
            opt(p.d2),
            opt(p.d3),
            p.a,
            p.h_f,
            p.q,
            p.err.u0
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct BlowupReport {
    pub order: usize,
    pub regime: Regime,
    pub slope: f64,
    pub slope_ci95: f64,
    pub intercept: f64,
    pub max_residual: f64,
    /// Rate attached to the regime by the theory being tested, where one is
    /// stated.
    pub paper_exponent: Option<f64>,
    /// Rate implied by the exact cumulant formula (`beta - 2` for `p''`).
    pub oracle_candidate: f64,
    pub s: Vec<f64>,
    pub values: Vec<f64>,
    pub fit: LineFit,
}

/// Rate of `p^(k)` stated for a regime.
pub fn paper_blowup_exponent(regime: Regime, beta: f64, gamma: f64, order: usize) -> Option<f64> {
    match (order, regime) {
        (2, Regime::Gamma1) => Some(beta - 2.0),
        (2, Regime::SecMainA) => Some(beta - gamma - 1.0),
        (2, Regime::SecMainB) | (2, Regime::FirstMain) => Some(0.0),
        (3, Regime::SecMainB) => Some(beta - 2.0 * gamma - 1.0),
        (3, Regime::SecMainA) => Some(beta - gamma - 2.0),
        (3, Regime::Gamma1) => Some(beta - 3.0),
        _ => None,
    }
}

/// Log-log regression of `|p^(k)(s)|` on `s`.
pub fn blowup_fit(table: &CylinderTable, s_grid: &[f64], order: usize) -> Result<BlowupReport> {
    if order != 2 && order != 3 {
        return Err(Error::UnsupportedOrder { order_s: order, order_u: 0 });
    }
    if s_grid.iter().any(|&s| !(s > 0.0 && s <= DELTA0)) {
        return Err(Error::InsufficientRange(format!("grid must lie in (0, {DELTA0}]")));
    }
    let grid: Vec<f64> = if order == 3 {
        s_grid.iter().cloned().filter(|&s| s >= D3_MIN_S * (1.0 - 1e-9)).collect()
    } else {
        s_grid.to_vec()
    };
    if grid.len() < 3 || decades(&grid) < 2.0 - 1e-9 {
        return Err(Error::InsufficientRange(format!(
            "blow-up fit needs >= 2 decades, got {:.3}",
            if grid.is_empty() { 0.0 } else { decades(&grid) }
        )));
    }
    let points = sweep(table, &grid, order)?;
    let values: Vec<f64> = points
        .iter()
        .map(|p| if order == 2 { p.d2.unwrap() } else { p.d3.unwrap() })
        .collect();
    let mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let fit = loglog_fit(&grid, &mags)?;
    let regime = table.regime().label;
    let beta = table.beta();
    Ok(BlowupReport {
        order,
        regime,
        slope: fit.slope,
        slope_ci95: fit.slope_ci95,
        intercept: fit.intercept,
        max_residual: fit.max_abs_residual,
        paper_exponent: paper_blowup_exponent(regime, beta, table.potential().gamma, order),
        oracle_candidate: beta - order as f64,
        s: grid,
        values,
        fit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceReport {
    /// `Var_p(psibar) / tau*`; infinite unless `beta/gamma > 2`.
    pub sigma2_paper: f64,
    pub sigma2_paper_err: f64,
    /// `Var_p(psibar - a0 tau) / tau*`; infinite unless `beta > 2`.
    pub sigma2_flow: f64,
    pub sigma2_flow_err: f64,
    /// `2 p''(s) - p''(2s)` at small `s`, when `p''` is flat there.
    pub sigma2_extrapolated: Option<f64>,
    pub sigma2_extrapolated_err: Option<f64>,
    pub paper_finite: bool,
    pub flow_finite: bool,
}

/// Base point of the small-`s` extrapolation of `p''`.
pub const EXTRAPOLATION_S: f64 = 1e-4;

pub fn variance_report(table: &CylinderTable) -> Result<VarianceReport> {
    let beta = table.beta();
    let gamma = table.potential().gamma;
    let base = table.base();
    let m = tilt(table, 0.0, 0.0)?;
    let paper_finite = 2.0 * gamma < beta;
    let flow_finite = paper_finite && beta > 2.0 && gamma + 1.0 < beta;
    let (sigma2_paper, sigma2_paper_err) = if paper_finite {
        let v = m.central(2, 0)?;
        (v.value / base.tau_star, v.abs_error / base.tau_star)
    } else {
        (f64::INFINITY, 0.0)
    };
    let (sigma2_flow, sigma2_flow_err) = if flow_finite {
        let a0 = base.a0;
        let (m20, m11, m02) = (m.central(2, 0)?, m.central(1, 1)?, m.central(0, 2)?);
        let v = m20.value - 2.0 * a0 * m11.value + a0 * a0 * m02.value;
        let e = m20.abs_error + 2.0 * a0 * m11.abs_error + a0 * a0 * m02.abs_error;
        (v / base.tau_star, e / base.tau_star)
    } else {
        (f64::INFINITY, 0.0)
    };
    let s = EXTRAPOLATION_S;
    let p1 = derivatives(table, s, 2)?;
    let p2 = derivatives(table, 2.0 * s, 2)?;
    let (v1, v2) = (p1.d2.unwrap(), p2.d2.unwrap());
    let flat = ((v2 / v1).ln() / 2f64.ln()).abs() < 0.05;
    let (ext, ext_err) = if flat {
        let e = 2.0 * p1.err.d2.unwrap() + p2.err.d2.unwrap() + (v2 - v1).abs() * 0.5;
        (Some(2.0 * v1 - v2), Some(e))
    } else {
        (None, None)
    };
    Ok(VarianceReport {
        sigma2_paper,
        sigma2_paper_err,
        sigma2_flow,
        sigma2_flow_err,
        sigma2_extrapolated: ext,
        sigma2_extrapolated_err: ext_err,
        paper_finite,
        flow_finite,
    })
}

/// Variance of `x` under probability weights `w` (renormalized).
pub fn weighted_variance(w: &[f64], x: &[f64]) -> f64 {
    let mut tot = Compensated::new();
    let mut mean = Compensated::new();
    for (wi, xi) in w.iter().zip(x) {
        tot.add(*wi);
        mean.add(wi * xi);
    }
    let mu = mean.value() / tot.value();
    let mut var = Compensated::new();
    for (wi, xi) in w.iter().zip(x) {
        var.add(wi * (xi - mu) * (xi - mu));
    }
    var.value() / tot.value()
}

/// Value and error of `p(s)` packaged as a series value.
pub fn pressure_value(table: &CylinderTable, s: f64) -> Result<SeriesValue> {
    let p = flow_pressure(table, s)?;
    Ok(SeriesValue::new(p.u0, p.err.u0))
}
