//! Restricted pressure `q(a)`, EKP exponent fits, the linear regime and
//! the periodic-orbit counterexample for `gamma = 1`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::fit::{loglog_fit, LineFit};
use crate::numerics::quad::adaptive;
use crate::oracle::tilt;
use crate::pressure::{derivatives, flow_pressure, variance_report, PressurePoint};
use crate::shiftmodel::{CylinderTable, RegimeTag, DELTA0};

/// Points with `Delta P` below this are left out of regressions.
pub const DELTA_P_FLOOR: f64 = 1e-10;
/// Inflation applied to fitted envelope constants.
pub const ENVELOPE_INFLATION: f64 = 1.05;
pub const IDENTITY_TOL: f64 = 1e-6;
/// Lower cut of the Legendre integral, relative to `s`.
const LEGENDRE_CUT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveSample {
    pub a: f64,
    pub q: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RestrictedPressureCurve {
    pub samples: Vec<CurveSample>,
    pub a0: f64,
    pub a_max: f64,
}

impl RestrictedPressureCurve {
    /// Largest increase of the slope `Delta q / Delta a` between neighbours.
    pub fn max_slope_increase(&self) -> f64 {
        let slopes: Vec<f64> = self
            .samples
            .windows(2)
            .map(|w| (w[1].q - w[0].q) / (w[1].a - w[0].a))
            .collect();
        slopes.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "a,q,s")?;
        for c in &self.samples {
            writeln!(w, "{:e},{:e},{:e}", c.a, c.q, c.s)?;
        }
        Ok(())
    }
}

/// `p'(delta0)`, the right end of the sampled domain of `q`.
pub fn a_max(table: &CylinderTable) -> Result<f64> {
    Ok(flow_pressure(table, DELTA0)?.d1)
}

/// `(q(a), s)` with `p'(s) = a`.
pub fn restricted_pressure(table: &CylinderTable, a: f64) -> Result<(f64, f64)> {
    let a0 = table.base().a0;
    let top = a_max(table)?;
    if !(a > a0 && a <= top) {
        return Err(Error::OutOfDomain(format!("a = {a} outside ({a0}, {top}]")));
    }
    if a == top {
        let p = flow_pressure(table, DELTA0)?;
        return Ok((p.q, DELTA0));
    }
    // Safeguarded Newton on x = ln s with d/dx p'(e^x) = s p''(s).
    let f = |x: f64| derivatives(table, x.exp(), 2).map(|p| (p.d1 - a, x.exp() * p.d2.unwrap()));
    let mut lo = 1e-4f64.ln();
    while f(lo)?.0 >= 0.0 {
        lo -= 4.0 * std::f64::consts::LN_10;
        if lo < -300.0 * std::f64::consts::LN_10 {
            return Err(Error::OutOfDomain(format!("a = {a} too close to a0")));
        }
    }
    let mut hi = DELTA0.ln();
    let mut x = 0.5 * (lo + hi);
    let mut converged = false;
    for _ in 0..100 {
        let (g, dg) = f(x)?;
        if g == 0.0 {
            converged = true;
            break;
        }
        if g < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let mut next = x - g / dg;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let dx = (next - x).abs();
        x = next;
        if dx <= 1e-14 * x.abs().max(1.0) || hi - lo <= 1e-14 * x.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations: 100, increment: hi - lo });
    }
    let s = x.exp();
    let p = flow_pressure(table, s)?;
    Ok((p.u0 - s * a, s))
}

/// On-curve samples `(p'(s), p(s) - s p'(s), s)` in grid order.
pub fn curve(table: &CylinderTable, s_grid: &[f64]) -> Result<RestrictedPressureCurve> {
    let samples = s_grid
        .par_iter()
        .map(|&s| flow_pressure(table, s).map(|p| CurveSample { a: p.d1, q: p.q, s }))
        .collect::<Result<Vec<_>>>()?;
    Ok(RestrictedPressureCurve { samples, a0: table.base().a0, a_max: a_max(table)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LegendreCheck {
    pub s: f64,
    /// `s p'(s) - p(s)`.
    pub delta_p: f64,
    /// `int_0^s xi p''(xi) dxi`.
    pub integral: f64,
    pub integral_err: f64,
    pub rel_diff: f64,
}

/// Compares `s p'(s) - p(s)` with the integral of `xi p''(xi)`, done in
/// `t = ln xi` down to `xi = 1e-8 s` plus a power-law remainder.
pub fn legendre_check(table: &CylinderTable, s: f64) -> Result<LegendreCheck> {
    let p = flow_pressure(table, s)?;
    let delta_p = s * p.d1 - p.u0;
    let mut failure = None;
    let mut g = |t: f64| -> f64 {
        let x = t.exp();
        match derivatives(table, x, 2) {
            Ok(q) => x * x * q.d2.unwrap(),
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    };
    let (lo, hi) = ((s * LEGENDRE_CUT).ln(), s.ln());
    let est = adaptive(&mut g, lo, hi, 1e-9 * delta_p, 30);
    let g0 = g(lo);
    let g1 = g(lo + 1.0);
    if let Some(e) = failure {
        return Err(e);
    }
    let kappa = (g1 / g0).ln();
    let remainder = if kappa > 0.0 { g0 / kappa } else { 0.0 };
    let integral = est.value + remainder;
    Ok(LegendreCheck {
        s,
        delta_p,
        integral,
        integral_err: est.error + remainder,
        rel_diff: ((integral - delta_p) / delta_p).abs(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EkpReport {
    pub regime: RegimeTag,
    pub rho_fit: f64,
    pub rho_ci95: f64,
    /// Exponent fitted on the grid with midpoints inserted.
    pub rho_refined: f64,
    pub rho_paper: f64,
    pub rho_oracle_candidate: Option<f64>,
    pub prefactor_fit: f64,
    /// `sqrt(2 sigma^2)` with `sigma^2 = Var(psibar - a0 tau)/tau*`, when finite.
    pub prefactor_clt: Option<f64>,
    pub legendre: LegendreCheck,
    pub s: Vec<f64>,
    pub delta_a: Vec<f64>,
    pub delta_p: Vec<f64>,
    pub fit: LineFit,
    /// Fitted envelope at `rho_fit`, inflated.
    pub envelope: Envelope,
    /// Zoo measures against `envelope`.
    pub margins: Vec<Margin>,
}

fn check_log_grid(grid: &[f64], min_points: usize) -> Result<()> {
    if grid.len() < min_points {
        return Err(Error::InsufficientRange(format!("need >= {min_points} points, got {}", grid.len())));
    }
    if grid.iter().any(|&s| !(s > 0.0 && s <= DELTA0)) {
        return Err(Error::InsufficientRange(format!("grid must lie in (0, {DELTA0}]")));
    }
    let r0 = (grid[1] / grid[0]).ln();
    if r0 <= 0.0 || grid.windows(2).any(|w| ((w[1] / w[0]).ln() - r0).abs() > 1e-6 * r0) {
        return Err(Error::InsufficientRange("grid is not logarithmic and increasing".into()));
    }
    Ok(())
}

fn rho_of(points: &[PressurePoint], a0: f64) -> Result<(LineFit, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut s = Vec::new();
    let mut da = Vec::new();
    let mut dp = Vec::new();
    for p in points {
        let delta_p = -p.q;
        if delta_p >= DELTA_P_FLOOR {
            s.push(p.s);
            da.push(p.d1 - a0);
            dp.push(delta_p);
        }
    }
    if s.len() < 3 {
        return Err(Error::InsufficientRange("fewer than 3 points above the Delta P floor".into()));
    }
    Ok((loglog_fit(&dp, &da)?, s, da, dp))
}

/// Regression of `ln Delta a` on `ln Delta P` along the curve, with the
/// Legendre identity checked at `s = 0.05` (or the top of the grid).
pub fn ekp_fit(table: &CylinderTable, s_grid: &[f64]) -> Result<EkpReport> {
    check_log_grid(s_grid, 12)?;
    let a0 = table.base().a0;
    let regime = table.regime();
    let beta = table.beta();
    let mut refined: Vec<f64> = Vec::with_capacity(2 * s_grid.len());
    for w in s_grid.windows(2) {
        refined.push(w[0]);
        refined.push((w[0] * w[1]).sqrt());
    }
    refined.push(*s_grid.last().unwrap());
    let points = refined
        .par_iter()
        .map(|&s| flow_pressure(table, s))
        .collect::<Result<Vec<_>>>()?;
    let coarse: Vec<PressurePoint> = points.iter().step_by(2).cloned().collect();
    let (fit, s, delta_a, delta_p) = rho_of(&coarse, a0)?;
    let (fine, ..) = rho_of(&points, a0)?;
    let s_id = if s_grid[0] <= 0.05 && *s_grid.last().unwrap() >= 0.05 { 0.05 } else { *s_grid.last().unwrap() };
    let legendre = legendre_check(table, s_id)?;
    let var = variance_report(table)?;
    let top = a_max(table)?;
    let on_curve = RestrictedPressureCurve {
        samples: points.iter().map(|p| CurveSample { a: p.d1, q: p.q, s: p.s }).collect(),
        a0,
        a_max: top,
    };
    let envelope = Envelope::fitted(&on_curve, fit.slope);
    let margins = ekp_check(table, &test_measure_zoo(table)?, envelope, top);
    Ok(EkpReport {
        regime,
        rho_fit: fit.slope,
        rho_ci95: fit.slope_ci95,
        rho_refined: fine.slope,
        rho_paper: regime.claimed_rho,
        rho_oracle_candidate: Some((beta - 1.0) / beta),
        prefactor_fit: fit.intercept.exp(),
        prefactor_clt: var.flow_finite.then(|| (2.0 * var.sigma2_flow).sqrt()),
        legendre,
        s,
        delta_a,
        delta_p,
        fit,
        envelope,
        margins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Envelope {
    pub rho: f64,
    pub c: f64,
}

impl Envelope {
    /// Smallest `C` covering the curve samples at exponent `rho`, inflated.
    pub fn fitted(curve: &RestrictedPressureCurve, rho: f64) -> Envelope {
        let c = curve
            .samples
            .iter()
            .filter(|x| -x.q >= DELTA_P_FLOOR)
            .map(|x| (x.a - curve.a0) / (-x.q).powf(rho))
            .fold(0.0, f64::max);
        Envelope { rho, c: c * ENVELOPE_INFLATION }
    }

    pub fn bound(&self, delta_p: f64) -> f64 {
        self.c * delta_p.max(0.0).powf(self.rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "family")]
pub enum MeasureKind {
    Tilted { u: f64, s: f64 },
    Mixture { s1: f64, s2: f64, weight: f64 },
    Orbit { k: u64 },
}

/// Flow-invariant probability measure summarized by its flow functionals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestMeasure {
    pub kind: MeasureKind,
    /// `int psi dnu`.
    pub integral_psi: f64,
    /// `P_nu(phi) = h_F(nu) + int phi dnu`.
    pub free_energy: f64,
}

impl TestMeasure {
    /// Flow projection of the tilted cylinder measure at `(u, s)`.
    pub fn tilted(table: &CylinderTable, u: f64, s: f64) -> Result<Self> {
        let m = tilt(table, u, s)?;
        let b = m.mean_tau.value;
        Ok(TestMeasure {
            kind: MeasureKind::Tilted { u, s },
            integral_psi: m.mean_psibar.value / b,
            free_energy: (m.entropy.value + m.mean_log_p.value) / b,
        })
    }

    /// `w nu_{s1} + (1-w) nu_{s2}`; flow functionals are affine.
    pub fn mixture(table: &CylinderTable, s1: f64, s2: f64, weight: f64) -> Result<Self> {
        let f = |s: f64| -> Result<(f64, f64)> {
            let p = flow_pressure(table, s)?;
            Ok((p.a, p.h_f + p.integral_phi))
        };
        let (a1, f1) = f(s1)?;
        let (a2, f2) = f(s2)?;
        Ok(TestMeasure {
            kind: MeasureKind::Mixture { s1, s2, weight },
            integral_psi: weight * a1 + (1.0 - weight) * a2,
            free_energy: weight * f1 + (1.0 - weight) * f2,
        })
    }

    /// Equidistribution on the periodic flow orbit through cylinder `k`.
    pub fn orbit(table: &CylinderTable, k: u64) -> Self {
        let pot = table.potential();
        let kf = k as f64;
        TestMeasure {
            kind: MeasureKind::Orbit { k },
            integral_psi: pot.psibar(kf) / kf,
            free_energy: table.log_weight_at(k) / kf,
        }
    }
}

/// Upper end of the tilt grid in the zoo; keeps the tilts' `int psi` inside
/// the domain of `q`.
pub const ZOO_TILT_MAX_S: f64 = 0.1;

/// 50 off-curve tilts, 20 pairwise mixtures of equilibria, orbits `k <= 100`.
pub fn test_measure_zoo(table: &CylinderTable) -> Result<Vec<TestMeasure>> {
    let s_tilt = crate::numerics::fit::log_grid(1e-3, ZOO_TILT_MAX_S, 10);
    let factors = [0.5, 0.8, 1.25, 2.0, 4.0];
    let tilts: Vec<(f64, f64)> = s_tilt
        .par_iter()
        .map(|&s| flow_pressure(table, s).map(|p| p.u0))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .zip(&s_tilt)
        .flat_map(|(u0, &s)| factors.iter().map(move |f| (f * u0, s)))
        .collect();
    let mut out = tilts
        .par_iter()
        .map(|&(u, s)| TestMeasure::tilted(table, u, s))
        .collect::<Result<Vec<_>>>()?;
    let s_mix = crate::numerics::fit::log_grid(1e-3, DELTA0, 7);
    let mut pairs = Vec::new();
    for i in 0..s_mix.len() {
        for j in i + 1..s_mix.len() {
            pairs.push((s_mix[i], s_mix[j]));
        }
    }
    pairs.truncate(20);
    out.extend(
        pairs
            .par_iter()
            .map(|&(s1, s2)| TestMeasure::mixture(table, s1, s2, 0.5))
            .collect::<Result<Vec<_>>>()?,
    );
    out.extend((1..=100).map(|k| TestMeasure::orbit(table, k)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Margin {
    pub kind: MeasureKind,
    pub delta_a: f64,
    pub delta_p: f64,
    /// `C Delta P^rho - Delta a`; negative means the envelope is violated.
    pub margin: f64,
    /// `int psi dnu` lies in `(a0, p'(delta0)]`.
    pub in_domain: bool,
    /// `int psi dnu <= a0`: not covered by the inequality, not scored.
    pub left_side: bool,
}

pub fn ekp_check(table: &CylinderTable, measures: &[TestMeasure], envelope: Envelope, a_max: f64) -> Vec<Margin> {
    let a0 = table.base().a0;
    measures
        .iter()
        .map(|m| {
            let delta_a = m.integral_psi - a0;
            let delta_p = -m.free_energy;
            let left_side = delta_a <= 0.0;
            Margin {
                kind: m.kind,
                delta_a,
                delta_p,
                margin: if left_side { 0.0 } else { envelope.bound(delta_p) - delta_a },
                in_domain: !left_side && m.integral_psi <= a_max,
                left_side,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dominance {
    pub kind: MeasureKind,
    /// `min_s [p(s) - P_nu(phi) - s int psi dnu]` over the supporting grid.
    pub support_slack: f64,
    /// `q(a) - P_nu(phi)` when `a` is in the domain of `q`.
    pub q_slack: Option<f64>,
}

/// Variational upper bound `P_nu(phi) <= q(int psi dnu)` for each measure,
/// and `P_nu(phi) + s int psi dnu <= p(s)` along `support`.
pub fn variational_dominance(
    table: &CylinderTable,
    measures: &[TestMeasure],
    support: &[PressurePoint],
) -> Result<Vec<Dominance>> {
    let a0 = table.base().a0;
    let top = a_max(table)?;
    measures
        .par_iter()
        .map(|m| {
            let support_slack = support
                .iter()
                .map(|p| p.u0 - m.free_energy - p.s * m.integral_psi)
                .fold(f64::INFINITY, f64::min);
            let q_slack = if m.integral_psi > a0 && m.integral_psi <= top {
                Some(restricted_pressure(table, m.integral_psi)?.0 - m.free_energy)
            } else {
                None
            };
            Ok(Dominance { kind: m.kind, support_slack, q_slack })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CounterexampleRow {
    pub k: u64,
    pub int_psi: f64,
    pub free_energy: f64,
    /// `a0 - int psi dnu_k - C (-P)^rho`; positive is a violation.
    pub violation_margin: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleTable {
    pub envelope: Envelope,
    pub rows: Vec<CounterexampleRow>,
    pub first_violation: Option<u64>,
}

impl CounterexampleTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,int_psi,free_energy,violation")?;
        for r in &self.rows {
            writeln!(w, "{},{:e},{:e},{}", r.k, r.int_psi, r.free_energy, r.violation)?;
        }
        Ok(())
    }
}

fn require_gamma_one(table: &CylinderTable) -> Result<()> {
    let g = table.potential().gamma;
    if g != 1.0 {
        return Err(Error::WrongRegime(format!("needs gamma = 1, table has gamma = {g}")));
    }
    Ok(())
}

/// Left-side EKP test on periodic orbits `nu_k` of a `gamma = 1` table.
pub fn counterexample_table(table: &CylinderTable, k_list: &[u64], envelope: Envelope) -> Result<CounterexampleTable> {
    require_gamma_one(table)?;
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k > 10_000_000) {
        return Err(Error::OutOfRange(format!("k = {k} outside [1, 1e7]")));
    }
    let a0 = table.base().a0;
    let rows: Vec<CounterexampleRow> = k_list
        .iter()
        .map(|&k| {
            let m = TestMeasure::orbit(table, k);
            let v = a0 - m.integral_psi - envelope.bound(-m.free_energy);
            CounterexampleRow { k, int_psi: m.integral_psi, free_energy: m.free_energy, violation_margin: v, violation: v > 0.0 }
        })
        .collect();
    let first_violation = rows.iter().filter(|r| r.violation).map(|r| r.k).min();
    Ok(CounterexampleTable { envelope, rows, first_violation })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeftBound {
    pub s: f64,
    /// Maximizer over `k <= k_max`.
    pub k_star: u64,
    pub k_max: u64,
    pub finite_max: f64,
    /// `lim_k (ln p_k + s psibar_k)/k = -s C1`.
    pub tail_limit: f64,
    /// Lower bound for `p(s)`.
    pub bound: f64,
    /// Upper bound for `(p(s) - p(0))/s`.
    pub left_slope_bound: f64,
    pub right_slope: f64,
}

pub const LEFT_BOUND_KMAX: u64 = 10_000_000;

/// `p(s) >= sup_k (ln p_k + s psibar_k)/k` for `s < 0`.
pub fn left_pressure_bound(table: &CylinderTable, s: f64) -> Result<LeftBound> {
    require_gamma_one(table)?;
    if !(s < 0.0) {
        return Err(Error::OutOfDomain(format!("left bound needs s < 0, got {s}")));
    }
    let pot = table.potential();
    let value = |k: u64| (table.log_weight_at(k) + s * pot.psibar(k as f64)) / k as f64;
    let (k_star, finite_max) = (1..=LEFT_BOUND_KMAX)
        .into_par_iter()
        .map(|k| (k, value(k)))
        .reduce(|| (0, f64::NEG_INFINITY), |x, y| if y.1 > x.1 || (y.1 == x.1 && y.0 < x.0) { y } else { x });
    let tail_limit = -s * pot.c1;
    let bound = finite_max.max(tail_limit);
    Ok(LeftBound {
        s,
        k_star,
        k_max: LEFT_BOUND_KMAX,
        finite_max,
        tail_limit,
        bound,
        left_slope_bound: bound / s,
        right_slope: table.base().a0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearRegimeBound {
    pub a1: f64,
    pub s1: f64,
    pub eta: f64,
    pub rho: f64,
    /// `max(a0, C0)`.
    pub c_double_prime: f64,
    pub c_fit: f64,
    pub c_prime: f64,
    /// `min_a [q(a0) - q(a) - eta (a - a0)]` over samples with `a > a1`.
    pub min_margin: f64,
    pub samples_checked: usize,
    /// Measures with `Delta a > C' Delta P^rho`.
    pub measures_violating: usize,
    pub measures_checked: usize,
}

pub fn linear_regime(
    table: &CylinderTable,
    a1_fraction: f64,
    curve: &RestrictedPressureCurve,
    envelope: Envelope,
    measures: &[TestMeasure],
) -> Result<LinearRegimeBound> {
    if !(a1_fraction > 0.0 && a1_fraction < 1.0) {
        return Err(Error::OutOfDomain(format!("a1_fraction = {a1_fraction} outside (0, 1)")));
    }
    let a0 = curve.a0;
    let a1 = a0 + a1_fraction * (curve.a_max - a0);
    let (q1, s1) = restricted_pressure(table, a1)?;
    let eta = -q1 / (a1 - a0);
    let mut min_margin = f64::INFINITY;
    let mut samples_checked = 0;
    for c in curve.samples.iter().filter(|c| c.a > a1) {
        min_margin = min_margin.min(-c.q - eta * (c.a - a0));
        samples_checked += 1;
    }
    let c_double_prime = a0.max(table.potential().c0);
    let c_prime = envelope.c.max(2.0 * c_double_prime / (2.0 * eta).powf(envelope.rho));
    let scored: Vec<&TestMeasure> = measures.iter().filter(|m| m.integral_psi > a0).collect();
    let measures_violating = scored
        .iter()
        .filter(|m| m.integral_psi - a0 > c_prime * (-m.free_energy).powf(envelope.rho))
        .count();
    Ok(LinearRegimeBound {
        a1,
        s1,
        eta,
        rho: envelope.rho,
        c_double_prime,
        c_fit: envelope.c,
        c_prime,
        min_margin,
        samples_checked,
        measures_violating,
        measures_checked: scored.len(),
    })
}
