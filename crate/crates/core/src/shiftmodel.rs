//! Induced Gibbs–Markov systems as cylinder tables.
//!
//! A [`CylinderTable`] stores the first `N` cylinders of a full-branch
//! Markov map explicitly (weight, roof, induced potential) and models the
//! rest by a continuous power-law density `coef * x^{-(beta+1)}` with roof
//! `x` and potential `C0 - C1 x^gamma`, so every sum over cylinders can be
//! completed analytically.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::fit::{decades, log_grid, loglog_fit, LineFit};
use crate::numerics::sum::Compensated;
use crate::numerics::zeta::{power_tail, zeta};

/// Upper end of the admissible window for the perturbation parameter `s`.
pub const DELTA0: f64 = 0.25;

/// `mu(tau >= x) ~ c x^{-beta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailLaw {
    pub beta: f64,
    pub c: f64,
}

impl TailLaw {
    pub fn asymptotic_mass(&self, x: f64) -> f64 {
        self.c * x.powf(-self.beta)
    }
}

/// Induced potential `psibar = C0 - C1 tau^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub gamma: f64,
    #[serde(rename = "C0")]
    pub c0: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
}

impl PotentialSpec {
    pub fn new(gamma: f64, c0: f64, c1: f64) -> Self {
        PotentialSpec { gamma, c0, c1 }
    }

    #[inline]
    pub fn psibar(&self, tau: f64) -> f64 {
        self.c0 - self.c1 * tau.powf(self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "FIRSTMAIN")]
    FirstMain,
    #[serde(rename = "SECMAIN_A")]
    SecMainA,
    #[serde(rename = "SECMAIN_B")]
    SecMainB,
    #[serde(rename = "GAMMA1")]
    Gamma1,
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::FirstMain => "FIRSTMAIN",
            Regime::SecMainA => "SECMAIN_A",
            Regime::SecMainB => "SECMAIN_B",
            Regime::Gamma1 => "GAMMA1",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeTag {
    pub label: Regime,
    pub claimed_rho: f64,
}

impl RegimeTag {
    /// Classifies `(beta, gamma)`.
    ///
    /// Admissible exponents satisfy `gamma in (beta - 1, beta)`; `gamma = 1`
    /// is admitted for every `beta > 1`.
    pub fn classify(beta: f64, gamma: f64) -> Result<RegimeTag> {
        if !(beta > 1.0) || !beta.is_finite() {
            return Err(Error::RejectedSpec(format!("beta = {beta} must exceed 1")));
        }
        let unit = gamma == 1.0;
        if !unit && !(gamma > beta - 1.0 && gamma < beta) {
            return Err(Error::RejectedSpec(format!(
                "gamma = {gamma} outside ({}, {beta}) and not equal to 1",
                beta - 1.0
            )));
        }
        if unit && beta < 2.0 {
            return Ok(RegimeTag { label: Regime::Gamma1, claimed_rho: (beta - 1.0) / beta });
        }
        let q = beta / gamma;
        let tag = if q > 3.0 {
            RegimeTag { label: Regime::FirstMain, claimed_rho: 0.5 }
        } else if q > 2.0 && q < 3.0 {
            RegimeTag { label: Regime::SecMainB, claimed_rho: 0.5 }
        } else if q > 1.0 && q <= 2.0 {
            let d = beta - gamma;
            RegimeTag { label: Regime::SecMainA, claimed_rho: d / (d + 1.0) }
        } else {
            return Err(Error::RejectedSpec(format!("beta/gamma = {q} matches no regime")));
        };
        Ok(tag)
    }
}

/// Exact base quantities of the unperturbed measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaseConstants {
    /// `E[tau]`.
    pub tau_star: f64,
    /// `E[psibar]`.
    pub psibar_star: f64,
    /// `psibar_star / tau_star`, the flow integral of `psi` at `s = 0`.
    pub a0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TableKind {
    Synthetic,
    Empirical,
}

#[derive(Debug, Clone)]
pub struct CylinderTable {
    pub(crate) weights: Vec<f64>,
    pub(crate) log_weights: Vec<f64>,
    pub(crate) roofs: Vec<f64>,
    pub(crate) psibar: Vec<f64>,
    /// Tail density coefficient: `p(x) = tail_coef * x^{-(beta+1)}` for `x > N`.
    pub(crate) tail_coef: f64,
    tail: TailLaw,
    tail_remainder: f64,
    tail_remainder_err: f64,
    pot: PotentialSpec,
    regime: RegimeTag,
    base: BaseConstants,
    kind: TableKind,
}

/// Sidecar metadata written next to the CSV dump.
#[derive(Debug, Clone, Serialize)]
pub struct TableSidecar {
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "C0")]
    pub c0: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub tail_remainder: f64,
    pub regime: Regime,
}

fn check_potential(pot: &PotentialSpec) -> Result<()> {
    if !(pot.c0 > 0.0) || !(pot.c1 > 0.0) {
        return Err(Error::RejectedSpec(format!(
            "C0 = {} and C1 = {} must both be positive",
            pot.c0, pot.c1
        )));
    }
    Ok(())
}

fn gm1_gate(base: &BaseConstants, pot: &PotentialSpec) -> Result<()> {
    if !(base.a0 > 0.0) {
        return Err(Error::RejectedSpec(format!(
            "a0 = {:.6} <= 0: C0 = {} does not exceed C1*E[tau^gamma] = {:.6}, so p(s) > 0 fails for small s > 0",
            base.a0,
            pot.c0,
            pot.c0 - base.psibar_star
        )));
    }
    Ok(())
}

/// Full shift with `p_n = n^{-(beta+1)} / zeta(beta+1)` and `tau_n = n`.
pub fn build_synthetic(beta: f64, pot: PotentialSpec, n: usize) -> Result<CylinderTable> {
    let regime = RegimeTag::classify(beta, pot.gamma)?;
    check_potential(&pot)?;
    if n < 100 {
        return Err(Error::RejectedSpec(format!("truncation N = {n} below 100")));
    }
    let sigma = beta + 1.0;
    let z = zeta(sigma);
    let log_z = z.value.ln();
    let base = {
        let tau_star = zeta(beta).value / z.value;
        let psibar_star = pot.c0 - pot.c1 * zeta(sigma - pot.gamma).value / z.value;
        BaseConstants { tau_star, psibar_star, a0: psibar_star / tau_star }
    };
    gm1_gate(&base, &pot)?;

    let mut weights = Vec::with_capacity(n);
    let mut log_weights = Vec::with_capacity(n);
    let mut roofs = Vec::with_capacity(n);
    let mut psibar = Vec::with_capacity(n);
    for k in 1..=n {
        let x = k as f64;
        let lw = -sigma * x.ln() - log_z;
        weights.push(x.powf(-sigma) / z.value);
        log_weights.push(lw);
        roofs.push(x);
        psibar.push(pot.psibar(x));
    }
    let rest = power_tail(sigma, n as u64 + 1);
    let tail_remainder = rest.value / z.value;
    let tail_remainder_err = rest.error / z.value + tail_remainder * z.error / z.value;
    Ok(CylinderTable {
        weights,
        log_weights,
        roofs,
        psibar,
        tail_coef: 1.0 / z.value,
        tail: TailLaw { beta, c: 1.0 / (beta * z.value) },
        tail_remainder,
        tail_remainder_err,
        pot,
        regime,
        base,
        kind: TableKind::Synthetic,
    })
}

/// Table from measured cylinder masses `mu_1..mu_N` (roofs `tau_n = n`) and
/// the measured mass beyond `N`, completed by a power-law tail with exponent
/// `beta`. Masses are renormalized to total one.
pub fn from_cylinder_masses(masses: &[f64], tail_mass: f64, beta: f64, pot: PotentialSpec) -> Result<CylinderTable> {
    let regime = RegimeTag::classify(beta, pot.gamma)?;
    check_potential(&pot)?;
    let n = masses.len();
    if n < 100 {
        return Err(Error::RejectedSpec(format!("truncation N = {n} below 100")));
    }
    if masses.iter().any(|m| !(*m > 0.0)) || !(tail_mass > 0.0) {
        return Err(Error::RejectedSpec("cylinder masses must be positive".into()));
    }
    let mut total = Compensated::new();
    for m in masses {
        total.add(*m);
    }
    total.add(tail_mass);
    let norm = total.value();
    let sigma = beta + 1.0;
    let tail_remainder = tail_mass / norm;
    let rest = power_tail(sigma, n as u64 + 1);
    let tail_coef = tail_remainder / rest.value;

    let weights: Vec<f64> = masses.iter().map(|m| m / norm).collect();
    let log_weights = weights.iter().map(|w| w.ln()).collect();
    let roofs: Vec<f64> = (1..=n).map(|k| k as f64).collect();
    let psibar = roofs.iter().map(|&x| pot.psibar(x)).collect();

    let mut tau = Compensated::new();
    let mut tau_g = Compensated::new();
    for (w, x) in weights.iter().zip(&roofs) {
        tau.add(w * x);
        tau_g.add(w * x.powf(pot.gamma));
    }
    tau.add(tail_coef * power_tail(beta, n as u64 + 1).value);
    tau_g.add(tail_coef * power_tail(sigma - pot.gamma, n as u64 + 1).value);
    let tau_star = tau.value();
    let psibar_star = pot.c0 - pot.c1 * tau_g.value();
    let base = BaseConstants { tau_star, psibar_star, a0: psibar_star / tau_star };
    gm1_gate(&base, &pot)?;

    Ok(CylinderTable {
        weights,
        log_weights,
        roofs,
        psibar,
        tail_coef,
        tail: TailLaw { beta, c: tail_coef / beta },
        tail_remainder,
        tail_remainder_err: rest.error * tail_coef,
        pot,
        regime,
        base,
        kind: TableKind::Empirical,
    })
}

impl CylinderTable {
    pub fn n(&self) -> usize {
        self.weights.len()
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }
    pub fn roofs(&self) -> &[f64] {
        &self.roofs
    }
    pub fn psibar(&self) -> &[f64] {
        &self.psibar
    }
    pub fn tail(&self) -> TailLaw {
        self.tail
    }
    pub fn beta(&self) -> f64 {
        self.tail.beta
    }
    pub fn tail_remainder(&self) -> f64 {
        self.tail_remainder
    }
    pub fn tail_remainder_err(&self) -> f64 {
        self.tail_remainder_err
    }
    pub fn potential(&self) -> PotentialSpec {
        self.pot
    }
    pub fn regime(&self) -> RegimeTag {
        self.regime
    }
    pub fn base(&self) -> BaseConstants {
        self.base
    }
    pub fn kind(&self) -> TableKind {
        self.kind
    }
    pub fn min_roof(&self) -> f64 {
        self.roofs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Weight of cylinder `k >= 1`, using the tail model past `N`.
    pub fn weight_at(&self, k: u64) -> f64 {
        if (k as usize) <= self.n() {
            self.weights[k as usize - 1]
        } else {
            self.tail_coef * (k as f64).powf(-(self.tail.beta + 1.0))
        }
    }

    /// `ln p_k` for any `k >= 1`.
    pub fn log_weight_at(&self, k: u64) -> f64 {
        if (k as usize) <= self.n() {
            self.log_weights[k as usize - 1]
        } else {
            self.tail_coef.ln() - (self.tail.beta + 1.0) * (k as f64).ln()
        }
    }

    /// `sum_{n <= N} p_n + tail_remainder`; one up to rounding.
    pub fn total_mass(&self) -> f64 {
        let mut acc = Compensated::new();
        for w in self.weights.iter().rev() {
            acc.add(*w);
        }
        acc.add(self.tail_remainder);
        acc.value()
    }

    /// `mu(tau >= x)`: exact over stored cylinders plus the analytic tail.
    pub fn tail_mass(&self, x: f64) -> f64 {
        assert!(x >= 1.0, "tail_mass needs x >= 1");
        let n = self.n();
        let mut acc = Compensated::new();
        if x > n as f64 {
            let k = x.ceil() as u64;
            return self.tail_coef * power_tail(self.tail.beta + 1.0, k).value;
        }
        acc.add(self.tail_remainder);
        for (w, t) in self.weights.iter().zip(&self.roofs).rev() {
            if *t >= x {
                acc.add(*w);
            }
        }
        acc.value()
    }

    pub fn sidecar(&self) -> TableSidecar {
        TableSidecar {
            beta: self.tail.beta,
            gamma: self.pot.gamma,
            c0: self.pot.c0,
            c1: self.pot.c1,
            n: self.n(),
            tail_remainder: self.tail_remainder,
            regime: self.regime.label,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n,p_n,tau_n,psibar_n")?;
        for (i, ((p, t), s)) in self.weights.iter().zip(&self.roofs).zip(&self.psibar).enumerate() {
            writeln!(w, "{},{:e},{},{}", i + 1, p, t, s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TailFit {
    pub beta_hat: f64,
    pub max_residual: f64,
    pub fit: LineFit,
}

/// Regression of `ln mu(tau >= x)` on `ln x` over `x_range`.
pub fn fit_tail_exponent(table: &CylinderTable, x_range: (f64, f64)) -> Result<TailFit> {
    let (lo, hi) = x_range;
    if !(lo >= 1.0 && hi > lo) {
        return Err(Error::InsufficientRange(format!("bad range [{lo}, {hi}]")));
    }
    let mut xs: Vec<f64> = log_grid(lo, hi, 25).into_iter().map(|x| x.round()).collect();
    xs.dedup();
    let masses: Vec<f64> = xs.iter().map(|&x| table.tail_mass(x)).collect();
    fit_power_tail(&xs, &masses)
}

/// Power-law exponent of a tail-mass profile.
pub fn fit_power_tail(xs: &[f64], masses: &[f64]) -> Result<TailFit> {
    if xs.len() < 3 || decades(xs) < 1.5 {
        return Err(Error::InsufficientRange(format!(
            "tail fit needs >= 1.5 decades, got {:.3}",
            if xs.is_empty() { 0.0 } else { decades(xs) }
        )));
    }
    if masses.iter().any(|m| !(*m > 0.0)) || masses.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::InsufficientRange("tail masses are constant or vanish".into()));
    }
    let fit = loglog_fit(xs, masses)?;
    Ok(TailFit { beta_hat: -fit.slope, max_residual: fit.max_abs_residual, fit })
}
