//! Named parameter sets for each regime.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shiftmodel::{build_synthetic, CylinderTable, PotentialSpec};

pub const DEFAULT_N: usize = 100_000;
pub const LSV_N: usize = 2000;
pub const LSV_GRID: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Firstmain,
    SecmainA,
    SecmainB,
    Gamma1,
    LsvDemo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Synthetic {
        beta: f64,
        gamma: f64,
        #[serde(rename = "C0")]
        c0: f64,
        #[serde(rename = "C1")]
        c1: f64,
        #[serde(rename = "N")]
        n: usize,
    },
    Lsv {
        alpha: f64,
        gamma: f64,
        #[serde(rename = "C0")]
        c0: f64,
        #[serde(rename = "C1")]
        c1: f64,
        #[serde(rename = "N")]
        n: usize,
        grid: usize,
    },
}

impl ModelSpec {
    pub fn potential(&self) -> PotentialSpec {
        match *self {
            ModelSpec::Synthetic { gamma, c0, c1, .. } | ModelSpec::Lsv { gamma, c0, c1, .. } => {
                PotentialSpec::new(gamma, c0, c1)
            }
        }
    }

    /// Tail exponent; `1/alpha` for the LSV model.
    pub fn beta(&self) -> f64 {
        match *self {
            ModelSpec::Synthetic { beta, .. } => beta,
            ModelSpec::Lsv { alpha, .. } => 1.0 / alpha,
        }
    }
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Firstmain, Preset::SecmainA, Preset::SecmainB, Preset::Gamma1, Preset::LsvDemo];
    pub const SYNTHETIC: [Preset; 4] = [Preset::Firstmain, Preset::SecmainA, Preset::SecmainB, Preset::Gamma1];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Firstmain => "firstmain",
            Preset::SecmainA => "secmain_a",
            Preset::SecmainB => "secmain_b",
            Preset::Gamma1 => "gamma1",
            Preset::LsvDemo => "lsv_demo",
        }
    }

    pub fn from_name(name: &str) -> Result<Preset> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::RejectedSpec(format!("unknown preset {name:?}")))
    }

    pub fn model(&self) -> ModelSpec {
        let syn = |beta, gamma| ModelSpec::Synthetic { beta, gamma, c0: 5.0, c1: 1.0, n: DEFAULT_N };
        match self {
            Preset::Firstmain => syn(1.4, 0.45),
            Preset::SecmainA => syn(1.5, 0.9),
            Preset::SecmainB => syn(1.5, 0.6),
            Preset::Gamma1 => syn(1.5, 1.0),
            Preset::LsvDemo => ModelSpec::Lsv { alpha: 0.75, gamma: 1.0, c0: 5.0, c1: 1.0, n: LSV_N, grid: LSV_GRID },
        }
    }

    /// Synthetic table for the first four presets.
    pub fn table(&self) -> Result<CylinderTable> {
        match self.model() {
            ModelSpec::Synthetic { beta, gamma, c0, c1, n } => build_synthetic(beta, PotentialSpec::new(gamma, c0, c1), n),
            ModelSpec::Lsv { .. } => Err(Error::WrongRegime("lsv_demo has no closed-form table".into())),
        }
    }
}
