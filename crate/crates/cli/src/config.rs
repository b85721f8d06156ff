use std::path::Path;

use flowpress_core::presets::{ModelSpec, Preset};
use flowpress_core::shiftmodel::{RegimeTag, DELTA0};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Log,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub s_min: f64,
    pub s_max: f64,
    pub points: usize,
    pub spacing: Spacing,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { s_min: 1e-4, s_max: 1e-1, points: 16, spacing: Spacing::Log }
    }
}

impl SweepSpec {
    pub fn grid(&self) -> Vec<f64> {
        match self.spacing {
            Spacing::Log => flowpress_core::numerics::fit::log_grid(self.s_min, self.s_max, self.points),
            Spacing::Linear => (0..self.points)
                .map(|i| self.s_min + (self.s_max - self.s_min) * i as f64 / (self.points - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    Tail,
    Blowup2,
    Blowup3,
    Ekp,
    Moments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub which: Vec<FitKind>,
}

impl Default for FitSpec {
    fn default() -> Self {
        FitSpec { which: vec![FitKind::Tail, FitKind::Blowup2, FitKind::Blowup3, FitKind::Ekp, FitKind::Moments] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: String,
    pub formats: Vec<Format>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: "out".into(), formats: vec![Format::Csv, Format::Json] }
    }
}

/// Full experiment description. Missing sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub fits: FitSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

pub fn cmd_preset(name: &str) -> Result<ExperimentConfig, CliError> {
    let preset = Preset::from_name(name).map_err(|_| CliError::UnknownPreset(name.into()))?;
    let mut cfg = ExperimentConfig {
        model: preset.model(),
        sweep: SweepSpec::default(),
        fits: FitSpec::default(),
        output: OutputSpec { dir: format!("out/{name}"), ..OutputSpec::default() },
    };
    if matches!(preset, Preset::LsvDemo) {
        cfg.fits.which.retain(|f| !matches!(f, FitKind::Moments));
    }
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Domain and regime gates, applied before any computation.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let sw = &self.sweep;
        if !(sw.s_min > 0.0 && sw.s_min < sw.s_max) {
            return bad(format!("sweep needs 0 < s_min < s_max, got [{}, {}]", sw.s_min, sw.s_max));
        }
        if sw.s_max > DELTA0 {
            return bad(format!("s_max = {} exceeds delta0 = {DELTA0}", sw.s_max));
        }
        if sw.points < 3 {
            return bad(format!("sweep needs >= 3 points, got {}", sw.points));
        }
        if self.fits.which.contains(&FitKind::Ekp) && (sw.spacing != Spacing::Log || sw.points < 12) {
            return bad("ekp fit needs a logarithmic sweep with >= 12 points".into());
        }
        if self.output.formats.is_empty() {
            return bad("output.formats is empty".into());
        }
        match self.model {
            ModelSpec::Synthetic { beta, gamma, n, .. } => {
                RegimeTag::classify(beta, gamma).map_err(|e| CliError::Config(e.to_string()))?;
                if !(100..=10_000_000).contains(&n) {
                    return bad(format!("N = {n} outside [100, 1e7]"));
                }
            }
            ModelSpec::Lsv { alpha, gamma, n, grid, .. } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return bad(format!("alpha = {alpha} outside (0, 1)"));
                }
                RegimeTag::classify(1.0 / alpha, gamma).map_err(|e| CliError::Config(e.to_string()))?;
                if n == 0 || n > flowpress_core::operator::MAX_BRANCHES {
                    return bad(format!("N = {n} outside [1, 1e4]"));
                }
                if !grid.is_power_of_two() || grid > flowpress_core::operator::MAX_GRID {
                    return bad(format!("grid = {grid} must be a power of two <= 2^14"));
                }
            }
        }
        let pot = self.model.potential();
        if !(pot.c0 > 0.0 && pot.c1 > 0.0) {
            return bad("C0 and C1 must be positive".into());
        }
        Ok(())
    }

    pub fn wants(&self, f: FitKind) -> bool {
        self.fits.which.contains(&f)
    }

    pub fn wants_format(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}
