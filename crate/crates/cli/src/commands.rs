use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use flowpress_core::ekp::{
    counterexample_table, ekp_fit, left_pressure_bound, linear_regime, test_measure_zoo, variational_dominance,
    CurveSample, Envelope, RestrictedPressureCurve, TestMeasure,
};
use flowpress_core::operator::{
    build_lsv, cross_backend, cylinder_weights, leading_eigen, lsv_flow_pressure, write_eigenfunction_csv, CylinderWeights,
    LsvModel,
};
use flowpress_core::oracle::{moment_asymptotics_check, MomentKind};
use flowpress_core::presets::ModelSpec;
use flowpress_core::pressure::{
    blowup_fit, flow_pressure, right_derivative_at_zero, sweep, variance_report, write_sweep_csv, PressurePoint,
};
use flowpress_core::shiftmodel::{build_synthetic, fit_tail_exponent, CylinderTable};
use flowpress_core::numerics::fit::log_grid;
use serde_json::{json, Map, Value};

use crate::config::{ExperimentConfig, FitKind, Format};
use crate::summary::{self, finite_or_flag, to_value};
use crate::CliError;

pub const NORMALIZATION_TOL: f64 = 1e-12;
pub const P_ZERO_TOL: f64 = 1e-12;
pub const GIBBS_TOL: f64 = 1e-10;
pub const DUALITY_TOL: f64 = 1e-9;
pub const ABRAMOV_TOL: f64 = 1e-9;
pub const CONCAVITY_TOL: f64 = 1e-9;
pub const LINEAR_A1_FRACTION: f64 = 0.5;
pub const MOMENT_GRID: (f64, f64, usize) = (1e-4, 1e-2, 16);
pub const CROSS_S: [f64; 3] = [0.02, 0.05, 0.1];
pub const COUNTEREXAMPLE_C: f64 = 1.0;
pub const COUNTEREXAMPLE_RHO: f64 = 1.0 / 3.0;

/// Orbits `1..=100` and the decades up to `1e7`.
pub fn default_k_list() -> Vec<u64> {
    (1..=100).chain([1_000, 10_000, 100_000, 1_000_000, 10_000_000]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    PressureSweep,
    EkpFit,
    Counterexample,
    LeftBound,
    Lsv,
    Moments,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::PressureSweep => "pressure-sweep",
            Command::EkpFit => "ekp-fit",
            Command::Counterexample => "counterexample",
            Command::LeftBound => "left-bound",
            Command::Lsv => "lsv",
            Command::Moments => "moments",
        }
    }
}

/// Command-specific knobs.
#[derive(Debug, Clone)]
pub struct Options {
    pub k_list: Vec<u64>,
    pub envelope: Envelope,
    pub left_s: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            k_list: default_k_list(),
            envelope: Envelope { rho: COUNTEREXAMPLE_RHO, c: COUNTEREXAMPLE_C },
            left_s: -0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Invariant {
    name: &'static str,
    value: f64,
    tol: f64,
    pass: bool,
}

struct Session<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    summary: Map<String, Value>,
    invariants: Vec<Invariant>,
}

struct Lsv {
    model: LsvModel,
    weights: CylinderWeights,
}

impl<'a> Session<'a> {
    fn csv(&self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
        if !self.cfg.wants_format(Format::Csv) {
            return Ok(());
        }
        let path = self.dir.join(name);
        let io = |e| CliError::Io(path.display().to_string(), e);
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        body(&mut w).and_then(|_| w.flush()).map_err(io)
    }

    /// Records `value <= tol`.
    fn check(&mut self, name: &'static str, value: f64, tol: f64) {
        self.invariants.push(Invariant { name, value, tol, pass: value <= tol });
    }

    fn put(&mut self, key: &str, v: Value) {
        self.summary.insert(key.into(), v);
    }

    fn finish(mut self, command: Command) -> Result<(), CliError> {
        let failed: Vec<&'static str> = self.invariants.iter().filter(|i| !i.pass).map(|i| i.name).collect();
        let inv: Vec<Value> = self
            .invariants
            .iter()
            .map(|i| json!({"name": i.name, "value": summary::number(i.value), "tol": i.tol, "pass": i.pass}))
            .collect();
        self.put("invariants", Value::Array(inv));
        self.put("invariants_pass", json!(failed.is_empty()));
        self.put("schema", json!(summary::SCHEMA));
        self.put("command", json!(command.name()));
        self.put("config", to_value(self.cfg));
        if self.cfg.wants_format(Format::Json) {
            summary::write(&self.dir, Value::Object(self.summary))?;
        }
        match failed.first() {
            Some(name) => Err(CliError::Invariant(name.to_string())),
            None => Ok(()),
        }
    }

    fn model_tables(&mut self) -> Result<(CylinderTable, Option<Lsv>), CliError> {
        match self.cfg.model {
            ModelSpec::Synthetic { beta, n, .. } => {
                let table = build_synthetic(beta, self.cfg.model.potential(), n)?;
                Ok((table, None))
            }
            ModelSpec::Lsv { alpha, n, grid, .. } => {
                let model = build_lsv(alpha, n, grid, self.cfg.model.potential())?;
                let weights = cylinder_weights(&model)?;
                let table = weights.to_table(&model)?;
                Ok((table, Some(Lsv { model, weights })))
            }
        }
    }

    fn table_section(&mut self, table: &CylinderTable) -> Result<(), CliError> {
        self.csv("table.csv", |w| table.write_csv(w))?;
        let tag = table.regime();
        let pot = table.potential();
        self.put(
            "regime",
            json!({
                "label": tag.label.label(),
                "claimed_rho": tag.claimed_rho,
                "beta": table.beta(),
                "gamma": pot.gamma,
                "beta_over_gamma": table.beta() / pot.gamma,
            }),
        );
        let mut base = to_value(&table.base()).as_object().cloned().unwrap_or_default();
        base.insert("tail_remainder".into(), json!(table.tail_remainder()));
        base.insert("tail_remainder_err".into(), json!(table.tail_remainder_err()));
        self.put("base", Value::Object(base));
        self.put("table", to_value(&table.sidecar()));
        let mass = table.total_mass();
        self.check("normalization", (mass - 1.0).abs(), NORMALIZATION_TOL);
        let p0 = flow_pressure(table, 0.0)?;
        self.check("p(0) = 0", p0.u0.abs(), P_ZERO_TOL);
        Ok(())
    }

    fn sweep_section(&mut self, table: &CylinderTable) -> Result<Vec<PressurePoint>, CliError> {
        let grid = self.cfg.sweep.grid();
        let points = sweep(table, &grid, 3)?;
        self.csv("sweep.csv", |w| write_sweep_csv(&points, w))?;
        let gibbs = points.iter().map(|p| p.gibbs_residual.abs()).fold(0.0, f64::max);
        let duality = points
            .iter()
            .map(|p| p.duality_residual().abs() / p.u0.abs().max(1.0))
            .fold(0.0, f64::max);
        let abramov = points
            .iter()
            .map(|p| p.abramov_residual().abs() / p.u0.abs().max(1.0))
            .fold(0.0, f64::max);
        self.check("Gibbs identity", gibbs, GIBBS_TOL);
        self.check("Legendre duality", duality, DUALITY_TOL);
        self.check("Abramov consistency", abramov, ABRAMOV_TOL);
        // Second divided differences of p must be positive.
        let convex = points
            .windows(3)
            .map(|w| {
                let l = (w[1].u0 - w[0].u0) / (w[1].s - w[0].s);
                let r = (w[2].u0 - w[1].u0) / (w[2].s - w[1].s);
                2.0 * (r - l) / (w[2].s - w[0].s)
            })
            .fold(f64::INFINITY, f64::min);
        self.invariants.push(Invariant { name: "p convex", value: convex, tol: 0.0, pass: convex > 0.0 });
        let curve = curve_of(table, &points)?;
        self.csv("curve.csv", |w| curve.write_csv(w))?;
        let concave = curve.max_slope_increase();
        self.check("q concave", concave, CONCAVITY_TOL);
        let right = right_derivative_at_zero(table)?;
        let a0 = table.base().a0;
        let budget = |f: &dyn Fn(&PressurePoint) -> Option<f64>| points.iter().filter_map(f).fold(0.0, f64::max);
        self.put(
            "pressure",
            json!({
                "right_derivative_at_zero": right.value,
                "right_derivative_at_zero_err": right.abs_error,
                "a0": a0,
                "right_derivative_gap": (right.value - a0).abs(),
                "right_derivative_gap_err": right.abs_error,
                "s": points.iter().map(|p| p.s).collect::<Vec<_>>(),
                "u0": points.iter().map(|p| p.u0).collect::<Vec<_>>(),
                "u0_err": points.iter().map(|p| p.err.u0).collect::<Vec<_>>(),
                "d1": points.iter().map(|p| p.d1).collect::<Vec<_>>(),
                "d1_err": points.iter().map(|p| p.err.d1).collect::<Vec<_>>(),
            }),
        );
        self.put(
            "margins",
            json!({
                "gibbs_max": gibbs,
                "duality_max_rel": duality,
                "abramov_max_rel": abramov,
                "convexity_min_second_difference": convex,
                "concavity_max_slope_increase": concave,
            }),
        );
        self.put(
            "error_budget",
            json!({
                "u0_max": budget(&|p| Some(p.err.u0)),
                "d1_max": budget(&|p| Some(p.err.d1)),
                "d2_max": budget(&|p| p.err.d2),
                "d3_max": budget(&|p| p.err.d3),
                "q_max": budget(&|p| Some(p.err.q)),
                "tail_remainder": table.tail_remainder_err(),
                "right_derivative_at_zero": right.abs_error,
            }),
        );
        Ok(points)
    }

    fn fits(&mut self, table: &CylinderTable, points: &[PressurePoint], lsv: Option<&Lsv>) -> Result<(), CliError> {
        let grid = self.cfg.sweep.grid();
        let mut fits = Map::new();
        if self.cfg.wants(FitKind::Tail) {
            let v = match lsv {
                Some(l) => to_value(&l.weights.fit),
                None => {
                    let hi = (table.n() as f64 / 10.0).min(1e4);
                    outcome(fit_tail_exponent(table, (10.0, hi)).map(|f| to_value(&f)))
                }
            };
            fits.insert("tail".into(), v);
        }
        for (kind, order, key) in [(FitKind::Blowup2, 2, "blowup2"), (FitKind::Blowup3, 3, "blowup3")] {
            if self.cfg.wants(kind) {
                fits.insert(key.into(), outcome(blowup_fit(table, &grid, order).map(|r| to_value(&r))));
            }
        }
        if self.cfg.wants(FitKind::Ekp) {
            fits.insert("ekp".into(), self.ekp(table, points)?);
        }
        if self.cfg.wants(FitKind::Moments) {
            fits.insert("moments".into(), moments(table)?);
        }
        self.put("fits", Value::Object(fits));
        Ok(())
    }

    fn ekp(&mut self, table: &CylinderTable, points: &[PressurePoint]) -> Result<Value, CliError> {
        let grid = self.cfg.sweep.grid();
        let report = ekp_fit(table, &grid)?;
        let zoo = test_measure_zoo(table)?;
        let curve = curve_of(table, points)?;
        let linear = linear_regime(table, LINEAR_A1_FRACTION, &curve, report.envelope, &zoo)?;
        let dominance = variational_dominance(table, &zoo, points)?;
        let scored: Vec<_> = report.margins.iter().filter(|m| m.in_domain).collect();
        let min_margin = scored.iter().map(|m| m.margin).fold(f64::INFINITY, f64::min);
        let q_slack = dominance.iter().filter_map(|d| d.q_slack).fold(f64::INFINITY, f64::min);
        let support_slack = dominance.iter().map(|d| d.support_slack).fold(f64::INFINITY, f64::min);
        let mut v = to_value(&report);
        let obj = v.as_object_mut().expect("report is an object");
        obj.insert("rho_fit_err".into(), json!(report.rho_ci95));
        obj.insert("linear_regime".into(), to_value(&linear));
        obj.insert("dominance".into(), to_value(&dominance));
        let mut margins = Map::new();
        margins.insert("zoo_size".into(), json!(zoo.len()));
        margins.insert("envelope_scored".into(), json!(scored.len()));
        finite_or_flag(&mut margins, "envelope_min", min_margin);
        finite_or_flag(&mut margins, "dominance_q_min", q_slack);
        finite_or_flag(&mut margins, "dominance_support_min", support_slack);
        margins.insert("linear_min".into(), summary::number(linear.min_margin));
        obj.insert("margin_summary".into(), Value::Object(margins));
        Ok(v)
    }

    fn lsv_section(&mut self, lsv: &Lsv, table: &CylinderTable, full: bool) -> Result<(), CliError> {
        let Lsv { model, weights } = lsv;
        self.csv("ladder.csv", |w| model.write_ladder_csv(w))?;
        self.csv("weights.csv", |w| weights.write_csv(w))?;
        let eig = leading_eigen(model, 0.0, 0.0, 1e-10)?;
        self.csv("eigenfunction.csv", |w| write_eigenfunction_csv(model, &eig, w))?;
        let mass: f64 = weights.masses.iter().sum::<f64>() + weights.tail_mass;
        self.check("cylinder weights normalized", (mass - 1.0).abs(), 1e-10);
        let mut out = Map::new();
        out.insert("lambda".into(), json!(eig.lambda));
        out.insert("lambda_err".into(), json!(eig.lambda * eig.log_lambda_err));
        out.insert("log_lambda_err".into(), json!(eig.log_lambda_err));
        out.insert("tail_bound".into(), json!(eig.tail_bound));
        out.insert("iterations".into(), json!(eig.iterations));
        out.insert("tail_mass".into(), json!(weights.tail_mass));
        out.insert("tail_fit".into(), to_value(&weights.fit));
        let cross: Vec<Value> = CROSS_S
            .iter()
            .filter(|&&s| s >= self.cfg.sweep.s_min && s <= self.cfg.sweep.s_max)
            .map(|&s| cross_backend(model, table, s).map(|c| to_value(&c)))
            .collect::<Result<_, _>>()?;
        out.insert("cross_backend".into(), Value::Array(cross));
        if full {
            let grid = self.cfg.sweep.grid();
            let ps = grid.iter().map(|&s| lsv_flow_pressure(model, s)).collect::<Result<Vec<_>, _>>()?;
            self.csv("lsv_pressure.csv", |w| {
                writeln!(w, "s,u0,err")?;
                for p in &ps {
                    writeln!(w, "{:e},{:e},{:e}", p.s, p.u0, p.err)?;
                }
                Ok(())
            })?;
            let pv: Vec<Value> = ps
                .iter()
                .map(|p| {
                    json!({
                        "s": p.s, "u0": p.u0, "u0_err": p.err,
                        "eigen_err": p.eigen_err, "tail_err": p.tail_err, "refinement_err": p.refinement_err,
                    })
                })
                .collect();
            out.insert("pressure".into(), Value::Array(pv));
        }
        self.put("operator", Value::Object(out));
        Ok(())
    }
}

fn outcome(r: flowpress_core::Result<Value>) -> Value {
    r.unwrap_or_else(|e| json!({ "error": e.to_string() }))
}

fn curve_of(table: &CylinderTable, points: &[PressurePoint]) -> Result<RestrictedPressureCurve, CliError> {
    Ok(RestrictedPressureCurve {
        samples: points.iter().map(|p| CurveSample { a: p.d1, q: p.q, s: p.s }).collect(),
        a0: table.base().a0,
        a_max: flowpress_core::ekp::a_max(table)?,
    })
}

fn moments(table: &CylinderTable) -> Result<Value, CliError> {
    let (lo, hi, n) = MOMENT_GRID;
    let grid = log_grid(lo, hi, n);
    let kinds = [
        ("tau_gamma_plus_one", MomentKind::TauGammaPlusOne),
        ("tau_two_gamma", MomentKind::TauTwoGamma),
        ("tau_two_gamma_plus_one", MomentKind::TauTwoGammaPlusOne),
        ("psibar_squared", MomentKind::PsibarSquared),
        ("psibar_cubed", MomentKind::PsibarCubed),
    ];
    let mut out = Map::new();
    for (name, kind) in kinds {
        let v = outcome(moment_asymptotics_check(table, kind, &grid).map(|f| {
            let mut v = to_value(&f);
            v["x"] = json!(grid);
            v
        }));
        out.insert(name.into(), v);
    }
    let var = variance_report(table)?;
    let mut vm = to_value(&var).as_object().cloned().unwrap_or_default();
    finite_or_flag(&mut vm, "sigma2_paper", var.sigma2_paper);
    finite_or_flag(&mut vm, "sigma2_flow", var.sigma2_flow);
    out.insert("variance".into(), Value::Object(vm));
    Ok(Value::Object(out))
}

fn moments_csv(w: &mut impl Write, v: &Value) -> std::io::Result<()> {
    writeln!(w, "kind,u,value")?;
    if let Value::Object(map) = v {
        for (name, fit) in map {
            if let (Some(xs), Some(ys)) = (fit["x"].as_array(), fit["values"].as_array()) {
                for (x, y) in xs.iter().zip(ys) {
                    writeln!(w, "{name},{:e},{:e}", x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN))?;
                }
            }
        }
    }
    Ok(())
}

pub fn execute(cfg: &ExperimentConfig, dir: &Path, command: Command, opts: &Options) -> Result<(), CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.display().to_string(), e))?;
    let mut session = Session { cfg, dir: dir.to_path_buf(), summary: Map::new(), invariants: Vec::new() };
    if command == Command::Lsv && !matches!(cfg.model, ModelSpec::Lsv { .. }) {
        return Err(CliError::Config("lsv needs an lsv model".into()));
    }
    if matches!(command, Command::Counterexample | Command::LeftBound) && cfg.model.potential().gamma != 1.0 {
        return Err(flowpress_core::Error::WrongRegime(format!(
            "{} needs gamma = 1, config has gamma = {}",
            command.name(),
            cfg.model.potential().gamma
        ))
        .into());
    }
    let (table, lsv) = session.model_tables()?;
    session.table_section(&table)?;
    match command {
        Command::Run => {
            let points = session.sweep_section(&table)?;
            if let Some(l) = &lsv {
                session.lsv_section(l, &table, false)?;
            }
            session.fits(&table, &points, lsv.as_ref())?;
        }
        Command::PressureSweep => {
            session.sweep_section(&table)?;
        }
        Command::EkpFit => {
            let points = session.sweep_section(&table)?;
            let v = session.ekp(&table, &points)?;
            session.put("fits", json!({ "ekp": v }));
        }
        Command::Moments => {
            let v = moments(&table)?;
            session.csv("moments.csv", |w| moments_csv(w, &v))?;
            session.put("fits", json!({ "moments": v }));
        }
        Command::Counterexample => {
            let t = counterexample_table(&table, &opts.k_list, opts.envelope)?;
            session.csv("counterexample.csv", |w| t.write_csv(w))?;
            let far = TestMeasure::orbit(&table, 1_000_000);
            let c1 = table.potential().c1;
            session.put("counterexample", to_value(&t));
            session.put(
                "orbit_limit",
                json!({
                    "k": 1_000_000u64,
                    "int_psi": far.integral_psi,
                    "minus_c1": -c1,
                    "gap": (far.integral_psi + c1).abs(),
                }),
            );
        }
        Command::LeftBound => {
            let b = left_pressure_bound(&table, opts.left_s)?;
            let c1 = table.potential().c1;
            let mut v = to_value(&b);
            v["slope_limit"] = json!(-c1 + opts.left_s.abs());
            v["within_limit"] = json!(b.left_slope_bound <= -c1 + opts.left_s.abs());
            session.put("left_bound", v);
        }
        Command::Lsv => {
            let l = lsv.as_ref().expect("checked above");
            session.lsv_section(l, &table, true)?;
        }
    }
    session.finish(command)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::cmd_preset;

    #[test]
    fn failed_invariant_is_named() {
        let cfg = cmd_preset("gamma1").unwrap();
        let dir = std::env::temp_dir().join(format!("flowpress-inv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut s = Session { cfg: &cfg, dir: dir.clone(), summary: Map::new(), invariants: Vec::new() };
        s.check("Gibbs identity", 1e-16, GIBBS_TOL);
        s.check("Legendre duality", 1e-6, DUALITY_TOL);
        let err = s.finish(Command::PressureSweep).unwrap_err();
        assert!(matches!(&err, CliError::Invariant(n) if n == "Legendre duality"));
        assert_eq!(err.exit_code(), 2);
        let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
        assert_eq!(v["invariants_pass"], false);
        assert_eq!(v["invariants"][1]["pass"], false);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn k_list() {
        let k = default_k_list();
        assert_eq!(k.len(), 105);
        assert_eq!(*k.last().unwrap(), 10_000_000);
    }
}
