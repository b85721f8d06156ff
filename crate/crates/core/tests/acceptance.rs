//! Acceptance suite: one PASS/FAIL line per criterion, INFO lines for
//! reporting-only quantities. Exits non-zero if any criterion fails.

use std::time::Instant;

use flowpress_core::ekp::{
    counterexample_table, curve, ekp_fit, left_pressure_bound, linear_regime, restricted_pressure, test_measure_zoo,
    variational_dominance, Envelope,
};
use flowpress_core::numerics::fit::log_grid;
use flowpress_core::operator::{build_lsv, cross_backend, cylinder_weights, leading_eigen};
use flowpress_core::oracle::{moment_asymptotics_check, MomentKind};
use flowpress_core::presets::{ModelSpec, Preset};
use flowpress_core::pressure::{
    blowup_fit, derivatives, fd_check, flow_pressure, right_derivative_at_zero, sweep, D3_MIN_S,
};
use flowpress_core::shiftmodel::{build_synthetic, fit_tail_exponent, CylinderTable, PotentialSpec, DELTA0};

struct Report {
    failures: Vec<String>,
    start: Instant,
}

impl Report {
    fn check(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(format!("[{id}] {name}"));
        }
    }

    fn info(&self, id: &str, detail: String) {
        println!("INFO [{id}] {detail}");
    }

    fn lap(&mut self, id: &str) {
        println!("     [{id}] {:.1}s elapsed", self.start.elapsed().as_secs_f64());
    }
}

fn preset_grid() -> Vec<f64> {
    log_grid(1e-4, 1e-1, 16)
}

fn tables() -> Vec<(Preset, CylinderTable)> {
    Preset::SYNTHETIC.iter().map(|&p| (p, p.table().unwrap())).collect()
}

fn c1_identities(r: &mut Report, tables: &[(Preset, CylinderTable)]) {
    for (p, t) in tables {
        let name = p.name();
        let p0 = flow_pressure(t, 0.0).unwrap();
        r.check("1", &format!("{name}: p(0) = 0"), p0.u0 == 0.0, format!("p(0) = {:e}", p0.u0));
        let pts = sweep(t, &preset_grid(), 1).unwrap();
        let gibbs = pts.iter().map(|q| q.gibbs_residual.abs()).fold(0.0, f64::max);
        r.check("1", &format!("{name}: Gibbs saturation at (u0(s), s)"), gibbs < 1e-10, format!("max |residual| = {gibbs:.2e} (tol 1e-10)"));
        let abramov = pts.iter().map(|q| q.abramov_residual().abs()).fold(0.0, f64::max);
        r.check("1", &format!("{name}: Abramov/Kac P(phi + s psi) = p(s)"), abramov < 1e-9, format!("max |residual| = {abramov:.2e} (tol 1e-9)"));
        let mut duality: f64 = 0.0;
        for &s in &[1e-3, 1e-2, 0.05, 0.2] {
            let pt = flow_pressure(t, s).unwrap();
            let (q, _) = restricted_pressure(t, pt.d1).unwrap();
            duality = duality.max((q + s * pt.d1 - pt.u0).abs());
        }
        r.check("1", &format!("{name}: Legendre duality q(p'(s)) + s p'(s) - p(s) = 0"), duality < 1e-9, format!("max |residual| = {duality:.2e} (tol 1e-9)"));
        let lc = flowpress_core::ekp::legendre_check(t, 0.05).unwrap();
        r.check(
            "1",
            &format!("{name}: s p' - p = int_0^s xi p''"),
            lc.rel_diff < 1e-6,
            format!("rel diff = {:.2e} at s = 0.05 (tol 1e-6)", lc.rel_diff),
        );
    }
    r.lap("1");
}

fn c2_fd(r: &mut Report, tables: &[(Preset, CylinderTable)]) {
    for (p, t) in tables {
        let mut worst = [0.0f64; 3];
        let mut count = [0usize; 3];
        for &s in &preset_grid() {
            let order = if s >= D3_MIN_S * (1.0 - 1e-9) { 3 } else { 2 };
            let pt = derivatives(t, s, order).unwrap();
            for k in 1..=order {
                let c = fd_check(t, &pt, k).unwrap();
                worst[k - 1] = worst[k - 1].max(c.rel_diff);
                count[k - 1] += 1;
            }
        }
        for k in 0..3 {
            r.check(
                "2",
                &format!("{}: p^({}) analytic vs Richardson differences", p.name(), k + 1),
                worst[k] < 1e-6,
                format!("max rel diff = {:.2e} over {} grid points (tol 1e-6)", worst[k], count[k]),
            );
        }
    }
    r.lap("2");
}

fn c3_right_derivative(r: &mut Report, tables: &[(Preset, CylinderTable)], lsv_table: &CylinderTable) {
    let all = tables.iter().map(|(p, t)| (p.name(), t)).chain(std::iter::once(("lsv_demo", lsv_table)));
    for (name, t) in all {
        let d = right_derivative_at_zero(t).unwrap();
        let a0 = t.base().a0;
        let diff = (d.value - a0).abs();
        r.check(
            "3",
            &format!("{name}: p'(0+) = psibar*/tau*"),
            diff < 1e-8,
            format!("p'(0+) = {:.12} +- {:.1e}, psibar*/tau* = {a0:.12}, diff {diff:.1e} (tol 1e-8)", d.value, d.abs_error),
        );
    }
    r.lap("3");
}

fn c4_tails(r: &mut Report, tables: &[(Preset, CylinderTable)], lsv_fit: f64) {
    for (p, t) in tables {
        let f = fit_tail_exponent(t, (10.0, 1e4)).unwrap();
        let rel = (f.beta_hat / t.beta() - 1.0).abs();
        r.check("4", &format!("{}: synthetic tail exponent", p.name()), rel < 0.01, format!("beta_hat = {:.5}, beta = {}, rel {rel:.2e} (tol 1%)", f.beta_hat, t.beta()));
    }
    let rel = (lsv_fit / (4.0 / 3.0) - 1.0).abs();
    r.check("4", "lsv alpha=0.75: tail exponent on n in [10, 1e3]", rel < 0.05, format!("beta_hat = {lsv_fit:.5}, 1/alpha = 1.33333, rel {rel:.3} (tol 5%)"));
}

fn c5_tauberian(r: &mut Report) {
    let grid = log_grid(1e-4, 1e-2, 16);
    let t = build_synthetic(1.5, PotentialSpec::new(0.9, 5.0, 1.0), 100_000).unwrap();
    let f = moment_asymptotics_check(&t, MomentKind::TauGammaPlusOne, &grid).unwrap();
    r.check(
        "5",
        "beta=1.5, gamma=0.9: exponent of E[tau^(gamma+1) e^(-u tau)]",
        (f.slope - f.theory_exponent).abs() < 0.03,
        format!("slope = {:.4} +- {:.4}, beta-gamma-1 = {:.4} (tol 0.03)", f.slope, f.fit.slope_ci95, f.theory_exponent),
    );
    let t = build_synthetic(1.5, PotentialSpec::new(0.75, 5.0, 1.0), 100_000).unwrap();
    let f = moment_asymptotics_check(&t, MomentKind::TauTwoGamma, &grid).unwrap();
    r.check(
        "5",
        "beta/gamma = 2: log law for E[tau^(2 gamma) e^(-u tau)]",
        f.log_law && f.max_rel_residual < 0.05,
        format!("slope in ln(1/u) = {:.4}, max rel residual = {:.2e} (tol 5%)", f.slope, f.max_rel_residual),
    );
    r.lap("5");
}

fn c6_gamma1(r: &mut Report, t: &CylinderTable) {
    let near = blowup_fit(t, &log_grid(1e-4, 1e-2, 16), 2).unwrap();
    let wide = blowup_fit(t, &preset_grid(), 2).unwrap();
    r.check(
        "6",
        "gamma1: p'' blow-up exponent (s in [1e-4, 1e-2])",
        (near.slope + 0.5).abs() < 0.03,
        format!("slope = {:.4} +- {:.4}, beta-2 = -0.5 (tol 0.03)", near.slope, near.slope_ci95),
    );
    r.info("6", format!("gamma1: p'' blow-up exponent on [1e-4, 1e-1] = {:.4} +- {:.4}", wide.slope, wide.slope_ci95));
    let e = ekp_fit(t, &preset_grid()).unwrap();
    r.check(
        "6",
        "gamma1: EKP exponent over s in [1e-4, 1e-1]",
        (e.rho_fit - 1.0 / 3.0).abs() < 0.02,
        format!("rho_hat = {:.4} +- {:.4}, (beta-1)/beta = 0.3333 (tol 0.02)", e.rho_fit, e.rho_ci95),
    );
    r.lap("6");
}

fn c7_counterexample(r: &mut Report, t: &CylinderTable) {
    let env = Envelope { rho: 1.0 / 3.0, c: 1.0 };
    let ks: Vec<u64> = (1..=100).chain([1_000_000, 10_000_000]).collect();
    let tab = counterexample_table(t, &ks, env).unwrap();
    r.check(
        "7",
        "gamma1: violating orbit k <= 100 for C=1, rho=1/3",
        tab.first_violation.is_some_and(|k| k <= 100),
        format!("first violating k = {:?}", tab.first_violation),
    );
    let row6 = tab.rows.iter().find(|x| x.k == 1_000_000).unwrap();
    let row7 = tab.rows.iter().find(|x| x.k == 10_000_000).unwrap();
    r.check(
        "7",
        "gamma1: int psi dnu_k -> -C1 at k = 1e6",
        (row6.int_psi + 1.0).abs() < 1e-3,
        format!("int psi = {:.7} (tol 1e-3)", row6.int_psi),
    );
    let limit = t.base().a0 + 1.0;
    r.check(
        "7",
        "gamma1: violation margin increases toward a0 + C1",
        row6.violation_margin < row7.violation_margin && row7.violation_margin < limit,
        format!("margin(1e6) = {:.6}, margin(1e7) = {:.6}, limit = {limit:.6}", row6.violation_margin, row7.violation_margin),
    );
    let b = left_pressure_bound(t, -0.01).unwrap();
    r.check(
        "7",
        "gamma1: left-slope bound at s = -0.01",
        b.left_slope_bound <= -1.0 + 0.01 && b.bound >= 0.0099,
        format!("p(-0.01) >= {:.6}, left slope <= {:.6} <= -C1 + |s| = -0.99 < a0 = {:.4}", b.bound, b.left_slope_bound, b.right_slope),
    );
    r.lap("7");
}

fn c8_shapes(r: &mut Report, tables: &[(Preset, CylinderTable)]) {
    let grid = log_grid(1e-4, DELTA0, 20);
    for (p, t) in tables {
        let c = curve(t, &grid).unwrap();
        let inc = c.max_slope_increase();
        r.check("8", &format!("{}: q concave", p.name()), inc <= 1e-9, format!("max slope increase = {inc:.2e} (tol 1e-9)"));
        let pts: Vec<(f64, f64)> = c.samples.iter().map(|x| (x.s, x.q + x.s * x.a)).collect();
        let slopes: Vec<f64> = pts.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect();
        let min_inc = slopes.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        r.check("8", &format!("{}: p convex", p.name()), min_inc > 0.0, format!("min slope increase = {min_inc:.3e} (> 0)"));
    }
    for (p, t) in tables.iter().filter(|(p, _)| matches!(p, Preset::Gamma1 | Preset::SecmainB)) {
        let zoo = test_measure_zoo(t).unwrap();
        let support = sweep(t, &log_grid(1e-4, DELTA0, 24), 1).unwrap();
        let dom = variational_dominance(t, &zoo, &support).unwrap();
        let worst_support = dom.iter().map(|d| d.support_slack).fold(f64::INFINITY, f64::min);
        let q_checked: Vec<f64> = dom.iter().filter_map(|d| d.q_slack).collect();
        let worst_q = q_checked.iter().cloned().fold(f64::INFINITY, f64::min);
        r.check(
            "8",
            &format!("{}: P_nu(phi) <= q(int psi dnu) + 1e-9 over the zoo", p.name()),
            dom.len() >= 70 && !q_checked.is_empty() && worst_q >= -1e-9 && worst_support >= -1e-9,
            format!(
                "{} measures, {} with int psi in the domain of q; min q slack = {worst_q:.2e}, min support slack = {worst_support:.2e}",
                dom.len(),
                q_checked.len()
            ),
        );
    }
    r.lap("8");
}

fn c9_linear(r: &mut Report, t: &CylinderTable) {
    let c = curve(t, &log_grid(1e-4, DELTA0, 40)).unwrap();
    let env = Envelope::fitted(&c, 1.0 / 3.0);
    let zoo = test_measure_zoo(t).unwrap();
    let lr = linear_regime(t, 0.5, &c, env, &zoo).unwrap();
    r.check(
        "9",
        "gamma1: linear regime beyond a1",
        lr.eta > 0.0 && lr.min_margin >= -1e-9 && lr.samples_checked > 0,
        format!("eta = {:.5}, min margin = {:.2e} over {} samples (tol -1e-9)", lr.eta, lr.min_margin, lr.samples_checked),
    );
    r.info(
        "9",
        format!(
            "C'' = {:.3}, C_fit = {:.4}, C' = {:.4}; {} of {} right-side zoo measures exceed C' dP^rho",
            lr.c_double_prime, lr.c_fit, lr.c_prime, lr.measures_violating, lr.measures_checked
        ),
    );
    r.lap("9");
}

fn c10_lsv(r: &mut Report) -> (f64, CylinderTable) {
    let ModelSpec::Lsv { alpha, gamma, c0, c1, n, grid } = Preset::LsvDemo.model() else { unreachable!() };
    let pot = PotentialSpec::new(gamma, c0, c1);
    let m = build_lsv(alpha, n, grid, pot).unwrap();
    let d = leading_eigen(&m, 0.0, 0.0, 1e-10).unwrap();
    r.check(
        "10",
        "lsv: lambda(0,0) = 1 (grid 2048, N = 2000)",
        (d.lambda - 1.0).abs() < 1e-3,
        format!("lambda = {:.8} +- {:.1e} (tol 1e-3)", d.lambda, d.log_lambda_err),
    );
    let fine = build_lsv(alpha, n, 2 * grid, pot).unwrap();
    let mut worst = 0.0f64;
    let mut ok = true;
    for (u, s) in [(0.0, 0.0), (0.05, 0.05), (0.1, 0.1)] {
        let a = leading_eigen(&m, u, s, 1e-10).unwrap();
        let b = leading_eigen(&fine, u, s, 1e-10).unwrap();
        let delta = (a.lambda.ln() - b.lambda.ln()).abs();
        ok &= delta < a.log_lambda_err;
        worst = worst.max(delta / a.log_lambda_err);
    }
    drop(fine);
    r.check("10", "lsv: doubling the grid moves ln lambda by less than its error bar", ok, format!("max |delta| / error bar = {worst:.3}"));
    let w = cylinder_weights(&m).unwrap();
    let table = w.to_table(&m).unwrap();
    for s in [0.02, 0.05, 0.1] {
        let x = cross_backend(&m, &table, s).unwrap();
        r.check(
            "10",
            &format!("lsv: operator vs table pressure at s = {s}"),
            x.agrees,
            format!(
                "u_op = {:.6} +- {:.1e}, u_table = {:.6} +- {:.1e}, |diff| = {:.2e}, projection bracket = {:.2e}",
                x.u_operator, x.u_operator_err, x.u_table, x.u_table_err, x.diff, x.projection_bracket
            ),
        );
    }
    r.lap("10");
    (w.fit.beta_hat, table)
}

fn c11_reporting(r: &mut Report, tables: &[(Preset, CylinderTable)]) {
    for (p, t) in tables.iter().filter(|(p, _)| !matches!(p, Preset::Gamma1)) {
        let name = p.name();
        let e = ekp_fit(t, &preset_grid()).unwrap();
        r.info(
            "11",
            format!(
                "{name}: rho_hat = {:.4} +- {:.4}, claimed = {:.4}, oracle candidate (beta-1)/beta = {:.4}",
                e.rho_fit,
                e.rho_ci95,
                e.rho_paper,
                e.rho_oracle_candidate.unwrap()
            ),
        );
        for k in [2, 3] {
            let b = blowup_fit(t, &preset_grid(), k).unwrap();
            r.info(
                "11",
                format!(
                    "{name}: p^({k}) exponent = {:.4} +- {:.4}, claimed = {}, oracle candidate = {:.4}",
                    b.slope,
                    b.slope_ci95,
                    b.paper_exponent.map_or("none".into(), |x| format!("{x:.4}")),
                    b.oracle_candidate
                ),
            );
        }
        let drift = (e.rho_refined - e.rho_fit).abs();
        r.check(
            "11",
            &format!("{name}: rho_hat stable under grid refinement"),
            drift <= 0.02,
            format!("16 points {:.4}, 31 points {:.4}, drift {drift:.4} (tol 0.02)", e.rho_fit, e.rho_refined),
        );
    }
    r.lap("11");
}

fn main() {
    let mut r = Report { failures: Vec::new(), start: Instant::now() };
    let tables = tables();
    let gamma1 = &tables.iter().find(|(p, _)| *p == Preset::Gamma1).unwrap().1;
    c1_identities(&mut r, &tables);
    c2_fd(&mut r, &tables);
    let (lsv_beta, lsv_table) = c10_lsv(&mut r);
    c3_right_derivative(&mut r, &tables, &lsv_table);
    c4_tails(&mut r, &tables, lsv_beta);
    c5_tauberian(&mut r);
    c6_gamma1(&mut r, gamma1);
    c7_counterexample(&mut r, gamma1);
    c8_shapes(&mut r, &tables);
    c9_linear(&mut r, gamma1);
    c11_reporting(&mut r, &tables);
    if r.failures.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed", r.failures.len());
        for f in &r.failures {
            println!("  {f}");
        }
        std::process::exit(1);
    }
}
