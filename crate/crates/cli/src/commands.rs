//! Subcommand bodies. Each returns an [`Outcome`]; `run` writes it.

use std::path::Path;

use rayon::prelude::*;
use sdeflow_core::bel::{self, BelOptions, DecayConfig};
use sdeflow_core::coeffs::{self, HypothesisConfig};
use sdeflow_core::mollify::{self, DEFAULT_QUAD_POINTS};
use sdeflow_core::paths::{self, BrownianDriver, TimeGrid};
use sdeflow_core::resolvent::{self, ResolventConfig, DEFAULT_LADDER};
use sdeflow_core::seed::derive_seed;
use sdeflow_core::zvonkin::{self, StabilityConfig, TransformConfig, ZvonkinTransform};
use sdeflow_core::{linalg, DiffusionSpec, DriftField, FlowError, Observable};

use crate::output::{cells, indexed, Outcome, Table};
use crate::{suite, CliError, ExperimentConfig, StageExt};

pub fn dispatch(sub: &str, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    match sub {
        "check-hypotheses" => check_hypotheses(cfg),
        "simulate" => simulate(cfg),
        "resolve" => resolve(cfg),
        "select-lambda" => select_lambda(cfg),
        "flow" => flow(cfg),
        "stability" => stability(cfg),
        "bel" => bel_cmd(cfg),
        "fd-check" => fd_check(cfg),
        "decay-probe" => decay_probe(cfg),
        "suite" => suite::command(cfg, out),
        other => Err(CliError::Config(format!("unknown subcommand `{other}`"))),
    }
}

fn seed(cfg: &ExperimentConfig, label: &str) -> u64 {
    derive_seed(cfg.seed(), label)
}

fn quad(cfg: &ExperimentConfig) -> usize {
    cfg.quad_points.unwrap_or(DEFAULT_QUAD_POINTS)
}

pub fn drift(cfg: &ExperimentConfig) -> Result<DriftField, CliError> {
    let spec = cfg.drift.as_deref().unwrap_or("zero");
    let b = mollify::drift_from_preset(spec, cfg.dim(), quad(cfg)).stage("drift")?;
    let Some(m) = &cfg.mollify else {
        return Ok(b);
    };
    let bad = |r: String| CliError::Config(format!("`mollify`: {r}"));
    let n = coeffs::param(m, "n")
        .map_err(|e| bad(e.to_string()))?
        .ok_or_else(|| bad("missing n=<int>".into()))?;
    let n: usize = n.parse().map_err(|_| bad(format!("bad n `{n}`")))?;
    let q = match coeffs::param(m, "quad").map_err(|e| bad(e.to_string()))? {
        Some(q) => q.parse().map_err(|_| bad(format!("bad quad `{q}`")))?,
        None => quad(cfg),
    };
    Ok(mollify::mollify(&b, n, q).stage("mollify")?.field().clone())
}

pub fn sigma(cfg: &ExperimentConfig) -> Result<DiffusionSpec, CliError> {
    DiffusionSpec::from_preset(cfg.sigma.as_deref().unwrap_or("identity"), cfg.dim()).stage("sigma")
}

fn grid(cfg: &ExperimentConfig, t: f64, dt: f64) -> Result<TimeGrid, CliError> {
    TimeGrid::with_dt(0.0, cfg.t.unwrap_or(t), cfg.dt.unwrap_or(dt)).stage("grid")
}

/// `grid:lo,hi,n` (tensor product in d > 1) or a file of points, one per
/// line, separated by commas or whitespace.
pub fn queries(spec: &str, dim: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let bad = |r: String| CliError::Config(format!("`queries`: {r}"));
    if let Some(g) = spec.strip_prefix("grid:") {
        let parts: Vec<&str> = g.split(',').collect();
        if parts.len() != 3 {
            return Err(bad("expected grid:lo,hi,n".into()));
        }
        let lo: f64 = parts[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad lo `{}`", parts[0])))?;
        let hi: f64 = parts[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad hi `{}`", parts[1])))?;
        let n: usize = parts[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad n `{}`", parts[2])))?;
        if n < 2 || !(lo < hi) {
            return Err(bad("need lo < hi and n ≥ 2".into()));
        }
        let axis: Vec<f64> = coeffs::grid_1d(lo, hi, n)
            .into_iter()
            .map(|p| p[0])
            .collect();
        let mut pts = vec![Vec::new()];
        for _ in 0..dim {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&a| {
                        let mut q = p.clone();
                        q.push(a);
                        q
                    })
                })
                .collect();
        }
        return Ok(pts);
    }
    let text = std::fs::read_to_string(spec).map_err(|e| bad(format!("{spec}: {e}")))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        if p.len() != dim {
            return Err(bad(format!("line {}: expected {dim} coordinates", i + 1)));
        }
        pts.push(p);
    }
    if pts.is_empty() {
        return Err(bad("no points".into()));
    }
    Ok(pts)
}

/// Geometric sequence of `n` values from `lo` to `hi`.
pub fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

pub fn transform_config(cfg: &ExperimentConfig) -> TransformConfig {
    let ladder = cfg
        .ladder
        .clone()
        .unwrap_or_else(|| DEFAULT_LADDER.to_vec());
    let n = cfg
        .resolvent_paths
        .unwrap_or(if cfg.fast() { 200 } else { 1000 });
    let rc = ResolventConfig::new(ladder[0], cfg.resolvent_dt.unwrap_or(1e-2), n).antithetic(true);
    let mut tc = TransformConfig::new(rc);
    tc.ladder = ladder;
    if let Some(g) = cfg.gamma {
        tc.gamma = g;
    }
    if let Some(r) = cfg.cache_radius {
        tc.cache_radius = r;
    }
    if let Some(h) = cfg.cache_spacing {
        tc.cache_spacing = h;
    }
    tc
}

fn transform_metrics(o: &mut Outcome, t: &ZvonkinTransform) {
    o.metric("lambda", t.lambda);
    o.metric("gamma_cert", t.gamma_cert);
    o.metric("interpolation_error_value", t.interpolation_error.value);
    o.metric(
        "interpolation_error_gradient",
        t.interpolation_error.gradient,
    );
}

fn check_hypotheses(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (b, s) = (drift(cfg)?, sigma(cfg)?);
    let probes = coeffs::halton_cloud(cfg.dim(), cfg.probes.unwrap_or(256), 10.0);
    let r = coeffs::check_hypotheses(&b, &s, &probes, &HypothesisConfig::default())
        .stage("check-hypotheses")?;
    let d = cfg.dim();
    let mut header = vec!["probe".to_string()];
    header.extend(indexed("x", d));
    header.extend(["drift_norm".into(), "a_inv_hs".into()]);
    let mut table = Table::new("check-hypotheses", header);
    for (i, x) in probes.iter().enumerate() {
        let a_inv = s.a_inv(x).stage("check-hypotheses")?;
        let mut row = vec![i.to_string()];
        row.extend(cells(x));
        row.push(linalg::norm(&b.eval(x)).to_string());
        row.push(linalg::hs_norm(&a_inv).to_string());
        table.push(row);
    }
    let mut o = Outcome {
        tables: vec![table],
        ..Default::default()
    };
    o.metric("holder_seminorm_est", r.holder_seminorm_est);
    o.metric("growth_const_est", r.growth_const_est);
    o.metric("a_inv_sup_est", r.a_inv_sup_est);
    for (k, v) in r.sigma_deriv_sups.iter().enumerate() {
        o.metric(&format!("sigma_deriv_sup_{}", k + 1), *v);
    }
    o.metric("probe_count", r.probe_count);
    o.check(
        "hypotheses",
        r.violations.is_empty(),
        r.violations.join("; "),
    );
    Ok(o)
}

fn simulate(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (b, s) = (drift(cfg)?, sigma(cfg)?);
    let g = grid(cfg, 1.0, 1e-3)?;
    let x = cfg.x_or_zero();
    let n = cfg.paths_or(10, 1);
    let sd = seed(cfg, "simulate/paths");
    let k = s.noise_dim();
    let recs = (0..n)
        .into_par_iter()
        .map(|p| {
            paths::simulate(
                &b,
                &s,
                &x,
                0.0,
                &BrownianDriver::new(sd, p as u64, k, g),
                &g,
            )
        })
        .collect::<Result<Vec<_>, FlowError>>()
        .stage("simulate")?;
    let d = cfg.dim();
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend(indexed("x", d));
    let mut table = Table::new("simulate", header);
    let mut mean = vec![0.0; d];
    let (mut sq, mut sup) = (0.0, 0.0f64);
    for (p, r) in recs.iter().enumerate() {
        for (j, st) in r.states.iter().enumerate() {
            let mut row = vec![p.to_string(), g.time(j).to_string()];
            row.extend(cells(st));
            table.push(row);
            sup = sup.max(linalg::norm(st));
        }
        let end = r.terminal();
        for i in 0..d {
            mean[i] += end[i] / n as f64;
        }
        sq += linalg::norm(end).powi(2) / n as f64;
    }
    let mut o = Outcome {
        tables: vec![table],
        ..Default::default()
    };
    for (i, m) in mean.iter().enumerate() {
        o.metric(&format!("terminal_mean_{i}"), *m);
    }
    o.metric("terminal_second_moment", sq);
    o.metric("sup_norm", sup);
    o.metric("n_paths", n);
    Ok(o)
}

fn resolvent_config(cfg: &ExperimentConfig, lambda: f64) -> ResolventConfig {
    let mut rc = ResolventConfig::new(lambda, cfg.dt.unwrap_or(1e-2), cfg.paths_or(1000, 100))
        .antithetic(cfg.antithetic.unwrap_or(false));
    if let Some(h) = cfg.fd_step {
        rc.fd_step = h;
    }
    rc
}

fn solution_outcome(sol: &resolvent::ResolventSolution, d: usize) -> Outcome {
    let mut header = indexed("x", d);
    header.extend(indexed("psi", d));
    header.extend(indexed("psi_se", d));
    for i in 0..d {
        header.extend(indexed(&format!("dpsi{i}_"), d));
    }
    for i in 0..d {
        header.extend(indexed(&format!("dpsi_se{i}_"), d));
    }
    let mut table = Table::new("resolve", header);
    for (q, x) in sol.query_points.iter().enumerate() {
        let mut row = cells(x);
        row.extend(cells(&sol.psi[q]));
        row.extend(cells(&sol.psi_stderr[q]));
        row.extend(cells(&sol.grad_psi[q]));
        row.extend(cells(&sol.grad_stderr[q]));
        table.push(row);
    }
    let mut o = Outcome {
        tables: vec![table],
        ..Default::default()
    };
    let psi_sup = sol.psi.iter().map(|p| linalg::norm(p)).fold(0.0, f64::max);
    o.metric("lambda", sol.lambda);
    o.metric("horizon", sol.horizon);
    o.metric("dt", sol.dt);
    o.metric("n_paths", sol.n_paths);
    o.metric("truncation", sol.truncation);
    o.metric("psi_sup", psi_sup);
    o.metric("grad_sup_est", sol.grad_sup_est);
    o.metric("grad_stderr_sup", sol.grad_stderr_sup);
    o.metric("certified_bound", sol.certified_bound());
    o
}

fn ladder_table(trace: &[resolvent::LadderStep], chosen: f64) -> Table {
    let mut t = Table::new(
        "ladder",
        [
            "lambda",
            "grad_sup_est",
            "grad_stderr_sup",
            "certified_bound",
            "accepted",
        ]
        .map(String::from)
        .to_vec(),
    );
    for s in trace {
        t.push(vec![
            s.lambda.to_string(),
            s.grad_sup_est.to_string(),
            s.grad_stderr_sup.to_string(),
            (s.grad_sup_est + 2.0 * s.grad_stderr_sup).to_string(),
            (s.lambda == chosen).to_string(),
        ]);
    }
    t
}

fn resolve(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    if cfg.lambda.is_some() && (cfg.ladder.is_some() || cfg.gamma.is_some()) {
        return Err(CliError::Config(
            "`lambda`: give either a fixed λ or a ladder with gamma".into(),
        ));
    }
    let (b, s) = (drift(cfg)?, sigma(cfg)?);
    let qs = queries(cfg.queries.as_deref().unwrap_or("grid:-2,2,9"), cfg.dim())?;
    let sd = seed(cfg, "resolve/psi");
    if let Some(lambda) = cfg.lambda {
        let sol = resolvent::solve_psi(&b, &s, &resolvent_config(cfg, lambda), &qs, sd)
            .stage("resolve")?;
        return Ok(solution_outcome(&sol, cfg.dim()));
    }
    let ladder = cfg
        .ladder
        .clone()
        .unwrap_or_else(|| DEFAULT_LADDER.to_vec());
    let gamma = cfg.gamma.unwrap_or(0.5);
    let sel = resolvent::select_lambda(
        &b,
        &s,
        &ladder,
        gamma,
        &resolvent_config(cfg, ladder[0]),
        &qs,
        sd,
    )
    .stage("resolve/select-lambda")?;
    let mut o = solution_outcome(&sel.solution, cfg.dim());
    o.tables.push(ladder_table(&sel.trace, sel.lambda));
    o.metric("gamma", gamma);
    Ok(o)
}

fn select_lambda(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (b, s) = (drift(cfg)?, sigma(cfg)?);
    let qs = queries(cfg.queries.as_deref().unwrap_or("grid:-2,2,9"), cfg.dim())?;
    let ladder = cfg
        .ladder
        .clone()
        .unwrap_or_else(|| DEFAULT_LADDER.to_vec());
    let gamma = cfg.gamma.unwrap_or(0.5);
    let sel = resolvent::select_lambda(
        &b,
        &s,
        &ladder,
        gamma,
        &resolvent_config(cfg, ladder[0]),
        &qs,
        seed(cfg, "select-lambda/psi"),
    )
    .stage("select-lambda")?;
    let mut t = ladder_table(&sel.trace, sel.lambda);
    t.name = "select-lambda".into();
    let mut o = Outcome {
        tables: vec![t],
        ..Default::default()
    };
    o.metric("lambda", sel.lambda);
    o.metric("gamma", gamma);
    o.metric("grad_sup_est", sel.solution.grad_sup_est);
    o.metric("grad_stderr_sup", sel.solution.grad_stderr_sup);
    o.metric("certified_bound", sel.solution.certified_bound());
    Ok(o)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct FlowRun {
    x: Vec<Vec<f64>>,
    y: Option<Vec<Vec<f64>>>,
    eta: Option<Vec<Vec<f64>>>,
    dove_discrepancy: f64,
    series_bound: f64,
    composition_gap: f64,
}

fn flow(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (b, s) = (drift(cfg)?, sigma(cfg)?);
    let g = grid(cfg, 1.0, 1e-3)?;
    if g.steps % 2 != 0 {
        return Err(CliError::Config(
            "`dt`: need an even number of steps".into(),
        ));
    }
    let u = g.time(g.steps / 2);
    let (x, h) = (cfg.x_or_zero(), cfg.h_or_e1());
    let n = cfg.paths_or(10, 1);
    let via = cfg.via_transform.unwrap_or(true);
    let transform = if via {
        Some(
            ZvonkinTransform::build(&b, &s, &transform_config(cfg), seed(cfg, "flow/resolvent"))
                .stage("flow/transform")?,
        )
    } else {
        None
    };
    let sd = seed(cfg, "flow/paths");
    let k = s.noise_dim();
    let runs = (0..n)
        .into_par_iter()
        .map(|p| -> Result<FlowRun, FlowError> {
            let driver = BrownianDriver::new(sd, p as u64, k, g);
            match &transform {
                Some(t) => {
                    let fd = zvonkin::flow_derivative(t, &s, &x, &h, &driver, &g)?;
                    let (full, comp) = zvonkin::transformed_compose(t, &s, &x, u, &driver, &g)?;
                    Ok(FlowRun {
                        x: fd.path.x.states,
                        y: Some(fd.path.y.states),
                        eta: Some(fd.eta),
                        dove_discrepancy: fd.dove_discrepancy,
                        series_bound: fd.series_bound,
                        composition_gap: linalg::dist(&full, &comp),
                    })
                }
                None => {
                    let (xs, eta) = if b.has_jacobian() {
                        let (r, v) = paths::simulate_with_variation(&b, &s, &x, &h, &driver, &g)?;
                        (r.states, Some(v.eta))
                    } else {
                        (paths::simulate(&b, &s, &x, 0.0, &driver, &g)?.states, None)
                    };
                    let comp = paths::flow_compose(&b, &s, &x, 0.0, u, g.t_end, &driver, &g)?;
                    let gap = linalg::dist(xs.last().expect("non-empty"), &comp);
                    Ok(FlowRun {
                        x: xs,
                        y: None,
                        eta,
                        dove_discrepancy: 0.0,
                        series_bound: 0.0,
                        composition_gap: gap,
                    })
                }
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .stage("flow/paths")?;

    let d = cfg.dim();
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend(indexed("x", d));
    if via {
        header.extend(indexed("y", d));
    }
    let with_eta = runs.first().is_some_and(|r| r.eta.is_some());
    if with_eta {
        header.extend(indexed("eta", d));
    }
    let mut table = Table::new("flow", header);
    for (p, r) in runs.iter().enumerate() {
        for j in 0..=g.steps {
            let mut row = vec![p.to_string(), g.time(j).to_string()];
            row.extend(cells(&r.x[j]));
            if let Some(y) = &r.y {
                row.extend(cells(&y[j]));
            }
            if let Some(e) = &r.eta {
                row.extend(cells(&e[j]));
            }
            table.push(row);
        }
    }
    let mut o = Outcome {
        tables: vec![table],
        ..Default::default()
    };
    if let Some(t) = &transform {
        transform_metrics(&mut o, t);
    }
    o.metric("via_transform", via);
    o.metric("n_paths", n);
    for i in 0..d {
        let m = runs.iter().map(|r| r.x[g.steps][i]).sum::<f64>() / n as f64;
        o.metric(&format!("terminal_mean_{i}"), m);
    }
    if with_eta {
        let m = runs
            .iter()
            .map(|r| linalg::norm(&r.eta.as_ref().expect("eta")[g.steps]))
            .sum::<f64>()
            / n as f64;
        o.metric("terminal_eta_norm_mean", m);
    }
    if via {
        let dd = runs.iter().map(|r| r.dove_discrepancy).fold(0.0, f64::max);
        let sb = runs.iter().map(|r| r.series_bound).fold(0.0, f64::max);
        o.metric("dove_discrepancy_max", dd);
        o.metric("series_bound_max", sb);
    }
    o.metric(
        "composition_gap_median",
        median(runs.iter().map(|r| r.composition_gap).collect()),
    );
    Ok(o)
}

fn stability(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (b, s) = (drift(cfg)?, sigma(cfg)?);
    let ns = cfg.ns.clone().unwrap_or_else(|| vec![2, 4, 8, 16]);
    let sc = StabilityConfig {
        transform: transform_config(cfg),
        quad_points: quad(cfg),
        grid: grid(cfg, 1.0, 1e-2)?,
        n_paths: cfg.paths_or(100, 20),
        p: cfg.p.unwrap_or(2.0),
    };
    let xs = zvonkin::default_x_set(cfg.dim());
    let tab =
        zvonkin::stability_experiment(&b, &ns, &s, &sc, &xs, cfg.seed()).stage("stability")?;
    let cols = [
        "n",
        "gamma_cert",
        "sup_gap",
        "mean_gap",
        "deriv_sup_gap",
        "deriv_mean_gap",
        "psi_gap",
        "drift_gap",
        "psi_ratio",
        "max_principle_ok",
    ];
    let mut table = Table::new("stability", cols.map(String::from).to_vec());
    let mut o = Outcome::default();
    for r in &tab.rows {
        table.push(vec![
            r.n.to_string(),
            r.gamma_cert.to_string(),
            r.sup_gap.to_string(),
            r.mean_gap.to_string(),
            r.deriv_sup_gap.to_string(),
            r.deriv_mean_gap.to_string(),
            r.psi_gap.to_string(),
            r.drift_gap.to_string(),
            r.psi_ratio.to_string(),
            r.max_principle_ok.to_string(),
        ]);
        o.metric(&format!("n={}/sup_gap", r.n), r.sup_gap);
        o.metric(&format!("n={}/deriv_sup_gap", r.n), r.deriv_sup_gap);
        o.metric(&format!("n={}/psi_gap", r.n), r.psi_gap);
    }
    o.tables.push(table);
    o.metric("lambda", tab.lambda);
    o.metric("rough_gamma_cert", tab.rough_gamma_cert);
    o.metric("schauder_constant", tab.schauder_constant);
    o.metric("n_paths", tab.n_paths);
    o.metric("p", tab.p);
    if let (Some(first), Some(last)) = (tab.rows.first(), tab.rows.last()) {
        o.metric("sup_gap_ratio_last_first", last.sup_gap / first.sup_gap);
    }
    Ok(o)
}

/// Closed-form `D_hP_tf(x)` where one is known: scalar linear drift with a
/// coordinate observable (any σ), and zero drift, constant σ with `|x|²`.
pub fn gradient_oracle(cfg: &ExperimentConfig, s: &DiffusionSpec, t: f64) -> Option<f64> {
    if cfg.mollify.is_some() {
        return None;
    }
    let f = cfg.f.as_deref().unwrap_or("coord:0");
    let drift = cfg.drift.as_deref().unwrap_or("zero");
    let (x, h) = (cfg.x_or_zero(), cfg.h_or_e1());
    let (kind, params) = drift.split_once(':').unwrap_or((drift, ""));
    match (kind, f) {
        ("linear", "coord:0") if cfg.dim() == 1 => {
            let a = coeffs::param(params, "a").ok()?.unwrap_or("-1");
            let a: f64 = a.trim().parse().ok()?;
            Some((a * t).exp() * h[0])
        }
        ("zero", "coord:0") => Some(h[0]),
        ("zero", "sq") if s.is_constant() => {
            Some(2.0 * x.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>())
        }
        _ => None,
    }
}

fn needs_transform(cfg: &ExperimentConfig, b: &DriftField) -> bool {
    cfg.via_transform.unwrap_or(!b.has_jacobian())
}

fn maybe_transform(
    cfg: &ExperimentConfig,
    b: &DriftField,
    s: &DiffusionSpec,
    label: &str,
) -> Result<Option<ZvonkinTransform>, CliError> {
    if !needs_transform(cfg, b) {
        return Ok(None);
    }
    ZvonkinTransform::build(b, s, &transform_config(cfg), seed(cfg, label))
        .map(Some)
        .stage(label)
}

fn estimate_row(method: &str, e: &bel::GradientEstimate) -> Vec<String> {
    vec![
        method.to_string(),
        e.value.to_string(),
        e.stderr.to_string(),
        e.n_paths.to_string(),
        e.j_mean.to_string(),
        e.j_stderr.to_string(),
        e.j_second_moment.to_string(),
    ]
}

fn estimate_table(name: &str) -> Table {
    Table::new(
        name,
        [
            "method",
            "value",
            "stderr",
            "n_paths",
            "j_mean",
            "j_stderr",
            "j_second_moment",
        ]
        .map(String::from)
        .to_vec(),
    )
}

fn bel_cmd(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (b, s) = (drift(cfg)?, sigma(cfg)?);
    let f = Observable::from_preset(cfg.f.as_deref().unwrap_or("coord:0"), cfg.dim()).stage("f")?;
    let g = grid(cfg, 1.0, 1e-3)?;
    let (x, h) = (cfg.x_or_zero(), cfg.h_or_e1());
    let transform = maybe_transform(cfg, &b, &s, "bel/transform")?;
    let opts = BelOptions {
        use_cv: cfg.cv.unwrap_or(false),
        transform: transform.as_ref(),
    };
    let n = cfg.paths_or(10_000, 1000);
    let est = bel::bel_gradient(
        &f,
        &b,
        &s,
        g.t_end,
        &x,
        &h,
        n,
        &g,
        seed(cfg, "bel/paths"),
        opts,
    )
    .stage("bel")?;
    let mut table = estimate_table("bel");
    table.push(estimate_row("bel", &est));
    let mut o = Outcome {
        tables: vec![table],
        ..Default::default()
    };
    if let Some(t) = &transform {
        transform_metrics(&mut o, t);
    }
    o.metric("estimate", est.value);
    o.metric("stderr", est.stderr);
    o.metric("n_paths", n);
    o.metric("control_variate", est.control_variate_used);
    o.metric("via_transform", est.via_transform);
    o.metric("t_j_second_moment", g.t_end * est.j_second_moment);
    if let Some(oracle) = gradient_oracle(cfg, &s, g.t_end) {
        let gap = (est.value - oracle).abs();
        o.metric("oracle", oracle);
        o.metric("oracle_gap_over_stderr", gap / est.stderr);
        o.check(
            "oracle_within_3_stderr",
            gap <= 3.0 * est.stderr,
            format!(
                "|{} − {oracle}| = {gap:e}, stderr {:e}",
                est.value, est.stderr
            ),
        );
    }
    Ok(o)
}

fn fd_check(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (b, s) = (drift(cfg)?, sigma(cfg)?);
    let f = Observable::from_preset(cfg.f.as_deref().unwrap_or("coord:0"), cfg.dim()).stage("f")?;
    let g = grid(cfg, 1.0, 1e-3)?;
    let (x, h) = (cfg.x_or_zero(), cfg.h_or_e1());
    let transform = maybe_transform(cfg, &b, &s, "fd-check/transform")?;
    let n = cfg.paths_or(10_000, 1000);
    let est = bel::bel_gradient(
        &f,
        &b,
        &s,
        g.t_end,
        &x,
        &h,
        n,
        &g,
        seed(cfg, "fd-check/bel"),
        BelOptions {
            use_cv: false,
            transform: transform.as_ref(),
        },
    )
    .stage("fd-check/bel")?;
    let fd = bel::fd_gradient(
        &f,
        &b,
        &s,
        g.t_end,
        &x,
        &h,
        cfg.fd_step.unwrap_or(1e-3),
        n,
        &g,
        seed(cfg, "fd-check/fd"),
    )
    .stage("fd-check/fd")?;
    let mut table = estimate_table("fd-check");
    table.push(estimate_row("bel", &est));
    table.push(estimate_row("fd", &fd));
    let combined = est.stderr.hypot(fd.stderr);
    let gap = (est.value - fd.value).abs();
    let mut o = Outcome {
        tables: vec![table],
        ..Default::default()
    };
    o.metric("bel", est.value);
    o.metric("fd", fd.value);
    o.metric("combined_stderr", combined);
    o.metric("gap_over_stderr", gap / combined);
    o.check(
        "bel_fd_within_3_stderr",
        gap <= 3.0 * combined,
        format!("gap {gap:e}, combined stderr {combined:e}"),
    );
    Ok(o)
}

fn decay_probe(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (b, s) = (drift(cfg)?, sigma(cfg)?);
    let f = Observable::from_preset(cfg.f.as_deref().unwrap_or("holder-odd:0.5"), cfg.dim())
        .stage("f")?;
    let ts = cfg.ts.clone().unwrap_or_else(|| geometric(0.02, 0.5, 8));
    let (x, h) = (cfg.x_or_zero(), cfg.h_or_e1());
    let transform = maybe_transform(cfg, &b, &s, "decay-probe/transform")?;
    let dc = DecayConfig {
        n_paths: cfg.paths_or(20_000, 2000),
        steps_per_t: cfg.steps_per_t.unwrap_or(100),
        use_cv: cfg.cv.unwrap_or(false),
    };
    let fit = bel::decay_probe(
        &f,
        &b,
        &s,
        &x,
        &h,
        &ts,
        &dc,
        seed(cfg, "decay-probe/paths"),
        transform.as_ref(),
    )
    .stage("decay-probe")?;
    let mut table = Table::new(
        "decay-probe",
        [
            "t",
            "value",
            "stderr",
            "j_second_moment",
            "t_j_second_moment",
            "excluded",
        ]
        .map(String::from)
        .to_vec(),
    );
    for p in &fit.points {
        table.push(vec![
            p.t.to_string(),
            p.value.to_string(),
            p.stderr.to_string(),
            p.j_second_moment.to_string(),
            (p.t * p.j_second_moment).to_string(),
            p.excluded.to_string(),
        ]);
    }
    let tj: Vec<f64> = fit.points.iter().map(|p| p.t * p.j_second_moment).collect();
    let spread =
        tj.iter().cloned().fold(0.0, f64::max) / tj.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut o = Outcome {
        tables: vec![table],
        ..Default::default()
    };
    o.metric("slope", fit.slope);
    o.metric("slope_stderr", fit.slope_stderr);
    o.metric("band_lo", fit.band.0);
    o.metric("band_hi", fit.band.1);
    o.metric("intercept", fit.intercept);
    o.metric("expected_slope", fit.expected_slope);
    o.metric("t_j_second_moment_spread", spread);
    o.check(
        "decay_not_slower_than_bound",
        fit.slope <= fit.expected_slope + 0.15,
        format!(
            "slope {} vs bound exponent {}",
            fit.slope, fit.expected_slope
        ),
    );
    Ok(o)
}
