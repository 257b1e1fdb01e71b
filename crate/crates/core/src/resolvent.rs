//! Monte Carlo solution of the resolvent system `λψ − Lψ = b`,
//! `L = ½ Tr(a D²) + b·D`, through
//!
//! ```text
//! ψ(x) = ∫₀^∞ e^{−λt} E[b(X_t^x)] dt
//! ```
//!
//! truncated at a horizon `T_max`. Paths use Euler–Maruyama with `b`
//! itself, so rough drifts are allowed. Gradients come from central
//! differences whose three starting points share the Brownian driver.

use serde::{Deserialize, Serialize};

use crate::coeffs::{DiffusionSpec, DriftField};
use crate::error::{FlowError, Result};
use crate::linalg;
use crate::paths::{self, BrownianDriver, TimeGrid};
use crate::stats;

pub const DEFAULT_LADDER: [f64; 5] = [2.0, 5.0, 10.0, 20.0, 40.0];
pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-4;
pub const DEFAULT_FD_STEP: f64 = 1e-3;
pub const MIN_PATHS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolventConfig {
    pub lambda: f64,
    /// `None` applies the default rule, see [`ResolventConfig::horizon_for`].
    pub horizon: Option<f64>,
    pub dt: f64,
    pub n_paths: usize,
    pub fd_step: f64,
    pub truncation_tol: f64,
    /// Pair every driver with its reflection `−W`; `n_paths` then counts
    /// pairs.
    #[serde(default)]
    pub antithetic: bool,
}

impl ResolventConfig {
    pub fn new(lambda: f64, dt: f64, n_paths: usize) -> Self {
        ResolventConfig {
            lambda,
            horizon: None,
            dt,
            n_paths,
            fd_step: DEFAULT_FD_STEP,
            truncation_tol: DEFAULT_TRUNCATION_TOL,
            antithetic: false,
        }
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        ResolventConfig { lambda, ..*self }
    }

    /// `T = max(1, 10/λ)`, lengthened until `e^{−λT}(1 + |x|max) ≤ tol`.
    pub fn horizon_for(&self, x_max: f64) -> f64 {
        if let Some(h) = self.horizon {
            return h;
        }
        let base = (10.0 / self.lambda).max(1.0);
        let needed = ((1.0 + x_max) / self.truncation_tol).ln() / self.lambda;
        base.max(needed)
    }

    pub fn grid_for(&self, x_max: f64) -> Result<TimeGrid> {
        let t = self.horizon_for(x_max);
        let steps = (t / self.dt).ceil().max(1.0) as usize;
        TimeGrid::new(0.0, steps as f64 * self.dt, steps)
    }

    /// `e^{−λT}(1 + |x|max)` for the grid actually used.
    pub fn truncation_bound(&self, x_max: f64) -> Result<f64> {
        let grid = self.grid_for(x_max)?;
        Ok((-self.lambda * grid.t_end).exp() * (1.0 + x_max))
    }

    pub fn validate(&self, x_max: f64) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(FlowError::invalid("lambda", "must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(FlowError::invalid("dt", "must be positive"));
        }
        if !(self.fd_step > 0.0) {
            return Err(FlowError::invalid("fd_step", "must be positive"));
        }
        if self.n_paths < MIN_PATHS {
            return Err(FlowError::invalid(
                "n_paths",
                format!("need at least {MIN_PATHS} paths"),
            ));
        }
        let bound = self.truncation_bound(x_max)?;
        if bound > self.truncation_tol {
            return Err(FlowError::Truncation {
                bound,
                tol: self.truncation_tol,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventSolution {
    pub lambda: f64,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub antithetic: bool,
    /// `e^{−λT}(1 + |x|max)`.
    pub truncation: f64,
    pub query_points: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub psi_stderr: Vec<Vec<f64>>,
    /// Row-major `d × d`, `grad[c*d + l] = ∂ψ_c/∂x_l`.
    pub grad_psi: Vec<Vec<f64>>,
    pub grad_stderr: Vec<Vec<f64>>,
    /// `max_q ‖Dψ(x_q)‖_op`.
    pub grad_sup_est: f64,
    /// `max_q ‖stderr(Dψ(x_q))‖_HS`.
    pub grad_stderr_sup: f64,
}

impl ResolventSolution {
    /// `grad_sup_est + 2·grad_stderr_sup`, the bound certified by λ search.
    pub fn certified_bound(&self) -> f64 {
        self.grad_sup_est + 2.0 * self.grad_stderr_sup
    }
}

fn max_norm(points: &[Vec<f64>]) -> f64 {
    points.iter().map(|x| linalg::norm(x)).fold(0.0, f64::max)
}

/// `∫_{t_j}^{t_{j+1}} e^{−λt} dt` for every step: the integrand is
/// frozen at the left point and the exponential integrated exactly.
fn discount_weights(lambda: f64, grid: &TimeGrid) -> Vec<f64> {
    let dt = grid.dt();
    let cell = (1.0 - (-lambda * dt).exp()) / lambda;
    (0..grid.steps)
        .map(|j| (-lambda * grid.time(j)).exp() * cell)
        .collect()
}

/// Path functional `Σ_j w_j b(X_j)` from `x` on the given increments.
fn discounted_drift(
    b: &DriftField,
    s: &DiffusionSpec,
    x: &[f64],
    dw: &[f64],
    grid: &TimeGrid,
    weights: &[f64],
    out: &mut [f64],
) -> Result<()> {
    out.fill(0.0);
    paths::integrate(b, s, x, dw, grid.dt(), grid.steps, |j, _, drift| {
        let w = weights[j];
        for (o, v) in out.iter_mut().zip(drift) {
            *o += w * v;
        }
    })?;
    Ok(())
}

/// Runs `fill(dw, row)` on the driver and, for antithetic sampling, on
/// its reflection, averaging the two rows.
fn with_reflection<F>(dw: Vec<f64>, antithetic: bool, row: &mut [f64], mut fill: F) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    fill(&dw, row)?;
    if antithetic {
        let reflected: Vec<f64> = dw.iter().map(|w| -w).collect();
        let mut other = vec![0.0; row.len()];
        fill(&reflected, &mut other)?;
        for (r, o) in row.iter_mut().zip(&other) {
            *r = 0.5 * (*r + o);
        }
    }
    Ok(())
}

fn in_path(path: usize, e: FlowError) -> FlowError {
    match e {
        FlowError::BlowUp { step, norm } => FlowError::invalid(
            "resolvent",
            format!("path {path} exploded at step {step} (|x| = {norm:e}); raise λ or lower dt"),
        ),
        other => other,
    }
}

/// Monte Carlo `ψ` and `Dψ` at the query points.
pub fn solve_psi(
    b: &DriftField,
    s: &DiffusionSpec,
    cfg: &ResolventConfig,
    queries: &[Vec<f64>],
    seed: u64,
) -> Result<ResolventSolution> {
    if queries.is_empty() {
        return Err(FlowError::invalid("queries", "no query points"));
    }
    let d = b.dim();
    for q in queries {
        paths::check_dims(b, s, q)?;
    }
    let x_max = max_norm(queries);
    cfg.validate(x_max)?;
    let grid = cfg.grid_for(x_max)?;
    let weights = discount_weights(cfg.lambda, &grid);
    let k = s.noise_dim();
    let h = cfg.fd_step;
    let per_query = d + d * d;

    let totals = stats::reduce_paths(cfg.n_paths, queries.len() * per_query, |p, row| {
        let dw = BrownianDriver::new(seed, p as u64, k, grid).increments(&grid)?;
        let mut center = vec![0.0; d];
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        let mut shifted = vec![0.0; d];
        with_reflection(dw, cfg.antithetic, row, |dw, row| {
            for (qi, x) in queries.iter().enumerate() {
                let base = qi * per_query;
                discounted_drift(b, s, x, dw, &grid, &weights, &mut center)
                    .map_err(|e| in_path(p, e))?;
                row[base..base + d].copy_from_slice(&center);
                for l in 0..d {
                    shifted.copy_from_slice(x);
                    shifted[l] = x[l] + h;
                    discounted_drift(b, s, &shifted, dw, &grid, &weights, &mut plus)
                        .map_err(|e| in_path(p, e))?;
                    shifted[l] = x[l] - h;
                    discounted_drift(b, s, &shifted, dw, &grid, &weights, &mut minus)
                        .map_err(|e| in_path(p, e))?;
                    for c in 0..d {
                        row[base + d + c * d + l] = (plus[c] - minus[c]) / (2.0 * h);
                    }
                }
            }
            Ok(())
        })
    })?;

    let means = totals.means();
    let errs = totals.stderrs();
    let mut sol = ResolventSolution {
        lambda: cfg.lambda,
        horizon: grid.t_end,
        dt: grid.dt(),
        n_paths: cfg.n_paths,
        seed,
        fd_step: h,
        antithetic: cfg.antithetic,
        truncation: (-cfg.lambda * grid.t_end).exp() * (1.0 + x_max),
        query_points: queries.to_vec(),
        psi: Vec::with_capacity(queries.len()),
        psi_stderr: Vec::with_capacity(queries.len()),
        grad_psi: Vec::with_capacity(queries.len()),
        grad_stderr: Vec::with_capacity(queries.len()),
        grad_sup_est: 0.0,
        grad_stderr_sup: 0.0,
    };
    for qi in 0..queries.len() {
        let base = qi * per_query;
        sol.psi.push(means[base..base + d].to_vec());
        sol.psi_stderr.push(errs[base..base + d].to_vec());
        let g = means[base + d..base + per_query].to_vec();
        let ge = errs[base + d..base + per_query].to_vec();
        sol.grad_sup_est = sol.grad_sup_est.max(linalg::op_norm(&g, d));
        sol.grad_stderr_sup = sol.grad_stderr_sup.max(linalg::hs_norm(&ge));
        sol.grad_psi.push(g);
        sol.grad_stderr.push(ge);
    }
    Ok(sol)
}

/// One rung of a λ search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderStep {
    pub lambda: f64,
    pub grad_sup_est: f64,
    pub grad_stderr_sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub solution: ResolventSolution,
    pub trace: Vec<LadderStep>,
}

fn check_ladder(ladder: &[f64], gamma: f64) -> Result<()> {
    if ladder.is_empty() {
        return Err(FlowError::invalid("ladder", "empty λ ladder"));
    }
    if ladder.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(FlowError::invalid(
            "ladder",
            "λ ladder must be strictly ascending",
        ));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(FlowError::invalid("gamma", "must lie in (0, 1)"));
    }
    Ok(())
}

/// Smallest ladder λ whose `grad_sup_est + 2·stderr ≤ gamma`. All rungs
/// share the seed, so they see the same Brownian paths.
pub fn select_lambda(
    b: &DriftField,
    s: &DiffusionSpec,
    ladder: &[f64],
    gamma: f64,
    template: &ResolventConfig,
    queries: &[Vec<f64>],
    seed: u64,
) -> Result<LambdaSelection> {
    check_ladder(ladder, gamma)?;
    let mut trace = Vec::new();
    for &lambda in ladder {
        let sol = solve_psi(b, s, &template.with_lambda(lambda), queries, seed)?;
        trace.push(LadderStep {
            lambda,
            grad_sup_est: sol.grad_sup_est,
            grad_stderr_sup: sol.grad_stderr_sup,
        });
        if sol.certified_bound() <= gamma {
            return Ok(LambdaSelection {
                lambda,
                solution: sol,
                trace,
            });
        }
    }
    let summary = trace
        .iter()
        .map(|t| {
            format!(
                "λ={}: ‖Dψ‖≈{:.4}±{:.4}",
                t.lambda, t.grad_sup_est, t.grad_stderr_sup
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    Err(FlowError::LadderExhausted {
        gamma,
        trace: summary,
    })
}

/// Solves at every rung (no early exit).
pub fn scan_ladder(
    b: &DriftField,
    s: &DiffusionSpec,
    ladder: &[f64],
    template: &ResolventConfig,
    queries: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<ResolventSolution>> {
    check_ladder(ladder, 0.5)?;
    ladder
        .iter()
        .map(|&l| solve_psi(b, s, &template.with_lambda(l), queries, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// `max |mean(λψ − ½Tr(aD²ψ) − b·Dψ − b)|` over queries and components.
    pub residual: f64,
    /// `3 × stderr` of the same per-path quantity (stencil noise).
    pub noise: f64,
    /// `λ × truncation`, the deterministic tail of the horizon cut.
    pub truncation_term: f64,
    /// Noise at least as large as the residual: the value cannot be
    /// distinguished from zero.
    pub inconclusive: bool,
}

/// PDE residual of the Monte Carlo `ψ` from a shared-driver stencil.
pub fn residual_check(
    b: &DriftField,
    s: &DiffusionSpec,
    sol: &ResolventSolution,
    stencil_step: f64,
) -> Result<ResidualReport> {
    if !b.has_jacobian() {
        return Err(FlowError::MissingJacobian {
            label: b.label().to_string(),
        });
    }
    if !(stencil_step > 0.0) {
        return Err(FlowError::invalid("stencil_step", "must be positive"));
    }
    let d = b.dim();
    let k = s.noise_dim();
    let delta = stencil_step;
    let x_max = max_norm(&sol.query_points);
    let grid = TimeGrid::new(0.0, sol.horizon, (sol.horizon / sol.dt).round() as usize)?;
    let weights = discount_weights(sol.lambda, &grid);
    let nq = sol.query_points.len();
    let lambda = sol.lambda;

    // stencil offsets: centre, ±e_i, (±e_i ± e_j) for i < j
    let mut offsets: Vec<Vec<f64>> = vec![vec![0.0; d]];
    for i in 0..d {
        for sgn in [1.0, -1.0] {
            let mut o = vec![0.0; d];
            o[i] = sgn * delta;
            offsets.push(o);
        }
    }
    for i in 0..d {
        for j in i + 1..d {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut o = vec![0.0; d];
                o[i] = si * delta;
                o[j] = sj * delta;
                offsets.push(o);
            }
        }
    }
    let mixed_index = |i: usize, j: usize| -> usize {
        // position of the (i, j) block among the mixed offsets
        let mut idx = 1 + 2 * d;
        for a in 0..d {
            for c in a + 1..d {
                if (a, c) == (i, j) {
                    return idx;
                }
                idx += 4;
            }
        }
        unreachable!()
    };
    let coeff: Vec<(Vec<f64>, Vec<f64>)> = sol
        .query_points
        .iter()
        .map(|x| (b.eval(x), s.a(x)))
        .collect();

    let totals = stats::reduce_paths(sol.n_paths, nq * d, |p, row| {
        let dw = BrownianDriver::new(sol.seed, p as u64, k, grid).increments(&grid)?;
        let mut vals = vec![vec![0.0; d]; offsets.len()];
        let mut pt = vec![0.0; d];
        with_reflection(dw, sol.antithetic, row, |dw, row| {
            for (qi, x) in sol.query_points.iter().enumerate() {
                for (o, v) in offsets.iter().zip(vals.iter_mut()) {
                    for a in 0..d {
                        pt[a] = x[a] + o[a];
                    }
                    discounted_drift(b, s, &pt, dw, &grid, &weights, v)
                        .map_err(|e| in_path(p, e))?;
                }
                let (bx, ax) = &coeff[qi];
                for c in 0..d {
                    let mut trace = 0.0;
                    let mut transport = 0.0;
                    for i in 0..d {
                        let (vp, vm) = (vals[1 + 2 * i][c], vals[2 + 2 * i][c]);
                        let second = (vp - 2.0 * vals[0][c] + vm) / (delta * delta);
                        trace += ax[i * d + i] * second;
                        transport += bx[i] * (vp - vm) / (2.0 * delta);
                        for j in i + 1..d {
                            let m = mixed_index(i, j);
                            let mixed = (vals[m][c] - vals[m + 1][c] - vals[m + 2][c]
                                + vals[m + 3][c])
                                / (4.0 * delta * delta);
                            trace += 2.0 * ax[i * d + j] * mixed;
                        }
                    }
                    row[qi * d + c] = lambda * vals[0][c] - 0.5 * trace - transport - bx[c];
                }
            }
            Ok(())
        })
    })?;
    let residual = totals.0.iter().map(|s| s.mean.abs()).fold(0.0, f64::max);
    let noise = 3.0 * totals.0.iter().map(|s| s.stderr()).fold(0.0, f64::max);
    let truncation = (-lambda * grid.t_end).exp() * (1.0 + x_max);
    Ok(ResidualReport {
        residual,
        noise,
        truncation_term: lambda * truncation,
        inconclusive: noise >= residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::grid_1d;

    fn cfg(lambda: f64, n: usize) -> ResolventConfig {
        ResolventConfig::new(lambda, 1e-2, n)
    }

    #[test]
    fn horizon_rule() {
        let c = cfg(5.0, 100);
        assert!((c.horizon_for(0.0) - 2.0).abs() < 1e-12);
        // needs ln(3e4)/5 ≈ 2.06 for |x| ≤ 2
        let t = c.horizon_for(2.0);
        assert!((t - (3e4f64).ln() / 5.0).abs() < 1e-12);
        assert!(c.truncation_bound(2.0).unwrap() <= 1e-4);
        assert!(cfg(40.0, 100).horizon_for(0.0) >= 1.0);
    }

    #[test]
    fn short_horizon_rejected() {
        let mut c = cfg(5.0, 100);
        c.horizon = Some(0.5);
        let err = solve_psi(
            &DriftField::zero(1),
            &DiffusionSpec::identity(1),
            &c,
            &[vec![0.0]],
            1,
        )
        .unwrap_err();
        assert!(matches!(err, FlowError::Truncation { .. }));
        assert!(cfg(5.0, 10).validate(0.0).is_err());
    }

    #[test]
    fn zero_drift_gives_zero() {
        let sol = solve_psi(
            &DriftField::zero(2),
            &DiffusionSpec::identity(2),
            &cfg(5.0, 200),
            &[vec![0.0, 1.0]],
            3,
        )
        .unwrap();
        assert_eq!(sol.psi[0], vec![0.0, 0.0]);
        assert_eq!(sol.psi_stderr[0], vec![0.0, 0.0]);
        assert_eq!(sol.grad_sup_est, 0.0);
    }

    #[test]
    fn constant_drift_closed_form() {
        let sol = solve_psi(
            &DriftField::constant(vec![1.0]),
            &DiffusionSpec::sin_perturbed(1, 0.3),
            &cfg(5.0, 200),
            &[vec![0.5]],
            3,
        )
        .unwrap();
        // the discounted integral of 1 over [0, T] is (1 − e^{−λT})/λ
        let exact = (1.0 - (-5.0 * sol.horizon).exp()) / 5.0;
        assert!((sol.psi[0][0] - exact).abs() < 1e-12);
        assert!((sol.psi[0][0] - 0.2).abs() <= sol.truncation / 5.0);
        assert!(sol.grad_sup_est < 1e-9);
    }

    #[test]
    fn linear_drift_closed_form() {
        // ψ = M x with M = a/(λ − a)
        let b = DriftField::linear(1, vec![-1.0]);
        let sol = solve_psi(
            &b,
            &DiffusionSpec::identity(1),
            &ResolventConfig::new(5.0, 1e-3, 4000),
            &[vec![-1.0], vec![1.0]],
            11,
        )
        .unwrap();
        for (x, (psi, se)) in [-1.0, 1.0].iter().zip(sol.psi.iter().zip(&sol.psi_stderr)) {
            assert!(
                (psi[0] + x / 6.0).abs() <= 3.0 * se[0] + 1e-4,
                "{psi:?} ± {se:?}"
            );
        }
        assert!((sol.grad_psi[0][0] + 1.0 / 6.0).abs() < 1e-3);
    }

    #[test]
    fn antithetic_pairs_cancel_additive_noise() {
        // b = −x with σ = 1: the noise enters ψ linearly, so each
        // reflected pair reproduces the deterministic slope exactly
        let b = DriftField::linear(1, vec![-1.0]);
        let c = ResolventConfig::new(5.0, 1e-2, 100).antithetic(true);
        let sol = solve_psi(
            &b,
            &DiffusionSpec::identity(1),
            &c,
            &[vec![0.0], vec![1.0]],
            9,
        )
        .unwrap();
        assert!(sol.psi[0][0].abs() < 1e-14);
        assert!(sol.psi_stderr[1][0] < 1e-12);
        assert!((sol.psi[1][0] + 1.0 / 6.0).abs() < 2e-3);
        assert!((sol.grad_psi[0][0] - sol.psi[1][0]).abs() < 1e-9);
    }

    #[test]
    fn select_lambda_linear() {
        let b = DriftField::linear(1, vec![-1.0]);
        let s = DiffusionSpec::identity(1);
        let tmpl = cfg(1.0, 200);
        let q = grid_1d(-1.0, 1.0, 3);
        let sel = select_lambda(&b, &s, &[2.0, 5.0, 10.0], 0.5, &tmpl, &q, 5).unwrap();
        assert_eq!(sel.lambda, 2.0);
        // Euler with dt = 1e-2 moves |Dψ| slightly off 1/3
        assert!((sel.solution.grad_sup_est - 1.0 / 3.0).abs() < 5e-3);
        let err = select_lambda(&b, &s, &[2.0, 5.0, 10.0], 0.05, &tmpl, &q, 5).unwrap_err();
        match err {
            FlowError::LadderExhausted { trace, .. } => assert!(trace.contains("λ=10")),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn zero_drift_selects_first_rung() {
        let sel = select_lambda(
            &DriftField::zero(1),
            &DiffusionSpec::identity(1),
            &DEFAULT_LADDER,
            0.5,
            &cfg(1.0, 100),
            &[vec![0.0]],
            1,
        )
        .unwrap();
        assert_eq!(sel.lambda, 2.0);
        assert_eq!(sel.solution.grad_sup_est, 0.0);
    }

    #[test]
    fn ladder_validation() {
        let b = DriftField::zero(1);
        let s = DiffusionSpec::identity(1);
        let q = [vec![0.0]];
        assert!(select_lambda(&b, &s, &[5.0, 2.0], 0.5, &cfg(1.0, 100), &q, 1).is_err());
        assert!(select_lambda(&b, &s, &[2.0], 1.5, &cfg(1.0, 100), &q, 1).is_err());
    }

    #[test]
    fn residual_of_trivial_solutions() {
        let s = DiffusionSpec::identity(1);
        let zero = DriftField::zero(1);
        let sol = solve_psi(&zero, &s, &cfg(5.0, 100), &[vec![0.0]], 1).unwrap();
        let r = residual_check(&zero, &s, &sol, 1e-2).unwrap();
        assert_eq!(r.residual, 0.0);

        let c = DriftField::constant(vec![1.0]);
        let sol = solve_psi(&c, &s, &cfg(5.0, 100), &[vec![0.3]], 1).unwrap();
        let r = residual_check(&c, &s, &sol, 1e-2).unwrap();
        assert!(r.residual <= r.noise + r.truncation_term, "{r:?}");

        let rough = DriftField::holder(1, 0.5, 1.0);
        assert!(residual_check(&rough, &s, &sol, 1e-2).is_err());
    }

    #[test]
    fn residual_of_linear_drift() {
        let b = DriftField::linear(1, vec![-1.0]);
        let s = DiffusionSpec::identity(1);
        let sol = solve_psi(
            &b,
            &s,
            &ResolventConfig::new(5.0, 1e-3, 2000),
            &[vec![-1.0], vec![1.0]],
            2,
        )
        .unwrap();
        let r = residual_check(&b, &s, &sol, 1e-2).unwrap();
        // Euler bias of the slope is O(dt): 6 × 5.6e-5 at |x| = 1
        assert!(r.residual <= r.noise + r.truncation_term + 5e-4, "{r:?}");
    }

    #[test]
    fn residual_two_dimensional_linear() {
        let b = DriftField::linear(2, vec![-1.0, 0.5, 0.0, -2.0]);
        let s = DiffusionSpec::identity(2);
        let sol = solve_psi(
            &b,
            &s,
            &ResolventConfig::new(6.0, 2e-3, 400),
            &[vec![0.5, -0.5]],
            4,
        )
        .unwrap();
        let r = residual_check(&b, &s, &sol, 1e-2).unwrap();
        assert!(r.residual <= r.noise + r.truncation_term + 2e-3, "{r:?}");
    }
}
