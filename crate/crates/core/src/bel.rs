//! Semigroup `P_t f(x) = E f(X_t^x)` and its gradient.
//!
//! The Bismut–Elworthy–Li estimator
//!
//! ```text
//! D_h P_t f(x) = E[f(X_t) J¹],   J¹ = (1/t) Σ_j ⟨σ* a⁻¹(X_j) η_j, ΔW_j⟩
//! ```
//!
//! needs no derivative of `f`. `η` is the first variation for smooth
//! drifts or the transform-based derivative for rough ones. The control
//! variate subtracts `f(Y_t)` with `Ẏ = b(Y)`, which is uncorrelated with
//! `J¹` in mean.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coeffs::{param, parse_f64, DiffusionSpec, DriftField};
use crate::error::{FlowError, Result};
use crate::linalg;
use crate::paths::{self, BrownianDriver, TimeGrid};
use crate::seed::derive_seed;
use crate::stats;
use crate::zvonkin::{self, ZvonkinTransform};

/// Relative standard error above which a decay-probe point is dropped.
pub const DECAY_MAX_REL_STDERR: f64 = 0.3;
/// Smallest span of the decay-probe window, in decades.
pub const DECAY_MIN_DECADES: f64 = 1.0;

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct Observable {
    pub label: String,
    pub theta_f: Option<f64>,
    eval: Arc<ScalarFn>,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable")
            .field("label", &self.label)
            .field("theta_f", &self.theta_f)
            .finish()
    }
}

impl Observable {
    pub fn new<F>(label: impl Into<String>, theta_f: Option<f64>, eval: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Observable {
            label: label.into(),
            theta_f,
            eval: Arc::new(eval),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn constant(c: f64) -> Self {
        Observable::new(format!("const:{c}"), Some(1.0), move |_| c)
    }

    pub fn coord(i: usize) -> Self {
        Observable::new(format!("coord:{i}"), Some(1.0), move |x| x[i])
    }

    pub fn sq() -> Self {
        Observable::new("sq", Some(1.0), |x| x.iter().map(|v| v * v).sum())
    }

    /// `|x₁|^θ`: even, so its gradient vanishes at the origin.
    pub fn holder(theta: f64) -> Self {
        Observable::new(format!("holder:{theta}"), Some(theta), move |x| {
            x[0].abs().powf(theta)
        })
    }

    /// `sign(x₁)|x₁|^θ`: same Hölder exponent at the origin, odd.
    pub fn holder_odd(theta: f64) -> Self {
        Observable::new(format!("holder-odd:{theta}"), Some(theta), move |x| {
            x[0].signum() * x[0].abs().powf(theta)
        })
    }

    /// `const[:c=…]`, `coord:i`, `sq`, `holder:θ`, `holder-odd:θ`.
    pub fn from_preset(spec: &str, dim: usize) -> Result<Self> {
        let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let theta = |rest: &str| -> Result<f64> {
            let v = if rest.contains('=') {
                param(rest, "theta")?.ok_or_else(|| FlowError::invalid("theta", "missing"))?
            } else {
                rest
            };
            let t = parse_f64(v, "theta")?;
            if !(t > 0.0 && t <= 1.0) {
                return Err(FlowError::invalid("theta", "must lie in (0, 1]"));
            }
            Ok(t)
        };
        match name {
            "const" => {
                let c = if rest.is_empty() {
                    1.0
                } else if rest.contains('=') {
                    let v = param(rest, "c")?.ok_or_else(|| FlowError::invalid("c", "missing"))?;
                    parse_f64(v, "c")?
                } else {
                    parse_f64(rest, "c")?
                };
                Ok(Observable::constant(c))
            }
            "coord" => {
                let i: usize = rest
                    .trim()
                    .parse()
                    .map_err(|_| FlowError::invalid("f", format!("bad coordinate `{rest}`")))?;
                if i >= dim {
                    return Err(FlowError::invalid(
                        "f",
                        format!("coordinate {i} ≥ dimension {dim}"),
                    ));
                }
                Ok(Observable::coord(i))
            }
            "sq" => Ok(Observable::sq()),
            "holder" => Ok(Observable::holder(theta(rest)?)),
            "holder-odd" => Ok(Observable::holder_odd(theta(rest)?)),
            _ => Err(FlowError::invalid(
                "f",
                format!("unknown observable `{spec}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub control_variate_used: bool,
    pub via_transform: bool,
    /// Sample mean of `J¹` alone (zero in expectation).
    pub j_mean: f64,
    pub j_stderr: f64,
    /// Sample `E|J¹|²`.
    pub j_second_moment: f64,
}

/// Grid `[grid.t0, t]` cut from `grid`; `t` must be a grid time.
fn horizon_grid(grid: &TimeGrid, t: f64) -> Result<TimeGrid> {
    if !(t > grid.t0) {
        return Err(FlowError::invalid(
            "t",
            "must be positive (the weight carries 1/t)",
        ));
    }
    grid.sub(grid.t0, t)
}

/// `P_t f(x)` by Monte Carlo.
#[allow(clippy::too_many_arguments)]
pub fn semigroup(
    f: &Observable,
    b: &DriftField,
    s: &DiffusionSpec,
    t: f64,
    x: &[f64],
    n_paths: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<MeanEstimate> {
    paths::check_dims(b, s, x)?;
    if n_paths == 0 {
        return Err(FlowError::invalid("n_paths", "must be positive"));
    }
    let g = horizon_grid(grid, t)?;
    let k = s.noise_dim();
    let acc = stats::reduce_paths(n_paths, 1, |p, row| {
        let dw = BrownianDriver::new(seed, p as u64, k, *grid).increments(&g)?;
        let end = paths::integrate(b, s, x, &dw, g.dt(), g.steps, |_, _, _| {})?;
        row[0] = f.eval(&end);
        Ok::<_, FlowError>(())
    })?;
    Ok(MeanEstimate {
        mean: acc.0[0].mean,
        stderr: acc.0[0].stderr(),
        n_paths,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BelOptions<'a> {
    pub use_cv: bool,
    /// Route `D_hφ` through this transform (required for rough drifts).
    pub transform: Option<&'a ZvonkinTransform>,
}

/// Deterministic flow `Ẏ = b(Y)` by classical RK4 on the grid steps.
pub fn deterministic_flow(b: &DriftField, x: &[f64], grid: &TimeGrid) -> Vec<f64> {
    let d = x.len();
    let dt = grid.dt();
    let mut y = x.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    for _ in 0..grid.steps {
        b.eval_into(&y, &mut k1);
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * dt * k1[i];
        }
        b.eval_into(&tmp, &mut k2);
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * dt * k2[i];
        }
        b.eval_into(&tmp, &mut k3);
        for i in 0..d {
            tmp[i] = y[i] + dt * k3[i];
        }
        b.eval_into(&tmp, &mut k4);
        for i in 0..d {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y
}

/// `J¹` from a path, its derivative path and the increments.
fn bel_weight(
    s: &DiffusionSpec,
    states: &[Vec<f64>],
    eta: &[Vec<f64>],
    dw: &[f64],
    t: f64,
) -> Result<f64> {
    let (d, k) = (s.dim(), s.noise_dim());
    let mut sigma = vec![0.0; d * k];
    let mut a_inv = vec![0.0; d * d];
    let mut tmp = vec![0.0; d];
    let mut u = vec![0.0; k];
    let mut acc = 0.0;
    for j in 0..states.len() - 1 {
        s.sigma_into(&states[j], &mut sigma);
        s.a_inv_into(&states[j], &mut a_inv)?;
        linalg::matvec(&a_inv, d, d, &eta[j], &mut tmp);
        linalg::matvec_t(&sigma, d, k, &tmp, &mut u);
        for c in 0..k {
            acc += u[c] * dw[j * k + c];
        }
    }
    Ok(acc / t)
}

/// Bismut–Elworthy–Li estimate of `D_h P_t f(x)`.
#[allow(clippy::too_many_arguments)]
pub fn bel_gradient(
    f: &Observable,
    b: &DriftField,
    s: &DiffusionSpec,
    t: f64,
    x: &[f64],
    h: &[f64],
    n_paths: usize,
    grid: &TimeGrid,
    seed: u64,
    opts: BelOptions<'_>,
) -> Result<GradientEstimate> {
    paths::check_dims(b, s, x)?;
    if h.len() != x.len() {
        return Err(FlowError::DimensionMismatch {
            expected: x.len(),
            got: h.len(),
        });
    }
    if n_paths == 0 {
        return Err(FlowError::invalid("n_paths", "must be positive"));
    }
    if opts.transform.is_none() && !b.has_jacobian() {
        return Err(FlowError::MissingJacobian {
            label: b.label().to_string(),
        });
    }
    let g = horizon_grid(grid, t)?;
    let k = s.noise_dim();
    let cv = if opts.use_cv {
        f.eval(&deterministic_flow(b, x, &g))
    } else {
        0.0
    };
    let acc = stats::reduce_paths(n_paths, 3, |p, row| {
        let driver = BrownianDriver::new(seed, p as u64, k, *grid);
        let (states, eta, dw) = match opts.transform {
            Some(tr) => {
                let fd = zvonkin::flow_derivative(tr, s, x, h, &driver, &g)?;
                (fd.path.x.states, fd.eta, fd.path.x.increments)
            }
            None => {
                let (path, var) = paths::simulate_with_variation(b, s, x, h, &driver, &g)?;
                (path.states, var.eta, path.increments)
            }
        };
        let j1 = bel_weight(s, &states, &eta, &dw, t)?;
        let fx = f.eval(states.last().expect("nonempty"));
        row[0] = (fx - cv) * j1;
        row[1] = j1;
        row[2] = j1 * j1;
        Ok::<_, FlowError>(())
    })?;
    let st = &acc.0;
    Ok(GradientEstimate {
        value: st[0].mean,
        stderr: st[0].stderr(),
        n_paths,
        t,
        x: x.to_vec(),
        h: h.to_vec(),
        control_variate_used: opts.use_cv,
        via_transform: opts.transform.is_some(),
        j_mean: st[1].mean,
        j_stderr: st[1].stderr(),
        j_second_moment: st[2].mean,
    })
}

/// Central difference `(P_t f(x+εh) − P_t f(x−εh)) / 2ε` on coupled paths.
#[allow(clippy::too_many_arguments)]
pub fn fd_gradient(
    f: &Observable,
    b: &DriftField,
    s: &DiffusionSpec,
    t: f64,
    x: &[f64],
    h: &[f64],
    fd_step: f64,
    n_paths: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<GradientEstimate> {
    paths::check_dims(b, s, x)?;
    if h.len() != x.len() {
        return Err(FlowError::DimensionMismatch {
            expected: x.len(),
            got: h.len(),
        });
    }
    if !(fd_step > 0.0) {
        return Err(FlowError::invalid("fd_step", "must be positive"));
    }
    if n_paths == 0 {
        return Err(FlowError::invalid("n_paths", "must be positive"));
    }
    let g = horizon_grid(grid, t)?;
    let k = s.noise_dim();
    let plus: Vec<f64> = x.iter().zip(h).map(|(a, v)| a + fd_step * v).collect();
    let minus: Vec<f64> = x.iter().zip(h).map(|(a, v)| a - fd_step * v).collect();
    let acc = stats::reduce_paths(n_paths, 1, |p, row| {
        let dw = BrownianDriver::new(seed, p as u64, k, *grid).increments(&g)?;
        let ep = paths::integrate(b, s, &plus, &dw, g.dt(), g.steps, |_, _, _| {})?;
        let em = paths::integrate(b, s, &minus, &dw, g.dt(), g.steps, |_, _, _| {})?;
        row[0] = (f.eval(&ep) - f.eval(&em)) / (2.0 * fd_step);
        Ok::<_, FlowError>(())
    })?;
    Ok(GradientEstimate {
        value: acc.0[0].mean,
        stderr: acc.0[0].stderr(),
        n_paths,
        t,
        x: x.to_vec(),
        h: h.to_vec(),
        control_variate_used: false,
        via_transform: false,
        j_mean: 0.0,
        j_stderr: 0.0,
        j_second_moment: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    pub j_second_moment: f64,
    /// Dropped from the fit (relative stderr above the cutoff).
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub points: Vec<DecayPoint>,
    pub slope: f64,
    pub slope_stderr: f64,
    /// `slope ± 2·slope_stderr`.
    pub band: (f64, f64),
    pub intercept: f64,
    /// `−(1 − θ_f)/2`, the exponent of the gradient bound.
    pub expected_slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    pub n_paths: usize,
    /// Euler steps per horizon `t` (the step scales with `t`).
    pub steps_per_t: usize,
    pub use_cv: bool,
}

/// Weighted least squares of `log|D_hP_tf(x)|` on `log t`.
#[allow(clippy::too_many_arguments)]
pub fn decay_probe(
    f: &Observable,
    b: &DriftField,
    s: &DiffusionSpec,
    x: &[f64],
    h: &[f64],
    ts: &[f64],
    cfg: &DecayConfig,
    seed: u64,
    transform: Option<&ZvonkinTransform>,
) -> Result<DecayFit> {
    let theta = f
        .theta_f
        .ok_or_else(|| FlowError::invalid("f", "observable has no Hölder exponent"))?;
    if ts.len() < 3 {
        return Err(FlowError::invalid("ts", "need at least three horizons"));
    }
    if ts.windows(2).any(|w| !(w[0] < w[1])) || !(ts[0] > 0.0) {
        return Err(FlowError::invalid(
            "ts",
            "horizons must be positive and ascending",
        ));
    }
    let decades = (ts[ts.len() - 1] / ts[0]).log10();
    if decades < DECAY_MIN_DECADES {
        return Err(FlowError::invalid(
            "ts",
            format!("window spans {decades:.2} decades, need {DECAY_MIN_DECADES}"),
        ));
    }
    if cfg.steps_per_t == 0 {
        return Err(FlowError::invalid("steps_per_t", "must be positive"));
    }
    let mut points = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let grid = TimeGrid::new(0.0, t, cfg.steps_per_t)?;
        let est = bel_gradient(
            f,
            b,
            s,
            t,
            x,
            h,
            cfg.n_paths,
            &grid,
            derive_seed(seed, &format!("decay/t{i}")),
            BelOptions {
                use_cv: cfg.use_cv,
                transform,
            },
        )?;
        let excluded = !(est.stderr <= DECAY_MAX_REL_STDERR * est.value.abs());
        points.push(DecayPoint {
            t,
            value: est.value,
            stderr: est.stderr,
            j_second_moment: est.j_second_moment,
            excluded,
        });
    }
    let kept: Vec<&DecayPoint> = points.iter().filter(|p| !p.excluded).collect();
    if kept.len() < 2 {
        return Err(FlowError::invalid(
            "ts",
            format!("only {} horizon(s) survive the stderr cutoff", kept.len()),
        ));
    }
    // var(log|g|) ≈ (se/g)²
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in &kept {
        let w = (p.value / p.stderr.max(f64::MIN_POSITIVE)).powi(2);
        let (lx, ly) = (p.t.ln(), p.value.abs().ln());
        sw += w;
        sx += w * lx;
        sy += w * ly;
        sxx += w * lx * lx;
        sxy += w * lx * ly;
    }
    let det = sw * sxx - sx * sx;
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    let slope_stderr = (sw / det).sqrt();
    Ok(DecayFit {
        points,
        slope,
        slope_stderr,
        band: (slope - 2.0 * slope_stderr, slope + 2.0 * slope_stderr),
        intercept,
        expected_slope: -(1.0 - theta) / 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t: f64, steps: usize) -> TimeGrid {
        TimeGrid::new(0.0, t, steps).unwrap()
    }

    #[test]
    fn presets_parse() {
        assert_eq!(
            Observable::from_preset("const", 1).unwrap().eval(&[3.0]),
            1.0
        );
        assert_eq!(
            Observable::from_preset("const:c=2", 1)
                .unwrap()
                .eval(&[3.0]),
            2.0
        );
        assert_eq!(
            Observable::from_preset("coord:1", 2)
                .unwrap()
                .eval(&[3.0, 4.0]),
            4.0
        );
        assert_eq!(
            Observable::from_preset("sq", 2).unwrap().eval(&[3.0, 4.0]),
            25.0
        );
        let h = Observable::from_preset("holder:0.5", 1).unwrap();
        assert_eq!(h.eval(&[-4.0]), 2.0);
        assert_eq!(h.theta_f, Some(0.5));
        let o = Observable::from_preset("holder-odd:theta=0.5", 1).unwrap();
        assert_eq!(o.eval(&[-4.0]), -2.0);
        assert!(Observable::from_preset("coord:2", 2).is_err());
        assert!(Observable::from_preset("holder:1.5", 1).is_err());
        assert!(Observable::from_preset("cube", 1).is_err());
    }

    #[test]
    fn semigroup_of_constant_is_exact() {
        let e = semigroup(
            &Observable::constant(1.0),
            &DriftField::linear(1, vec![-1.0]),
            &DiffusionSpec::identity(1),
            1.0,
            &[0.3],
            50,
            &grid(1.0, 100),
            1,
        )
        .unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn semigroup_gaussian_second_moment() {
        let e = semigroup(
            &Observable::sq(),
            &DriftField::zero(2),
            &DiffusionSpec::identity(2),
            1.0,
            &[0.0, 0.0],
            4000,
            &grid(1.0, 10),
            2,
        )
        .unwrap();
        assert!((e.mean - 2.0).abs() <= 3.0 * e.stderr, "{e:?}");
    }

    #[test]
    fn semigroup_ou_mean() {
        let e = semigroup(
            &Observable::coord(0),
            &DriftField::linear(1, vec![-1.0]),
            &DiffusionSpec::identity(1),
            1.0,
            &[1.0],
            4000,
            &grid(1.0, 200),
            3,
        )
        .unwrap();
        // Euler mean is (1 − dt)^N = 0.3660 at dt = 5e-3
        assert!(
            (e.mean - (-1.0f64).exp()).abs() <= 3.0 * e.stderr + 2e-3,
            "{e:?}"
        );
    }

    #[test]
    fn semigroup_rejects_zero_horizon() {
        let r = semigroup(
            &Observable::sq(),
            &DriftField::zero(1),
            &DiffusionSpec::identity(1),
            0.0,
            &[0.0],
            10,
            &grid(1.0, 10),
            1,
        );
        assert!(r.is_err());
    }

    fn ou() -> (DriftField, DiffusionSpec) {
        (
            DriftField::linear(1, vec![-1.0]),
            DiffusionSpec::identity(1),
        )
    }

    #[test]
    fn bel_ou_oracle() {
        let (b, s) = ou();
        let g = grid(1.0, 200);
        let est = bel_gradient(
            &Observable::coord(0),
            &b,
            &s,
            1.0,
            &[1.0],
            &[1.0],
            4000,
            &g,
            4,
            BelOptions::default(),
        )
        .unwrap();
        assert!(
            (est.value - (-1.0f64).exp()).abs() <= 3.0 * est.stderr + 2e-3,
            "{est:?}"
        );
        let fd = fd_gradient(
            &Observable::coord(0),
            &b,
            &s,
            1.0,
            &[1.0],
            &[1.0],
            1e-2,
            100,
            &g,
            4,
        )
        .unwrap();
        // linear flow: coupled differences are exact (1 − dt)^N
        assert!((fd.value - 0.995f64.powi(200)).abs() < 1e-9);
    }

    #[test]
    fn bel_trivial_cases() {
        let (b, s) = ou();
        let g = grid(1.0, 100);
        let one = bel_gradient(
            &Observable::constant(1.0),
            &b,
            &s,
            1.0,
            &[0.5],
            &[1.0],
            2000,
            &g,
            5,
            BelOptions::default(),
        )
        .unwrap();
        assert!(one.value.abs() <= 3.0 * one.stderr, "{one:?}");
        assert_eq!(one.value, one.j_mean);
        let zero = bel_gradient(
            &Observable::sq(),
            &b,
            &s,
            1.0,
            &[0.5],
            &[0.0],
            200,
            &g,
            5,
            BelOptions::default(),
        )
        .unwrap();
        assert_eq!(zero.value, 0.0);
        assert_eq!(zero.stderr, 0.0);
        let fd = fd_gradient(
            &Observable::constant(1.0),
            &b,
            &s,
            1.0,
            &[0.5],
            &[1.0],
            1e-2,
            50,
            &g,
            5,
        )
        .unwrap();
        assert_eq!(fd.value, 0.0);
    }

    #[test]
    fn bel_requires_derivative_route() {
        let b = DriftField::holder(1, 0.5, 1.0);
        let s = DiffusionSpec::identity(1);
        let r = bel_gradient(
            &Observable::sq(),
            &b,
            &s,
            1.0,
            &[0.5],
            &[1.0],
            10,
            &grid(1.0, 10),
            1,
            BelOptions::default(),
        );
        assert!(matches!(r, Err(FlowError::MissingJacobian { .. })));
    }

    #[test]
    fn bel_linear_in_direction() {
        let (b, s) = ou();
        let g = grid(1.0, 100);
        let f = Observable::sq();
        let e1 = bel_gradient(
            &f,
            &b,
            &s,
            1.0,
            &[0.5],
            &[1.0],
            300,
            &g,
            6,
            BelOptions::default(),
        )
        .unwrap();
        let e2 = bel_gradient(
            &f,
            &b,
            &s,
            1.0,
            &[0.5],
            &[2.0],
            300,
            &g,
            6,
            BelOptions::default(),
        )
        .unwrap();
        assert_eq!(e2.value, 2.0 * e1.value);
        let e3 = bel_gradient(
            &f,
            &b,
            &s,
            1.0,
            &[0.5],
            &[0.3],
            300,
            &g,
            6,
            BelOptions::default(),
        )
        .unwrap();
        assert!((e3.value - 0.3 * e1.value).abs() <= 1e-12 * e1.value.abs().max(1.0));
    }

    #[test]
    fn control_variate_keeps_mean_and_cuts_variance() {
        let (b, s) = ou();
        let g = grid(1.0, 100);
        let f = Observable::sq();
        let x = [3.0];
        let plain = bel_gradient(
            &f,
            &b,
            &s,
            1.0,
            &x,
            &[1.0],
            2000,
            &g,
            7,
            BelOptions::default(),
        )
        .unwrap();
        let cv = bel_gradient(
            &f,
            &b,
            &s,
            1.0,
            &x,
            &[1.0],
            2000,
            &g,
            7,
            BelOptions {
                use_cv: true,
                transform: None,
            },
        )
        .unwrap();
        assert!(cv.stderr < plain.stderr);
        let combined = (plain.stderr.powi(2) + cv.stderr.powi(2)).sqrt();
        assert!((cv.value - plain.value).abs() <= 3.0 * combined);
    }

    #[test]
    fn rk4_flow_is_accurate() {
        let y = deterministic_flow(&DriftField::linear(1, vec![-1.0]), &[1.0], &grid(1.0, 20));
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn bel_through_exact_transform_matches_direct() {
        let (b, s) = ou();
        let t = ZvonkinTransform::from_fn(
            1,
            2.0,
            1.0 / 3.0,
            |x, o| o[0] = -x[0] / 3.0,
            |_, o| o[0] = -1.0 / 3.0,
        )
        .unwrap();
        let g = grid(1.0, 100);
        let f = Observable::coord(0);
        let direct = bel_gradient(
            &f,
            &b,
            &s,
            1.0,
            &[1.0],
            &[1.0],
            500,
            &g,
            8,
            BelOptions::default(),
        )
        .unwrap();
        let via = bel_gradient(
            &f,
            &b,
            &s,
            1.0,
            &[1.0],
            &[1.0],
            500,
            &g,
            8,
            BelOptions {
                use_cv: false,
                transform: Some(&t),
            },
        )
        .unwrap();
        assert!(
            (direct.value - via.value).abs() < 1e-9,
            "{direct:?} {via:?}"
        );
        assert!(via.via_transform);
    }

    #[test]
    fn decay_probe_smooth_observable_is_flat() {
        let fit = decay_probe(
            &Observable::coord(0),
            &DriftField::zero(1),
            &DiffusionSpec::identity(1),
            &[0.0],
            &[1.0],
            &[0.02, 0.05, 0.1, 0.2, 0.5],
            &DecayConfig {
                n_paths: 2000,
                steps_per_t: 20,
                use_cv: false,
            },
            9,
            None,
        )
        .unwrap();
        assert!(fit.slope.abs() < 0.1, "{fit:?}");
        assert_eq!(fit.expected_slope, 0.0);
    }

    #[test]
    fn decay_probe_validates_window() {
        let r = decay_probe(
            &Observable::coord(0),
            &DriftField::zero(1),
            &DiffusionSpec::identity(1),
            &[0.0],
            &[1.0],
            &[0.1, 0.2, 0.5],
            &DecayConfig {
                n_paths: 10,
                steps_per_t: 10,
                use_cv: false,
            },
            9,
            None,
        );
        assert!(r.is_err());
    }
}
