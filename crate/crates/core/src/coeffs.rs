//! Coefficient model: drift fields, diffusion matrices, and empirical
//! checks of the standing hypotheses (local Hölder drift with linear
//! growth, bounded smooth σ, uniformly invertible `a = σσ*`).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::linalg;

pub type VecFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Step used for central-difference Jacobians of σ.
pub const SIGMA_FD_STEP: f64 = 1e-5;

/// Maximum accepted entry of `a · a⁻¹ − I`.
pub const INVERSION_RESIDUAL_MAX: f64 = 1e-6;

/// Default pair separations for seminorm probes.
pub const PAIR_SCALES: [f64; 4] = [1e-3, 1e-2, 0.1, 1.0];

/// A drift vector field `b: ℝ^d → ℝ^d`.
///
/// Cheap to clone; the closures are shared.
#[derive(Clone)]
pub struct DriftField {
    dim: usize,
    theta: f64,
    label: String,
    eval: Arc<VecFn>,
    jacobian: Option<Arc<VecFn>>,
}

impl fmt::Debug for DriftField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftField")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("theta", &self.theta)
            .field("jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl DriftField {
    pub fn new<F>(dim: usize, theta: f64, label: impl Into<String>, eval: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert!(dim >= 1, "drift dimension must be positive");
        assert!(
            theta > 0.0 && theta <= 1.0,
            "Hölder exponent must lie in (0, 1]"
        );
        DriftField {
            dim,
            theta,
            label: label.into(),
            eval: Arc::new(eval),
            jacobian: None,
        }
    }

    /// Attaches an analytic Jacobian, row-major `J[i*d + l] = ∂b_i/∂x_l`.
    pub fn with_jacobian<F>(mut self, jac: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        assert!(theta > 0.0 && theta <= 1.0);
        self.theta = theta;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out);
        out
    }

    /// Writes the Jacobian into `out` and returns `true`, or returns
    /// `false` when the field carries none.
    #[inline]
    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.jacobian {
            Some(j) => {
                j(x, out);
                true
            }
            None => false,
        }
    }

    pub fn jacobian(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.jacobian_into(x, &mut out).then_some(out)
    }

    pub fn zero(dim: usize) -> Self {
        DriftField::new(dim, 0.5, "zero", |_, out| out.fill(0.0))
            .with_jacobian(|_, out| out.fill(0.0))
    }

    /// `b(x) = c` (one value per component).
    pub fn constant(c: Vec<f64>) -> Self {
        let dim = c.len();
        let label = format!("const:c={}", join(&c, ";"));
        DriftField::new(dim, 0.5, label, move |_, out| out.copy_from_slice(&c))
            .with_jacobian(|_, out| out.fill(0.0))
    }

    /// `b(x) = A x` with `A` row-major `d × d`.
    pub fn linear(dim: usize, a: Vec<f64>) -> Self {
        assert_eq!(a.len(), dim * dim, "linear drift needs a d×d matrix");
        let label = format!("linear:a={}", join(&a, ";"));
        let jac = a.clone();
        DriftField::new(dim, 0.5, label, move |x, out| {
            linalg::matvec(&a, dim, dim, x, out)
        })
        .with_jacobian(move |_, out| out.copy_from_slice(&jac))
    }

    /// The classical unbounded Hölder example `b(x) = scale · |x|^θ · e₁`.
    pub fn holder(dim: usize, theta: f64, scale: f64) -> Self {
        assert!(theta > 0.0 && theta < 1.0);
        DriftField::new(
            dim,
            theta,
            format!("holder:theta={theta},scale={scale}"),
            move |x, out| {
                out.fill(0.0);
                out[0] = scale * linalg::norm(x).powf(theta);
            },
        )
    }

    /// `α·b₁ + β·b₂`; the Jacobian survives only if both have one.
    pub fn combine(alpha: f64, b1: &DriftField, beta: f64, b2: &DriftField) -> Self {
        assert_eq!(b1.dim, b2.dim);
        let dim = b1.dim;
        let (f1, f2) = (b1.eval.clone(), b2.eval.clone());
        let mut field = DriftField::new(
            dim,
            b1.theta.min(b2.theta),
            format!("{alpha}*({})+{beta}*({})", b1.label, b2.label),
            move |x, out| {
                let mut tmp = vec![0.0; dim];
                f1(x, out);
                f2(x, &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o = alpha * *o + beta * t;
                }
            },
        );
        if let (Some(j1), Some(j2)) = (b1.jacobian.clone(), b2.jacobian.clone()) {
            field = field.with_jacobian(move |x, out| {
                let mut tmp = vec![0.0; dim * dim];
                j1(x, out);
                j2(x, &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o = alpha * *o + beta * t;
                }
            });
        }
        field
    }

    /// Parses the drift presets `zero`, `const:c=<v>`, `linear:a=<m>`,
    /// `holder:theta=<t>,scale=<c>`. Mollified presets are resolved by
    /// [`crate::mollify::drift_from_preset`].
    pub fn from_preset(spec: &str, dim: usize) -> Result<Self> {
        let (kind, params) = spec.split_once(':').unwrap_or((spec, ""));
        match kind {
            "zero" => Ok(DriftField::zero(dim)),
            "const" => {
                let c = parse_values(param(params, "c")?.unwrap_or("1"))?;
                let c = broadcast_vector(c, dim, "c")?;
                Ok(DriftField::constant(c))
            }
            "linear" => {
                let a = parse_values(param(params, "a")?.unwrap_or("-1"))?;
                let a = broadcast_matrix(a, dim, "a")?;
                Ok(DriftField::linear(dim, a))
            }
            "holder" => {
                let theta = parse_f64(param(params, "theta")?.unwrap_or("0.5"), "theta")?;
                let scale = parse_f64(param(params, "scale")?.unwrap_or("1"), "scale")?;
                if !(theta > 0.0 && theta < 1.0) {
                    return Err(FlowError::invalid("theta", "must lie in (0, 1)"));
                }
                Ok(DriftField::holder(dim, theta, scale))
            }
            other => Err(FlowError::invalid(
                "drift",
                format!("unknown preset `{other}`"),
            )),
        }
    }
}

#[derive(Clone)]
struct ConstantDiffusion {
    sigma: Vec<f64>,
    a_inv: Option<Vec<f64>>,
}

/// Diffusion coefficient `σ: ℝ^d → ℝ^{d×k}` with `a = σσ*`.
#[derive(Clone)]
pub struct DiffusionSpec {
    dim: usize,
    noise_dim: usize,
    label: String,
    sigma: Arc<VecFn>,
    dsigma: Option<Arc<VecFn>>,
    a_inv: Option<Arc<VecFn>>,
    constant: Option<Arc<ConstantDiffusion>>,
}

impl fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionSpec")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .finish()
    }
}

impl DiffusionSpec {
    /// General state-dependent diffusion; `sigma` writes a row-major
    /// `d × k` matrix.
    pub fn new<F>(dim: usize, noise_dim: usize, label: impl Into<String>, sigma: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        DiffusionSpec {
            dim,
            noise_dim,
            label: label.into(),
            sigma: Arc::new(sigma),
            dsigma: None,
            a_inv: None,
            constant: None,
        }
    }

    /// Analytic Jacobian of σ, laid out as `[(i*k + j)*d + l] = ∂σ_ij/∂x_l`.
    pub fn with_dsigma<F>(mut self, dsigma: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.dsigma = Some(Arc::new(dsigma));
        self
    }

    pub fn with_a_inv<F>(mut self, a_inv: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.a_inv = Some(Arc::new(a_inv));
        self
    }

    /// Constant matrix `σ` (`d × k`, row-major).
    pub fn constant_matrix(dim: usize, noise_dim: usize, sigma: Vec<f64>) -> Self {
        assert_eq!(sigma.len(), dim * noise_dim);
        let mut a = vec![0.0; dim * dim];
        gram(&sigma, dim, noise_dim, &mut a);
        let a_inv = linalg::inverse_with_residual(&a, dim)
            .filter(|(_, r)| *r <= INVERSION_RESIDUAL_MAX)
            .map(|(inv, _)| inv);
        let label = format!("const-matrix:{}", join(&sigma, ";"));
        let s = sigma.clone();
        let mut spec =
            DiffusionSpec::new(dim, noise_dim, label, move |_, out| out.copy_from_slice(&s))
                .with_dsigma(|_, out| out.fill(0.0));
        spec.constant = Some(Arc::new(ConstantDiffusion { sigma, a_inv }));
        spec
    }

    /// `σ = s · I_d`.
    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        let mut m = linalg::identity(dim);
        m.iter_mut().for_each(|v| *v *= s);
        let mut spec = DiffusionSpec::constant_matrix(dim, dim, m);
        spec.label = if s == 1.0 {
            "sigma:identity".into()
        } else {
            format!("sigma:const:s={s}")
        };
        spec
    }

    pub fn identity(dim: usize) -> Self {
        DiffusionSpec::scaled_identity(dim, 1.0)
    }

    /// `σ(x) = diag(1 + ε sin x_i)`.
    pub fn sin_perturbed(dim: usize, eps: f64) -> Self {
        DiffusionSpec::new(
            dim,
            dim,
            format!("sigma:sin-perturbed:eps={eps}"),
            move |x, out| {
                out.fill(0.0);
                for i in 0..dim {
                    out[i * dim + i] = 1.0 + eps * x[i].sin();
                }
            },
        )
        .with_dsigma(move |x, out| {
            out.fill(0.0);
            for i in 0..dim {
                out[(i * dim + i) * dim + i] = eps * x[i].cos();
            }
        })
        .with_a_inv(move |x, out| {
            out.fill(0.0);
            for i in 0..dim {
                let s = 1.0 + eps * x[i].sin();
                out[i * dim + i] = 1.0 / (s * s);
            }
        })
    }

    /// Parses `identity`, `const:s=<c>`, `sin-perturbed:eps=<e>`, each with
    /// an optional `sigma:` prefix.
    pub fn from_preset(spec: &str, dim: usize) -> Result<Self> {
        let body = spec.strip_prefix("sigma:").unwrap_or(spec);
        let (kind, params) = body.split_once(':').unwrap_or((body, ""));
        match kind {
            "identity" => Ok(DiffusionSpec::identity(dim)),
            "const" => {
                let s = parse_f64(param(params, "s")?.unwrap_or("1"), "s")?;
                Ok(DiffusionSpec::scaled_identity(dim, s))
            }
            "sin-perturbed" => {
                let eps = parse_f64(param(params, "eps")?.unwrap_or("0.1"), "eps")?;
                if eps.abs() >= 1.0 {
                    return Err(FlowError::invalid("eps", "|eps| < 1 keeps σ invertible"));
                }
                Ok(DiffusionSpec::sin_perturbed(dim, eps))
            }
            other => Err(FlowError::invalid(
                "sigma",
                format!("unknown preset `{other}`"),
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    #[inline]
    pub fn sigma_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.constant {
            Some(c) => out.copy_from_slice(&c.sigma),
            None => (self.sigma)(x, out),
        }
    }

    pub fn sigma(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim];
        self.sigma_into(x, &mut out);
        out
    }

    /// Jacobian of σ: analytic when supplied, otherwise central
    /// differences with step [`SIGMA_FD_STEP`].
    pub fn dsigma_into(&self, x: &[f64], out: &mut [f64]) {
        if let Some(ds) = &self.dsigma {
            ds(x, out);
            return;
        }
        let (d, k) = (self.dim, self.noise_dim);
        let mut xp = x.to_vec();
        let mut sp = vec![0.0; d * k];
        let mut sm = vec![0.0; d * k];
        for l in 0..d {
            xp[l] = x[l] + SIGMA_FD_STEP;
            (self.sigma)(&xp, &mut sp);
            xp[l] = x[l] - SIGMA_FD_STEP;
            (self.sigma)(&xp, &mut sm);
            xp[l] = x[l];
            for e in 0..d * k {
                out[e * d + l] = (sp[e] - sm[e]) / (2.0 * SIGMA_FD_STEP);
            }
        }
    }

    pub fn dsigma(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim * self.dim];
        self.dsigma_into(x, &mut out);
        out
    }

    pub fn a_into(&self, x: &[f64], out: &mut [f64]) {
        let s = self.sigma(x);
        gram(&s, self.dim, self.noise_dim, out);
    }

    pub fn a(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.a_into(x, &mut out);
        out
    }

    /// `a(x)⁻¹`, verified by residual. Fails with the offending point when
    /// `a(x)` is numerically singular.
    pub fn a_inv_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if let Some(c) = &self.constant {
            return match &c.a_inv {
                Some(inv) => {
                    out.copy_from_slice(inv);
                    Ok(())
                }
                None => Err(FlowError::SingularDiffusion {
                    point: x.to_vec(),
                    residual: f64::INFINITY,
                }),
            };
        }
        if let Some(f) = &self.a_inv {
            f(x, out);
            if out.iter().all(|v| v.is_finite()) {
                return Ok(());
            }
            return Err(FlowError::SingularDiffusion {
                point: x.to_vec(),
                residual: f64::INFINITY,
            });
        }
        let a = self.a(x);
        match linalg::inverse_with_residual(&a, self.dim) {
            Some((inv, res)) if res <= INVERSION_RESIDUAL_MAX => {
                out.copy_from_slice(&inv);
                Ok(())
            }
            Some((_, res)) => Err(FlowError::SingularDiffusion {
                point: x.to_vec(),
                residual: res,
            }),
            None => Err(FlowError::SingularDiffusion {
                point: x.to_vec(),
                residual: f64::INFINITY,
            }),
        }
    }

    pub fn a_inv(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.a_inv_into(x, &mut out)?;
        Ok(out)
    }

    /// Nested central-difference estimate of `‖D^k σ(x)‖_HS`, `k ∈ 1..=3`.
    pub fn derivative_norm_fd(&self, x: &[f64], order: usize, step: f64) -> f64 {
        let (d, k) = (self.dim, self.noise_dim);
        let entries = d * k;
        let mut acc = vec![0.0; entries];
        let mut total = 0.0;
        let mut s = vec![0.0; entries];
        let mut xp = vec![0.0; d];
        let n_multi = d.pow(order as u32);
        for mi in 0..n_multi {
            let dirs: Vec<usize> = (0..order).map(|p| (mi / d.pow(p as u32)) % d).collect();
            acc.fill(0.0);
            for signs in 0..(1usize << order) {
                xp.copy_from_slice(x);
                let mut parity = 1.0;
                for (p, &l) in dirs.iter().enumerate() {
                    let sgn = if signs >> p & 1 == 1 { -1.0 } else { 1.0 };
                    parity *= sgn;
                    xp[l] += sgn * step;
                }
                (self.sigma)(&xp, &mut s);
                for e in 0..entries {
                    acc[e] += parity * s[e];
                }
            }
            let scale = (2.0 * step).powi(order as i32);
            total += acc.iter().map(|v| (v / scale).powi(2)).sum::<f64>();
        }
        total.sqrt()
    }
}

/// `a = σ σᵀ`, symmetric by construction (`a_ij` and `a_ji` use the same
/// products in the same order).
pub fn gram(sigma: &[f64], d: usize, k: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for m in 0..k {
                acc += sigma[i * k + m] * sigma[j * k + m];
            }
            out[i * d + j] = acc;
        }
    }
}

/// `max |f(x) − f(y)| / |x − y|^θ` over the pairs.
pub fn holder_seminorm(field: &DriftField, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(FlowError::invalid("probes", "pair set is empty"));
    }
    let mut fx = vec![0.0; field.dim()];
    let mut fy = vec![0.0; field.dim()];
    let mut best: f64 = 0.0;
    for (index, (x, y)) in pairs.iter().enumerate() {
        let r = linalg::dist(x, y);
        if r == 0.0 {
            return Err(FlowError::DegeneratePair {
                index,
                reason: "x = y".into(),
            });
        }
        if r > 1.0 + 1e-12 {
            return Err(FlowError::DegeneratePair {
                index,
                reason: format!("|x − y| = {r} exceeds 1"),
            });
        }
        field.eval_into(x, &mut fx);
        field.eval_into(y, &mut fy);
        best = best.max(linalg::dist(&fx, &fy) / r.powf(field.theta()));
    }
    Ok(best)
}

/// Deterministic low-discrepancy cloud (Halton) inside the ball of the
/// given radius.
pub fn halton_cloud(dim: usize, count: usize, radius: f64) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 6] = [2, 3, 5, 7, 11, 13];
    assert!(dim <= PRIMES.len());
    let mut out = Vec::with_capacity(count);
    let mut index = 1u64;
    while out.len() < count {
        let p: Vec<f64> = (0..dim)
            .map(|c| radius * (2.0 * radical_inverse(index, PRIMES[c]) - 1.0))
            .collect();
        index += 1;
        if linalg::norm(&p) <= radius {
            out.push(p);
        }
    }
    out
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Pairs `(x, x + s·u)` for every probe, scale and unit direction `u` in
/// `{e_1, …, e_d, (1, …, 1)/√d}`.
pub fn offset_pairs(probes: &[Vec<f64>], scales: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut pairs = Vec::new();
    for x in probes {
        let d = x.len();
        let mut dirs: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                e
            })
            .collect();
        if d > 1 {
            dirs.push(vec![1.0 / (d as f64).sqrt(); d]);
        }
        for &s in scales {
            for u in &dirs {
                let y: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + s * b).collect();
                pairs.push((x.clone(), y));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy)]
pub struct HypothesisConfig {
    /// Violation flagged when `sup ‖a⁻¹‖` exceeds this.
    pub a_inv_ceiling: f64,
    /// Relative change across FD refinement above which a σ-derivative
    /// estimate counts as divergent.
    pub refinement_tol: f64,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        HypothesisConfig {
            a_inv_ceiling: 1e6,
            refinement_tol: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub holder_seminorm_est: f64,
    pub growth_const_est: f64,
    pub a_inv_sup_est: f64,
    pub sigma_deriv_sups: [f64; 3],
    pub probe_count: usize,
    pub violations: Vec<String>,
}

const DERIV_STEPS: [f64; 3] = [1e-5, 1e-4, 1e-3];

/// Evaluates the hypothesis diagnostics on `probes`.
pub fn check_hypotheses(
    b: &DriftField,
    s: &DiffusionSpec,
    probes: &[Vec<f64>],
    cfg: &HypothesisConfig,
) -> Result<HypothesisReport> {
    if probes.is_empty() {
        return Err(FlowError::invalid("probes", "probe set is empty"));
    }
    if b.dim() != s.dim() {
        return Err(FlowError::DimensionMismatch {
            expected: b.dim(),
            got: s.dim(),
        });
    }
    let pairs = offset_pairs(probes, &PAIR_SCALES);
    let holder = holder_seminorm(b, &pairs)?;

    let mut growth: f64 = 0.0;
    let mut a_inv_sup: f64 = 0.0;
    let mut sups = [0.0f64; 3];
    let mut violations = Vec::new();
    let d = s.dim();
    let mut a = vec![0.0; d * d];
    for x in probes {
        growth = growth.max(linalg::norm(&b.eval(x)) / (1.0 + linalg::norm(x)));

        s.a_into(x, &mut a);
        let inv = match linalg::inverse_with_residual(&a, d) {
            Some((inv, res)) if res <= INVERSION_RESIDUAL_MAX => inv,
            Some((_, res)) => {
                return Err(FlowError::SingularDiffusion {
                    point: x.clone(),
                    residual: res,
                })
            }
            None => {
                return Err(FlowError::SingularDiffusion {
                    point: x.clone(),
                    residual: f64::INFINITY,
                })
            }
        };
        a_inv_sup = a_inv_sup.max(linalg::hs_norm(&inv));

        for (k, step) in DERIV_STEPS.iter().enumerate() {
            let v = if k == 0 && s.dsigma.is_some() {
                linalg::hs_norm(&s.dsigma(x))
            } else {
                s.derivative_norm_fd(x, k + 1, *step)
            };
            if k > 0 || s.dsigma.is_none() {
                let refined = s.derivative_norm_fd(x, k + 1, step / 2.0);
                if (refined - v).abs() > cfg.refinement_tol * v.abs().max(1.0) {
                    violations.push(format!(
                        "D^{}σ estimate diverges under refinement at {:?}: {v} vs {refined}",
                        k + 1,
                        x
                    ));
                }
            }
            sups[k] = sups[k].max(v);
        }
    }
    if a_inv_sup > cfg.a_inv_ceiling {
        violations.push(format!(
            "sup ‖a⁻¹‖ = {a_inv_sup} exceeds ceiling {}",
            cfg.a_inv_ceiling
        ));
    }
    Ok(HypothesisReport {
        holder_seminorm_est: holder,
        growth_const_est: growth,
        a_inv_sup_est: a_inv_sup,
        sigma_deriv_sups: sups,
        probe_count: probes.len(),
        violations,
    })
}

/// Uniform grid of `n` points on `[lo, hi]` in d = 1.
pub fn grid_1d(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    assert!(n >= 2);
    (0..n)
        .map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64])
        .collect()
}

pub(crate) fn join(v: &[f64], sep: &str) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

/// Value of `key` in a `k1=v1,k2=v2` list.
pub fn param<'a>(params: &'a str, key: &str) -> Result<Option<&'a str>> {
    for item in params.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| FlowError::invalid(key, format!("malformed parameter `{item}`")))?;
        if k.trim() == key {
            return Ok(Some(v.trim()));
        }
    }
    Ok(None)
}

pub fn parse_f64(s: &str, name: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| FlowError::invalid(name, format!("`{s}` is not a finite number")))
}

/// Values separated by `;` or whitespace.
pub fn parse_values(s: &str) -> Result<Vec<f64>> {
    s.split(|c: char| c == ';' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| parse_f64(t, "value"))
        .collect()
}

fn broadcast_vector(v: Vec<f64>, dim: usize, name: &str) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; dim]),
        n if n == dim => Ok(v),
        n => Err(FlowError::invalid(
            name,
            format!("expected 1 or {dim} values, got {n}"),
        )),
    }
}

fn broadcast_matrix(v: Vec<f64>, dim: usize, name: &str) -> Result<Vec<f64>> {
    match v.len() {
        1 => {
            let mut m = linalg::identity(dim);
            m.iter_mut().for_each(|x| *x *= v[0]);
            Ok(m)
        }
        n if n == dim * dim => Ok(v),
        n => Err(FlowError::invalid(
            name,
            format!("expected 1 or {} values, got {n}", dim * dim),
        )),
    }
}

/// Point in the sin-perturbed example where `1 + ε sin x` is smallest.
pub fn sin_minimizer() -> f64 {
    -PI / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(x: f64, y: f64) -> (Vec<f64>, Vec<f64>) {
        (vec![x], vec![y])
    }

    #[test]
    fn zero_field_has_zero_seminorm() {
        let pairs = offset_pairs(&halton_cloud(2, 20, 3.0), &PAIR_SCALES);
        assert_eq!(holder_seminorm(&DriftField::zero(2), &pairs).unwrap(), 0.0);
    }

    #[test]
    fn sqrt_field_ratio_at_origin_pair() {
        let b = DriftField::holder(1, 0.5, 1.0);
        let v = holder_seminorm(&b, &[pair(0.0, 0.25), pair(1.0, 1.5)]).unwrap();
        assert!(v >= 1.0 - 1e-15, "{v}");
    }

    #[test]
    fn linear_field_unit_pair() {
        let b = DriftField::linear(1, vec![-1.0]);
        assert_eq!(holder_seminorm(&b, &[pair(0.0, 1.0)]).unwrap(), 1.0);
    }

    #[test]
    fn coincident_pair_is_named() {
        let b = DriftField::zero(1);
        let err = holder_seminorm(&b, &[pair(0.0, 0.5), pair(2.0, 2.0)]).unwrap_err();
        assert!(matches!(err, FlowError::DegeneratePair { index: 1, .. }));
    }

    #[test]
    fn seminorm_monotone_in_probe_set() {
        let b = DriftField::holder(1, 0.5, 1.0);
        let small = offset_pairs(&grid_1d(1.0, 3.0, 5), &PAIR_SCALES);
        let mut large = small.clone();
        large.extend(offset_pairs(&grid_1d(-1.0, 1.0, 9), &PAIR_SCALES));
        let a = holder_seminorm(&b, &small).unwrap();
        let c = holder_seminorm(&b, &large).unwrap();
        assert!(c >= a);
    }

    #[test]
    fn identity_report() {
        for d in 1..=3 {
            let probes = halton_cloud(d, 16, 10.0);
            let r = check_hypotheses(
                &DriftField::zero(d),
                &DiffusionSpec::identity(d),
                &probes,
                &HypothesisConfig::default(),
            )
            .unwrap();
            assert_eq!(r.holder_seminorm_est, 0.0);
            assert!((r.a_inv_sup_est - (d as f64).sqrt()).abs() < 1e-12);
            assert_eq!(r.sigma_deriv_sups, [0.0; 3]);
            assert!(r.violations.is_empty());
        }
    }

    #[test]
    fn scalar_sqrt_drift_report() {
        let r = check_hypotheses(
            &DriftField::holder(1, 0.5, 1.0),
            &DiffusionSpec::identity(1),
            &grid_1d(-5.0, 5.0, 41),
            &HypothesisConfig::default(),
        )
        .unwrap();
        assert_eq!(r.a_inv_sup_est, 1.0);
        assert!(r.growth_const_est <= 2.0 * r.holder_seminorm_est + 0.0);
    }

    #[test]
    fn sin_perturbed_a_inv_sup() {
        // Oracle: brute-force minimum of (1 + 0.1 sin x)^2 on a fine grid.
        let grid = grid_1d(-4.0, 4.0, 8001);
        let min_a = grid
            .iter()
            .map(|x| (1.0 + 0.1 * x[0].sin()).powi(2))
            .fold(f64::INFINITY, f64::min);
        let r = check_hypotheses(
            &DriftField::zero(1),
            &DiffusionSpec::sin_perturbed(1, 0.1),
            &grid,
            &HypothesisConfig::default(),
        )
        .unwrap();
        assert!((r.a_inv_sup_est - 1.0 / min_a).abs() < 1e-9);
        assert!((r.a_inv_sup_est - 1.0 / 0.81).abs() < 1e-6);
        assert!((r.sigma_deriv_sups[0] - 0.1).abs() < 1e-6);
        assert!(r.violations.is_empty(), "{:?}", r.violations);
    }

    #[test]
    fn singular_diffusion_names_point() {
        let s = DiffusionSpec::new(1, 1, "vanishing", |x, out| out[0] = x[0]);
        let err = check_hypotheses(
            &DriftField::zero(1),
            &s,
            &[vec![1.0], vec![0.0]],
            &HypothesisConfig::default(),
        )
        .unwrap_err();
        match err {
            FlowError::SingularDiffusion { point, .. } => assert_eq!(point, vec![0.0]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn a_is_symmetric_and_inverse_checks() {
        let s = DiffusionSpec::new(2, 3, "rect", |x, out| {
            out.copy_from_slice(&[
                1.0 + 0.2 * x[0].sin(),
                0.3,
                -0.1,
                0.05,
                0.9,
                0.4 * x[1].cos(),
            ])
        });
        for x in halton_cloud(2, 32, 4.0) {
            let a = s.a(&x);
            assert!((a[1] - a[2]).abs() <= 1e-12);
            let inv = s.a_inv(&x).unwrap();
            let mut prod = vec![0.0; 4];
            linalg::matmul(&a, &inv, 2, 2, 2, &mut prod);
            assert!(linalg::max_abs_diff(&prod, &linalg::identity(2)) < 1e-8);
        }
    }

    #[test]
    fn fd_dsigma_matches_analytic() {
        let analytic = DiffusionSpec::sin_perturbed(2, 0.3);
        let fd = DiffusionSpec::new(2, 2, "fd", |x, out| {
            out.fill(0.0);
            out[0] = 1.0 + 0.3 * x[0].sin();
            out[3] = 1.0 + 0.3 * x[1].sin();
        });
        let x = [0.7, -1.3];
        let diff = linalg::max_abs_diff(&analytic.dsigma(&x), &fd.dsigma(&x));
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn presets_parse() {
        assert!(DriftField::from_preset("zero", 2).is_ok());
        let b = DriftField::from_preset("linear:a=-1", 2).unwrap();
        assert_eq!(b.eval(&[1.0, 2.0]), vec![-1.0, -2.0]);
        let b = DriftField::from_preset("linear:a=0;1;-1;0", 2).unwrap();
        assert_eq!(b.eval(&[1.0, 2.0]), vec![2.0, -1.0]);
        let b = DriftField::from_preset("holder:theta=0.5,scale=2", 1).unwrap();
        assert_eq!(b.eval(&[4.0]), vec![4.0]);
        assert!(!b.has_jacobian());
        let c = DriftField::from_preset("const:c=1", 1).unwrap();
        assert_eq!(c.eval(&[3.0]), vec![1.0]);
        assert!(DriftField::from_preset("holder:theta=1.5", 1).is_err());
        assert!(DriftField::from_preset("nope", 1).is_err());
        let s = DiffusionSpec::from_preset("sigma:sin-perturbed:eps=0.1", 1).unwrap();
        assert!((s.sigma(&[sin_minimizer()])[0] - 0.9).abs() < 1e-15);
        assert!(DiffusionSpec::from_preset("sigma:identity", 3)
            .unwrap()
            .is_constant());
    }
}
