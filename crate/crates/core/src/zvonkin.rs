//! The drift-removing change of variables `Ψ = I + ψ` and everything
//! built on it.
//!
//! `ψ` comes from the resolvent solver evaluated on a uniform node box
//! and interpolated in between (cubic Hermite from values and gradients
//! in one dimension, local multiquadric with a linear tail otherwise).
//! `Y = Ψ(X)` solves an SDE with Lipschitz coefficients
//!
//! ```text
//! b̃(y) = λψ(Ψ⁻¹y),    σ̃(y) = DΨ(Ψ⁻¹y) σ(Ψ⁻¹y),
//! ```
//!
//! which is simulated with Euler–Maruyama and mapped back.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{DiffusionSpec, DriftField, VecFn};
use crate::error::{FlowError, Result};
use crate::linalg;
use crate::mollify;
use crate::paths::{self, BrownianDriver, PathRecord, TimeGrid};
use crate::resolvent::{self, LadderStep, ResolventConfig, ResolventSolution};
use crate::seed::derive_seed;

pub const DEFAULT_INVERSE_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITERATIONS: usize = 200;
pub const DEFAULT_SERIES_TERMS: usize = 32;
pub const DEFAULT_SERIES_TOL: f64 = 1e-10;
pub const DEFAULT_CACHE_RADIUS: f64 = 6.0;
pub const DEFAULT_CACHE_SPACING: f64 = 0.25;
const HESSIAN_STEP: f64 = 1e-4;
const BOX_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    /// Template for every rung; its `lambda` is ignored.
    pub resolvent: ResolventConfig,
    pub ladder: Vec<f64>,
    pub gamma: f64,
    pub cache_radius: f64,
    pub cache_spacing: f64,
    pub inverse_tol: f64,
    pub max_iterations: usize,
    pub series_terms: usize,
    pub series_tol: f64,
}

impl TransformConfig {
    pub fn new(resolvent: ResolventConfig) -> Self {
        TransformConfig {
            resolvent,
            ladder: resolvent::DEFAULT_LADDER.to_vec(),
            gamma: 0.5,
            cache_radius: DEFAULT_CACHE_RADIUS,
            cache_spacing: DEFAULT_CACHE_SPACING,
            inverse_tol: DEFAULT_INVERSE_TOL,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            series_terms: DEFAULT_SERIES_TERMS,
            series_tol: DEFAULT_SERIES_TOL,
        }
    }
}

/// Interpolation error estimates of the `ψ` cache.
///
/// One dimension: the Hermite interpolant built from every other node,
/// measured at the skipped nodes (a conservative, coarser-grid figure).
/// Higher dimensions: the multiquadric interpolant reproduces node values,
/// so only its gradient mismatch against the Monte Carlo gradients at the
/// nodes is reported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InterpolationError {
    pub value: f64,
    pub gradient: f64,
}

#[derive(Debug, Clone)]
struct RbfStencil {
    /// Node offsets in units of the spacing, `4^d` of them.
    offsets: Vec<Vec<f64>>,
    /// Inverse of the augmented multiquadric system, `(m+d+1)²`.
    inverse: Vec<f64>,
}

impl RbfStencil {
    const WIDTH: usize = 4;

    fn new(dim: usize) -> Result<Self> {
        let m = Self::WIDTH.pow(dim as u32);
        let offsets: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let mut o = vec![0.0; dim];
                let mut rest = i;
                for a in (0..dim).rev() {
                    o[a] = (rest % Self::WIDTH) as f64;
                    rest /= Self::WIDTH;
                }
                o
            })
            .collect();
        let n = m + dim + 1;
        let mut sys = vec![0.0; n * n];
        for i in 0..m {
            for j in 0..m {
                sys[i * n + j] = multiquadric(&offsets[i], &offsets[j]);
            }
            sys[i * n + m] = 1.0;
            sys[m * n + i] = 1.0;
            for a in 0..dim {
                sys[i * n + m + 1 + a] = offsets[i][a];
                sys[(m + 1 + a) * n + i] = offsets[i][a];
            }
        }
        let (inverse, residual) = linalg::inverse_with_residual(&sys, n)
            .ok_or_else(|| FlowError::invalid("cache", "singular multiquadric system"))?;
        if residual > 1e-8 {
            return Err(FlowError::invalid(
                "cache",
                format!("ill-conditioned multiquadric system (residual {residual:e})"),
            ));
        }
        Ok(RbfStencil { offsets, inverse })
    }

    /// Cardinal weights at local coordinate `z` and their gradients
    /// (`grads[a * m + i]`, in units of the spacing).
    fn cardinal(&self, z: &[f64], weights: &mut [f64], grads: &mut [f64]) {
        let d = z.len();
        let m = self.offsets.len();
        let n = m + d + 1;
        let mut basis = vec![0.0; n];
        let mut dbasis = vec![0.0; d * n];
        for (i, o) in self.offsets.iter().enumerate() {
            let r = multiquadric(z, o);
            basis[i] = r;
            for a in 0..d {
                dbasis[a * n + i] = (z[a] - o[a]) / r;
            }
        }
        basis[m] = 1.0;
        for a in 0..d {
            basis[m + 1 + a] = z[a];
            dbasis[a * n + m + 1 + a] = 1.0;
        }
        for i in 0..m {
            let mut w = 0.0;
            for j in 0..n {
                w += basis[j] * self.inverse[j * n + i];
            }
            weights[i] = w;
            for a in 0..d {
                let mut g = 0.0;
                for j in 0..n {
                    g += dbasis[a * n + j] * self.inverse[j * n + i];
                }
                grads[a * m + i] = g;
            }
        }
    }
}

/// `sqrt(|z − o|² + 1)`: shape parameter equal to the node spacing.
fn multiquadric(z: &[f64], o: &[f64]) -> f64 {
    let r2: f64 = z.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum();
    (r2 + 1.0).sqrt()
}

/// Read-only `ψ` and `Dψ` data on the node box `[−R, R]^d`.
#[derive(Debug, Clone)]
pub struct PsiCache {
    dim: usize,
    radius: f64,
    spacing: f64,
    per_axis: usize,
    values: Vec<f64>,
    grads: Vec<f64>,
    rbf: Option<RbfStencil>,
}

impl PsiCache {
    fn per_axis(dim: usize, radius: f64, spacing: f64) -> Result<usize> {
        if !(radius > 0.0 && spacing > 0.0) {
            return Err(FlowError::invalid(
                "cache",
                "radius and spacing must be positive",
            ));
        }
        let cells = 2.0 * radius / spacing;
        if (cells - cells.round()).abs() > 1e-9 * cells {
            return Err(FlowError::invalid(
                "cache_spacing",
                "2 × radius must be a whole multiple of the spacing",
            ));
        }
        let per_axis = cells.round() as usize + 1;
        let min = if dim == 1 { 3 } else { RbfStencil::WIDTH };
        if per_axis < min {
            return Err(FlowError::invalid(
                "cache_spacing",
                format!("need at least {min} nodes per axis"),
            ));
        }
        Ok(per_axis)
    }

    /// Node list, last axis fastest.
    pub fn nodes(dim: usize, radius: f64, spacing: f64) -> Result<Vec<Vec<f64>>> {
        let n = Self::per_axis(dim, radius, spacing)?;
        let total = n.pow(dim as u32);
        Ok((0..total)
            .map(|i| {
                let mut x = vec![0.0; dim];
                let mut rest = i;
                for a in (0..dim).rev() {
                    x[a] = -radius + (rest % n) as f64 * spacing;
                    rest /= n;
                }
                x
            })
            .collect())
    }

    pub fn from_solution(sol: &ResolventSolution, radius: f64, spacing: f64) -> Result<Self> {
        let dim = sol
            .query_points
            .first()
            .map(|q| q.len())
            .ok_or_else(|| FlowError::invalid("cache", "empty solution"))?;
        let nodes = Self::nodes(dim, radius, spacing)?;
        if nodes.len() != sol.query_points.len()
            || nodes
                .iter()
                .zip(&sol.query_points)
                .any(|(a, b)| linalg::dist(a, b) > 1e-12 * (1.0 + radius))
        {
            return Err(FlowError::invalid(
                "cache",
                "solution was not computed on the cache nodes",
            ));
        }
        let per_axis = Self::per_axis(dim, radius, spacing)?;
        Ok(PsiCache {
            dim,
            radius,
            spacing,
            per_axis,
            values: sol.psi.concat(),
            grads: sol.grad_psi.concat(),
            rbf: if dim == 1 {
                None
            } else {
                Some(RbfStencil::new(dim)?)
            },
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.per_axis.pow(self.dim as u32)
    }

    pub fn node_value(&self, node: usize) -> &[f64] {
        &self.values[node * self.dim..(node + 1) * self.dim]
    }

    fn node_grad(&self, node: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.grads[node * dd..(node + 1) * dd]
    }

    pub fn eval(&self, x: &[f64], psi: &mut [f64], dpsi: &mut [f64]) -> Result<()> {
        let limit = self.radius * (1.0 + BOX_SLACK);
        if x.iter().any(|v| !(v.abs() <= limit)) {
            return Err(FlowError::OutsideCache {
                point: x.to_vec(),
                radius: self.radius,
            });
        }
        match &self.rbf {
            None => {
                self.hermite(x[0], psi, dpsi);
                Ok(())
            }
            Some(st) => {
                self.multiquadric_eval(st, x, psi, dpsi);
                Ok(())
            }
        }
    }

    fn hermite(&self, x: f64, psi: &mut [f64], dpsi: &mut [f64]) {
        let h = self.spacing;
        let u = (x + self.radius) / h;
        let i = (u.floor().max(0.0) as usize).min(self.per_axis - 2);
        let t = u - i as f64;
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.grads[i], self.grads[i + 1]);
        let (p, dp) = hermite_cell(t, h, v0, v1, m0, m1);
        psi[0] = p;
        dpsi[0] = dp;
    }

    fn multiquadric_eval(&self, st: &RbfStencil, x: &[f64], psi: &mut [f64], dpsi: &mut [f64]) {
        let d = self.dim;
        let n = self.per_axis;
        let h = self.spacing;
        let w = RbfStencil::WIDTH;
        let mut start = vec![0usize; d];
        let mut z = vec![0.0; d];
        for a in 0..d {
            let u = (x[a] + self.radius) / h;
            let cell = u.floor().max(0.0) as usize;
            start[a] = cell.saturating_sub(1).min(n - w);
            z[a] = u - start[a] as f64;
        }
        let m = st.offsets.len();
        let mut weights = vec![0.0; m];
        let mut grads = vec![0.0; d * m];
        st.cardinal(&z, &mut weights, &mut grads);
        psi.fill(0.0);
        dpsi.fill(0.0);
        for (i, o) in st.offsets.iter().enumerate() {
            let mut node = 0;
            for a in 0..d {
                node = node * n + start[a] + o[a] as usize;
            }
            let v = self.node_value(node);
            for c in 0..d {
                psi[c] += weights[i] * v[c];
                for a in 0..d {
                    dpsi[c * d + a] += grads[a * m + i] * v[c] / h;
                }
            }
        }
    }

    fn interpolation_error(&self) -> Result<InterpolationError> {
        let d = self.dim;
        if d == 1 {
            let h2 = 2.0 * self.spacing;
            let mut err = InterpolationError::default();
            let mut i = 1;
            while i + 1 < self.per_axis {
                let (p, dp) = hermite_cell(
                    0.5,
                    h2,
                    self.values[i - 1],
                    self.values[i + 1],
                    self.grads[i - 1],
                    self.grads[i + 1],
                );
                err.value = err.value.max((p - self.values[i]).abs());
                err.gradient = err.gradient.max((dp - self.grads[i]).abs());
                i += 2;
            }
            return Ok(err);
        }
        let mut psi = vec![0.0; d];
        let mut dpsi = vec![0.0; d * d];
        let mut worst = 0.0f64;
        for (node, x) in Self::nodes(d, self.radius, self.spacing)?
            .iter()
            .enumerate()
        {
            self.eval(x, &mut psi, &mut dpsi)?;
            let diff: Vec<f64> = dpsi
                .iter()
                .zip(self.node_grad(node))
                .map(|(a, b)| a - b)
                .collect();
            worst = worst.max(linalg::hs_norm(&diff));
        }
        Ok(InterpolationError {
            value: 0.0,
            gradient: worst,
        })
    }

    /// `sup ‖Dψ‖_op` of the interpolant on a sub-grid (8 points per cell
    /// in one dimension, 2 per axis in two, nodes only in three).
    fn sampled_grad_sup(&self) -> Result<f64> {
        let d = self.dim;
        let sub = match d {
            1 => 8,
            2 => 2,
            _ => 1,
        };
        let per = (self.per_axis - 1) * sub + 1;
        let step = self.spacing / sub as f64;
        let total = per.pow(d as u32);
        let mut psi = vec![0.0; d];
        let mut dpsi = vec![0.0; d * d];
        let mut x = vec![0.0; d];
        let mut worst = 0.0f64;
        for i in 0..total {
            let mut rest = i;
            for a in (0..d).rev() {
                x[a] = (-self.radius + (rest % per) as f64 * step).clamp(-self.radius, self.radius);
                rest /= per;
            }
            self.eval(&x, &mut psi, &mut dpsi)?;
            worst = worst.max(linalg::op_norm(&dpsi, d));
        }
        Ok(worst)
    }
}

/// Cubic Hermite value and slope on one cell at local coordinate `t`.
fn hermite_cell(t: f64, h: f64, v0: f64, v1: f64, m0: f64, m1: f64) -> (f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let d00 = 6.0 * t2 - 6.0 * t;
    let d10 = 3.0 * t2 - 4.0 * t + 1.0;
    let d01 = -6.0 * t2 + 6.0 * t;
    let d11 = 3.0 * t2 - 2.0 * t;
    let value = h00 * v0 + h10 * h * m0 + h01 * v1 + h11 * h * m1;
    let slope = (d00 * v0 + d01 * v1) / h + d10 * m0 + d11 * m1;
    (value, slope)
}

#[derive(Clone)]
enum PsiRepr {
    Cached(Arc<PsiCache>),
    Analytic { psi: Arc<VecFn>, dpsi: Arc<VecFn> },
}

/// Summary of the λ search that produced a cached transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub trace: Vec<LadderStep>,
    pub certified_bound: f64,
    pub n_paths: usize,
    pub resolvent_dt: f64,
    pub horizon: f64,
}

#[derive(Clone)]
pub struct ZvonkinTransform {
    dim: usize,
    pub lambda: f64,
    /// Certified bound on `sup ‖Dψ‖_op`; always `< 1`.
    pub gamma_cert: f64,
    pub inverse_tol: f64,
    pub max_iterations: usize,
    pub series_terms: usize,
    pub series_tol: f64,
    pub interpolation_error: InterpolationError,
    pub selection: Option<SelectionSummary>,
    repr: PsiRepr,
}

impl fmt::Debug for ZvonkinTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ZvonkinTransform")
            .field("dim", &self.dim)
            .field("lambda", &self.lambda)
            .field("gamma_cert", &self.gamma_cert)
            .field("inverse_tol", &self.inverse_tol)
            .field("cached", &matches!(self.repr, PsiRepr::Cached(_)))
            .finish()
    }
}

/// Truncated Neumann series for `DΨ⁻¹`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannInverse {
    pub matrix: Vec<f64>,
    /// Highest power summed (`k = 0..=terms`).
    pub terms: usize,
    /// `γ^{terms+1} / (1 − γ)`.
    pub remainder_bound: f64,
    /// `‖DΨ⁻¹ · DΨ − I‖_op` at the computed preimage.
    pub identity_residual: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(FlowError::NotContraction { gamma })
    }
}

impl ZvonkinTransform {
    fn with_repr(dim: usize, lambda: f64, gamma_cert: f64, repr: PsiRepr) -> Result<Self> {
        check_gamma(gamma_cert)?;
        if !(lambda > 0.0) {
            return Err(FlowError::invalid("lambda", "must be positive"));
        }
        Ok(ZvonkinTransform {
            dim,
            lambda,
            gamma_cert,
            inverse_tol: DEFAULT_INVERSE_TOL,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            series_terms: DEFAULT_SERIES_TERMS,
            series_tol: DEFAULT_SERIES_TOL,
            interpolation_error: InterpolationError::default(),
            selection: None,
            repr,
        })
    }

    /// Transform from a closed-form `ψ`; `dpsi` writes the row-major
    /// Jacobian. The caller vouches for `gamma_cert`.
    pub fn from_fn<F, G>(dim: usize, lambda: f64, gamma_cert: f64, psi: F, dpsi: G) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self::with_repr(
            dim,
            lambda,
            gamma_cert,
            PsiRepr::Analytic {
                psi: Arc::new(psi),
                dpsi: Arc::new(dpsi),
            },
        )
    }

    /// `ψ ≡ 0`.
    pub fn identity(dim: usize, lambda: f64) -> Result<Self> {
        Self::from_fn(
            dim,
            lambda,
            0.0,
            |_, out| out.fill(0.0),
            |_, out| out.fill(0.0),
        )
    }

    /// λ search on the cache nodes, then interpolation and certification.
    pub fn build(
        b: &DriftField,
        s: &DiffusionSpec,
        cfg: &TransformConfig,
        seed: u64,
    ) -> Result<Self> {
        let nodes = PsiCache::nodes(b.dim(), cfg.cache_radius, cfg.cache_spacing)?;
        let sel =
            resolvent::select_lambda(b, s, &cfg.ladder, cfg.gamma, &cfg.resolvent, &nodes, seed)?;
        let mut t = Self::from_solution(&sel.solution, cfg)?;
        if let Some(summary) = t.selection.as_mut() {
            summary.trace = sel.trace;
        }
        Ok(t)
    }

    /// Cached transform from a solution computed on the cache nodes of
    /// `cfg`. `gamma_cert` is the larger of the Monte Carlo certificate and
    /// the sampled gradient bound of the interpolant.
    pub fn from_solution(sol: &ResolventSolution, cfg: &TransformConfig) -> Result<Self> {
        let cache = PsiCache::from_solution(sol, cfg.cache_radius, cfg.cache_spacing)?;
        let interp_sup = cache.sampled_grad_sup()?;
        let gamma = sol.certified_bound().max(interp_sup);
        let interpolation_error = cache.interpolation_error()?;
        let dim = cache.dim;
        let mut t = Self::with_repr(dim, sol.lambda, gamma, PsiRepr::Cached(Arc::new(cache)))?;
        t.inverse_tol = cfg.inverse_tol;
        t.max_iterations = cfg.max_iterations;
        t.series_terms = cfg.series_terms;
        t.series_tol = cfg.series_tol;
        t.interpolation_error = interpolation_error;
        t.selection = Some(SelectionSummary {
            trace: vec![LadderStep {
                lambda: sol.lambda,
                grad_sup_est: sol.grad_sup_est,
                grad_stderr_sup: sol.grad_stderr_sup,
            }],
            certified_bound: sol.certified_bound(),
            n_paths: sol.n_paths,
            resolvent_dt: sol.dt,
            horizon: sol.horizon,
        });
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cache(&self) -> Option<&PsiCache> {
        match &self.repr {
            PsiRepr::Cached(c) => Some(c),
            PsiRepr::Analytic { .. } => None,
        }
    }

    pub fn psi_into(&self, x: &[f64], psi: &mut [f64], dpsi: &mut [f64]) -> Result<()> {
        match &self.repr {
            PsiRepr::Cached(c) => c.eval(x, psi, dpsi),
            PsiRepr::Analytic { psi: f, dpsi: g } => {
                f(x, psi);
                g(x, dpsi);
                Ok(())
            }
        }
    }

    fn psi_only(&self, x: &[f64], psi: &mut [f64], scratch: &mut [f64]) -> Result<()> {
        match &self.repr {
            PsiRepr::Analytic { psi: f, .. } => {
                f(x, psi);
                Ok(())
            }
            PsiRepr::Cached(c) => c.eval(x, psi, scratch),
        }
    }

    pub fn psi(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut p = vec![0.0; self.dim];
        let mut g = vec![0.0; self.dim * self.dim];
        self.psi_into(x, &mut p, &mut g)?;
        Ok(p)
    }

    pub fn dpsi(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut p = vec![0.0; self.dim];
        let mut g = vec![0.0; self.dim * self.dim];
        self.psi_into(x, &mut p, &mut g)?;
        Ok(g)
    }

    /// `Ψ(x) = x + ψ(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut p = self.psi(x)?;
        for (pi, xi) in p.iter_mut().zip(x) {
            *pi += xi;
        }
        Ok(p)
    }

    /// `DΨ(x) = I + Dψ(x)`.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.dpsi(x)?;
        for i in 0..self.dim {
            g[i * self.dim + i] += 1.0;
        }
        Ok(g)
    }

    /// `Ψ⁻¹(y)` by `x ← y − ψ(x)` from `x = y` (clamped into the cache box).
    pub fn invert(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.invert_counted(y).map(|(x, _)| x)
    }

    /// As [`invert`](Self::invert), also returning the iteration count.
    pub fn invert_counted(&self, y: &[f64]) -> Result<(Vec<f64>, usize)> {
        if y.len() != self.dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.dim,
                got: y.len(),
            });
        }
        let d = self.dim;
        let stop = self.inverse_tol * (1.0 - self.gamma_cert);
        let mut x = y.to_vec();
        // y may leave the cache box while Ψ⁻¹(y) is still inside it
        if let Some(c) = self.cache() {
            let r = c.radius();
            x.iter_mut().for_each(|v| *v = v.clamp(-r, r));
        }
        let mut next = vec![0.0; d];
        let mut psi = vec![0.0; d];
        let mut scratch = vec![0.0; d * d];
        for it in 1..=self.max_iterations {
            self.psi_only(&x, &mut psi, &mut scratch)?;
            for i in 0..d {
                next[i] = y[i] - psi[i];
            }
            let moved = linalg::dist(&next, &x);
            std::mem::swap(&mut x, &mut next);
            if moved <= stop {
                return Ok((x, it));
            }
        }
        self.psi_only(&x, &mut psi, &mut scratch)?;
        let residual = (0..d)
            .map(|i| (x[i] + psi[i] - y[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        Err(FlowError::InverseDiverged {
            iterations: self.max_iterations,
            residual,
        })
    }

    /// Number of Neumann terms meeting the configured tolerance, capped by
    /// `series_terms`.
    pub fn default_series_terms(&self) -> usize {
        let g = self.gamma_cert;
        (0..self.series_terms)
            .find(|&k| g.powi(k as i32 + 1) / (1.0 - g) < self.series_tol)
            .unwrap_or(self.series_terms)
    }

    /// `DΨ⁻¹(y) = Σ_{k=0}^{terms} (−Dψ(Ψ⁻¹y))^k`.
    pub fn dpsi_inverse(&self, y: &[f64], terms: Option<usize>) -> Result<NeumannInverse> {
        let x = self.invert(y)?;
        let a = self.dpsi(&x)?;
        Ok(self.neumann(&a, terms.unwrap_or_else(|| self.default_series_terms())))
    }

    fn neumann(&self, a: &[f64], terms: usize) -> NeumannInverse {
        let d = self.dim;
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let mut sum = linalg::identity(d);
        let mut power = linalg::identity(d);
        let mut tmp = vec![0.0; d * d];
        for _ in 0..terms {
            linalg::matmul(&power, &neg, d, d, d, &mut tmp);
            std::mem::swap(&mut power, &mut tmp);
            for (s, p) in sum.iter_mut().zip(&power) {
                *s += p;
            }
        }
        let mut jac = a.to_vec();
        for i in 0..d {
            jac[i * d + i] += 1.0;
        }
        linalg::matmul(&sum, &jac, d, d, d, &mut tmp);
        for i in 0..d {
            tmp[i * d + i] -= 1.0;
        }
        let g = self.gamma_cert;
        NeumannInverse {
            matrix: sum,
            terms,
            remainder_bound: g.powi(terms as i32 + 1) / (1.0 - g),
            identity_residual: linalg::op_norm(&tmp, d),
        }
    }

    /// `D²ψ(x)` by central differences of `Dψ`, layout
    /// `[(c * d + a) * d + b] = ∂_a ∂_b ψ_c`.
    pub fn hessian_psi(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        let h = HESSIAN_STEP;
        let mut out = vec![0.0; d * d * d];
        let mut p = vec![0.0; d];
        let mut gp = vec![0.0; d * d];
        let mut gm = vec![0.0; d * d];
        let mut z = x.to_vec();
        for b in 0..d {
            z[b] = x[b] + h;
            self.psi_into(&z, &mut p, &mut gp)?;
            z[b] = x[b] - h;
            self.psi_into(&z, &mut p, &mut gm)?;
            z[b] = x[b];
            for c in 0..d {
                for a in 0..d {
                    out[(c * d + a) * d + b] = (gp[c * d + a] - gm[c * d + a]) / (2.0 * h);
                }
            }
        }
        Ok(out)
    }

    pub fn round_trip(&self, probes: &[Vec<f64>]) -> Result<RoundTripReport> {
        let d = self.dim;
        let mut rep = RoundTripReport {
            probe_count: probes.len(),
            max_error: 0.0,
            max_relative_error: 0.0,
            max_inverse_error: 0.0,
            neumann_residual: 0.0,
            neumann_bound: 0.0,
            min_det: f64::INFINITY,
            det_floor: (1.0 - self.gamma_cert).powi(d as i32),
            max_iterations_used: 0,
        };
        for x in probes {
            let y = self.forward(x)?;
            let (back, its) = self.invert_counted(&y)?;
            let err = linalg::dist(&back, x);
            rep.max_error = rep.max_error.max(err);
            rep.max_relative_error = rep.max_relative_error.max(err / (1.0 + linalg::norm(x)));
            rep.max_iterations_used = rep.max_iterations_used.max(its);
            // Ψ ∘ Ψ⁻¹ on the probe itself read as a y-point
            let fwd = self.forward(&self.invert(x)?)?;
            rep.max_inverse_error = rep.max_inverse_error.max(linalg::dist(&fwd, x));
            let n = self.dpsi_inverse(&y, None)?;
            rep.neumann_residual = rep.neumann_residual.max(n.identity_residual);
            rep.neumann_bound = rep.neumann_bound.max(n.remainder_bound);
            rep.min_det = rep.min_det.min(linalg::det(&self.jacobian(x)?, d));
        }
        Ok(rep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub probe_count: usize,
    /// `max |Ψ⁻¹(Ψ(x)) − x|`.
    pub max_error: f64,
    /// `max |Ψ⁻¹(Ψ(x)) − x| / (1 + |x|)`.
    pub max_relative_error: f64,
    /// `max |Ψ(Ψ⁻¹(y)) − y|` over the probes read as `y`.
    pub max_inverse_error: f64,
    pub neumann_residual: f64,
    pub neumann_bound: f64,
    pub min_det: f64,
    /// `(1 − γ)^d`; `min_det` below it flags an optimistic certificate.
    pub det_floor: f64,
    pub max_iterations_used: usize,
}

/// Coefficients of the SDE for `Y = Ψ(X)`.
#[derive(Clone, Copy)]
pub struct ConjugatedCoeffs<'a> {
    pub transform: &'a ZvonkinTransform,
    pub sigma: &'a DiffusionSpec,
}

/// Everything the conjugated coefficients need at one `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugatedPoint {
    pub x: Vec<f64>,
    pub psi: Vec<f64>,
    pub dpsi: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub b_tilde: Vec<f64>,
    pub sigma_tilde: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub b_tilde: f64,
    pub sigma_tilde: f64,
    pub pair_count: usize,
}

impl<'a> ConjugatedCoeffs<'a> {
    pub fn new(transform: &'a ZvonkinTransform, sigma: &'a DiffusionSpec) -> Result<Self> {
        if transform.dim() != sigma.dim() {
            return Err(FlowError::DimensionMismatch {
                expected: transform.dim(),
                got: sigma.dim(),
            });
        }
        Ok(ConjugatedCoeffs { transform, sigma })
    }

    /// Coefficients at a known preimage `x` of the current `y`.
    pub fn at_preimage(&self, x: Vec<f64>) -> Result<ConjugatedPoint> {
        let d = self.transform.dim();
        let k = self.sigma.noise_dim();
        let mut psi = vec![0.0; d];
        let mut dpsi = vec![0.0; d * d];
        self.transform.psi_into(&x, &mut psi, &mut dpsi)?;
        let sigma_x = self.sigma.sigma(&x);
        let lambda = self.transform.lambda;
        let b_tilde = psi.iter().map(|p| lambda * p).collect();
        let mut sigma_tilde = vec![0.0; d * k];
        for i in 0..d {
            for j in 0..k {
                let mut acc = sigma_x[i * k + j];
                for m in 0..d {
                    acc += dpsi[i * d + m] * sigma_x[m * k + j];
                }
                sigma_tilde[i * k + j] = acc;
            }
        }
        Ok(ConjugatedPoint {
            x,
            psi,
            dpsi,
            sigma_x,
            b_tilde,
            sigma_tilde,
        })
    }

    pub fn at(&self, y: &[f64]) -> Result<ConjugatedPoint> {
        self.at_preimage(self.transform.invert(y)?)
    }

    pub fn b_tilde(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.at(y)?.b_tilde)
    }

    pub fn sigma_tilde(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.at(y)?.sigma_tilde)
    }

    /// `(Db̃(y), Dσ̃(y))` with `Db̃ = λDψ(x)DΨ(x)⁻¹` and
    /// `Dσ̃ = D_x[DΨ σ](x) DΨ(x)⁻¹`, the Hessian of `ψ` by differences.
    /// `Dσ̃` uses the layout `[(i * k + j) * d + l]`.
    pub fn jacobians(&self, pt: &ConjugatedPoint) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.transform.dim();
        let k = self.sigma.noise_dim();
        let mut jac = pt.dpsi.clone();
        for i in 0..d {
            jac[i * d + i] += 1.0;
        }
        let (jinv, _) = linalg::inverse_with_residual(&jac, d)
            .ok_or_else(|| FlowError::invalid("transform", "singular DΨ on the path"))?;
        let lambda = self.transform.lambda;
        let mut db = vec![0.0; d * d];
        linalg::matmul(&pt.dpsi, &jinv, d, d, d, &mut db);
        db.iter_mut().for_each(|v| *v *= lambda);

        let hess = self.transform.hessian_psi(&pt.x)?;
        let ds = self.sigma.dsigma(&pt.x);
        // ∂_m (DΨ σ)_{ij} in x, then right-multiplied by DΨ⁻¹
        let mut dx = vec![0.0; d * k * d];
        for i in 0..d {
            for j in 0..k {
                for m in 0..d {
                    let mut acc = 0.0;
                    for r in 0..d {
                        acc += hess[(i * d + r) * d + m] * pt.sigma_x[r * k + j];
                        acc += jac[i * d + r] * ds[(r * k + j) * d + m];
                    }
                    dx[(i * k + j) * d + m] = acc;
                }
            }
        }
        let mut dsig = vec![0.0; d * k * d];
        for row in 0..d * k {
            for l in 0..d {
                let mut acc = 0.0;
                for m in 0..d {
                    acc += dx[row * d + m] * jinv[m * d + l];
                }
                dsig[row * d + l] = acc;
            }
        }
        Ok((db, dsig))
    }

    /// Empirical Lipschitz constants of `b̃`, `σ̃` over `y`-pairs.
    pub fn lipschitz(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<LipschitzReport> {
        let mut rep = LipschitzReport {
            b_tilde: 0.0,
            sigma_tilde: 0.0,
            pair_count: pairs.len(),
        };
        for (y1, y2) in pairs {
            let r = linalg::dist(y1, y2);
            if r == 0.0 {
                continue;
            }
            let (p1, p2) = (self.at(y1)?, self.at(y2)?);
            rep.b_tilde = rep.b_tilde.max(linalg::dist(&p1.b_tilde, &p2.b_tilde) / r);
            rep.sigma_tilde = rep
                .sigma_tilde
                .max(linalg::dist(&p1.sigma_tilde, &p2.sigma_tilde) / r);
        }
        Ok(rep)
    }
}

/// A conjugated path and its image in the original coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedPath {
    pub x: PathRecord,
    pub y: PathRecord,
}

fn check_transform_dims(t: &ZvonkinTransform, s: &DiffusionSpec, x: &[f64]) -> Result<()> {
    if t.dim() != s.dim() {
        return Err(FlowError::DimensionMismatch {
            expected: t.dim(),
            got: s.dim(),
        });
    }
    if x.len() != t.dim() {
        return Err(FlowError::DimensionMismatch {
            expected: t.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// `Y₀ = Ψ(x)`, Euler on `(b̃, σ̃)`, `X_j = Ψ⁻¹(Y_j)`. The grid may start
/// at any driver-aligned time.
pub fn simulate_transformed_flow(
    t: &ZvonkinTransform,
    s: &DiffusionSpec,
    x: &[f64],
    driver: &BrownianDriver,
    grid: &TimeGrid,
) -> Result<TransformedPath> {
    Ok(run_transformed(t, s, x, None, driver, grid)?.0)
}

/// Chain-rule and (dove) derivative paths along a transformed flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDerivative {
    pub path: TransformedPath,
    pub direction: Vec<f64>,
    /// `DΨ⁻¹(Ŷ_j) · η̂_j` with `η̂` the conjugated first variation.
    pub eta: Vec<Vec<f64>>,
    /// Same quantity from the discretized linear equation for
    /// `ζ = DΨ(X) Dφ h`.
    pub dove: Vec<Vec<f64>>,
    /// `max_j |eta_j − dove_j|`.
    pub dove_discrepancy: f64,
    /// Largest Neumann remainder bound used.
    pub series_bound: f64,
}

impl FlowDerivative {
    pub fn terminal(&self) -> &[f64] {
        self.eta.last().expect("at least one state")
    }
}

/// `D_hφ_{t0,t}(x)` at every grid time through the conjugated flow.
pub fn flow_derivative(
    t: &ZvonkinTransform,
    s: &DiffusionSpec,
    x: &[f64],
    h: &[f64],
    driver: &BrownianDriver,
    grid: &TimeGrid,
) -> Result<FlowDerivative> {
    if h.len() != x.len() {
        return Err(FlowError::DimensionMismatch {
            expected: x.len(),
            got: h.len(),
        });
    }
    let (path, deriv) = run_transformed(t, s, x, Some(h), driver, grid)?;
    let (eta, dove, series_bound) = deriv.expect("direction given");
    let dove_discrepancy = eta
        .iter()
        .zip(&dove)
        .map(|(a, b)| linalg::dist(a, b))
        .fold(0.0, f64::max);
    Ok(FlowDerivative {
        path,
        direction: h.to_vec(),
        eta,
        dove,
        dove_discrepancy,
        series_bound,
    })
}

type DerivativePaths = (Vec<Vec<f64>>, Vec<Vec<f64>>, f64);

fn run_transformed(
    t: &ZvonkinTransform,
    s: &DiffusionSpec,
    x: &[f64],
    h: Option<&[f64]>,
    driver: &BrownianDriver,
    grid: &TimeGrid,
) -> Result<(TransformedPath, Option<DerivativePaths>)> {
    check_transform_dims(t, s, x)?;
    let conj = ConjugatedCoeffs::new(t, s)?;
    let (d, k) = (s.dim(), s.noise_dim());
    let dt = grid.dt();
    let dw = driver.increments(grid)?;
    let terms = t.default_series_terms();

    let mut xs = Vec::with_capacity(grid.steps + 1);
    let mut ys = Vec::with_capacity(grid.steps + 1);
    let mut y = t.forward(x)?;
    let mut y_next = vec![0.0; d];

    let mut etas = Vec::new();
    let mut doves = Vec::new();
    let mut series_bound = 0.0f64;
    let mut eta_hat = vec![0.0; d];
    let mut eta_next = vec![0.0; d];
    let mut zeta = vec![0.0; d];
    if let Some(h) = h {
        linalg::matvec(&t.jacobian(x)?, d, d, h, &mut eta_hat);
        zeta.copy_from_slice(&eta_hat);
    }

    let mut pt = conj.at_preimage(x.to_vec())?;
    // the first preimage is `x` itself; later ones come from inversion
    for j in 0..=grid.steps {
        if j > 0 {
            pt = conj.at(&y).map_err(|e| FlowError::at_step(j, e))?;
        }
        xs.push(pt.x.clone());
        ys.push(y.clone());
        if h.is_some() {
            let n = t.neumann(&pt.dpsi, terms);
            series_bound = series_bound.max(n.remainder_bound);
            let mut eta = vec![0.0; d];
            linalg::matvec(&n.matrix, d, d, &eta_hat, &mut eta);
            etas.push(eta);
            let mut jac = pt.dpsi.clone();
            for i in 0..d {
                jac[i * d + i] += 1.0;
            }
            let (jinv, _) = linalg::inverse_with_residual(&jac, d).ok_or_else(|| {
                FlowError::at_step(j, FlowError::invalid("transform", "singular DΨ"))
            })?;
            let mut eta_d = vec![0.0; d];
            linalg::matvec(&jinv, d, d, &zeta, &mut eta_d);
            if j < grid.steps {
                let inc = &dw[j * k..(j + 1) * k];
                let (db, dsig) = conj.jacobians(&pt).map_err(|e| FlowError::at_step(j, e))?;
                paths::variation_step(&eta_hat, &db, &dsig, inc, dt, &mut eta_next);
                dove_step(t, s, &pt, &jac, &eta_d, inc, dt, &mut zeta)
                    .map_err(|e| FlowError::at_step(j, e))?;
                std::mem::swap(&mut eta_hat, &mut eta_next);
                paths::check_state(&eta_hat, j + 1)?;
            }
            doves.push(eta_d);
        }
        if j < grid.steps {
            let inc = &dw[j * k..(j + 1) * k];
            paths::euler_step(&y, &pt.b_tilde, &pt.sigma_tilde, inc, dt, &mut y_next);
            std::mem::swap(&mut y, &mut y_next);
            paths::check_state(&y, j + 1)?;
        }
    }
    let path = TransformedPath {
        x: PathRecord {
            grid: *grid,
            states: xs,
            increments: dw.clone(),
        },
        y: PathRecord {
            grid: *grid,
            states: ys,
            increments: dw,
        },
    };
    let deriv = h.map(|_| (etas, doves, series_bound));
    Ok((path, deriv))
}

/// One Euler step of
/// `dζ = λDψ(X)η dt + [D²Ψ(X)(η, σ dW) + DΨ(X)(Dσ(X)η) dW]`, `η = DΨ(X)⁻¹ζ`.
#[allow(clippy::too_many_arguments)]
fn dove_step(
    t: &ZvonkinTransform,
    s: &DiffusionSpec,
    pt: &ConjugatedPoint,
    jac: &[f64],
    eta: &[f64],
    dw: &[f64],
    dt: f64,
    zeta: &mut [f64],
) -> Result<()> {
    let d = t.dim();
    let k = s.noise_dim();
    let hess = t.hessian_psi(&pt.x)?;
    let ds = s.dsigma(&pt.x);
    for i in 0..d {
        let mut drift = 0.0;
        for m in 0..d {
            drift += pt.dpsi[i * d + m] * eta[m];
        }
        let mut noise = 0.0;
        for c in 0..k {
            let mut col = 0.0;
            for r in 0..d {
                for m in 0..d {
                    col += hess[(i * d + r) * d + m] * eta[m] * pt.sigma_x[r * k + c];
                }
                let mut dse = 0.0;
                for m in 0..d {
                    dse += ds[(r * k + c) * d + m] * eta[m];
                }
                col += jac[i * d + r] * dse;
            }
            noise += col * dw[c];
        }
        zeta[i] += t.lambda * drift * dt + noise;
    }
    Ok(())
}

/// `(φ_{t0,T}(x), φ_{u,T}(φ_{t0,u}(x)))` through the transform, both on
/// the same driver.
pub fn transformed_compose(
    t: &ZvonkinTransform,
    s: &DiffusionSpec,
    x: &[f64],
    u: f64,
    driver: &BrownianDriver,
    grid: &TimeGrid,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let full = simulate_transformed_flow(t, s, x, driver, grid)?;
    let first = simulate_transformed_flow(t, s, x, driver, &grid.sub(grid.t0, u)?)?;
    let second =
        simulate_transformed_flow(t, s, first.x.terminal(), driver, &grid.sub(u, grid.t_end)?)?;
    Ok((full.x.terminal().to_vec(), second.x.terminal().to_vec()))
}

/// Per-step Itô consistency of the transform along a direct Euler path:
/// `r_j = Ψ(X_{j+1}) − Ψ(X_j) − λψ(X_j)dt − DΨ(X_j)σ(X_j)ΔW_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjugationResidual {
    pub mean_abs: f64,
    pub max_abs: f64,
    pub dt: f64,
}

pub fn conjugation_residual(
    b: &DriftField,
    s: &DiffusionSpec,
    t: &ZvonkinTransform,
    x: &[f64],
    driver: &BrownianDriver,
    grid: &TimeGrid,
) -> Result<ConjugationResidual> {
    let path = paths::simulate(b, s, x, grid.t0, driver, grid)?;
    let conj = ConjugatedCoeffs::new(t, s)?;
    let (d, k) = (s.dim(), s.noise_dim());
    let dt = grid.dt();
    let mut total = 0.0;
    let mut worst = 0.0f64;
    let mut predicted = vec![0.0; d];
    for j in 0..grid.steps {
        let pt = conj.at_preimage(path.states[j].clone())?;
        let y0 = t.forward(&path.states[j])?;
        let y1 = t.forward(&path.states[j + 1])?;
        paths::euler_step(
            &y0,
            &pt.b_tilde,
            &pt.sigma_tilde,
            &path.increments[j * k..(j + 1) * k],
            dt,
            &mut predicted,
        );
        let r = linalg::dist(&y1, &predicted);
        total += r;
        worst = worst.max(r);
    }
    Ok(ConjugationResidual {
        mean_abs: total / grid.steps as f64,
        max_abs: worst,
        dt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub transform: TransformConfig,
    pub quad_points: usize,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub n: usize,
    pub gamma_cert: f64,
    /// `sup_{x, ω} sup_u |φⁿ_u(x) − φ_u(x)|^p / (1 + |x|)^p`.
    pub sup_gap: f64,
    /// `sup_x E[sup_u …]`, the expectation form.
    pub mean_gap: f64,
    /// `sup_{x, ω} sup_u ‖Dφⁿ_u(x) − Dφ_u(x)‖_HS^p`.
    pub deriv_sup_gap: f64,
    pub deriv_mean_gap: f64,
    /// `sup_nodes |ψ − ψ_n|`.
    pub psi_gap: f64,
    /// `sup_nodes |b − b_n|`.
    pub drift_gap: f64,
    /// `λ · psi_gap / drift_gap`.
    pub psi_ratio: f64,
    /// `psi_gap ≤ (C + 1)/λ · drift_gap` with `C + 1` the ratio at the
    /// largest `n`.
    pub max_principle_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    pub lambda: f64,
    pub rough_gamma_cert: f64,
    pub p: f64,
    pub x_set: Vec<Vec<f64>>,
    pub n_paths: usize,
    pub rows: Vec<StabilityRow>,
    /// `C` estimated at the largest `n`.
    pub schauder_constant: f64,
}

/// Default x-set: 8 points on a radius-2 ball (on the line in one
/// dimension, a Halton cloud otherwise).
pub fn default_x_set(dim: usize) -> Vec<Vec<f64>> {
    if dim == 1 {
        (0..8).map(|i| vec![-2.0 + 4.0 * i as f64 / 7.0]).collect()
    } else {
        crate::coeffs::halton_cloud(dim, 8, 2.0)
    }
}

/// Flows of `b` and of its mollifications `b ∗ ϑ_n` on common drivers.
/// λ is selected once for the rough drift; each member is certified at
/// that λ with the same resolvent seed.
pub fn stability_experiment(
    b: &DriftField,
    ns: &[usize],
    s: &DiffusionSpec,
    cfg: &StabilityConfig,
    xs: &[Vec<f64>],
    seed: u64,
) -> Result<StabilityTable> {
    if ns.is_empty() {
        return Err(FlowError::invalid("ns", "empty mollification ladder"));
    }
    if !(cfg.p > 0.0) {
        return Err(FlowError::invalid("p", "must be positive"));
    }
    if cfg.n_paths == 0 || xs.is_empty() {
        return Err(FlowError::invalid("n_paths", "need paths and start points"));
    }
    let res_seed = derive_seed(seed, "stability/resolvent");
    let path_seed = derive_seed(seed, "stability/paths");
    let rough = ZvonkinTransform::build(b, s, &cfg.transform, res_seed)?;
    let lambda = rough.lambda;
    let mut member_cfg = cfg.transform.clone();
    member_cfg.ladder = vec![lambda];

    let nodes = PsiCache::nodes(
        b.dim(),
        cfg.transform.cache_radius,
        cfg.transform.cache_spacing,
    )?;
    let mut members = Vec::with_capacity(ns.len());
    let mut drift_gaps = Vec::with_capacity(ns.len());
    for &n in ns {
        let wrap = |e| FlowError::StabilityMember {
            n,
            source: Box::new(e),
        };
        let bn = mollify::mollify(b, n, cfg.quad_points).map_err(wrap)?;
        let tn = ZvonkinTransform::build(bn.field(), s, &member_cfg, res_seed).map_err(wrap)?;
        let gap = nodes
            .iter()
            .map(|x| linalg::dist(&b.eval(x), &bn.eval(x)))
            .fold(0.0, f64::max);
        drift_gaps.push(gap);
        members.push(tn);
    }

    let k = s.noise_dim();
    let m = members.len();
    let p = cfg.p;
    // per (x, path): [gap_n..., dgap_n...]
    let mut sup = vec![0.0f64; 2 * m];
    let mut mean = vec![0.0f64; 2 * m];
    for x in xs {
        let scale = (1.0 + linalg::norm(x)).powf(p);
        let rows: Vec<Vec<f64>> = (0..cfg.n_paths)
            .into_par_iter()
            .map(|path| -> Result<Vec<f64>> {
                let driver = BrownianDriver::new(path_seed, path as u64, k, cfg.grid);
                let (base, base_d) = path_with_jacobian(&rough, s, x, &driver, &cfg.grid)?;
                let mut out = vec![0.0; 2 * m];
                for (i, tn) in members.iter().enumerate() {
                    let (other, other_d) = path_with_jacobian(tn, s, x, &driver, &cfg.grid)
                        .map_err(|e| FlowError::StabilityMember {
                            n: ns[i],
                            source: Box::new(e),
                        })?;
                    out[i] = base.sup_distance(&other).powf(p) / scale;
                    out[m + i] = base_d
                        .iter()
                        .zip(&other_d)
                        .map(|(a, b)| {
                            let diff: Vec<f64> = a.iter().zip(b).map(|(u, v)| u - v).collect();
                            linalg::hs_norm(&diff)
                        })
                        .fold(0.0, f64::max)
                        .powf(p);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for c in 0..2 * m {
            let col_sup = rows.iter().map(|r| r[c]).fold(0.0, f64::max);
            let col_mean = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
            sup[c] = sup[c].max(col_sup);
            mean[c] = mean[c].max(col_mean);
        }
    }

    let rough_cache = rough.cache().expect("built transforms are cached");
    let mut rows = Vec::with_capacity(m);
    for (i, tn) in members.iter().enumerate() {
        let cache = tn.cache().expect("built transforms are cached");
        let psi_gap = (0..cache.node_count())
            .map(|node| linalg::dist(cache.node_value(node), rough_cache.node_value(node)))
            .fold(0.0, f64::max);
        let psi_ratio = if drift_gaps[i] > 0.0 {
            lambda * psi_gap / drift_gaps[i]
        } else {
            0.0
        };
        rows.push(StabilityRow {
            n: ns[i],
            gamma_cert: tn.gamma_cert,
            sup_gap: sup[i],
            mean_gap: mean[i],
            deriv_sup_gap: sup[m + i],
            deriv_mean_gap: mean[m + i],
            psi_gap,
            drift_gap: drift_gaps[i],
            psi_ratio,
            max_principle_ok: false,
        });
    }
    let largest = rows
        .iter()
        .enumerate()
        .max_by_key(|(_, r)| r.n)
        .map(|(i, _)| i)
        .expect("nonempty");
    let c_plus_one = rows[largest].psi_ratio;
    for r in rows.iter_mut() {
        r.max_principle_ok = r.psi_ratio <= c_plus_one * (1.0 + 1e-12);
    }
    Ok(StabilityTable {
        lambda,
        rough_gamma_cert: rough.gamma_cert,
        p,
        x_set: xs.to_vec(),
        n_paths: cfg.n_paths,
        rows,
        schauder_constant: (c_plus_one - 1.0).max(0.0),
    })
}

/// Path and full Jacobian `Dφ_{t0,t_j}(x)` (row-major, one per grid time).
fn path_with_jacobian(
    t: &ZvonkinTransform,
    s: &DiffusionSpec,
    x: &[f64],
    driver: &BrownianDriver,
    grid: &TimeGrid,
) -> Result<(PathRecord, Vec<Vec<f64>>)> {
    let d = x.len();
    let mut path = None;
    let mut jac = vec![vec![0.0; d * d]; grid.steps + 1];
    for l in 0..d {
        let mut h = vec![0.0; d];
        h[l] = 1.0;
        let fd = flow_derivative(t, s, x, &h, driver, grid)?;
        for (j, eta) in fd.eta.iter().enumerate() {
            for c in 0..d {
                jac[j][c * d + l] = eta[c];
            }
        }
        path.get_or_insert(fd.path.x);
    }
    Ok((path.expect("d ≥ 1"), jac))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(dim: usize, m: f64, gamma: f64) -> ZvonkinTransform {
        ZvonkinTransform::from_fn(
            dim,
            2.0,
            gamma,
            move |x, out| out.iter_mut().zip(x).for_each(|(o, v)| *o = m * v),
            move |_, out| {
                out.fill(0.0);
                for i in 0..dim {
                    out[i * dim + i] = m;
                }
            },
        )
        .unwrap()
    }

    #[test]
    fn gamma_must_contract() {
        assert!(matches!(
            affine_result(1.0),
            Err(FlowError::NotContraction { .. })
        ));
        assert!(affine_result(0.99).is_ok());
    }

    fn affine_result(gamma: f64) -> Result<ZvonkinTransform> {
        ZvonkinTransform::from_fn(1, 1.0, gamma, |_, o| o.fill(0.0), |_, o| o.fill(0.0))
    }

    #[test]
    fn identity_inverse_is_one_step() {
        let t = ZvonkinTransform::identity(2, 1.0).unwrap();
        let (x, its) = t.invert_counted(&[0.3, -1.7]).unwrap();
        assert_eq!(x, vec![0.3, -1.7]);
        assert_eq!(its, 1);
    }

    #[test]
    fn constant_shift_inverse_is_exact() {
        let t =
            ZvonkinTransform::from_fn(1, 1.0, 0.0, |_, o| o[0] = 0.25, |_, o| o.fill(0.0)).unwrap();
        assert_eq!(t.invert(&[1.0]).unwrap(), vec![0.75]);
    }

    #[test]
    fn affine_inverse_converges_geometrically() {
        let t = affine(1, 0.5, 0.5);
        let (x, its) = t.invert_counted(&[3.0]).unwrap();
        assert!((x[0] - 2.0).abs() <= 1e-12);
        // error halves every step from |3 − 2| = 1 down to 1e-12 · 0.5
        assert!((38..=45).contains(&its), "{its}");
    }

    #[test]
    fn inverse_cap_reports_residual() {
        let mut t = affine(1, 0.5, 0.5);
        t.max_iterations = 5;
        match t.invert(&[3.0]) {
            Err(FlowError::InverseDiverged {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 5);
                assert!(residual > 0.0);
            }
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn neumann_series_examples() {
        let t = ZvonkinTransform::identity(2, 1.0).unwrap();
        let n = t.dpsi_inverse(&[1.0, 2.0], None).unwrap();
        assert_eq!(n.matrix, linalg::identity(2));
        assert_eq!(n.terms, 0);

        let t = affine(1, 0.5, 0.5);
        let n = t.dpsi_inverse(&[1.0], Some(10)).unwrap();
        assert!((n.remainder_bound - 0.5f64.powi(11) / 0.5).abs() < 1e-15);
        assert!((n.matrix[0] - 2.0 / 3.0).abs() <= n.remainder_bound);
        assert!(n.identity_residual <= n.remainder_bound);

        let t = affine(1, -0.25, 0.25);
        let n = t.dpsi_inverse(&[1.0], None).unwrap();
        assert!((n.matrix[0] - 4.0 / 3.0).abs() <= n.remainder_bound + 1e-15);
        assert!(n.remainder_bound < DEFAULT_SERIES_TOL);
    }

    #[test]
    fn hermite_reproduces_cubics() {
        // p(x) = x³ − x on [0, 1]: values and slopes at the ends
        let (v, s) = hermite_cell(0.3, 1.0, 0.0, 0.0, -1.0, 2.0);
        assert!((v - (0.027 - 0.3)).abs() < 1e-14);
        assert!((s - (3.0 * 0.09 - 1.0)).abs() < 1e-14);
    }

    fn linear_solution(dim: usize, radius: f64, spacing: f64, m: f64) -> ResolventSolution {
        let nodes = PsiCache::nodes(dim, radius, spacing).unwrap();
        let psi = nodes
            .iter()
            .map(|x| x.iter().map(|v| m * v).collect())
            .collect();
        let grad = nodes
            .iter()
            .map(|_| {
                let mut g = vec![0.0; dim * dim];
                for i in 0..dim {
                    g[i * dim + i] = m;
                }
                g
            })
            .collect();
        ResolventSolution {
            lambda: 2.0,
            horizon: 5.0,
            dt: 0.01,
            n_paths: 100,
            seed: 0,
            fd_step: 1e-3,
            antithetic: false,
            truncation: 0.0,
            query_points: nodes.clone(),
            psi_stderr: vec![vec![0.0; dim]; nodes.len()],
            grad_stderr: vec![vec![0.0; dim * dim]; nodes.len()],
            psi,
            grad_psi: grad,
            grad_sup_est: m.abs(),
            grad_stderr_sup: 0.0,
        }
    }

    #[test]
    fn cache_reproduces_linear_fields() {
        for dim in [1, 2] {
            let mut cfg = TransformConfig::new(ResolventConfig::new(2.0, 0.01, 100));
            cfg.cache_radius = 2.0;
            cfg.cache_spacing = 0.5;
            let sol = linear_solution(dim, 2.0, 0.5, -1.0 / 3.0);
            let t = ZvonkinTransform::from_solution(&sol, &cfg).unwrap();
            assert!((t.gamma_cert - 1.0 / 3.0).abs() < 1e-9, "{}", t.gamma_cert);
            let x: Vec<f64> = (0..dim).map(|i| 0.37 - 0.9 * i as f64).collect();
            let psi = t.psi(&x).unwrap();
            let dpsi = t.dpsi(&x).unwrap();
            for c in 0..dim {
                assert!((psi[c] + x[c] / 3.0).abs() < 1e-10, "{dim}: {psi:?}");
                for a in 0..dim {
                    let expect = if a == c { -1.0 / 3.0 } else { 0.0 };
                    assert!((dpsi[c * dim + a] - expect).abs() < 1e-9);
                }
            }
            assert!(t.interpolation_error.gradient < 1e-9);
            assert!(matches!(
                t.psi(&vec![2.5; dim]),
                Err(FlowError::OutsideCache { .. })
            ));
        }
    }

    #[test]
    fn cache_interpolates_smooth_2d_field() {
        let mut sol = linear_solution(2, 2.0, 0.25, 0.0);
        for (i, x) in sol.query_points.iter().enumerate() {
            sol.psi[i] = vec![0.1 * x[0].sin(), 0.1 * x[1].cos() * x[0]];
        }
        let cache = PsiCache::from_solution(&sol, 2.0, 0.25).unwrap();
        let mut p = vec![0.0; 2];
        let mut g = vec![0.0; 4];
        cache.eval(&[0.33, -0.71], &mut p, &mut g).unwrap();
        assert!((p[0] - 0.1 * 0.33f64.sin()).abs() < 1e-4);
        assert!((p[1] - 0.1 * (-0.71f64).cos() * 0.33).abs() < 1e-4);
        assert!((g[0] - 0.1 * 0.33f64.cos()).abs() < 2e-3);
    }

    #[test]
    fn cache_rejects_foreign_solutions() {
        let sol = linear_solution(1, 2.0, 0.5, 0.1);
        assert!(PsiCache::from_solution(&sol, 2.0, 0.25).is_err());
        assert!(PsiCache::nodes(1, 1.0, 0.3).is_err());
    }

    #[test]
    fn zero_drift_transform_degenerates_bit_exactly() {
        let b = DriftField::zero(1);
        let s = DiffusionSpec::sin_perturbed(1, 0.3);
        let mut cfg = TransformConfig::new(ResolventConfig::new(1.0, 0.05, 100));
        cfg.cache_radius = 4.0;
        cfg.cache_spacing = 0.5;
        let t = ZvonkinTransform::build(&b, &s, &cfg, 1).unwrap();
        assert_eq!(t.gamma_cert, 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let drv = BrownianDriver::new(3, 0, 1, grid);
        let direct = paths::simulate(&b, &s, &[0.4], 0.0, &drv, &grid).unwrap();
        let via = simulate_transformed_flow(&t, &s, &[0.4], &drv, &grid).unwrap();
        assert_eq!(direct.states, via.x.states);
        assert_eq!(direct.states, via.y.states);
    }

    #[test]
    fn derivative_trivial_cases() {
        let t = ZvonkinTransform::identity(2, 1.0).unwrap();
        let s = DiffusionSpec::identity(2);
        let grid = TimeGrid::new(0.0, 0.5, 50).unwrap();
        let drv = BrownianDriver::new(1, 0, 2, grid);
        let fd = flow_derivative(&t, &s, &[0.1, 0.2], &[1.0, -2.0], &drv, &grid).unwrap();
        assert!(fd.eta.iter().all(|e| e == &vec![1.0, -2.0]));
        let fd = flow_derivative(&t, &s, &[0.1, 0.2], &[0.0, 0.0], &drv, &grid).unwrap();
        assert!(fd.eta.iter().all(|e| e == &vec![0.0, 0.0]));
        assert_eq!(fd.dove_discrepancy, 0.0);
    }

    #[test]
    fn ou_derivative_through_exact_transform() {
        // b = −x at λ = 2: ψ = −x/3, b̃(y) = −y, σ̃ = 2/3
        let t = affine(1, -1.0 / 3.0, 1.0 / 3.0);
        let s = DiffusionSpec::identity(1);
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let drv = BrownianDriver::new(5, 2, 1, grid);
        let fd = flow_derivative(&t, &s, &[0.7], &[1.0], &drv, &grid).unwrap();
        let euler = 0.999f64.powi(1000);
        assert!((fd.terminal()[0] - euler).abs() < 1e-10);
        assert!((fd.terminal()[0] - (-1.0f64).exp()).abs() < 1e-3);
        assert!(fd.dove_discrepancy < 1e-10);
        // and the path equals direct Euler up to round-off
        let direct = paths::simulate(
            &DriftField::linear(1, vec![-1.0]),
            &s,
            &[0.7],
            0.0,
            &drv,
            &grid,
        )
        .unwrap();
        let via = simulate_transformed_flow(&t, &s, &[0.7], &drv, &grid).unwrap();
        assert!(direct.sup_distance(&via.x) < 1e-12);
    }

    #[test]
    fn composition_matches_single_run() {
        let t = affine(1, 0.2, 0.2);
        let s = DiffusionSpec::sin_perturbed(1, 0.2);
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let drv = BrownianDriver::new(4, 0, 1, grid);
        let (a, b) = transformed_compose(&t, &s, &[0.3], 0.5, &drv, &grid).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-11);
    }

    #[test]
    fn conjugation_residual_shrinks_with_dt() {
        let t = affine(1, -1.0 / 3.0, 1.0 / 3.0);
        let b = DriftField::linear(1, vec![-1.0]);
        let s = DiffusionSpec::identity(1);
        // exact ψ of a linear problem: Ψ is linear and the residual vanishes
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let r =
            conjugation_residual(&b, &s, &t, &[0.5], &BrownianDriver::new(1, 0, 1, g), &g).unwrap();
        assert!(r.max_abs < 1e-14);

        // quadratic ψ: residual is the Itô correction, O(dt) per step
        let t = ZvonkinTransform::from_fn(
            1,
            1.0,
            0.5,
            |x, o| o[0] = 0.1 * x[0] * x[0],
            |x, o| o[0] = 0.2 * x[0],
        )
        .unwrap();
        let mut means = Vec::new();
        for steps in [100, 1000] {
            let g = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let r = conjugation_residual(
                &DriftField::zero(1),
                &s,
                &t,
                &[0.5],
                &BrownianDriver::new(1, 0, 1, g),
                &g,
            )
            .unwrap();
            means.push(r.mean_abs);
        }
        let ratio = means[0] / means[1];
        assert!((5.0..20.0).contains(&ratio), "{means:?}");
    }

    #[test]
    fn round_trip_report_on_affine() {
        let t = affine(2, 0.3, 0.3);
        let probes = crate::coeffs::halton_cloud(2, 16, 3.0);
        let r = t.round_trip(&probes).unwrap();
        assert!(r.max_relative_error < 1e-11);
        assert!(r.max_inverse_error < 1e-11);
        assert!(r.neumann_residual <= r.neumann_bound);
        assert!(r.min_det >= r.det_floor);
    }

    #[test]
    fn conjugated_jacobians_match_differences() {
        let t = ZvonkinTransform::from_fn(
            1,
            3.0,
            0.4,
            |x, o| o[0] = 0.2 * x[0].sin(),
            |x, o| o[0] = 0.2 * x[0].cos(),
        )
        .unwrap();
        let s = DiffusionSpec::sin_perturbed(1, 0.3);
        let conj = ConjugatedCoeffs::new(&t, &s).unwrap();
        let y = [0.8];
        let pt = conj.at(&y).unwrap();
        let (db, ds) = conj.jacobians(&pt).unwrap();
        let h = 1e-5;
        let bp = conj.b_tilde(&[y[0] + h]).unwrap()[0];
        let bm = conj.b_tilde(&[y[0] - h]).unwrap()[0];
        assert!((db[0] - (bp - bm) / (2.0 * h)).abs() < 1e-6);
        let sp = conj.sigma_tilde(&[y[0] + h]).unwrap()[0];
        let sm = conj.sigma_tilde(&[y[0] - h]).unwrap()[0];
        assert!((ds[0] - (sp - sm) / (2.0 * h)).abs() < 1e-6);
        let lip = conj
            .lipschitz(&[(vec![0.0], vec![0.5]), (vec![1.0], vec![1.2])])
            .unwrap();
        assert!(lip.b_tilde < 3.0 && lip.sigma_tilde < 1.0);
    }

    #[test]
    fn dove_agrees_with_chain_rule_on_smooth_transform() {
        let t = ZvonkinTransform::from_fn(
            1,
            3.0,
            0.4,
            |x, o| o[0] = 0.2 * x[0].sin(),
            |x, o| o[0] = 0.2 * x[0].cos(),
        )
        .unwrap();
        let s = DiffusionSpec::sin_perturbed(1, 0.3);
        let mut gaps = Vec::new();
        for steps in [200, 1600] {
            let g = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let drv = BrownianDriver::new(8, 0, 1, g);
            gaps.push(
                flow_derivative(&t, &s, &[0.2], &[1.0], &drv, &g)
                    .unwrap()
                    .dove_discrepancy,
            );
        }
        // the two discretizations differ at first order in dt (up to noise)
        assert!(gaps[1] < gaps[0], "{gaps:?}");
        assert!(gaps[0] < 0.1, "{gaps:?}");
    }
}
