//! Smooth approximations `b_n = b ∗ ϑ_n`, `ϑ_n(y) = n^d ϑ(n y)`.
//!
//! `ϑ` is the normalized bump `exp(−1/(1 − |y|²))` on the unit ball.
//! Convolutions are evaluated by a Gauss–Legendre tensor rule on the
//! support, so `b_n` and its derivatives are available wherever `b` is.

use std::sync::Arc;

use crate::coeffs::{self, DriftField, PAIR_SCALES};
use crate::error::{FlowError, Result};
use crate::linalg;

/// Maximum accepted `|Σ w ϑ − 1|` before renormalization.
pub const NORMALIZATION_RESIDUAL_MAX: f64 = 1e-4;

/// Accepted deviation of the kernel-gradient first moment before it is
/// rescaled to the exact value.
pub const GRADIENT_MOMENT_TOL: f64 = 1e-2;

/// Relative change across quadrature doubling treated as instability.
pub const REFINEMENT_TOL: f64 = 0.05;

pub const DEFAULT_QUAD_POINTS: usize = 32;

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * p - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// The normalized unit bump and its first three derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifierKernel {
    pub dim: usize,
    /// `∫_{B(0,1)} exp(−1/(1 − |y|²)) dy`.
    pub norm_const: f64,
}

impl MollifierKernel {
    pub fn new(dim: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(FlowError::Quadrature(format!(
                "tensor quadrature supports d ≤ 3 (got {dim}); supply a Monte Carlo quadrature instead"
            )));
        }
        // radial integral, integrand flat at both ends
        let (nodes, weights) = gauss_legendre(400);
        let mut radial = 0.0;
        for (x, w) in nodes.iter().zip(&weights) {
            let r = 0.5 * (x + 1.0);
            radial += 0.5 * w * r.powi(dim as i32 - 1) * (-1.0 / (1.0 - r * r)).exp();
        }
        let sphere = match dim {
            1 => 2.0,
            2 => 2.0 * std::f64::consts::PI,
            _ => 4.0 * std::f64::consts::PI,
        };
        Ok(MollifierKernel {
            dim,
            norm_const: sphere * radial,
        })
    }

    /// Radial profile `F(s)` and its first three `s`-derivatives, `s = |y|²`.
    fn radial(&self, s: f64) -> [f64; 4] {
        if s >= 1.0 {
            return [0.0; 4];
        }
        let u = 1.0 - s;
        let f = (-1.0 / u).exp() / self.norm_const;
        let g1 = -1.0 / (u * u);
        let g2 = -2.0 / (u * u * u);
        let g3 = -6.0 / (u * u * u * u);
        [
            f,
            g1 * f,
            (g2 + g1 * g1) * f,
            (g3 + 3.0 * g1 * g2 + g1 * g1 * g1) * f,
        ]
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        self.radial(y.iter().map(|v| v * v).sum())[0]
    }

    /// `D^order ϑ(y)` as a flat tensor indexed by the multi-index
    /// `(a_1, …, a_order)` in base `d` (first index least significant).
    pub fn derivative(&self, y: &[f64], order: usize) -> Vec<f64> {
        let d = self.dim;
        let s: f64 = y.iter().map(|v| v * v).sum();
        let [f, f1, f2, f3] = self.radial(s);
        let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        let len = d.pow(order as u32);
        let mut out = vec![0.0; len];
        for (idx, o) in out.iter_mut().enumerate() {
            let a = idx % d;
            let b = (idx / d) % d;
            let c = (idx / (d * d)) % d;
            *o = match order {
                0 => f,
                1 => 2.0 * f1 * y[a],
                2 => 4.0 * f2 * y[a] * y[b] + 2.0 * f1 * delta(a, b),
                3 => {
                    8.0 * f3 * y[a] * y[b] * y[c]
                        + 4.0 * f2 * (delta(a, b) * y[c] + delta(a, c) * y[b] + delta(b, c) * y[a])
                }
                _ => panic!("kernel derivatives are implemented up to order 3"),
            };
        }
        out
    }
}

/// Tensor rule on the unit ball, in unscaled coordinates `ξ`.
#[derive(Debug, Clone)]
struct Quadrature {
    dim: usize,
    points_per_axis: usize,
    nodes: Vec<Vec<f64>>,
    /// Product Gauss weights.
    base: Vec<f64>,
    /// `base · ϑ(ξ)`, renormalized to unit sum.
    values: Vec<f64>,
    /// `base · ∇ϑ(ξ)`, rescaled so that `−Σ g_a ξ_a = 1` per axis.
    grads: Vec<Vec<f64>>,
    /// `|Σ base·ϑ − 1|` before renormalization.
    residual: f64,
}

impl Quadrature {
    fn build(kernel: &MollifierKernel, q: usize) -> Result<Self> {
        let d = kernel.dim;
        let (x, w) = gauss_legendre(q);
        let total = q.pow(d as u32);
        let mut nodes = Vec::new();
        let mut base = Vec::new();
        for idx in 0..total {
            let mut node = vec![0.0; d];
            let mut weight = 1.0;
            for (a, n) in node.iter_mut().enumerate() {
                let i = (idx / q.pow(a as u32)) % q;
                *n = x[i];
                weight *= w[i];
            }
            if linalg::norm(&node) < 1.0 {
                nodes.push(node);
                base.push(weight);
            }
        }
        let mut values: Vec<f64> = nodes
            .iter()
            .zip(&base)
            .map(|(n, w)| w * kernel.value(n))
            .collect();
        let mass: f64 = values.iter().sum();
        let residual = (mass - 1.0).abs();
        if residual > NORMALIZATION_RESIDUAL_MAX {
            return Err(FlowError::Quadrature(format!(
                "{q} points per axis integrate the kernel to {mass} (residual {residual:e} > {NORMALIZATION_RESIDUAL_MAX:e}); raise the point count"
            )));
        }
        values.iter_mut().for_each(|v| *v /= mass);

        let mut grads: Vec<Vec<f64>> = nodes
            .iter()
            .zip(&base)
            .map(|(n, w)| kernel.derivative(n, 1).iter().map(|g| w * g).collect())
            .collect();
        for a in 0..d {
            let moment: f64 = -grads
                .iter()
                .zip(&nodes)
                .map(|(g, n)| g[a] * n[a])
                .sum::<f64>();
            if (moment - 1.0).abs() > GRADIENT_MOMENT_TOL {
                return Err(FlowError::Quadrature(format!(
                    "gradient moment {moment} off by more than {GRADIENT_MOMENT_TOL:e}"
                )));
            }
            grads.iter_mut().for_each(|g| g[a] /= moment);
        }
        Ok(Quadrature {
            dim: d,
            points_per_axis: q,
            nodes,
            base,
            values,
            grads,
            residual,
        })
    }
}

/// `b ∗ ϑ_n` as a drift field with its quadrature.
#[derive(Debug, Clone)]
pub struct MollifiedDrift {
    pub base: DriftField,
    pub n: usize,
    kernel: MollifierKernel,
    quad: Arc<Quadrature>,
    field: DriftField,
}

impl MollifiedDrift {
    pub fn field(&self) -> &DriftField {
        &self.field
    }

    pub fn kernel(&self) -> &MollifierKernel {
        &self.kernel
    }

    pub fn quad_points(&self) -> usize {
        self.quad.points_per_axis
    }

    /// `|Σ w ϑ − 1|` of the unnormalized rule.
    pub fn normalization_residual(&self) -> f64 {
        self.quad.residual
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.field.eval(x)
    }
}

/// Builds `b_n = b ∗ ϑ_n` with `quad_points_per_axis` Gauss nodes per axis.
pub fn mollify(b: &DriftField, n: usize, quad_points_per_axis: usize) -> Result<MollifiedDrift> {
    if n == 0 {
        return Err(FlowError::invalid("n", "mollification index must be ≥ 1"));
    }
    if quad_points_per_axis < 8 {
        return Err(FlowError::invalid(
            "quad",
            "need at least 8 points per axis",
        ));
    }
    let kernel = MollifierKernel::new(b.dim())?;
    let quad = Arc::new(Quadrature::build(&kernel, quad_points_per_axis)?);
    let field = convolved_field(b, n, quad.clone());
    Ok(MollifiedDrift {
        base: b.clone(),
        n,
        kernel,
        quad,
        field,
    })
}

fn convolved_field(b: &DriftField, n: usize, quad: Arc<Quadrature>) -> DriftField {
    let d = b.dim();
    let inv_n = 1.0 / n as f64;
    let scale = n as f64;
    let (b_eval, b_jac, q2) = (b.clone(), b.clone(), quad.clone());
    DriftField::new(
        d,
        b.theta(),
        format!("mollified:{}:{n}", b.label()),
        move |x, out| {
            let mut y = vec![0.0; d];
            let mut v = vec![0.0; d];
            out.fill(0.0);
            for (node, w) in quad.nodes.iter().zip(&quad.values) {
                for a in 0..d {
                    y[a] = x[a] - node[a] * inv_n;
                }
                b_eval.eval_into(&y, &mut v);
                for a in 0..d {
                    out[a] += w * v[a];
                }
            }
        },
    )
    .with_jacobian(move |x, out| {
        let mut y = vec![0.0; d];
        let mut v = vec![0.0; d];
        out.fill(0.0);
        for (node, g) in q2.nodes.iter().zip(&q2.grads) {
            for a in 0..d {
                y[a] = x[a] - node[a] * inv_n;
            }
            b_jac.eval_into(&y, &mut v);
            for i in 0..d {
                for l in 0..d {
                    out[i * d + l] += scale * g[l] * v[i];
                }
            }
        }
    })
}

/// `sup |b − b_n|` over the probes plus the Hölder seminorm of `b − b_n`
/// on offset pairs at the default scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub sup: f64,
    pub seminorm: f64,
}

impl GapReport {
    pub fn total(&self) -> f64 {
        self.sup + self.seminorm
    }
}

pub fn mollification_gap(
    b: &DriftField,
    bn: &MollifiedDrift,
    probes: &[Vec<f64>],
) -> Result<GapReport> {
    if probes.is_empty() {
        return Err(FlowError::invalid("probes", "probe set is empty"));
    }
    let diff = DriftField::combine(1.0, b, -1.0, bn.field());
    let sup = probes
        .iter()
        .map(|x| linalg::norm(&diff.eval(x)))
        .fold(0.0, f64::max);
    let seminorm = coeffs::holder_seminorm(&diff, &coeffs::offset_pairs(probes, &PAIR_SCALES))?;
    Ok(GapReport { sup, seminorm })
}

fn derivative_sup(
    bn: &MollifiedDrift,
    quad: &Quadrature,
    order: usize,
    probes: &[Vec<f64>],
) -> f64 {
    let d = quad.dim;
    let inv_n = 1.0 / bn.n as f64;
    let scale = (bn.n as f64).powi(order as i32);
    // kernel-derivative weights at the nodes
    let weights: Vec<Vec<f64>> = if order == 1 {
        quad.grads.clone()
    } else {
        quad.nodes
            .iter()
            .zip(&quad.base)
            .map(|(node, w)| {
                bn.kernel
                    .derivative(node, order)
                    .into_iter()
                    .map(|v| v * w)
                    .collect()
            })
            .collect()
    };
    let width = d.pow(order as u32);
    let mut tensor = vec![0.0; d * width];
    let mut y = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut best: f64 = 0.0;
    for x in probes {
        tensor.fill(0.0);
        for (node, w) in quad.nodes.iter().zip(&weights) {
            for a in 0..d {
                y[a] = x[a] - node[a] * inv_n;
            }
            bn.base.eval_into(&y, &mut v);
            for i in 0..d {
                for m in 0..width {
                    tensor[i * width + m] += scale * w[m] * v[i];
                }
            }
        }
        best = best.max(linalg::hs_norm(&tensor));
    }
    best
}

/// `sup ‖D^k b_n‖_HS` over the probes (`k ∈ {1, 2, 3}`), checked against
/// a rule with twice as many points per axis.
pub fn derivative_bound_probe(
    bn: &MollifiedDrift,
    order: usize,
    probes: &[Vec<f64>],
) -> Result<f64> {
    if !(1..=3).contains(&order) {
        return Err(FlowError::invalid(
            "k",
            "derivative order must be 1, 2 or 3",
        ));
    }
    if probes.is_empty() {
        return Err(FlowError::invalid("probes", "probe set is empty"));
    }
    let coarse = derivative_sup(bn, &bn.quad, order, probes);
    let fine_quad = Quadrature::build(&bn.kernel, 2 * bn.quad.points_per_axis)?;
    let fine = derivative_sup(bn, &fine_quad, order, probes);
    let b_scale = probes
        .iter()
        .map(|x| linalg::norm(&bn.base.eval(x)))
        .fold(0.0, f64::max);
    let floor = 1e-6 * (bn.n as f64).powi(order as i32) * (1.0 + b_scale);
    if (fine - coarse).abs() > REFINEMENT_TOL * coarse.max(fine) + floor {
        return Err(FlowError::Quadrature(format!(
            "D^{order} b_n did not converge under refinement: {coarse} ({} pts) vs {fine} ({} pts)",
            bn.quad.points_per_axis,
            2 * bn.quad.points_per_axis
        )));
    }
    Ok(coarse)
}

/// Resolves drift presets, including `mollified:<base>:<n>`.
pub fn drift_from_preset(spec: &str, dim: usize, quad_points: usize) -> Result<DriftField> {
    if let Some(rest) = spec.strip_prefix("mollified:") {
        let (base, n) = rest
            .rsplit_once(':')
            .ok_or_else(|| FlowError::invalid("drift", "expected mollified:<base>:<n>"))?;
        let n: usize = n
            .parse()
            .map_err(|_| FlowError::invalid("drift", format!("bad mollification index `{n}`")))?;
        let base = drift_from_preset(base, dim, quad_points)?;
        return Ok(mollify(&base, n, quad_points)?.field().clone());
    }
    DriftField::from_preset(spec, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::grid_1d;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let int = |p: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((int(0) - 2.0).abs() < 1e-14);
        assert!((int(14) - 2.0 / 15.0).abs() < 1e-14);
        assert!(int(7).abs() < 1e-15);
    }

    #[test]
    fn kernel_normalization_constant_1d() {
        // independent value: composite midpoint rule with 2e6 cells
        let n = 2_000_000;
        let h = 2.0 / n as f64;
        let z: f64 = (0..n)
            .map(|i| {
                let x = -1.0 + (i as f64 + 0.5) * h;
                (-1.0 / (1.0 - x * x)).exp() * h
            })
            .sum();
        let k = MollifierKernel::new(1).unwrap();
        assert!((k.norm_const - z).abs() < 1e-9, "{} vs {z}", k.norm_const);
    }

    #[test]
    fn kernel_is_even_with_unit_mass() {
        for d in 1..=3 {
            let b = DriftField::zero(d);
            let m = mollify(&b, 1, 48).unwrap();
            assert!(m.normalization_residual() < 1e-6, "d={d}");
            let k = m.kernel();
            let y = vec![0.3; d];
            let ny: Vec<f64> = y.iter().map(|v| -v).collect();
            assert_eq!(k.value(&y), k.value(&ny));
            assert_eq!(k.value(&vec![1.0; d]), 0.0);
        }
    }

    #[test]
    fn analytic_kernel_derivatives_match_differences() {
        let k = MollifierKernel::new(2).unwrap();
        let y = [0.2, -0.35];
        let h = 1e-5;
        for order in 1..=3 {
            let analytic = k.derivative(&y, order);
            let lower = |p: &[f64]| k.derivative(p, order - 1);
            for a in 0..2 {
                let mut yp = y;
                let mut ym = y;
                yp[a] += h;
                ym[a] -= h;
                let (lp, lm) = (lower(&yp), lower(&ym));
                let width = 2usize.pow(order as u32 - 1);
                for m in 0..width {
                    let fd = (lp[m] - lm[m]) / (2.0 * h);
                    // new index a becomes the most significant digit
                    let an = analytic[m + a * width];
                    assert!(
                        (fd - an).abs() < 1e-5 * an.abs().max(1.0),
                        "order {order}: {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_and_constant_fields_are_preserved() {
        let m = mollify(&DriftField::zero(1), 4, 32).unwrap();
        assert_eq!(m.eval(&[0.3]), vec![0.0]);
        let c = mollify(&DriftField::constant(vec![2.5, -1.0]), 3, 16).unwrap();
        let v = c.eval(&[0.1, 7.0]);
        assert!((v[0] - 2.5).abs() < 1e-14 && (v[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn linear_field_is_reproduced() {
        let b = DriftField::linear(1, vec![1.0]);
        for n in [1, 2, 7] {
            let m = mollify(&b, n, 32).unwrap();
            for x in [-3.0, 0.0, 0.4, 10.0] {
                assert!((m.eval(&[x])[0] - x).abs() < 1e-12);
                assert!((m.field().jacobian(&[x]).unwrap()[0] - 1.0).abs() < 1e-12);
            }
            assert!((derivative_bound_probe(&m, 1, &[vec![0.5]]).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points_or_dimensions_rejected() {
        assert!(matches!(
            mollify(&DriftField::zero(4), 2, 16),
            Err(FlowError::Quadrature(_))
        ));
        assert!(mollify(&DriftField::zero(1), 2, 4).is_err());
        assert!(mollify(&DriftField::zero(1), 0, 16).is_err());
    }

    #[test]
    fn gap_shrinks_with_n() {
        let b = DriftField::holder(1, 0.5, 1.0);
        let probes = grid_1d(-2.0, 2.0, 81);
        let g4 = mollification_gap(&b, &mollify(&b, 4, 32).unwrap(), &probes).unwrap();
        let g16 = mollification_gap(&b, &mollify(&b, 16, 32).unwrap(), &probes).unwrap();
        assert!(g16.total() < g4.total(), "{g16:?} vs {g4:?}");
        assert!(g16.sup < g4.sup);
        let lin = DriftField::linear(1, vec![-2.0]);
        let g = mollification_gap(&lin, &mollify(&lin, 3, 32).unwrap(), &probes).unwrap();
        assert!(g.total() < 1e-10);
    }

    #[test]
    fn first_derivative_scales_like_sqrt_n() {
        // sup |b_n'| = n^{1-θ} sup |B'|; the probe grid resolves 1/n.
        let b = DriftField::holder(1, 0.5, 1.0);
        let probes = grid_1d(-1.0, 1.0, 801);
        let s4 = derivative_bound_probe(&mollify(&b, 4, 32).unwrap(), 1, &probes).unwrap();
        let s8 = derivative_bound_probe(&mollify(&b, 8, 32).unwrap(), 1, &probes).unwrap();
        let ratio = s8 / s4;
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn derivative_probe_on_zero_field() {
        let m = mollify(&DriftField::zero(2), 3, 16).unwrap();
        for k in 1..=3 {
            assert_eq!(
                derivative_bound_probe(&m, k, &[vec![0.1, 0.2]]).unwrap(),
                0.0
            );
        }
        assert!(derivative_bound_probe(&m, 4, &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn preset_resolution() {
        let f = drift_from_preset("mollified:holder:theta=0.5,scale=1:8", 1, 32).unwrap();
        assert!(f.has_jacobian());
        assert!(f.eval(&[0.0])[0] > 0.0);
        assert!(drift_from_preset("mollified:zero", 1, 32).is_err());
    }
}
