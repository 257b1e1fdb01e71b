//! Brownian drivers and Euler–Maruyama integration of the SDE and of its
//! first variation equation.
//!
//! A [`BrownianDriver`] owns one sample path ω. Its Gaussian increments
//! are generated on a fine grid from a counter-based stream keyed by
//! `(master_seed, path_index, fine step, noise coordinate)`, and coarser
//! grids receive exact sums of fine increments. Two schemes (or two
//! drifts) fed by the same driver therefore see the same ω.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::coeffs::{DiffusionSpec, DriftField};
use crate::error::{FlowError, Result};
use crate::linalg;

/// States with a larger norm abort the integration.
pub const BLOW_UP_NORM: f64 = 1e8;

const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0 >= 0.0) || !t0.is_finite() {
            return Err(FlowError::invalid("t0", "must be a finite time ≥ 0"));
        }
        if !(t_end > t0) || !t_end.is_finite() {
            return Err(FlowError::invalid("T", "must exceed t0"));
        }
        if steps == 0 {
            return Err(FlowError::invalid("steps", "must be ≥ 1"));
        }
        Ok(TimeGrid { t0, t_end, steps })
    }

    /// Grid on `[t0, t_end]` whose step is `dt` (rounded to the nearest
    /// whole number of steps).
    pub fn with_dt(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(FlowError::invalid("dt", "must be positive"));
        }
        let steps = ((t_end - t0) / dt).round().max(1.0) as usize;
        TimeGrid::new(t0, t_end, steps)
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    #[inline]
    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt()
    }

    /// Index `j` with `time(j) = t`, or an error if `t` is off-grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let r = (t - self.t0) / self.dt();
        let j = r.round();
        if (r - j).abs() > ALIGN_TOL * r.abs().max(1.0) || j < 0.0 || j as usize > self.steps {
            return Err(FlowError::Grid(format!(
                "time {t} is not on the grid [{}, {}] with dt {}",
                self.t0,
                self.t_end,
                self.dt()
            )));
        }
        Ok(j as usize)
    }

    /// The same spacing restricted to `[t0, t_end]`.
    pub fn sub(&self, t0: f64, t_end: f64) -> Result<Self> {
        let i0 = self.index_of(t0)?;
        let i1 = self.index_of(t_end)?;
        if i1 <= i0 {
            return Err(FlowError::Grid(format!("empty sub-grid [{t0}, {t_end}]")));
        }
        Ok(TimeGrid {
            t0: self.time(i0),
            t_end: self.time(i1),
            steps: i1 - i0,
        })
    }

    /// Each step split into `factor` equal steps.
    pub fn refined(&self, factor: usize) -> Self {
        TimeGrid {
            steps: self.steps * factor,
            ..*self
        }
    }
}

/// One Brownian sample path in `ℝ^k`, addressable on any grid that is a
/// coarsening of its fine grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrownianDriver {
    pub master_seed: u64,
    pub path_index: u64,
    pub dim_noise: usize,
    pub fine: TimeGrid,
}

impl BrownianDriver {
    pub fn new(master_seed: u64, path_index: u64, dim_noise: usize, fine: TimeGrid) -> Self {
        BrownianDriver {
            master_seed,
            path_index,
            dim_noise,
            fine,
        }
    }

    /// Fine grid = `grid` with every step halved `finest_level` times.
    pub fn with_finest_level(
        master_seed: u64,
        path_index: u64,
        dim_noise: usize,
        grid: TimeGrid,
        finest_level: u32,
    ) -> Self {
        BrownianDriver::new(
            master_seed,
            path_index,
            dim_noise,
            grid.refined(1usize << finest_level),
        )
    }

    /// Standard normals number `start .. start + out.len()` of this path.
    /// Normal `i` belongs to fine step `i / k`, coordinate `i % k`.
    fn fine_normals(&self, start: usize, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.path_index);
        // Each Box–Muller pair consumes two u64 = four 32-bit words.
        rng.set_word_pos(4 * (start / 2) as u128);
        let mut skip = start % 2;
        let mut filled = 0;
        while filled < out.len() {
            let (z0, z1) = box_muller(rng.next_u64(), rng.next_u64());
            for z in [z0, z1] {
                if skip > 0 {
                    skip -= 1;
                    continue;
                }
                if filled < out.len() {
                    out[filled] = z;
                    filled += 1;
                }
            }
        }
    }

    /// `ΔW_j` for every step of `grid`, flattened `[j * k + coord]`.
    ///
    /// `grid` must start and end on fine-grid times and its step must be
    /// a whole multiple of the fine step. Coarse increments are the
    /// left-to-right sums of the fine ones.
    pub fn increments(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let k = self.dim_noise;
        let fdt = self.fine.dt();
        let ratio_f = grid.dt() / fdt;
        let ratio = ratio_f.round();
        if ratio < 1.0 || (ratio_f - ratio).abs() > ALIGN_TOL * ratio {
            return Err(FlowError::Grid(format!(
                "step {} is not a multiple of the driver step {fdt}",
                grid.dt()
            )));
        }
        let ratio = ratio as usize;
        let offset = self.fine.index_of(grid.t0)?;
        let last = self.fine.index_of(grid.t_end)?;
        if offset + grid.steps * ratio != last {
            return Err(FlowError::Grid(
                "grid end is inconsistent with its step".into(),
            ));
        }
        let mut fine = vec![0.0; grid.steps * ratio * k];
        self.fine_normals(offset * k, &mut fine);
        let scale = fdt.sqrt();
        let mut out = vec![0.0; grid.steps * k];
        for j in 0..grid.steps {
            for c in 0..k {
                let mut acc = 0.0;
                for r in 0..ratio {
                    acc += scale * fine[(j * ratio + r) * k + c];
                }
                out[j * k + c] = acc;
            }
        }
        Ok(out)
    }
}

#[inline]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((a >> 11) as f64 + 0.5) * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub grid: TimeGrid,
    pub states: Vec<Vec<f64>>,
    pub increments: Vec<f64>,
}

impl PathRecord {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("path has at least one state")
    }

    /// `sup_j |X_j − Z_j|` against another path on the same grid.
    pub fn sup_distance(&self, other: &PathRecord) -> f64 {
        self.states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| linalg::dist(a, b))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationRecord {
    pub grid: TimeGrid,
    pub eta: Vec<Vec<f64>>,
    pub direction: Vec<f64>,
}

/// `out = x + drift·dt + σ·ΔW`.
#[inline]
pub(crate) fn euler_step(
    x: &[f64],
    drift: &[f64],
    sigma: &[f64],
    dw: &[f64],
    dt: f64,
    out: &mut [f64],
) {
    let k = dw.len();
    for i in 0..x.len() {
        let mut noise = 0.0;
        for j in 0..k {
            noise += sigma[i * k + j] * dw[j];
        }
        out[i] = x[i] + drift[i] * dt + noise;
    }
}

#[inline]
pub(crate) fn check_state(x: &[f64], step: usize) -> Result<()> {
    let n = linalg::norm(x);
    if n.is_finite() && n <= BLOW_UP_NORM {
        Ok(())
    } else {
        Err(FlowError::BlowUp { step, norm: n })
    }
}

pub(crate) fn check_dims(b: &DriftField, s: &DiffusionSpec, x: &[f64]) -> Result<()> {
    if b.dim() != s.dim() {
        return Err(FlowError::DimensionMismatch {
            expected: b.dim(),
            got: s.dim(),
        });
    }
    if x.len() != b.dim() {
        return Err(FlowError::DimensionMismatch {
            expected: b.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Euler–Maruyama on pre-drawn increments. `visit(j, X_j, b(X_j))` runs
/// before every step `j < steps`; the terminal state is returned.
pub(crate) fn integrate<F>(
    b: &DriftField,
    s: &DiffusionSpec,
    x0: &[f64],
    dw: &[f64],
    dt: f64,
    steps: usize,
    mut visit: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &[f64], &[f64]),
{
    let (d, k) = (s.dim(), s.noise_dim());
    let mut x = x0.to_vec();
    let mut next = vec![0.0; d];
    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d * k];
    for j in 0..steps {
        b.eval_into(&x, &mut drift);
        visit(j, &x, &drift);
        s.sigma_into(&x, &mut sigma);
        euler_step(&x, &drift, &sigma, &dw[j * k..(j + 1) * k], dt, &mut next);
        std::mem::swap(&mut x, &mut next);
        check_state(&x, j + 1)?;
    }
    Ok(x)
}

/// Euler–Maruyama path of `dX = b(X)dt + σ(X)dW`, `X_{s0} = x`.
pub fn simulate(
    b: &DriftField,
    s: &DiffusionSpec,
    x: &[f64],
    s0: f64,
    driver: &BrownianDriver,
    grid: &TimeGrid,
) -> Result<PathRecord> {
    check_dims(b, s, x)?;
    if (grid.t0 - s0).abs() > ALIGN_TOL {
        return Err(FlowError::Grid(format!(
            "grid starts at {} but the initial time is {s0}",
            grid.t0
        )));
    }
    let dw = driver.increments(grid)?;
    let mut states = Vec::with_capacity(grid.steps + 1);
    let terminal = integrate(b, s, x, &dw, grid.dt(), grid.steps, |_, xj, _| {
        states.push(xj.to_vec())
    })?;
    states.push(terminal);
    Ok(PathRecord {
        grid: *grid,
        states,
        increments: dw,
    })
}

/// One Euler step of the pair `(X, η)`:
/// `η' = η + Db(X)η dt + Σ_j (∂σ_{·j}(X) η) ΔW_j`.
#[inline]
pub(crate) fn variation_step(
    eta: &[f64],
    jac_b: &[f64],
    dsigma: &[f64],
    dw: &[f64],
    dt: f64,
    out: &mut [f64],
) {
    let d = eta.len();
    let k = dw.len();
    for i in 0..d {
        let mut drift = 0.0;
        for l in 0..d {
            drift += jac_b[i * d + l] * eta[l];
        }
        let mut noise = 0.0;
        for j in 0..k {
            let mut col = 0.0;
            for l in 0..d {
                col += dsigma[(i * k + j) * d + l] * eta[l];
            }
            noise += col * dw[j];
        }
        out[i] = eta[i] + drift * dt + noise;
    }
}

/// Joint Euler stepping of the path and of its first variation in the
/// direction `h`. Needs a drift with a Jacobian.
pub fn simulate_with_variation(
    b: &DriftField,
    s: &DiffusionSpec,
    x: &[f64],
    h: &[f64],
    driver: &BrownianDriver,
    grid: &TimeGrid,
) -> Result<(PathRecord, VariationRecord)> {
    check_dims(b, s, x)?;
    if h.len() != x.len() {
        return Err(FlowError::DimensionMismatch {
            expected: x.len(),
            got: h.len(),
        });
    }
    if !b.has_jacobian() {
        return Err(FlowError::MissingJacobian {
            label: b.label().to_string(),
        });
    }
    let (d, k) = (s.dim(), s.noise_dim());
    let dt = grid.dt();
    let dw = driver.increments(grid)?;
    let mut xs = Vec::with_capacity(grid.steps + 1);
    let mut etas = Vec::with_capacity(grid.steps + 1);
    let mut xj = x.to_vec();
    let mut eta = h.to_vec();
    let (mut xn, mut en) = (vec![0.0; d], vec![0.0; d]);
    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d * k];
    let mut jac = vec![0.0; d * d];
    let mut ds = vec![0.0; d * k * d];
    for j in 0..grid.steps {
        xs.push(xj.clone());
        etas.push(eta.clone());
        let inc = &dw[j * k..(j + 1) * k];
        b.eval_into(&xj, &mut drift);
        b.jacobian_into(&xj, &mut jac);
        s.sigma_into(&xj, &mut sigma);
        s.dsigma_into(&xj, &mut ds);
        euler_step(&xj, &drift, &sigma, inc, dt, &mut xn);
        variation_step(&eta, &jac, &ds, inc, dt, &mut en);
        std::mem::swap(&mut xj, &mut xn);
        std::mem::swap(&mut eta, &mut en);
        check_state(&xj, j + 1)?;
        check_state(&eta, j + 1)?;
    }
    xs.push(xj);
    etas.push(eta);
    Ok((
        PathRecord {
            grid: *grid,
            states: xs,
            increments: dw,
        },
        VariationRecord {
            grid: *grid,
            eta: etas,
            direction: h.to_vec(),
        },
    ))
}

/// `(φ_{s0,u}(x), φ_{s0,t}(x))` from a single integration over `grid`.
#[allow(clippy::too_many_arguments)]
pub fn flow_eval(
    b: &DriftField,
    s: &DiffusionSpec,
    x: &[f64],
    s0: f64,
    u: f64,
    t: f64,
    driver: &BrownianDriver,
    grid: &TimeGrid,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(s0 <= u && u <= t) {
        return Err(FlowError::invalid("u", "need s0 ≤ u ≤ t"));
    }
    let iu = grid.index_of(u)?;
    let it = grid.index_of(t)?;
    let sub = TimeGrid {
        t0: grid.t0,
        t_end: grid.time(it),
        steps: it,
    };
    if it == 0 {
        return Ok((x.to_vec(), x.to_vec()));
    }
    let path = simulate(b, s, x, s0, driver, &sub)?;
    Ok((path.states[iu].clone(), path.states[it].clone()))
}

/// `φ_{u,t}(φ_{s0,u}(x))`: restart at `u` from the first leg's state with
/// the tail of the same driver.
#[allow(clippy::too_many_arguments)]
pub fn flow_compose(
    b: &DriftField,
    s: &DiffusionSpec,
    x: &[f64],
    s0: f64,
    u: f64,
    t: f64,
    driver: &BrownianDriver,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let (mid, _) = flow_eval(b, s, x, s0, u, t, driver, grid)?;
    if grid.index_of(u)? == grid.index_of(t)? {
        return Ok(mid);
    }
    let tail = grid.sub(u, t)?;
    Ok(simulate(b, s, &mid, tail.t0, driver, &tail)?
        .terminal()
        .to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, steps).unwrap()
    }

    #[test]
    fn driver_is_reproducible() {
        let g = grid(64);
        let a = BrownianDriver::new(3, 5, 2, g).increments(&g).unwrap();
        let b = BrownianDriver::new(3, 5, 2, g).increments(&g).unwrap();
        assert_eq!(a, b);
        let c = BrownianDriver::new(3, 6, 2, g).increments(&g).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn coarse_increments_are_sums_of_fine() {
        let g = grid(8);
        let drv = BrownianDriver::with_finest_level(11, 0, 2, g, 3);
        let fine = drv.increments(&drv.fine).unwrap();
        let coarse = drv.increments(&g).unwrap();
        for j in 0..8 {
            for c in 0..2 {
                let mut acc = 0.0;
                for r in 0..8 {
                    acc += fine[(j * 8 + r) * 2 + c];
                }
                assert_eq!(coarse[j * 2 + c], acc);
            }
        }
    }

    #[test]
    fn tail_grid_sees_tail_increments() {
        let g = grid(10);
        let drv = BrownianDriver::new(1, 2, 1, g);
        let all = drv.increments(&g).unwrap();
        let tail = drv.increments(&g.sub(0.5, 1.0).unwrap()).unwrap();
        assert_eq!(&all[5..], &tail[..]);
        // odd offsets land mid-pair
        let tail = drv.increments(&g.sub(0.3, 1.0).unwrap()).unwrap();
        assert_eq!(&all[3..], &tail[..]);
    }

    #[test]
    fn misaligned_grid_rejected() {
        let g = grid(10);
        let drv = BrownianDriver::new(1, 2, 1, g);
        assert!(drv
            .increments(&TimeGrid::new(0.0, 1.0, 15).unwrap())
            .is_err());
        assert!(drv
            .increments(&TimeGrid::new(0.05, 1.0, 19).unwrap())
            .is_err());
    }

    #[test]
    fn increments_have_unit_variance_rate() {
        let g = grid(4);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for p in 0..n {
            let inc = BrownianDriver::new(9, p, 1, g).increments(&g).unwrap();
            for v in inc {
                sum += v;
                sq += v * v;
            }
        }
        let m = (n * 4) as f64;
        let mean = sum / m;
        let var = sq / m - mean * mean;
        // dt = 0.25; stderr of the variance ≈ 0.25·√(2/m)
        assert!(mean.abs() < 4.0 * (0.25 / m).sqrt(), "{mean}");
        assert!((var - 0.25).abs() < 4.0 * 0.25 * (2.0 / m).sqrt(), "{var}");
    }

    #[test]
    fn brownian_path_is_exact() {
        let g = grid(50);
        let drv = BrownianDriver::new(7, 0, 2, g);
        let p = simulate(
            &DriftField::zero(2),
            &DiffusionSpec::identity(2),
            &[1.0, -1.0],
            0.0,
            &drv,
            &g,
        )
        .unwrap();
        let mut w = [1.0, -1.0];
        for j in 0..50 {
            assert_eq!(p.states[j].as_slice(), &w);
            w[0] += p.increments[2 * j];
            w[1] += p.increments[2 * j + 1];
        }
        assert_eq!(p.terminal(), &w);
    }

    #[test]
    fn linear_ode_euler_error() {
        let b = DriftField::linear(1, vec![-1.0]);
        let s = DiffusionSpec::scaled_identity(1, 0.0);
        for steps in [100, 1000, 10_000] {
            let g = grid(steps);
            let p = simulate(&b, &s, &[1.0], 0.0, &BrownianDriver::new(0, 0, 1, g), &g).unwrap();
            let err = (p.terminal()[0] - (-1.0f64).exp()).abs();
            assert!(err <= 2.0 * g.dt(), "steps {steps}: {err}");
        }
    }

    #[test]
    fn constant_drift_is_exact() {
        let b = DriftField::constant(vec![2.0]);
        let s = DiffusionSpec::scaled_identity(1, 0.0);
        let g = TimeGrid::new(0.0, 2.0, 64).unwrap();
        let p = simulate(&b, &s, &[1.0], 0.0, &BrownianDriver::new(0, 0, 1, g), &g).unwrap();
        assert_eq!(p.terminal(), &[5.0]);
    }

    #[test]
    fn blow_up_reports_step() {
        let b = DriftField::linear(1, vec![1e4]);
        let s = DiffusionSpec::identity(1);
        let g = grid(100);
        let err = simulate(&b, &s, &[1.0], 0.0, &BrownianDriver::new(0, 0, 1, g), &g).unwrap_err();
        assert!(matches!(err, FlowError::BlowUp { step, .. } if step > 0 && step < 100));
    }

    #[test]
    fn variation_of_ou() {
        let b = DriftField::linear(1, vec![-1.0]);
        let s = DiffusionSpec::identity(1);
        let g = grid(1000);
        let (_, v) =
            simulate_with_variation(&b, &s, &[0.3], &[1.0], &BrownianDriver::new(1, 0, 1, g), &g)
                .unwrap();
        // product formula (1 + a dt)^steps
        let expected = (1.0f64 - 1e-3).powi(1000);
        assert!((v.eta[1000][0] - expected).abs() < 1e-13);
        assert!((expected - 0.3677).abs() < 1e-4);
    }

    #[test]
    fn variation_trivial_cases() {
        let g = grid(100);
        let drv = BrownianDriver::new(2, 1, 2, g);
        let (_, v) = simulate_with_variation(
            &DriftField::zero(2),
            &DiffusionSpec::identity(2),
            &[0.0, 0.0],
            &[0.5, -2.0],
            &drv,
            &g,
        )
        .unwrap();
        assert!(v.eta.iter().all(|e| e == &[0.5, -2.0]));
        let (_, v) = simulate_with_variation(
            &DriftField::linear(2, vec![-1.0, 0.3, 0.2, -0.5]),
            &DiffusionSpec::sin_perturbed(2, 0.2),
            &[1.0, 0.0],
            &[0.0, 0.0],
            &drv,
            &g,
        )
        .unwrap();
        assert!(v.eta.iter().all(|e| e == &[0.0, 0.0]));
    }

    #[test]
    fn rough_drift_needs_jacobian() {
        let g = grid(10);
        let err = simulate_with_variation(
            &DriftField::holder(1, 0.5, 1.0),
            &DiffusionSpec::identity(1),
            &[0.0],
            &[1.0],
            &BrownianDriver::new(0, 0, 1, g),
            &g,
        )
        .unwrap_err();
        assert!(matches!(err, FlowError::MissingJacobian { .. }));
    }

    #[test]
    fn flow_eval_at_start_is_identity() {
        let g = grid(100);
        let drv = BrownianDriver::new(0, 0, 1, g);
        let b = DriftField::holder(1, 0.5, 1.0);
        let s = DiffusionSpec::identity(1);
        let (a, _) = flow_eval(&b, &s, &[0.7], 0.0, 0.0, 1.0, &drv, &g).unwrap();
        assert_eq!(a, vec![0.7]);
        assert!(flow_eval(&b, &s, &[0.7], 0.0, 0.505, 1.0, &drv, &g).is_err());
    }

    #[test]
    fn brownian_restart_is_bit_exact() {
        let g = grid(200);
        let drv = BrownianDriver::new(5, 3, 1, g);
        let b = DriftField::zero(1);
        let s = DiffusionSpec::identity(1);
        let (_, direct) = flow_eval(&b, &s, &[0.2], 0.0, 0.5, 1.0, &drv, &g).unwrap();
        let composed = flow_compose(&b, &s, &[0.2], 0.0, 0.5, 1.0, &drv, &g).unwrap();
        assert_eq!(direct, composed);
    }
}
