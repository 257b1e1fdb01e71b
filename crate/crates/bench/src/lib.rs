//! Benchmark fixtures shared by the criterion targets.

use sdeflow_core::paths::TimeGrid;
use sdeflow_core::resolvent::ResolventConfig;
use sdeflow_core::zvonkin::{TransformConfig, ZvonkinTransform};
use sdeflow_core::{DiffusionSpec, DriftField};

pub fn rough_drift() -> DriftField {
    DriftField::holder(1, 0.5, 1.0)
}

pub fn unit_grid(dt: f64) -> TimeGrid {
    TimeGrid::with_dt(0.0, 1.0, dt).expect("aligned grid")
}

/// Cached transform of `|x|^0.5` at a small resolvent budget.
pub fn rough_transform() -> ZvonkinTransform {
    let mut tc = TransformConfig::new(ResolventConfig::new(2.0, 1e-2, 100).antithetic(true));
    tc.cache_spacing = 0.5;
    ZvonkinTransform::build(&rough_drift(), &DiffusionSpec::identity(1), &tc, 1)
        .expect("transform builds")
}
