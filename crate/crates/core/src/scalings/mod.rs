//! Named hyper-parameter schemes, automatic scaling, zero-output
//! initialization, property sweeps and invariance checks.

pub mod autoscale;
pub mod invariance;
pub mod properties;
pub mod schemes;

pub use autoscale::{
    fsc_autoscale, fsc_autoscale_with, zero_output_init, zero_output_step, AutoscaleOptions, AutoscaleOutcome,
    ZeroOutputInit, ZeroOutputStep,
};
pub use invariance::{random_unit_product_scales, reparam_invariance, rescaling_invariance, LrRule};
pub use properties::{property_sweep, BetaRule, Family, Property, PropertyReport, SweepConfig};
pub use schemes::{named_scheme, NamedScheme, SchemeName};
