//! Numerical verification: gradient checks, scan equivalence and a
//! reference interpreter for the selective scan.

mod gradcheck;
mod reference;
mod scancheck;

pub use gradcheck::{
    check_op, check_params, gradcheck_model_config, model_check, op_suite, relative_error, GradReport, Sampling,
    FALLBACK_STEPS, FLOOR, STEP, TOLERANCE,
};
pub use reference::{compile, reference_selective_scan, Program};
pub use scancheck::{
    constant_projection, lti_equivalence, normwise_error, scancheck, selective_oracle, CheckReport, LTI_LENGTHS,
    LTI_TOLERANCE, SELECTIVE_TOLERANCE,
};
