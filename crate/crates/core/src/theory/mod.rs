//! Executable checks of the routing interference bound and of the
//! consolidation fixed point, plus the finite-difference gradient oracle.

mod consolidation;
mod gradcheck;
mod interference;

pub use consolidation::{
    consolidation_fixed_point, consolidation_recursion_check, log_linear_slope, routed_delta, ConsolidationTrace,
    InputDistribution, RecursionSettings,
};
pub use gradcheck::{
    check_gradients, finite_diff_gradient, LeafCheck, Tolerance, DEFAULT_EPSILON, SECONDARY_EPSILON,
};
pub use interference::{
    beta, check_decomposition, check_interference_bound, cross_task_j, linear_model_record, per_head_s,
    residual_target, InterferenceReport, TaskGradientRecord,
};
