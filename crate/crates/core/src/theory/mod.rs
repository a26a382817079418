//! Analytic confidence lower bounds, discrete step-size conditions and the
//! phase-transition thresholds of the aligned three-component model.

mod bounds;
mod phase;

pub use bounds::{
    asymptotic_diagnostic, cal_f, ddim_confidence_bound, ddpm_confidence_bound,
    discrete_confidence_bound, discrete_two_cluster_bound, entropy_step_condition,
    two_cluster_bound, BoundInputs, ConfidenceBound, StepCheck, StepConditionReport,
    TwoClusterInputs,
};
pub use phase::{
    classify_phase, phase_h, phase_h_derivative, phase_thresholds, Phase, PhaseInputs,
    PhaseThresholds,
};
