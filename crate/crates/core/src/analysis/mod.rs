//! Straightness and endpoint metrics, two-sample testing, Monte Carlo
//! checks on interpolation paths, and the comparison experiments.

mod experiments;
mod straightness;
mod theory;
mod two_sample;

pub use experiments::{
    ablation_configs, ablation_table, coupling_reuse_experiment, format_ablation_table, generation_distance,
    marginal_preservation_check, model_initial_states, AblationRow, MarginalCheck, ReuseExperimentConfig, ReuseRow,
};
pub use straightness::{endpoint_gap, model_endpoint_gap, nfss, StraightnessReport};
pub use theory::{
    continuous_min_distance, crossing_probability_estimate, crossing_probability_estimate_with,
    independent_gap_ratio, log_frequency_slope, pair_distances, shifted_gaussian, velocity_state_gap_check,
    CrossingEstimate, CrossingThreshold, Segment, VelocityStateGap,
};
pub use two_sample::{energy_distance, energy_distance_statistic, TwoSampleReport};
