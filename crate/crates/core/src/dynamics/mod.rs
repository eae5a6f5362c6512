//! Diagnostics over latent trajectories.

mod pca;
mod spectral;
mod stats;

pub use pca::{pca_project, pca_states, PcaResult};
pub use spectral::{
    estimate_spectral_radius, estimate_spectral_radius_batch, normalize_chunks, power_iteration, random_directions,
    PowerIteration, SpectralProbe, NORM_GUARD,
};
pub use stats::{
    convergence_report, max_token_norm_deviation, mean_token_norm, trajectory_stats, ConvergenceReport, Thresholds,
    Verdict,
};
