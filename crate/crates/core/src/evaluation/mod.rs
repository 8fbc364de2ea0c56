//! Synthetic forecasts, scenario data, forecast scores and the replicated
//! simulation study.

mod plume;
mod scenario;
mod score;
mod study;

pub use plume::{random_plumes, render_plumes, synthetic_plume, synthetic_plume_with, Plume, PlumeConfig};
pub use scenario::{generate, Generation, GroundTruth, Scenario};
pub use score::{crps_pairwise, crps_sorted, score, ObservationScore, ScoreReport};
pub use study::{
    aggregate, derive_seed, fit_and_score, prepare_dataset, region_displacement, run_study, split_times, Dataset,
    Metric, RegionDisplacement, Scores, StudyCell, StudyConfig, StudyResult, StudyRow,
};
