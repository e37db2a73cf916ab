//! Config-driven experiment runner: the five training conditions, grid
//! search and report emission.

mod config;
mod grid;
mod report;
mod run;

pub use config::{
    Candidate, Condition, ExperimentConfig, ModelFamily, DEFAULT_BATCHES, DEFAULT_DELTA,
    DEFAULT_DP_EPOCHS, DEFAULT_DP_GRID, DEFAULT_LRS,
};
pub use grid::{argmax_first, grid_search, GridOutcome};
pub use report::{
    emit_reports, read_results, read_scores, read_trajectory, sort_rows, sort_trajectory, summary_table,
    ReportRow, ScoreTable, TrajectoryRow, RESULTS_FILE, SUMMARY_FILE, TRAJECTORY_FILE,
};
pub use run::{
    accountant_query, output_dir, prepare_sites, run_and_emit, run_condition, ConditionOutput,
    PreparedSite, CENTRAL_SITE,
};
