//! Data ingestion, synthetic tasks, experiment configs and end-to-end runs.

mod config;
mod ingest;
mod run;
mod synthetic;
mod tasks;

pub use config::{
    seed_from_env, CalibrationSpec, DataSpec, DistillationSpec, ExperimentConfig, LargeSpec, ObjectiveSpec, PolicySpec,
    PromptModeSpec, PromptingSpec, ReportSpec, SmallSpec, SplitName, SEED_ENV,
};
pub use ingest::{ingest, read_csv, read_jsonl, write_csv, write_dataset, write_jsonl, RecordFormat};
pub use run::{
    build_large, calibrate_experiment, create_run_dir, execute_run, load_splits, plan_experiment, route_input,
    run_experiment, run_experiment_into, RunArtifacts, RunSummary, Splits, LEARNABLE_NAME,
};
pub use synthetic::{generate_synthetic, largest_remainder, SyntheticTaskSpec};
pub use tasks::{
    build_two_cluster, dominance_config, dominance_toml, pt_fixture, PtFixture, TwoClusterResult, TwoClusterSpec,
    TwoClusterTask,
};
