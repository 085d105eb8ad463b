//! Experiment configuration, the sessioned protocol runner and reporting.

mod config;
mod report;
mod run;

pub use config::{DatasetConfig, ExperimentConfig, IdealValues, Pairing};
pub use report::{
    base_curve_svg, emit_report, omega_csv, parse_sessions_csv, sessions_csv, single, ReportFiles, SessionRow,
    CSV_HEADER, OMEGA_HEADER,
};
pub use run::{
    base_model, base_models, collect_runs, evaluate, ideals_for, learner_checkpoint, learner_from_checkpoint,
    load_dataset, load_ideals, prepare_data, reevaluate, run_base, run_experiment, run_ideals, run_incremental,
    run_offline_ideal, run_strategy, save_ideals, seed_dir, session_plan, strategy_dir, train_base_model, BaseModel,
    Ideals, PreparedData, RunArtifacts, StrategyRun, FAILURE_MARKER,
};

use thiserror::Error;

use crate::data::DataError;
use crate::eval::EvalError;
use crate::net::{CheckpointError, NetError};
use crate::strategies::StrategyError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("seed {seed}, {stage} session {session}: {source}")]
    Training {
        seed: u64,
        stage: String,
        session: usize,
        #[source]
        source: StrategyError,
    },
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub(crate) fn training(seed: u64, stage: &str, session: usize, source: StrategyError) -> Self {
        HarnessError::Training {
            seed,
            stage: stage.into(),
            session,
            source,
        }
    }

    /// Process exit code: 1 config, 2 training abort, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Training { .. } | HarnessError::Eval(_) | HarnessError::Net(_) => 2,
            HarnessError::Io { .. } | HarnessError::Checkpoint(_) | HarnessError::Data(DataError::Io { .. }) => 3,
            HarnessError::Data(_) => 1,
        }
    }
}
