//! Incremental training strategies: plain fine-tuning, EWC, EBLL, iCaRL
//! with angle distillation, and VAE latent replay on frozen conv features.

mod autoencoder;
mod exemplars;
mod sessions;
mod trainer;
mod vae;

pub use autoencoder::{AutoencoderConfig, FeatureAutoencoder};
pub use exemplars::{select_exemplars, ExemplarSelection, ExemplarStore, StoreEntry, StoreMode};
pub use sessions::{
    fit_base_autoencoder, fit_session_autoencoder, initial_fisher, populate_exemplars, populate_vaes, train_base,
    train_ebll_session, train_ewc_session, train_icarl_session, train_normal_session, train_vae_replay_session,
    update_exemplars, Learner, SessionContext, SessionData,
};
pub use trainer::{fit, shuffled_batches, validation_loss, Batch, ExtraTerm, FitReport, TrainConfig};
pub use vae::{fit_class_vae, sample_replay_features, ClassVae, ReplayBatch, VaeConfig, VaeFitReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::losses::LossError;
use crate::net::{CheckpointError, NetError};
use crate::tensor::{OptimError, TensorError};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("{what} diverged: non-finite loss at epoch {epoch}")]
    AuxDiverged { what: &'static str, epoch: usize },
    #[error("refused: {0}")]
    Refused(String),
    #[error("invalid strategy input: {0}")]
    Input(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Normal,
    Ewc,
    Ebll,
    Icarl,
    Vae,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Normal,
        StrategyKind::Ewc,
        StrategyKind::Ebll,
        StrategyKind::Icarl,
        StrategyKind::Vae,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Normal => "normal",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Ebll => "ebll",
            StrategyKind::Icarl => "icarl",
            StrategyKind::Vae => "vae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Whether the strategy sees a previously learned class's real data in
    /// each session. The exemplar and replay strategies use their store.
    pub fn uses_paired_class(self) -> bool {
        matches!(self, StrategyKind::Normal | StrategyKind::Ewc | StrategyKind::Ebll)
    }

    /// VAE replay needs conv features in (0, 1).
    pub fn conv_activation(self) -> crate::net::ConvActivation {
        match self {
            StrategyKind::Vae => crate::net::ConvActivation::Sigmoid,
            _ => crate::net::ConvActivation::Relu,
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Constants of the retention machinery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyParams {
    pub lambda_ewc: f64,
    /// Batches of session data used for each Fisher estimate (0 = all).
    pub fisher_batches: usize,
    pub lambda_ae: f64,
    pub lambda_distill: f64,
    pub kd_temperature: f64,
    pub exemplar_budget: usize,
    pub autoencoder: AutoencoderConfig,
    pub vae: VaeConfig,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            lambda_ewc: 150.0,
            fisher_batches: 0,
            lambda_ae: 1.0,
            lambda_distill: 1.0,
            kd_temperature: 2.0,
            exemplar_budget: 200,
            autoencoder: AutoencoderConfig::default(),
            vae: VaeConfig::default(),
        }
    }
}

impl StrategyParams {
    pub fn validate(&self) -> Result<(), StrategyError> {
        for (name, v) in [
            ("lambda_ewc", self.lambda_ewc),
            ("lambda_ae", self.lambda_ae),
            ("lambda_distill", self.lambda_distill),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(StrategyError::Input(format!(
                    "{name} must be a nonnegative number, got {v}"
                )));
            }
        }
        if !(self.kd_temperature > 0.0) {
            return Err(StrategyError::Input(format!(
                "kd_temperature must be positive, got {}",
                self.kd_temperature
            )));
        }
        if self.exemplar_budget == 0 {
            return Err(StrategyError::Input("exemplar_budget must be at least 1".into()));
        }
        self.autoencoder.validate()?;
        self.vae.validate()
    }
}

#[cfg(test)]
mod tests;
