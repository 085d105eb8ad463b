//! Undercomplete autoencoders on conv features for encoder-based lifelong
//! learning. Training minimises a weighted `MSE(r(F), F)` plus the similarity
//! loss of the reconstructions passed through the frozen fully connected
//! layers.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::StrategyError;
use crate::losses::{similarity_loss, CodeActivation, CodeEncoder, LossConfig};
use crate::net::{Checkpoint, Dense, Descriptor, EmbeddingNet, NetError, ParamSet};
use crate::rng;
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub code_width: usize,
    /// Weight of the reconstruction error against the similarity loss.
    pub reconstruction_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            code_width: 128,
            reconstruction_weight: 1.0,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.code_width == 0
            || self.epochs == 0
            || self.batch_size < 2
            || !(self.learning_rate > 0.0)
            || !(self.reconstruction_weight >= 0.0)
        {
            return Err(StrategyError::Input(
                "autoencoder settings must be positive (batch size >= 2)".into(),
            ));
        }
        Ok(())
    }
}

/// Sigmoid encoder `F -> C`, linear decoder `C -> F`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAutoencoder {
    pub seed: u64,
    params: ParamSet,
    encoder: Dense,
    decoder: Dense,
}

impl FeatureAutoencoder {
    pub fn new(width: usize, code_width: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "feature-autoencoder-init");
        let mut params = ParamSet::new();
        let encoder = Dense::new(&mut params, "encoder", width, code_width, &mut r);
        let decoder = Dense::new(&mut params, "decoder", code_width, width, &mut r);
        Self {
            seed,
            params,
            encoder,
            decoder,
        }
    }

    pub fn width(&self) -> usize {
        self.params.tensor(self.encoder.weight).shape()[0]
    }

    pub fn code_width(&self) -> usize {
        self.params.tensor(self.encoder.weight).shape()[1]
    }

    /// The frozen encoder used by the code constraint.
    pub fn code_encoder(&self) -> CodeEncoder {
        CodeEncoder {
            weight: self.params.tensor(self.encoder.weight).clone(),
            bias: self.params.tensor(self.encoder.bias).clone(),
            activation: CodeActivation::Sigmoid,
        }
    }

    fn reconstruct(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, StrategyError> {
        let code = self.encoder.forward(g, vars, x)?;
        let code = g.sigmoid(code);
        Ok(self.decoder.forward(g, vars, code)?)
    }

    /// Mean squared reconstruction error.
    pub fn reconstruction_mse(&self, features: &Tensor) -> Result<f64, StrategyError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, |_| false);
        let x = g.constant(features.clone());
        let r = self.reconstruct(&mut g, &vars, x)?;
        let d = g.sub(r, x)?;
        let sq = g.mul(d, d)?;
        let m = g.mean(sq);
        Ok(g.scalar(m))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut descriptor = Descriptor::new();
        descriptor.insert("kind".into(), "feature_autoencoder".into());
        descriptor.insert("width".into(), self.width().to_string());
        descriptor.insert("code_width".into(), self.code_width().to_string());
        descriptor.insert("seed".into(), self.seed.to_string());
        Checkpoint {
            descriptor,
            tensors: self.params.entries().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, StrategyError> {
        if ck.field("kind")? != "feature_autoencoder" {
            return Err(NetError::Config("checkpoint is not a feature_autoencoder".into()).into());
        }
        let mut ae = Self::new(
            ck.parse_field("width")?,
            ck.parse_field("code_width")?,
            ck.parse_field("seed")?,
        );
        for (name, t) in ae.params.entries_mut() {
            let stored = ck.require(name)?;
            if stored.shape() != t.shape() {
                return Err(
                    NetError::Config(format!("autoencoder tensor `{name}` has shape {:?}", stored.shape())).into(),
                );
            }
            t.data_mut().copy_from_slice(stored.data());
        }
        Ok(ae)
    }

    /// Fits a fresh autoencoder to `features` (conv outputs of `net`).
    pub fn fit(
        net: &EmbeddingNet,
        features: &Tensor,
        labels: &[usize],
        loss: &LossConfig,
        cfg: &AutoencoderConfig,
        seed: u64,
    ) -> Result<Self, StrategyError> {
        cfg.validate()?;
        let mut ae = Self::new(features.row_len(), cfg.code_width, seed);
        let mut r = rng::stream(seed, "feature-autoencoder-train");
        let mut adam = AdamState::new(AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        });
        let mut rows: Vec<usize> = (0..labels.len()).collect();
        for epoch in 1..=cfg.epochs {
            rows.shuffle(&mut r);
            let mut total = 0.0;
            for chunk in rows.chunks(cfg.batch_size) {
                let x = features.select_rows(chunk);
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let mut g = Graph::new();
                let vars = ae.params.bind(&mut g, |_| true);
                let net_vars = net.params().bind(&mut g, |_| false);
                let xv = g.constant(x);
                let recon = ae.reconstruct(&mut g, &vars, xv)?;
                let d = g.sub(recon, xv)?;
                let sq = g.mul(d, d)?;
                let mse = g.mean(sq);
                let mut root = g.scale(mse, cfg.reconstruction_weight);
                let (embedding, logits) = net.forward_head(&mut g, &net_vars, recon)?;
                let out = crate::net::ForwardOut {
                    features: recon,
                    embedding,
                    logits,
                };
                // centre loss needs live centres; the reconstruction term alone drives it
                if !loss.needs_head() {
                    if let Some(s) = similarity_loss(&mut g, &out, &y, loss, None)?.loss {
                        root = g.add(root, s)?;
                    }
                }
                let v = g.scalar(root);
                if !v.is_finite() {
                    return Err(StrategyError::AuxDiverged {
                        what: "feature autoencoder",
                        epoch,
                    });
                }
                total += v;
                g.backward(root)?;
                ae.params.pull_grads(&g, &vars);
                adam.step(ae.params.select_mut(|_| true))?;
                ae.params.clear_grads();
            }
            log::debug!("autoencoder epoch {epoch}: loss sum {total:.5}");
        }
        Ok(ae)
    }
}
