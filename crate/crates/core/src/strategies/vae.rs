//! Per-class VAEs over frozen conv features, used as a latent replay source.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::StrategyError;
use crate::losses::vae_loss;
use crate::net::{Checkpoint, Dense, Descriptor, NetError, ParamSet};
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};

const HIDDEN: usize = 256;
const LATENT: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.max_epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(StrategyError::Input(
                "vae: epochs, batch size and learning rate must be positive".into(),
            ));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(StrategyError::Input(format!(
                "vae holdout fraction {} must lie in (0, 1)",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// Encoder `F -> 256 -> 128` with 128-wide mean and log-variance heads,
/// decoder `128 -> 256 -> F` with a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassVae {
    pub class: usize,
    pub seed: u64,
    params: ParamSet,
    layers: [Dense; 6],
}

struct Pass {
    recon: Var,
    mu: Var,
    log_var: Var,
}

impl ClassVae {
    pub fn new(class: usize, width: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "class-vae-init");
        let mut params = ParamSet::new();
        let layers = [
            Dense::new(&mut params, "enc1", width, HIDDEN, &mut r),
            Dense::new(&mut params, "enc2", HIDDEN, LATENT, &mut r),
            Dense::new(&mut params, "mu", LATENT, LATENT, &mut r),
            Dense::new(&mut params, "log_var", LATENT, LATENT, &mut r),
            Dense::new(&mut params, "dec1", LATENT, HIDDEN, &mut r),
            Dense::new(&mut params, "dec2", HIDDEN, width, &mut r),
        ];
        Self {
            class,
            seed,
            params,
            layers,
        }
    }

    pub fn width(&self) -> usize {
        self.params.tensor(0).shape()[0]
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn decode(&self, g: &mut Graph, vars: &[Var], z: Var) -> Result<Var, StrategyError> {
        let h = self.layers[4].forward(g, vars, z)?;
        let h = g.relu(h);
        let out = self.layers[5].forward(g, vars, h)?;
        Ok(g.sigmoid(out))
    }

    /// `noise = None` decodes the posterior mean.
    fn pass(&self, g: &mut Graph, vars: &[Var], x: &Tensor, noise: Option<Tensor>) -> Result<Pass, StrategyError> {
        let x = g.constant(x.clone());
        let h = self.layers[0].forward(g, vars, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, vars, h)?;
        let h = g.relu(h);
        let mu = self.layers[2].forward(g, vars, h)?;
        let log_var = self.layers[3].forward(g, vars, h)?;
        let z = match noise {
            Some(eps) => {
                let half = g.scale(log_var, 0.5);
                let std = g.exp(half);
                let eps = g.constant(eps);
                let spread = g.mul(std, eps)?;
                g.add(mu, spread)?
            }
            None => mu,
        };
        let recon = self.decode(g, vars, z)?;
        Ok(Pass { recon, mu, log_var })
    }

    fn check(&self, x: &Tensor) -> Result<(), StrategyError> {
        if x.rank() != 2 || x.row_len() != self.width() {
            return Err(StrategyError::Input(format!(
                "vae expects [N, {}] features, got {:?}",
                self.width(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Mean per-item reconstruction BCE of the posterior-mean decoding.
    pub fn reconstruction_bce(&self, x: &Tensor) -> Result<f64, StrategyError> {
        self.check(x)?;
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, |_| false);
        let p = self.pass(&mut g, &vars, x, None)?;
        let v = vae_loss(g.value(p.recon), x, g.value(p.mu), g.value(p.log_var))?;
        Ok(v.bce)
    }

    /// Decodes `n` latents drawn from the standard normal.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor, StrategyError> {
        let z: Vec<f64> = (0..n * LATENT).map(|_| StandardNormal.sample(rng)).collect();
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, |_| false);
        let z = g.constant(Tensor::new(&[n, LATENT], z)?);
        let out = self.decode(&mut g, &vars, z)?;
        Ok(g.value(out).clone())
    }

    fn train_step(&mut self, adam: &mut AdamState, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<f64, StrategyError> {
        let eps: Vec<f64> = (0..x.rows() * LATENT).map(|_| StandardNormal.sample(rng)).collect();
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, |_| true);
        let p = self.pass(&mut g, &vars, x, Some(Tensor::new(&[x.rows(), LATENT], eps)?))?;
        let v = vae_loss(g.value(p.recon), x, g.value(p.mu), g.value(p.log_var))?;
        let root = g.custom_scalar(
            &[p.recon, p.mu, p.log_var],
            v.value,
            vec![v.grad_reconstruction, v.grad_mu, v.grad_log_var],
        )?;
        g.backward(root)?;
        self.params.pull_grads(&g, &vars);
        adam.step(self.params.select_mut(|_| true))?;
        self.params.clear_grads();
        Ok(v.value)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut descriptor = Descriptor::new();
        descriptor.insert("kind".into(), "class_vae".into());
        descriptor.insert("class".into(), self.class.to_string());
        descriptor.insert("width".into(), self.width().to_string());
        descriptor.insert("seed".into(), self.seed.to_string());
        Checkpoint {
            descriptor,
            tensors: self.params.entries().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, StrategyError> {
        if ck.field("kind")? != "class_vae" {
            return Err(NetError::Config("checkpoint is not a class_vae".into()).into());
        }
        let mut vae = Self::new(
            ck.parse_field("class")?,
            ck.parse_field("width")?,
            ck.parse_field("seed")?,
        );
        for (name, t) in vae.params.entries_mut() {
            let stored = ck.require(name)?;
            if stored.shape() != t.shape() {
                return Err(NetError::Config(format!("vae tensor `{name}` has shape {:?}", stored.shape())).into());
            }
            t.data_mut().copy_from_slice(stored.data());
        }
        Ok(vae)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeFitReport {
    pub epochs_run: usize,
    pub initial_holdout_bce: f64,
    pub final_holdout_bce: f64,
}

/// Trains a VAE on the conv features of one class. A `holdout_fraction`
/// share of the rows drives early stopping on reconstruction BCE.
pub fn fit_class_vae(
    class: usize,
    features: &Tensor,
    cfg: &VaeConfig,
    seed: u64,
) -> Result<(ClassVae, VaeFitReport), StrategyError> {
    cfg.validate()?;
    let n = features.rows();
    if features.rank() != 2 || n < 2 {
        return Err(StrategyError::Input(format!(
            "class {class}: need at least two feature rows, got {:?}",
            features.shape()
        )));
    }
    if let Some(v) = features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(StrategyError::Input(format!(
            "class {class}: feature value {v} outside [0, 1]; VAE replay needs sigmoid conv features"
        )));
    }
    let seed = rng::derive_seed(seed, class as u64);
    let mut r = rng::stream(seed, "class-vae-train");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let held = ((cfg.holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let holdout = features.select_rows(&order[..held]);
    let train_rows = order[held..].to_vec();

    let mut vae = ClassVae::new(class, features.row_len(), seed);
    let initial = vae.reconstruction_bce(&holdout)?;
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut best = (initial, vae.params.values());
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut rows = train_rows.clone();
        rows.shuffle(&mut r);
        for chunk in rows.chunks(cfg.batch_size) {
            let v = vae.train_step(&mut adam, &features.select_rows(chunk), &mut r)?;
            if !v.is_finite() {
                return Err(StrategyError::AuxDiverged {
                    what: "class VAE",
                    epoch,
                });
            }
        }
        epochs_run = epoch;
        let bce = vae.reconstruction_bce(&holdout)?;
        if bce < best.0 {
            best = (bce, vae.params.values());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }
    vae.params.restore(&best.1);
    log::debug!(
        "class {class} vae: holdout bce {initial:.3} -> {:.3} in {epochs_run} epochs",
        best.0
    );
    Ok((
        vae,
        VaeFitReport {
            epochs_run,
            initial_holdout_bce: initial,
            final_holdout_bce: best.0,
        },
    ))
}

/// Decoded replay features with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// The store held no VAE.
    pub empty: bool,
}

/// `per_class` decoded samples from every VAE, in ascending class order.
pub fn sample_replay_features<'a>(
    vaes: impl IntoIterator<Item = &'a ClassVae>,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ReplayBatch, StrategyError> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for vae in vaes {
        parts.push(vae.sample(per_class, rng)?);
        labels.extend(std::iter::repeat_n(vae.class, per_class));
        width = Some(vae.width());
    }
    let Some(width) = width else {
        return Ok(ReplayBatch {
            features: Tensor::zeros(&[0, 0]),
            labels,
            empty: true,
        });
    };
    let refs: Vec<&Tensor> = parts.iter().collect();
    let features = if labels.is_empty() {
        Tensor::zeros(&[0, width])
    } else {
        Tensor::concat_rows(&refs)?
    };
    Ok(ReplayBatch {
        features,
        labels,
        empty: false,
    })
}
