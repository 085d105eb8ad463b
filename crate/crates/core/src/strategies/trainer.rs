use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::StrategyError;
use crate::losses::{similarity_loss, similarity_value, CenterState, LossConfig};
use crate::net::{EmbeddingNet, ForwardOut};
use crate::rng::ChaCha8Rng;
use crate::tensor::{AdamConfig, AdamState, Graph, OptimError, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.max_epochs == 0 || self.batch_size < 2 {
            return Err(StrategyError::Input(format!(
                "need max_epochs >= 1 and batch_size >= 2, got {} and {}",
                self.max_epochs, self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(StrategyError::Input("Adam settings out of range".into()));
        }
        Ok(())
    }
}

/// One minibatch: images `[N, C, H, W]` or conv features `[N, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Rows that came from a replay generator.
    pub replay_rows: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Self {
        Self {
            inputs,
            labels,
            replay_rows: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Additional loss terms added to the similarity loss of each batch.
pub type ExtraTerm<'a> =
    dyn FnMut(&mut Graph, &EmbeddingNet, &[Var], &ForwardOut, &Batch) -> Result<Option<Var>, StrategyError> + 'a;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    /// Mean validation similarity loss per epoch; `None` when no validation
    /// batch produced a loss.
    pub validation_loss: Vec<Option<f64>>,
    pub steps: usize,
    pub skipped_batches: usize,
    pub fallbacks: usize,
}

impl FitReport {
    pub fn best_validation_loss(&self) -> Option<f64> {
        self.best_epoch.checked_sub(1).and_then(|e| self.validation_loss[e])
    }
}

/// Row indices shuffled and cut into batches of `batch_size` (the last may be short).
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn batches_of(inputs: &Tensor, labels: &[usize], index_batches: &[Vec<usize>]) -> Vec<Batch> {
    index_batches
        .iter()
        .map(|idx| Batch::new(inputs.select_rows(idx), idx.iter().map(|&i| labels[i]).collect()))
        .collect()
}

/// Fixed, unshuffled batches.
pub(crate) fn sequential_batches(inputs: &Tensor, labels: &[usize], batch_size: usize) -> Vec<Batch> {
    let idx: Vec<Vec<usize>> = (0..labels.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    batches_of(inputs, labels, &idx)
}

/// Mean similarity loss over the batches that yield one.
pub fn validation_loss(
    net: &EmbeddingNet,
    centers: Option<&CenterState>,
    loss: &LossConfig,
    batches: &[Batch],
) -> Result<Option<f64>, StrategyError> {
    let mut total = 0.0;
    let mut used = 0usize;
    for b in batches {
        let emb = net.embed(&b.inputs, &b.labels)?;
        let logits = if loss.needs_head() {
            Some(net.logits(&b.inputs)?)
        } else {
            None
        };
        let v = similarity_value(&emb.vectors, logits.as_ref(), &b.labels, loss, centers)?;
        if !v.empty {
            total += v.value;
            used += 1;
        }
    }
    Ok((used > 0).then(|| total / used as f64))
}

/// Minibatch Adam on the similarity loss plus optional extra terms, with
/// early stopping on the validation similarity loss. Parameters (and
/// centres) of the best validation epoch are restored at the end; without
/// any usable validation loss the last epoch is kept.
///
/// Batches whose similarity loss mines nothing are skipped whole, extra
/// terms included.
pub fn fit(
    net: &mut EmbeddingNet,
    mut centers: Option<&mut CenterState>,
    loss: &LossConfig,
    cfg: &TrainConfig,
    epoch_batches: &mut dyn FnMut(usize) -> Result<Vec<Batch>, StrategyError>,
    validation: &[Batch],
    mut extra: Option<&mut ExtraTerm<'_>>,
) -> Result<FitReport, StrategyError> {
    cfg.validate()?;
    let mut adam = AdamState::new(cfg.adam());
    let mut report = FitReport::default();
    let mut best: Option<(f64, Vec<Vec<f64>>, Option<CenterState>)> = None;
    let mut since_best = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let batches = epoch_batches(epoch)?;
        let mut epoch_total = 0.0;
        let mut epoch_used = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let vars = net.bind(&mut g);
            let out = net.forward(&mut g, &vars, &batch.inputs)?;
            let term = similarity_loss(&mut g, &out, &batch.labels, loss, centers.as_deref())?;
            report.fallbacks += term.fallbacks;
            let Some(mut root) = term.loss else {
                report.skipped_batches += 1;
                continue;
            };
            if let Some(extra) = extra.as_mut() {
                if let Some(t) = extra(&mut g, net, &vars, &out, batch)? {
                    root = g.add(root, t)?;
                }
            }
            let value = g.scalar(root);
            if !value.is_finite() {
                return Err(StrategyError::Diverged { epoch, batch: bi });
            }
            g.backward(root)?;
            let embedding = g.value(out.embedding).clone();
            let trainable: Vec<bool> = (0..net.params().len()).map(|i| net.is_trainable(i)).collect();
            let params = net.params_mut();
            params.pull_grads(&g, &vars);
            match adam.step(params.select_mut(|i| trainable[i])) {
                Ok(()) => {}
                Err(OptimError::NonFiniteGradient { .. }) => return Err(StrategyError::Diverged { epoch, batch: bi }),
                Err(e) => return Err(e.into()),
            }
            params.clear_grads();
            if let Some(c) = centers.as_deref_mut() {
                c.update(&embedding, &batch.labels)?;
            }
            epoch_total += value;
            epoch_used += 1;
            report.steps += 1;
        }
        report.epochs_run = epoch;
        report.train_loss.push(if epoch_used > 0 {
            epoch_total / epoch_used as f64
        } else {
            f64::NAN
        });
        let val = validation_loss(net, centers.as_deref(), loss, validation)?;
        report.validation_loss.push(val);
        log::debug!(
            "epoch {epoch}: train {:.5}, validation {val:?}",
            report.train_loss[epoch - 1]
        );
        match val {
            Some(v) if best.as_ref().is_none_or(|(b, _, _)| v < *b) => {
                best = Some((v, net.params().values(), centers.as_deref().cloned()));
                report.best_epoch = epoch;
                since_best = 0;
            }
            _ => {
                since_best += 1;
                if best.is_some() && since_best >= cfg.patience.max(1) {
                    break;
                }
            }
        }
    }
    match best {
        Some((_, values, best_centers)) => {
            net.params_mut().restore(&values);
            if let (Some(c), Some(b)) = (centers, best_centers) {
                *c = b;
            }
        }
        None => report.best_epoch = report.epochs_run,
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::net::{ConvActivation, NetConfig};
    use crate::rng;
    use rand::Rng;

    fn blobs(n_per: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per {
                for d in 0..512 {
                    let centre = if d % classes == c { 0.8 } else { 0.2 };
                    data.push(centre + r.random_range(-0.1..0.1));
                }
                labels.push(c);
            }
        }
        (Tensor::new(&[n_per * classes, 512], data).unwrap(), labels)
    }

    #[test]
    fn best_epoch_has_lowest_validation_loss() {
        let mut net = EmbeddingNet::new(NetConfig::mnist(ConvActivation::Sigmoid), 1).unwrap();
        let (x, y) = blobs(20, 3, 2);
        let (vx, vy) = blobs(8, 3, 3);
        let validation = sequential_batches(&vx, &vy, 24);
        let cfg = TrainConfig {
            max_epochs: 6,
            patience: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let loss = LossConfig::with_kind(LossKind::Triplet);
        let mut r = rng::seeded(4);
        let mut batches = |_| Ok(batches_of(&x, &y, &shuffled_batches(y.len(), 16, &mut r)));
        let rep = fit(&mut net, None, &loss, &cfg, &mut batches, &validation, None).unwrap();
        assert_eq!(rep.skipped_batches, 0);
        let best = rep.best_validation_loss().unwrap();
        assert!(rep.validation_loss.iter().flatten().all(|&v| best <= v));
        let now = validation_loss(&net, None, &loss, &validation).unwrap().unwrap();
        assert_eq!(now, best);
    }

    #[test]
    fn diverging_loss_is_reported() {
        let mut net = EmbeddingNet::new(NetConfig::mnist(ConvActivation::Sigmoid), 1).unwrap();
        let (x, y) = blobs(4, 2, 2);
        let loss = LossConfig::with_kind(LossKind::Contrastive);
        let mut batches = |_| Ok(vec![Batch::new(x.clone(), y.clone())]);
        let mut poison = |g: &mut Graph, _: &EmbeddingNet, _: &[Var], _: &ForwardOut, _: &Batch| {
            Ok(Some(g.constant(Tensor::scalar(f64::NAN))))
        };
        let err = fit(
            &mut net,
            None,
            &loss,
            &TrainConfig::default(),
            &mut batches,
            &[],
            Some(&mut poison),
        );
        assert!(matches!(err, Err(StrategyError::Diverged { epoch: 1, batch: 0 })));
    }
}
