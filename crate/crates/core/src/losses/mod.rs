//! Similarity losses, distillation terms, the VAE objective, EWC and EBLL
//! penalties, and the online miners that feed the similarity losses.
//!
//! The loss kernels are plain functions returning a value and an analytic
//! gradient; [`similarity_loss`] and the `*_term` helpers splice them into a
//! [`Graph`] as fused scalar nodes.

mod distill;
mod ebll;
mod ewc;
mod metric;
mod miners;
mod vae;

pub use distill::{angle_distill_loss, huber, kd_distill_loss, DistillValue};
pub use ebll::{ebll_code_loss, ebll_code_term, CodeActivation, CodeEncoder};
pub use ewc::{compute_fisher_diagonal, ewc_penalty, ewc_term, fisher_from_gradients, FisherDiag, FisherEstimate};
pub use metric::{angular_loss, center_softmax_loss, contrastive_loss, triplet_loss, CenterLossValue, CenterState};
pub use miners::{distance_matrix, mine_angular, mine_pair_margin, mine_semi_hard, triplet_angle};
pub use vae::{vae_loss, VaeLossValue};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{ForwardOut, NetError};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("label {label} outside the {classes} known classes")]
    Label { label: usize, classes: usize },
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("target value {0} outside [0, 1]")]
    Target(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Mined `(anchor, positive, negative)` triples, sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletIndexSet {
    pub triples: Vec<(usize, usize, usize)>,
    /// Anchor/positive pairs served by the hardest-negative fallback.
    pub fallbacks: usize,
}

impl TripletIndexSet {
    pub fn new(triples: Vec<(usize, usize, usize)>) -> Self {
        Self { triples, fallbacks: 0 }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, (usize, usize, usize)> {
        self.triples.iter()
    }

    pub fn as_slice(&self) -> &[(usize, usize, usize)] {
        &self.triples
    }

    /// Checks the label invariants against `labels`.
    pub fn is_valid(&self, labels: &[usize]) -> bool {
        self.triples.iter().all(|&(a, p, n)| {
            a != p
                && a < labels.len()
                && p < labels.len()
                && n < labels.len()
                && labels[a] == labels[p]
                && labels[a] != labels[n]
        })
    }
}

/// Mined pairs `(i, j)` with `i < j`, sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairIndexSet {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

impl PairIndexSet {
    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss value with the gradient w.r.t. the embedding rows. `empty` marks a
/// batch that produced no pairs or triples; its value is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
    pub empty: bool,
}

impl LossValue {
    pub(crate) fn new(value: f64, grad: Vec<f64>) -> Self {
        Self {
            value,
            grad,
            empty: false,
        }
    }

    pub(crate) fn empty(grad: Vec<f64>) -> Self {
        Self {
            value: 0.0,
            grad,
            empty: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Contrastive,
    Angular,
    Center,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Triplet,
        LossKind::Contrastive,
        LossKind::Angular,
        LossKind::Center,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Contrastive => "contrastive",
            LossKind::Angular => "angular",
            LossKind::Center => "center",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Loss choice with its miner and loss constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub triplet_margin: f64,
    pub contrastive_margin: f64,
    /// Positive pairs closer than this fraction of the contrastive margin are not mined.
    pub pos_threshold_fraction: f64,
    pub angular_alpha_degrees: f64,
    pub center_lambda: f64,
    pub center_lr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Contrastive,
            triplet_margin: 1.25,
            contrastive_margin: 1.0,
            pos_threshold_fraction: 0.2,
            angular_alpha_degrees: 45.0,
            center_lambda: 1.0,
            center_lr: 0.5,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let positive = [
            ("triplet_margin", self.triplet_margin),
            ("contrastive_margin", self.contrastive_margin),
            ("center_lr", self.center_lr),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(LossError::Param(format!("{name} must be positive, got {v}")));
        }
        if !(0.0..1.0).contains(&self.pos_threshold_fraction) {
            return Err(LossError::Param(format!(
                "pos_threshold_fraction must lie in [0, 1), got {}",
                self.pos_threshold_fraction
            )));
        }
        if !(self.angular_alpha_degrees > 0.0 && self.angular_alpha_degrees < 90.0) {
            return Err(LossError::Param(format!(
                "angular_alpha_degrees must lie in (0, 90), got {}",
                self.angular_alpha_degrees
            )));
        }
        if !(self.center_lambda >= 0.0) {
            return Err(LossError::Param(format!(
                "center_lambda must be nonnegative, got {}",
                self.center_lambda
            )));
        }
        Ok(())
    }

    pub fn needs_head(&self) -> bool {
        self.kind == LossKind::Center
    }
}

/// Value, gradients and mining statistics of one similarity-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityValue {
    pub value: f64,
    pub grad_embedding: Vec<f64>,
    pub grad_logits: Option<Vec<f64>>,
    /// Number of mined pairs or triples (batch size for centre loss).
    pub mined: usize,
    pub fallbacks: usize,
    pub empty: bool,
}

/// Mines the batch and evaluates the configured loss.
pub fn similarity_value(
    embeddings: &Tensor,
    logits: Option<&Tensor>,
    labels: &[usize],
    cfg: &LossConfig,
    centers: Option<&CenterState>,
) -> Result<SimilarityValue, LossError> {
    let plain = |v: LossValue, mined: usize, fallbacks: usize| SimilarityValue {
        value: v.value,
        grad_embedding: v.grad,
        grad_logits: None,
        mined,
        fallbacks,
        empty: v.empty,
    };
    match cfg.kind {
        LossKind::Triplet => {
            let t = mine_semi_hard(embeddings, labels, cfg.triplet_margin)?;
            let v = triplet_loss(embeddings, &t, cfg.triplet_margin)?;
            Ok(plain(v, t.len(), t.fallbacks))
        }
        LossKind::Contrastive => {
            let m = cfg.contrastive_margin;
            let p = mine_pair_margin(embeddings, labels, cfg.pos_threshold_fraction * m, m)?;
            let v = contrastive_loss(embeddings, &p, m)?;
            Ok(plain(v, p.len(), 0))
        }
        LossKind::Angular => {
            let t = mine_angular(embeddings, labels, cfg.angular_alpha_degrees)?;
            let v = angular_loss(embeddings, &t, cfg.angular_alpha_degrees)?;
            Ok(plain(v, t.len(), 0))
        }
        LossKind::Center => {
            let logits = logits.ok_or_else(|| LossError::Param("centre loss needs classifier logits".into()))?;
            let state = centers.ok_or_else(|| LossError::Param("centre loss needs a centre state".into()))?;
            let v = center_softmax_loss(embeddings, logits, labels, state)?;
            Ok(SimilarityValue {
                value: v.value,
                grad_embedding: v.grad_features,
                grad_logits: Some(v.grad_logits),
                mined: labels.len(),
                fallbacks: 0,
                empty: labels.is_empty(),
            })
        }
    }
}

/// Graph node for the similarity loss of a forward pass, or `None` when the
/// batch yields nothing to learn from.
#[derive(Clone, Debug)]
pub struct SimilarityTerm {
    pub loss: Option<Var>,
    pub value: f64,
    pub mined: usize,
    pub fallbacks: usize,
}

pub fn similarity_loss(
    g: &mut Graph,
    out: &ForwardOut,
    labels: &[usize],
    cfg: &LossConfig,
    centers: Option<&CenterState>,
) -> Result<SimilarityTerm, LossError> {
    let logits = out.logits.map(|l| g.value(l).clone());
    let v = similarity_value(g.value(out.embedding), logits.as_ref(), labels, cfg, centers)?;
    if v.empty {
        log::debug!("{} loss: batch of {} mined nothing", cfg.kind, labels.len());
        return Ok(SimilarityTerm {
            loss: None,
            value: 0.0,
            mined: 0,
            fallbacks: v.fallbacks,
        });
    }
    let loss = match v.grad_logits {
        Some(gl) => g.custom_scalar(
            &[out.embedding, out.logits.expect("checked")],
            v.value,
            vec![v.grad_embedding, gl],
        )?,
        None => g.custom_scalar(&[out.embedding], v.value, vec![v.grad_embedding])?,
    };
    Ok(SimilarityTerm {
        loss: Some(loss),
        value: v.value,
        mined: v.mined,
        fallbacks: v.fallbacks,
    })
}

/// Angle distillation of student embedding rows `rows` against `teacher`
/// (one teacher row per selected row). All rows take part when `rows` is
/// `None`. Returns `None` when no angle instance survives.
pub fn angle_distill_term(
    g: &mut Graph,
    student: Var,
    rows: Option<&[usize]>,
    teacher: &Tensor,
) -> Result<Option<Var>, LossError> {
    let full = g.value(student);
    let dim = full.row_len();
    let (picked, v) = match rows {
        Some(rows) => {
            let v = angle_distill_loss(teacher, &full.select_rows(rows))?;
            (rows.to_vec(), v)
        }
        None => ((0..full.rows()).collect(), angle_distill_loss(teacher, full)?),
    };
    if v.angles == 0 {
        return Ok(None);
    }
    let mut grad = vec![0.0; full.numel()];
    for (k, &r) in picked.iter().enumerate() {
        for d in 0..dim {
            grad[r * dim + d] += v.grad[k * dim + d];
        }
    }
    Ok(Some(g.custom_scalar(&[student], v.value, vec![grad])?))
}

/// Softened logit distillation of student logit rows `rows` (all rows when
/// `None`) against `teacher_logits`, one teacher row per selected row.
pub fn kd_distill_term(
    g: &mut Graph,
    student_logits: Var,
    rows: Option<&[usize]>,
    teacher_logits: &Tensor,
    temperature: f64,
) -> Result<Var, LossError> {
    let full = g.value(student_logits);
    let (v, grad) = match rows {
        None => kd_distill_loss(teacher_logits, full, temperature)?,
        Some(rows) => {
            let k = full.row_len();
            let (v, part) = kd_distill_loss(teacher_logits, &full.select_rows(rows), temperature)?;
            let mut grad = vec![0.0; full.numel()];
            for (i, &r) in rows.iter().enumerate() {
                grad[r * k..(r + 1) * k].copy_from_slice(&part[i * k..(i + 1) * k]);
            }
            (v, grad)
        }
    };
    Ok(g.custom_scalar(&[student_logits], v, vec![grad])?)
}
