//! Similarity losses on an embedding matrix. Each returns the value and its
//! analytic gradient with respect to the embeddings.

use super::{LossError, LossValue, PairIndexSet, TripletIndexSet};
use crate::tensor::Tensor;

pub(crate) fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), LossError> {
    if t.rank() != 2 {
        return Err(LossError::Shape(format!(
            "{op}: expected a matrix, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_index(op: &'static str, n: usize, idx: usize) -> Result<(), LossError> {
    if idx >= n {
        return Err(LossError::Shape(format!("{op}: index {idx} out of range for {n} rows")));
    }
    Ok(())
}

/// Adds `scale * (a - b) / d` to row `ia` and subtracts it from row `ib`.
fn push_apart(grad: &mut [f64], x: &Tensor, ia: usize, ib: usize, scale: f64, d: f64) {
    if d <= 0.0 {
        return;
    }
    let dim = x.row_len();
    for k in 0..dim {
        let g = scale * (x.row(ia)[k] - x.row(ib)[k]) / d;
        grad[ia * dim + k] += g;
        grad[ib * dim + k] -= g;
    }
}

/// Mean over triples of `max(d(a, p) - d(a, n) + margin, 0)`.
pub fn triplet_loss(embeddings: &Tensor, triples: &TripletIndexSet, margin: f64) -> Result<LossValue, LossError> {
    let (n, dim) = check_matrix("triplet_loss", embeddings)?;
    if !(margin > 0.0) {
        return Err(LossError::Param(format!(
            "triplet margin must be positive, got {margin}"
        )));
    }
    let mut grad = vec![0.0; n * dim];
    if triples.is_empty() {
        return Ok(LossValue::empty(grad));
    }
    let scale = 1.0 / triples.len() as f64;
    let mut total = 0.0;
    for &(a, p, neg) in triples.iter() {
        for i in [a, p, neg] {
            check_index("triplet_loss", n, i)?;
        }
        let d_ap = dist(embeddings.row(a), embeddings.row(p));
        let d_an = dist(embeddings.row(a), embeddings.row(neg));
        let v = d_ap - d_an + margin;
        if v > 0.0 {
            total += v;
            push_apart(&mut grad, embeddings, a, p, scale, d_ap);
            push_apart(&mut grad, embeddings, a, neg, -scale, d_an);
        }
    }
    Ok(LossValue::new(total * scale, grad))
}

/// Mean over all pairs of `d^2 / 2` (positive) and `max(0, margin - d)^2 / 2` (negative).
pub fn contrastive_loss(embeddings: &Tensor, pairs: &PairIndexSet, margin: f64) -> Result<LossValue, LossError> {
    let (n, dim) = check_matrix("contrastive_loss", embeddings)?;
    if !(margin > 0.0) {
        return Err(LossError::Param(format!(
            "contrastive margin must be positive, got {margin}"
        )));
    }
    let mut grad = vec![0.0; n * dim];
    let count = pairs.len();
    if count == 0 {
        return Ok(LossValue::empty(grad));
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    for &(i, j) in &pairs.positive {
        check_index("contrastive_loss", n, i)?;
        check_index("contrastive_loss", n, j)?;
        let d = dist(embeddings.row(i), embeddings.row(j));
        total += 0.5 * d * d;
        // d/dx_i of d^2/2 is (x_i - x_j) = d * unit
        push_apart(&mut grad, embeddings, i, j, scale * d, d);
    }
    for &(i, j) in &pairs.negative {
        check_index("contrastive_loss", n, i)?;
        check_index("contrastive_loss", n, j)?;
        let d = dist(embeddings.row(i), embeddings.row(j));
        let gap = margin - d;
        if gap > 0.0 {
            total += 0.5 * gap * gap;
            push_apart(&mut grad, embeddings, i, j, -scale * gap, d);
        }
    }
    Ok(LossValue::new(total * scale, grad))
}

/// Angular loss: for every mined anchor/positive pair,
/// `log(1 + sum_n exp(f_apn))` with
/// `f = 4 tan^2(alpha) (x_a + x_p)^T x_n - 2 (1 + tan^2(alpha)) x_a^T x_p`,
/// averaged over pairs. The sum is evaluated with a shifted log-sum-exp.
pub fn angular_loss(
    embeddings: &Tensor,
    triples: &TripletIndexSet,
    alpha_degrees: f64,
) -> Result<LossValue, LossError> {
    let (n, dim) = check_matrix("angular_loss", embeddings)?;
    if !(alpha_degrees > 0.0 && alpha_degrees < 90.0) {
        return Err(LossError::Param(format!(
            "angle must lie in (0, 90) degrees, got {alpha_degrees}"
        )));
    }
    let mut grad = vec![0.0; n * dim];
    if triples.is_empty() {
        return Ok(LossValue::empty(grad));
    }
    let t2 = alpha_degrees.to_radians().tan().powi(2);
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    // triples are sorted, so each (a, p) group is a contiguous run
    let groups: Vec<&[(usize, usize, usize)]> = triples.as_slice().chunk_by(|x, y| x.0 == y.0 && x.1 == y.1).collect();
    let scale = 1.0 / groups.len() as f64;
    let mut total = 0.0;
    for group in groups {
        let (a, p) = (group[0].0, group[0].1);
        check_index("angular_loss", n, a)?;
        check_index("angular_loss", n, p)?;
        let (xa, xp) = (embeddings.row(a), embeddings.row(p));
        let ap = dot(xa, xp);
        let mut fs = Vec::with_capacity(group.len());
        for &(_, _, neg) in group {
            check_index("angular_loss", n, neg)?;
            let xn = embeddings.row(neg);
            fs.push(4.0 * t2 * (dot(xa, xn) + dot(xp, xn)) - 2.0 * (1.0 + t2) * ap);
        }
        let shift = fs.iter().copied().fold(0.0f64, f64::max);
        let denom = (-shift).exp() + fs.iter().map(|f| (f - shift).exp()).sum::<f64>();
        total += shift + denom.ln();
        for (&(_, _, neg), f) in group.iter().zip(&fs) {
            let w = scale * (f - shift).exp() / denom;
            if w == 0.0 {
                continue;
            }
            for k in 0..dim {
                let (va, vp, vn) = (embeddings.row(a)[k], embeddings.row(p)[k], embeddings.row(neg)[k]);
                grad[a * dim + k] += w * (4.0 * t2 * vn - 2.0 * (1.0 + t2) * vp);
                grad[p * dim + k] += w * (4.0 * t2 * vn - 2.0 * (1.0 + t2) * va);
                grad[neg * dim + k] += w * 4.0 * t2 * (va + vp);
            }
        }
    }
    Ok(LossValue::new(total * scale, grad))
}

/// Class centres for centre loss, moved on a separate non-gradient path.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterState {
    /// `[K, D]`
    pub centers: Tensor,
    pub lambda_weight: f64,
    pub center_lr: f64,
}

impl CenterState {
    pub fn new(classes: usize, dim: usize, lambda_weight: f64, center_lr: f64) -> Self {
        Self {
            centers: Tensor::zeros(&[classes, dim]),
            lambda_weight,
            center_lr,
        }
    }

    pub fn classes(&self) -> usize {
        self.centers.rows()
    }

    /// Adds zero-initialised centres up to `classes`.
    pub fn expand(&mut self, classes: usize) {
        let dim = self.centers.row_len();
        if classes <= self.classes() {
            return;
        }
        let mut data = self.centers.data().to_vec();
        data.resize(classes * dim, 0.0);
        self.centers = Tensor::new(&[classes, dim], data).expect("sized above");
    }

    /// `c_j -= center_lr * sum_{i: y_i = j} (c_j - x_i) / (1 + n_j)`.
    pub fn update(&mut self, features: &Tensor, labels: &[usize]) -> Result<(), LossError> {
        let (_, dim) = check_matrix("center_update", features)?;
        let k = self.classes();
        let mut delta = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(LossError::Label { label: y, classes: k });
            }
            counts[y] += 1;
            for d in 0..dim {
                delta[y * dim + d] += self.centers.data()[y * dim + d] - features.row(i)[d];
            }
        }
        let lr = self.center_lr;
        for (j, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            for d in 0..dim {
                self.centers.data_mut()[j * dim + d] -= lr * delta[j * dim + d] / (1.0 + count as f64);
            }
        }
        Ok(())
    }
}

/// Softmax cross-entropy plus centre pull, both averaged over the batch:
/// `mean CE(logits, y) + (lambda / 2) mean ||x_i - c_{y_i}||^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterLossValue {
    pub value: f64,
    pub cross_entropy: f64,
    pub center_term: f64,
    pub grad_features: Vec<f64>,
    pub grad_logits: Vec<f64>,
}

pub fn center_softmax_loss(
    features: &Tensor,
    logits: &Tensor,
    labels: &[usize],
    state: &CenterState,
) -> Result<CenterLossValue, LossError> {
    let (n, dim) = check_matrix("center_softmax_loss", features)?;
    let (ln, k) = check_matrix("center_softmax_loss", logits)?;
    if ln != n || labels.len() != n {
        return Err(LossError::Shape(format!(
            "center_softmax_loss: {n} features, {ln} logit rows, {} labels",
            labels.len()
        )));
    }
    if state.centers.row_len() != dim {
        return Err(LossError::Shape(format!(
            "centres have width {}, features {dim}",
            state.centers.row_len()
        )));
    }
    let classes = k.min(state.classes());
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(LossError::Label { label, classes });
    }
    let mut grad_logits = vec![0.0; n * k];
    let mut grad_features = vec![0.0; n * dim];
    if n == 0 {
        return Ok(CenterLossValue {
            value: 0.0,
            cross_entropy: 0.0,
            center_term: 0.0,
            grad_features,
            grad_logits,
        });
    }
    let inv = 1.0 / n as f64;
    let mut ce = 0.0;
    let mut center = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        ce += max + sum.ln() - row[y];
        for j in 0..k {
            let p = (row[j] - max).exp() / sum;
            grad_logits[i * k + j] = inv * (p - if j == y { 1.0 } else { 0.0 });
        }
        let c = state.centers.row(y);
        for d in 0..dim {
            let diff = features.row(i)[d] - c[d];
            center += diff * diff;
            grad_features[i * dim + d] = inv * state.lambda_weight * diff;
        }
    }
    let cross_entropy = ce * inv;
    let center_term = 0.5 * state.lambda_weight * center * inv;
    Ok(CenterLossValue {
        value: cross_entropy + center_term,
        cross_entropy,
        center_term,
        grad_features,
        grad_logits,
    })
}
