//! Batch miners. Every miner returns index sets in ascending lexicographic
//! order so that downstream reductions are deterministic.

use super::metric::{check_matrix, dist};
use super::{LossError, PairIndexSet, TripletIndexSet};
use crate::tensor::Tensor;

fn check_labels(embeddings: &Tensor, labels: &[usize]) -> Result<usize, LossError> {
    let (n, _) = check_matrix("miner", embeddings)?;
    if labels.len() != n {
        return Err(LossError::Shape(format!("{n} embeddings but {} labels", labels.len())));
    }
    Ok(n)
}

/// Full `N x N` Euclidean distance matrix.
pub fn distance_matrix(embeddings: &Tensor) -> Vec<f64> {
    let n = embeddings.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(embeddings.row(i), embeddings.row(j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Semi-hard negatives for every ordered positive pair `(a, p)`: all `n`
/// with `d(a, p) < d(a, n) < d(a, p) + margin`. When that band is empty the
/// hardest negative (smallest `d(a, n)`, lowest index on ties) is used and
/// counted in `fallbacks`.
pub fn mine_semi_hard(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<TripletIndexSet, LossError> {
    let n = check_labels(embeddings, labels)?;
    let d = distance_matrix(embeddings);
    let mut out = TripletIndexSet::default();
    for a in 0..n {
        let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
        if negatives.is_empty() {
            continue;
        }
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            let dap = d[a * n + p];
            let before = out.triples.len();
            for &neg in &negatives {
                let dan = d[a * n + neg];
                if dap < dan && dan < dap + margin {
                    out.triples.push((a, p, neg));
                }
            }
            if out.triples.len() == before {
                let hardest = negatives
                    .iter()
                    .copied()
                    .fold(None::<usize>, |best, j| match best {
                        Some(b) if d[a * n + b] <= d[a * n + j] => Some(b),
                        _ => Some(j),
                    })
                    .expect("non-empty");
                out.triples.push((a, p, hardest));
                out.fallbacks += 1;
            }
        }
    }
    Ok(out)
}

/// Unordered pairs `i < j`: positives kept when `d > pos_threshold`,
/// negatives kept when `d < neg_margin`.
pub fn mine_pair_margin(
    embeddings: &Tensor,
    labels: &[usize],
    pos_threshold: f64,
    neg_margin: f64,
) -> Result<PairIndexSet, LossError> {
    let n = check_labels(embeddings, labels)?;
    let mut out = PairIndexSet::default();
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(embeddings.row(i), embeddings.row(j));
            if labels[i] == labels[j] {
                if d > pos_threshold {
                    out.positive.push((i, j));
                }
            } else if d < neg_margin {
                out.negative.push((i, j));
            }
        }
    }
    Ok(out)
}

/// Angle at the negative of triangle `(a, p, n)` in the angular-loss sense:
/// `atan(||a - p|| / (2 ||n - (a + p) / 2||))`, in radians.
pub fn triplet_angle(a: &[f64], p: &[f64], neg: &[f64]) -> f64 {
    let ap = dist(a, p);
    let nc = a
        .iter()
        .zip(p)
        .zip(neg)
        .map(|((x, y), z)| {
            let v = z - 0.5 * (x + y);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if ap == 0.0 {
        return 0.0;
    }
    (ap / (2.0 * nc)).atan()
}

/// Triples `(a, p, n)` whose angle at `n` exceeds `alpha_degrees`.
pub fn mine_angular(embeddings: &Tensor, labels: &[usize], alpha_degrees: f64) -> Result<TripletIndexSet, LossError> {
    let n = check_labels(embeddings, labels)?;
    let alpha = alpha_degrees.to_radians();
    let mut out = TripletIndexSet::default();
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for neg in (0..n).filter(|&j| labels[j] != labels[a]) {
                if triplet_angle(embeddings.row(a), embeddings.row(p), embeddings.row(neg)) > alpha {
                    out.triples.push((a, p, neg));
                }
            }
        }
    }
    Ok(out)
}
