use super::*;
use crate::rng;
use crate::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn batch(r: &mut rng::ChaCha8Rng, n: usize, d: usize, classes: usize) -> EmbeddingBatch {
    let v = Tensor::new(&[n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    EmbeddingBatch::new(v, (0..n).map(|i| i % classes).collect()).unwrap()
}

/// Reference mAP@R written directly from the definition with a full sort.
fn oracle_map(b: &EmbeddingBatch) -> f64 {
    let n = b.len();
    let cos = |i: usize, j: usize| {
        let (x, y) = (b.vectors.row(i), b.vectors.row(j));
        let d: f64 = x.iter().zip(y).map(|(a, c)| a * c).sum();
        d / (x.iter().map(|a| a * a).sum::<f64>().sqrt() * y.iter().map(|a| a * a).sum::<f64>().sqrt())
    };
    let mut total = 0.0;
    for q in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != q).collect();
        others.sort_by(|&a, &c| cos(q, c).partial_cmp(&cos(q, a)).unwrap().then(a.cmp(&c)));
        let r = others.iter().filter(|&&j| b.labels[j] == b.labels[q]).count();
        let mut ap = 0.0;
        for k in 1..=r {
            let rel_k = b.labels[others[k - 1]] == b.labels[q];
            if rel_k {
                let p_at_k = others[..k].iter().filter(|&&j| b.labels[j] == b.labels[q]).count() as f64 / k as f64;
                ap += p_at_k;
            }
        }
        total += ap / r as f64;
    }
    total / n as f64
}

#[test]
fn ap_hand_values() {
    assert_eq!(average_precision_at_r(&[true, false, true, false], 2).unwrap(), 0.5);
    assert_eq!(average_precision_at_r(&[true, true, false], 2).unwrap(), 1.0);
    assert_eq!(average_precision_at_r(&[false, false, true, true], 2).unwrap(), 0.0);
    assert!(matches!(
        average_precision_at_r(&[true], 2),
        Err(EvalError::BadR { .. })
    ));
}

#[test]
fn duplicate_ranked_first_and_scaling_invariance() {
    let mut r = rng::seeded(1);
    let mut b = batch(&mut r, 20, 5, 3);
    let q = b.vectors.row(7).to_vec();
    let ranked = rank_by_cosine(&q, b.labels[7], None, &b).unwrap();
    assert_eq!(ranked.order[0], 7);
    let before = rank_by_cosine(&q, 0, Some(7), &b).unwrap().order;
    for i in 0..20 {
        let s = 0.1 + i as f64;
        let dim = b.dim();
        b.vectors.data_mut()[i * dim..(i + 1) * dim]
            .iter_mut()
            .for_each(|v| *v *= s);
    }
    assert_eq!(rank_by_cosine(&q, 0, Some(7), &b).unwrap().order, before);
}

#[test]
fn ranking_matches_brute_force_sort() {
    let mut r = rng::seeded(2);
    let b = batch(&mut r, 50, 6, 4);
    let q: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let ranked = rank_by_cosine(&q, 0, None, &b).unwrap();
    let qn = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut want: Vec<(f64, usize)> = (0..50)
        .map(|i| {
            let row = b.vectors.row(i);
            let d: f64 = row.iter().zip(&q).map(|(a, c)| a * c).sum();
            (d / (qn * row.iter().map(|a| a * a).sum::<f64>().sqrt()), i)
        })
        .collect();
    want.sort_by(|a, c| c.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&c.1)));
    assert_eq!(ranked.order, want.into_iter().map(|(_, i)| i).collect::<Vec<_>>());
}

#[test]
fn ties_break_by_index() {
    let v = Tensor::new(&[3, 2], vec![1.0, 0.0, 2.0, 0.0, 1.0, 0.0]).unwrap();
    let b = EmbeddingBatch::new(v, vec![0, 1, 0]).unwrap();
    assert_eq!(rank_by_cosine(&[1.0, 0.0], 0, None, &b).unwrap().order, vec![0, 1, 2]);
}

#[test]
fn zero_norm_rows_rejected() {
    let v = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let b = EmbeddingBatch::new(v, vec![0, 0]).unwrap();
    assert_eq!(mean_ap_at_r(&b), Err(EvalError::ZeroNorm(1)));
    assert_eq!(
        rank_by_cosine(&[0.0, 0.0], 0, None, &b).unwrap_err(),
        EvalError::ZeroNorm(1)
    );
}

#[test]
fn singleton_class_rejected() {
    let v = Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let b = EmbeddingBatch::new(v, vec![0, 0, 4]).unwrap();
    assert_eq!(mean_ap_at_r(&b), Err(EvalError::Singleton(vec![4])));
}

#[test]
fn perfect_clusters_score_one() {
    let v = Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let b = EmbeddingBatch::new(v, vec![0, 0, 1, 1]).unwrap();
    assert_eq!(mean_ap_at_r(&b).unwrap(), 1.0);
}

#[test]
fn matches_reference_on_sixty_items() {
    let mut r = rng::seeded(3);
    for _ in 0..20 {
        let b = batch(&mut r, 60, 4, 5);
        assert_eq!(mean_ap_at_r(&b).unwrap(), oracle_map(&b));
    }
}

#[test]
fn shuffled_labels_score_near_permutation_baseline() {
    // Under a random ranking with R relevant items in a gallery of G, rank k
    // is relevant with probability R/G, and given that, the expected number of
    // hits in the top k is 1 + (k-1)(R-1)/(G-1).
    let (n, classes) = (100usize, 4usize);
    let (r_rel, g) = ((n / classes - 1) as f64, (n - 1) as f64);
    let expected = (1..=r_rel as usize)
        .map(|k| (r_rel / g) * (1.0 + (k as f64 - 1.0) * (r_rel - 1.0) / (g - 1.0)) / k as f64)
        .sum::<f64>()
        / r_rel;
    let mut r = rng::seeded(4);
    let trials = 30;
    let mut total = 0.0;
    for _ in 0..trials {
        let mut b = batch(&mut r, n, 8, classes);
        b.labels.shuffle(&mut r);
        total += mean_ap_at_r(&b).unwrap();
    }
    let mean = total / trials as f64;
    assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
}

#[test]
fn orthogonal_invariance() {
    let mut r = rng::seeded(5);
    let b = batch(&mut r, 30, 2, 3);
    let (s, c) = 0.7f64.sin_cos();
    let rotated: Vec<f64> = (0..30)
        .flat_map(|i| {
            let v = b.vectors.row(i);
            [c * v[0] - s * v[1], s * v[0] + c * v[1]]
        })
        .collect();
    let rb = EmbeddingBatch::new(Tensor::new(&[30, 2], rotated).unwrap(), b.labels.clone()).unwrap();
    assert!((mean_ap_at_r(&b).unwrap() - mean_ap_at_r(&rb).unwrap()).abs() < 1e-12);
}

fn record(session: usize, base: f64, new: f64, all: f64) -> SessionRecord {
    SessionRecord {
        session,
        classes_seen: 5 + session,
        alpha_base: base,
        alpha_new: new,
        alpha_all: all,
    }
}

#[test]
fn omega_hand_values() {
    let log = SessionLog {
        records: vec![
            record(0, 0.95, 0.95, 0.95),
            record(1, 0.8, 0.9, 0.5),
            record(2, 0.6, 0.7, 0.5),
        ],
        ideal_base: 0.9,
        ideal_all: 0.5,
    };
    let o = omega_metrics(&log).unwrap();
    assert!((o.omega_base - 0.7777777777777778).abs() < 1e-12);
    assert!((o.omega_new - 0.8).abs() < 1e-12);
    assert!((o.omega_all - 1.0).abs() < 1e-12);
}

#[test]
fn omega_errors() {
    let one = SessionLog {
        records: vec![record(0, 0.5, 0.5, 0.5)],
        ideal_base: 1.0,
        ideal_all: 1.0,
    };
    assert_eq!(omega_metrics(&one), Err(EvalError::TooFewSessions(1)));
    let zero = SessionLog {
        records: vec![record(0, 0.5, 0.5, 0.5), record(1, 0.5, 0.5, 0.5)],
        ideal_base: 0.0,
        ideal_all: 1.0,
    };
    assert_eq!(omega_metrics(&zero), Err(EvalError::BadIdeal(0.0)));
}

proptest! {
    #[test]
    fn ap_in_unit_interval_and_monotone(bits in prop::collection::vec(any::<bool>(), 2..30), pick in any::<prop::sample::Index>()) {
        let r = bits.iter().filter(|b| **b).count().max(1);
        let ap = average_precision_at_r(&bits, r).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        // promote one relevant item one rank up past an irrelevant one
        let swaps: Vec<usize> = (1..bits.len()).filter(|&i| bits[i] && !bits[i - 1]).collect();
        if !swaps.is_empty() {
            let i = swaps[pick.index(swaps.len())];
            let mut better = bits.clone();
            better.swap(i, i - 1);
            prop_assert!(average_precision_at_r(&better, r).unwrap() >= ap);
        }
    }

    #[test]
    fn omega_is_linear(a in prop::collection::vec(0.01f64..1.0, 9), ideal in 0.1f64..1.0) {
        let log = SessionLog {
            records: (0..3).map(|i| record(i, a[3 * i], a[3 * i + 1], a[3 * i + 2])).collect(),
            ideal_base: ideal,
            ideal_all: ideal,
        };
        let o = omega_metrics(&log).unwrap();
        let doubled = omega_metrics(&SessionLog { ideal_base: 2.0 * ideal, ideal_all: 2.0 * ideal, ..log.clone() }).unwrap();
        prop_assert!((doubled.omega_base - o.omega_base / 2.0).abs() < 1e-12);
        prop_assert!((doubled.omega_all - o.omega_all / 2.0).abs() < 1e-12);
        prop_assert_eq!(doubled.omega_new, o.omega_new);
        let halved = SessionLog {
            records: log.records.iter().map(|r| record(r.session, r.alpha_base / 2.0, r.alpha_new / 2.0, r.alpha_all / 2.0)).collect(),
            ..log.clone()
        };
        let h = omega_metrics(&halved).unwrap();
        prop_assert!((h.omega_base - o.omega_base / 2.0).abs() < 1e-12);
        prop_assert!((h.omega_new - o.omega_new / 2.0).abs() < 1e-12);
    }
}
