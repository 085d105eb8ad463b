//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test -p simlab-core --test acceptance`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use simlab_core::data::ImageSet;
use simlab_core::eval::{average_precision_at_r, mean_ap_at_r, omega_metrics, SessionLog, SessionRecord};
use simlab_core::harness::{emit_report, run_experiment, ExperimentConfig, RunArtifacts};
use simlab_core::losses::{
    angle_distill_loss, angular_loss, center_softmax_loss, contrastive_loss, ewc_penalty, mine_angular,
    mine_pair_margin, mine_semi_hard, triplet_loss, vae_loss, CenterState, FisherDiag, LossConfig, LossKind,
    PairIndexSet, TripletIndexSet,
};
use simlab_core::net::{ConvActivation, EmbeddingBatch, EmbeddingNet, NetConfig, ParamSet};
use simlab_core::rng::{self, ChaCha8Rng};
use simlab_core::strategies::{
    initial_fisher, populate_exemplars, populate_vaes, train_base, train_ebll_session, train_ewc_session,
    train_icarl_session, train_normal_session, train_vae_replay_session, AutoencoderConfig, ExemplarStore, Learner,
    SessionContext, SessionData, StrategyKind, StrategyParams, TrainConfig, VaeConfig,
};
use simlab_core::tensor::finite_diff_check;
use simlab_core::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn random(r: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Tensor {
    Tensor::new(&[n, d], (0..n * d).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

fn dist(x: &Tensor, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j))
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------- gradients

fn fd(params: &[f64], f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>), String>) -> f64 {
    finite_diff_check(f, params, 1e-6, None).unwrap_or(f64::INFINITY)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng::seeded(1001);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for _ in 0..20 {
        let (n, d) = (8, 4);
        let x = random(&mut r, n, d, 1.0);
        let y = labels(n, 3);
        let t = mine_semi_hard(&x, &y, 0.5).unwrap();
        record(
            "triplet",
            fd(x.data(), |p| {
                let v = triplet_loss(&Tensor::new(&[n, d], p.to_vec()).unwrap(), &t, 0.5).map_err(|e| e.to_string())?;
                Ok((v.value, v.grad))
            }),
        );

        let x = random(&mut r, n, d, 0.5);
        let pairs = mine_pair_margin(&x, &y, 0.0, 1.0).unwrap();
        record(
            "contrastive",
            fd(x.data(), |p| {
                let v = contrastive_loss(&Tensor::new(&[n, d], p.to_vec()).unwrap(), &pairs, 1.0)
                    .map_err(|e| e.to_string())?;
                Ok((v.value, v.grad))
            }),
        );

        let x = random(&mut r, n, d, 1.0);
        let t = mine_angular(&x, &labels(n, 2), 30.0).unwrap();
        record(
            "angular",
            fd(x.data(), |p| {
                let v =
                    angular_loss(&Tensor::new(&[n, d], p.to_vec()).unwrap(), &t, 45.0).map_err(|e| e.to_string())?;
                Ok((v.value, v.grad))
            }),
        );

        let (cn, cd, k) = (6, 3, 3);
        let mut state = CenterState::new(k, cd, 1.0, 0.5);
        state.centers = random(&mut r, k, cd, 1.0);
        let cy = labels(cn, k);
        let p0: Vec<f64> = (0..cn * cd + cn * k).map(|_| r.random_range(-1.0..1.0)).collect();
        record(
            "center-softmax",
            fd(&p0, |p| {
                let x = Tensor::new(&[cn, cd], p[..cn * cd].to_vec()).unwrap();
                let l = Tensor::new(&[cn, k], p[cn * cd..].to_vec()).unwrap();
                let v = center_softmax_loss(&x, &l, &cy, &state).map_err(|e| e.to_string())?;
                let mut g = v.grad_features;
                g.extend(v.grad_logits);
                Ok((v.value, g))
            }),
        );

        let teacher = random(&mut r, 5, 4, 1.0);
        let student = random(&mut r, 5, 4, 1.0);
        record(
            "angle distillation",
            fd(student.data(), |p| {
                let v = angle_distill_loss(&teacher, &Tensor::new(&[5, 4], p.to_vec()).unwrap())
                    .map_err(|e| e.to_string())?;
                Ok((v.value, v.grad))
            }),
        );

        let (vn, vf, vl) = (3, 4, 2);
        let target = Tensor::new(&[vn, vf], (0..vn * vf).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let mut p0: Vec<f64> = (0..vn * vf).map(|_| r.random_range(0.1..0.9)).collect();
        p0.extend((0..2 * vn * vl).map(|_| r.random_range(-1.0..1.0)));
        record(
            "vae",
            fd(&p0, |p| {
                let rec = Tensor::new(&[vn, vf], p[..vn * vf].to_vec()).unwrap();
                let mu = Tensor::new(&[vn, vl], p[vn * vf..vn * vf + vn * vl].to_vec()).unwrap();
                let lv = Tensor::new(&[vn, vl], p[vn * vf + vn * vl..].to_vec()).unwrap();
                let v = vae_loss(&rec, &target, &mu, &lv).map_err(|e| e.to_string())?;
                let mut g = v.grad_reconstruction;
                g.extend(v.grad_mu);
                g.extend(v.grad_log_var);
                Ok((v.value, g))
            }),
        );

        let shapes = [vec![3, 2], vec![4]];
        let build = |flat: &[f64]| {
            let mut ps = ParamSet::new();
            ps.push("w", Tensor::new(&shapes[0], flat[..6].to_vec()).unwrap());
            ps.push("b", Tensor::new(&shapes[1], flat[6..].to_vec()).unwrap());
            ps
        };
        let anchor: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut fisher = FisherDiag::zeros(&build(&anchor), |_| true, 150.0);
        for f in fisher.fisher.iter_mut().flatten() {
            *f = r.random_range(0.0..2.0);
        }
        let p0: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
        record(
            "ewc",
            fd(&p0, |p| {
                let (v, g) = ewc_penalty(&build(p), &fisher).map_err(|e| e.to_string())?;
                Ok((v, g.concat()))
            }),
        );
    }
    let elapsed = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        max <= 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "worst relative error over 20 instances each: {detail} ({})",
            secs(elapsed)
        ),
    )
}

// ------------------------------------------------------------------ oracles

fn oracle_semi_hard(x: &Tensor, y: &[usize], margin: f64) -> Vec<(usize, usize, usize)> {
    let n = y.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if a == p || y[a] != y[p] {
                continue;
            }
            let dp = dist(x, a, p);
            let band: Vec<usize> = (0..n)
                .filter(|&k| y[k] != y[a] && dp < dist(x, a, k) && dist(x, a, k) < dp + margin)
                .collect();
            if band.is_empty() {
                let hardest = (0..n)
                    .filter(|&k| y[k] != y[a])
                    .fold(None, |b: Option<usize>, k| match b {
                        Some(b) if dist(x, a, b) <= dist(x, a, k) => Some(b),
                        _ => Some(k),
                    });
                out.extend(hardest.map(|k| (a, p, k)));
            } else {
                out.extend(band.into_iter().map(|k| (a, p, k)));
            }
        }
    }
    out
}

fn oracle_pairs(x: &Tensor, y: &[usize], pos_thr: f64, margin: f64) -> PairIndexSet {
    let mut set = PairIndexSet::default();
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            let d = dist(x, i, j);
            if y[i] == y[j] && d > pos_thr {
                set.positive.push((i, j));
            }
            if y[i] != y[j] && d < margin {
                set.negative.push((i, j));
            }
        }
    }
    set
}

fn oracle_angular(x: &Tensor, y: &[usize], alpha: f64) -> Vec<(usize, usize, usize)> {
    let n = y.len();
    let tan_alpha = alpha.to_radians().tan();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            for k in 0..n {
                if a == p || y[a] != y[p] || y[k] == y[a] {
                    continue;
                }
                let ap = dist(x, a, p);
                let centre: Vec<f64> = x.row(a).iter().zip(x.row(p)).map(|(u, v)| (u + v) / 2.0).collect();
                let nc = x
                    .row(k)
                    .iter()
                    .zip(&centre)
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>()
                    .sqrt();
                // angle at the negative exceeds alpha iff its tangent does
                if ap > 0.0 && ap > tan_alpha * 2.0 * nc {
                    out.push((a, p, k));
                }
            }
        }
    }
    out
}

fn oracle_map(x: &Tensor, y: &[usize]) -> f64 {
    let n = y.len();
    let norm = |i: usize| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut total = 0.0;
    for q in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&i| i != q)
            .map(|i| {
                let dot: f64 = x.row(q).iter().zip(x.row(i)).map(|(a, b)| a * b).sum();
                (dot / (norm(q) * norm(i)), i)
            })
            .collect();
        others.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let r = y.iter().filter(|&&l| l == y[q]).count() - 1;
        let mut hits = 0.0;
        let mut ap = 0.0;
        for (rank, &(_, i)) in others.iter().take(r).enumerate() {
            if y[i] == y[q] {
                hits += 1.0;
                ap += hits / (rank as f64 + 1.0);
            }
        }
        total += ap / r as f64;
    }
    total / n as f64
}

fn oracle_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng::seeded(2002);
    let mut mismatches = Vec::new();
    let mut worst_map = 0.0f64;
    for batch in 0..200 {
        let n = r.random_range(4..=32);
        let classes = r.random_range(2..=4.min(n / 2));
        let d = r.random_range(2..=6);
        let x = random(&mut r, n, d, 1.0);
        // every class gets at least two members so mAP@R is defined
        let mut y: Vec<usize> = (0..n)
            .map(|i| {
                if i < 2 * classes {
                    i / 2
                } else {
                    r.random_range(0..classes)
                }
            })
            .collect();
        y.rotate_left(r.random_range(0..n));

        if mine_semi_hard(&x, &y, 0.5).unwrap().triples != oracle_semi_hard(&x, &y, 0.5) {
            mismatches.push(format!("semi-hard #{batch}"));
        }
        if mine_pair_margin(&x, &y, 0.4, 1.0).unwrap() != oracle_pairs(&x, &y, 0.4, 1.0) {
            mismatches.push(format!("pair-margin #{batch}"));
        }
        if mine_angular(&x, &y, 40.0).unwrap().triples != oracle_angular(&x, &y, 40.0) {
            mismatches.push(format!("angular #{batch}"));
        }
        let got = mean_ap_at_r(&EmbeddingBatch::new(x.clone(), y.clone()).unwrap()).unwrap();
        let diff = (got - oracle_map(&x, &y)).abs();
        worst_map = worst_map.max(diff);
        if diff > 1e-12 {
            mismatches.push(format!("mAP@R #{batch} off by {diff:e}"));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "200 batches of at most 32 items, {} mismatches{}; mAP@R max deviation {worst_map:.1e} ({})",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default(),
            secs(elapsed)
        ),
    )
}

// -------------------------------------------------------------- hand values

fn hand_values() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        let pass = (got - want).abs() <= tol;
        ok &= pass;
        notes.push(format!(
            "{name} {got:.12} vs {want:.12}{}",
            if pass { "" } else { " MISMATCH" }
        ));
    };

    // a = p = e1, n = e2: f = 4 tan^2(a) (a+p)^T n - 2 (1 + tan^2 a) a^T p = -4
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let t = TripletIndexSet::new(vec![(0, 1, 2)]);
    let ang = angular_loss(&x, &t, 45.0).unwrap().value;
    check("angular", ang, (1.0 + (-4f64).exp()).ln(), 1e-9);

    check(
        "AP@R",
        average_precision_at_r(&[true, false, true], 2).unwrap(),
        0.5,
        1e-12,
    );

    let rec = |s, b| SessionRecord {
        session: s,
        classes_seen: 5 + s,
        alpha_base: b,
        alpha_new: 0.5,
        alpha_all: 0.5,
    };
    let log = SessionLog {
        records: vec![rec(0, 0.95), rec(1, 0.8), rec(2, 0.6)],
        ideal_base: 0.9,
        ideal_all: 0.9,
    };
    check("omega_base", omega_metrics(&log).unwrap().omega_base, 7.0 / 9.0, 1e-12);

    let mut ps = ParamSet::new();
    ps.push("w", Tensor::new(&[1], vec![0.0]).unwrap());
    let mut fisher = FisherDiag::zeros(&ps, |_| true, 150.0);
    fisher.fisher[0][0] = 2.0;
    let mut moved = ParamSet::new();
    moved.push("w", Tensor::new(&[1], vec![0.1]).unwrap());
    check("EWC", ewc_penalty(&moved, &fisher).unwrap().0, 1.5, 1e-12);

    outcome(ok, notes.join("; "))
}

// ------------------------------------------------------------- distillation

fn random_orthogonal(r: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

/// `R x + t` row by row.
fn rigid(x: &Tensor, q: &[Vec<f64>], shift: &[f64]) -> Tensor {
    let d = x.row_len();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.rows() {
        for (row, s) in q.iter().zip(shift) {
            out.push((0..d).map(|k| row[k] * x.row(i)[k]).sum::<f64>() + s);
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

fn distillation_identity() -> Outcome {
    let mut r = rng::seeded(3003);
    let mut self_max = 0.0f64;
    let mut rot_max = 0.0f64;
    for _ in 0..20 {
        let teacher = random(&mut r, 6, 5, 1.0);
        self_max = self_max.max(angle_distill_loss(&teacher, &teacher).unwrap().value.abs());
        let student = random(&mut r, 6, 5, 1.0);
        let base = angle_distill_loss(&teacher, &student).unwrap().value;
        let q = random_orthogonal(&mut r, 5);
        let shift: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let moved = angle_distill_loss(&teacher, &rigid(&student, &q, &shift))
            .unwrap()
            .value;
        rot_max = rot_max.max((moved - base).abs());
    }
    outcome(
        self_max == 0.0 && rot_max <= 1e-9,
        format!("student = teacher gives {self_max:e}; rigid motion of the student changes the loss by at most {rot_max:.1e}"),
    )
}

// ---------------------------------------------------------------- toy runs

const SIDE: usize = 16;

/// Class `c` lights up a horizontal band of rows, with pixel noise.
fn toy_set(classes: &[usize], per_class: usize, seed: u64) -> ImageSet {
    let mut r = rng::seeded(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for &c in classes {
        for _ in 0..per_class {
            for y in 0..SIDE {
                for _ in 0..SIDE {
                    let on = y / 3 == c % 5;
                    data.push(if on { 1.5 } else { -0.4 } + r.random_range(-0.3..0.3));
                }
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    ImageSet::new(Tensor::new(&[n, 1, SIDE, SIDE], data).unwrap(), labels, 8).unwrap()
}

fn session(classes: &[usize], seed: u64) -> SessionData {
    SessionData {
        train: toy_set(classes, 12, seed),
        validation: toy_set(classes, 4, seed + 100),
    }
}

fn toy_context(kind: LossKind) -> SessionContext {
    SessionContext {
        loss: LossConfig::with_kind(kind),
        train: TrainConfig {
            max_epochs: 2,
            patience: 2,
            batch_size: 16,
            ..TrainConfig::default()
        },
        params: StrategyParams {
            autoencoder: AutoencoderConfig {
                code_width: 16,
                epochs: 2,
                batch_size: 16,
                ..AutoencoderConfig::default()
            },
            vae: VaeConfig {
                max_epochs: 3,
                batch_size: 16,
                ..VaeConfig::default()
            },
            exemplar_budget: 10,
            ..StrategyParams::default()
        },
        seed: 31,
    }
}

fn toy_base(kind: LossKind, activation: ConvActivation) -> (Learner, SessionContext) {
    let cfg = NetConfig {
        in_channels: 1,
        image_size: SIDE,
        final_conv_activation: activation,
    };
    let c = toy_context(kind);
    let mut l = Learner::new(EmbeddingNet::new(cfg, 5).unwrap(), &c.loss);
    train_base(&mut l, &session(&[0, 1, 2], 1), &c).unwrap();
    (l, c)
}

fn bits(l: &Learner) -> Vec<u64> {
    let mut out: Vec<u64> = l
        .net
        .params()
        .entries()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect();
    if let Some(c) = &l.centers {
        out.extend(c.centers.data().iter().map(|v| v.to_bits()));
    }
    out
}

fn collapse() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut compared = 0;
    for kind in [LossKind::Triplet, LossKind::Contrastive, LossKind::Center] {
        let (base, c) = toy_base(kind, ConvActivation::Relu);
        let mut zero = c.clone();
        zero.params.lambda_ewc = 0.0;
        zero.params.lambda_ae = 0.0;
        zero.params.lambda_distill = 0.0;
        let (mut normal, mut ewc, mut ebll, mut icarl) = (base.clone(), base.clone(), base.clone(), base.clone());
        let mut fisher = initial_fisher(&ewc, &toy_set(&[0, 1, 2], 12, 1), &zero).unwrap();
        let mut aes = Vec::new();
        let mut store = ExemplarStore::images(zero.params.exemplar_budget);
        for (t, classes) in [[3usize, 0], [4, 1]].iter().enumerate() {
            let data = session(classes, 20 + t as u64);
            train_normal_session(&mut normal, &data, &c, t + 1).unwrap();
            train_ewc_session(&mut ewc, &mut fisher, &data, &zero, t + 1).unwrap();
            train_ebll_session(&mut ebll, &mut aes, &data, &zero, t + 1).unwrap();
            if t == 0 {
                // empty store at the start of the session
                train_icarl_session(&mut icarl, &mut store, &data, &zero, t + 1).unwrap();
                if bits(&icarl) != bits(&normal) {
                    failures.push(format!("{kind} icarl"));
                }
            }
            for (name, l) in [("ewc", &ewc), ("ebll", &ebll)] {
                if bits(l) != bits(&normal) {
                    failures.push(format!("{kind} {name} session {}", t + 1));
                }
            }
            compared += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(300),
        format!(
            "{compared} session pairs over 3 losses, {} differ{} ({})",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            secs(elapsed)
        ),
    )
}

fn freeze_and_budget() -> Outcome {
    let mut problems = Vec::new();

    let (mut l, c) = toy_base(LossKind::Contrastive, ConvActivation::Sigmoid);
    l.net.set_frozen_feature_extractor(true);
    let mut vaes = ExemplarStore::for_vaes();
    populate_vaes(&l, &mut vaes, &toy_set(&[0, 1, 2], 12, 1), &c).unwrap();
    let conv: Vec<Tensor> = l.net.conv_params().into_iter().cloned().collect();
    for (t, new) in [3usize, 4, 5].into_iter().enumerate() {
        train_vae_replay_session(&mut l, &mut vaes, &session(&[new], 50 + t as u64), &c, t + 1).unwrap();
        let now: Vec<Tensor> = l.net.conv_params().into_iter().cloned().collect();
        if now != conv {
            problems.push(format!("vae conv weights moved in session {}", t + 1));
        }
    }

    let (mut l, c) = toy_base(LossKind::Contrastive, ConvActivation::Relu);
    let budget = c.params.exemplar_budget;
    let mut store = ExemplarStore::images(budget);
    populate_exemplars(&l, &mut store, &toy_set(&[0, 1, 2], 12, 1), &c.params).unwrap();
    let mut sizes = vec![store.total_images()];
    for (t, new) in [3usize, 4, 5].into_iter().enumerate() {
        train_icarl_session(&mut l, &mut store, &session(&[new], 60 + t as u64), &c, t + 1).unwrap();
        sizes.push(store.total_images());
    }
    if sizes.iter().any(|&s| s > budget) {
        problems.push(format!("store sizes {sizes:?} exceed budget {budget}"));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("vae conv weights bitwise unchanged over 3 sessions; icarl store sizes {sizes:?} within budget {budget}")
        } else {
            problems.join("; ")
        },
    )
}

// -------------------------------------------------------------- desk MNIST

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

fn desk_run(out: &Path) -> Result<(RunArtifacts, String, Duration), String> {
    let start = Instant::now();
    let cfg = ExperimentConfig::desk_mnist(&data_dir(), out);
    let artifacts = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let files = emit_report(&artifacts, out).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(files.sessions_csv).map_err(|e| e.to_string())?;
    Ok((artifacts, csv, start.elapsed()))
}

fn desk_checks(artifacts: &RunArtifacts, elapsed: Duration) -> Vec<(&'static str, Outcome)> {
    let find = |k: StrategyKind| artifacts.runs.iter().find(|r| r.strategy == k);
    let omega = |k| find(k).and_then(|r| r.omega).map(|o| o.omega_base);
    let mut out = Vec::new();

    let decline = find(StrategyKind::Normal).and_then(|r| {
        let first = r.log.records.first()?.alpha_base;
        let last = r.log.records.last()?.alpha_base;
        Some((first, last))
    });
    out.push((
        "desk MNIST: normal fine-tuning forgets",
        match decline {
            Some((a, b)) => outcome(
                a - b >= 0.2,
                format!("base mAP@R {a:.4} -> {b:.4}, decline {:.4} (need >= 0.2)", a - b),
            ),
            None => outcome(false, "no normal run".into()),
        },
    ));
    for (name, k, need) in [
        ("desk MNIST: VAE replay beats normal", StrategyKind::Vae, 0.15),
        ("desk MNIST: iCaRL beats normal", StrategyKind::Icarl, 0.10),
    ] {
        out.push((
            name,
            match (omega(k), omega(StrategyKind::Normal)) {
                (Some(s), Some(n)) => outcome(
                    s - n >= need,
                    format!(
                        "omega_base {} {s:.4} vs normal {n:.4}, margin {:.4} (need >= {need})",
                        k.as_str(),
                        s - n
                    ),
                ),
                _ => outcome(false, "missing omega values".into()),
            },
        ));
    }
    out.push((
        "desk MNIST: runtime",
        outcome(
            elapsed <= Duration::from_secs(30 * 60),
            format!("{} (limit 30 min)", secs(elapsed)),
        ),
    ));
    out
}

// ------------------------------------------------------------------- main

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("gradient suite", gradient_suite()),
        ("oracle suite", oracle_suite()),
        ("hand values", hand_values()),
        ("distillation identity", distillation_identity()),
        ("zero-weight collapse", collapse()),
        ("freeze and budget", freeze_and_budget()),
    ];

    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    match desk_run(first.path()) {
        Ok((artifacts, csv, elapsed)) => {
            results.extend(desk_checks(&artifacts, elapsed));
            let det = match desk_run(second.path()) {
                Ok((_, again, _)) => outcome(
                    again == csv,
                    format!(
                        "second run sessions.csv {} ({} rows)",
                        if again == csv { "byte-identical" } else { "differs" },
                        csv.lines().count() - 1
                    ),
                ),
                Err(e) => outcome(false, format!("second run failed: {e}")),
            };
            results.push(("determinism", det));
        }
        Err(e) => {
            results.push(("desk MNIST", outcome(false, format!("run failed: {e}"))));
            results.push(("determinism", outcome(false, "desk run did not complete".into())));
        }
    }

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
