use super::*;
use crate::data::ImageSet;
use crate::losses::{ewc_penalty, LossConfig, LossKind};
use crate::net::{ConvActivation, EmbeddingNet, NetConfig};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;

const SIDE: usize = 16;

/// Class `c` lights up a horizontal band of rows; pixel noise on top.
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

fn ctx(kind: LossKind) -> SessionContext {
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
        seed: 21,
    }
}

fn base_learner(kind: LossKind, activation: ConvActivation) -> (Learner, SessionContext) {
    let cfg = NetConfig {
        in_channels: 1,
        image_size: SIDE,
        final_conv_activation: activation,
    };
    let c = ctx(kind);
    let mut l = Learner::new(EmbeddingNet::new(cfg, 3).unwrap(), &c.loss);
    train_base(&mut l, &session(&[0, 1, 2], 1), &c).unwrap();
    (l, c)
}

fn bits(l: &Learner) -> Vec<Vec<u64>> {
    l.net
        .params()
        .entries()
        .iter()
        .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn check_collapse(kind: LossKind) {
    let (base, c) = base_learner(kind, ConvActivation::Relu);
    let data = session(&[3, 0], 2);
    let mut normal = base.clone();
    train_normal_session(&mut normal, &data, &c, 1).unwrap();

    let mut zero = c.clone();
    zero.params.lambda_ewc = 0.0;
    zero.params.lambda_ae = 0.0;
    zero.params.lambda_distill = 0.0;

    let mut ewc = base.clone();
    let mut fisher = initial_fisher(&ewc, &toy_set(&[0, 1, 2], 12, 1), &zero).unwrap();
    train_ewc_session(&mut ewc, &mut fisher, &data, &zero, 1).unwrap();
    assert_eq!(bits(&ewc), bits(&normal), "{kind}: ewc");

    let mut ebll = base.clone();
    let mut aes = Vec::new();
    train_ebll_session(&mut ebll, &mut aes, &data, &zero, 1).unwrap();
    assert_eq!(bits(&ebll), bits(&normal), "{kind}: ebll");
    assert_eq!(aes.len(), 1);

    let mut icarl = base.clone();
    let mut store = ExemplarStore::images(zero.params.exemplar_budget);
    train_icarl_session(&mut icarl, &mut store, &data, &zero, 1).unwrap();
    assert_eq!(bits(&icarl), bits(&normal), "{kind}: icarl");
    assert_eq!(icarl.centers, normal.centers);
}

#[test]
fn zero_weight_strategies_collapse_to_normal_contrastive() {
    check_collapse(LossKind::Contrastive);
}

#[test]
fn zero_weight_strategies_collapse_to_normal_center() {
    check_collapse(LossKind::Center);
}

#[test]
fn ebll_with_zero_weight_and_live_autoencoder_matches_normal() {
    let (base, c) = base_learner(LossKind::Triplet, ConvActivation::Relu);
    let mut zero = c.clone();
    zero.params.lambda_ae = 0.0;
    let mut aes = vec![fit_base_autoencoder(&base, &toy_set(&[0, 1, 2], 12, 1), &zero).unwrap()];
    let data = session(&[3, 1], 2);
    let mut normal = base.clone();
    train_normal_session(&mut normal, &data, &c, 1).unwrap();
    let mut ebll = base.clone();
    train_ebll_session(&mut ebll, &mut aes, &data, &zero, 1).unwrap();
    assert_eq!(bits(&ebll), bits(&normal));
    assert_eq!(aes.len(), 2);
}

#[test]
fn ewc_penalty_vanishes_at_session_start() {
    let (base, c) = base_learner(LossKind::Contrastive, ConvActivation::Relu);
    let fisher = initial_fisher(&base, &toy_set(&[0, 1, 2], 12, 1), &c).unwrap();
    assert!(fisher.is_nonnegative());
    assert_eq!(ewc_penalty(base.net.params(), &fisher).unwrap().0, 0.0);
    let mut moved = base.clone();
    let mut f = fisher.clone();
    train_ewc_session(&mut moved, &mut f, &session(&[3, 0], 2), &c, 1).unwrap();
    assert!(ewc_penalty(moved.net.params(), &fisher).unwrap().0 > 0.0);
    assert_eq!(ewc_penalty(moved.net.params(), &f).unwrap().0, 0.0);
}

#[test]
fn vae_replay_keeps_conv_frozen_and_grows_store() {
    let (mut l, c) = base_learner(LossKind::Contrastive, ConvActivation::Sigmoid);
    let mut store = ExemplarStore::for_vaes();
    assert!(matches!(
        populate_vaes(&l, &mut store, &toy_set(&[0, 1, 2], 12, 1), &c),
        Err(StrategyError::Refused(_))
    ));
    l.net.set_frozen_feature_extractor(true);
    populate_vaes(&l, &mut store, &toy_set(&[0, 1, 2], 12, 1), &c).unwrap();
    let conv_before: Vec<Tensor> = l.net.conv_params().into_iter().cloned().collect();
    let fc_before = l.net.params().tensor(6).clone();
    for (t, new) in [3usize, 4, 5].into_iter().enumerate() {
        train_vae_replay_session(&mut l, &mut store, &session(&[new], 10 + t as u64), &c, t + 1).unwrap();
        assert_eq!(store.len(), 3 + t + 1);
        let now: Vec<Tensor> = l.net.conv_params().into_iter().cloned().collect();
        assert_eq!(now, conv_before);
    }
    assert_ne!(l.net.params().tensor(6), &fc_before);

    let mut unfrozen = l.clone();
    unfrozen.net.set_frozen_feature_extractor(false);
    let r = train_vae_replay_session(&mut unfrozen, &mut store, &session(&[6], 30), &c, 4);
    assert!(matches!(r, Err(StrategyError::Refused(_))));
}

#[test]
fn vae_replay_with_center_loss_expands_head() {
    let (mut l, c) = base_learner(LossKind::Center, ConvActivation::Sigmoid);
    l.net.set_frozen_feature_extractor(true);
    let mut store = ExemplarStore::for_vaes();
    populate_vaes(&l, &mut store, &toy_set(&[0, 1, 2], 12, 1), &c).unwrap();
    train_vae_replay_session(&mut l, &mut store, &session(&[3], 5), &c, 1).unwrap();
    assert_eq!(l.net.head_classes(), 4);
    assert_eq!(l.centers.as_ref().unwrap().classes(), 4);
}

#[test]
fn icarl_store_respects_budget_every_session() {
    let (mut l, c) = base_learner(LossKind::Contrastive, ConvActivation::Relu);
    let mut store = ExemplarStore::images(c.params.exemplar_budget);
    populate_exemplars(&l, &mut store, &toy_set(&[0, 1, 2], 12, 1), &c.params).unwrap();
    assert_eq!(store.counts().values().copied().collect::<Vec<_>>(), vec![3, 3, 3]);
    let mut seen = vec![0, 1, 2];
    for (t, new) in [3usize, 4, 5, 6].into_iter().enumerate() {
        train_icarl_session(&mut l, &mut store, &session(&[new], 40 + t as u64), &c, t + 1).unwrap();
        seen.push(new);
        assert!(store.total_images() <= c.params.exemplar_budget);
        let k = c.params.exemplar_budget / seen.len();
        assert!(store.counts().values().all(|&n| n == k));
        assert_eq!(store.classes(), {
            let mut s = seen.clone();
            s.sort_unstable();
            s
        });
    }
}

#[test]
fn teacher_snapshot_is_unaffected_by_student_training() {
    let (mut l, c) = base_learner(LossKind::Triplet, ConvActivation::Relu);
    let probe = toy_set(&[0, 1], 3, 77);
    let teacher = l.net.clone();
    let before = teacher.embed(&probe.images, &probe.labels).unwrap();
    let mut store = ExemplarStore::images(c.params.exemplar_budget);
    populate_exemplars(&l, &mut store, &toy_set(&[0, 1, 2], 12, 1), &c.params).unwrap();
    train_icarl_session(&mut l, &mut store, &session(&[3], 8), &c, 1).unwrap();
    assert_eq!(teacher.embed(&probe.images, &probe.labels).unwrap(), before);
    assert_ne!(l.net.embed(&probe.images, &probe.labels).unwrap(), before);
}

#[test]
fn sessions_are_deterministic() {
    let run = || {
        let (mut l, c) = base_learner(LossKind::Triplet, ConvActivation::Relu);
        train_normal_session(&mut l, &session(&[3, 2], 4), &c, 1).unwrap();
        bits(&l)
    };
    assert_eq!(run(), run());
}
