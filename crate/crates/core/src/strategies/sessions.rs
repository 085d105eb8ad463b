use std::collections::BTreeSet;

use super::autoencoder::FeatureAutoencoder;
use super::exemplars::{select_exemplars, ExemplarStore, StoreEntry};
use super::trainer::{batches_of, fit, sequential_batches, shuffled_batches, Batch, ExtraTerm, FitReport, TrainConfig};
use super::vae::{fit_class_vae, sample_replay_features};
use super::{StrategyError, StrategyParams};
use crate::data::ImageSet;
use crate::losses::{
    angle_distill_term, compute_fisher_diagonal, ebll_code_term, ewc_term, kd_distill_term, CenterState, FisherDiag,
    LossConfig,
};
use crate::net::{EmbeddingNet, ForwardOut, EMBEDDING_DIM};
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::{Graph, Tensor, Var};

/// A network plus the centre-loss state that travels with it.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub net: EmbeddingNet,
    pub centers: Option<CenterState>,
}

impl Learner {
    pub fn new(net: EmbeddingNet, loss: &LossConfig) -> Self {
        let centers = loss
            .needs_head()
            .then(|| CenterState::new(0, EMBEDDING_DIM, loss.center_lambda, loss.center_lr));
        Self { net, centers }
    }

    /// Grows the classifier head and centres to `classes` outputs when a
    /// centre state is present.
    pub fn ensure_classes(&mut self, classes: usize) -> Result<(), StrategyError> {
        if let Some(c) = self.centers.as_mut() {
            if classes > self.net.head_classes() {
                self.net.expand_classifier(classes)?;
            }
            c.expand(classes);
        }
        Ok(())
    }

    fn ensure_labels(&mut self, labels: &[usize]) -> Result<(), StrategyError> {
        match labels.iter().max() {
            Some(&m) => self.ensure_classes(m + 1),
            None => Ok(()),
        }
    }
}

/// Training and validation items of one session. Labels are the learner's
/// class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionData {
    pub train: ImageSet,
    pub validation: ImageSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionContext {
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub params: StrategyParams,
    pub seed: u64,
}

impl SessionContext {
    fn stream(&self, session: usize, name: &str) -> ChaCha8Rng {
        rng::stream(rng::derive_seed(self.seed, session as u64), name)
    }
}

fn fit_on(
    learner: &mut Learner,
    inputs: &Tensor,
    labels: &[usize],
    validation: &[Batch],
    ctx: &SessionContext,
    session: usize,
    extra: Option<&mut ExtraTerm<'_>>,
) -> Result<FitReport, StrategyError> {
    if labels.is_empty() {
        return Err(StrategyError::Input(format!("session {session} has no training items")));
    }
    let mut r = ctx.stream(session, "batches");
    let bs = ctx.train.batch_size;
    let mut epochs = |_| Ok(batches_of(inputs, labels, &shuffled_batches(labels.len(), bs, &mut r)));
    let report = fit(
        &mut learner.net,
        learner.centers.as_mut(),
        &ctx.loss,
        &ctx.train,
        &mut epochs,
        validation,
        extra,
    )?;
    log::info!(
        "session {session}: {} epochs, best {} (validation {:?}), {} skipped batches",
        report.epochs_run,
        report.best_epoch,
        report.best_validation_loss(),
        report.skipped_batches
    );
    Ok(report)
}

/// Validation items in fixed, seeded batches.
fn validation_batches(inputs: &Tensor, labels: &[usize], ctx: &SessionContext, session: usize) -> Vec<Batch> {
    let mut r = ctx.stream(session, "validation");
    batches_of(
        inputs,
        labels,
        &shuffled_batches(labels.len(), ctx.train.batch_size, &mut r),
    )
}

fn prepare(
    learner: &mut Learner,
    data: &SessionData,
    ctx: &SessionContext,
    session: usize,
) -> Result<Vec<Batch>, StrategyError> {
    learner.ensure_labels(&data.train.labels)?;
    learner.ensure_labels(&data.validation.labels)?;
    Ok(validation_batches(
        &data.validation.images,
        &data.validation.labels,
        ctx,
        session,
    ))
}

/// Joint training on the base classes (session 0).
pub fn train_base(learner: &mut Learner, data: &SessionData, ctx: &SessionContext) -> Result<FitReport, StrategyError> {
    let validation = prepare(learner, data, ctx, 0)?;
    fit_on(
        learner,
        &data.train.images,
        &data.train.labels,
        &validation,
        ctx,
        0,
        None,
    )
}

/// Plain fine-tuning on the new class and its paired old class.
pub fn train_normal_session(
    learner: &mut Learner,
    data: &SessionData,
    ctx: &SessionContext,
    session: usize,
) -> Result<FitReport, StrategyError> {
    let validation = prepare(learner, data, ctx, session)?;
    fit_on(
        learner,
        &data.train.images,
        &data.train.labels,
        &validation,
        ctx,
        session,
        None,
    )
}

fn estimate_fisher(learner: &Learner, set: &ImageSet, ctx: &SessionContext) -> Result<FisherDiag, StrategyError> {
    let mut batches = sequential_batches(&set.images, &set.labels, ctx.train.batch_size);
    if ctx.params.fisher_batches > 0 {
        batches.truncate(ctx.params.fisher_batches);
    }
    let pairs: Vec<(Tensor, Vec<usize>)> = batches.into_iter().map(|b| (b.inputs, b.labels)).collect();
    let est = compute_fisher_diagonal(
        &learner.net,
        &pairs,
        &ctx.loss,
        learner.centers.as_ref(),
        ctx.params.lambda_ewc,
    )?;
    log::debug!("fisher: {} batches used, {} skipped", est.batches, est.skipped);
    Ok(est.fisher)
}

/// Fisher diagonal of the trained base model on its training data.
pub fn initial_fisher(learner: &Learner, base: &ImageSet, ctx: &SessionContext) -> Result<FisherDiag, StrategyError> {
    estimate_fisher(learner, base, ctx)
}

/// Similarity loss plus the EWC penalty; afterwards this session's Fisher
/// is added to `fisher` and the anchor moves to the new parameters.
pub fn train_ewc_session(
    learner: &mut Learner,
    fisher: &mut FisherDiag,
    data: &SessionData,
    ctx: &SessionContext,
    session: usize,
) -> Result<FitReport, StrategyError> {
    let validation = prepare(learner, data, ctx, session)?;
    let anchor: &FisherDiag = fisher;
    let mut extra = |g: &mut Graph, net: &EmbeddingNet, vars: &[Var], _: &ForwardOut, _: &Batch| {
        Ok(Some(ewc_term(g, vars, net.params(), anchor)?))
    };
    let report = fit_on(
        learner,
        &data.train.images,
        &data.train.labels,
        &validation,
        ctx,
        session,
        Some(&mut extra),
    )?;
    let newer = estimate_fisher(learner, &data.train, ctx)?;
    fisher.accumulate(newer)?;
    Ok(report)
}

/// Fits the autoencoder for the features `learner` now produces on `set`.
pub fn fit_session_autoencoder(
    learner: &Learner,
    set: &ImageSet,
    ctx: &SessionContext,
    session: usize,
) -> Result<FeatureAutoencoder, StrategyError> {
    let features = learner.net.conv_features_any(&set.images)?;
    let seed = rng::derive_seed(rng::derive_seed(ctx.seed, session as u64), rng::tag("autoencoder"));
    let ae = FeatureAutoencoder::fit(
        &learner.net,
        &features,
        &set.labels,
        &ctx.loss,
        &ctx.params.autoencoder,
        seed,
    )?;
    log::info!(
        "session {session}: autoencoder reconstruction mse {:.5}",
        ae.reconstruction_mse(&features)?
    );
    Ok(ae)
}

/// Autoencoder of the base task.
pub fn fit_base_autoencoder(
    learner: &Learner,
    base: &ImageSet,
    ctx: &SessionContext,
) -> Result<FeatureAutoencoder, StrategyError> {
    fit_session_autoencoder(learner, base, ctx, 0)
}

/// Similarity loss plus `lambda_ae` times the code constraint of every
/// stored autoencoder against a frozen snapshot; a new autoencoder is
/// fitted on this session's data afterwards.
pub fn train_ebll_session(
    learner: &mut Learner,
    autoencoders: &mut Vec<FeatureAutoencoder>,
    data: &SessionData,
    ctx: &SessionContext,
    session: usize,
) -> Result<FitReport, StrategyError> {
    let validation = prepare(learner, data, ctx, session)?;
    let teacher = learner.net.clone();
    let encoders: Vec<_> = autoencoders.iter().map(FeatureAutoencoder::code_encoder).collect();
    let lambda = ctx.params.lambda_ae;
    let mut extra = |g: &mut Graph, _: &EmbeddingNet, _: &[Var], out: &ForwardOut, batch: &Batch| {
        if encoders.is_empty() {
            return Ok(None);
        }
        let frozen = teacher.conv_features_any(&batch.inputs)?;
        let mut total: Option<Var> = None;
        for enc in &encoders {
            let codes = enc.encode(&frozen)?;
            let t = ebll_code_term(g, out.features, &codes, enc)?;
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
        Ok(total.map(|t| g.scale(t, lambda)))
    };
    let report = fit_on(
        learner,
        &data.train.images,
        &data.train.labels,
        &validation,
        ctx,
        session,
        Some(&mut extra),
    )?;
    autoencoders.push(fit_session_autoencoder(learner, &data.train, ctx, session)?);
    Ok(report)
}

/// Distillation against a frozen teacher: angle-wise on embeddings, or
/// softened logits for centre loss. `rows` restricts it to replayed rows.
fn distill_term(
    g: &mut Graph,
    teacher: &EmbeddingNet,
    out: &ForwardOut,
    inputs: &Tensor,
    rows: Option<&[usize]>,
    ctx: &SessionContext,
) -> Result<Option<Var>, StrategyError> {
    let picked;
    let teacher_input = match rows {
        Some(r) => {
            picked = inputs.select_rows(r);
            &picked
        }
        None => inputs,
    };
    let term = match out.logits {
        Some(logits) if ctx.loss.needs_head() => {
            let t = teacher.logits(teacher_input)?;
            Some(kd_distill_term(g, logits, rows, &t, ctx.params.kd_temperature)?)
        }
        _ => {
            let t = teacher.embed(teacher_input, &vec![0; teacher_input.rows()])?;
            angle_distill_term(g, out.embedding, rows, &t.vectors)?
        }
    };
    Ok(term.map(|t| g.scale(t, ctx.params.lambda_distill)))
}

fn with_store_images(set: &ImageSet, store: &ExemplarStore) -> Result<(Tensor, Vec<usize>), StrategyError> {
    match store.stacked_images() {
        Some((x, y)) => {
            let inputs = Tensor::concat_rows(&[&set.images, &x])?;
            let mut labels = set.labels.clone();
            labels.extend(y);
            Ok((inputs, labels))
        }
        None => Ok((set.images.clone(), set.labels.clone())),
    }
}

/// Trains on the session data together with the stored exemplars, with
/// distillation against the pre-session network, then rebalances the store.
pub fn train_icarl_session(
    learner: &mut Learner,
    store: &mut ExemplarStore,
    data: &SessionData,
    ctx: &SessionContext,
    session: usize,
) -> Result<FitReport, StrategyError> {
    let teacher = learner.net.clone();
    learner.ensure_labels(&data.train.labels)?;
    let (inputs, labels) = with_store_images(&data.train, store)?;
    let (vx, vy) = with_store_images(&data.validation, store)?;
    learner.ensure_labels(&labels)?;
    let validation = validation_batches(&vx, &vy, ctx, session);
    let mut extra = |g: &mut Graph, _: &EmbeddingNet, _: &[Var], out: &ForwardOut, batch: &Batch| {
        distill_term(g, &teacher, out, &batch.inputs, None, ctx)
    };
    let report = fit_on(learner, &inputs, &labels, &validation, ctx, session, Some(&mut extra))?;
    update_exemplars(learner, store, &data.train, &ctx.params)?;
    Ok(report)
}

/// Adds the classes of `new` to an image store and shrinks every class to
/// `budget / seen` exemplars, re-selected with the current network.
pub fn update_exemplars(
    learner: &Learner,
    store: &mut ExemplarStore,
    new: &ImageSet,
    params: &StrategyParams,
) -> Result<(), StrategyError> {
    store.budget = params.exemplar_budget;
    let incoming: BTreeSet<usize> = new.labels.iter().copied().filter(|c| !store.contains(*c)).collect();
    let seen = store.len() + incoming.len();
    if seen == 0 {
        return Ok(());
    }
    let k = store.budget / seen;
    if k == 0 {
        return Err(StrategyError::Input(format!(
            "exemplar budget {} is smaller than the {seen} seen classes",
            store.budget
        )));
    }
    for c in store.classes() {
        let Some(StoreEntry::Images(images)) = store.get(c).cloned() else {
            return Err(StrategyError::Input("exemplar update needs an image store".into()));
        };
        let chosen = pick(learner, &images, c, k)?;
        store.insert(c, StoreEntry::Images(images.select_rows(&chosen)))?;
    }
    let by_class = new.class_indices();
    for c in incoming {
        let images = new.images.select_rows(&by_class[&c]);
        let chosen = pick(learner, &images, c, k)?;
        store.insert(c, StoreEntry::Images(images.select_rows(&chosen)))?;
    }
    Ok(())
}

fn pick(learner: &Learner, images: &Tensor, class: usize, k: usize) -> Result<Vec<usize>, StrategyError> {
    let emb = learner.net.embed(images, &vec![class; images.rows()])?;
    let sel = select_exemplars(&emb, k)?;
    if !sel.short.is_empty() {
        log::warn!("class {class}: only {} items for {k} exemplar slots", images.rows());
    }
    Ok(sel.per_class.get(&class).cloned().unwrap_or_default())
}

/// Exemplars of the base classes.
pub fn populate_exemplars(
    learner: &Learner,
    store: &mut ExemplarStore,
    base: &ImageSet,
    params: &StrategyParams,
) -> Result<(), StrategyError> {
    update_exemplars(learner, store, base, params)
}

fn require_frozen(learner: &Learner) -> Result<(), StrategyError> {
    if !learner.net.is_frozen() {
        return Err(StrategyError::Refused(
            "VAE replay needs a frozen feature extractor; replayed features would not match a moving one".into(),
        ));
    }
    Ok(())
}

/// Fits one VAE per class of `set` that the store does not hold yet, in
/// ascending class order.
pub fn populate_vaes(
    learner: &Learner,
    store: &mut ExemplarStore,
    set: &ImageSet,
    ctx: &SessionContext,
) -> Result<(), StrategyError> {
    require_frozen(learner)?;
    let features = learner.net.conv_features(&set.images)?;
    let seed = rng::derive_seed(ctx.seed, rng::tag("class-vae"));
    for (c, rows) in set.class_indices() {
        if store.contains(c) {
            continue;
        }
        let (vae, rep) = fit_class_vae(c, &features.select_rows(&rows), &ctx.params.vae, seed)?;
        log::info!(
            "class {c}: vae holdout bce {:.3} -> {:.3} ({} epochs)",
            rep.initial_holdout_bce,
            rep.final_holdout_bce,
            rep.epochs_run
        );
        store.insert(c, StoreEntry::Vae(Box::new(vae)))?;
    }
    Ok(())
}

/// Real features in chunks of `half`, each topped up with a class-balanced
/// replay sample of about the same size.
fn mixed_batches(
    features: &Tensor,
    labels: &[usize],
    index_batches: &[Vec<usize>],
    store: &ExemplarStore,
    r: &mut ChaCha8Rng,
) -> Result<Vec<Batch>, StrategyError> {
    let mut out = Vec::with_capacity(index_batches.len());
    for b in batches_of(features, labels, index_batches) {
        if store.is_empty() {
            out.push(b);
            continue;
        }
        let per_class = b.len().div_ceil(store.len());
        let replay = sample_replay_features(store.vaes(), per_class, r)?;
        let start = b.len();
        let inputs = Tensor::concat_rows(&[&b.inputs, &replay.features])?;
        let mut all = b.labels;
        all.extend(&replay.labels);
        out.push(Batch {
            inputs,
            replay_rows: Some((start..all.len()).collect()),
            labels: all,
        });
    }
    Ok(out)
}

/// Trains the fully connected layers on real conv features of the session
/// mixed 50/50 with VAE replay, distilling the replayed rows against the
/// pre-session network, then fits VAEs for the new classes.
pub fn train_vae_replay_session(
    learner: &mut Learner,
    store: &mut ExemplarStore,
    data: &SessionData,
    ctx: &SessionContext,
    session: usize,
) -> Result<FitReport, StrategyError> {
    require_frozen(learner)?;
    let teacher = learner.net.clone();
    prepare(learner, data, ctx, session)?;
    learner.ensure_labels(&store.classes())?;
    let train_f = learner.net.conv_features(&data.train.images)?;
    let val_f = learner.net.conv_features(&data.validation.images)?;
    let half = (ctx.train.batch_size / 2).max(1);

    let mut vr = ctx.stream(session, "replay-validation");
    let val_idx: Vec<Vec<usize>> = (0..data.validation.len())
        .collect::<Vec<_>>()
        .chunks(half)
        .map(<[usize]>::to_vec)
        .collect();
    let validation = mixed_batches(&val_f, &data.validation.labels, &val_idx, store, &mut vr)?;

    let mut br = ctx.stream(session, "batches");
    let mut rr = ctx.stream(session, "replay");
    let labels = &data.train.labels;
    let replay_store: &ExemplarStore = store;
    let mut epochs = |_| {
        let idx = shuffled_batches(labels.len(), half, &mut br);
        mixed_batches(&train_f, labels, &idx, replay_store, &mut rr)
    };
    let mut extra =
        |g: &mut Graph, _: &EmbeddingNet, _: &[Var], out: &ForwardOut, batch: &Batch| match &batch.replay_rows {
            Some(rows) if !rows.is_empty() => distill_term(g, &teacher, out, &batch.inputs, Some(rows), ctx),
            _ => Ok(None),
        };
    let report = fit(
        &mut learner.net,
        learner.centers.as_mut(),
        &ctx.loss,
        &ctx.train,
        &mut epochs,
        &validation,
        Some(&mut extra),
    )?;
    log::info!(
        "session {session}: {} epochs, best {} (validation {:?})",
        report.epochs_run,
        report.best_epoch,
        report.best_validation_loss()
    );
    populate_vaes(learner, store, &data.train, ctx)?;
    Ok(report)
}
