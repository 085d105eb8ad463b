use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Pairing};
use super::HarnessError;
use crate::data::{
    augment, load_image_set, make_session_plan, parse_label_remap, train_val_test_split, ImageSet, SessionPlan,
    SplitTriple,
};
use crate::eval::{mean_ap_at_r, mean_ap_at_r_for, omega_metrics, OmegaReport, SessionLog, SessionRecord};
use crate::losses::CenterState;
use crate::net::{Checkpoint, ConvActivation, EmbeddingNet, NetConfig};
use crate::rng;
use crate::strategies::{
    fit_base_autoencoder, initial_fisher, populate_exemplars, populate_vaes, train_base, train_ebll_session,
    train_ewc_session, train_icarl_session, train_normal_session, train_vae_replay_session, ExemplarStore,
    FeatureAutoencoder, Learner, SessionContext, SessionData, StrategyError, StrategyKind,
};
pub const FAILURE_MARKER: &str = "FAILED";

/// The dataset of one seed, relabelled so that class ids follow arrival
/// order: base classes are `0..base`, session `t` introduces class
/// `base + t - 1`.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub plan: SessionPlan,
    pub split: SplitTriple,
    pub base: usize,
    pub classes: usize,
}

impl PreparedData {
    pub fn sessions(&self) -> usize {
        self.classes - self.base
    }

    fn class_data(&self, classes: &[usize]) -> SessionData {
        SessionData {
            train: self.split.train.filter_classes(classes),
            validation: self.split.validation.filter_classes(classes),
        }
    }

    fn net_config(&self, activation: ConvActivation) -> Result<NetConfig, HarnessError> {
        let s = self.split.train.images.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(HarnessError::Config(format!(
                "square [N, C, H, W] images are required, got {s:?}"
            )));
        }
        Ok(NetConfig {
            in_channels: s[1],
            image_size: s[2],
            final_conv_activation: activation,
        })
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<ImageSet, HarnessError> {
    let d = &cfg.dataset;
    let remap = match &d.label_remap {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| HarnessError::Io {
                path: p.display().to_string(),
                source,
            })?;
            Some(parse_label_remap(&text)?)
        }
        None => None,
    };
    let set = load_image_set(&d.images, &d.labels, remap.as_deref())?;
    let set = if d.max_per_class > 0 {
        set.cap_per_class(d.max_per_class)
    } else {
        set
    };
    Ok(set.normalize(&d.mean, &d.std)?)
}

pub fn session_plan(cfg: &ExperimentConfig, class_count: usize, seed: u64) -> Result<SessionPlan, HarnessError> {
    let plan = make_session_plan(class_count, seed)?;
    Ok(if cfg.sessions > 0 {
        plan.limit_sessions(cfg.sessions)
    } else {
        plan
    })
}

/// Plans the classes, drops the ones outside the plan, relabels to
/// arrival order and splits every class into train / validation / test.
pub fn prepare_data(cfg: &ExperimentConfig, set: &ImageSet, seed: u64) -> Result<PreparedData, HarnessError> {
    let plan = session_plan(cfg, set.class_count, seed)?;
    let order = plan.arrival_order();
    let mut map = vec![usize::MAX; set.class_count];
    for (new, &old) in order.iter().enumerate() {
        map[old] = new;
    }
    let present = set.filter_classes(&order);
    let missing: Vec<usize> = order.iter().copied().filter(|c| !present.labels.contains(c)).collect();
    if !missing.is_empty() {
        return Err(HarnessError::Config(format!(
            "planned classes {missing:?} have no items"
        )));
    }
    let relabelled = present.relabel(&map, order.len())?;
    let split = train_val_test_split(
        &relabelled,
        cfg.dataset.test_fraction,
        cfg.dataset.validation_fraction,
        rng::derive_seed(seed, rng::tag("split")),
    )?;
    Ok(PreparedData {
        base: plan.base_classes.len(),
        classes: order.len(),
        plan,
        split,
    })
}

fn context(cfg: &ExperimentConfig, seed: u64) -> SessionContext {
    SessionContext {
        loss: cfg.loss.clone(),
        train: cfg.train.clone(),
        params: cfg.strategy.clone(),
        seed,
    }
}

fn net_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, rng::tag("net"))
}

fn augmented(cfg: &ExperimentConfig, data: SessionData, seed: u64, session: usize) -> SessionData {
    let d = &cfg.dataset;
    if d.augment_pad == 0 && d.flip_probability == 0.0 {
        return data;
    }
    let mut r = rng::stream(rng::derive_seed(seed, session as u64), "augment");
    let images = augment(&data.train.images, d.augment_pad, d.flip_probability, &mut r);
    SessionData {
        train: ImageSet { images, ..data.train },
        validation: data.validation,
    }
}

/// mAP@R of `net` on the test items of the first `seen` classes: the base
/// classes alone, the classes in `new` as queries against every seen test
/// item, and all seen items together.
pub fn evaluate(
    net: &EmbeddingNet,
    test: &ImageSet,
    base: usize,
    seen: usize,
    new: std::ops::Range<usize>,
    session: usize,
) -> Result<SessionRecord, HarnessError> {
    let classes: Vec<usize> = (0..seen).collect();
    let set = test.filter_classes(&classes);
    let emb = net.embed(&set.images, &set.labels)?;
    let base_rows: Vec<usize> = (0..emb.len()).filter(|&i| emb.labels[i] < base).collect();
    let new_rows: Vec<usize> = (0..emb.len()).filter(|&i| new.contains(&emb.labels[i])).collect();
    Ok(SessionRecord {
        session,
        classes_seen: seen,
        alpha_base: mean_ap_at_r(&emb.subset(&base_rows))?,
        alpha_new: mean_ap_at_r_for(&emb, &new_rows)?,
        alpha_all: mean_ap_at_r(&emb)?,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub(crate) fn read_file(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed_{seed}"))
}

pub fn strategy_dir(cfg: &ExperimentConfig, seed: u64, strategy: StrategyKind) -> PathBuf {
    seed_dir(cfg, seed).join(strategy.as_str())
}

fn base_path(cfg: &ExperimentConfig, seed: u64, activation: ConvActivation) -> PathBuf {
    seed_dir(cfg, seed).join(format!("base_{}.ckpt", activation.as_str()))
}

/// Network checkpoint with the centre-loss state attached.
pub fn learner_checkpoint(l: &Learner) -> Checkpoint {
    let mut ck = l.net.to_checkpoint();
    if let Some(c) = &l.centers {
        ck.descriptor
            .insert("center_lambda".into(), c.lambda_weight.to_string());
        ck.descriptor.insert("center_lr".into(), c.center_lr.to_string());
        ck.tensors.push(("centers".into(), c.centers.clone()));
    }
    ck
}

pub fn learner_from_checkpoint(ck: &Checkpoint) -> Result<Learner, HarnessError> {
    let net = EmbeddingNet::from_checkpoint(ck)?;
    let centers = match ck.get("centers") {
        Some(t) => Some(CenterState {
            centers: t.clone(),
            lambda_weight: ck.parse_field("center_lambda")?,
            center_lr: ck.parse_field("center_lr")?,
        }),
        None => None,
    };
    Ok(Learner { net, centers })
}

/// Trained base model plus its base-session record.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub learner: Learner,
    pub record: SessionRecord,
}

/// Trains the base model for `activation` on the base classes and saves
/// its checkpoint.
pub fn train_base_model(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    activation: ConvActivation,
) -> Result<BaseModel, HarnessError> {
    let ctx = context(cfg, seed);
    let net = EmbeddingNet::new(data.net_config(activation)?, net_seed(seed))?;
    let mut learner = Learner::new(net, &cfg.loss);
    let base: Vec<usize> = (0..data.base).collect();
    let session = augmented(cfg, data.class_data(&base), seed, 0);
    log::info!(
        "seed {seed}: training {} base model on {} items",
        activation.as_str(),
        session.train.len()
    );
    train_base(&mut learner, &session, &ctx).map_err(|e| HarnessError::training(seed, "base", 0, e))?;
    let path = base_path(cfg, seed, activation);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    learner_checkpoint(&learner).save(&path)?;
    let record = evaluate(&learner.net, &data.split.test, data.base, data.base, 0..data.base, 0)?;
    Ok(BaseModel { learner, record })
}

/// Loads a saved base model, or trains it when no checkpoint exists.
pub fn base_model(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    activation: ConvActivation,
) -> Result<BaseModel, HarnessError> {
    let path = base_path(cfg, seed, activation);
    if !path.exists() {
        return train_base_model(cfg, data, seed, activation);
    }
    let learner = learner_from_checkpoint(&Checkpoint::load(&path)?)?;
    let record = evaluate(&learner.net, &data.split.test, data.base, data.base, 0..data.base, 0)?;
    Ok(BaseModel { learner, record })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ideals {
    pub base: f64,
    pub all: f64,
    pub supplied: bool,
}

/// Trains one model jointly on every planned class and reports its mAP@R
/// on the base-test items and on the entire test set.
pub fn run_offline_ideal(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<Ideals, HarnessError> {
    let ideal_seed = rng::derive_seed(seed, rng::tag("ideal"));
    let ctx = context(cfg, ideal_seed);
    let net = EmbeddingNet::new(data.net_config(ConvActivation::Relu)?, net_seed(ideal_seed))?;
    let mut learner = Learner::new(net, &cfg.loss);
    let all: Vec<usize> = (0..data.classes).collect();
    let session = augmented(cfg, data.class_data(&all), ideal_seed, 0);
    log::info!("seed {seed}: training offline ideal on {} items", session.train.len());
    train_base(&mut learner, &session, &ctx).map_err(|e| HarnessError::training(seed, "ideal", 0, e))?;
    learner_checkpoint(&learner).save(&seed_dir(cfg, seed).join("ideal.ckpt"))?;
    let r = evaluate(
        &learner.net,
        &data.split.test,
        data.base,
        data.classes,
        0..data.classes,
        0,
    )?;
    let ideals = Ideals {
        base: r.alpha_base,
        all: r.alpha_all,
        supplied: false,
    };
    save_ideals(cfg, seed, &ideals)?;
    Ok(ideals)
}

pub fn save_ideals(cfg: &ExperimentConfig, seed: u64, ideals: &Ideals) -> Result<(), HarnessError> {
    let text = toml::to_string(ideals).expect("ideals always serialise");
    write_file(&seed_dir(cfg, seed).join("ideal.toml"), &text)
}

pub fn load_ideals(cfg: &ExperimentConfig, seed: u64) -> Result<Option<Ideals>, HarnessError> {
    let path = seed_dir(cfg, seed).join("ideal.toml");
    if !path.exists() {
        return Ok(None);
    }
    let text = read_file(&path)?;
    toml::from_str(&text)
        .map(Some)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// Supplied ideals, else saved ones, else a fresh offline run.
pub fn ideals_for(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<Ideals, HarnessError> {
    if let Some(i) = cfg.ideal {
        let ideals = Ideals {
            base: i.base,
            all: i.all,
            supplied: true,
        };
        save_ideals(cfg, seed, &ideals)?;
        return Ok(ideals);
    }
    match load_ideals(cfg, seed)? {
        Some(i) if !i.supplied => Ok(i),
        _ => run_offline_ideal(cfg, data, seed),
    }
}

/// Session log of one strategy and seed, as written to `log.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub strategy: StrategyKind,
    pub loss: String,
    pub dataset: String,
    pub seed: u64,
    /// Incremental sessions planned.
    pub planned_sessions: usize,
    pub log: SessionLog,
    pub omega: Option<OmegaReport>,
    pub failure: Option<String>,
}

impl StrategyRun {
    fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        let text = toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        write_file(&dir.join("log.toml"), &text)
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join("log.toml");
        toml::from_str(&read_file(&path)?).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

/// Retained state of one strategy between sessions.
enum Memory {
    None,
    Fisher(crate::losses::FisherDiag),
    Autoencoders(Vec<FeatureAutoencoder>),
    Store(ExemplarStore),
}

fn paired_class(pairing: Pairing, base: usize, session: usize) -> usize {
    let seen = base + session - 1;
    match pairing {
        Pairing::Fixed => 0,
        Pairing::Rotate => (session - 1) % seen,
    }
}

fn prepare_memory(
    strategy: StrategyKind,
    learner: &mut Learner,
    data: &PreparedData,
    ctx: &SessionContext,
) -> Result<Memory, StrategyError> {
    let base: Vec<usize> = (0..data.base).collect();
    let train = data.split.train.filter_classes(&base);
    Ok(match strategy {
        StrategyKind::Normal => Memory::None,
        StrategyKind::Ewc => Memory::Fisher(initial_fisher(learner, &train, ctx)?),
        StrategyKind::Ebll => Memory::Autoencoders(vec![fit_base_autoencoder(learner, &train, ctx)?]),
        StrategyKind::Icarl => {
            let mut store = ExemplarStore::images(ctx.params.exemplar_budget);
            populate_exemplars(learner, &mut store, &train, &ctx.params)?;
            Memory::Store(store)
        }
        StrategyKind::Vae => {
            learner.net.set_frozen_feature_extractor(true);
            let mut store = ExemplarStore::for_vaes();
            populate_vaes(learner, &mut store, &train, ctx)?;
            Memory::Store(store)
        }
    })
}

fn train_session(
    strategy: StrategyKind,
    learner: &mut Learner,
    memory: &mut Memory,
    data: &SessionData,
    ctx: &SessionContext,
    session: usize,
) -> Result<(), StrategyError> {
    match (strategy, memory) {
        (StrategyKind::Normal, _) => train_normal_session(learner, data, ctx, session),
        (StrategyKind::Ewc, Memory::Fisher(f)) => train_ewc_session(learner, f, data, ctx, session),
        (StrategyKind::Ebll, Memory::Autoencoders(a)) => train_ebll_session(learner, a, data, ctx, session),
        (StrategyKind::Icarl, Memory::Store(s)) => train_icarl_session(learner, s, data, ctx, session),
        (StrategyKind::Vae, Memory::Store(s)) => train_vae_replay_session(learner, s, data, ctx, session),
        _ => unreachable!("memory is prepared per strategy"),
    }?;
    Ok(())
}

/// Runs every incremental session of `strategy` from `base`, saving a
/// checkpoint and the log after each session. On an abort the partial log
/// and a failure marker are written before the error is returned.
pub fn run_strategy(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    strategy: StrategyKind,
    base: &BaseModel,
    ideals: &Ideals,
) -> Result<StrategyRun, HarnessError> {
    let dir = strategy_dir(cfg, seed, strategy);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ctx = context(cfg, seed);
    let mut run = StrategyRun {
        strategy,
        loss: cfg.loss.kind.as_str().into(),
        dataset: cfg.dataset.name.clone(),
        seed,
        planned_sessions: data.sessions(),
        log: SessionLog {
            records: vec![base.record.clone()],
            ideal_base: ideals.base,
            ideal_all: ideals.all,
        },
        omega: None,
        failure: None,
    };
    run.save(&dir)?;
    let result = run_sessions(cfg, data, &ctx, strategy, base, &dir, &mut run);
    if let Err(e) = &result {
        run.failure = Some(e.to_string());
        run.save(&dir)?;
        write_file(&dir.join(FAILURE_MARKER), &format!("{e}\n"))?;
        return Err(result.unwrap_err());
    }
    if data.sessions() > 0 {
        run.omega = Some(omega_metrics(&run.log)?);
    }
    run.save(&dir)?;
    Ok(run)
}

fn run_sessions(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    ctx: &SessionContext,
    strategy: StrategyKind,
    base: &BaseModel,
    dir: &Path,
    run: &mut StrategyRun,
) -> Result<(), HarnessError> {
    let seed = run.seed;
    let mut learner = base.learner.clone();
    let mut memory = prepare_memory(strategy, &mut learner, data, ctx)
        .map_err(|e| HarnessError::training(seed, strategy.as_str(), 0, e))?;
    for session in 1..=data.sessions() {
        let new = data.base + session - 1;
        let classes = if strategy.uses_paired_class() {
            vec![paired_class(cfg.pairing, data.base, session), new]
        } else {
            vec![new]
        };
        let session_data = augmented(cfg, data.class_data(&classes), seed, session);
        log::info!("seed {seed} {strategy}: session {session} on classes {classes:?}");
        train_session(strategy, &mut learner, &mut memory, &session_data, ctx, session)
            .map_err(|e| HarnessError::training(seed, strategy.as_str(), session, e))?;
        learner_checkpoint(&learner).save(&dir.join(format!("session_{session}.ckpt")))?;
        let record = evaluate(
            &learner.net,
            &data.split.test,
            data.base,
            new + 1,
            new..new + 1,
            session,
        )?;
        log::info!(
            "seed {seed} {strategy}: session {session} alpha base {:.4} new {:.4} all {:.4}",
            record.alpha_base,
            record.alpha_new,
            record.alpha_all
        );
        run.log.records.push(record);
        run.save(dir)?;
    }
    Ok(())
}

/// Everything one `run_experiment` call produced.
#[derive(Clone, Debug, Default)]
pub struct RunArtifacts {
    pub runs: Vec<StrategyRun>,
}

/// Trains the base models a set of strategies needs, keyed by conv
/// activation.
pub fn base_models(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    retrain: bool,
) -> Result<BTreeMap<&'static str, BaseModel>, HarnessError> {
    let mut out = BTreeMap::new();
    for s in &cfg.strategies {
        let act = s.conv_activation();
        if out.contains_key(act.as_str()) {
            continue;
        }
        let m = if retrain {
            train_base_model(cfg, data, seed, act)?
        } else {
            base_model(cfg, data, seed, act)?
        };
        out.insert(act.as_str(), m);
    }
    Ok(out)
}

fn write_plan(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<(), HarnessError> {
    write_file(&seed_dir(cfg, seed).join("plan.txt"), &data.plan.to_string())
}

/// The full protocol for every seed and strategy: plan and split, base
/// training, offline ideals, then the incremental sessions. Stops at the
/// first training abort after flushing that strategy's partial log.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    write_file(&cfg.output_dir.join("config.toml"), &cfg.to_toml())?;
    let set = load_dataset(cfg)?;
    let mut artifacts = RunArtifacts::default();
    for &seed in &cfg.seeds {
        let data = prepare_data(cfg, &set, seed)?;
        write_plan(cfg, &data, seed)?;
        let bases = base_models(cfg, &data, seed, true)?;
        let ideals = ideals_for(cfg, &data, seed)?;
        for &s in &cfg.strategies {
            let run = run_strategy(cfg, &data, seed, s, &bases[s.conv_activation().as_str()], &ideals)?;
            artifacts.runs.push(run);
        }
    }
    Ok(artifacts)
}

/// The incremental part only, reusing saved base models and ideals when
/// present.
pub fn run_incremental(cfg: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    let set = load_dataset(cfg)?;
    let mut artifacts = RunArtifacts::default();
    for &seed in &cfg.seeds {
        let data = prepare_data(cfg, &set, seed)?;
        write_plan(cfg, &data, seed)?;
        let bases = base_models(cfg, &data, seed, false)?;
        let ideals = ideals_for(cfg, &data, seed)?;
        for &s in &cfg.strategies {
            artifacts.runs.push(run_strategy(
                cfg,
                &data,
                seed,
                s,
                &bases[s.conv_activation().as_str()],
                &ideals,
            )?);
        }
    }
    Ok(artifacts)
}

/// Base models only, for every seed.
pub fn run_base(cfg: &ExperimentConfig) -> Result<Vec<(u64, &'static str, SessionRecord)>, HarnessError> {
    cfg.validate()?;
    let set = load_dataset(cfg)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let data = prepare_data(cfg, &set, seed)?;
        write_plan(cfg, &data, seed)?;
        for (act, m) in base_models(cfg, &data, seed, true)? {
            out.push((seed, act, m.record));
        }
    }
    Ok(out)
}

/// Offline ideals for every seed.
pub fn run_ideals(cfg: &ExperimentConfig) -> Result<Vec<(u64, Ideals)>, HarnessError> {
    cfg.validate()?;
    let set = load_dataset(cfg)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let data = prepare_data(cfg, &set, seed)?;
        out.push((seed, run_offline_ideal(cfg, &data, seed)?));
    }
    Ok(out)
}

/// Every strategy log found under the output directory, ordered by seed
/// then strategy.
pub fn collect_runs(cfg: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &s in &StrategyKind::ALL {
            let dir = strategy_dir(cfg, seed, s);
            if dir.join("log.toml").exists() {
                runs.push(StrategyRun::load(&dir)?);
            }
        }
    }
    Ok(RunArtifacts { runs })
}

/// Embeddings of the test images under a saved session checkpoint, for
/// re-deriving logged values.
pub fn reevaluate(ck_path: &Path, data: &PreparedData, session: usize) -> Result<SessionRecord, HarnessError> {
    let learner = learner_from_checkpoint(&Checkpoint::load(ck_path)?)?;
    let new = if session == 0 {
        0..data.base
    } else {
        data.base + session - 1..data.base + session
    };
    evaluate(&learner.net, &data.split.test, data.base, new.end, new, session)
}
