use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::vae::ClassVae;
use super::StrategyError;
use crate::net::{Checkpoint, Descriptor, EmbeddingBatch};
use crate::tensor::Tensor;

/// Per-class chosen row indices, ascending by distance to the class mean.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExemplarSelection {
    pub per_class: BTreeMap<usize, Vec<usize>>,
    /// Classes with fewer than `k` items; all of their items were taken.
    pub short: Vec<usize>,
}

/// For every class, the `k` rows closest (Euclidean) to the class's
/// embedding mean, ties broken by row index.
pub fn select_exemplars(batch: &EmbeddingBatch, k: usize) -> Result<ExemplarSelection, StrategyError> {
    if k == 0 {
        return Err(StrategyError::Input("exemplar count k must be at least 1".into()));
    }
    let dim = batch.dim();
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in batch.labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let mut out = ExemplarSelection::default();
    for (class, rows) in members {
        let mut mean = vec![0.0; dim];
        for &i in &rows {
            mean.iter_mut().zip(batch.vectors.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        let mut scored: Vec<(f64, usize)> = rows
            .iter()
            .map(|&i| {
                let d: f64 = batch
                    .vectors
                    .row(i)
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if scored.len() < k {
            out.short.push(class);
        }
        out.per_class
            .insert(class, scored.into_iter().take(k).map(|(_, i)| i).collect());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreMode {
    Images,
    Vae,
}

impl StoreMode {
    fn as_str(self) -> &'static str {
        match self {
            StoreMode::Images => "images",
            StoreMode::Vae => "vae",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoreEntry {
    /// Raw exemplar images `[k, C, H, W]`.
    Images(Tensor),
    Vae(Box<ClassVae>),
}

/// Retained knowledge of past classes: image exemplars under a global
/// budget, or one VAE per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarStore {
    pub mode: StoreMode,
    pub budget: usize,
    entries: BTreeMap<usize, StoreEntry>,
}

impl ExemplarStore {
    pub fn images(budget: usize) -> Self {
        Self {
            mode: StoreMode::Images,
            budget,
            entries: BTreeMap::new(),
        }
    }

    pub fn for_vaes() -> Self {
        Self {
            mode: StoreMode::Vae,
            budget: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn get(&self, class: usize) -> Option<&StoreEntry> {
        self.entries.get(&class)
    }

    pub fn insert(&mut self, class: usize, entry: StoreEntry) -> Result<(), StrategyError> {
        let ok = matches!(
            (self.mode, &entry),
            (StoreMode::Images, StoreEntry::Images(_)) | (StoreMode::Vae, StoreEntry::Vae(_))
        );
        if !ok {
            return Err(StrategyError::Input(format!(
                "a {} store cannot hold this entry",
                self.mode.as_str()
            )));
        }
        self.entries.insert(class, entry);
        Ok(())
    }

    /// Stored image count per class (zero for VAE entries).
    pub fn counts(&self) -> BTreeMap<usize, usize> {
        self.entries
            .iter()
            .map(|(&c, e)| {
                (
                    c,
                    match e {
                        StoreEntry::Images(t) => t.rows(),
                        StoreEntry::Vae(_) => 0,
                    },
                )
            })
            .collect()
    }

    pub fn total_images(&self) -> usize {
        self.counts().values().sum()
    }

    /// All stored images stacked in class order, with labels.
    pub fn stacked_images(&self) -> Option<(Tensor, Vec<usize>)> {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for (&c, e) in &self.entries {
            if let StoreEntry::Images(t) = e {
                parts.push(t);
                labels.extend(std::iter::repeat_n(c, t.rows()));
            }
        }
        if parts.is_empty() {
            return None;
        }
        Tensor::concat_rows(&parts).ok().map(|t| (t, labels))
    }

    pub fn vaes(&self) -> impl Iterator<Item = &ClassVae> {
        self.entries.values().filter_map(|e| match e {
            StoreEntry::Vae(v) => Some(v.as_ref()),
            StoreEntry::Images(_) => None,
        })
    }

    /// Writes `manifest.txt` plus one checkpoint per class into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), StrategyError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| StrategyError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut manifest = format!("mode={}\nbudget={}\nclasses=", self.mode.as_str(), self.budget);
        let ids: Vec<String> = self.entries.keys().map(usize::to_string).collect();
        let _ = writeln!(manifest, "{}", ids.join(","));
        for (&c, e) in &self.entries {
            let ck = match e {
                StoreEntry::Images(t) => {
                    let mut descriptor = Descriptor::new();
                    descriptor.insert("kind".into(), "exemplar_images".into());
                    descriptor.insert("class".into(), c.to_string());
                    Checkpoint {
                        descriptor,
                        tensors: vec![("images".into(), t.clone())],
                    }
                }
                StoreEntry::Vae(v) => v.to_checkpoint(),
            };
            ck.save(&dir.join(format!("class_{c}.ckpt")))?;
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self, StrategyError> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|source| StrategyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| StrategyError::Input(format!("bad manifest line `{line}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| StrategyError::Input(format!("manifest lacks `{k}`")))
        };
        let mode = match get("mode")? {
            "images" => StoreMode::Images,
            "vae" => StoreMode::Vae,
            m => return Err(StrategyError::Input(format!("unknown store mode `{m}`"))),
        };
        let budget = get("budget")?
            .parse()
            .map_err(|_| StrategyError::Input("manifest budget is not an integer".into()))?;
        let mut store = Self {
            mode,
            budget,
            entries: BTreeMap::new(),
        };
        for id in get("classes")?.split(',').filter(|s| !s.is_empty()) {
            let c: usize = id
                .parse()
                .map_err(|_| StrategyError::Input(format!("bad class id `{id}` in manifest")))?;
            let ck = Checkpoint::load(&dir.join(format!("class_{c}.ckpt")))?;
            let entry = match mode {
                StoreMode::Images => StoreEntry::Images(ck.require("images")?.clone()),
                StoreMode::Vae => StoreEntry::Vae(Box::new(ClassVae::from_checkpoint(&ck)?)),
            };
            store.insert(c, entry)?;
        }
        Ok(store)
    }
}
