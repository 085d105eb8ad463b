//! The embedding CNN: three conv + 2x2 max-pool blocks (32/64/128 filters),
//! flatten, two ReLU fully connected layers (256, 128) and a linear 128-wide
//! embedding layer, plus an optional softmax head used only by centre loss.
//!
//! Convolutions are 3x3 with stride 1. The first two use padding 1 and the
//! last padding 0, so a 28x28 input flows 28 -> 14 -> 14 -> 7 -> 5 -> 2 and
//! the flattened conv features are 128 x 2 x 2 = 512 wide, the input width
//! of the per-class replay VAEs.

pub mod checkpoint;
mod params;

pub use checkpoint::{Checkpoint, CheckpointError, Descriptor};
pub use params::{uniform_fan_in, Dense, ParamSet};

use thiserror::Error;

use crate::rng;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("classifier head cannot shrink from {current} to {requested} classes")]
    Shrink { current: usize, requested: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvActivation {
    Relu,
    Sigmoid,
}

impl ConvActivation {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvActivation::Relu => "relu",
            ConvActivation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Self::Relu),
            "sigmoid" => Some(Self::Sigmoid),
            _ => None,
        }
    }
}

pub const EMBEDDING_DIM: usize = 128;
const CONV_CHANNELS: [usize; 3] = [32, 64, 128];
const CONV_PADDING: [usize; 3] = [1, 1, 0];
const FC_WIDTHS: [usize; 2] = [256, 128];
/// Largest magnitude accepted by [`EmbeddingNet::embed`]; raw 0..255 pixels
/// exceed it, standardised inputs do not.
const MAX_NORMALISED_INPUT: f64 = 64.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub final_conv_activation: ConvActivation,
}

impl NetConfig {
    pub fn mnist(final_conv_activation: ConvActivation) -> Self {
        Self {
            in_channels: 1,
            image_size: 28,
            final_conv_activation,
        }
    }

    /// Spatial side after each conv/pool block.
    pub fn spatial_sizes(&self) -> [usize; 3] {
        let mut side = self.image_size;
        let mut out = [0; 3];
        for (i, pad) in CONV_PADDING.iter().enumerate() {
            side = (side + 2 * pad - 2) / 2;
            out[i] = side;
        }
        out
    }

    /// Width of the flattened conv output.
    pub fn feature_width(&self) -> usize {
        let side = self.spatial_sizes()[2];
        CONV_CHANNELS[2] * side * side
    }
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// Flattened conv features `[N, feature_width]`.
    pub features: Var,
    /// Embeddings `[N, 128]`.
    pub embedding: Var,
    /// Classifier logits `[N, K]` when a head is attached.
    pub logits: Option<Var>,
}

/// Embedding rows with aligned class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: Tensor,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Tensor, labels: Vec<usize>) -> Result<Self, NetError> {
        if vectors.rank() != 2 || vectors.rows() != labels.len() {
            return Err(NetError::Input(format!(
                "embedding matrix {:?} does not align with {} labels",
                vectors.shape(),
                labels.len()
            )));
        }
        Ok(Self { vectors, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.row_len()
    }

    pub fn subset(&self, rows: &[usize]) -> EmbeddingBatch {
        EmbeddingBatch {
            vectors: self.vectors.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Parameter index of the first fully connected weight; everything before
/// it belongs to the conv feature extractor.
const FC_START: usize = 6;
const HEAD_START: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    config: NetConfig,
    params: ParamSet,
    head_classes: usize,
    frozen_feature_extractor: bool,
    seed: u64,
}

impl EmbeddingNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        if config.spatial_sizes().contains(&0) {
            return Err(NetError::Config(format!(
                "image size {} too small for three conv/pool blocks",
                config.image_size
            )));
        }
        let mut r = rng::stream(seed, "embedding-net-init");
        let mut params = ParamSet::new();
        let mut channels = config.in_channels;
        for (i, &f) in CONV_CHANNELS.iter().enumerate() {
            params.push(
                format!("conv{}.weight", i + 1),
                uniform_fan_in(&[f, channels, 3, 3], channels * 9, &mut r),
            );
            params.push(format!("conv{}.bias", i + 1), Tensor::zeros(&[f]));
            channels = f;
        }
        let mut width = config.feature_width();
        for (i, &out) in FC_WIDTHS.iter().chain(&[EMBEDDING_DIM]).enumerate() {
            Dense::new(&mut params, &format!("fc{}", i + 1), width, out, &mut r);
            width = out;
        }
        Ok(Self {
            config,
            params,
            head_classes: 0,
            frozen_feature_extractor: false,
            seed,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn head_classes(&self) -> usize {
        self.head_classes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_feature_extractor
    }

    pub fn set_frozen_feature_extractor(&mut self, frozen: bool) {
        self.frozen_feature_extractor = frozen;
    }

    pub fn is_conv_param(index: usize) -> bool {
        index < FC_START
    }

    pub fn is_head_param(index: usize) -> bool {
        index >= HEAD_START
    }

    /// Whether parameter `index` is updated by training.
    pub fn is_trainable(&self, index: usize) -> bool {
        !(self.frozen_feature_extractor && Self::is_conv_param(index))
    }

    /// Conv parameters in order, for freeze checks.
    pub fn conv_params(&self) -> Vec<&Tensor> {
        (0..FC_START).map(|i| self.params.tensor(i)).collect()
    }

    /// Grows the softmax head to `new_class_count` outputs. Existing class
    /// columns are kept bit for bit; column `j` is always initialised from
    /// the same seeded stream, so growth order does not matter.
    pub fn expand_classifier(&mut self, new_class_count: usize) -> Result<(), NetError> {
        if new_class_count <= self.head_classes {
            return Err(NetError::Shrink {
                current: self.head_classes,
                requested: new_class_count,
            });
        }
        let old = self.head_classes;
        let mut weight = vec![0.0; EMBEDDING_DIM * new_class_count];
        if old > 0 {
            let w = self.params.tensor(HEAD_START).data();
            for r in 0..EMBEDDING_DIM {
                weight[r * new_class_count..r * new_class_count + old].copy_from_slice(&w[r * old..(r + 1) * old]);
            }
        }
        for j in old..new_class_count {
            let mut r = rng::seeded(rng::derive_seed(self.seed, rng::tag("head-column") ^ j as u64));
            let col = uniform_fan_in(&[EMBEDDING_DIM], EMBEDDING_DIM, &mut r);
            for (row, v) in col.data().iter().enumerate() {
                weight[row * new_class_count + j] = *v;
            }
        }
        let mut bias = vec![0.0; new_class_count];
        if old > 0 {
            bias[..old].copy_from_slice(self.params.tensor(HEAD_START + 1).data());
        }
        let weight = Tensor::new(&[EMBEDDING_DIM, new_class_count], weight)?.with_requires_grad(true);
        let bias = Tensor::new(&[new_class_count], bias)?.with_requires_grad(true);
        if old == 0 {
            self.params.push("head.weight", weight);
            self.params.push("head.bias", bias);
        } else {
            self.params.entries_mut()[HEAD_START].1 = weight;
            self.params.entries_mut()[HEAD_START + 1].1 = bias;
        }
        self.head_classes = new_class_count;
        Ok(())
    }

    /// Adds all parameters to `g`, frozen ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.bind(g, |i| self.is_trainable(i))
    }

    /// Conv stack on `[N, C, H, W]` images, flattened to `[N, feature_width]`.
    pub fn forward_conv(&self, g: &mut Graph, vars: &[Var], images: Var) -> Result<Var, NetError> {
        let s = g.shape(images);
        let (c, side) = (self.config.in_channels, self.config.image_size);
        if s.len() != 4 || s[1] != c || s[2] != side || s[3] != side {
            return Err(NetError::Input(format!(
                "expected [N, {c}, {side}, {side}] images, got {s:?}"
            )));
        }
        let mut x = images;
        for (block, &pad) in CONV_PADDING.iter().enumerate() {
            x = g.conv2d(x, vars[2 * block], 1, pad)?;
            x = g.add_channel_bias(x, vars[2 * block + 1])?;
            let last = block == CONV_PADDING.len() - 1;
            x = if last && self.config.final_conv_activation == ConvActivation::Sigmoid {
                g.sigmoid(x)
            } else {
                g.relu(x)
            };
            x = g.max_pool2d(x)?;
        }
        Ok(g.flatten(x)?)
    }

    /// Fully connected part on `[N, feature_width]` features.
    pub fn forward_head(&self, g: &mut Graph, vars: &[Var], features: Var) -> Result<(Var, Option<Var>), NetError> {
        let s = g.shape(features);
        if s.len() != 2 || s[1] != self.config.feature_width() {
            return Err(NetError::Input(format!(
                "expected [N, {}] features, got {s:?}",
                self.config.feature_width()
            )));
        }
        let mut x = features;
        for layer in 0..3 {
            x = g.linear(x, vars[FC_START + 2 * layer], vars[FC_START + 2 * layer + 1])?;
            if layer < 2 {
                x = g.relu(x);
            }
        }
        let logits = if self.head_classes > 0 {
            Some(g.linear(x, vars[HEAD_START], vars[HEAD_START + 1])?)
        } else {
            None
        };
        Ok((x, logits))
    }

    /// Full forward pass on images (rank 4) or precomputed conv features (rank 2).
    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: &Tensor) -> Result<ForwardOut, NetError> {
        let x = g.constant(input.clone());
        let features = match input.rank() {
            4 => self.forward_conv(g, vars, x)?,
            2 => x,
            _ => return Err(NetError::Input(format!("unsupported input shape {:?}", input.shape()))),
        };
        let (embedding, logits) = self.forward_head(g, vars, features)?;
        Ok(ForwardOut {
            features,
            embedding,
            logits,
        })
    }

    fn check_input(input: &Tensor) -> Result<(), NetError> {
        if let Some(i) = input.data().iter().position(|v| !v.is_finite()) {
            return Err(NetError::Input(format!("non-finite input value at element {i}")));
        }
        if input.rank() == 4 {
            if let Some(i) = input.data().iter().position(|v| v.abs() > MAX_NORMALISED_INPUT) {
                return Err(NetError::Input(format!(
                    "input value {} at element {i} looks unnormalised",
                    input.data()[i]
                )));
            }
        }
        Ok(())
    }

    fn infer(
        &self,
        input: &Tensor,
        chunk: usize,
        pick: impl Fn(&Graph, &ForwardOut) -> Var,
    ) -> Result<Tensor, NetError> {
        Self::check_input(input)?;
        let n = input.rows();
        let mut rows = Vec::new();
        let mut width = 0;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let part = input.select_rows(&idx);
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g, |_| false);
            let out = self.forward(&mut g, &vars, &part)?;
            let v = pick(&g, &out);
            width = g.shape(v)[1];
            rows.extend_from_slice(g.value(v).data());
            start = end;
        }
        if n == 0 {
            width = EMBEDDING_DIM;
        }
        Ok(Tensor::new(&[n, width], rows)?)
    }

    /// Embeddings for images or conv features, without the classifier head.
    pub fn embed(&self, input: &Tensor, labels: &[usize]) -> Result<EmbeddingBatch, NetError> {
        let v = self.infer(input, 256, |_, out| out.embedding)?;
        EmbeddingBatch::new(v, labels.to_vec())
    }

    /// Logits of the softmax head.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor, NetError> {
        if self.head_classes == 0 {
            return Err(NetError::Config("network has no classifier head".into()));
        }
        self.infer(input, 256, |_, out| out.logits.expect("head present"))
    }

    /// Flattened conv features for VAE replay; requires the sigmoid final
    /// conv activation so features lie in (0, 1).
    pub fn conv_features(&self, images: &Tensor) -> Result<Tensor, NetError> {
        if self.config.final_conv_activation != ConvActivation::Sigmoid {
            return Err(NetError::Config(
                "VAE-compatible conv features need a sigmoid final conv activation".into(),
            ));
        }
        self.conv_features_any(images)
    }

    /// Flattened conv features under whatever activation is configured.
    pub fn conv_features_any(&self, images: &Tensor) -> Result<Tensor, NetError> {
        if images.rank() != 4 {
            return Err(NetError::Input(format!("expected images, got {:?}", images.shape())));
        }
        self.infer(images, 256, |_, out| out.features)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut descriptor = Descriptor::new();
        descriptor.insert("kind".into(), "embedding_net".into());
        descriptor.insert("in_channels".into(), self.config.in_channels.to_string());
        descriptor.insert("image_size".into(), self.config.image_size.to_string());
        descriptor.insert(
            "final_conv_activation".into(),
            self.config.final_conv_activation.as_str().into(),
        );
        descriptor.insert("conv_channels".into(), "32,64,128".into());
        descriptor.insert("conv_padding".into(), "1,1,0".into());
        descriptor.insert("fc_widths".into(), "256,128,128".into());
        descriptor.insert("head_classes".into(), self.head_classes.to_string());
        descriptor.insert(
            "frozen_feature_extractor".into(),
            self.frozen_feature_extractor.to_string(),
        );
        descriptor.insert("seed".into(), self.seed.to_string());
        Checkpoint {
            descriptor,
            tensors: self.params.entries().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetError> {
        if ck.field("kind")? != "embedding_net" {
            return Err(NetError::Config(format!(
                "checkpoint kind `{}` is not embedding_net",
                ck.field("kind")?
            )));
        }
        let activation = ConvActivation::parse(ck.field("final_conv_activation")?)
            .ok_or_else(|| NetError::Config("unknown final_conv_activation".into()))?;
        let config = NetConfig {
            in_channels: ck.parse_field("in_channels")?,
            image_size: ck.parse_field("image_size")?,
            final_conv_activation: activation,
        };
        let mut net = Self::new(config, ck.parse_field("seed")?)?;
        let head: usize = ck.parse_field("head_classes")?;
        if head > 0 {
            net.expand_classifier(head)?;
        }
        for (name, t) in net.params.entries_mut() {
            let stored = ck.require(name)?;
            if stored.shape() != t.shape() {
                return Err(NetError::Config(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(stored.data());
        }
        net.frozen_feature_extractor = ck.parse_field("frozen_feature_extractor")?;
        Ok(net)
    }
}
