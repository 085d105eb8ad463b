use super::conv::{conv_backward, conv_forward, gemm, ConvGeom};
use super::{Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    /// Scalar node whose local gradients were computed eagerly.
    Custom {
        inputs: Vec<Var>,
        grads: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for the backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Adds a leaf carrying a copy of `t`; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        t.zero_grad();
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf owning `t`.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.zero_grad();
        self.push(t, Op::Leaf, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rank(&self, op: &'static str, v: Var, rank: usize) -> Result<(), TensorError> {
        if self.shape(v).len() != rank {
            return Err(TensorError::Rank {
                op,
                expected: rank,
                got: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip("add", a, b, |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |v| v * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `[N, F] + [F]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        self.rank("add_bias", x, 2)?;
        let f = self.shape(x)[1];
        if self.shape(b) != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                expected: vec![f],
                got: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(f.max(1)) {
            row.iter_mut().zip(&bias).for_each(|(v, c)| *v += c);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    /// `[N, C, H, W] + [C]` broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        self.rank("add_channel_bias", x, 4)?;
        let s = self.shape(x).to_vec();
        if self.shape(b) != [s[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                expected: vec![s[1]],
                got: self.shape(b).to_vec(),
            });
        }
        let plane = s[2] * s[3];
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        if plane > 0 {
            for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
                let c = bias[i % s[1]];
                chunk.iter_mut().for_each(|v| *v += c);
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddChannelBias(x, b), rg))
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.rank("matmul", a, 2)?;
        self.rank("matmul", b, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                got: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Cross-correlation of `[N, C, H, W]` with `[F, C, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        self.rank("conv2d", input, 4)?;
        self.rank("conv2d", kernel, 4)?;
        let s = self.shape(input).to_vec();
        let k = self.shape(kernel).to_vec();
        if s[1] != k[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![k[0], s[1], k[2], k[3]],
                got: k,
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (hp, wp) = (s[2] + 2 * padding, s[3] + 2 * padding);
        if hp < k[2] || wp < k[3] {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("padded input {hp}x{wp} smaller than kernel {}x{}", k[2], k[3]),
            });
        }
        let geom = ConvGeom {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            f: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            pad: padding,
            ho: (hp - k[2]) / stride + 1,
            wo: (wp - k[3]) / stride + 1,
        };
        let (out, cols) = conv_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let t = Tensor::new(&[geom.n, geom.f, geom.ho, geom.wo], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        // the im2col buffer is only needed for the kernel gradient
        let cols = if self.rg(kernel) { cols } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var, TensorError> {
        self.rank("max_pool2d", input, 4)?;
        let s = self.shape(input).to_vec();
        let (ho, wo) = (s[2] / 2, s[3] / 2);
        if ho == 0 || wo == 0 {
            return Err(TensorError::Invalid {
                op: "max_pool2d",
                msg: format!("spatial extent {}x{} too small for 2x2 pooling", s[2], s[3]),
            });
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * ho * wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for nc in 0..s[0] * s[1] {
            let base = nc * s[2] * s[3];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + 2 * oh * s[3] + 2 * ow;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oh + di) * s[3] + 2 * ow + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| v.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Logistic function; outputs are clamped into the open interval (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    /// Row-wise softmax of a `[N, K]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.rank("softmax", a, 2)?;
        let k = self.shape(a)[1];
        let mut t = self.value(a).clone();
        if k > 0 {
            for row in t.data_mut().chunks_mut(k) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(TensorError::Rank {
                op: "flatten",
                expected: 1,
                got: Vec::new(),
            });
        }
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(a, &shape)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let n = x.len().max(1) as f64;
        let t = Tensor::scalar(x.iter().sum::<f64>() / n);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// Scalar node with eagerly computed local gradients, one buffer per
    /// input and congruent with it. Used for fused loss kernels.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: f64, grads: Vec<Vec<f64>>) -> Result<Var, TensorError> {
        if inputs.len() != grads.len() {
            return Err(TensorError::Invalid {
                op: "custom_scalar",
                msg: format!("{} inputs but {} gradient buffers", inputs.len(), grads.len()),
            });
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if self.value(*v).numel() != g.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "custom_scalar",
                    expected: self.shape(*v).to_vec(),
                    got: vec![g.len()],
                });
            }
        }
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor::scalar(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        ))
    }

    /// Gradient of the last `backward` root w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar root. Afterwards every differentiable
    /// leaf holds a gradient buffer (zeros when unreachable from `root`).
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gout.to_vec());
                acc(grads, *b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gout.to_vec());
                acc(grads, *b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    acc(grads, *a, gout.iter().zip(y).map(|(g, q)| g * q).collect());
                }
                if self.rg(*b) {
                    acc(grads, *b, gout.iter().zip(x).map(|(g, p)| g * p).collect());
                }
            }
            Op::Scale(a, c) => acc(grads, *a, gout.iter().map(|g| g * c).collect()),
            Op::AddBias(x, b) => {
                acc(grads, *x, gout.to_vec());
                if self.rg(*b) {
                    let f = self.shape(*b)[0];
                    let mut gb = vec![0.0; f];
                    if f > 0 {
                        for row in gout.chunks(f) {
                            gb.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                        }
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::AddChannelBias(x, b) => {
                acc(grads, *x, gout.to_vec());
                if self.rg(*b) {
                    let s = self.shape(*x);
                    let plane = s[2] * s[3];
                    let mut gb = vec![0.0; s[1]];
                    if plane > 0 {
                        for (k, chunk) in gout.chunks(plane).enumerate() {
                            gb[k % s[1]] += chunk.iter().sum::<f64>();
                        }
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gout,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        0.0,
                        &mut ga,
                    );
                    acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        (1, k as isize),
                        gout,
                        (n as isize, 1),
                        0.0,
                        &mut gb,
                    );
                    acc(grads, *b, gb);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (di, dk) = conv_backward(
                    gout,
                    self.value(*kernel).data(),
                    cols,
                    geom,
                    self.rg(*input),
                    self.rg(*kernel),
                );
                if let Some(di) = di {
                    acc(grads, *input, di);
                }
                if let Some(dk) = dk {
                    acc(grads, *kernel, dk);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; self.value(*input).numel()];
                for (g, &idx) in gout.iter().zip(argmax) {
                    gi[idx] += g;
                }
                acc(grads, *input, gi);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    grads,
                    *a,
                    gout.iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let s = node.value.data();
                acc(grads, *a, gout.iter().zip(s).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Exp(a) => {
                let e = node.value.data();
                acc(grads, *a, gout.iter().zip(e).map(|(g, e)| g * e).collect());
            }
            Op::Softmax(a) => {
                let k = self.shape(*a)[1];
                let s = node.value.data();
                let mut gi = vec![0.0; s.len()];
                if k > 0 {
                    for ((gi_row, s_row), g_row) in gi.chunks_mut(k).zip(s.chunks(k)).zip(gout.chunks(k)) {
                        let dot: f64 = s_row.iter().zip(g_row).map(|(s, g)| s * g).sum();
                        for j in 0..k {
                            gi_row[j] = s_row[j] * (g_row[j] - dot);
                        }
                    }
                }
                acc(grads, *a, gi);
            }
            Op::Reshape(a) => acc(grads, *a, gout.to_vec()),
            Op::Sum(a) => acc(grads, *a, vec![gout[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(grads, *a, vec![gout[0] / n.max(1) as f64; n]);
            }
            Op::Custom { inputs, grads: local } => {
                for (v, g) in inputs.iter().zip(local) {
                    acc(grads, *v, g.iter().map(|x| x * gout[0]).collect());
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
