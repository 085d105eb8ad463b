use rand::Rng;

use crate::rng::ChaCha8Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Ordered named parameters shared by every model in the crate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t.with_requires_grad(true)));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Vec<(String, Tensor)> {
        &mut self.entries
    }

    /// Adds every parameter to `g`; those with `trainable(i)` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(usize) -> bool) -> Vec<Var> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                if trainable(i) {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Copies gradients from `g` into the differentiable parameters.
    pub fn pull_grads(&mut self, g: &Graph, vars: &[Var]) {
        for ((_, t), v) in self.entries.iter_mut().zip(vars) {
            match g.grad(*v) {
                Some(grad) if g.requires_grad(*v) => t.set_grad(grad.to_vec()).expect("congruent grad"),
                _ => t.zero_grad(),
            }
        }
    }

    /// Parameters selected by `trainable`, paired with their names, for an optimizer.
    pub fn select_mut(&mut self, trainable: impl Fn(usize) -> bool) -> Vec<(&str, &mut Tensor)> {
        self.entries
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| trainable(*i))
            .map(|(_, (n, t))| (n.as_str(), t))
            .collect()
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|(_, t)| t.data().to_vec()).collect()
    }

    pub fn restore(&mut self, values: &[Vec<f64>]) {
        for ((_, t), v) in self.entries.iter_mut().zip(values) {
            t.data_mut().copy_from_slice(v);
        }
    }

    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

/// A stack of fully connected layers `x W_i + b_i` with `W_i: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
}

impl Dense {
    pub fn new(params: &mut ParamSet, name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = params.len();
        params.push(
            format!("{name}.weight"),
            uniform_fan_in(&[inputs, outputs], inputs, rng),
        );
        params.push(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self {
            weight,
            bias: weight + 1,
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, crate::tensor::TensorError> {
        g.linear(x, vars[self.weight], vars[self.bias])
    }
}
