//! Elastic weight consolidation: a diagonal Fisher estimate from the
//! similarity-loss gradient and the quadratic anchor penalty.

use super::{similarity_loss, LossConfig, LossError};
use crate::net::{EmbeddingNet, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

/// Per-parameter importances with the anchor values they protect. Only the
/// parameters listed in `names` take part.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag {
    pub names: Vec<String>,
    pub fisher: Vec<Vec<f64>>,
    pub anchor: Vec<Vec<f64>>,
    pub lambda: f64,
}

/// Outcome of a Fisher estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherEstimate {
    pub fisher: FisherDiag,
    pub batches: usize,
    pub skipped: usize,
}

impl FisherDiag {
    /// Zero importances anchored at the current values of the selected parameters.
    pub fn zeros(params: &ParamSet, include: impl Fn(usize) -> bool, lambda: f64) -> Self {
        let mut out = Self {
            names: Vec::new(),
            fisher: Vec::new(),
            anchor: Vec::new(),
            lambda,
        };
        for (_, (name, t)) in params.entries().iter().enumerate().filter(|(i, _)| include(*i)) {
            out.names.push(name.clone());
            out.fisher.push(vec![0.0; t.numel()]);
            out.anchor.push(t.data().to_vec());
        }
        out
    }

    /// Adds `newer`'s importances to this one and moves the anchor to
    /// `newer`'s, so one diagonal covers every finished session.
    pub fn accumulate(&mut self, newer: FisherDiag) -> Result<(), LossError> {
        if newer.names != self.names {
            return Err(LossError::Shape("Fisher estimates cover different parameters".into()));
        }
        for (f, g) in self.fisher.iter_mut().zip(&newer.fisher) {
            f.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        self.anchor = newer.anchor;
        Ok(())
    }

    pub fn is_nonnegative(&self) -> bool {
        self.fisher.iter().flatten().all(|&f| f >= 0.0)
    }

    /// Named tensors for checkpoints: `fisher.<param>` and `anchor.<param>`.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for ((name, f), a) in self.names.iter().zip(&self.fisher).zip(&self.anchor) {
            out.push((
                format!("fisher.{name}"),
                Tensor::new(&[f.len()], f.clone()).expect("flat"),
            ));
            out.push((
                format!("anchor.{name}"),
                Tensor::new(&[a.len()], a.clone()).expect("flat"),
            ));
        }
        out
    }
}

fn congruent(params: &ParamSet, fisher: &FisherDiag) -> Result<Vec<usize>, LossError> {
    fisher
        .names
        .iter()
        .zip(&fisher.anchor)
        .map(|(name, anchor)| {
            let i = params
                .index_of(name)
                .ok_or_else(|| LossError::Shape(format!("Fisher entry `{name}` has no parameter")))?;
            if params.tensor(i).numel() != anchor.len() {
                return Err(LossError::Shape(format!(
                    "parameter `{name}` has {} entries, Fisher {}",
                    params.tensor(i).numel(),
                    anchor.len()
                )));
            }
            Ok(i)
        })
        .collect()
}

/// `sum_i (lambda / 2) F_i (theta_i - theta*_i)^2` and its gradient, one
/// buffer per Fisher entry.
pub fn ewc_penalty(params: &ParamSet, fisher: &FisherDiag) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    let idx = congruent(params, fisher)?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(idx.len());
    for ((&i, f), a) in idx.iter().zip(&fisher.fisher).zip(&fisher.anchor) {
        let theta = params.tensor(i).data();
        let mut g = Vec::with_capacity(theta.len());
        for ((t, fi), ai) in theta.iter().zip(f).zip(a) {
            let d = t - ai;
            value += 0.5 * fisher.lambda * fi * d * d;
            g.push(fisher.lambda * fi * d);
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// The penalty as a graph node over the bound parameter variables.
pub fn ewc_term(g: &mut Graph, vars: &[Var], params: &ParamSet, fisher: &FisherDiag) -> Result<Var, LossError> {
    let idx = congruent(params, fisher)?;
    let (value, grads) = ewc_penalty(params, fisher)?;
    let inputs: Vec<Var> = idx.iter().map(|&i| vars[i]).collect();
    Ok(g.custom_scalar(&inputs, value, grads)?)
}

/// `F_i = mean over batches of (dL/dtheta_i)^2`. `batch_grad` returns the
/// gradient of every selected parameter for batch `b`, or `None` when the
/// batch yields no loss; such batches are skipped and counted.
pub fn fisher_from_gradients<E>(
    params: &ParamSet,
    include: impl Fn(usize) -> bool,
    lambda: f64,
    batches: usize,
    mut batch_grad: impl FnMut(usize) -> Result<Option<Vec<Vec<f64>>>, E>,
) -> Result<FisherEstimate, E> {
    let mut fisher = FisherDiag::zeros(params, include, lambda);
    let mut used = 0usize;
    for b in 0..batches {
        let Some(grads) = batch_grad(b)? else {
            continue;
        };
        used += 1;
        for (f, g) in fisher.fisher.iter_mut().zip(&grads) {
            f.iter_mut().zip(g).for_each(|(a, v)| *a += v * v);
        }
    }
    if used > 0 {
        let inv = 1.0 / used as f64;
        fisher.fisher.iter_mut().flatten().for_each(|f| *f *= inv);
    }
    Ok(FisherEstimate {
        fisher,
        batches: used,
        skipped: batches - used,
    })
}

/// Fisher diagonal of the similarity loss over `batches`, for every
/// parameter except the classifier head.
pub fn compute_fisher_diagonal(
    net: &EmbeddingNet,
    batches: &[(Tensor, Vec<usize>)],
    loss: &LossConfig,
    centers: Option<&super::CenterState>,
    lambda: f64,
) -> Result<FisherEstimate, LossError> {
    let include = |i: usize| !EmbeddingNet::is_head_param(i);
    fisher_from_gradients(net.params(), include, lambda, batches.len(), |b| {
        let (x, labels) = &batches[b];
        let mut g = Graph::new();
        let vars = net.params().bind(&mut g, |_| true);
        let out = net.forward(&mut g, &vars, x)?;
        let term = similarity_loss(&mut g, &out, labels, loss, centers)?;
        let Some(root) = term.loss else {
            return Ok(None);
        };
        g.backward(root)?;
        Ok(Some(
            (0..net.params().len())
                .filter(|&i| include(i))
                .map(|i| {
                    g.grad(vars[i])
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; net.params().tensor(i).numel()])
                })
                .collect(),
        ))
    })
}
