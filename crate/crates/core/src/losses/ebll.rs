//! Code constraint for encoder-based lifelong learning: current conv
//! features must keep the bottleneck codes of a frozen snapshot.

use super::metric::check_matrix;
use super::LossError;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeActivation {
    Linear,
    Sigmoid,
}

/// Encoder half of a feature autoencoder, `act(x W + b)` with `W: [F, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeEncoder {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: CodeActivation,
}

impl CodeEncoder {
    pub fn new(weight: Tensor, bias: Tensor, activation: CodeActivation) -> Result<Self, LossError> {
        let (_, c) = check_matrix("code_encoder", &weight)?;
        if bias.shape() != [c] {
            return Err(LossError::Shape(format!(
                "encoder bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_width(&self) -> usize {
        self.weight.shape()[0]
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var, LossError> {
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let z = g.linear(x, w, b)?;
        Ok(match self.activation {
            CodeActivation::Linear => z,
            CodeActivation::Sigmoid => g.sigmoid(z),
        })
    }

    /// Bottleneck codes of `features`.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor, LossError> {
        self.check(features)?;
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let c = self.apply(&mut g, x)?;
        Ok(g.value(c).clone())
    }

    fn check(&self, features: &Tensor) -> Result<(), LossError> {
        let (_, f) = check_matrix("ebll_code_loss", features)?;
        if f != self.input_width() {
            return Err(LossError::Shape(format!(
                "features have width {f}, encoder expects {}",
                self.input_width()
            )));
        }
        Ok(())
    }
}

/// Mean squared difference between the codes of `current` (a graph node)
/// and `frozen_codes`, averaged over rows and code dimensions.
pub fn ebll_code_term(
    g: &mut Graph,
    current: Var,
    frozen_codes: &Tensor,
    encoder: &CodeEncoder,
) -> Result<Var, LossError> {
    let s = g.shape(current);
    if s.len() != 2 || s[1] != encoder.input_width() {
        return Err(LossError::Shape(format!(
            "features {s:?} do not fit an encoder of width {}",
            encoder.input_width()
        )));
    }
    let code = encoder.apply(g, current)?;
    if g.shape(code) != frozen_codes.shape() {
        return Err(LossError::Shape(format!(
            "codes {:?} vs frozen codes {:?}",
            g.shape(code),
            frozen_codes.shape()
        )));
    }
    let target = g.constant(frozen_codes.clone());
    let diff = g.sub(code, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Value-only form of [`ebll_code_term`] on two feature matrices.
pub fn ebll_code_loss(current: &Tensor, frozen: &Tensor, encoder: &CodeEncoder) -> Result<f64, LossError> {
    encoder.check(current)?;
    encoder.check(frozen)?;
    let frozen_codes = encoder.encode(frozen)?;
    let mut g = Graph::new();
    let x = g.constant(current.clone());
    let v = ebll_code_term(&mut g, x, &frozen_codes, encoder)?;
    Ok(g.scalar(v))
}
