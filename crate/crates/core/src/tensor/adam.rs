use thiserror::Error;

use super::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{name}` at element {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("optimizer state tracks {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("parameter `{name}` has {got} elements but its moments have {expected}")]
    Incongruent { name: String, expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are allocated lazily on the first
/// step and stay positionally bound to the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Applies one update to every `(name, tensor)` using `tensor.grad()`.
    /// Nothing is modified if any gradient is missing or non-finite.
    pub fn step<'a, I>(&mut self, params: I) -> Result<(), OptimError>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let mut params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if self.first_moment.is_empty() && self.step_count == 0 {
            self.first_moment = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if params.len() != self.first_moment.len() {
            return Err(OptimError::ParamCount {
                expected: self.first_moment.len(),
                got: params.len(),
            });
        }
        for ((name, t), m) in params.iter().zip(&self.first_moment) {
            let grad = t.grad().ok_or_else(|| OptimError::MissingGradient(name.to_string()))?;
            if grad.len() != m.len() {
                return Err(OptimError::Incongruent {
                    name: name.to_string(),
                    expected: m.len(),
                    got: grad.len(),
                });
            }
            if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name: name.to_string(),
                    index,
                });
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        for ((_, t), (m, v)) in params
            .iter_mut()
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            let grad = t.grad().expect("checked above").to_vec();
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
