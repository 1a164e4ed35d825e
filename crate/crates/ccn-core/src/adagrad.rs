//! AdaGrad: per-coordinate learning rates from a running sum of squared
//! gradients.
//!
//! Update rule, elementwise: `G += g^2; theta -= eta * g / (sqrt(G) + eps)`.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AdaGradError {
    ShapeMismatch { params: usize, grads: usize },
}

impl fmt::Display for AdaGradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdaGradError::ShapeMismatch { params, grads } => {
                write!(f, "adagrad: params have {params} elements, grads {grads}")
            }
        }
    }
}

impl std::error::Error for AdaGradError {}

/// Optimizer state for one parameter buffer.
#[derive(Debug, Clone)]
pub struct AdaGradState {
    accumulator: Vec<f64>,
    learning_rate: f64,
    epsilon: f64,
}

impl AdaGradState {
    pub fn new(numel: usize, learning_rate: f64) -> AdaGradState {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        AdaGradState {
            accumulator: vec![0.0; numel],
            learning_rate,
            epsilon: 1e-8,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, eta: f64) {
        assert!(eta > 0.0, "learning rate must be positive");
        self.learning_rate = eta;
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.accumulator
    }

    /// One AdaGrad step over the full buffer.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), AdaGradError> {
        if params.len() != grads.len() || params.len() != self.accumulator.len() {
            return Err(AdaGradError::ShapeMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        self.step_range(params, grads, 0);
        Ok(())
    }

    /// Step over a sub-range of the buffer starting at `offset` (used to
    /// update only the embedding rows a batch actually touched). `params`
    /// and `grads` are the sub-slices.
    pub fn step_range(&mut self, params: &mut [f64], grads: &[f64], offset: usize) {
        let acc = &mut self.accumulator[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            acc[i] += g * g;
            params[i] -= self.learning_rate * g / (acc[i].sqrt() + self.epsilon);
        }
    }
}
