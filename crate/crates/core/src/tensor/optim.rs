use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain or heavy-ball gradient descent.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub kind: OptimizerKind,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            kind: OptimizerKind::Sgd { momentum: 0.0 },
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }
}

/// First-order optimizer with per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or misaligned with its parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.get(i).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: params.get(i).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(v) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient {
                    param: params.name(i).to_string(),
                    name: if v.is_nan() { "NaN" } else { "Inf" },
                });
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.steps += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd { momentum } => {
                for (i, g) in grads.iter().enumerate() {
                    let vel = &mut self.first[i];
                    for ((p, gv), v) in params.get_mut(i).data_mut().iter_mut().zip(g.data()).zip(vel) {
                        if momentum == 0.0 {
                            *p -= lr * gv;
                        } else {
                            *v = momentum * *v + gv;
                            *p -= lr * *v;
                        }
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, g) in grads.iter().enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    let p = params.get_mut(i).data_mut();
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
