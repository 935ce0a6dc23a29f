//! First-order optimizers.

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar = f64> {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ModelParams<T>) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        self.step += 1;
        let lr = T::from_f64(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (_, t) in params.iter_mut() {
                    let g = t.grad().expect("checked above").to_vec();
                    t.data_mut().iter_mut().zip(&g).for_each(|(w, &gi)| *w -= lr * gi);
                }
            }
            OptimizerKind::Adam => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
                    self.second = self.first.clone();
                }
                if self.first.len() != params.len() {
                    return Err(Error::Config("optimizer state does not match parameter set".into()));
                }
                let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
                let one = T::one();
                let t = self.step as i32;
                let c1 = T::from_f64(1.0 - self.beta1.powi(t));
                let c2 = T::from_f64(1.0 - self.beta2.powi(t));
                let eps = T::from_f64(self.eps);
                for (i, (name, p)) in params.iter_mut().enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    if m.len() != p.numel() {
                        return Err(Error::Config(format!("optimizer moment shape mismatch for `{name}`")));
                    }
                    let g = p.grad().expect("checked above").to_vec();
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        m[k] = b1 * m[k] + (one - b1) * g[k];
                        v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
