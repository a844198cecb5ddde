//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::nn::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::invalid("optimizer", format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        first: Vec<Matrix>,
        second: Vec<Matrix>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid("lr", format!("must be finite and >= 0, got {lr}")));
        }
        Ok(match kind {
            OptimizerKind::Sgd => Self::Sgd { lr },
            OptimizerKind::Adam => Self::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                first: Vec::new(),
                second: Vec::new(),
            },
        })
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => *lr,
        }
    }

    pub fn set_lr(&mut self, value: f64) {
        match self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => *lr = value,
        }
    }

    /// Applies one update; `grads[i]` belongs to the i-th parameter of `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid(
                "grads",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if store.get(id).shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: store.get(id).shape(),
                    rhs: g.shape(),
                });
            }
        }
        match self {
            Self::Sgd { lr } => {
                let ids: Vec<_> = store.ids().collect();
                for (id, g) in ids.into_iter().zip(grads) {
                    store.get_mut(id).axpy(-*lr, g);
                }
            }
            Self::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                first,
                second,
            } => {
                if first.is_empty() {
                    *first = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
                    *second = first.clone();
                }
                *step += 1;
                let t = *step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let ids: Vec<_> = store.ids().collect();
                for (i, id) in ids.into_iter().enumerate() {
                    let g = grads[i].as_slice();
                    let m = first[i].as_mut_slice();
                    let v = second[i].as_mut_slice();
                    let p = store.get_mut(id).as_mut_slice();
                    for j in 0..g.len() {
                        m[j] = *beta1 * m[j] + (1.0 - *beta1) * g[j];
                        v[j] = *beta2 * v[j] + (1.0 - *beta2) * g[j] * g[j];
                        p[j] -= *lr * (m[j] / c1) / ((v[j] / c2).sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}
