use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam or plain SGD, both with decoupled weight decay on weight matrices.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, model: &Model) -> Self {
        let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        let zeros = |on: bool| -> Vec<Vec<f64>> {
            if on {
                shapes.iter().map(|&n| vec![0.0; n]).collect()
            } else {
                Vec::new()
            }
        };
        let adam = kind == OptimizerKind::Adam;
        Self {
            kind,
            lr,
            weight_decay,
            step: 0,
            first: zeros(adam),
            second: zeros(adam),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn apply(&mut self, model: &mut Model, grads: &Gradients) {
        self.step += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (slot, ((params, decay), g)) in model
            .param_slices_mut()
            .into_iter()
            .zip(grads.slices())
            .enumerate()
        {
            let shrink = if decay { 1.0 - lr * wd } else { 1.0 };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &gi) in params.iter_mut().zip(g) {
                        *p = *p * shrink - lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.first[slot];
                    let v = &mut self.second[slot];
                    for i in 0..params.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                        params[i] = params[i] * shrink - lr * update;
                    }
                }
            }
        }
    }
}
