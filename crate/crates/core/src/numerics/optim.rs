use serde::{Deserialize, Serialize};

use super::{Matrix, Parameter};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self::sgd_classifier()
    }
}

impl OptimizerSpec {
    /// Momentum SGD used for the classifiers: lr 7e-3, momentum 0.9, weight decay 5e-4.
    pub fn sgd_classifier() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 7e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }

    /// Adam with lr 2e-4, the generator default.
    pub fn adam_generator() -> Self {
        Self::adam(2e-4)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // learning_rate = 0 is allowed: it freezes the parameters.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1)
            || !(0.0..1.0).contains(&b2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Applies one update to every parameter in place.
///
/// Weight decay enters as an additive L2 term `grad + decay * value` for both
/// optimizer kinds. Parameters without a gradient are left untouched.
pub fn step(params: &mut [&mut Parameter], spec: &OptimizerSpec) {
    for p in params.iter_mut() {
        step_one(p, spec);
    }
}

fn step_one(p: &mut Parameter, spec: &OptimizerSpec) {
    let Some(grad) = p.grad.as_ref() else {
        return;
    };
    let (rows, cols) = p.value.shape();
    let decay = spec.weight_decay;
    let effective: Vec<f64> = grad
        .data()
        .iter()
        .zip(p.value.data())
        .map(|(g, w)| g + decay * w)
        .collect();
    p.state.steps += 1;
    let lr = spec.learning_rate;
    match spec.kind {
        OptimizerKind::SgdMomentum => {
            if spec.momentum > 0.0 {
                let buf = p
                    .state
                    .first_moment
                    .get_or_insert_with(|| Matrix::zeros(rows, cols));
                let first = p.state.steps == 1;
                for (v, g) in buf.data_mut().iter_mut().zip(&effective) {
                    *v = if first { *g } else { spec.momentum * *v + g };
                }
                for (w, v) in p.value.data_mut().iter_mut().zip(buf.data()) {
                    *w -= lr * v;
                }
            } else {
                for (w, g) in p.value.data_mut().iter_mut().zip(&effective) {
                    *w -= lr * g;
                }
            }
        }
        OptimizerKind::Adam => {
            let (b1, b2) = spec.adam_betas;
            let t = p.state.steps as i32;
            let m = p
                .state
                .first_moment
                .get_or_insert_with(|| Matrix::zeros(rows, cols));
            for (m, g) in m.data_mut().iter_mut().zip(&effective) {
                *m = b1 * *m + (1.0 - b1) * g;
            }
            let v = p
                .state
                .second_moment
                .get_or_insert_with(|| Matrix::zeros(rows, cols));
            for (v, g) in v.data_mut().iter_mut().zip(&effective) {
                *v = b2 * *v + (1.0 - b2) * g * g;
            }
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let m = p.state.first_moment.as_ref().expect("set above");
            let v = p.state.second_moment.as_ref().expect("set above");
            for ((w, m), v) in p.value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + spec.adam_eps);
            }
        }
    }
}
