//! AdamW: bias-corrected adaptive moments followed by decoupled weight decay.

use std::collections::BTreeMap;

use crate::checkpoint::ParamStore;
use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
    pub learning_rate: f64,
    pub config: AdamWConfig,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(shape: &[usize], learning_rate: f64, config: AdamWConfig) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
            learning_rate,
            config,
        }
    }
}

/// One AdamW update of `param` in place.
pub fn adamw_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(NumError::shape(
            "adamw_step",
            format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
        ));
    }
    if state.m.shape() != param.shape() {
        return Err(NumError::OptimizerState(format!(
            "moments {:?} do not belong to param {:?}",
            state.m.shape(),
            param.shape()
        )));
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = state.config;
    let lr = state.learning_rate;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        let g = g.as_f64();
        let mn = beta1 * m.as_f64() + (1.0 - beta1) * g;
        let vn = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
        *m = T::from_f64(mn);
        *v = T::from_f64(vn);
        let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + epsilon);
        *p = T::from_f64((p.as_f64() - update) * decay);
    }
    Ok(())
}

/// Named set of parameters sharing one learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<String>,
    pub learning_rate: f64,
}

/// AdamW over named parameter groups. Each parameter belongs to exactly one
/// group; the state map holds exactly the parameters of the declared groups.
#[derive(Debug, Clone)]
pub struct AdamW {
    groups: Vec<ParamGroup>,
    states: BTreeMap<String, OptimizerState<f32>>,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>, config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        let mut states = BTreeMap::new();
        for g in &groups {
            for name in &g.params {
                let p = store.get(name).ok_or_else(|| NumError::UnknownParam(name.clone()))?;
                let prev = states.insert(name.clone(), OptimizerState::new(p.shape(), g.learning_rate, config));
                if prev.is_some() {
                    return Err(NumError::OptimizerState(format!(
                        "`{name}` assigned to more than one group"
                    )));
                }
            }
        }
        Ok(Self { groups, states })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn state(&self, name: &str) -> Option<&OptimizerState<f32>> {
        self.states.get(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.states.keys().map(String::as_str)
    }

    /// Applies one update to every managed parameter. Parameters without a
    /// gradient entry are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        if let Some(extra) = grads.keys().find(|k| !self.states.contains_key(*k)) {
            return Err(NumError::OptimizerState(format!(
                "gradient for `{extra}` which is not in any parameter group"
            )));
        }
        for (name, state) in self.states.iter_mut() {
            let param = store
                .get_mut(name)
                .ok_or_else(|| NumError::UnknownParam(name.clone()))?;
            match grads.get(name) {
                Some(g) => adamw_step(param, g, state)?,
                None => {
                    let zero = Tensor::zeros(param.shape());
                    adamw_step(param, &zero, state)?
                }
            }
        }
        Ok(())
    }
}
