//! Name → tape variable binding and seeded initializers shared by the
//! projector and the language model.

use std::collections::BTreeMap;

use bella_numcore::{ParamStore, Scalar, SplitMix64, Tape, Tensor, Var};

use crate::error::{BellaError, Result};

/// Tape variables for a set of named parameters.
#[derive(Debug, Default, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every tensor of `store` as a borrowed leaf.
    pub fn bind<'a>(tape: &mut Tape<'a, f32>, store: &'a ParamStore) -> Self {
        let mut b = Self::new();
        b.extend_from(tape, store);
        b
    }

    pub fn extend_from<'a>(&mut self, tape: &mut Tape<'a, f32>, store: &'a ParamStore) {
        for (name, t) in store.iter() {
            self.vars.insert(name.to_string(), tape.leaf(t));
        }
    }

    /// Registers copies of every tensor converted to `T`.
    pub fn bind_cast<T: Scalar>(tape: &mut Tape<'_, T>, store: &ParamStore) -> Self {
        let mut b = Self::new();
        for (name, t) in store.iter() {
            b.vars.insert(name.to_string(), tape.leaf_owned(t.cast::<T>()));
        }
        b
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| BellaError::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// `U(−√(3/fan_in), √(3/fan_in))`: unit-variance outputs for unit-variance
/// inputs.
pub fn fan_in_uniform(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
    Tensor::new(shape, data).expect("initializer shape")
}

pub fn normal_like(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    // Irwin–Hall approximation: sum of 12 uniforms minus 6.
    let data = (0..n)
        .map(|_| {
            let s: f64 = (0..12).map(|_| rng.next_f64()).sum();
            ((s - 6.0) * std) as f32
        })
        .collect();
    Tensor::new(shape, data).expect("initializer shape")
}

/// Adds a linear layer `[in×out]` plus bias under `prefix`.
pub fn init_linear(store: &mut ParamStore, rng: &mut SplitMix64, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), fan_in_uniform(rng, &[fan_in, fan_out], fan_in));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]));
}

pub const LN_EPS: f64 = 1e-5;

pub fn linear<T: Scalar>(tape: &mut Tape<'_, T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(tape.linear(x, w, Some(b))?)
}

pub fn norm<T: Scalar>(tape: &mut Tape<'_, T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    norm_eps(tape, p, prefix, x, LN_EPS)
}

pub fn norm_eps<T: Scalar>(tape: &mut Tape<'_, T>, p: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gamma"))?;
    let b = p.get(&format!("{prefix}.beta"))?;
    Ok(tape.layer_norm(x, g, b, T::from_f64(eps))?)
}
