//! Trainable projector: encoded BEV tensor `[32×32×9]` → one token `[1×d]`.
//!
//! Conv variants: conv stack (3×3, stride 2, tanh) → adaptive average pool to
//! 4×4 → flatten → MLP (→ 256 → d, GELU) → linear d → d → LayerNorm.
//! The linear variant is flatten → linear → LayerNorm.

use std::fmt;
use std::str::FromStr;

use bella_numcore::{ParamStore, Scalar, SplitMix64, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::bevenc::{CHANNELS, GRID};
use crate::error::{BellaError, Result};
use crate::params::{fan_in_uniform, init_linear, init_norm, linear, norm_eps, Bound};

pub const PREFIX: &str = "projector/";
pub const POOL: usize = 4;
pub const MLP_HIDDEN: usize = 256;
pub const DEEP_WIDTHS: [usize; 3] = [16, 32, 64];
pub const SHALLOW_WIDTHS: [usize; 1] = [16];
/// The flattened linear variant can produce low-variance rows; a small
/// epsilon keeps the normalized token at unit variance.
pub const NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorVariant {
    Linear,
    ShallowConv,
    DeepConv,
}

impl ProjectorVariant {
    pub const ALL: [ProjectorVariant; 3] = [
        ProjectorVariant::Linear,
        ProjectorVariant::ShallowConv,
        ProjectorVariant::DeepConv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProjectorVariant::Linear => "linear",
            ProjectorVariant::ShallowConv => "shallow_conv",
            ProjectorVariant::DeepConv => "deep_conv",
        }
    }

    /// Row label in the projector ablation table.
    pub fn table_label(self) -> &'static str {
        match self {
            ProjectorVariant::Linear => "Linear",
            ProjectorVariant::ShallowConv => "Conv.",
            ProjectorVariant::DeepConv => "Deeper Conv.",
        }
    }

    pub fn conv_widths(self) -> &'static [usize] {
        match self {
            ProjectorVariant::Linear => &[],
            ProjectorVariant::ShallowConv => &SHALLOW_WIDTHS,
            ProjectorVariant::DeepConv => &DEEP_WIDTHS,
        }
    }
}

impl fmt::Display for ProjectorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectorVariant {
    type Err = BellaError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| BellaError::Config(format!("unknown projector variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorConfig {
    pub variant: ProjectorVariant,
    pub d: usize,
}

impl ProjectorConfig {
    /// Rejects a projector whose output width differs from the LM width.
    pub fn for_lm(variant: ProjectorVariant, d: usize, lm_width: usize) -> Result<Self> {
        if d != lm_width || d == 0 {
            return Err(BellaError::Config(format!(
                "projector width {d} does not match language model width {lm_width}"
            )));
        }
        Ok(Self { variant, d })
    }

    /// Trainable scalar count implied by the layer shapes.
    pub fn expected_params(&self) -> usize {
        let d = self.d;
        let norm = 2 * d;
        match self.variant {
            ProjectorVariant::Linear => GRID * GRID * CHANNELS * d + d + norm,
            v => {
                let mut c_in = CHANNELS;
                let mut n = 0;
                for &c in v.conv_widths() {
                    n += c * c_in * 9 + c;
                    c_in = c;
                }
                let flat = c_in * POOL * POOL;
                n + flat * MLP_HIDDEN + MLP_HIDDEN + MLP_HIDDEN * d + d + d * d + d + norm
            }
        }
    }
}

/// Fan-in uniform weights, zero biases, unit gamma, zero beta.
pub fn init(cfg: &ProjectorConfig, seed: u64) -> ParamStore {
    let mut rng = SplitMix64::derive(seed, "projector/init");
    let mut s = ParamStore::new();
    let d = cfg.d;
    match cfg.variant {
        ProjectorVariant::Linear => {
            init_linear(&mut s, &mut rng, "projector/linear", GRID * GRID * CHANNELS, d);
        }
        v => {
            let mut c_in = CHANNELS;
            for (i, &c) in v.conv_widths().iter().enumerate() {
                s.insert(
                    format!("projector/conv{i}.w"),
                    fan_in_uniform(&mut rng, &[c, c_in, 3, 3], c_in * 9),
                );
                s.insert(format!("projector/conv{i}.b"), Tensor::zeros(&[c]));
                c_in = c;
            }
            init_linear(&mut s, &mut rng, "projector/mlp1", c_in * POOL * POOL, MLP_HIDDEN);
            init_linear(&mut s, &mut rng, "projector/mlp2", MLP_HIDDEN, d);
            init_linear(&mut s, &mut rng, "projector/out", d, d);
        }
    }
    init_norm(&mut s, "projector/norm", d);
    s.set_requires_grad_all(true);
    s
}

pub fn count_params(store: &ParamStore) -> usize {
    store.num_scalars_with_prefix(PREFIX)
}

/// Runs the projector on an encoded grid (`[H×W×C]`). Returns `[1×d]`.
pub fn project<T: Scalar>(tape: &mut Tape<'_, T>, p: &Bound, cfg: &ProjectorConfig, bev: &Tensor<f32>) -> Result<Var> {
    if bev.shape() != [GRID, GRID, CHANNELS] {
        return Err(BellaError::Config(format!(
            "projector expects [{GRID}, {GRID}, {CHANNELS}], got {:?}",
            bev.shape()
        )));
    }
    let pre_norm = match cfg.variant {
        ProjectorVariant::Linear => {
            let x = tape.constant(bev.reshape(&[1, GRID * GRID * CHANNELS])?.cast());
            linear(tape, p, "projector/linear", x)?
        }
        v => {
            let mut x = tape.constant(bev.hwc_to_chw()?.cast());
            for i in 0..v.conv_widths().len() {
                let w = p.get(&format!("projector/conv{i}.w"))?;
                let b = p.get(&format!("projector/conv{i}.b"))?;
                x = tape.conv2d(x, w, b, 2, 1)?;
                x = tape.tanh(x);
            }
            let x = tape.adaptive_avg_pool(x, POOL, POOL)?;
            let flat = tape.shape(x).iter().product();
            let x = tape.reshape(x, &[1, flat])?;
            let h = linear(tape, p, "projector/mlp1", x)?;
            let h = tape.gelu(h);
            let z = linear(tape, p, "projector/mlp2", h)?;
            linear(tape, p, "projector/out", z)?
        }
    };
    norm_eps(tape, p, "projector/norm", pre_norm, NORM_EPS)
}

/// Single-precision forward without gradients.
pub fn project_value(store: &ParamStore, cfg: &ProjectorConfig, bev: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, store);
    let out = project(&mut tape, &b, cfg, bev)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_bev(seed: u64) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        let n = GRID * GRID * CHANNELS;
        Tensor::new(
            &[GRID, GRID, CHANNELS],
            (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_count_at_d128() {
        let cfg = ProjectorConfig::for_lm(ProjectorVariant::Linear, 128, 128).unwrap();
        // weights + bias + gamma/beta
        assert_eq!(cfg.expected_params(), 32 * 32 * 9 * 128 + 128 + 2 * 128);
        assert_eq!(count_params(&init(&cfg, 0)), 1_180_032);
    }

    #[test]
    fn counts_match_records_for_all_variants() {
        for v in ProjectorVariant::ALL {
            let cfg = ProjectorConfig { variant: v, d: 32 };
            let s = init(&cfg, 1);
            assert_eq!(count_params(&s), cfg.expected_params(), "{v}");
            let from_records: usize = s.iter().map(|(_, t)| t.len()).sum();
            assert_eq!(from_records, cfg.expected_params());
        }
    }

    #[test]
    fn deep_stack_larger_than_shallow() {
        let conv = |v: ProjectorVariant| {
            init(&ProjectorConfig { variant: v, d: 16 }, 0)
                .iter()
                .filter(|(n, _)| n.contains("conv"))
                .map(|(_, t)| t.len())
                .sum::<usize>()
        };
        assert!(conv(ProjectorVariant::DeepConv) > conv(ProjectorVariant::ShallowConv));
        assert!(conv(ProjectorVariant::ShallowConv) > 0);
    }

    #[test]
    fn width_mismatch_rejected() {
        assert!(ProjectorConfig::for_lm(ProjectorVariant::DeepConv, 64, 128).is_err());
    }

    #[test]
    fn output_is_one_by_d_and_normalized() {
        for v in ProjectorVariant::ALL {
            let cfg = ProjectorConfig { variant: v, d: 24 };
            let s = init(&cfg, 3);
            let e = project_value(&s, &cfg, &fake_bev(9)).unwrap();
            assert_eq!(e.shape(), &[1, 24]);
            let m = e.sum_f64() / 24.0;
            let var = e.data().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / 24.0;
            assert!(m.abs() < 1e-6, "{v}: mean {m}");
            assert!((var - 1.0).abs() < 1e-4, "{v}: var {var}");
        }
    }
}
