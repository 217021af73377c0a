//! Central-difference check of the composed graph: grid encoder output →
//! projector → placeholder row → LM with LoRA → cross-entropy, in double
//! precision. Projector and adapter tensors are the checked parameters; the
//! base LM is held constant.

use bella_numcore::{grad_check_sampled, GradCheckReport, ParamStore, SplitMix64, Tensor};

use crate::bevenc::{encode_scene, FrozenEncoderParams};
use crate::error::Result;
use crate::langdata::{BEV_PLACEHOLDER, BOS, EOS};
use crate::lm::{forward, init_lora, LmConfig, LoraConfig, MicroLm};
use crate::params::{normal_like, Bound};
use crate::projector::{self, project, ProjectorConfig, ProjectorVariant};
use crate::scenesim::{episode_seed, gen_episode, SceneConfig};

/// Small LM so that a check over every parameter family stays fast.
pub fn composite_lm_config() -> LmConfig {
    LmConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_len: 16,
    }
}

/// One composite check. `per_param` elements of every projector and
/// adapter tensor are perturbed by `±h`.
pub fn composite_check(variant: ProjectorVariant, seed: u64, per_param: usize, h: f64) -> Result<GradCheckReport> {
    let cfg = composite_lm_config();
    let lora_cfg = LoraConfig { rank: 2, alpha: 4.0 };
    let lm = MicroLm::init(cfg, SplitMix64::derive(seed, "gc/lm").next_u64())?;
    let pcfg = ProjectorConfig {
        variant,
        d: cfg.d_model,
    };

    let mut rng = SplitMix64::derive(seed, "gc/params");
    let mut trainable = projector::init(&pcfg, rng.next_u64());
    // B = 0 would leave the adapter A factors without gradient.
    let lora = init_lora(&cfg, &lora_cfg, rng.next_u64());
    for (name, t) in lora.iter() {
        let t = if name.ends_with(".b") {
            normal_like(&mut rng, t.shape(), 0.1)
        } else {
            t.clone()
        };
        trainable.insert(name.to_string(), t);
    }

    let ep = gen_episode(
        0,
        episode_seed(seed, 0),
        &SceneConfig {
            forced_actor_count: Some(4),
            ..SceneConfig::default()
        },
    );
    let bev = encode_scene(&ep.scenes[0], &FrozenEncoderParams::canonical())?;
    let mut ids = vec![BOS, BEV_PLACEHOLDER];
    ids.extend((0..6).map(|_| 4 + rng.below(cfg.vocab_size as u64 - 4) as usize));
    ids.push(EOS);
    let targets: Vec<Option<usize>> = (0..ids.len())
        .map(|i| (i >= 1 && i + 1 < ids.len()).then(|| ids[i + 1]))
        .collect();

    let names: Vec<String> = trainable.names().map(str::to_string).collect();
    let params: Vec<Tensor<f64>> = names.iter().map(|n| trainable.get(n).expect("listed").cast()).collect();
    let base: &ParamStore = &lm.params;
    let report = grad_check_sampled(
        |tape, vars| {
            let mut p = Bound::bind_cast(tape, base);
            for (n, &v) in names.iter().zip(vars) {
                p.insert(n.clone(), v);
            }
            let e = project(tape, &p, &pcfg, &bev).map_err(num)?;
            let logits = forward(tape, &cfg, &p, Some((&p, &lora_cfg)), &ids, e).map_err(num)?;
            tape.cross_entropy(logits, &targets, 1.0 / 7.0)
        },
        &params,
        h,
        per_param,
        seed,
    )?;
    Ok(report)
}

fn num(e: crate::error::BellaError) -> bella_numcore::NumError {
    match e {
        crate::error::BellaError::Num(n) => n,
        other => bella_numcore::NumError::Shape {
            op: "composite",
            detail: other.to_string(),
        },
    }
}
