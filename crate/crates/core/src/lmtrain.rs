//! From-scratch training of the micro LM before it is frozen.
//!
//! The model learns to write scene descriptions while the placeholder row
//! carries a symbolic scene summary (actor counts per class, status and
//! quadrant plus the ego speed band) mapped through a throwaway linear map. This gives the
//! frozen model a notion of reading scene content from the placeholder row,
//! without any contact with the grid encoder or the projector variants.
//! Gaussian noise on the summary token keeps the model tolerant of the
//! imprecise tokens a projector produces.

use std::collections::BTreeSet;

use bella_numcore::{AdamW, ParamGroup, SplitMix64, Tape, Tensor};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{BellaError, Result};
use crate::langdata::SEP_WORD;
use crate::lm::{assemble_prompt, forward, LmConfig, MicroLm, Stage, LM_PREFIX};
use crate::params::{init_linear, init_norm, linear, norm, normal_like, Bound};
use crate::scenesim::{quadrant_of, ActorClass, Quadrant, Scene, Status, EGO_FAST_MIN, EGO_SLOW_MIN};

const CELLS: usize = 6 * 5 * 4;
pub const SCENE_FEATURES: usize = CELLS + 3;
const AUX: &str = "aux/summary";

fn pos<T: PartialEq>(all: &[T], x: &T) -> usize {
    all.iter().position(|a| a == x).expect("enum value listed")
}

fn cell(class: ActorClass, status: Status, quad: Quadrant) -> usize {
    (pos(&ActorClass::ALL, &class) * 5 + pos(&Status::ALL, &status)) * 4 + pos(&Quadrant::ALL, &quad)
}

/// Actor counts per (class, status, quadrant), then a one-hot ego speed
/// band. `[1 × SCENE_FEATURES]`.
pub fn scene_features(scene: &Scene) -> Result<Tensor<f32>> {
    let mut f = vec![0f32; SCENE_FEATURES];
    for a in &scene.actors {
        f[cell(a.class, a.status, quadrant_of(a)?)] += 1.0;
    }
    let band = if scene.ego_speed < EGO_SLOW_MIN {
        0
    } else if scene.ego_speed < EGO_FAST_MIN {
        1
    } else {
        2
    };
    f[CELLS + band] = 1.0;
    Ok(Tensor::new(&[1, SCENE_FEATURES], f)?)
}

/// Initializes the LM from `model.lm_seed`, trains it on the descriptions of
/// `episodes` for `model.lm_pretrain_epochs`, and returns it frozen together
/// with the per-epoch mean loss.
pub fn build_lm(cfg: &RunConfig, data: &Dataset, episodes: &BTreeSet<u64>) -> Result<(MicroLm, Vec<f64>)> {
    let lm_cfg: LmConfig = cfg.model.lm_config(data.vocab.len())?;
    let lm = MicroLm::init(lm_cfg, cfg.model.lm_seed)?;
    let epochs = cfg.model.lm_pretrain_epochs;
    if epochs == 0 {
        return Ok((lm, Vec::new()));
    }
    let sep = data.vocab.id(SEP_WORD).expect("separator in vocabulary");
    let mut samples = Vec::new();
    for s in data.pretrain.iter().filter(|s| episodes.contains(&s.episode_id)) {
        let y = data.vocab.encode(&s.description)?;
        let a = assemble_prompt(Stage::Pretrain, &[], &y, sep, lm_cfg.max_len)?;
        let feats = scene_features(data.scene(s.episode_id, s.frame_index)?)?;
        samples.push((a, feats));
    }
    if samples.is_empty() {
        return Err(BellaError::Dataset(
            "no descriptions to train the language model on".into(),
        ));
    }

    let mut rng = SplitMix64::derive(cfg.model.lm_seed, "lm/pretrain");
    let mut store = lm.params.clone();
    init_linear(&mut store, &mut rng, AUX, SCENE_FEATURES, lm_cfg.d_model);
    init_norm(&mut store, &format!("{AUX}.norm"), lm_cfg.d_model);
    store.set_requires_grad_all(true);
    let group = ParamGroup {
        name: "lm".into(),
        params: store.names().map(str::to_string).collect(),
        learning_rate: cfg.model.lm_pretrain_lr,
    };
    let mut opt = AdamW::new(vec![group], cfg.train.optimizer(), &store)?;
    let noise = cfg.model.lm_pretrain_noise;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.model.lm_pretrain_batch) {
            let total: usize = chunk.iter().map(|&i| samples[i].0.num_targets()).sum();
            let scale = 1.0 / total.max(1) as f32;
            let grads = {
                let mut tape = Tape::new();
                let p = Bound::bind(&mut tape, &store);
                let mut acc = None;
                for &i in chunk {
                    let (a, feats) = &samples[i];
                    let x = tape.constant(feats.clone());
                    let e = linear(&mut tape, &p, AUX, x)?;
                    let e = norm(&mut tape, &p, &format!("{AUX}.norm"), e)?;
                    let e = if noise > 0.0 {
                        let n = tape.constant(normal_like(&mut rng, &[1, lm_cfg.d_model], noise));
                        tape.add(e, n)?
                    } else {
                        e
                    };
                    let logits = forward(&mut tape, &lm_cfg, &p, None, &a.ids, e)?;
                    let l = tape.cross_entropy(logits, &a.targets(), scale)?;
                    acc = Some(match acc {
                        Some(s) => tape.add(s, l)?,
                        None => l,
                    });
                }
                let loss = acc.expect("non-empty chunk");
                sum += tape.value(loss).data()[0] as f64;
                batches += 1;
                let mut g = tape.backward(loss)?;
                p.iter()
                    .filter_map(|(n, v)| g.take(v).map(|t| (n.to_string(), t)))
                    .collect()
            };
            opt.step(&mut store, &grads)?;
        }
        history.push(sum / batches as f64);
        if std::env::var_os("BELLA_VERBOSE").is_some() {
            eprintln!("[lm] epoch {epoch}: {:.4}", sum / batches as f64);
        }
    }
    let lm = MicroLm::from_store(lm_cfg, &store.subset(LM_PREFIX))?;
    Ok((lm, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::Actor;

    #[test]
    fn features_count_actors() {
        let mk = |id, class, x: f64, y: f64, status| Actor {
            id,
            class,
            x,
            y,
            vx: 0.0,
            vy: 0.0,
            status,
        };
        let scene = Scene {
            frame_index: 0,
            ego_speed: 10.0,
            actors: vec![
                mk(0, ActorClass::Car, 10.0, 6.0, Status::Parked),
                mk(1, ActorClass::Car, 12.0, 5.0, Status::Parked),
                mk(2, ActorClass::Truck, -10.0, 0.0, Status::Stopped),
            ],
        };
        let f = scene_features(&scene).unwrap();
        let d = f.data();
        assert_eq!(d[cell(ActorClass::Car, Status::Parked, Quadrant::Front)], 2.0);
        assert_eq!(d[cell(ActorClass::Truck, Status::Stopped, Quadrant::Back)], 1.0);
        assert_eq!(d[CELLS + 2], 1.0);
        assert_eq!(d.iter().sum::<f32>(), 4.0);
    }
}
