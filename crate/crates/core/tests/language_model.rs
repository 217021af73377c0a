use bella_core::langdata::{Vocab, BEV_PLACEHOLDER, BOS, EOS};
use bella_core::lm::{
    assemble_prompt, embed, init_lora, logits_value, LmConfig, LoraConfig, MicroLm, Stage, PLACEHOLDER_POS,
};
use bella_core::params::{normal_like, Bound};
use bella_numcore::{ParamStore, SplitMix64, Tape, Tensor};

fn cfg() -> LmConfig {
    LmConfig {
        vocab_size: Vocab::canonical().len(),
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_len: 64,
    }
}

fn words(rng: &mut SplitMix64, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| 4 + rng.below(v as u64 - 4) as usize).collect()
}

fn prompt(rng: &mut SplitMix64, c: &LmConfig) -> Vec<usize> {
    let n = 2 + rng.below(20) as usize;
    let mut ids = vec![BOS, BEV_PLACEHOLDER];
    ids.extend(words(rng, n, c.vocab_size));
    ids
}

fn nonzero_lora(c: &LmConfig, l: &LoraConfig, seed: u64) -> ParamStore {
    let mut rng = SplitMix64::derive(seed, "test/lora");
    let mut s = init_lora(c, l, seed);
    for (_, t) in s.iter_mut() {
        if t.data().iter().all(|&x| x == 0.0) {
            *t = normal_like(&mut rng, t.shape(), 0.05);
        }
    }
    s
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}

#[test]
fn every_assembly_has_exactly_one_placeholder_at_position_one() {
    let c = cfg();
    let mut rng = SplitMix64::derive(0, "assembly");
    for _ in 0..100 {
        let (nq, ny) = (1 + rng.below(8) as usize, 1 + rng.below(8) as usize);
        let q = words(&mut rng, nq, c.vocab_size);
        let y = words(&mut rng, ny, c.vocab_size);
        for stage in [Stage::Pretrain, Stage::Finetune] {
            let a = assemble_prompt(stage, &q, &y, 4, c.max_len).unwrap();
            assert_eq!(a.placeholder_count(), 1);
            assert_eq!(a.ids[PLACEHOLDER_POS], BEV_PLACEHOLDER);
            assert_eq!(*a.ids.last().unwrap(), EOS);
            // targets cover the answer and EOS only
            assert_eq!(a.num_targets(), y.len() + 1);
        }
    }
}

#[test]
fn placeholder_row_is_bev_token_plus_position() {
    let c = cfg();
    let lm = MicroLm::init(c, 1).unwrap();
    let mut rng = SplitMix64::derive(1, "embed");
    for _ in 0..10 {
        let ids = prompt(&mut rng, &c);
        let e = normal_like(&mut rng, &[1, c.d_model], 1.0);
        let mut tape = Tape::new();
        let p = Bound::bind(&mut tape, &lm.params);
        let ev = tape.leaf(&e);
        let x = embed(&mut tape, &p, &ids, ev).unwrap();
        let x = tape.value(x);
        let tok = lm.params.get("lm/tok_emb").unwrap();
        let pos = lm.params.get("lm/pos_emb").unwrap();
        for (t, &id) in ids.iter().enumerate() {
            let base = if t == PLACEHOLDER_POS { e.row(0) } else { tok.row(id) };
            let want: Vec<f32> = base.iter().zip(pos.row(t)).map(|(a, b)| a + b).collect();
            assert_eq!(x.row(t), &want[..], "row {t}");
        }
    }
}

#[test]
fn logits_at_t_ignore_later_tokens_over_100_prompts() {
    let c = cfg();
    let lm = MicroLm::init(c, 2).unwrap();
    let lcfg = LoraConfig::default();
    let lora = nonzero_lora(&c, &lcfg, 2);
    let mut rng = SplitMix64::derive(2, "causality");
    for k in 0..100 {
        let ids = prompt(&mut rng, &c);
        let e = normal_like(&mut rng, &[1, c.d_model], 1.0);
        let t = 1 + rng.below(ids.len() as u64 - 2) as usize;
        let mut changed = ids.clone();
        for id in changed.iter_mut().skip(t + 1) {
            *id = 4 + (*id + 1 + rng.below(5) as usize) % (c.vocab_size - 4);
        }
        let adapters = (k % 2 == 0).then_some((&lora, &lcfg));
        let a = logits_value(&lm, adapters, &ids, &e).unwrap();
        let b = logits_value(&lm, adapters, &changed, &e).unwrap();
        for r in 0..=t {
            assert_eq!(a.row(r), b.row(r), "prompt {k} row {r} (perturbed after {t})");
        }
        assert_ne!(a.row(ids.len() - 1), b.row(ids.len() - 1));
    }
}

#[test]
fn zero_b_adapters_are_bit_identical_and_merge_is_equivalent() {
    let c = cfg();
    let lm = MicroLm::init(c, 3).unwrap();
    let lcfg = LoraConfig::default();
    let zero = init_lora(&c, &lcfg, 3);
    let lora = nonzero_lora(&c, &lcfg, 3);
    let merged = lm.merge_lora(&lora, &lcfg).unwrap();
    let mut rng = SplitMix64::derive(3, "merge");
    let mut worst = 0f64;
    for _ in 0..10 {
        let ids = prompt(&mut rng, &c);
        let e = normal_like(&mut rng, &[1, c.d_model], 1.0);
        let base = logits_value(&lm, None, &ids, &e).unwrap();
        assert_eq!(logits_value(&lm, Some((&zero, &lcfg)), &ids, &e).unwrap(), base);
        let adapted = logits_value(&lm, Some((&lora, &lcfg)), &ids, &e).unwrap();
        assert!(max_abs_diff(&adapted, &base) > 1e-3, "adapters should matter");
        worst = worst.max(max_abs_diff(&adapted, &logits_value(&merged, None, &ids, &e).unwrap()));
    }
    assert!(worst < 1e-4, "{worst}");
    assert!(merged.merge_lora(&lora, &lcfg).is_err());
    let back = merged.unmerge_lora(&lora, &lcfg).unwrap();
    for (n, t) in lm.params.iter() {
        assert!(max_abs_diff(t, back.params.get(n).unwrap()) < 1e-5, "{n}");
    }
}

#[test]
fn uniform_logits_cost_ln_vocab() {
    let v = Vocab::canonical().len();
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[5, v]));
    let targets: Vec<Option<usize>> = (0..5).map(|i| Some((i * 13) % v)).collect();
    let l = tape.cross_entropy(z, &targets, 1.0 / 5.0).unwrap();
    assert!((tape.value(l).data()[0] - (v as f64).ln()).abs() < 1e-9);
}

#[test]
fn lora_fraction_below_ten_percent_at_reference_depth() {
    let c = LmConfig {
        d_model: 128,
        n_layers: 4,
        ..cfg()
    };
    let lm = MicroLm::init(c, 0).unwrap();
    let lora = init_lora(&c, &LoraConfig { rank: 8, alpha: 16.0 }, 0);
    let frac = lora.num_scalars() as f64 / lm.num_params() as f64;
    assert!(frac < 0.10, "{frac}");
}
