//! Central-difference checks for every differentiable operator: 10 seeds and
//! 3 shapes each, double precision, h = 1e-5, max relative error < 1e-4.

use bella_numcore::{grad_check_many, NumError, SplitMix64, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Contracts `y` with fixed random weights so every output element carries a
/// distinct, order-one sensitivity.
fn project<'t>(tape: &mut Tape<'t, f64>, y: Var, seed: u64) -> Result<Var, NumError> {
    let mut rng = SplitMix64::derive(seed, "projection");
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, shapes: &[Vec<Vec<usize>>], f: F)
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var], &[usize]) -> Result<Var, NumError> + Copy,
{
    for (si, shape_set) in shapes.iter().enumerate() {
        for seed in 0..SEEDS {
            let mut rng = SplitMix64::derive(seed * 31 + si as u64, name);
            let params: Vec<Tensor<f64>> = shape_set.iter().map(|s| rand_tensor(&mut rng, s, -1.0, 1.0)).collect();
            let dims = shape_set[0].clone();
            let r = grad_check_many(
                |t, v| {
                    let y = f(t, v, &dims)?;
                    project(t, y, seed)
                },
                &params,
                H,
            )
            .unwrap();
            assert!(r.max_rel_error < TOL, "{name} shapes {shape_set:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn linear_gradients() {
    check(
        "linear",
        &[
            vec![vec![3, 4], vec![4, 5], vec![5]],
            vec![vec![1, 7], vec![7, 2], vec![2]],
            vec![vec![6, 3], vec![3, 3], vec![3]],
        ],
        |t, v, _| t.linear(v[0], v[1], Some(v[2])),
    );
}

#[test]
fn matmul_gradients() {
    check(
        "matmul",
        &[
            vec![vec![2, 3], vec![3, 4]],
            vec![vec![5, 1], vec![1, 5]],
            vec![vec![4, 4], vec![4, 4]],
        ],
        |t, v, _| t.matmul(v[0], v[1]),
    );
}

#[test]
fn layer_norm_gradients() {
    check(
        "layer_norm",
        &[
            vec![vec![2, 5], vec![5], vec![5]],
            vec![vec![1, 8], vec![8], vec![8]],
            vec![vec![4, 3], vec![3], vec![3]],
        ],
        |t, v, _| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn conv2d_gradients() {
    check(
        "conv2d_s1",
        &[
            vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            vec![vec![1, 4, 6], vec![2, 1, 3, 3], vec![2]],
            vec![vec![3, 3, 3], vec![1, 3, 1, 1], vec![1]],
        ],
        |t, v, _| t.conv2d(v[0], v[1], v[2], 1, 1),
    );
    check(
        "conv2d_s2",
        &[
            vec![vec![2, 8, 8], vec![3, 2, 3, 3], vec![3]],
            vec![vec![1, 6, 4], vec![2, 1, 3, 3], vec![2]],
            vec![vec![3, 5, 5], vec![2, 3, 3, 3], vec![2]],
        ],
        |t, v, _| t.conv2d(v[0], v[1], v[2], 2, 1),
    );
}

#[test]
fn avgpool_gradients() {
    check(
        "avgpool",
        &[vec![vec![2, 4, 4]], vec![vec![1, 8, 6]], vec![vec![3, 2, 2]]],
        |t, v, _| t.adaptive_avg_pool(v[0], 2, 2),
    );
}

#[test]
fn embedding_gradients() {
    check(
        "embedding",
        &[vec![vec![6, 4]], vec![vec![3, 8]], vec![vec![10, 2]]],
        |t, v, dims| {
            let ids: Vec<usize> = (0..5).map(|i| (i * 7 + 1) % dims[0]).collect();
            t.embedding(v[0], &ids)
        },
    );
}

#[test]
fn attention_gradients() {
    check(
        "attention",
        &[
            vec![vec![4, 6], vec![4, 6], vec![4, 6]],
            vec![vec![1, 4], vec![1, 4], vec![1, 4]],
            vec![vec![6, 8], vec![6, 8], vec![6, 8]],
        ],
        |t, v, dims| {
            let heads = if dims[1] % 2 == 0 { 2 } else { 1 };
            t.causal_attention(v[0], v[1], v[2], heads)
        },
    );
}

#[test]
fn cross_entropy_gradients() {
    for (si, (rows, classes)) in [(3usize, 5usize), (1, 8), (6, 3)].into_iter().enumerate() {
        for seed in 0..SEEDS {
            let mut rng = SplitMix64::derive(seed * 31 + si as u64, "xent");
            let logits = rand_tensor(&mut rng, &[rows, classes], -2.0, 2.0);
            let targets: Vec<Option<usize>> = (0..rows)
                .map(|r| (r % 3 != 1).then(|| rng.below(classes as u64) as usize))
                .collect();
            let targets = if targets.iter().all(Option::is_none) {
                vec![Some(0); rows]
            } else {
                targets
            };
            let r = grad_check_many(|t, v| t.cross_entropy(v[0], &targets, 0.5), &[logits], H).unwrap();
            assert!(r.max_rel_error < TOL, "xent seed {seed}: {r:?}");
        }
    }
}

#[test]
fn elementwise_gradients() {
    let shapes = [vec![vec![3, 4]], vec![vec![7]], vec![vec![2, 2, 2]]];
    check("tanh", &shapes, |t, v, _| Ok(t.tanh(v[0])));
    check("gelu", &shapes, |t, v, _| Ok(t.gelu(v[0])));
    check("scale", &shapes, |t, v, _| Ok(t.scale(v[0], -1.7)));
    check(
        "add_bias",
        &[
            vec![vec![3, 4], vec![4]],
            vec![vec![1, 2], vec![2]],
            vec![vec![5, 3], vec![3]],
        ],
        |t, v, _| t.add_bias(v[0], v[1]),
    );
    check(
        "replace_row",
        &[
            vec![vec![3, 4], vec![1, 4]],
            vec![vec![2, 2], vec![1, 2]],
            vec![vec![5, 3], vec![1, 3]],
        ],
        |t, v, _| t.replace_row(v[0], 1, v[1]),
    );
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let w = Tensor::<f32>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
    let x = Tensor::<f32>::from_f64(&[1, 2], &[0.5, -1.])
        .unwrap()
        .with_requires_grad(true);
    let mut tape = Tape::new();
    let (vw, vx) = (tape.leaf(&w), tape.leaf(&x));
    let y = tape.linear(vx, vw, None).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(vw).is_none());
    assert!(g.get(vx).is_some());
    assert_eq!(g.vars().collect::<Vec<_>>(), vec![vx]);
    assert!(!tape.needs_grad(vw));
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = SplitMix64::new(99);
    let x = rand_tensor(&mut rng, &[2, 9, 9], -1.0, 1.0).cast::<f32>();
    let k = rand_tensor(&mut rng, &[4, 2, 3, 3], -1.0, 1.0).cast::<f32>();
    let b = rand_tensor(&mut rng, &[4], -1.0, 1.0).cast::<f32>();
    let run = || {
        let mut tape = Tape::new();
        let (a, bk, bb) = (tape.leaf(&x), tape.leaf(&k), tape.leaf(&b));
        let y = tape.conv2d(a, bk, bb, 2, 1).unwrap();
        let y = tape.tanh(y);
        let y = tape.reshape(y, &[4, 25]).unwrap();
        let q = tape.slice_rows(y, 0, 4).unwrap();
        let o = tape.causal_attention(q, q, q, 5).unwrap();
        tape.value(o).clone()
    };
    let a = run();
    let b2 = run();
    assert!(a.data().iter().zip(b2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn layer_norm_statistics() {
    let mut rng = SplitMix64::new(4);
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, &[3, 16], -5.0, 5.0);
        let ones = Tensor::<f64>::full(&[16], 1.0);
        let zeros = Tensor::<f64>::zeros(&[16]);
        let mut tape = Tape::new();
        let (vx, g, b) = (tape.leaf(&x), tape.leaf(&ones), tape.leaf(&zeros));
        let y = tape.layer_norm(vx, g, b, 1e-5).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn library_suite_covers_every_operator() {
    let t0 = std::time::Instant::now();
    let r = bella_numcore::operator_suite(SEEDS, H).unwrap();
    for name in [
        "linear",
        "matmul",
        "layer_norm",
        "conv2d_s1",
        "conv2d_s2",
        "avgpool",
        "embedding",
        "attention",
        "cross_entropy",
        "tanh",
        "gelu",
        "scale",
        "add",
        "mul",
        "add_bias",
        "replace_row",
        "slice_rows",
        "reshape",
    ] {
        let c = r
            .iter()
            .find(|c| c.name == name)
            .unwrap_or_else(|| panic!("{name} missing"));
        assert!(c.max_rel_error < TOL, "{c:?}");
        assert_eq!(c.runs, 30);
    }
    assert!(t0.elapsed().as_secs() < 60);
}
