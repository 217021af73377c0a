//! Central-difference gradient checker, run in double precision.

use crate::error::{NumError, Result};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the tape gradient of `f` against `(f(x+h) − f(x−h)) / 2h` for
/// every element of every tensor in `params`. Relative error uses the
/// denominator `max(|a|, |n|, 1e−8)`.
pub fn grad_check_many<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = params.iter().map(|p| (0..p.len()).collect()).collect();
    grad_check_at(f, params, h, &all)
}

/// Like [`grad_check_many`] but perturbs at most `per_param` elements of each
/// tensor, chosen by a seeded shuffle. Meant for composites too large to
/// check exhaustively.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = SplitMix64::derive(seed, "grad_check_sampled");
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let mut idx: Vec<usize> = (0..p.len()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(per_param);
            idx.sort_unstable();
            idx
        })
        .collect();
    grad_check_at(f, params, h, &picks)
}

fn grad_check_at<F>(f: F, params: &[Tensor<f64>], h: f64, indices: &[Vec<usize>]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(NumError::NonScalarLoss(v.shape().to_vec()));
        }
        let y = v.data()[0];
        if !y.is_finite() {
            return Err(NumError::NonFinite(y));
        }
        Ok(y)
    };

    let live: Vec<Tensor<f64>> = params.iter().map(|p| p.clone().with_requires_grad(true)).collect();
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = live.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        let y = tape.value(out).data()[0];
        if !y.is_finite() {
            return Err(NumError::NonFinite(y));
        }
        let mut grads = tape.backward(out)?;
        vars.iter()
            .zip(&live)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect::<Vec<_>>()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for pi in 0..work.len() {
        for &ei in &indices[pi] {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-parameter convenience wrapper around [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Max relative error of one operator over every seed and shape set.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub runs: usize,
}

type OpFn = for<'t> fn(&mut Tape<'t, f64>, &[Var], &[usize]) -> Result<Var>;

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_f64(shape, &data).expect("shape matches data")
}

/// Contracts `y` with fixed random weights so every output element carries a
/// distinct, order-one sensitivity.
fn contract(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::derive(seed, "projection");
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn s(v: &[&[usize]]) -> Vec<Vec<usize>> {
    v.iter().map(|x| x.to_vec()).collect()
}

type OpEntry = (&'static str, Vec<Vec<Vec<usize>>>, OpFn);

fn operators() -> Vec<OpEntry> {
    let elementwise = vec![s(&[&[3, 4]]), s(&[&[7]]), s(&[&[2, 2, 2]])];
    vec![
        (
            "linear",
            vec![
                s(&[&[3, 4], &[4, 5], &[5]]),
                s(&[&[1, 7], &[7, 2], &[2]]),
                s(&[&[6, 3], &[3, 3], &[3]]),
            ],
            |t, v, _| t.linear(v[0], v[1], Some(v[2])),
        ),
        (
            "matmul",
            vec![s(&[&[2, 3], &[3, 4]]), s(&[&[5, 1], &[1, 5]]), s(&[&[4, 4], &[4, 4]])],
            |t, v, _| t.matmul(v[0], v[1]),
        ),
        (
            "layer_norm",
            vec![
                s(&[&[2, 5], &[5], &[5]]),
                s(&[&[1, 8], &[8], &[8]]),
                s(&[&[4, 3], &[3], &[3]]),
            ],
            |t, v, _| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        (
            "conv2d_s1",
            vec![
                s(&[&[2, 5, 5], &[3, 2, 3, 3], &[3]]),
                s(&[&[1, 4, 6], &[2, 1, 3, 3], &[2]]),
                s(&[&[3, 3, 3], &[1, 3, 1, 1], &[1]]),
            ],
            |t, v, _| t.conv2d(v[0], v[1], v[2], 1, 1),
        ),
        (
            "conv2d_s2",
            vec![
                s(&[&[2, 8, 8], &[3, 2, 3, 3], &[3]]),
                s(&[&[1, 6, 4], &[2, 1, 3, 3], &[2]]),
                s(&[&[3, 5, 5], &[2, 3, 3, 3], &[2]]),
            ],
            |t, v, _| t.conv2d(v[0], v[1], v[2], 2, 1),
        ),
        (
            "avgpool",
            vec![s(&[&[2, 4, 4]]), s(&[&[1, 8, 6]]), s(&[&[3, 2, 2]])],
            |t, v, _| t.adaptive_avg_pool(v[0], 2, 2),
        ),
        (
            "embedding",
            vec![s(&[&[6, 4]]), s(&[&[3, 8]]), s(&[&[10, 2]])],
            |t, v, dims| {
                let ids: Vec<usize> = (0..5).map(|i| (i * 7 + 1) % dims[0]).collect();
                t.embedding(v[0], &ids)
            },
        ),
        (
            "attention",
            vec![
                s(&[&[4, 6], &[4, 6], &[4, 6]]),
                s(&[&[1, 4], &[1, 4], &[1, 4]]),
                s(&[&[6, 8], &[6, 8], &[6, 8]]),
            ],
            |t, v, dims| {
                let heads = if dims[1] % 2 == 0 { 2 } else { 1 };
                t.causal_attention(v[0], v[1], v[2], heads)
            },
        ),
        (
            "cross_entropy",
            vec![s(&[&[3, 5]]), s(&[&[1, 8]]), s(&[&[6, 3]])],
            |t, v, dims| {
                let targets: Vec<Option<usize>> = (0..dims[0])
                    .map(|r| (r % 3 != 1 || dims[0] == 1).then_some((r * 5 + 2) % dims[1]))
                    .collect();
                t.cross_entropy(v[0], &targets, 0.5)
            },
        ),
        ("tanh", elementwise.clone(), |t, v, _| Ok(t.tanh(v[0]))),
        ("gelu", elementwise.clone(), |t, v, _| Ok(t.gelu(v[0]))),
        ("scale", elementwise.clone(), |t, v, _| Ok(t.scale(v[0], -1.7))),
        (
            "add",
            vec![s(&[&[3, 4], &[3, 4]]), s(&[&[7], &[7]]), s(&[&[2, 2, 2], &[2, 2, 2]])],
            |t, v, _| t.add(v[0], v[1]),
        ),
        (
            "mul",
            vec![s(&[&[3, 4], &[3, 4]]), s(&[&[7], &[7]]), s(&[&[2, 2, 2], &[2, 2, 2]])],
            |t, v, _| t.mul(v[0], v[1]),
        ),
        (
            "add_bias",
            vec![s(&[&[3, 4], &[4]]), s(&[&[1, 2], &[2]]), s(&[&[5, 3], &[3]])],
            |t, v, _| t.add_bias(v[0], v[1]),
        ),
        (
            "replace_row",
            vec![s(&[&[3, 4], &[1, 4]]), s(&[&[2, 2], &[1, 2]]), s(&[&[5, 3], &[1, 3]])],
            |t, v, _| t.replace_row(v[0], 1, v[1]),
        ),
        (
            "slice_rows",
            vec![s(&[&[4, 3]]), s(&[&[2, 5]]), s(&[&[6, 2]])],
            |t, v, dims| t.slice_rows(v[0], 1, dims[0] - 1),
        ),
        (
            "reshape",
            vec![s(&[&[3, 4]]), s(&[&[2, 6]]), s(&[&[1, 8]])],
            |t, v, dims| t.reshape(v[0], &[dims[0] * dims[1]]),
        ),
    ]
}

/// Checks every differentiable operator on three shape sets and `seeds`
/// seeds each, exhaustively, with central differences of step `h`.
pub fn operator_suite(seeds: u64, h: f64) -> Result<Vec<OperatorCheck>> {
    let mut out = Vec::new();
    for (name, shapes, f) in operators() {
        let mut worst = 0f64;
        let mut runs = 0;
        for (si, shape_set) in shapes.iter().enumerate() {
            for seed in 0..seeds {
                let mut rng = SplitMix64::derive(seed * 31 + si as u64, name);
                let params: Vec<Tensor<f64>> = shape_set.iter().map(|s| rand_tensor(&mut rng, s, -1.0, 1.0)).collect();
                let dims = shape_set[0].clone();
                let r = grad_check_many(
                    |t, v| {
                        let y = f(t, v, &dims)?;
                        contract(t, y, seed)
                    },
                    &params,
                    h,
                )?;
                worst = worst.max(r.max_rel_error);
                runs += 1;
            }
        }
        out.push(OperatorCheck {
            name,
            max_rel_error: worst,
            runs,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = SplitMix64::new(5);
        let data: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = Tensor::from_f64(&[3, 4], &data).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_f64(&[2], &[0.3, -0.7]).unwrap();
        let r = grad_check(|t, _v| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.analytic, 0.0);
        assert_eq!(r.numeric, 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.sum(v);
                let inf = t.constant(Tensor::scalar(f64::INFINITY));
                t.add(s, inf)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(NumError::NonFinite(_))));
    }
}
