//! Tape-based reverse-mode automatic differentiation.
//!
//! Operators are recorded in execution order, so a reverse sweep over the
//! node list is a valid topological replay and touches each node once.
//! Nodes that cannot reach a `requires_grad` leaf are marked as not needing a
//! gradient and are skipped during the sweep; no gradient buffer is ever
//! allocated for them.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::kernels::{add_into, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ReplaceRow {
        x: Var,
        row: usize,
        src: Var,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    AvgPool {
        input: Var,
        fh: usize,
        fw: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        scale: T,
        probs: Vec<T>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of the `requires_grad` leaves, keyed by their [`Var`].
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads.keys().copied()
    }
}

/// Computation tape. Leaves may borrow parameter tensors for the lifetime of
/// the tape; intermediate values are owned.
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether a gradient will flow into `v` during [`Tape::backward`].
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a borrowed tensor as a leaf; its `requires_grad` flag decides
    /// whether backward produces a gradient for it.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_owned(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf_owned(t.with_requires_grad(false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumError::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `x[.., n] + b[n]`, broadcasting the bias over all leading dimensions.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = vx.last_dim();
        if vb.len() != n || vb.rank() != 1 {
            return Err(NumError::shape(
                "add_bias",
                format!("x {:?}, bias {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, vb.data());
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumError::shape("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2("matmul")?;
        let [k2, n] = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(NumError::shape("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut c = vec![T::zero(); m * n];
        matmul_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b), &[a, b]))
    }

    /// `x[.., in] · w[in×out] (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let vx = self.value(x);
        let [din, dout] = self.value(w).dims2("linear")?;
        if vx.last_dim() != din {
            return Err(NumError::shape(
                "linear",
                format!("input {:?} vs weight [{din}x{dout}]", vx.shape()),
            ));
        }
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.rank() != 1 || vb.len() != dout {
                return Err(NumError::shape(
                    "linear",
                    format!("bias {:?} vs out {dout}", vb.shape()),
                ));
            }
        }
        let m = vx.rows();
        let mut c = vec![T::zero(); m * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in c.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        matmul_acc(m, din, dout, vx.data(), self.value(w).data(), &mut c);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(shape, c), Op::Linear { x, w, b }, &inputs))
    }

    /// Row-wise normalization over the last dimension with population
    /// variance, followed by the affine map `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let vp = self.value(p);
            if vp.rank() != 1 || vp.len() != d {
                return Err(NumError::shape(
                    "layer_norm",
                    format!("{name} {:?} vs width {d}", vp.shape()),
                ));
            }
        }
        let rows = vx.rows();
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.tanh()).collect();
        self.push(Tensor::from_parts(vx.shape().to_vec(), data), Op::Tanh(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu_fwd(v)).collect();
        self.push(Tensor::from_parts(vx.shape().to_vec(), data), Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(T::zero())).collect();
        self.push(Tensor::from_parts(vx.shape().to_vec(), data), Op::Relu(x), &[x])
    }

    /// Gathers rows of `table[V×d]`, producing `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [v, d] = self.value(table).dims2("embedding")?;
        if ids.is_empty() {
            return Err(NumError::shape("embedding", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumError::TargetOutOfRange {
                target: bad,
                classes: v,
            });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Copy of `x[R×d]` with row `row` overwritten by `src` (`[d]` or `[1×d]`).
    pub fn replace_row(&mut self, x: Var, row: usize, src: Var) -> Result<Var> {
        let [r, d] = self.value(x).dims2("replace_row")?;
        let vs = self.value(src);
        if vs.len() != d || row >= r {
            return Err(NumError::shape(
                "replace_row",
                format!("x [{r}x{d}], row {row}, src {:?}", vs.shape()),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        data[row * d..(row + 1) * d].copy_from_slice(vs.data());
        let out = Tensor::from_parts(vec![r, d], data);
        Ok(self.push(out, Op::ReplaceRow { x, row, src }, &[x, src]))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [r, d] = self.value(x).dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(NumError::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, d], data), Op::SliceRows { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?.with_requires_grad(false);
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// 2-d cross-correlation: `input[C_in×H×W]`, `kernel[C_out×C_in×k×k]`,
    /// `bias[C_out]`. Output size uses floor division:
    /// `H' = ⌊(H + 2·pad − k)/stride⌋ + 1`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let [c_in, h, w] = self.value(input).dims3("conv2d")?;
        let [c_out, kc, kh, kw] = self.value(kernel).dims4("conv2d")?;
        let vb = self.value(bias);
        if kc != c_in || kh != kw || kh % 2 == 0 || vb.rank() != 1 || vb.len() != c_out || stride == 0 {
            return Err(NumError::shape(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?}, stride {stride}",
                    self.value(input).shape(),
                    self.value(kernel).shape(),
                    vb.shape()
                ),
            ));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(NumError::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let npix = out_h * out_w;
        let ckk = c_in * k * k;
        let mut out = vec![T::zero(); c_out * npix];
        for (o, row) in out.chunks_mut(npix).enumerate() {
            row.fill(vb.data()[o]);
        }
        matmul_acc(c_out, ckk, npix, self.value(kernel).data(), &cols, &mut out);
        let out = Tensor::from_parts(vec![c_out, out_h, out_w], out);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            &[input, kernel, bias],
        ))
    }

    /// Adaptive average pooling of `[C×H×W]` down to `[C×out_h×out_w]`.
    /// Requires `H % out_h == 0` and `W % out_w == 0`.
    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [c, h, w] = self.value(input).dims3("adaptive_avg_pool")?;
        if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
            return Err(NumError::shape(
                "adaptive_avg_pool",
                format!("[{c}x{h}x{w}] -> {out_h}x{out_w}"),
            ));
        }
        let (fh, fw) = (h / out_h, w / out_w);
        let inv = T::one() / T::from_f64((fh * fw) as f64);
        let src = self.value(input).data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let o = (ch * out_h + i / fh) * out_w + j / fw;
                    out[o] = out[o] + src[(ch * h + i) * w + j];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, out_h, out_w], out),
            Op::AvgPool { input, fh, fw },
            &[input],
        ))
    }

    /// Fused multi-head causal self-attention over `q, k, v: [L×d]`.
    /// Scores above the diagonal are filled with −∞ before the softmax, so
    /// their probabilities are exactly zero.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let [l, d] = self.value(q).dims2("causal_attention")?;
        if self.value(k).shape() != [l, d] || self.value(v).shape() != [l, d] {
            return Err(NumError::shape(
                "causal_attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.value(q).shape(),
                    self.value(k).shape(),
                    self.value(v).shape()
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumError::shape(
                "causal_attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * l * l];
        let mut out = vec![T::zero(); l * d];
        let mut scores = vec![T::neg_infinity(); l];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let qi = &qd[i * d + off..i * d + off + dh];
                scores.fill(T::neg_infinity());
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let s = dot(qi, kj) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let p = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                let mut z = T::zero();
                for j in 0..l {
                    // exp(−∞ − max) = 0 for masked positions.
                    let e = (scores[j] - max).exp();
                    p[j] = e;
                    z = z + e;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    p[j] = p[j] / z;
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o = *o + p[j] * vv;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![l, d], out),
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        ))
    }

    /// `scale · Σ_r −log softmax(logits[r])[targets[r]]` over rows whose target
    /// is `Some`. Returns a `[1]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], scale: T) -> Result<Var> {
        let [r, v] = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != r {
            return Err(NumError::shape(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for (row, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(NumError::TargetOutOfRange { target: t, classes: v });
            }
            let lr = &ld[row * v..(row + 1) * v];
            let lse = log_sum_exp(lr);
            for (p, &x) in probs[row * v..(row + 1) * v].iter_mut().zip(lr) {
                *p = (x - lse).exp();
            }
            total = total + (lse - lr[t]);
        }
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for exactly the
    /// leaves registered with `requires_grad = true` that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut result = Gradients::default();
        if !self.nodes[loss.0].needs_grad {
            return Ok(result);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                result
                    .grads
                    .insert(Var(idx), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(result)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |d| add_into(d, g));
                let n = self.value(*b).len();
                self.acc(grads, *b, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, &gg), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d = *d + gg * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &gg), &x) in d.iter_mut().zip(g).zip(va) {
                        *d = *d + gg * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |d| {
                    for (d, &gg) in d.iter_mut().zip(g) {
                        *d = *d + gg * *s;
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |d| {
                    for d in d.iter_mut() {
                        *d = *d + g[0];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let [m, k] = [self.value(*a).shape()[0], self.value(*a).shape()[1]];
                let n = self.value(*b).shape()[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| matmul_nt_acc(m, k, n, g, vb, d));
                self.acc(grads, *b, |d| matmul_tn_acc(m, k, n, va, g, d));
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let [din, dout] = [self.value(*w).shape()[0], self.value(*w).shape()[1]];
                let m = vx.rows();
                self.acc(grads, *x, |d| matmul_nt_acc(m, din, dout, g, self.value(*w).data(), d));
                self.acc(grads, *w, |d| matmul_tn_acc(m, din, dout, vx.data(), g, d));
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in g.chunks(dout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let dn = T::from_f64(d as f64);
                self.acc(grads, *x, |dx| {
                    let mut dxhat = vec![T::zero(); d];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * xh[j];
                        }
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + inv / dn * (dn * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                });
                self.acc(grads, *gamma, |dg| {
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * xh[j];
                        }
                    }
                });
                self.acc(grads, *beta, |db| {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, &gg), &yy) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + gg * (T::one() - yy * yy);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, &gg), &xx) in d.iter_mut().zip(g).zip(xv) {
                        *d = *d + gg * gelu_grad(xx);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, &gg), &xx) in d.iter_mut().zip(g).zip(xv) {
                        if xx > T::zero() {
                            *d = *d + gg;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                self.acc(grads, *table, |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ReplaceRow { x, row, src } => {
                let d = self.value(*src).len();
                self.acc(grads, *x, |dx| {
                    for (r, (dr, gr)) in dx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        if r != *row {
                            add_into(dr, gr);
                        }
                    }
                });
                self.acc(grads, *src, |ds| add_into(ds, &g[row * d..(row + 1) * d]));
            }
            Op::SliceRows { x, start } => {
                let d = self.value(*x).shape()[1];
                self.acc(grads, *x, |dx| add_into(&mut dx[start * d..start * d + g.len()], g));
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |d| add_into(d, g));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let npix = geom.out_h * geom.out_w;
                let ckk = geom.c_in * geom.k * geom.k;
                self.acc(grads, *kernel, |dk| matmul_nt_acc(geom.c_out, ckk, npix, g, cols, dk));
                self.acc(grads, *bias, |db| {
                    for (o, row) in g.chunks(npix).enumerate() {
                        db[o] = db[o] + row.iter().copied().sum::<T>();
                    }
                });
                self.acc(grads, *input, |di| {
                    let mut dcols = vec![T::zero(); ckk * npix];
                    matmul_tn_acc(geom.c_out, ckk, npix, self.value(*kernel).data(), g, &mut dcols);
                    col2im_acc(&dcols, geom, di);
                });
            }
            Op::AvgPool { input, fh, fw } => {
                let [c, h, w] = [
                    self.value(*input).shape()[0],
                    self.value(*input).shape()[1],
                    self.value(*input).shape()[2],
                ];
                let (oh, ow) = (h / fh, w / fw);
                let inv = T::one() / T::from_f64((fh * fw) as f64);
                self.acc(grads, *input, |d| {
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let o = (ch * oh + i / fh) * ow + j / fw;
                                let t = (ch * h + i) * w + j;
                                d[t] = d[t] + g[o] * inv;
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                let v = self.value(*logits).shape()[1];
                let s = *scale * g[0];
                self.acc(grads, *logits, |d| {
                    for (row, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let dr = &mut d[row * v..(row + 1) * v];
                        let pr = &probs[row * v..(row + 1) * v];
                        for j in 0..v {
                            dr[j] = dr[j] + s * pr[j];
                        }
                        dr[t] = dr[t] - s;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let [l, d] = [self.value(q).shape()[0], self.value(q).shape()[1]];
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); l * d];
        let mut dk = vec![T::zero(); l * d];
        let mut dv = vec![T::zero(); l * d];
        let mut dp = vec![T::zero(); l];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let p = &probs[(h * l + i) * l..(h * l + i + 1) * l];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut dotp = T::zero();
                for j in 0..=i {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    dp[j] = dot(gi, vj);
                    dotp = dotp + p[j] * dp[j];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (o, &gg) in dvj.iter_mut().zip(gi) {
                        *o = *o + p[j] * gg;
                    }
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dotp) * scale;
                    for c in 0..dh {
                        dq[i * d + off + c] = dq[i * d + off + c] + ds * kd[j * d + off + c];
                        dk[j * d + off + c] = dk[j * d + off + c] + ds * qd[i * d + off + c];
                    }
                }
            }
        }
        self.acc(grads, q, |d| add_into(d, &dq));
        self.acc(grads, k, |d| add_into(d, &dk));
        self.acc(grads, v, |d| add_into(d, &dv));
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + z.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let npix = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); g.c_in * g.k * g.k * npix];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        dst[oi * g.out_w + oj] = input[(c * g.h + ii as usize) * g.w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc<T: Scalar>(dcols: &[T], g: &ConvGeom, dinput: &mut [T]) {
    let npix = g.out_h * g.out_w;
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &dcols[row * npix..(row + 1) * npix];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        let t = (c * g.h + ii as usize) * g.w + jj as usize;
                        dinput[t] = dinput[t] + src[oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1], &[5.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv2d_zero_input_passes_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let k = tape.constant(t(&[1, 1, 3, 3], &[0.3, -1., 2., 4., 5., 6., -7., 8., 9.]));
        let b = tape.constant(t(&[1], &[0.25]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn conv2d_hand_cross_correlation() {
        // 1·1 + 4·1 = 5 with a 2×2 diagonal kernel. Even kernels are rejected
        // by the public operator, so check the kernel arithmetic directly.
        let g = ConvGeom {
            c_in: 1,
            h: 2,
            w: 2,
            c_out: 1,
            k: 2,
            stride: 1,
            pad: 0,
            out_h: 1,
            out_w: 1,
        };
        let cols = im2col(&[1.0, 2.0, 3.0, 4.0], &g);
        let mut out = vec![0.0];
        matmul_acc(1, 4, 1, &[1.0, 0.0, 0.0, 1.0], &cols, &mut out);
        assert_eq!(out, vec![5.0]);
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, k, b, 1, 1).unwrap_err();
        assert!(matches!(err, NumError::Shape { op: "conv2d", .. }));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(t(&[3], &[1., 1., 1.]));
        let b = tape.constant(t(&[3], &[0., 0., 0.]));
        let x = tape.constant(t(&[3], &[2.5, 2.5, 2.5]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0.]);

        let g2 = tape.constant(t(&[2], &[1., 1.]));
        let b2 = tape.constant(t(&[2], &[0., 0.]));
        let x2 = tape.constant(t(&[2], &[-1., 1.]));
        let y2 = tape.layer_norm(x2, g2, b2, 1e-12).unwrap();
        let v = tape.value(y2).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let g3 = tape.constant(t(&[2], &[0., 0.]));
        let b3 = tape.constant(t(&[2], &[0.7, -0.2]));
        let y3 = tape.layer_norm(x2, g3, b3, 1e-5).unwrap();
        assert_eq!(tape.value(y3).data(), &[0.7, -0.2]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 8]));
        let y = tape.cross_entropy(l, &[Some(3)], 1.0).unwrap();
        assert!((tape.value(y).data()[0] - 8f64.ln()).abs() < 1e-12);

        let l = tape.constant(t(&[1, 2], &[100., 0.]));
        let y = tape.cross_entropy(l, &[Some(0)], 1.0).unwrap();
        assert!(tape.value(y).data()[0] < 1e-40);

        let l = tape.constant(t(&[1, 2], &[1., 2.]));
        let y = tape.cross_entropy(l, &[Some(0)], 1.0).unwrap();
        assert!((tape.value(y).data()[0] - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);

        let err = tape.cross_entropy(l, &[Some(2)], 1.0).unwrap_err();
        assert!(matches!(err, NumError::TargetOutOfRange { target: 2, classes: 2 }));
    }

    #[test]
    fn backward_bilinear_and_chain_rule() {
        let x = t(&[3], &[1., 2., 3.]).with_requires_grad(true);
        let y = t(&[3], &[4., -5., 6.]);
        let mut tape = Tape::new();
        let (vx, vy) = (tape.leaf(&x), tape.leaf(&y));
        let p = tape.mul(vx, vy).unwrap();
        let f = tape.sum(p);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(vx).unwrap().data(), y.data());
        assert!(g.get(vy).is_none());
        assert_eq!(g.len(), 1);

        let w1 = t(&[1, 1], &[2.]).with_requires_grad(true);
        let w2 = t(&[1, 1], &[3.]).with_requires_grad(true);
        let x = t(&[1, 1], &[5.]);
        let mut tape = Tape::new();
        let (a, b, c) = (tape.leaf(&w1), tape.leaf(&w2), tape.leaf(&x));
        let h = tape.matmul(a, c).unwrap();
        let f = tape.matmul(b, h).unwrap();
        let f = tape.sum(f);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[15.0]);
        assert_eq!(g.get(b).unwrap().data(), &[10.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(&[2], &[1., 2.]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let y = tape.scale(v, 2.0);
        assert!(matches!(tape.backward(y), Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = crate::SplitMix64::new(11);
        let mut rand = |n| -> Vec<f64> { (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect() };
        let (l, d) = (5, 8);
        let q = t(&[l, d], &rand(l * d));
        let k = t(&[l, d], &rand(l * d));
        let v = t(&[l, d], &rand(l * d));
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for c in 0..d {
            k2.data_mut()[4 * d + c] += 3.0;
            v2.data_mut()[4 * d + c] -= 2.0;
        }
        let mut tape = Tape::new();
        let (a, b, c) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let o1 = tape.causal_attention(a, b, c, 2).unwrap();
        let (b2, c2) = (tape.leaf(&k2), tape.leaf(&v2));
        let o2 = tape.causal_attention(a, b2, c2, 2).unwrap();
        let (r1, r2) = (tape.value(o1), tape.value(o2));
        assert_eq!(&r1.data()[..4 * d], &r2.data()[..4 * d]);
        assert_ne!(&r1.data()[4 * d..], &r2.data()[4 * d..]);
    }
}
