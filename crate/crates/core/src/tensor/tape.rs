use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        bias: Option<usize>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBroadcast {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Select {
        a: usize,
        len: usize,
        inner: usize,
        index: usize,
    },
    Expand {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        src: Vec<usize>,
    },
    Softmax {
        a: usize,
        n: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: usize,
    },
    Dropout {
        a: usize,
        scale: Vec<f64>,
    },
    L2Normalize {
        a: usize,
        d: usize,
        norms: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
        d: usize,
    },
    CrossEntropy {
        logits: usize,
        n: usize,
        targets: Vec<usize>,
        valid: Option<Vec<bool>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of tensor operations.
///
/// Every op appends its output after its inputs, so the node order is a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients are accumulated for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v`
    /// was reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the value of `v` with its gradient slot filled.
    pub fn export(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone().with_requires_grad(node.requires_grad);
        t.grad = self.grad(v).map(<[f64]>::to_vec);
        t
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Result<Var> {
        check_finite(op_name, &data)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// `x[..., in] * w[in, out] (+ bias[out])`, applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::Dimension(format!("linear: input {sx:?} does not match weight {sw:?}")));
        }
        let (inp, out_dim) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [out_dim] {
                return Err(Error::Dimension(format!(
                    "linear: bias {:?} does not match output width {out_dim}",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = bias {
            let bd = self.data(b);
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].copy_from_slice(bd);
            }
        }
        matmul_nn(self.data(x), self.data(w), &mut out, rows, inp, out_dim);
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        self.push(
            "linear",
            shape,
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                rows,
                inp,
                out: out_dim,
            },
            &inputs,
        )
    }

    /// Batched product of `a[batch, m, k]` with `b[batch, k, n]`, or with
    /// `b[batch, n, k]` transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && {
            if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            }
        };
        if !ok {
            return Err(Error::Dimension(format!(
                "batch_matmul: cannot multiply {sa:?} by {sb:?} (trans_b = {trans_b})"
            )));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for t in 0..batch {
                let a_t = &ad[t * m * k..(t + 1) * m * k];
                let b_t = &bd[t * k * n..(t + 1) * k * n];
                let o_t = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    matmul_nt(a_t, b_t, o_t, m, k, n);
                } else {
                    matmul_nn(a_t, b_t, o_t, m, k, n);
                }
            }
        }
        self.push(
            "batch_matmul",
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a.0, b.0],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape and is
    /// repeated over the leading dimensions (bias rows, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Dimension(format!("add_broadcast: {sb:?} is not a suffix of {sa:?}")));
        }
        let bd = self.data(b);
        let q = bd.len();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % q])
            .collect();
        let shape = sa.to_vec();
        self.push("add_broadcast", shape, out, Op::AddBroadcast { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a: a.0, c }, &[a.0])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum { a: a.0 }, &[a.0])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("mean: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let ad = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &ad[(o * len + l) * inner..(o * len + l + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push("mean", out_shape, out, Op::Mean { a: a.0, outer, len, inner }, &[a.0])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat: no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Dimension(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.data(p)[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", shape, out, Op::Concat { parts: idx.clone(), outer, chunks }, &idx)
    }

    /// Picks position `index` along `axis`, removing that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::Dimension(format!("select: index {index} on axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let ad = self.data(a);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            out.extend_from_slice(&ad[start..start + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push("select", out_shape, out, Op::Select { a: a.0, len, inner, index }, &[a.0])
    }

    /// Row `i` of a matrix (or the `i`-th leading slice of any tensor).
    pub fn slice_row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.select(a, 0, i)
    }

    /// Repeats `a` over new leading dimensions `lead`.
    pub fn expand(&mut self, a: Var, lead: &[usize]) -> Result<Var> {
        let times: usize = lead.iter().product();
        if times == 0 {
            return Err(Error::Dimension("expand: zero repeat".into()));
        }
        let ad = self.data(a);
        let mut out = Vec::with_capacity(times * ad.len());
        for _ in 0..times {
            out.extend_from_slice(ad);
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(self.shape(a));
        self.push("expand", shape, out, Op::Expand { a: a.0 }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::Dimension(format!("reshape: {:?} into {shape:?}", self.shape(a))));
        }
        let out = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("permute: {perm:?} is not a permutation of rank {rank}")));
        }
        let mut in_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n = self.value(a).numel();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            src.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum::<usize>());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let ad = self.data(a);
        let out: Vec<f64> = src.iter().map(|&s| ad[s]).collect();
        self.push("permute", out_shape, out, Op::Permute { a: a.0, src }, &[a.0])
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::Dimension(format!("transpose: expected a matrix, got {:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis where `key_valid[g * n + j]` says whether
    /// column `j` may receive weight in rows of group `g`; a group is
    /// `rows_per_group` consecutive rows. Masked columns get exactly zero
    /// weight, as if their logits were -inf.
    pub fn masked_softmax(&mut self, a: Var, key_valid: &[bool], rows_per_group: usize) -> Result<Var> {
        self.softmax_impl(a, Some((key_valid, rows_per_group)))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<(&[bool], usize)>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = match shape.last() {
            Some(&n) if n > 0 => n,
            _ => return Err(Error::Dimension(format!("softmax: empty last axis in {shape:?}"))),
        };
        let ad = self.data(a);
        let rows = ad.len() / n;
        if let Some((valid, per)) = mask {
            if per == 0 || !rows.is_multiple_of(per) || valid.len() != (rows / per) * n {
                return Err(Error::Dimension(format!(
                    "masked_softmax: mask of length {} does not fit {shape:?} with {per} rows per group",
                    valid.len()
                )));
            }
        }
        let mut out = vec![0.0; ad.len()];
        for r in 0..rows {
            let x = &ad[r * n..(r + 1) * n];
            let keep: Option<&[bool]> = mask.map(|(valid, per)| {
                let g = r / per;
                &valid[g * n..(g + 1) * n]
            });
            let ok = |j: usize| keep.is_none_or(|k| k[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in x.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax: row {r} has every position masked")));
            }
            let y = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if ok(j) {
                    y[j] = (x[j] - max).exp();
                    total += y[j];
                }
            }
            let inv = 1.0 / total;
            y.iter_mut().for_each(|v| *v *= inv);
        }
        self.push("softmax", shape, out, Op::Softmax { a: a.0, n }, &[a.0])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Dimension("layer_norm: empty normalized axis".into()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                d,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, out, Op::Gelu { a: a.0 }, &[a.0])
    }

    /// Inverted dropout: in training each entry is zeroed with probability
    /// `p` and survivors are scaled by `1 / (1 - p)`. Identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.data(a).iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push("dropout", shape, out, Op::Dropout { a: a.0, scale }, &[a.0])
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("l2_normalize_rows: expected a matrix, got {shape:?}")));
        }
        let d = shape[1];
        let ad = self.data(a);
        let mut norms = Vec::with_capacity(shape[0]);
        let mut out = Vec::with_capacity(ad.len());
        for (r, row) in ad.chunks(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Contract(format!("l2_normalize_rows: row {r} is zero")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        self.push("l2_normalize_rows", shape, out, Op::L2Normalize { a: a.0, d, norms }, &[a.0])
    }

    /// Gathers rows of `table[V, d]`; output shape `[ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("embedding_lookup: table shape {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("embedding_lookup: id {bad} outside vocabulary of {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::Dimension("embedding_lookup: no ids".into()));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding_lookup",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
                d,
            },
            &[table.0],
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, None)
    }

    /// Cross-entropy where only columns with `valid[r * n + j]` take part in
    /// row `r`'s normalization.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, Some(valid))
    }

    fn cross_entropy_impl(&mut self, logits: Var, targets: &[usize], valid: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("cross_entropy: logits must be a matrix, got {shape:?}")));
        }
        let (rows, n) = (shape[0], shape[1]);
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(v) = valid {
            if v.len() != rows * n {
                return Err(Error::Dimension("cross_entropy: mask does not match logits".into()));
            }
        }
        let ok = |r: usize, j: usize| valid.is_none_or(|v| v[r * n + j]);
        let ld = self.data(logits);
        let mut probs = vec![0.0; rows * n];
        let mut total = 0.0;
        for r in 0..rows {
            let t = targets[r];
            if t >= n || !ok(r, t) {
                return Err(Error::Contract(format!("cross_entropy: target {t} invalid for row {r}")));
            }
            let x = &ld[r * n..(r + 1) * n];
            let max = (0..n).filter(|&j| ok(r, j)).map(|j| x[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                if ok(r, j) {
                    let e = (x[j] - max).exp();
                    probs[r * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                probs[r * n + j] /= z;
            }
            total += max + z.ln() - x[t];
        }
        let loss = total / rows as f64;
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                n,
                targets: targets.to_vec(),
                valid: valid.map(<[bool]>::to_vec),
                probs,
            },
            &[logits.0],
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients from earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("backward: loss is not on this tape".into()))?;
        if !node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
            f(slot);
        };
        let val = |j: usize| nodes[j].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                acc(a, &mut |ga| matmul_nt(g, val(b), ga, m, n, k));
                acc(b, &mut |gb| matmul_tn(val(a), g, gb, m, k, n));
            }
            &Op::Linear { x, w, bias, rows, inp, out } => {
                acc(x, &mut |gx| matmul_nt(g, val(w), gx, rows, out, inp));
                acc(w, &mut |gw| matmul_tn(val(x), g, gw, rows, inp, out));
                if let Some(b) = bias {
                    acc(b, &mut |gb| {
                        for r in 0..rows {
                            add_into(gb, &g[r * out..(r + 1) * out]);
                        }
                    });
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let b_t = &bd[t * k * n..(t + 1) * k * n];
                        let ga_t = &mut ga[t * m * k..(t + 1) * m * k];
                        if trans_b {
                            matmul_nn(g_t, b_t, ga_t, m, n, k);
                        } else {
                            matmul_nt(g_t, b_t, ga_t, m, n, k);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let a_t = &ad[t * m * k..(t + 1) * m * k];
                        let gb_t = &mut gb[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            matmul_tn(g_t, a_t, gb_t, m, n, k);
                        } else {
                            matmul_tn(a_t, g_t, gb_t, m, k, n);
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::AddBroadcast { a, b } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| {
                    let q = gb.len();
                    for chunk in g.chunks(q) {
                        add_into(gb, chunk);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * x;
                    }
                });
            }
            &Op::Scale { a, c } => acc(a, &mut |ga| {
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }),
            &Op::Sum { a } => acc(a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean { a, outer, len, inner } => acc(a, &mut |ga| {
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += s * inv;
                        }
                    }
                }
            }),
            Op::Concat { parts, outer, chunks } => {
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    acc(p, &mut |gp| {
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + c];
                            add_into(&mut gp[o * c..(o + 1) * c], src);
                        }
                    });
                    offset += c;
                }
            }
            &Op::Select { a, len, inner, index } => acc(a, &mut |ga| {
                for (o, src) in g.chunks(inner).enumerate() {
                    let start = (o * len + index) * inner;
                    add_into(&mut ga[start..start + inner], src);
                }
            }),
            &Op::Expand { a } => acc(a, &mut |ga| {
                let q = ga.len();
                for chunk in g.chunks(q) {
                    add_into(ga, chunk);
                }
            }),
            &Op::Reshape { a } => acc(a, &mut |ga| add_into(ga, g)),
            Op::Permute { a, src } => acc(*a, &mut |ga| {
                for (gi, &s) in g.iter().zip(src) {
                    ga[s] += gi;
                }
            }),
            &Op::Softmax { a, n } => {
                let y = nodes[i].value.data();
                acc(a, &mut |ga| {
                    for ((ga_r, g_r), y_r) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = g_r.iter().zip(y_r).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga_r[j] += y_r[j] * (g_r[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, d, xhat, rstd } => {
                let d = *d;
                let gd = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for (g_r, h_r) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += g_r[j] * h_r[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for g_r in g.chunks(d) {
                        add_into(gb, g_r);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut gh = vec![0.0; d];
                    for (r, ((gx_r, g_r), h_r)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            gh[j] = g_r[j] * gd[j];
                        }
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghh = gh.iter().zip(h_r).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx_r[j] += rstd[r] * (gh[j] - mean_gh - h_r[j] * mean_ghh);
                        }
                    }
                });
            }
            &Op::Gelu { a } => {
                let ad = val(a);
                acc(a, &mut |ga| {
                    for ((o, gi), &x) in ga.iter_mut().zip(g).zip(ad) {
                        *o += gi * gelu_deriv(x);
                    }
                });
            }
            Op::Dropout { a, scale } => acc(*a, &mut |ga| {
                for ((o, gi), s) in ga.iter_mut().zip(g).zip(scale) {
                    *o += gi * s;
                }
            }),
            Op::L2Normalize { a, d, norms } => {
                let y = nodes[i].value.data();
                let d = *d;
                acc(*a, &mut |ga| {
                    for (r, ((ga_r, g_r), y_r)) in ga.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)).enumerate() {
                        let dot: f64 = g_r.iter().zip(y_r).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            ga_r[j] += (g_r[j] - y_r[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Embedding { table, ids, d } => {
                let d = *d;
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy { logits, n, targets, valid, probs } => {
                let n = *n;
                let rows = targets.len();
                let scale = g[0] / rows as f64;
                acc(*logits, &mut |gl| {
                    for r in 0..rows {
                        for j in 0..n {
                            if valid.as_ref().is_none_or(|v| v[r * n + j]) {
                                let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                                gl[r * n + j] += scale * (probs[r * n + j] - indicator);
                            }
                        }
                    }
                });
            }
        }
    }
}
