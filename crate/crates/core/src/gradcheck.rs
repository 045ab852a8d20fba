//! Central finite-difference checks of tape gradients.
//!
//! The checker only ever evaluates the forward pass; it shares no code with
//! the backward rules it verifies.

use crate::error::Result;
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely; below it the
/// round-off of a central difference on an O(1) loss dominates.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Pass threshold on the worst relative error.
pub const REL_ERR_TOL: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_ERR_TOL
    }
}

/// Which entries of an input to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many entries per input: the largest-magnitude analytic
    /// gradient plus a seeded random sample.
    Sample(usize),
}

/// Compares the tape gradient of `f` with respect to every `inputs[i]`
/// against central differences.
///
/// `f` must build a scalar loss from fresh leaves; it is called once for the
/// analytic pass and twice per perturbed entry.
pub fn check<F>(name: &str, inputs: &[Tensor], coverage: Coverage, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut sampler = Rng::new(0x6772_6164);
    let mut values = inputs.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut entries_checked = 0;
    for (i, grad) in analytic.iter().enumerate() {
        let entries: Vec<usize> = match coverage {
            Coverage::All => (0..grad.len()).collect(),
            Coverage::Sample(k) if k >= grad.len() => (0..grad.len()).collect(),
            Coverage::Sample(k) => {
                let argmax = (0..grad.len())
                    .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                    .unwrap_or(0);
                let mut picked = vec![argmax];
                while picked.len() < k {
                    let j = sampler.below(grad.len());
                    if !picked.contains(&j) {
                        picked.push(j);
                    }
                }
                picked
            }
        };
        for j in entries {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + FD_EPS;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - FD_EPS;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            max_rel_err = max_rel_err.max(relative_error(grad[j], numeric));
            entries_checked += 1;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err,
        entries_checked,
    })
}

/// `sum(out * weights)` with fixed pseudo-random weights, so every output
/// entry contributes to the loss with a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect())?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, scale)).collect()).expect("finite normal draws")
}

/// Finite-difference check of every parameter in `store` (or the subset
/// `only`) for a loss built by `f` on a context produced by `make_ctx`.
///
/// `make_ctx` is called afresh for every evaluation so that dropout masks
/// replay identically when it reseeds the context RNG.
pub fn check_params<M, F>(
    name: &str,
    store: &ParamStore,
    only: Option<&[ParamId]>,
    coverage: Coverage,
    make_ctx: M,
    f: F,
) -> Result<Vec<CheckReport>>
where
    M: Fn(&ParamStore) -> Ctx,
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut ctx = make_ctx(s);
        let loss = f(&mut ctx)?;
        Ok(ctx.tape.value(loss).item())
    };
    let mut ctx = make_ctx(store);
    let loss = f(&mut ctx)?;
    ctx.tape.backward(loss)?;
    let grads = ctx.param_grads();

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut sampler = Rng::new(0x7061_7261);
    let mut work = store.clone();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).numel();
        let grad = grads[id.index()].clone().unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = match coverage {
            Coverage::Sample(k) if k < n => {
                let argmax = (0..n).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap_or(0);
                let mut picked = vec![argmax];
                while picked.len() < k {
                    let j = sampler.below(n);
                    if !picked.contains(&j) {
                        picked.push(j);
                    }
                }
                picked
            }
            _ => (0..n).collect(),
        };
        let mut max_rel_err: f64 = 0.0;
        for &j in &entries {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + FD_EPS;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - FD_EPS;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            max_rel_err = max_rel_err.max(relative_error(grad[j], numeric));
        }
        reports.push(CheckReport {
            name: format!("{name}/{}", store.name(id)),
            max_rel_err,
            entries_checked: entries.len(),
        });
    }
    Ok(reports)
}

/// Every differentiable tape operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCase {
    Matmul,
    Linear,
    BatchMatmul,
    BatchMatmulT,
    Add,
    AddBroadcast,
    Mul,
    Scale,
    Mean,
    Concat,
    Select,
    Expand,
    Reshape,
    Permute,
    Softmax,
    MaskedSoftmax,
    LayerNorm,
    Gelu,
    Dropout,
    L2Normalize,
    Embedding,
    CrossEntropy,
    MaskedCrossEntropy,
    Sum,
    SliceRow,
    Transpose,
}

pub const ALL_OPS: [OpCase; 26] = [
    OpCase::Matmul,
    OpCase::Linear,
    OpCase::BatchMatmul,
    OpCase::BatchMatmulT,
    OpCase::Add,
    OpCase::AddBroadcast,
    OpCase::Mul,
    OpCase::Scale,
    OpCase::Mean,
    OpCase::Concat,
    OpCase::Select,
    OpCase::Expand,
    OpCase::Reshape,
    OpCase::Permute,
    OpCase::Softmax,
    OpCase::MaskedSoftmax,
    OpCase::LayerNorm,
    OpCase::Gelu,
    OpCase::Dropout,
    OpCase::L2Normalize,
    OpCase::Embedding,
    OpCase::CrossEntropy,
    OpCase::MaskedCrossEntropy,
    OpCase::Sum,
    OpCase::SliceRow,
    OpCase::Transpose,
];

impl OpCase {
    pub fn name(self) -> String {
        let dbg = format!("{self:?}");
        let mut out = String::new();
        for (i, ch) in dbg.chars().enumerate() {
            if ch.is_ascii_uppercase() && i > 0 {
                out.push('_');
            }
            out.push(ch.to_ascii_lowercase());
        }
        out
    }
}

/// Finite-difference check of one op on random inputs whose extents are
/// drawn from `a`, `b` and `c` (`b >= 2`).
pub fn check_op(op: OpCase, seed: u64, a: usize, b: usize, c: usize) -> Result<CheckReport> {
    let mut rng = Rng::new(seed);
    let r = |shape: &[usize], rng: &mut Rng| random_tensor(shape, rng, 1.0);
    let name = op.name();
    type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let (inputs, f): (Vec<Tensor>, OpFn) = match op {
        OpCase::Matmul => (vec![r(&[a, b], &mut rng), r(&[b, c], &mut rng)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        OpCase::Linear => (
            vec![r(&[a, 2, b], &mut rng), r(&[b, c], &mut rng), r(&[c], &mut rng)],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
        OpCase::BatchMatmul => (
            vec![r(&[2, a, b], &mut rng), r(&[2, b, c], &mut rng)],
            Box::new(|t, v| t.batch_matmul(v[0], v[1], false)),
        ),
        OpCase::BatchMatmulT => (
            vec![r(&[2, a, b], &mut rng), r(&[2, c, b], &mut rng)],
            Box::new(|t, v| t.batch_matmul(v[0], v[1], true)),
        ),
        OpCase::Add => (vec![r(&[a, b], &mut rng), r(&[a, b], &mut rng)], Box::new(|t, v| t.add(v[0], v[1]))),
        OpCase::AddBroadcast => (
            vec![r(&[a, b, c], &mut rng), r(&[b, c], &mut rng)],
            Box::new(|t, v| t.add_broadcast(v[0], v[1])),
        ),
        OpCase::Mul => (vec![r(&[a, b], &mut rng), r(&[a, b], &mut rng)], Box::new(|t, v| t.mul(v[0], v[1]))),
        OpCase::Scale => (vec![r(&[a, b], &mut rng)], Box::new(|t, v| t.scale(v[0], -1.7))),
        OpCase::Mean => (vec![r(&[a, b, c], &mut rng)], Box::new(|t, v| t.mean(v[0], 1))),
        OpCase::Concat => (
            vec![r(&[a, b, c], &mut rng), r(&[a, 1, c], &mut rng)],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        OpCase::Select => (vec![r(&[a, b, c], &mut rng)], Box::new(move |t, v| t.select(v[0], 1, b - 1))),
        OpCase::Expand => (vec![r(&[b, c], &mut rng)], Box::new(move |t, v| t.expand(v[0], &[a]))),
        OpCase::Reshape => (vec![r(&[a, b, c], &mut rng)], Box::new(move |t, v| t.reshape(v[0], &[a * b, c]))),
        OpCase::Permute => (vec![r(&[a, b, c], &mut rng)], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        OpCase::Softmax => (vec![r(&[a, b], &mut rng)], Box::new(|t, v| t.softmax(v[0]))),
        OpCase::MaskedSoftmax => {
            let mask: Vec<bool> = (0..a * c).map(|i| i % c == 0 || i % 3 != 1).collect();
            (
                vec![r(&[a, b, c], &mut rng)],
                Box::new(move |t, v| t.masked_softmax(v[0], &mask, b)),
            )
        }
        OpCase::LayerNorm => (
            vec![r(&[a, b], &mut rng), r(&[b], &mut rng), r(&[b], &mut rng)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        OpCase::Gelu => (vec![r(&[a, b], &mut rng)], Box::new(|t, v| t.gelu(v[0]))),
        OpCase::Dropout => (
            vec![r(&[a, b], &mut rng)],
            Box::new(move |t, v| t.dropout(v[0], 0.4, &mut Rng::new(seed), true)),
        ),
        OpCase::L2Normalize => (vec![r(&[a, b], &mut rng)], Box::new(|t, v| t.l2_normalize_rows(v[0]))),
        OpCase::Embedding => {
            let ids: Vec<usize> = (0..a * 2).map(|i| (i * 7 + 3) % (c + 1)).collect();
            (vec![r(&[c + 1, b], &mut rng)], Box::new(move |t, v| t.embedding_lookup(v[0], &ids)))
        }
        OpCase::CrossEntropy => {
            let targets: Vec<usize> = (0..a).map(|i| (i * 5 + 1) % b).collect();
            return check(&name, &[r(&[a, b], &mut rng)], Coverage::All, move |t, v| {
                t.cross_entropy_from_logits(v[0], &targets)
            });
        }
        OpCase::MaskedCrossEntropy => {
            let n = b + 1;
            let targets: Vec<usize> = (0..a).map(|i| (i + 1) % n).collect();
            let valid: Vec<bool> = (0..a * n).map(|k| k / n != k % n).collect();
            return check(&name, &[r(&[a, n], &mut rng)], Coverage::All, move |t, v| {
                t.masked_cross_entropy(v[0], &targets, &valid)
            });
        }
        OpCase::Sum => (vec![r(&[a, b], &mut rng)], Box::new(|t, v| t.sum(v[0]))),
        OpCase::SliceRow => (vec![r(&[b, c], &mut rng)], Box::new(move |t, v| t.slice_row(v[0], b - 1))),
        OpCase::Transpose => (vec![r(&[a, b], &mut rng)], Box::new(|t, v| t.transpose(v[0]))),
    };
    check(&name, &inputs, Coverage::All, |tape, v| {
        let y = f(tape, v)?;
        weighted_sum(tape, y, seed ^ 0xabc)
    })
}

/// Every op at a fixed set of shapes.
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    ALL_OPS.iter().map(|&op| check_op(op, seed, 3, 4, 2)).collect()
}


