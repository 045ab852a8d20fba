//! Modality projections, early/late fusion, the NT-Xent alignment loss, the
//! classifier head, and the joint objective.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Initializer, ParamId, LN_EPS};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
pub struct EarlyFusionParams {
    pub lin_t_w: ParamId,
    pub lin_t_b: ParamId,
    pub lin_i_w: ParamId,
    pub lin_i_b: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl EarlyFusionParams {
    /// Classifier hidden width equals `d`.
    pub fn init(init: &mut Initializer<'_>, d: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        Ok(Self {
            lin_t_w: init.xavier("fusion.lin_t.w", d, d)?,
            lin_t_b: init.zeros("fusion.lin_t.b", &[d])?,
            lin_i_w: init.xavier("fusion.lin_i.w", d, d)?,
            lin_i_b: init.zeros("fusion.lin_i.b", &[d])?,
            ln_gamma: init.ones("head.ln.gamma", &[d])?,
            ln_beta: init.zeros("head.ln.beta", &[d])?,
            hidden_w: init.xavier("head.hidden.w", d, d)?,
            hidden_b: init.zeros("head.hidden.b", &[d])?,
            out_w: init.xavier("head.out.w", d, classes)?,
            out_b: init.zeros("head.out.b", &[classes])?,
        })
    }
}

/// Per-modality output layers combined at decision level.
#[derive(Debug, Clone)]
pub struct LateFusionParams {
    pub head_t_w: ParamId,
    pub head_t_b: ParamId,
    pub head_i_w: ParamId,
    pub head_i_b: ParamId,
}

impl LateFusionParams {
    pub fn init(init: &mut Initializer<'_>, d: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        Ok(Self {
            head_t_w: init.xavier("late.head_t.w", d, classes)?,
            head_t_b: init.zeros("late.head_t.b", &[classes])?,
            head_i_w: init.xavier("late.head_i.w", d, classes)?,
            head_i_b: init.zeros("late.head_i.b", &[classes])?,
        })
    }
}

#[derive(Debug, Clone)]
pub enum FusionParams {
    Early(EarlyFusionParams),
    Late(LateFusionParams),
}

#[derive(Debug, Clone, Copy)]
pub struct EarlyFused {
    pub z_t: Var,
    pub z_i: Var,
    pub h_joint: Var,
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension(format!(
            "modality shapes differ: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// `z_T = Linear_T(h_T)`, `z_I = Linear_I(h_I)`, `h_joint = (z_T + z_I) / 2`.
pub fn fuse_early(ctx: &mut Ctx, h_t: Var, h_i: Var, params: &EarlyFusionParams) -> Result<EarlyFused> {
    same_shape(&ctx.tape, h_t, h_i)?;
    let z_t = ctx.linear(h_t, params.lin_t_w, params.lin_t_b)?;
    let z_i = ctx.linear(h_i, params.lin_i_w, params.lin_i_b)?;
    let sum = ctx.tape.add(z_t, z_i)?;
    let h_joint = ctx.tape.scale(sum, 0.5)?;
    Ok(EarlyFused { z_t, z_i, h_joint })
}

/// NT-Xent over the `2B` rows of `[norm(z_T); norm(z_I)]`: row `i` and row
/// `i + B` are positives for each other, every other row except `i` itself
/// is a negative. Mean over all `2B` anchors.
pub fn nt_xent(tape: &mut Tape, z_t: Var, z_i: Var, tau: f64) -> Result<Var> {
    same_shape(tape, z_t, z_i)?;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let &[b, _] = tape.shape(z_t) else {
        return Err(Error::Dimension(format!("nt_xent expects [B, d], got {:?}", tape.shape(z_t))));
    };
    let zt = tape.l2_normalize_rows(z_t)?;
    let zi = tape.l2_normalize_rows(z_i)?;
    let z = tape.concat(&[zt, zi], 0)?;
    let zt_all = tape.transpose(z)?;
    let sim = tape.matmul(z, zt_all)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let n = 2 * b;
    let targets: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    let valid: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    tape.masked_cross_entropy(sim, &targets, &valid)
}

/// `out(dropout(gelu(hidden(LN(h_joint)))))`: logits `[B, K]`.
pub fn classify(ctx: &mut Ctx, h_joint: Var, params: &EarlyFusionParams) -> Result<Var> {
    let (g, b) = (ctx.p(params.ln_gamma), ctx.p(params.ln_beta));
    let x = ctx.tape.layer_norm(h_joint, g, b, LN_EPS)?;
    let x = ctx.linear(x, params.hidden_w, params.hidden_b)?;
    let x = ctx.tape.gelu(x)?;
    let x = ctx.dropout(x)?;
    ctx.linear(x, params.out_w, params.out_b)
}

/// `½ (head_T(h_T) + head_I(h_I))`.
pub fn fuse_late(ctx: &mut Ctx, h_t: Var, h_i: Var, params: &LateFusionParams) -> Result<Var> {
    same_shape(&ctx.tape, h_t, h_i)?;
    let lt = ctx.linear(h_t, params.head_t_w, params.head_t_b)?;
    let li = ctx.linear(h_i, params.head_i_w, params.head_i_b)?;
    let sum = ctx.tape.add(lt, li)?;
    ctx.tape.scale(sum, 0.5)
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub cls: Var,
    pub contrast: Var,
}

/// Rejects labels outside `[0, classes)`, naming the offending sample.
pub fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= classes) {
        Some(i) => Err(Error::Data(format!(
            "sample {i}: label {} outside [0, {classes})",
            labels[i]
        ))),
        None => Ok(()),
    }
}

/// `L = L_cls + lambda * L_contrast`. When `lambda == 0` the contrastive term
/// is still computed for logging but `total` is `cls` itself.
pub fn joint_loss(tape: &mut Tape, logits: Var, labels: &[usize], z_t: Var, z_i: Var, tau: f64, lambda: f64) -> Result<JointLoss> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("contrastive weight must be non-negative, got {lambda}")));
    }
    let classes = *tape.shape(logits).last().unwrap_or(&0);
    check_labels(labels, classes)?;
    let cls = tape.cross_entropy_from_logits(logits, labels)?;
    let contrast = nt_xent(tape, z_t, z_i, tau)?;
    let total = if lambda == 0.0 {
        cls
    } else {
        let weighted = tape.scale(contrast, lambda)?;
        tape.add(cls, weighted)?
    };
    Ok(JointLoss { total, cls, contrast })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, random_tensor, weighted_sum, Coverage, REL_ERR_TOL};
    use crate::nn::ParamStore;
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    /// Materializes the `2B x 2B` similarity matrix and sums the definition
    /// term by term.
    fn brute_force_nt_xent(zt: &[Vec<f64>], zi: &[Vec<f64>], tau: f64) -> f64 {
        let norm = |v: &Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let z: Vec<Vec<f64>> = zt.iter().chain(zi).map(norm).collect();
        let n = z.len();
        let b = n / 2;
        let s: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| z[i].iter().zip(&z[j]).map(|(a, c)| a * c).sum::<f64>() / tau).collect())
            .collect();
        let ell = |i: usize, j: usize| {
            let denom: f64 = (0..n).filter(|&k| k != i).map(|k| s[i][k].exp()).sum();
            -(s[i][j].exp() / denom).ln()
        };
        (0..b).map(|i| ell(i, i + b) + ell(i + b, i)).sum::<f64>() / (2 * b) as f64
    }

    fn nt(zt: &[Vec<f64>], zi: &[Vec<f64>], tau: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(zt)?);
        let b = tape.leaf(Tensor::from_rows(zi)?);
        let l = nt_xent(&mut tape, a, b, tau)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn single_pair_has_zero_loss() {
        assert_eq!(nt(&[vec![0.3, -1.0]], &[vec![2.0, 5.0]], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn identical_vectors_give_ln3() {
        let v = vec![0.2, 0.7, -0.1];
        let l = nt(&[v.clone(), v.clone()], &[v.clone(), v], 0.5).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn orthogonal_pairs_against_brute_force() {
        let zt = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let zi = zt.clone();
        let got = nt(&zt, &zi, 0.5).unwrap();
        assert!((got - brute_force_nt_xent(&zt, &zi, 0.5)).abs() < 1e-12);
        // Each anchor sees similarities {0, 2, 0} with the positive at 2.
        assert!((got - ((2.0 + 2f64.exp()).ln() - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_row_is_rejected() {
        assert!(matches!(
            nt(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 0.5),
            Err(Error::Contract(_))
        ));
        assert!(nt(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn aligned_orthogonal_pairs_sharpen_with_lower_tau() {
        let e = |i: usize| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let z: Vec<_> = (0..3).map(e).collect();
        let losses: Vec<f64> = [1.0, 0.5, 0.1].iter().map(|&t| nt(&z, &z, t).unwrap()).collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    }

    fn rows(rng: &mut Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
        (0..b).map(|_| (0..d).map(|_| rng.normal(0.0, 1.0)).collect()).collect()
    }

    proptest! {
        #[test]
        fn nt_xent_matches_brute_force(seed in any::<u64>(), b in 1usize..=8, d in 1usize..=16, t in 0usize..3) {
            let tau = [0.1, 0.5, 1.0][t];
            let mut rng = Rng::new(seed);
            let (zt, zi) = (rows(&mut rng, b, d), rows(&mut rng, b, d));
            let got = nt(&zt, &zi, tau).unwrap();
            prop_assert!(got.is_finite());
            prop_assert!((got - brute_force_nt_xent(&zt, &zi, tau)).abs() < 1e-9);
        }

        #[test]
        fn nt_xent_is_symmetric_in_modalities(seed in any::<u64>(), b in 1usize..6, d in 1usize..8) {
            let mut rng = Rng::new(seed);
            let (zt, zi) = (rows(&mut rng, b, d), rows(&mut rng, b, d));
            prop_assert!((nt(&zt, &zi, 0.5).unwrap() - nt(&zi, &zt, 0.5).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn nt_xent_ignores_row_scale(seed in any::<u64>(), b in 1usize..6, d in 1usize..8, c in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let (zt, zi) = (rows(&mut rng, b, d), rows(&mut rng, b, d));
            let mut scaled = zt.clone();
            let r = rng.below(b);
            scaled[r].iter_mut().for_each(|v| *v *= c);
            prop_assert!((nt(&zt, &zi, 0.5).unwrap() - nt(&scaled, &zi, 0.5).unwrap()).abs() < 1e-12);
        }
    }

    struct Fixture {
        store: ParamStore,
        early: EarlyFusionParams,
        late: LateFusionParams,
        h_t: ParamId,
        h_i: ParamId,
    }

    fn fixture(seed: u64, b: usize, d: usize, k: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut init = Initializer {
            store: &mut store,
            rng: &mut rng,
        };
        let early = EarlyFusionParams::init(&mut init, d, k).unwrap();
        let late = LateFusionParams::init(&mut init, d, k).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += rng.normal(0.0, 0.1);
            }
        }
        let h_t = store.add("h_t", random_tensor(&[b, d], &mut rng, 1.0)).unwrap();
        let h_i = store.add("h_i", random_tensor(&[b, d], &mut rng, 1.0)).unwrap();
        Fixture {
            store,
            early,
            late,
            h_t,
            h_i,
        }
    }

    fn set(store: &mut ParamStore, id: ParamId, values: &[f64]) {
        store.get_mut(id).data_mut().copy_from_slice(values);
    }

    #[test]
    fn early_fusion_hand_cases() {
        let mut f = fixture(1, 1, 2, 3);
        let eye = [1.0, 0.0, 0.0, 1.0];
        for (w, b) in [(f.early.lin_t_w, f.early.lin_t_b), (f.early.lin_i_w, f.early.lin_i_b)] {
            set(&mut f.store, w, &eye);
            set(&mut f.store, b, &[0.0, 0.0]);
        }
        for (t, i, want) in [
            ([1.0, 0.0], [0.0, 1.0], [0.5, 0.5]),
            ([0.7, -2.0], [0.7, -2.0], [0.7, -2.0]),
            ([0.7, -2.0], [-0.7, 2.0], [0.0, 0.0]),
        ] {
            set(&mut f.store, f.h_t, &t);
            set(&mut f.store, f.h_i, &i);
            let mut ctx = Ctx::eval(&f.store);
            let (ht, hi) = (ctx.p(f.h_t), ctx.p(f.h_i));
            let out = fuse_early(&mut ctx, ht, hi, &f.early).unwrap();
            assert_eq!(ctx.tape.data(out.h_joint), &want);
        }
    }

    #[test]
    fn zero_weight_classifier_emits_bias() {
        let mut f = fixture(2, 3, 4, 3);
        let n = f.store.get(f.early.hidden_w).numel();
        set(&mut f.store, f.early.hidden_w, &vec![0.0; n]);
        let n = f.store.get(f.early.out_w).numel();
        set(&mut f.store, f.early.out_w, &vec![0.0; n]);
        let bias = [0.3, -1.2, 2.0];
        set(&mut f.store, f.early.out_b, &bias);
        let mut ctx = Ctx::eval(&f.store);
        let h = ctx.p(f.h_t);
        let logits = classify(&mut ctx, h, &f.early).unwrap();
        assert_eq!(ctx.tape.shape(logits), &[3, 3]);
        for r in 0..3 {
            assert_eq!(&ctx.tape.data(logits)[r * 3..r * 3 + 3], &bias);
        }
        let probs = ctx.tape.softmax(logits).unwrap();
        for row in ctx.tape.data(probs).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let f = fixture(3, 2, 4, 3);
        let (early, h) = (f.early.clone(), f.h_t);
        let reports = check_params(
            "classify",
            &f.store,
            None,
            Coverage::All,
            |s| Ctx::new(s, Rng::new(5), true, 0.3),
            |ctx| {
                let x = ctx.p(h);
                let logits = classify(ctx, x, &early)?;
                weighted_sum(&mut ctx.tape, logits, 9)
            },
        )
        .unwrap();
        for r in reports {
            assert!(r.max_rel_err < REL_ERR_TOL, "{r:?}");
        }
    }

    fn early_loss(ctx: &mut Ctx, f: &Fixture, labels: &[usize], lambda: f64) -> Result<JointLoss> {
        let (ht, hi) = (ctx.p(f.h_t), ctx.p(f.h_i));
        let fused = fuse_early(ctx, ht, hi, &f.early)?;
        let logits = classify(ctx, fused.h_joint, &f.early)?;
        joint_loss(&mut ctx.tape, logits, labels, fused.z_t, fused.z_i, 0.5, lambda)
    }

    #[test]
    fn zero_lambda_total_is_classification_loss() {
        let f = fixture(4, 4, 4, 3);
        let mut ctx = Ctx::eval(&f.store);
        let l = early_loss(&mut ctx, &f, &[0, 2, 1, 1], 0.0).unwrap();
        assert_eq!(ctx.tape.value(l.total).item().to_bits(), ctx.tape.value(l.cls).item().to_bits());
        assert!(ctx.tape.value(l.contrast).item() > 0.0);
    }

    #[test]
    fn uniform_logits_cost_ln3() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 3]));
        let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let l = joint_loss(&mut tape, logits, &[0, 2], z, z, 0.5, 0.2).unwrap();
        assert!((tape.value(l.cls).item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn total_recomposes_from_parts() {
        for seed in 0..20 {
            let f = fixture(seed, 5, 4, 3);
            let mut ctx = Ctx::eval(&f.store);
            let l = early_loss(&mut ctx, &f, &[0, 1, 2, 2, 0], 0.2).unwrap();
            let v = |x| ctx.tape.value(x).item();
            assert!((v(l.total) - (v(l.cls) + 0.2 * v(l.contrast))).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_label_names_the_sample() {
        let f = fixture(5, 3, 4, 3);
        let mut ctx = Ctx::eval(&f.store);
        let err = early_loss(&mut ctx, &f, &[0, 1, 3], 0.2).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("sample 2"), "{err}");
    }

    #[test]
    fn contrastive_gradient_reaches_both_projections() {
        let f = fixture(6, 4, 4, 3);
        let mut ctx = Ctx::new(&f.store, Rng::new(2), true, 0.1);
        let l = early_loss(&mut ctx, &f, &[0, 1, 2, 0], 0.2).unwrap();
        ctx.tape.backward(l.total).unwrap();
        let grads = ctx.param_grads();
        for id in [f.early.lin_t_w, f.early.lin_i_w] {
            let g = grads[id.index()].as_ref().unwrap();
            assert!(g.iter().map(|v| v * v).sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        let f = fixture(7, 2, 4, 3);
        let reports = check_params(
            "joint",
            &f.store,
            None,
            Coverage::All,
            |s| Ctx::new(s, Rng::new(5), true, 0.2),
            |ctx| Ok(early_loss(ctx, &f, &[2, 0], 0.2)?.total),
        )
        .unwrap();
        for r in reports {
            assert!(r.max_rel_err < REL_ERR_TOL, "{r:?}");
        }
    }

    fn late(store: &ParamStore, f: &Fixture) -> Vec<f64> {
        let mut ctx = Ctx::eval(store);
        let (ht, hi) = (ctx.p(f.h_t), ctx.p(f.h_i));
        let out = fuse_late(&mut ctx, ht, hi, &f.late).unwrap();
        ctx.tape.data(out).to_vec()
    }

    #[test]
    fn late_fusion_cases() {
        let f = fixture(8, 3, 4, 3);
        let got = late(&f.store, &f);

        let mut ctx = Ctx::eval(&f.store);
        let (ht, hi) = (ctx.p(f.h_t), ctx.p(f.h_i));
        let lt = ctx.linear(ht, f.late.head_t_w, f.late.head_t_b).unwrap();
        let li = ctx.linear(hi, f.late.head_i_w, f.late.head_i_b).unwrap();
        let want: Vec<f64> = ctx
            .tape
            .data(lt)
            .iter()
            .zip(ctx.tape.data(li))
            .map(|(a, b)| (a + b) * 0.5)
            .collect();
        assert_eq!(got, want);
        let lt = ctx.tape.data(lt).to_vec();

        let mut same = f.store.clone();
        let t_vals = f.store.get(f.h_t).data().to_vec();
        set(&mut same, f.h_i, &t_vals);
        for (src, dst) in [(f.late.head_t_w, f.late.head_i_w), (f.late.head_t_b, f.late.head_i_b)] {
            let v = same.get(src).data().to_vec();
            set(&mut same, dst, &v);
        }
        for (g, w) in late(&same, &f).iter().zip(&lt) {
            assert!((g - w).abs() < 1e-15);
        }

        let mut one_sided = f.store.clone();
        for id in [f.late.head_i_w, f.late.head_i_b] {
            let n = one_sided.get(id).numel();
            set(&mut one_sided, id, &vec![0.0; n]);
        }
        let half: Vec<f64> = lt.iter().map(|v| 0.5 * v).collect();
        assert_eq!(late(&one_sided, &f), half);
    }
}
