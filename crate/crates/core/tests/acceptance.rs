//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails. Training-based criteria share runs where the setups
//! coincide.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use dtcn::cli::gradcheck_suite;
use dtcn::config::{FusionMode, RunConfig};
use dtcn::data::{gen_synthetic, reconcile_mvsa, stratified_split, Reconciled, SynthMode, SynthSpec, NEUTRAL};
use dtcn::fusion::nt_xent;
use dtcn::gradcheck::REL_ERR_TOL;
use dtcn::train::{
    accuracy_macro_f1, ablate_fusion, train, train_observed, BatchLog, SplitData, TrainOutcome, BEST_CHECKPOINT,
    FINAL_CHECKPOINT, METRICS_FILE,
};
use dtcn::{Rng, Tape, Tensor};

const GRADCHECK_ENTRIES: usize = 12;
const GRADCHECK_BUDGET_S: f64 = 60.0;
const NTXENT_TOL: f64 = 1e-9;
const RECOMPOSE_TOL: f64 = 1e-12;
const CONVERGE_MIN: f64 = 0.95;
const CONVERGE_BUDGET_S: f64 = 600.0;
const XOR_EARLY_MIN: f64 = 0.90;
const XOR_LATE_MAX: f64 = 0.60;
const FUSION_SLACK: f64 = 0.02;
const REFINE_SLACK: f64 = 0.02;
const REFINE_STEPS: u64 = 3;
const METRIC_TOL: f64 = 1e-12;
const SEEDS: [u64; 3] = [42, 43, 44];

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, ok: bool, detail: String) {
        println!("criterion {id}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((id, ok, detail));
    }
}

fn correlated(n: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        mode: SynthMode::Correlated,
        n,
        classes: 3,
        seed,
        ..SynthSpec::default()
    }
}

fn load(spec: &SynthSpec, dir: &Path, config: &RunConfig) -> SplitData {
    gen_synthetic(spec, dir).expect("generate dataset");
    SplitData::load(dir, config).expect("load dataset")
}

fn recomposition_error(logs: &[BatchLog], lambda: f64) -> f64 {
    logs.iter()
        .map(|b| (b.loss_total - (b.loss_cls + lambda * b.loss_contrast)).abs())
        .fold(0.0, f64::max)
}

fn best_val(out: &TrainOutcome) -> (f64, f64) {
    let r = out.val_record(out.early_stop.best_epoch).expect("best epoch has a val row");
    (r.accuracy, r.macro_f1)
}

/// Full 2B x 2B similarity matrix, summed term by term.
fn nt_xent_oracle(zt: &[Vec<f64>], zi: &[Vec<f64>], tau: f64) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let z: Vec<Vec<f64>> = zt.iter().chain(zi).map(unit).collect();
    let b = zt.len();
    let m = 2 * b;
    let s: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| z[i].iter().zip(&z[j]).map(|(x, y)| x * y).sum::<f64>() / tau).collect())
        .collect();
    let ell = |i: usize, j: usize| {
        let denom: f64 = (0..m).filter(|&k| k != i).map(|k| s[i][k].exp()).sum();
        -(s[i][j].exp() / denom).ln()
    };
    (0..b).map(|i| ell(i, i + b) + ell(i + b, i)).sum::<f64>() / m as f64
}

fn nt_xent_value(zt: &[Vec<f64>], zi: &[Vec<f64>], tau: f64) -> f64 {
    let (b, d) = (zt.len(), zt[0].len());
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::new(vec![b, d], zt.concat()).unwrap());
    let i = tape.constant(Tensor::new(vec![b, d], zi.concat()).unwrap());
    let loss = nt_xent(&mut tape, t, i, tau).unwrap();
    tape.value(loss).item()
}

fn criterion_1(rep: &mut Report) {
    let start = Instant::now();
    let reports = gradcheck_suite(&RunConfig::default(), GRADCHECK_ENTRIES).expect("gradcheck suite");
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let failed = reports.iter().filter(|r| !r.passed()).count();
    rep.record(
        1,
        failed == 0 && secs < GRADCHECK_BUDGET_S,
        format!(
            "{} checks, {failed} above {REL_ERR_TOL:e}; worst {} at {:.2e}; {secs:.1}s (budget {GRADCHECK_BUDGET_S}s)",
            reports.len(),
            worst.name,
            worst.max_rel_err
        ),
    );
}

fn criterion_2(rep: &mut Report) {
    let mut rng = Rng::new(0x6e74_7865);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let b = 1 + rng.below(8);
        let d = 1 + rng.below(16);
        let tau = [0.1, 0.5, 1.0][case % 3];
        let mut row = || -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..d).map(|_| rng.normal(0.0, 1.0)).collect();
                if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                    return v;
                }
            }
        };
        let zt: Vec<Vec<f64>> = (0..b).map(|_| row()).collect();
        let zi: Vec<Vec<f64>> = (0..b).map(|_| row()).collect();
        worst = worst.max((nt_xent_value(&zt, &zi, tau) - nt_xent_oracle(&zt, &zi, tau)).abs());
    }
    let single = nt_xent_value(&[vec![0.3, -1.2, 2.0]], &[vec![-0.7, 0.1, 0.4]], 0.5);
    let same = vec![vec![1.0, 2.0, -0.5], vec![1.0, 2.0, -0.5]];
    let four = nt_xent_value(&same, &same, 0.5);
    let ln3_err = (four - 3f64.ln()).abs();
    rep.record(
        2,
        worst < NTXENT_TOL && single == 0.0 && ln3_err < NTXENT_TOL,
        format!("100 random cases max |diff| {worst:.2e} (tol {NTXENT_TOL:e}); B=1 -> {single}; identical B=2 -> ln 3 off by {ln3_err:.2e}"),
    );
}

fn criterion_4(rep: &mut Report) {
    let mut verdicts = Vec::new();
    let mut agree = true;
    for t in 0..3 {
        for v in 0..3 {
            let want = if t == v {
                Reconciled::Keep(t)
            } else if t == NEUTRAL {
                Reconciled::Keep(v)
            } else if v == NEUTRAL {
                Reconciled::Keep(t)
            } else {
                Reconciled::Discard
            };
            let got = reconcile_mvsa(t, v).unwrap();
            agree &= got == want && reconcile_mvsa(v, t).unwrap() == reconcile_mvsa(t, v).unwrap();
            verdicts.push(got);
        }
    }
    let discards = verdicts.iter().filter(|r| **r == Reconciled::Discard).count();
    let items: Vec<(String, usize)> = (0..30).map(|i| (format!("s{i:02}"), i % 3)).collect();
    let a = stratified_split(&items, 3, 9).unwrap();
    let b = stratified_split(&items, 3, 9).unwrap();
    let per_class = a.class_counts.train == [8, 8, 8] && a.class_counts.val == [1, 1, 1] && a.class_counts.test == [1, 1, 1];
    let bitwise = serde_json::to_vec(&a).unwrap() == serde_json::to_vec(&b).unwrap();
    rep.record(
        4,
        agree && discards == 2 && per_class && bitwise,
        format!(
            "9 pairs: {} kept, {discards} discarded, rules {}; 10-per-class split {:?}/{:?}/{:?}; repeat identical: {bitwise}",
            9 - discards,
            if agree { "matched" } else { "VIOLATED" },
            a.class_counts.train,
            a.class_counts.val,
            a.class_counts.test
        ),
    );
}

fn criterion_9(rep: &mut Report) {
    let mut rng = Rng::new(0x6d65_7472);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let k = 2 + rng.below(4);
        let n = 1 + rng.below(30);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let preds: Vec<usize> = if case % 10 == 0 {
            vec![rng.below(k); n]
        } else {
            (0..n).map(|_| rng.below(k)).collect()
        };
        let mut cm = vec![vec![0.0f64; k]; k];
        for (&p, &l) in preds.iter().zip(&labels) {
            cm[l][p] += 1.0;
        }
        let acc = (0..k).map(|c| cm[c][c]).sum::<f64>() / n as f64;
        let f1 = (0..k)
            .map(|c| {
                let tp = cm[c][c];
                let col: f64 = (0..k).map(|r| cm[r][c]).sum();
                let row: f64 = cm[c].iter().sum();
                if col + row == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (col + row)
                }
            })
            .sum::<f64>()
            / k as f64;
        let (a, f) = accuracy_macro_f1(&preds, &labels, k).unwrap();
        worst = worst.max((a - acc).abs()).max((f - f1).abs());
    }
    let (acc, f1) = accuracy_macro_f1(&[1, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap();
    let degenerate = acc == 0.5 && (f1 - 1.0 / 3.0).abs() < METRIC_TOL;
    rep.record(
        9,
        worst < METRIC_TOL && degenerate,
        format!("50 random cases max |diff| {worst:.2e} (tol {METRIC_TOL:e}); all-one-class balanced binary -> acc {acc}, macro-F1 {f1:.12}"),
    );
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut rep = Report { lines: Vec::new() };
    let base = RunConfig::default();

    criterion_1(&mut rep);
    criterion_2(&mut rep);
    criterion_4(&mut rep);
    criterion_9(&mut rep);

    let mut recompose: Vec<(String, f64)> = Vec::new();

    // Default run on correlated data: criteria 5, 6 (seed 42 early), 7 (L_t = 1).
    let start = Instant::now();
    let data42 = load(&correlated(2000, 42), &root.join("corr42"), &base);
    let mut refine_ok = true;
    let mut refine_steps = 0;
    let run_a = train_observed(&base, &data42, Some(&root.join("run_a")), &mut |s| {
        if s.step < REFINE_STEPS {
            refine_steps += 1;
            for id in s.model.text.refine_param_ids() {
                let nonzero = s.grads[id.index()].as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0));
                refine_ok &= nonzero;
            }
        }
    })
    .expect("default run");
    let secs = start.elapsed().as_secs_f64();
    recompose.push(("default".into(), recomposition_error(&run_a.batches, base.lambda)));
    let (acc, f1) = best_val(&run_a);
    rep.record(
        5,
        acc >= CONVERGE_MIN && f1 >= CONVERGE_MIN && secs < CONVERGE_BUDGET_S,
        format!(
            "best val (epoch {}) accuracy {acc:.4}, macro-F1 {f1:.4} (min {CONVERGE_MIN}); {secs:.1}s (budget {CONVERGE_BUDGET_S}s)",
            run_a.early_stop.best_epoch
        ),
    );

    // Criterion 6: XOR ablation, then early vs late on correlated data over 3 seeds.
    let xor_cfg = RunConfig {
        num_classes: 2,
        ..base.clone()
    };
    let xor_spec = SynthSpec {
        mode: SynthMode::Xor,
        classes: 2,
        ..correlated(2000, 42)
    };
    let xor_data = load(&xor_spec, &root.join("xor"), &xor_cfg);
    let xor = ablate_fusion(&xor_cfg, &xor_data, Some(&root.join("abl_xor"))).expect("xor ablation");
    let (xe, xl) = (xor[0].accuracy, xor[1].accuracy);
    let mut seed_rows = Vec::new();
    let mut seeds_ok = true;
    for seed in SEEDS {
        let cfg = RunConfig { seed, ..base.clone() };
        let data = if seed == 42 {
            data42.clone()
        } else {
            load(&correlated(2000, seed), &root.join(format!("corr{seed}")), &cfg)
        };
        let early_f1 = if seed == 42 {
            run_a.test().macro_f1
        } else {
            let out = train(&cfg, &data, None).expect("early run");
            recompose.push((format!("early seed {seed}"), recomposition_error(&out.batches, cfg.lambda)));
            out.test().macro_f1
        };
        let late_cfg = RunConfig {
            fusion: FusionMode::Late,
            lambda: 0.0,
            ..cfg
        };
        let late = train(&late_cfg, &data, None).expect("late run");
        recompose.push((format!("late seed {seed}"), recomposition_error(&late.batches, 0.0)));
        let late_f1 = late.test().macro_f1;
        seeds_ok &= early_f1 >= late_f1 - FUSION_SLACK;
        seed_rows.push(format!("seed {seed}: early {early_f1:.4} late {late_f1:.4}"));
    }
    rep.record(
        6,
        xe >= XOR_EARLY_MIN && xl <= XOR_LATE_MAX && seeds_ok,
        format!(
            "xor test accuracy early {xe:.4} (min {XOR_EARLY_MIN}), late {xl:.4} (max {XOR_LATE_MAX}); correlated test macro-F1 {} (slack {FUSION_SLACK})",
            seed_rows.join(", ")
        ),
    );

    // Criterion 7: L_t = 0 against the default L_t = 1 run.
    let no_refine = RunConfig {
        extra_text_layers: 0,
        ..base.clone()
    };
    let run_b = train(&no_refine, &data42, None).expect("L_t = 0 run");
    recompose.push(("L_t=0".into(), recomposition_error(&run_b.batches, base.lambda)));
    let (f1_one, f1_zero) = (run_a.early_stop.best_val_f1, run_b.early_stop.best_val_f1);
    rep.record(
        7,
        f1_one >= f1_zero - REFINE_SLACK && refine_ok && refine_steps == REFINE_STEPS,
        format!(
            "best val macro-F1 L_t=1 {f1_one:.4} vs L_t=0 {f1_zero:.4} (slack {REFINE_SLACK}); refinement grads nonzero on first {refine_steps} steps: {refine_ok}"
        ),
    );

    // Criterion 8: two dropout-free runs.
    let det_cfg = RunConfig {
        dropout: 0.0,
        ..base.clone()
    };
    let det_data = load(&correlated(500, 42), &root.join("corr500"), &det_cfg);
    let mut runs = Vec::new();
    for name in ["det_a", "det_b"] {
        let dir = root.join(name);
        let out = train(&det_cfg, &det_data, Some(&dir)).expect("determinism run");
        recompose.push((name.into(), recomposition_error(&out.batches, det_cfg.lambda)));
        runs.push(dir);
    }
    let same: Vec<(&str, bool)> = [METRICS_FILE, BEST_CHECKPOINT, FINAL_CHECKPOINT]
        .iter()
        .map(|f| (*f, std::fs::read(runs[0].join(f)).unwrap() == std::fs::read(runs[1].join(f)).unwrap()))
        .collect();
    rep.record(
        8,
        same.iter().all(|(_, s)| *s),
        format!(
            "dropout 0, 500 samples, {} epochs: {}",
            det_cfg.epochs,
            same.iter().map(|(f, s)| format!("{f} {}", if *s { "identical" } else { "DIFFERS" })).collect::<Vec<_>>().join(", ")
        ),
    );

    // Criterion 3: every batch of every run above, plus a lambda = 0 early-fusion run.
    let off_cfg = RunConfig {
        lambda: 0.0,
        ..det_cfg.clone()
    };
    let off = train(&off_cfg, &det_data, None).expect("lambda = 0 run");
    let bitwise = off.batches.iter().all(|b| b.loss_total.to_bits() == b.loss_cls.to_bits());
    let batches: usize = run_a.batches.len() + run_b.batches.len();
    let worst = recompose.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    rep.record(
        3,
        worst.1 < RECOMPOSE_TOL && bitwise,
        format!(
            "{} runs ({batches}+ batches) max |total - (cls + lambda*contrast)| {:.2e} in `{}` (tol {RECOMPOSE_TOL:e}); lambda=0: total == cls bitwise on {} batches: {bitwise}",
            recompose.len(),
            worst.1,
            worst.0,
            off.batches.len()
        ),
    );

    rep.lines.sort_by_key(|l| l.0);
    let failed: Vec<usize> = rep.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    println!("summary:");
    for (id, ok, _) in &rep.lines {
        println!("  {id}: {}", if *ok { "PASS" } else { "FAIL" });
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", rep.lines.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
