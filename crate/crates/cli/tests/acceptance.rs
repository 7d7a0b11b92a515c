//! Acceptance suite: one PASS/FAIL line per criterion; exits nonzero if any
//! criterion fails.

use std::time::Instant;

use bood_cli::commands::{self, Context};
use bood_cli::config::RunConfig;
use bood_cli::pipeline::run_pipeline;
use bood_cli::sweep::{run_sweep, SweepParam, SweepSpec};
use bood_core::boundary::{estimate_distance, BoundaryConfig, DistanceTable};
use bood_core::detector::{DetectorMode, DetectorModel};
use bood_core::eval::{auroc, fpr_at_tpr, ScoreSet};
use bood_core::latent::{default_class_names, AnchorSet, CosineClassifier, FeatureClassifier, LatentFeature};
use bood_core::nn::{finite_diff_check, Activation, LossHead, Matrix, Mlp, MlpParams, MlpSpec};
use bood_core::par::Exec;
use bood_core::rng::seeded;
use bood_core::synthesis::{synthesize_batch, synthesize_ood, SynthesisConfig};
use rand::Rng;

/// Reference values from the first fixed-seed desk run (seed 7, defaults).
mod golden {
    pub const BOOD_FPR95: f64 = 0.10020833333333334;
    pub const BOOD_AUROC: f64 = 0.9508248697916667;
    pub const BOOD_ID_ACC: f64 = 1.0;
    pub const BASE_FPR95: f64 = 0.5154166666666667;
    pub const BASE_AUROC: f64 = 0.604058203125;
    pub const BASE_ID_ACC: f64 = 1.0;
}
const GOLDEN_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut passed = [0usize; 3];
    const TRIALS: u64 = 20;
    for trial in 0..TRIALS {
        let mut rng = seeded(10_000 + trial);
        let anchors = AnchorSet::random_orthonormal(default_class_names(4), 5, &mut rng).unwrap();
        let clf = CosineClassifier::new(anchors, 0.5 + 0.05 * trial as f64).unwrap();

        // encoder parameters and input through the anchor loss
        let act = if trial % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let mut mlp = Mlp::init(MlpSpec::new(vec![3, 7, 6, 5], act).unwrap(), &mut rng).unwrap();
        mlp.params.values_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..4)).collect();
        let (_, g) = mlp.loss_and_grads(&x, &y, &clf).unwrap();
        let spec = mlp.spec.clone();
        let r = finite_diff_check(
            &mlp.params,
            &x,
            |p, xx| {
                let z = Mlp::new(spec.clone(), p.clone()).unwrap().forward(xx).unwrap();
                LossHead::loss_and_grad(&clf, &z, &y).unwrap().0
            },
            &g.params,
            Some(&g.input),
            1e-6,
            1e-4,
        );
        worst = worst.max(r.max_rel_error);
        passed[0] += usize::from(r.passed());

        // feature gradient driving the boundary ascent
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let label = rng.random_range(0..4);
        let (_, gz) = FeatureClassifier::loss_and_grad(&clf, &z, label).unwrap();
        let zin = Matrix::row_vector(&z);
        let empty = MlpParams { layers: vec![] };
        let r = finite_diff_check(
            &empty,
            &zin,
            |_, zz| FeatureClassifier::loss_and_grad(&clf, zz.row(0), label).unwrap().0,
            &empty,
            Some(&Matrix::row_vector(&gz)),
            1e-6,
            1e-4,
        );
        worst = worst.max(r.max_rel_error);
        passed[1] += usize::from(r.passed());

        // detector objective: backbone and energy head together
        let spec = MlpSpec::new(vec![3, 8, 4], act).unwrap();
        let mut m = DetectorModel::init(spec, 6, DetectorMode::Decoded, &mut rng).unwrap();
        m.backbone.params.values_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        let id = Matrix::from_vec(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ood = Matrix::from_vec(3, 3, (0..9).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let iy: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
        let og = m.objective_and_grads(&id, &iy, &ood, 2.5).unwrap();
        let objective = |b: &MlpParams, h: &MlpParams| {
            let mut mm = m.clone();
            mm.backbone.params = b.clone();
            mm.head.0.params = h.clone();
            mm.objective_and_grads(&id, &iy, &ood, 2.5).unwrap().total
        };
        let rb = finite_diff_check(&m.backbone.params, &id, |p, _| objective(p, &m.head.0.params), &og.backbone, None, 1e-6, 1e-4);
        let rh = finite_diff_check(&m.head.0.params, &id, |p, _| objective(&m.backbone.params, p), &og.head, None, 1e-6, 1e-4);
        worst = worst.max(rb.max_rel_error).max(rh.max_rel_error);
        passed[2] += usize::from(rb.passed() && rh.passed());
    }
    let secs = t.elapsed().as_secs_f64();
    let all = passed.iter().all(|&p| p == TRIALS as usize);
    check(
        all && secs < 10.0,
        format!(
            "encoder {}/{TRIALS}, feature gradient {}/{TRIALS}, detector {}/{TRIALS}; max rel err {worst:.2e}; {secs:.2}s",
            passed[0], passed[1], passed[2]
        ),
    )
}

fn brute_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let mut cands: Vec<f64> = id.iter().chain(ood).copied().collect();
    cands.sort_by(|a, b| b.total_cmp(a));
    let frac = |s: &[f64], t: f64| s.iter().filter(|&&v| v >= t).count() as f64 / s.len() as f64;
    let tau = cands.into_iter().find(|&t| frac(id, t) >= target).unwrap();
    frac(ood, tau)
}

fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in id {
        for &b in ood {
            twice += if a > b { 2 } else { u64::from(a == b) };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = seeded(77);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(1..=200);
        let levels = rng.random_range(1..10);
        let mut draw = |k: usize| -> Vec<f64> {
            (0..k)
                .map(|_| {
                    if rng.random_bool(0.4) {
                        rng.random_range(0..levels) as f64
                    } else {
                        rng.random_range(-1.0..f64::from(levels))
                    }
                })
                .collect()
        };
        let id = draw(n);
        let ood = draw(m);
        let s = ScoreSet::new(id.clone(), ood.clone()).unwrap();
        if fpr_at_tpr(&s, 0.95).unwrap() != brute_fpr(&id, &ood, 0.95) || auroc(&s).unwrap() != brute_auroc(&id, &ood)
        {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(mismatches == 0 && secs < 30.0, format!("{mismatches} mismatches over 1000 tied score sets; {secs:.2}s"))
}

fn toy() -> CosineClassifier {
    CosineClassifier::new(AnchorSet::from_rows(default_class_names(2), &Matrix::identity(2)).unwrap(), 1.0).unwrap()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criterion_3() -> Outcome {
    let clf = toy();
    let mut rng = seeded(3);
    let feats: Vec<LatentFeature> = (0..50)
        .map(|i| {
            let th: f64 = rng.random_range(0.0..std::f64::consts::FRAC_PI_4);
            LatentFeature::new(vec![th.cos(), th.sin()], 0, i).unwrap()
        })
        .collect();
    let cfg = BoundaryConfig { alpha: 0.015, max_steps: 100, select_percent: 5.0 };
    let table = DistanceTable::build(&clf, &feats, &cfg, Exec::default()).unwrap();
    let margin: Vec<f64> = feats.iter().map(|f| std::f64::consts::FRAC_PI_4 - f.z[1].atan2(f.z[0])).collect();
    let ks: Vec<f64> = table.records.iter().map(|r| r.steps.map_or(f64::INFINITY, |k| k as f64)).collect();
    let rho = pearson(&ranks(&margin), &ranks(&ks));
    let mut zero_ok = true;
    for _ in 0..50 {
        let th: f64 = rng.random_range(0.8..3.0);
        let (k, _) = estimate_distance(&clf, &[th.cos(), th.sin()], 0, 0.015, 100).unwrap();
        zero_ok &= k == Some(0);
    }
    check(rho >= 0.9 && zero_ok, format!("spearman {rho:.4} over 50 features; misclassified features give k=0: {zero_ok}"))
}

fn criterion_4() -> Outcome {
    let mut rng = seeded(4);
    let anchors = AnchorSet::random_orthonormal(default_class_names(8), 8, &mut rng).unwrap();
    let clf = CosineClassifier::new(anchors, 1.0).unwrap();
    let (mut total, mut misclassified, mut equal_k, mut compared) = (0, 0, 0, 0);
    for i in 0..500 {
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = clf.predict(&z).unwrap();
        let f = LatentFeature::new(z.clone(), y, i).unwrap();
        let at_flip = SynthesisConfig { extra_steps: 0, max_steps: 300, ..Default::default() };
        if let Ok(o) = synthesize_ood(&clf, &f, &at_flip) {
            total += 1;
            misclassified += usize::from(clf.predict(&o.z_ood).unwrap() != y);
            let (k, _) = estimate_distance(&clf, &z, y, 0.015, 300).unwrap();
            compared += 1;
            equal_k += usize::from(k == Some(o.flip_step));
        }
    }
    // the 3-class mixture through the real pipeline
    let cfg = RunConfig::load(
        None,
        &["data.classes=3".into(), "data.train_per_class=200".into(), "encoder.epochs=10".into(), "detector.epochs=1".into()],
    )
    .unwrap();
    let run = run_pipeline(&cfg, Exec::default(), None).unwrap();
    let flip_cfg = SynthesisConfig { extra_steps: 0, ..cfg.synthesis() };
    let flips = synthesize_batch(&run.encoder.classifier, &run.selected, &flip_cfg, Exec::default()).unwrap();
    let pipeline_ok = !flips.outliers.is_empty()
        && flips.outliers.iter().all(|o| run.encoder.classifier.predict(&o.z_ood).unwrap() != o.origin_label);
    check(
        total > 0 && misclassified == total && equal_k == compared && pipeline_ok,
        format!(
            "{misclassified}/{total} misclassified at flip; flip_step == k for {equal_k}/{compared}; \
             3-class pipeline {} outliers all misclassified at flip: {pipeline_ok}",
            flips.outliers.len()
        ),
    )
}

struct Desk {
    bood_fpr: f64,
    bood_auroc: f64,
    bood_acc: f64,
    base_fpr: f64,
    base_auroc: f64,
    base_acc: f64,
    secs: f64,
}

fn desk(beta_override: Option<f64>) -> (bood_cli::pipeline::RunArtifacts, f64) {
    let mut cfg = RunConfig::default();
    if let Some(b) = beta_override {
        cfg.detector.beta = b;
    }
    let t = Instant::now();
    let run = run_pipeline(&cfg, Exec::Sequential, None).unwrap();
    (run, t.elapsed().as_secs_f64())
}

fn criterion_5() -> (Outcome, Desk) {
    let (bood, secs) = desk(None);
    let (base, _) = desk(Some(0.0));
    let b = bood.eval.detector.average.clone().unwrap();
    // the unregularized detector is scored by its negative energy
    let e = base.eval.energy.average.clone().unwrap();
    let d = Desk {
        bood_fpr: b.fpr95,
        bood_auroc: b.auroc,
        bood_acc: bood.eval.detector.id_acc,
        base_fpr: e.fpr95,
        base_auroc: e.auroc,
        base_acc: base.eval.energy.id_acc,
        secs,
    };
    let reduction = (d.base_fpr - d.bood_fpr) / d.base_fpr;
    let gain = 100.0 * (d.bood_auroc - d.base_auroc);
    let acc_gap = 100.0 * (d.bood_acc - d.base_acc).abs();
    let pinned = [
        (d.bood_fpr, golden::BOOD_FPR95),
        (d.bood_auroc, golden::BOOD_AUROC),
        (d.bood_acc, golden::BOOD_ID_ACC),
        (d.base_fpr, golden::BASE_FPR95),
        (d.base_auroc, golden::BASE_AUROC),
        (d.base_acc, golden::BASE_ID_ACC),
    ]
    .iter()
    .all(|(got, want)| (got - want).abs() <= GOLDEN_TOL);
    let per_set: Vec<String> = bood
        .eval
        .detector
        .sets
        .iter()
        .zip(&base.eval.energy.sets)
        .map(|(x, y)| format!("{} {:.3}->{:.3}", x.name, y.fpr95, x.fpr95))
        .collect();
    let out = check(
        reduction >= 0.30 && gain >= 2.0 && acc_gap <= 1.0 && pinned && secs < 120.0,
        format!(
            "FPR95 {:.4} -> {:.4} ({:.1}% reduction), AUROC {:.4} -> {:.4} ({gain:+.2} pts), ID ACC {:.4} vs {:.4}; \
             per-set FPR95 [{}]; golden match: {pinned}; {secs:.1}s single-threaded",
            d.base_fpr,
            d.bood_fpr,
            100.0 * reduction,
            d.base_auroc,
            d.bood_auroc,
            d.bood_acc,
            d.base_acc,
            per_set.join(", ")
        ),
    );
    (out, d)
}

fn criterion_6() -> Outcome {
    let base = RunConfig::default();
    let betas = vec![0.0, 1.0, 2.5, 5.0, 10.0];
    let rows = run_sweep(&SweepSpec { param: SweepParam::Beta, values: betas, base: base.clone() }, Exec::default()).unwrap();
    let fprs: Vec<f64> = rows.iter().map(|r| r.fpr95_avg.unwrap_or(1.0)).collect();
    let best = fprs.iter().copied().fold(f64::INFINITY, f64::min);
    let last = *fprs.last().unwrap();
    let beta_ok = last > best;
    let alphas = vec![0.005, 0.015, 0.05];
    let rows = run_sweep(&SweepSpec { param: SweepParam::Alpha, values: alphas, base }, Exec::default()).unwrap();
    let ks: Vec<f64> = rows.iter().map(|r| r.mean_k.unwrap_or(f64::NAN)).collect();
    let alpha_ok = ks.windows(2).all(|w| w[1] < w[0]);
    check(
        beta_ok && alpha_ok,
        format!(
            "beta sweep FPR95 {:?} (largest beta {last:.4} vs best {best:.4}); alpha sweep mean k {:?}",
            fprs.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            ks.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
        ),
    )
}

fn criterion_7() -> Outcome {
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let metrics: Vec<String> = dirs
        .iter()
        .zip([Exec::Sequential, Exec::Sequential, Exec::Parallel])
        .map(|(dir, exec)| {
            let cfg = RunConfig { output_dir: dir.path().to_path_buf(), ..RunConfig::default() };
            let (m, _) = commands::cmd_run_all(&Context::new(cfg, exec)).unwrap();
            serde_json::to_string(&m.metrics).unwrap()
        })
        .collect();
    let same = metrics[0] == metrics[1];
    let sched = metrics[0] == metrics[2];
    check(same && sched, format!("repeat run identical: {same}; sequential vs parallel identical: {sched}"))
}

fn main() {
    let mut all = true;
    let mut report = |id: u32, name: &str, o: Outcome| {
        all &= o.pass;
        println!("ACCEPTANCE {} {id}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "gradient correctness", criterion_1());
    report(2, "metric oracle equivalence", criterion_2());
    report(3, "boundary-distance sanity", criterion_3());
    report(4, "synthesis contract", criterion_4());
    let (o5, d) = criterion_5();
    report(5, "end-to-end desk benchmark", o5);
    println!(
        "  measured: bood fpr95={:?} auroc={:?} acc={:?}; baseline fpr95={:?} auroc={:?} acc={:?}; {:.1}s",
        d.bood_fpr, d.bood_auroc, d.bood_acc, d.base_fpr, d.base_auroc, d.base_acc, d.secs
    );
    report(6, "ablation shape checks", criterion_6());
    report(7, "determinism", criterion_7());
    if !all {
        std::process::exit(1);
    }
}
