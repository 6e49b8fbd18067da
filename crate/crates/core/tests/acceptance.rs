//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if a criterion fails that is not listed in `KNOWN_RED`.

use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

use vilu_core::baselines::Baseline;
use vilu_core::metrics::{
    auroc, auroc_pairwise_oracle, evaluate, fpr_at_tpr, fpr_at_tpr_sweep_oracle, DEFAULT_TARGET_TPR,
};
use vilu_core::rng;
use vilu_core::store::synth_generate;
use vilu_core::training::{batch_weight, train};
use vilu_core::vilu::{bilinear_head_eval, check_gradients, GradCheckOptions, ModelScorer};
use vilu_core::zeroshot::{argmax_lowest, similarities};
use vilu_core::*;

/// Criteria that do not currently hold; they still print FAIL.
const KNOWN_RED: &[&str] = &["caption-batch-trend"];

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn gradient_exactness() -> Outcome {
    let mut worst64: f64 = 0.0;
    let mut worst32: f64 = 0.0;
    let mut pass = true;
    let mut configs = 0;
    for ablation in Ablation::ALL {
        for mcm in [false, true] {
            let cfg = ViluConfig::ablation(8, ablation)
                .with_mcm_score(mcm)
                .with_seed(3);
            let opts = GradCheckOptions {
                seed: 17,
                ..GradCheckOptions::default()
            };
            let r = check_gradients(&cfg, &opts).expect("gradient check runs");
            worst64 = worst64.max(r.f64_report.max_rel_error);
            worst32 = worst32.max(r.f32_report.max_rel_error);
            pass &= r.f64_report.passes(1e-5)
                && r.f32_report.passes(1e-3)
                && r.f64_report.checked >= 250;
            configs += 1;
        }
    }
    Outcome {
        pass,
        detail: format!(
            "{configs} configurations, max rel err f64 {worst64:.2e}, f32 {worst32:.2e}"
        ),
    }
}

fn random_case(rng: &mut rng::Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..200);
    // Few distinct levels force ties.
    let levels = rng.random_range(1..=n);
    let mut errors: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    errors[0] = true;
    errors[1] = false;
    let scores = (0..n)
        .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
        .collect();
    (scores, errors)
}

fn metric_oracles() -> Outcome {
    let mut rng = rng::seeded(2024);
    let mut worst_auc: f64 = 0.0;
    let mut fpr_mismatch = 0;
    for _ in 0..500 {
        let (s, e) = random_case(&mut rng);
        worst_auc =
            worst_auc.max((auroc(&s, &e).unwrap() - auroc_pairwise_oracle(&s, &e).unwrap()).abs());
        for target in [DEFAULT_TARGET_TPR, 0.5, 0.8, 1.0] {
            if fpr_at_tpr(&s, &e, target).unwrap()
                != fpr_at_tpr_sweep_oracle(&s, &e, target).unwrap()
            {
                fpr_mismatch += 1;
            }
        }
    }
    Outcome {
        pass: worst_auc <= 1e-12 && fpr_mismatch == 0,
        detail: format!(
            "500 instances, max |auroc - oracle| {worst_auc:.1e}, fpr mismatches {fpr_mismatch}"
        ),
    }
}

fn unit_rows(rng: &mut rng::Rng, n: usize, d: usize) -> Array2<f32> {
    let mut m =
        Array2::<f32>::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal) as f32);
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

fn mcm_consistency() -> Outcome {
    let (d, k, n) = (16, 6, 1000);
    let mut rng = rng::seeded(77);
    let mut bilinear = Vec::with_capacity(n);
    let mut mcm = Vec::with_capacity(n);
    let mut errors = Vec::with_capacity(n);
    for _ in 0..n {
        let image = unit_rows(&mut rng, 1, d);
        let texts = unit_rows(&mut rng, k, d);
        let sims = similarities(image.row(0), texts.view()).unwrap();
        let predicted = argmax_lowest(&sims);
        let mut z: Vec<f64> = image.row(0).iter().map(|&x| x as f64).collect();
        z.extend(texts.row(predicted).iter().map(|&x| x as f64));
        z.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        bilinear.push(-bilinear_head_eval(&z, d).unwrap());
        mcm.push(1.0 - sims[predicted]);
        errors.push(predicted != rng.random_range(0..k));
    }
    let order = |s: &[f64]| {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
        idx
    };
    let same_order = order(&bilinear) == order(&mcm);
    let gap = (auroc(&bilinear, &errors).unwrap() - auroc(&mcm, &errors).unwrap()).abs();
    Outcome {
        pass: same_order && gap <= 1e-9,
        detail: format!("{n} samples, identical ranking {same_order}, auroc gap {gap:.1e}"),
    }
}

fn weight_arithmetic() -> Outcome {
    let mut batch = vec![false; 6];
    batch.extend([true; 2]);
    let w = batch_weight(&batch);
    let exact = w == 4f64.ln();
    let clamps =
        batch_weight(&[false; 5]) == 1.0 && batch_weight(&[true; 5]) == std::f64::consts::LN_2;
    Outcome {
        pass: exact && clamps,
        detail: format!("w(6 ok, 2 err) = {w:.17}, clamps hold {clamps}"),
    }
}

/// Label-mode benchmark: some classes are much noisier than others and half
/// of the images are degraded, which leaves a linear trace in the embedding.
fn label_benchmark(seed: u64) -> (EmbeddingDataset, EmbeddingDataset, EmbeddingDataset) {
    let spec = SynthSpec {
        n_classes: 10,
        d: 64,
        samples_per_class: 2500,
        intra_class_noise: 0.2,
        class_noise_spread: 3.0,
        degraded_fraction: 0.5,
        degraded_noise: 2.5,
        degraded_marker: 1.0,
        seed,
        ..SynthSpec::default()
    };
    let ds = synth_generate(&spec).unwrap();
    let (train_all, test) = ds.split(0.8, seed).unwrap();
    let (fit, val) = train_all.split(0.9, seed + 100).unwrap();
    (fit, val, test)
}

fn label_config(loss: LossKind, seed: u64) -> TrainConfig {
    TrainConfig {
        loss,
        lr: 0.1,
        batch_size: 128,
        epochs: 10,
        seed,
        patience: 0,
        ..TrainConfig::default()
    }
}

struct LabelRun {
    accuracy: f64,
    mcm: (f64, f64),
    /// (AUROC, FPR95) per loss, in `LOSSES` order.
    vilu: Vec<(f64, f64)>,
}

const LOSSES: [LossKind; 4] = [LossKind::Wbce, LossKind::Bce, LossKind::Wmse, LossKind::Mse];

fn label_runs() -> Vec<LabelRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let (fit, val, test) = label_benchmark(seed);
            let mcm = evaluate(&test, &Baseline::Mcm, "test", 1024, seed, false).unwrap();
            let vilu = LOSSES
                .iter()
                .map(|&loss| {
                    let out = train(
                        &fit,
                        Some(&val),
                        &ViluConfig::full(64).with_seed(seed),
                        &label_config(loss, seed),
                    )
                    .unwrap();
                    let r = evaluate(
                        &test,
                        &ModelScorer {
                            model: &out.model,
                            name: "vilu",
                        },
                        "test",
                        1024,
                        seed,
                        false,
                    )
                    .unwrap();
                    (r.auroc, r.fpr95)
                })
                .collect();
            LabelRun {
                accuracy: mcm.accuracy,
                mcm: (mcm.auroc, mcm.fpr95),
                vilu,
            }
        })
        .collect()
}

fn end_to_end(runs: &[LabelRun]) -> Outcome {
    let auc_gain = median(
        runs.iter()
            .map(|r| 100.0 * (r.vilu[0].0 - r.mcm.0))
            .collect(),
    );
    let fpr_drop = median(
        runs.iter()
            .map(|r| 100.0 * (r.mcm.1 - r.vilu[0].1))
            .collect(),
    );
    let acc = median(runs.iter().map(|r| r.accuracy).collect());
    Outcome {
        pass: auc_gain >= 2.0 && fpr_drop >= 5.0,
        detail: format!("accuracy {acc:.3}, median AUROC gain {auc_gain:+.2} pts, median FPR95 drop {fpr_drop:+.2} pts"),
    }
}

fn weighting(runs: &[LabelRun]) -> Outcome {
    let wbce_vs_bce = median(
        runs.iter()
            .map(|r| 100.0 * (r.vilu[0].0 - r.vilu[1].0))
            .collect(),
    );
    // Worst BCE-family run against best MSE-family run, per seed.
    let family_gap = median(
        runs.iter()
            .map(|r| 100.0 * (r.vilu[0].0.min(r.vilu[1].0) - r.vilu[2].0.max(r.vilu[3].0)))
            .collect(),
    );
    Outcome {
        pass: wbce_vs_bce >= -0.5 && family_gap >= 1.0,
        detail: format!("median wBCE - BCE {wbce_vs_bce:+.2} pts, median BCE family - MSE family {family_gap:+.2} pts"),
    }
}

/// Caption benchmark: 20 concepts shared by many captions, so whether an
/// image is matched to its own caption depends on which other captions
/// share its batch.
fn caption_benchmark(seed: u64) -> (EmbeddingDataset, EmbeddingDataset, EmbeddingDataset) {
    let spec = SynthSpec {
        mode: Mode::ImageCaption,
        n_classes: 20,
        d: 16,
        samples_per_class: 1000,
        intra_class_noise: 0.3,
        instance_scale: 0.2,
        seed,
        ..SynthSpec::default()
    };
    let ds = synth_generate(&spec).unwrap();
    let (train_all, test) = ds.split(0.7, seed).unwrap();
    let (fit, val) = train_all.split(0.9, seed + 100).unwrap();
    (fit, val, test)
}

const CAPTION_BATCHES: [usize; 4] = [128, 512, 1024, 2048];

struct CaptionRun {
    mcm: Vec<f64>,
    full: Vec<f64>,
    visual: Vec<f64>,
}

fn caption_runs() -> Vec<CaptionRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let (fit, val, test) = caption_benchmark(seed);
            let cfg = TrainConfig {
                lr: 1.0,
                batch_size: 128,
                epochs: 20,
                eval_batch_size: 128,
                seed,
                patience: 0,
                ..TrainConfig::default()
            };
            let full = train(
                &fit,
                Some(&val),
                &ViluConfig::full(16).with_seed(seed),
                &cfg,
            )
            .unwrap()
            .model;
            let visual = train(
                &fit,
                Some(&val),
                &ViluConfig::visual_only(16).with_seed(seed),
                &cfg,
            )
            .unwrap()
            .model;
            let auc = |scorer: &dyn UncertaintyScorer, bs: usize| {
                evaluate(&test, scorer, "test", bs, seed, false)
                    .unwrap()
                    .auroc
            };
            CaptionRun {
                mcm: CAPTION_BATCHES
                    .iter()
                    .map(|&bs| auc(&Baseline::Mcm, bs))
                    .collect(),
                full: CAPTION_BATCHES
                    .iter()
                    .map(|&bs| {
                        auc(
                            &ModelScorer {
                                model: &full,
                                name: "vilu",
                            },
                            bs,
                        )
                    })
                    .collect(),
                visual: CAPTION_BATCHES
                    .iter()
                    .map(|&bs| {
                        auc(
                            &ModelScorer {
                                model: &visual,
                                name: "visual",
                            },
                            bs,
                        )
                    })
                    .collect(),
            }
        })
        .collect()
}

fn batch_trend(runs: &[CaptionRun]) -> Outcome {
    let per_size = |f: &dyn Fn(&CaptionRun) -> &Vec<f64>| -> Vec<f64> {
        (0..CAPTION_BATCHES.len())
            .map(|i| median(runs.iter().map(|r| f(r)[i]).collect()))
            .collect()
    };
    let mcm = per_size(&|r| &r.mcm);
    let full = per_size(&|r| &r.full);
    let trend = mcm[0] > mcm[3];
    let dominates = full.iter().zip(&mcm).all(|(v, m)| v >= m);
    let cells: Vec<String> = CAPTION_BATCHES
        .iter()
        .zip(mcm.iter().zip(&full))
        .map(|(bs, (m, v))| format!("{bs}: mcm {m:.3} vilu {v:.3}"))
        .collect();
    Outcome {
        pass: trend && dominates,
        detail: format!("median AUROC {}", cells.join(", ")),
    }
}

fn cross_attention(runs: &[CaptionRun]) -> Outcome {
    let gap = median(
        runs.iter()
            .map(|r| 100.0 * (r.full[0] - r.visual[0]))
            .collect(),
    );
    Outcome {
        pass: gap >= 5.0,
        detail: format!("median full - visual {gap:+.2} AUROC pts at batch 128"),
    }
}

fn report(name: &str, start: Instant, outcome: Outcome, failures: &mut Vec<String>) {
    let status = if outcome.pass { "PASS" } else { "FAIL" };
    println!(
        "{status} {name} ({:.1}s): {}",
        start.elapsed().as_secs_f64(),
        outcome.detail
    );
    if !outcome.pass && !KNOWN_RED.contains(&name) {
        failures.push(name.to_string());
    }
}

fn main() -> ExitCode {
    let mut failures = Vec::new();
    let t = Instant::now();
    report("gradient-exactness", t, gradient_exactness(), &mut failures);
    let t = Instant::now();
    report("metric-oracles", t, metric_oracles(), &mut failures);
    let t = Instant::now();
    report("mcm-consistency", t, mcm_consistency(), &mut failures);
    let t = Instant::now();
    report("batch-weight", t, weight_arithmetic(), &mut failures);

    let t = Instant::now();
    let runs = label_runs();
    report("end-to-end-label", t, end_to_end(&runs), &mut failures);
    report("weighting-ablation", t, weighting(&runs), &mut failures);

    let t = Instant::now();
    let runs = caption_runs();
    report("caption-batch-trend", t, batch_trend(&runs), &mut failures);
    report(
        "cross-attention-ablation",
        t,
        cross_attention(&runs),
        &mut failures,
    );

    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("unexpected failures: {}", failures.join(", "));
        ExitCode::FAILURE
    }
}
