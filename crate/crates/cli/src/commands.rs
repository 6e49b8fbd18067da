use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use vilu_core::baselines::{calibration_set, fit_temperature, Baseline};
use vilu_core::checkpoint;
use vilu_core::metrics::{evaluate, EvalReport, UncertaintyScorer};
use vilu_core::store::{decode_unvalidated, read_dataset, synth_generate};
use vilu_core::training::{self, grid_search, TrainFailure, BATCH_GRID, LR_GRID};
use vilu_core::vilu::{check_gradients, GradCheckOptions, ModelScorer, DEFAULT_HIDDEN_DIMS};
use vilu_core::zeroshot::zero_shot_accuracy;
use vilu_core::{
    Ablation, EmbeddingDataset, Error, LossKind, Mode, SynthSpec, TrainConfig, ViluConfig,
    ViluModel,
};

use crate::manifest::Recorder;
use crate::{
    BaselineArgs, DataArgs, EvalArgs, GradcheckArgs, GridArgs, InspectArgs, LearnedMethod,
    MethodArg, ModeArg, ModelArgs, ReportArgs, SynthArgs, TableFormat, TrainArgs, EXIT_DATA,
    EXIT_NUMERICAL, EXIT_USAGE,
};

const ECE_BINS: usize = 15;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    CliError::Usage(msg.into()).into()
}

/// Maps an error to the documented exit status.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Numerical(_) => EXIT_NUMERICAL,
            };
        }
        let core = cause
            .downcast_ref::<Error>()
            .or_else(|| cause.downcast_ref::<TrainFailure>().map(|f| &f.source));
        if let Some(e) = core {
            return if e.is_numerical_failure() {
                EXIT_NUMERICAL
            } else if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_USAGE
            };
        }
    }
    EXIT_DATA
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub ablation: Ablation,
    pub hidden: Vec<usize>,
    pub append_mcm_score: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            ablation: Ablation::Full,
            hidden: DEFAULT_HIDDEN_DIMS.to_vec(),
            append_mcm_score: false,
        }
    }
}

pub fn config_schema() -> Result<String> {
    Ok(serde_json::to_string_pretty(&schemars::schema_for!(
        RunConfig
    ))?)
}

fn load_dataset(path: &Path, rec: &mut Recorder) -> Result<EmbeddingDataset> {
    let ds = read_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    rec.input(path)?;
    Ok(ds)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// `path` with `infix` inserted before the extension: `r.json` -> `r.bs128.json`.
fn with_infix(path: &Path, infix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{infix}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{infix}"),
    };
    path.with_file_name(name)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => serde_json::from_slice(
            &std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { spec.$field = v; })*
        };
    }
    set!(classes => n_classes, dim => d, per_class => samples_per_class,
        noise => intra_class_noise, class_spread => class_noise_spread,
        degraded_fraction => degraded_fraction, degraded_noise => degraded_noise,
        degraded_marker => degraded_marker, instance_scale => instance_scale,
        caption_noise => caption_noise, min_angle => inter_class_min_angle, tau => tau,
        seed => seed);
    if let Some(m) = a.mode {
        spec.mode = match m {
            ModeArg::Label => Mode::ImageLabel,
            ModeArg::Caption => Mode::ImageCaption,
        };
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;

    let mut rec = Recorder::new(&spec, spec.seed)?;
    if let Some(p) = &a.spec {
        rec.input(p)?;
    }
    let ds = synth_generate(&spec)?;
    rec.write(&a.out, &vilu_core::store::encode(&ds)?)?;
    let bs = 1024.min(ds.len()).max(2);
    let acc = zero_shot_accuracy(&ds, bs, spec.seed)?;
    match spec.mode {
        Mode::ImageLabel => println!("zero-shot accuracy: {acc:.4} ({} samples)", ds.len()),
        Mode::ImageCaption => {
            println!(
                "zero-shot accuracy: {acc:.4} ({} samples, caption batches of {bs})",
                ds.len()
            )
        }
    }
    Ok(())
}

fn resolve_config(m: &ModelArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &m.config {
        Some(p) => serde_json::from_slice(
            &std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = m.$flag { t.$field = v; })*
        };
    }
    set!(lr => lr, batch_size => batch_size, epochs => epochs,
        freeze_xa_epochs => freeze_xa_epochs, patience => patience,
        train_fraction => train_fraction, seed => seed);
    if let Some(loss) = m.loss {
        t.loss = loss;
    } else if m.method == LearnedMethod::Lvu {
        t.loss = LossKind::Wmse;
    }
    if m.no_weighting {
        t.loss = t.loss.unweighted();
    }
    if let Some(a) = m.ablate {
        cfg.model.ablation = a;
    }
    if m.method == LearnedMethod::Lvu {
        if cfg.model.ablation != Ablation::Full && cfg.model.ablation != Ablation::Visual {
            return Err(usage("lvu uses the visual embedding only; drop --ablate"));
        }
        cfg.model.ablation = Ablation::Visual;
    }
    if let Some(h) = &m.hidden {
        cfg.model.hidden = h.clone();
    }
    cfg.model.append_mcm_score |= m.append_mcm;
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn model_config(cfg: &RunConfig, d: usize) -> Result<ViluConfig> {
    let v = ViluConfig::ablation(d, cfg.model.ablation)
        .with_hidden(&cfg.model.hidden)
        .with_mcm_score(cfg.model.append_mcm_score)
        .with_seed(cfg.train.seed);
    v.validate().map_err(|e| usage(e.to_string()))?;
    Ok(v)
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    method: &'static str,
    run: &'a RunConfig,
    val: Option<String>,
    val_frac: f64,
}

fn method_name(m: LearnedMethod) -> &'static str {
    match m {
        LearnedMethod::Vilu => "vilu",
        LearnedMethod::Lvu => "lvu",
    }
}

fn load_train_val(
    d: &DataArgs,
    seed: u64,
    rec: &mut Recorder,
) -> Result<(EmbeddingDataset, Option<EmbeddingDataset>)> {
    let ds = load_dataset(&d.data, rec)?;
    if let Some(p) = &d.val {
        return Ok((ds, Some(load_dataset(p, rec)?)));
    }
    if !(0.0..1.0).contains(&d.val_frac) {
        return Err(usage(format!(
            "--val-frac must lie in [0, 1), got {}",
            d.val_frac
        )));
    }
    if d.val_frac == 0.0 {
        return Ok((ds, None));
    }
    let (train, val) = ds.split(1.0 - d.val_frac, seed)?;
    Ok((train, Some(val)))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.model)?;
    let record = TrainRecord {
        method: method_name(a.model.method),
        run: &cfg,
        val: a.data.val.as_ref().map(|p| p.display().to_string()),
        val_frac: a.data.val_frac,
    };
    let mut rec = Recorder::new(&record, cfg.train.seed)?;
    if let Some(p) = &a.model.config {
        rec.input(p)?;
    }
    let (train_ds, val_ds) = load_train_val(&a.data, cfg.train.seed, &mut rec)?;
    let vilu = model_config(&cfg, train_ds.dim())?;

    let history_path = a.out.with_extension("history.csv");
    let outcome = match training::train(&train_ds, val_ds.as_ref(), &vilu, &cfg.train) {
        Ok(o) => o,
        Err(failure) => {
            rec.write(&history_path, failure.history.to_csv().as_bytes())?;
            return Err(failure.into());
        }
    };
    rec.write(&a.out, &checkpoint::encode(&outcome.model)?)?;
    rec.write(&history_path, outcome.history.to_csv().as_bytes())?;
    let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "trained {} ({}, {}) for {} epochs; best epoch {}, val AUROC {}, val FPR95 {}",
        record.method,
        cfg.model.ablation,
        cfg.train.loss,
        outcome.history.len(),
        outcome
            .best_epoch
            .map_or("n/a".to_string(), |e| e.to_string()),
        fmt_opt(outcome.best_val_auc),
        fmt_opt(outcome.best_val_fpr95),
    );
    Ok(())
}

pub fn gridsearch(a: GridArgs) -> Result<()> {
    let cfg = resolve_config(&a.model)?;
    let lrs = a.lrs.clone().unwrap_or_else(|| LR_GRID.to_vec());
    let batch_sizes = a.batch_sizes.clone().unwrap_or_else(|| BATCH_GRID.to_vec());
    #[derive(Serialize)]
    struct GridRecord<'a> {
        method: &'static str,
        run: &'a RunConfig,
        lrs: &'a [f64],
        batch_sizes: &'a [usize],
    }
    let record = GridRecord {
        method: method_name(a.model.method),
        run: &cfg,
        lrs: &lrs,
        batch_sizes: &batch_sizes,
    };
    let mut rec = Recorder::new(&record, cfg.train.seed)?;
    if let Some(p) = &a.model.config {
        rec.input(p)?;
    }
    let (train_ds, val_ds) = load_train_val(&a.data, cfg.train.seed, &mut rec)?;
    let Some(val_ds) = val_ds else {
        return Err(usage(
            "grid search needs validation data (--val or --val-frac > 0)",
        ));
    };
    let vilu = model_config(&cfg, train_ds.dim())?;
    let grid = grid_search(&train_ds, &val_ds, &vilu, &cfg.train, &lrs, &batch_sizes)?;

    let results = a
        .results
        .clone()
        .unwrap_or_else(|| a.out.with_extension("grid.csv"));
    rec.write(&a.out, &checkpoint::encode(&grid.best_model)?)?;
    rec.write(&results, grid.to_csv().as_bytes())?;
    let best = grid
        .results
        .iter()
        .find(|r| r.lr == grid.best.lr && r.batch_size == grid.best.batch_size)
        .and_then(|r| r.val_auc);
    println!(
        "best lr {} batch size {} (val AUROC {}) over {} runs",
        grid.best.lr,
        grid.best.batch_size,
        best.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        grid.results.len()
    );
    Ok(())
}

fn fit_ts(calib: &Path, batch_size: usize, seed: u64, rec: &mut Recorder) -> Result<Baseline> {
    let ds = load_dataset(calib, rec)?;
    let (logits, correct) = calibration_set(&ds, batch_size, seed)?;
    let fit = fit_temperature(&logits, &correct, ECE_BINS)?;
    eprintln!(
        "ts-mcm temperature {:.4} (ECE {:.4} -> {:.4})",
        fit.t, fit.ece_before, fit.ece_after
    );
    Ok(Baseline::TsMcm { temperature: fit.t })
}

fn method_label(m: MethodArg) -> &'static str {
    match m {
        MethodArg::Mcm => "mcm",
        MethodArg::Entropy => "entropy",
        MethodArg::Doctor => "doctor",
        MethodArg::TsMcm => "ts-mcm",
        MethodArg::Lvu => "lvu",
        MethodArg::Vilu => "vilu",
    }
}

fn summary_line(r: &EvalReport) -> String {
    format!(
        "{} on {} (batch {}): accuracy {:.4}, AUROC {:.4}, FPR95 {:.4}",
        r.method, r.dataset, r.eval_batch_size, r.accuracy, r.auroc, r.fpr95
    )
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let method = match (a.method, &a.model) {
        (Some(m), _) => m,
        (None, Some(_)) => MethodArg::Vilu,
        (None, None) => return Err(usage("give --method, or --model for a trained head")),
    };
    let learned = matches!(method, MethodArg::Vilu | MethodArg::Lvu);
    if learned && a.model.is_none() {
        return Err(usage(format!(
            "--method {} needs --model",
            method_label(method)
        )));
    }
    if !learned && a.model.is_some() {
        return Err(usage(format!(
            "--method {} takes no model",
            method_label(method)
        )));
    }
    if method == MethodArg::TsMcm && a.calib.is_none() {
        return Err(usage("ts-mcm needs --calib to fit its temperature"));
    }
    let batch_sizes = a.batch_size_sweep.clone().unwrap_or(vec![a.batch_size]);
    if batch_sizes.iter().any(|&b| b < 2) {
        return Err(usage("evaluation batch sizes must be at least 2"));
    }

    #[derive(Serialize)]
    struct EvalRecord<'a> {
        method: &'static str,
        batch_sizes: &'a [usize],
        calib: Option<String>,
        temperature: Option<f64>,
        keep_scores: bool,
    }
    let mut inputs = Recorder::new((), a.seed)?;
    let ds = load_dataset(&a.data, &mut inputs)?;
    let mut temperature = None;
    let model: Option<ViluModel<f32>> = match &a.model {
        Some(p) => {
            let m = checkpoint::read_checkpoint(p)
                .with_context(|| format!("loading {}", p.display()))?;
            Some(m)
        }
        None => None,
    };
    let scorer: Box<dyn UncertaintyScorer + '_> = match method {
        MethodArg::Mcm => Box::new(Baseline::Mcm),
        MethodArg::Entropy => Box::new(Baseline::Entropy),
        MethodArg::Doctor => Box::new(Baseline::Doctor),
        MethodArg::TsMcm => {
            let calib = a.calib.as_ref().expect("checked above");
            let b = fit_ts(calib, a.batch_size, a.seed, &mut inputs)?;
            if let Baseline::TsMcm { temperature: t } = b {
                temperature = Some(t);
            }
            Box::new(b)
        }
        MethodArg::Lvu | MethodArg::Vilu => Box::new(ModelScorer {
            model: model.as_ref().expect("checked above"),
            name: method_label(method),
        }),
    };
    let rec = {
        let mut r = Recorder::new(
            EvalRecord {
                method: method_label(method),
                batch_sizes: &batch_sizes,
                calib: a.calib.as_ref().map(|p| p.display().to_string()),
                temperature,
                keep_scores: a.keep_scores,
            },
            a.seed,
        )?;
        for p in [Some(&a.data), a.model.as_ref(), a.calib.as_ref()]
            .into_iter()
            .flatten()
        {
            r.input(p)?;
        }
        r
    };

    let name = dataset_name(&a.data);
    let sweep = a.batch_size_sweep.is_some();
    let mut printed = Vec::new();
    for &bs in &batch_sizes {
        let report = evaluate(&ds, scorer.as_ref(), &name, bs, a.seed, a.keep_scores)?;
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        let infix = format!("bs{bs}");
        if let Some(h) = &a.histogram {
            let path = if sweep {
                with_infix(h, &infix)
            } else {
                h.clone()
            };
            rec.write(&path, report.histogram.to_csv().as_bytes())?;
        }
        match &a.report {
            Some(r) => {
                let path = if sweep {
                    with_infix(r, &infix)
                } else {
                    r.clone()
                };
                rec.write(&path, &serde_json::to_vec_pretty(&report)?)?;
                println!("{}", summary_line(&report));
            }
            None => printed.push(report),
        }
    }
    if a.report.is_none() {
        let json = if sweep {
            serde_json::to_string_pretty(&printed)?
        } else {
            serde_json::to_string_pretty(&printed[0])?
        };
        println!("{json}");
    }
    Ok(())
}

pub fn baseline(a: BaselineArgs) -> Result<()> {
    if a.batch_size < 2 {
        return Err(usage("evaluation batch size must be at least 2"));
    }
    let mut inputs = Recorder::new((), a.seed)?;
    let ds = load_dataset(&a.data, &mut inputs)?;
    let mut methods = vec![Baseline::Mcm, Baseline::Entropy, Baseline::Doctor];
    if let Some(c) = &a.calib {
        methods.push(fit_ts(c, a.batch_size, a.seed, &mut inputs)?);
    } else {
        eprintln!("note: ts-mcm skipped (no --calib)");
    }

    #[derive(Serialize)]
    struct BaselineRecord {
        methods: Vec<Baseline>,
        batch_size: usize,
    }
    let mut rec = Recorder::new(
        BaselineRecord {
            methods: methods.clone(),
            batch_size: a.batch_size,
        },
        a.seed,
    )?;
    for p in [Some(&a.data), a.calib.as_ref()].into_iter().flatten() {
        rec.input(p)?;
    }
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;

    let name = dataset_name(&a.data);
    let mut reports = Vec::new();
    for m in &methods {
        let report = evaluate(&ds, m, &name, a.batch_size, a.seed, false)?;
        let base = a.out_dir.join(m.name());
        rec.write(
            &base.with_extension("json"),
            &serde_json::to_vec_pretty(&report)?,
        )?;
        rec.write(
            &base.with_extension("histogram.csv"),
            report.histogram.to_csv().as_bytes(),
        )?;
        reports.push(report);
    }
    print!("{}", table(&reports, TableFormat::Markdown));
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut passed = 0;
    let mut total = 0;
    let (mut worst64, mut worst32) = (0f64, 0f64);
    for ablation in Ablation::ALL {
        for mcm in [false, true] {
            let cfg = ViluConfig::ablation(a.dim, ablation)
                .with_mcm_score(mcm)
                .with_seed(a.seed);
            let opts = GradCheckOptions {
                k: a.k,
                coordinates: a.coordinates,
                seed: a.seed,
                corrupt: a.corrupt,
                ..GradCheckOptions::default()
            };
            let r = check_gradients(&cfg, &opts)?;
            let ok = r.f64_report.passes(1e-5) && r.f32_report.passes(1e-3);
            worst64 = worst64.max(r.f64_report.max_rel_error);
            worst32 = worst32.max(r.f32_report.max_rel_error);
            total += 1;
            passed += usize::from(ok);
            println!(
                "{:<7} mcm={:<5} f64 {:.3e} f32 {:.3e} checked {} skipped {} {}",
                ablation.to_string(),
                mcm,
                r.f64_report.max_rel_error,
                r.f32_report.max_rel_error,
                r.f64_report.checked,
                r.f64_report.skipped,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    let line = format!(
        "{passed}/{total} configurations pass, max rel err {worst64:.3e} (f32 {worst32:.3e})"
    );
    println!("{line}");
    if passed == total {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed: {line}")).into())
    }
}

fn table(reports: &[EvalReport], format: TableFormat) -> String {
    let header = [
        "method", "dataset", "mode", "batch", "n", "errors", "accuracy", "auroc", "fpr95",
    ];
    let rows: Vec<[String; 9]> = reports
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.dataset.clone(),
                match r.mode {
                    Mode::ImageLabel => "label".into(),
                    Mode::ImageCaption => "caption".into(),
                },
                r.eval_batch_size.to_string(),
                r.n_samples.to_string(),
                r.n_errors.to_string(),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.auroc),
                format!("{:.4}", r.fpr95),
            ]
        })
        .collect();
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&header.join(","));
            out.push('\n');
            for r in &rows {
                out.push_str(&r.join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for r in &rows {
                out.push_str(&format!("| {} |\n", r.join(" | ")));
            }
        }
    }
    out
}

pub fn report(a: ReportArgs) -> Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice::<EvalReport>(&bytes)
                .with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let text = table(&reports, a.format);
    match &a.out {
        Some(path) => {
            let mut rec = Recorder::new(
                serde_json::json!({ "format": format!("{:?}", a.format).to_lowercase() }),
                0,
            )?;
            for p in &a.inputs {
                rec.input(p)?;
            }
            rec.write(path, text.as_bytes())?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let ds = decode_unvalidated(&bytes).with_context(|| format!("parsing {}", a.data.display()))?;
    let report = ds.validation_report();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{}", report.digest());
        for v in &report.violations {
            println!("violation: {v}");
        }
    }
    if report.is_clean() {
        Ok(())
    } else {
        Err(Error::Invariant(format!(
            "{} violation(s) in {}",
            report.violations.len(),
            a.data.display()
        ))
        .into())
    }
}
