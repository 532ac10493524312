//! One function per subcommand. Each returns the artifact it wrote and
//! whether its command-level assertions held.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use plr_core::data::{
    build_sequences, chronological_split, generate_synthetic, load_interactions,
    write_interactions, Dataset, DatasetStats, Split,
};
use plr_core::model::{dump_attention, load_checkpoint, save_checkpoint, AttentionDump, Model};
use plr_core::theory::{run_theory_suite, trained_decay_check, TheoryReport};
use plr_core::train::{
    ablate, count_flops, evaluate, measure_latency, oracle_ceiling, robustness_run, sweep,
    train_and_evaluate, Ablation, CeilingReport, FlopsConfig, FlopsReport, LatencyReport,
    MetricsReport, RobustnessPoint, SweepTable, TrainHistory,
};
use plr_core::{PlrError, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// FLOPs ratio band accepted for the reference-scale configuration.
pub const REFERENCE_FLOPS_RANGE: (f64, f64) = (1.03, 1.08);

/// Envelope shared by every JSON artifact.
#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    passed: bool,
    result: T,
    runtime_seconds: f64,
}

pub struct Outcome {
    pub passed: bool,
    pub written: Vec<PathBuf>,
}

impl Outcome {
    fn ok(written: Vec<PathBuf>) -> Self {
        Self {
            passed: true,
            written,
        }
    }
}

fn write_json<T: Serialize>(
    cfg: &RunConfig,
    command: &str,
    result: T,
    passed: bool,
    start: Instant,
    path: &Path,
) -> Result<PathBuf> {
    let artifact = Artifact {
        schema_version: SCHEMA_VERSION,
        command,
        seed: cfg.seed(),
        config: cfg,
        passed,
        result,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&artifact)?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(path.to_path_buf())
}

/// `out`, or `fallback` when `out` is unset.
fn out_path(cfg: &RunConfig, fallback: &str) -> PathBuf {
    match cfg.text("out") {
        "" => PathBuf::from(fallback),
        p => PathBuf::from(p),
    }
}

#[derive(Serialize, serde::Deserialize)]
struct PreparedFile {
    dataset: Dataset,
}

/// Reads a prepared dataset (`.json`) or builds one from an interaction
/// log using the filtering keys.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.path("data")?;
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(&path)?;
        let file: serde_json::Value = serde_json::from_str(&text)?;
        let result = file.get("result").cloned().ok_or_else(|| {
            PlrError::Input(format!("{} is not a prepared dataset", path.display()))
        })?;
        let prepared: PreparedFile = serde_json::from_value(result)?;
        if !prepared.dataset.is_split() {
            return Err(PlrError::Data("prepared dataset carries no split".into()));
        }
        return Ok(prepared.dataset);
    }
    let threshold = cfg.int("positive_threshold") as u8;
    let records = load_interactions(&path, threshold)?;
    let ds = build_sequences(&records, cfg.int("min_interactions"), cfg.int("max_len"))?;
    Ok(chronological_split(&ds).0)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.path("checkpoint")?;
    if !path.exists() {
        return Err(PlrError::Input(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let (params, config) = load_checkpoint(&path)?;
    Model::from_params(config, params)
}

fn model_and_data(cfg: &RunConfig) -> Result<(Model, Dataset)> {
    let model = load_model(cfg)?;
    let ds = load_dataset(cfg)?;
    if model.config.vocab_size != ds.num_items() {
        return Err(PlrError::Config(format!(
            "checkpoint vocabulary {} does not match the dataset's {} items",
            model.config.vocab_size,
            ds.num_items()
        )));
    }
    Ok((model, ds))
}

#[derive(Serialize)]
struct PreparedSummary<'a> {
    stats: DatasetStats,
    excluded_short_users: usize,
    dataset: &'a Dataset,
}

pub fn prepare(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let path = cfg.path("data")?;
    let records = load_interactions(&path, cfg.int("positive_threshold") as u8)?;
    let ds = build_sequences(&records, cfg.int("min_interactions"), cfg.int("max_len"))?;
    let (split, excluded) = chronological_split(&ds);
    let summary = PreparedSummary {
        stats: split.stats(),
        excluded_short_users: excluded,
        dataset: &split,
    };
    let out = write_json(
        cfg,
        "prepare",
        summary,
        true,
        start,
        &out_path(cfg, "dataset.json"),
    )?;
    Ok(Outcome::ok(vec![out]))
}

#[derive(Serialize)]
struct SynthSummary {
    interactions: PathBuf,
    stats: DatasetStats,
}

/// Writes the interaction log as TSV and a JSON sidecar next to it.
pub fn synth(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let (ds, _) = generate_synthetic(&cfg.synthetic())?;
    let tsv = out_path(cfg, "synthetic.tsv");
    if let Some(dir) = tsv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_interactions(&ds.to_records(), fs::File::create(&tsv)?)?;
    let summary = SynthSummary {
        interactions: tsv.clone(),
        stats: ds.stats(),
    };
    let sidecar = write_json(
        cfg,
        "synth",
        summary,
        true,
        start,
        &tsv.with_extension("json"),
    )?;
    Ok(Outcome::ok(vec![tsv, sidecar]))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    checkpoint: PathBuf,
    history: &'a TrainHistory,
    test: &'a MetricsReport,
}

/// Trains into the `out` directory: checkpoint, history CSV and a JSON
/// summary with test metrics of the retained parameters.
pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let ds = load_dataset(cfg)?;
    let model_cfg = cfg.model(ds.num_items());
    let (model, history, test) =
        train_and_evaluate(&model_cfg, &ds, &cfg.train(), &cfg.loss(&model_cfg))?;
    let dir = out_path(cfg, "run");
    fs::create_dir_all(&dir)?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&model.params, &model.config, &ckpt)?;
    let csv = dir.join("history.csv");
    fs::write(&csv, history.to_csv())?;
    let resolved = dir.join("config.txt");
    fs::write(&resolved, cfg.to_file_text())?;
    println!("{}", test.table());
    let summary = TrainSummary {
        checkpoint: ckpt.clone(),
        history: &history,
        test: &test,
    };
    let json = write_json(cfg, "train", summary, true, start, &dir.join("train.json"))?;
    Ok(Outcome::ok(vec![ckpt, csv, resolved, json]))
}

pub fn eval(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let (model, ds) = model_and_data(cfg)?;
    let report = evaluate(&model, &ds, cfg.split()?, &cfg.train().eval_config())?;
    println!("{}", report.table());
    let out = write_json(
        cfg,
        "eval",
        report,
        true,
        start,
        &out_path(cfg, "metrics.json"),
    )?;
    Ok(Outcome::ok(vec![out]))
}

#[derive(Serialize)]
struct AblationSummary {
    variant: Ablation,
    /// True when the variant changes training and the model was retrained.
    retrained: bool,
    metrics: MetricsReport,
}

/// Removing the gate is an inference-time change applied to the loaded
/// parameters. Removing the contrastive or divergence term only changes
/// training, so those variants retrain from scratch with the same seed.
pub fn ablate_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let variant = cfg.variant()?;
    let (model, ds) = model_and_data(cfg)?;
    let ablated = ablate(&model.config, variant);
    let (metrics, retrained) = match variant {
        Ablation::NoMors => {
            let m = Model::from_params(ablated, model.params.clone())?;
            (
                evaluate(&m, &ds, cfg.split()?, &cfg.train().eval_config())?,
                false,
            )
        }
        Ablation::NoRcl | Ablation::NoKl => {
            let (_, _, test) =
                train_and_evaluate(&ablated, &ds, &cfg.train(), &cfg.loss(&ablated))?;
            (test, true)
        }
    };
    println!("{}", metrics.table());
    let summary = AblationSummary {
        variant,
        retrained,
        metrics,
    };
    let out = write_json(
        cfg,
        "ablate",
        summary,
        true,
        start,
        &out_path(cfg, "ablation.json"),
    )?;
    Ok(Outcome::ok(vec![out]))
}

pub fn sweep_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let ds = load_dataset(cfg)?;
    let base = cfg.model(ds.num_items());
    let table: SweepTable = sweep(
        &base,
        &cfg.sweep_grid(),
        &ds,
        &cfg.train(),
        cfg.float("temperature"),
        cfg.float("kl_sign"),
        cfg.budget(),
    )?;
    println!("{}", table.table(10));
    let out = write_json(
        cfg,
        "sweep",
        table,
        true,
        start,
        &out_path(cfg, "sweep.json"),
    )?;
    Ok(Outcome::ok(vec![out]))
}

pub fn robustness(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let (model, ds) = model_and_data(cfg)?;
    let points: Vec<RobustnessPoint> = robustness_run(
        &model,
        &ds,
        &cfg.rates(),
        cfg.seed(),
        &cfg.train().eval_config(),
    )?;
    for p in &points {
        println!(
            "rate {:.2}  recall@10 {:.4}  ndcg@10 {:.4}",
            p.rate,
            p.metrics.recall(10),
            p.metrics.ndcg(10)
        );
    }
    let out = write_json(
        cfg,
        "robustness",
        points,
        true,
        start,
        &out_path(cfg, "robustness.json"),
    )?;
    Ok(Outcome::ok(vec![out]))
}

/// True when the ceiling matches or beats the current output at every
/// cutoff on both metrics.
pub fn ceiling_dominates(r: &CeilingReport) -> bool {
    r.current
        .metrics
        .iter()
        .zip(&r.ceiling.metrics)
        .all(|(c, o)| c.k == o.k && o.recall >= c.recall && o.ndcg >= c.ndcg)
}

pub fn ceiling(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let (model, ds) = model_and_data(cfg)?;
    let report = oracle_ceiling(&model, &ds, cfg.split()?, &cfg.train().eval_config())?;
    let passed = ceiling_dominates(&report);
    println!(
        "current\n{}\nceiling\n{}",
        report.current.table(),
        report.ceiling.table()
    );
    let out = write_json(
        cfg,
        "ceiling",
        report,
        passed,
        start,
        &out_path(cfg, "ceiling.json"),
    )?;
    Ok(Outcome {
        passed,
        written: vec![out],
    })
}

/// Runs the randomized suites. With a checkpoint and a positive
/// `trained_check_steps`, also estimates the step map's constant on the
/// chosen user's test context and reports (without asserting) the decay.
pub fn theory(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let mut report: TheoryReport = run_theory_suite(&cfg.suite())?;
    let steps = cfg.int("trained_check_steps");
    if steps > 0 {
        let (model, ds) = model_and_data(cfg)?;
        let context = user_context(cfg, &ds)?;
        report.trained = Some(trained_decay_check(
            &model,
            &context,
            steps,
            100,
            cfg.seed(),
        )?);
    }
    for v in &report.verdicts {
        let tag = match (v.asserted, v.passed) {
            (true, true) => "PASS",
            (true, false) => "FAIL",
            (false, _) => "note",
        };
        println!(
            "{tag}  {}  ({} failures / {} trials)",
            v.inequality, v.failures, v.trials
        );
    }
    for e in &report.examples {
        let tag = if e.passed { "PASS" } else { "FAIL" };
        println!(
            "{tag}  {}: expected {} measured {:.6}",
            e.name, e.expected, e.measured
        );
    }
    let passed = report.all_passed();
    let out = write_json(
        cfg,
        "theory",
        report,
        passed,
        start,
        &out_path(cfg, "theory.json"),
    )?;
    Ok(Outcome {
        passed,
        written: vec![out],
    })
}

#[derive(Serialize)]
struct FlopsSummary {
    flops: FlopsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency: Option<LatencyReport>,
}

/// Reference scale asserts the ratio band. Otherwise the count uses the
/// checkpoint's shape (or the configured model) and, with data, also
/// measures latency over the test contexts.
pub fn flops(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let reference = cfg.flag("reference_scale");
    let (fc, latency) = if reference {
        (FlopsConfig::reference_scale(), None)
    } else if cfg.text("checkpoint").is_empty() {
        (FlopsConfig::from_model(&cfg.model(1)), None)
    } else {
        let model = load_model(cfg)?;
        let latency = if cfg.text("data").is_empty() {
            None
        } else {
            let ds = load_dataset(cfg)?;
            let contexts: Vec<Vec<usize>> = ds
                .eval_samples(Split::Test)?
                .into_iter()
                .map(|s| s.context)
                .collect();
            Some(measure_latency(&model, &contexts, 3)?)
        };
        (FlopsConfig::from_model(&model.config), latency)
    };
    let report = count_flops(&fc)?;
    let passed =
        !reference || (REFERENCE_FLOPS_RANGE.0..=REFERENCE_FLOPS_RANGE.1).contains(&report.ratio_vs_base);
    println!(
        "base {:.4e}  reasoning {:.4e}  ratio {:.4}",
        report.flops_base as f64, report.flops_reasoning as f64, report.ratio_vs_base
    );
    let summary = FlopsSummary {
        flops: report,
        latency,
    };
    let out = write_json(
        cfg,
        "flops",
        summary,
        passed,
        start,
        &out_path(cfg, "flops.json"),
    )?;
    Ok(Outcome {
        passed,
        written: vec![out],
    })
}

fn user_context(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<usize>> {
    let user = cfg.int("user");
    let samples = ds.eval_samples(cfg.split()?)?;
    samples
        .into_iter()
        .find(|s| s.user == user)
        .map(|s| s.context)
        .ok_or_else(|| PlrError::Input(format!("user {user} has no {} sample", cfg.text("split"))))
}

pub fn attention(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let (model, ds) = model_and_data(cfg)?;
    let context = user_context(cfg, &ds)?;
    let dump: AttentionDump = dump_attention(&model, &context)?;
    let out = write_json(
        cfg,
        "dump-attention",
        dump,
        true,
        start,
        &out_path(cfg, "attention.json"),
    )?;
    Ok(Outcome::ok(vec![out]))
}
