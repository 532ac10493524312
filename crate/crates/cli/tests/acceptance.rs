//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs sequentially so the training runs behind criteria 10 to 12 are
//! shared and the printed lines are never captured. Pass criterion numbers
//! as arguments to run a subset: `cargo test --test acceptance -- 4 5`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use common::{
    depth_only_reference, max_abs, random_contexts, random_params, small_config, Reference,
};
use plr_core::data::{chronological_split, generate_synthetic, Dataset, Split, SyntheticConfig};
use plr_core::model::{run_batch, ContextBatch, Mode, Phase, PlrConfig, PlrParams};
use plr_core::objectives::{objective, LossConfig};
use plr_core::streams;
use plr_core::tensor::{finite_diff_check, GradCheckConfig, RngStream, Tape, Tensor};
use plr_core::theory::{
    decay_suite, ensemble_gap, gating_benefit, jensen_suite, specialization_suite,
    DistributionEnsemble, LipschitzSystem, SuiteConfig,
};
use plr_core::train::{
    count_flops, metrics_from_ranks, ndcg_at, oracle_ceiling, stream_diversity, train_and_evaluate,
    FlopsConfig, TrainConfig,
};

type Check = Result<String, String>;

fn check(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

// 1 -------------------------------------------------------------------------

fn gradient_check() -> Check {
    let start = Instant::now();
    let cfg = PlrConfig {
        vocab_size: 60,
        ..Default::default()
    };
    let lcfg = LossConfig::for_model(&cfg, 0.1, 1.0, -1.0);
    let params = PlrParams::<f64>::init(&cfg, 5).unwrap();
    let mut rng = RngStream::new(6);
    let contexts = random_contexts(&mut rng, 4, cfg.max_len, cfg.vocab_size);
    let targets: Vec<usize> = contexts.iter().map(|_| rng.below(cfg.vocab_size)).collect();
    let batch = ContextBatch::new(&contexts, cfg.max_len, cfg.vocab_size).unwrap();
    let names = params.names();
    let flat: Vec<Tensor<f64>> = params.flat().into_iter().cloned().collect();
    let root = RngStream::new(7);
    let report = finite_diff_check(
        &names,
        &flat,
        |values| {
            let p = PlrParams::from_flat(cfg.layers, values.to_vec())?;
            let tape = Tape::new();
            let vars = p.to_tape(&tape, true);
            // fresh streams with fixed seeds: every call draws the same masks
            let mut v1 = root.split(streams::DROPOUT_VIEW1);
            let mut v2 = root.split(streams::DROPOUT_VIEW2);
            let obj = objective(
                &vars,
                &cfg,
                &lcfg,
                &batch,
                &targets,
                Some(&mut v1),
                Some(&mut v2),
                None,
            )?;
            tape.backward(obj.total)?;
            Ok((obj.total.value().item(), vars.grads()))
        },
        &GradCheckConfig {
            epsilon: 1e-3,
            samples: 64,
            tolerance: 1e-3,
            seed: 8,
        },
    )
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        report.passed && secs < 60.0,
        format!(
            "max relative error {:.2e} at {} over {} parameters, {secs:.1}s",
            report.max_relative_error, report.worst_parameter, report.checked
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn kv_cache_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = RngStream::new(21);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let (m, t) = (1 + rng.below(4), 1 + rng.below(4));
        let cfg = small_config(&mut rng, m, t);
        let p = random_params(&cfg, 1000 + trial, 0.3);
        let contexts = random_contexts(&mut rng, 3, 8, cfg.vocab_size);
        let tape = Tape::new();
        let vars = p.to_tape(&tape, false);
        let batch = ContextBatch::new(&contexts, cfg.max_len, cfg.vocab_size).unwrap();
        let out = run_batch(&vars, &cfg, &batch, &mut Mode::Eval, Phase::Infer, None).unwrap();
        let states: Vec<Vec<Vec<f64>>> = out.grid.states.iter().map(|s| rows(&s.value())).collect();
        let logits = rows(&out.logits.value());
        let reference = Reference { p: &p, cfg: &cfg };
        for (b, ctx) in contexts.iter().enumerate() {
            let r = reference.forward(ctx);
            for mm in 0..m {
                for tt in 0..t {
                    worst = worst.max(max_abs(&states[tt][b * m + mm], &r.states[mm][tt]));
                }
            }
            worst = worst.max(max_abs(&logits[b], &r.infer_logits));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-5 && secs < 60.0,
        format!("50 configs, max-abs deviation {worst:.2e}, {secs:.1}s"),
    )
}

// 3 -------------------------------------------------------------------------

fn reduction_equivalence() -> Check {
    let mut rng = RngStream::new(31);
    let (mut out_dev, mut loss_dev): (f64, f64) = (0.0, 0.0);
    for trial in 0..20 {
        let steps = 1 + rng.below(4);
        let mut cfg = small_config(&mut rng, 1, steps);
        cfg.mors_enabled = false;
        cfg.kl_enabled = false;
        cfg.rcl_enabled = false;
        let mut p = random_params(&cfg, 2000 + trial, 0.3);
        p.triggers.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let contexts = random_contexts(&mut rng, 4, 8, cfg.vocab_size);
        let targets: Vec<usize> = contexts.iter().map(|_| rng.below(cfg.vocab_size)).collect();
        let lcfg = LossConfig::for_model(&cfg, 0.1, 1.0, -1.0);
        let tape = Tape::new();
        let vars = p.to_tape(&tape, false);
        let batch = ContextBatch::new(&contexts, cfg.max_len, cfg.vocab_size).unwrap();
        let obj = objective(&vars, &cfg, &lcfg, &batch, &targets, None, None, None).unwrap();
        let z = rows(&obj.view1.z.value());
        let logits = rows(&obj.view1.logits.value());
        let mut loss = 0.0;
        for (b, ctx) in contexts.iter().enumerate() {
            let (rz, rl) = depth_only_reference(&p, &cfg, ctx);
            out_dev = out_dev
                .max(max_abs(&z[b], &rz))
                .max(max_abs(&logits[b], &rl));
            loss += common::cross_entropy(&rl, targets[b]) / contexts.len() as f64;
        }
        loss_dev = loss_dev.max((obj.total.value().item() - loss).abs());
    }
    check(
        out_dev <= 1e-5 && loss_dev <= 1e-6,
        format!("20 batches, outputs {out_dev:.2e}, loss {loss_dev:.2e}"),
    )
}

// 4 to 7 --------------------------------------------------------------------

fn suite() -> SuiteConfig {
    SuiteConfig::default()
}

fn jensen() -> Check {
    let v = jensen_suite(&suite()).map_err(|e| e.to_string())?;
    let ens = DistributionEnsemble::new(vec![vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap();
    let gap = ensemble_gap(&ens, &[1.0, 0.0]).unwrap().jensen_gap;
    // closed form: mean of -ln 0.8 and -ln 0.4, minus -ln 0.6
    let oracle = 0.5 * (-(0.8f64).ln() - (0.4f64).ln()) + (0.6f64).ln();
    let example = (gap - 0.0589).abs() <= 1e-4 && (gap - oracle).abs() <= 1e-12;
    check(
        v.iter().all(|v| v.passed) && example,
        format!(
            "{} / {} nonnegativity failures, {} / {} equality failures, worked example I = {gap:.6}",
            v[0].failures, v[0].trials, v[1].failures, v[1].trials
        ),
    )
}

fn decay() -> Check {
    let s = decay_suite(&suite()).map_err(|e| e.to_string())?;
    let half = LipschitzSystem::linear(vec![vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
    let trace =
        plr_core::theory::diversity_decay_trace(&half, &[vec![0.0, 0.0], vec![2.0, 0.0]], 3)
            .unwrap();
    let d3 = trace.diversity[3];
    // (0.5^3 * 2)^2 for the single pair
    let exact = (d3 - 0.0625).abs() <= 1e-9 && trace.diversity[0] == 4.0;
    check(
        s.verdict.passed && s.verdict.trials == 100 && exact,
        format!(
            "{} / {} systems violate, tightest ratio {:.3}, D(3) = {d3}",
            s.verdict.failures, s.verdict.trials, s.max_tightness
        ),
    )
}

fn specialization() -> Check {
    let s = specialization_suite(&suite()).map_err(|e| e.to_string())?;
    let worst = s.violations.first().map_or(String::new(), |v| {
        format!(
            "; worst I = {:.4} vs c*D = {:.4}",
            v.jensen_gap,
            v.geometry.c * v.diversity
        )
    });
    check(
        s.verdict.failures == 0 && s.verdict.trials == 200,
        format!(
            "{} / {} instances violate (skipped {}), mean c = {:.4}{worst}",
            s.verdict.failures, s.verdict.trials, s.verdict.skipped, s.mean_c
        ),
    )
}

fn gating() -> Check {
    let v = plr_core::theory::gating_suite(&suite()).map_err(|e| e.to_string())?;
    let mut point = vec![0.0; 10];
    point[0] = 1.0;
    let ens = DistributionEnsemble::new(vec![point.clone(), vec![0.1; 10]]).unwrap();
    let gain = gating_benefit(&ens, &[1.0, 0.0], &point).unwrap().gain;
    // uniform mixture puts 0.5 + 0.05 on the target; the gated one puts 1
    let oracle = -(0.55f64).ln();
    let example = (gain - 0.5978).abs() <= 1e-4 && (gain - oracle).abs() <= 1e-12;
    check(
        v[0].passed && v[1].passed && v[1].trials == 500 && example,
        format!(
            "uniform gain nonzero in {} / {}, vertex gain negative in {} / {}, worked example gain = {gain:.6}",
            v[0].failures, v[0].trials, v[1].failures, v[1].trials
        ),
    )
}

// 8, 9 ----------------------------------------------------------------------

fn flops_anchor() -> Check {
    let r = count_flops(&FlopsConfig::reference_scale()).map_err(|e| e.to_string())?;
    check(
        (1.03..=1.08).contains(&r.ratio_vs_base),
        format!(
            "ratio {:.4} ({:.2}% extra)",
            r.ratio_vs_base,
            100.0 * (r.ratio_vs_base - 1.0)
        ),
    )
}

fn metric_oracles() -> Check {
    let mut worst: f64 = 0.0;
    let rank1 = metrics_from_ranks(&[1], &[10], Split::Test).unwrap();
    worst = worst
        .max((rank1.ndcg(10) - 1.0).abs())
        .max((rank1.recall(10) - 1.0).abs());
    let rank2 = metrics_from_ranks(&[2], &[10], Split::Test).unwrap();
    worst = worst.max((rank2.ndcg(10) - 1.0 / 3f64.log2()).abs());
    let beyond = metrics_from_ranks(&[11], &[10], Split::Test).unwrap();
    worst = worst
        .max(beyond.ndcg(10).abs())
        .max(beyond.recall(10).abs());
    // mixed list: ranks 1, 3, 30 at K = 5
    let mixed = metrics_from_ranks(&[1, 3, 30], &[5], Split::Test).unwrap();
    worst = worst.max((mixed.recall(5) - 2.0 / 3.0).abs());
    worst = worst.max((mixed.ndcg(5) - (1.0 + 0.5) / 3.0).abs());
    worst = worst.max((ndcg_at(4, 5) - 1.0 / 5f64.log2()).abs());
    check(worst <= 1e-9, format!("max deviation {worst:.1e}"))
}

// 10 to 12 ------------------------------------------------------------------

const WIDTH_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const DIVERSITY_SEEDS: [u64; 3] = [1, 2, 3];
const EPOCHS: usize = 5;

#[derive(Clone, Debug)]
struct RunResult {
    recall10: f64,
    diversity: Option<f64>,
    ceiling_holds: bool,
    seconds: f64,
}

static DATA: Mutex<Option<Dataset>> = Mutex::new(None);
static RUNS: Mutex<BTreeMap<(usize, u64, u64), RunResult>> = Mutex::new(BTreeMap::new());

fn desk_dataset() -> Dataset {
    let mut slot = DATA.lock().unwrap();
    slot.get_or_insert_with(|| {
        let (ds, _) = generate_synthetic(&SyntheticConfig::default()).unwrap();
        chronological_split(&ds).0
    })
    .clone()
}

/// Trains (or reuses) one desk-scale run with T = 2 and the given width,
/// divergence weight and seed.
fn desk_run(streams: usize, lambda: f64, seed: u64) -> RunResult {
    let key = (streams, lambda.to_bits(), seed);
    if let Some(r) = RUNS.lock().unwrap().get(&key) {
        return r.clone();
    }
    let start = Instant::now();
    let ds = desk_dataset();
    let cfg = PlrConfig {
        streams,
        steps: 2,
        vocab_size: ds.num_items(),
        ..Default::default()
    };
    let tcfg = TrainConfig {
        max_epochs: EPOCHS,
        seed,
        ..Default::default()
    };
    let lcfg = LossConfig::for_model(&cfg, lambda, 1.0, -1.0);
    let (model, _, test) = train_and_evaluate(&cfg, &ds, &tcfg, &lcfg).unwrap();
    let diversity = (streams > 1).then(|| {
        stream_diversity(&model, &ds, Split::Test)
            .unwrap()
            .representational
    });
    let ceiling = oracle_ceiling(&model, &ds, Split::Test, &tcfg.eval_config()).unwrap();
    let ceiling_holds = ceiling
        .current
        .metrics
        .iter()
        .zip(&ceiling.ceiling.metrics)
        .all(|(c, o)| c.k == o.k && o.recall >= c.recall && o.ndcg >= c.ndcg);
    let r = RunResult {
        recall10: test.recall(10),
        diversity,
        ceiling_holds,
        seconds: start.elapsed().as_secs_f64(),
    };
    println!(
        "    run M={streams} lambda={lambda} seed={seed}: recall@10 {:.4}, diversity {:?}, {:.0}s",
        r.recall10, r.diversity, r.seconds
    );
    RUNS.lock().unwrap().insert(key, r.clone());
    r
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn width_benefit() -> Check {
    let start = Instant::now();
    let wide = mean(WIDTH_SEEDS.iter().map(|&s| desk_run(2, 0.1, s).recall10));
    let narrow = mean(WIDTH_SEEDS.iter().map(|&s| desk_run(1, 0.1, s).recall10));
    let secs = start.elapsed().as_secs_f64();
    check(
        wide - narrow > 0.0 && secs < 1800.0,
        format!(
            "mean recall@10 M=2 {wide:.4} vs M=1 {narrow:.4} (margin {:+.4}), {secs:.0}s",
            wide - narrow
        ),
    )
}

fn diversity_effect() -> Check {
    let with_kl = mean(
        DIVERSITY_SEEDS
            .iter()
            .map(|&s| desk_run(2, 0.1, s).diversity.unwrap()),
    );
    let without = mean(
        DIVERSITY_SEEDS
            .iter()
            .map(|&s| desk_run(2, 0.0, s).diversity.unwrap()),
    );
    check(
        with_kl > without,
        format!("mean stream diversity lambda=0.1 {with_kl:.5} vs lambda=0 {without:.5}"),
    )
}

fn ceiling_dominance() -> Check {
    for &s in &WIDTH_SEEDS {
        desk_run(1, 0.1, s);
        desk_run(2, 0.1, s);
    }
    for &s in &DIVERSITY_SEEDS {
        desk_run(2, 0.0, s);
    }
    let runs = RUNS.lock().unwrap();
    let bad = runs.values().filter(|r| !r.ceiling_holds).count();
    check(
        bad == 0,
        format!(
            "{} runs, {bad} with a cutoff where the ceiling falls below",
            runs.len()
        ),
    )
}

// 13 ------------------------------------------------------------------------

fn pipeline(dir: &Path) -> Result<Vec<u8>, String> {
    let small = [
        "-s",
        "synth_users=300",
        "-s",
        "synth_items=100",
        "-s",
        "d=16",
        "-s",
        "max_epochs=2",
        "--seed",
        "11",
    ];
    for cmd in [
        vec!["synth"],
        vec!["train", "--data", "synthetic.tsv"],
        vec![
            "eval",
            "--data",
            "synthetic.tsv",
            "--checkpoint",
            "run/model.ckpt",
            "--out",
            "metrics.json",
        ],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_plr"))
            .current_dir(dir)
            .args(&cmd)
            .args(small)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "{cmd:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    let text = std::fs::read_to_string(dir.join("metrics.json")).map_err(|e| e.to_string())?;
    Ok(text
        .lines()
        .filter(|l| !l.contains("\"runtime_seconds\""))
        .flat_map(|l| l.bytes().chain(Some(b'\n')))
        .collect())
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (x, y) = (pipeline(a.path())?, pipeline(b.path())?);
    check(
        x == y && !x.is_empty(),
        format!(
            "two synth-train-eval runs, {} bytes of metric JSON, identical: {}",
            x.len(),
            x == y
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 13] = [
        (1, "gradient correctness", gradient_check),
        (2, "KV-cache equivalence", kv_cache_equivalence),
        (3, "depth-only reduction", reduction_equivalence),
        (4, "ensemble Jensen gap", jensen),
        (5, "diversity decay", decay),
        (6, "diversity-specialization bound", specialization),
        (7, "gating benefit", gating),
        (8, "FLOPs ratio at reference scale", flops_anchor),
        (9, "ranking metric oracles", metric_oracles),
        (10, "width benefit at desk scale", width_benefit),
        (
            11,
            "divergence regularization raises diversity",
            diversity_effect,
        ),
        (12, "oracle ceiling dominance", ceiling_dominance),
        (13, "end-to-end determinism", determinism),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let total = Instant::now();
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!(
            "criterion {n:>2} {tag}  {name}: {detail} [{:.1}s]",
            start.elapsed().as_secs_f64()
        );
        if result.is_err() {
            failed.push(n);
        }
    }
    let secs = total.elapsed().as_secs_f64();
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed in {secs:.0}s");
    } else {
        println!("acceptance: failed criteria {failed:?} ({secs:.0}s)");
        std::process::exit(1);
    }
}
