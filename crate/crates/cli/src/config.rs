//! Flat `key = value` run configuration with per-key provenance.
//!
//! Every key has a default. A config file may override it and a command-line
//! flag overrides both. Unknown keys are rejected rather than ignored so a
//! typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use plr_core::data::{Split, SyntheticConfig};
use plr_core::model::PlrConfig;
use plr_core::objectives::LossConfig;
use plr_core::theory::SuiteConfig;
use plr_core::train::{Ablation, SweepGrid, TrainConfig};
use plr_core::{PlrError, Result};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Value {
    Int(usize),
    Float(f64),
    Bool(bool),
    Text(String),
    Ints(Vec<usize>),
    Floats(Vec<f64>),
    MaybeFloat(Option<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Text,
    Ints,
    Floats,
    MaybeFloat,
}

impl Kind {
    fn of(v: &Value) -> Self {
        match v {
            Value::Int(_) => Kind::Int,
            Value::Float(_) => Kind::Float,
            Value::Bool(_) => Kind::Bool,
            Value::Text(_) => Kind::Text,
            Value::Ints(_) => Kind::Ints,
            Value::Floats(_) => Kind::Floats,
            Value::MaybeFloat(_) => Kind::MaybeFloat,
        }
    }

    fn form(self) -> &'static str {
        match self {
            Kind::Int => "a non-negative integer",
            Kind::Float => "a number",
            Kind::Bool => "true or false",
            Kind::Text => "a string",
            Kind::Ints => "a comma-separated list of non-negative integers",
            Kind::Floats => "a comma-separated list of numbers",
            Kind::MaybeFloat => "a number or `none`",
        }
    }

    fn parse(self, raw: &str) -> Option<Value> {
        let raw = raw.trim();
        let float = |s: &str| s.trim().parse::<f64>().ok().filter(|x| x.is_finite());
        let list = |s: &str| -> Vec<String> {
            s.split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(String::from)
                .collect()
        };
        match self {
            Kind::Int => raw.parse().ok().map(Value::Int),
            Kind::Float => float(raw).map(Value::Float),
            Kind::Bool => match raw {
                "true" | "on" | "yes" | "1" => Some(Value::Bool(true)),
                "false" | "off" | "no" | "0" => Some(Value::Bool(false)),
                _ => None,
            },
            Kind::Text => Some(Value::Text(raw.to_string())),
            Kind::Ints => list(raw)
                .iter()
                .map(|p| p.parse().ok())
                .collect::<Option<_>>()
                .map(Value::Ints),
            Kind::Floats => list(raw)
                .iter()
                .map(|p| float(p))
                .collect::<Option<_>>()
                .map(Value::Floats),
            Kind::MaybeFloat => match raw {
                "none" | "" => Some(Value::MaybeFloat(None)),
                s => float(s).map(|x| Value::MaybeFloat(Some(x))),
            },
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: Vec<String>| v.join(",");
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Text(v) => write!(f, "{v}"),
            Value::Ints(v) => write!(f, "{}", join(v.iter().map(ToString::to_string).collect())),
            Value::Floats(v) => write!(f, "{}", join(v.iter().map(ToString::to_string).collect())),
            Value::MaybeFloat(None) => write!(f, "none"),
            Value::MaybeFloat(Some(v)) => write!(f, "{v}"),
        }
    }
}

/// Short names accepted in files and flags.
const ALIASES: &[(&str, &str)] = &[
    ("M", "streams"),
    ("T", "steps"),
    ("L", "layers"),
    ("H", "heads"),
    ("lambda_kl", "lambda"),
    ("tau", "temperature"),
];

fn defaults() -> Vec<(&'static str, Value)> {
    let m = PlrConfig::default();
    let t = TrainConfig::default();
    let l = LossConfig::default();
    let s = SyntheticConfig::default();
    let q = SuiteConfig::default();
    use Value::*;
    vec![
        // model
        ("d", Int(m.d)),
        ("heads", Int(m.heads)),
        ("layers", Int(m.layers)),
        ("steps", Int(m.steps)),
        ("streams", Int(m.streams)),
        ("max_len", Int(m.max_len)),
        ("dropout_rep", Float(m.dropout_rep)),
        ("dropout_attn", Float(m.dropout_attn)),
        ("mors", Bool(m.mors_enabled)),
        ("rcl", Bool(m.rcl_enabled)),
        ("kl", Bool(m.kl_enabled)),
        ("normalized", Bool(m.normalized)),
        ("feed_forward", Bool(m.feed_forward)),
        // loss
        ("lambda", Float(l.lambda_kl)),
        ("temperature", Float(l.temperature)),
        ("kl_sign", Float(l.kl_sign)),
        // training
        ("batch_size", Int(t.batch_size)),
        ("learning_rate", Float(t.learning_rate)),
        ("beta1", Float(t.beta1)),
        ("beta2", Float(t.beta2)),
        ("epsilon", Float(t.epsilon)),
        ("max_epochs", Int(t.max_epochs)),
        ("patience", Int(t.patience)),
        ("seed", Int(t.seed as usize)),
        ("eval_ks", Ints(t.eval_ks)),
        ("per_user_cap", Int(t.per_user_cap)),
        ("exclude_seen", Bool(t.exclude_seen)),
        ("clip_norm", MaybeFloat(t.clip_norm)),
        // data and artifacts
        ("data", Text(String::new())),
        ("out", Text(String::new())),
        ("checkpoint", Text(String::new())),
        ("min_interactions", Int(10)),
        ("positive_threshold", Int(3)),
        ("split", Text("test".into())),
        // synthetic generator
        ("synth_users", Int(s.n_users)),
        ("synth_items", Int(s.n_items)),
        ("synth_interests", Int(s.n_interests)),
        ("synth_min_len", Int(s.min_len)),
        ("synth_max_len", Int(s.max_len)),
        ("synth_persistence", Float(s.persistence)),
        ("synth_successor_prob", Float(s.successor_prob)),
        ("synth_zipf", Float(s.zipf_exponent)),
        // experiments
        ("variant", Text("no-mors".into())),
        ("rates", Floats(vec![0.1, 0.2, 0.3])),
        ("sweep_streams", Ints(vec![1, 2, 3])),
        ("sweep_steps", Ints(vec![1, 2, 3])),
        ("sweep_lambdas", Floats(vec![0.0, 0.1])),
        ("sweep_dropouts", Floats(vec![m.dropout_rep])),
        ("budget_seconds", MaybeFloat(None)),
        ("jensen_trials", Int(q.jensen_trials)),
        ("decay_trials", Int(q.decay_trials)),
        ("specialization_trials", Int(q.specialization_trials)),
        ("gating_trials", Int(q.gating_trials)),
        ("trained_check_steps", Int(0)),
        ("reference_scale", Bool(false)),
        ("user", Int(0)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Entry {
    pub value: Value,
    pub source: Source,
}

/// Resolved configuration: every known key with its value and where the
/// value came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct RunConfig {
    entries: BTreeMap<String, Entry>,
}

fn canonical(key: &str) -> &str {
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map_or(key, |(_, k)| k)
}

fn split_pair(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

/// Parses the file format: one `key = value` per line, `#` starts a comment,
/// blank lines are ignored.
pub fn parse_file_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = split_pair(line).ok_or_else(|| PlrError::Parse {
            line: i + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        if k.is_empty() {
            return Err(PlrError::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses `key=value` flag arguments.
pub fn parse_flag_pairs(flags: &[String]) -> Result<Vec<(String, String)>> {
    flags
        .iter()
        .map(|f| {
            split_pair(f)
                .filter(|(k, _)| !k.is_empty())
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| PlrError::Config(format!("flag `{f}` is not of the form key=value")))
        })
        .collect()
}

impl RunConfig {
    pub fn defaults() -> Self {
        let entries = defaults()
            .into_iter()
            .map(|(k, value)| {
                (
                    k.to_string(),
                    Entry {
                        value,
                        source: Source::Default,
                    },
                )
            })
            .collect();
        Self { entries }
    }

    fn set(&mut self, key: &str, raw: &str, source: Source) -> Result<()> {
        let key = canonical(key);
        let entry = self
            .entries
            .get_mut(key)
            .ok_or_else(|| PlrError::Config(format!("unknown key `{key}`")))?;
        let kind = Kind::of(&entry.value);
        entry.value = kind.parse(raw).ok_or_else(|| {
            PlrError::Config(format!("key `{key}` expects {}, got `{raw}`", kind.form()))
        })?;
        entry.source = source;
        Ok(())
    }

    /// Applies file pairs, then flag pairs, and validates the result.
    pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::defaults();
        for (k, v) in file {
            cfg.set(k, v, Source::File)?;
        }
        for (k, v) in flags {
            cfg.set(k, v, Source::Flag)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.get(canonical(key))
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.entry(key).map(|e| e.source)
    }

    fn get(&self, key: &str) -> &Value {
        &self.entries[key].value
    }

    pub fn int(&self, key: &str) -> usize {
        match self.get(key) {
            Value::Int(v) => *v,
            v => panic!("key `{key}` holds {v:?}, not an integer"),
        }
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(v) => *v,
            v => panic!("key `{key}` holds {v:?}, not a number"),
        }
    }

    pub fn flag(&self, key: &str) -> bool {
        match self.get(key) {
            Value::Bool(v) => *v,
            v => panic!("key `{key}` holds {v:?}, not a boolean"),
        }
    }

    pub fn text(&self, key: &str) -> &str {
        match self.get(key) {
            Value::Text(v) => v,
            v => panic!("key `{key}` holds {v:?}, not a string"),
        }
    }

    fn ints(&self, key: &str) -> Vec<usize> {
        match self.get(key) {
            Value::Ints(v) => v.clone(),
            v => panic!("key `{key}` holds {v:?}, not an integer list"),
        }
    }

    fn floats(&self, key: &str) -> Vec<f64> {
        match self.get(key) {
            Value::Floats(v) => v.clone(),
            v => panic!("key `{key}` holds {v:?}, not a number list"),
        }
    }

    fn maybe_float(&self, key: &str) -> Option<f64> {
        match self.get(key) {
            Value::MaybeFloat(v) => *v,
            v => panic!("key `{key}` holds {v:?}, not an optional number"),
        }
    }

    /// A path-valued key, or an error naming the key when it is unset.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        match self.text(key) {
            "" => Err(PlrError::Config(format!(
                "`{key}` is required for this command"
            ))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.int("seed") as u64
    }

    /// Model configuration for a dataset with `vocab_size` items.
    pub fn model(&self, vocab_size: usize) -> PlrConfig {
        PlrConfig {
            d: self.int("d"),
            heads: self.int("heads"),
            layers: self.int("layers"),
            steps: self.int("steps"),
            streams: self.int("streams"),
            max_len: self.int("max_len"),
            vocab_size,
            dropout_rep: self.float("dropout_rep"),
            dropout_attn: self.float("dropout_attn"),
            mors_enabled: self.flag("mors"),
            rcl_enabled: self.flag("rcl"),
            kl_enabled: self.flag("kl"),
            normalized: self.flag("normalized"),
            feed_forward: self.flag("feed_forward"),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.int("batch_size"),
            learning_rate: self.float("learning_rate"),
            beta1: self.float("beta1"),
            beta2: self.float("beta2"),
            epsilon: self.float("epsilon"),
            max_epochs: self.int("max_epochs"),
            patience: self.int("patience"),
            seed: self.seed(),
            eval_ks: self.ints("eval_ks"),
            per_user_cap: self.int("per_user_cap"),
            exclude_seen: self.flag("exclude_seen"),
            clip_norm: self.maybe_float("clip_norm"),
        }
    }

    pub fn loss(&self, model: &PlrConfig) -> LossConfig {
        LossConfig::for_model(
            model,
            self.float("lambda"),
            self.float("temperature"),
            self.float("kl_sign"),
        )
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_users: self.int("synth_users"),
            n_items: self.int("synth_items"),
            n_interests: self.int("synth_interests"),
            min_len: self.int("synth_min_len"),
            max_len: self.int("synth_max_len"),
            persistence: self.float("synth_persistence"),
            successor_prob: self.float("synth_successor_prob"),
            zipf_exponent: self.float("synth_zipf"),
            seed: self.seed(),
        }
    }

    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            seed: self.seed(),
            jensen_trials: self.int("jensen_trials"),
            decay_trials: self.int("decay_trials"),
            specialization_trials: self.int("specialization_trials"),
            gating_trials: self.int("gating_trials"),
        }
    }

    pub fn sweep_grid(&self) -> SweepGrid {
        SweepGrid {
            streams: self.ints("sweep_streams"),
            steps: self.ints("sweep_steps"),
            lambdas: self.floats("sweep_lambdas"),
            dropouts: self.floats("sweep_dropouts"),
        }
    }

    pub fn rates(&self) -> Vec<f64> {
        self.floats("rates")
    }

    pub fn budget(&self) -> Option<Duration> {
        self.maybe_float("budget_seconds")
            .map(Duration::from_secs_f64)
    }

    pub fn split(&self) -> Result<Split> {
        self.text("split").parse()
    }

    pub fn variant(&self) -> Result<Ablation> {
        self.text("variant").parse()
    }

    /// Checks every constraint that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        let named = |key: &str, e: PlrError| PlrError::Config(format!("`{key}`: {e}"));
        self.loss(&self.model(1))
            .validate()
            .map_err(|e| named("lambda/temperature/kl_sign", e))?;
        self.model(1).validate()?;
        self.train().validate()?;
        if self.int("positive_threshold") > 5 {
            return Err(PlrError::Config(
                "`positive_threshold` expects a rating in 0..=5".into(),
            ));
        }
        if self.int("min_interactions") < 2 {
            return Err(PlrError::Config(
                "`min_interactions` must be at least 2".into(),
            ));
        }
        if let Some(b) = self.maybe_float("budget_seconds") {
            if b <= 0.0 {
                return Err(PlrError::Config("`budget_seconds` must be positive".into()));
            }
        }
        if let Some(r) = self.rates().iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(PlrError::Config(format!(
                "`rates` entry {r} outside [0, 1)"
            )));
        }
        self.split()?;
        self.variant()?;
        Ok(())
    }

    /// The configuration back in file form, with provenance as comments.
    pub fn to_file_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, e)| format!("{k} = {}  # {}\n", e.value, e.source.name()))
            .collect()
    }
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        }
    }
}

/// Reads the optional file and merges it with the flag pairs.
pub fn parse_config(file: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig> {
    let pairs = match file {
        Some(p) => parse_file_text(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    RunConfig::resolve(&pairs, flags)
}
