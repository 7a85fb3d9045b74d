//! Experiment files: one TOML document with `[data]`, `[algorithm]`,
//! `[solver]` and `[run]` sections, plus `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use fedsim_core::algorithms::{AlgorithmConfig, AlgorithmKind, DEFAULT_ALPHA};
use fedsim_core::localsolve::LocalSolverConfig;
use fedsim_core::losses::LossKind;
use fedsim_core::simulator::{DataSpec, ExperimentConfig, ModelSpec, ReportMode, RunConfig, DEFAULT_HIDDEN, DEFAULT_ROUNDS};

use crate::error::CliError;

/// Keys of `[data]` that describe the model rather than the source.
const MODEL_KEYS: [&str; 3] = ["loss", "hidden", "weight_decay"];

/// A fully resolved experiment file.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub experiment: ExperimentConfig,
    /// Output directory name; defaults to the config file stem.
    pub name: Option<String>,
    /// Report communication to reach this server training loss.
    pub target_loss: Option<f64>,
    /// Report communication to reach this test accuracy.
    pub target_accuracy: Option<f64>,
    /// Compute `ℓ*` for the manifest (analytic for quadratics, full
    /// gradient descent otherwise).
    pub reference_optimum: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileLayout {
    data: Table,
    algorithm: AlgorithmSection,
    #[serde(default)]
    solver: LocalSolverConfig,
    #[serde(default)]
    run: RunSection,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlgorithmSection {
    kind: AlgorithmKind,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default)]
    mu_prox: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default = "default_participation")]
    participation: f64,
    #[serde(default = "default_rounds")]
    rounds: usize,
    #[serde(default = "default_one")]
    eval_every: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    report_mode: ReportMode,
    #[serde(default)]
    workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_accuracy: Option<f64>,
    #[serde(default = "default_true")]
    reference_optimum: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        toml::from_str("").expect("every run key has a default")
    }
}

fn default_participation() -> f64 {
    1.0
}

fn default_rounds() -> usize {
    DEFAULT_ROUNDS
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelKeys {
    loss: Option<LossKind>,
    hidden: Option<usize>,
    weight_decay: Option<f64>,
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Apply `section.key=value`. The value is read as a TOML value, falling
/// back to a bare string.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not of the form section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .filter(|(s, k)| !s.is_empty() && !k.is_empty() && !k.contains('.'))
        .ok_or_else(|| config_err(format!("override key `{path}` must be section.key")))?;
    let value = match toml::from_str::<Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let entry = doc.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(config_err(format!("`{section}` is not a section"))),
    }
}

/// Parse a config document, apply overrides, resolve defaults and validate.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<Config, CliError> {
    let mut doc: Table = toml::from_str(text).map_err(config_err)?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let layout: FileLayout = doc.try_into().map_err(config_err)?;

    let mut data_table = layout.data;
    let mut model_table = Table::new();
    for key in MODEL_KEYS {
        if let Some(v) = data_table.remove(key) {
            model_table.insert(key.to_string(), v);
        }
    }
    let model_keys: ModelKeys = model_table.try_into().map_err(config_err)?;
    let data: DataSpec = data_table.try_into().map_err(|e| config_err(format!("[data]: {e}")))?;
    let default_loss = match data {
        DataSpec::Quadratic(_) => LossKind::Quadratic,
        _ => LossKind::MulticlassLogistic,
    };
    let model = ModelSpec {
        kind: model_keys.loss.unwrap_or(default_loss),
        hidden: model_keys.hidden.unwrap_or(DEFAULT_HIDDEN),
        weight_decay: model_keys.weight_decay,
    };

    let a = layout.algorithm;
    let r = layout.run;
    let run = RunConfig {
        algorithm: AlgorithmConfig {
            kind: a.kind,
            alpha: a.alpha,
            mu_prox: a.mu_prox,
            solver: layout.solver,
        },
        participation: r.participation,
        rounds: r.rounds,
        eval_every: r.eval_every,
        seed: r.seed,
        report_mode: r.report_mode,
        workers: r.workers,
    };
    run.validate(data.num_devices()).map_err(config_err)?;
    Ok(Config {
        experiment: ExperimentConfig { data, model, run },
        name: r.name,
        target_loss: r.target_loss,
        target_accuracy: r.target_accuracy,
        reference_optimum: r.reference_optimum,
    })
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config_str(&text, overrides).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// The fully resolved document; `parse_config_str(&emit(c), &[]) == c`.
pub fn emit(cfg: &Config) -> Result<String, CliError> {
    let e = &cfg.experiment;
    let mut data = Table::try_from(&e.data).map_err(config_err)?;
    data.insert("loss".into(), Value::try_from(e.model.kind).map_err(config_err)?);
    data.insert("hidden".into(), Value::Integer(e.model.hidden as i64));
    if let Some(wd) = e.model.weight_decay {
        data.insert("weight_decay".into(), Value::Float(wd));
    }
    let layout = FileLayout {
        data,
        algorithm: AlgorithmSection {
            kind: e.run.algorithm.kind,
            alpha: e.run.algorithm.alpha,
            mu_prox: e.run.algorithm.mu_prox,
        },
        solver: e.run.algorithm.solver.clone(),
        run: RunSection {
            name: cfg.name.clone(),
            participation: e.run.participation,
            rounds: e.run.rounds,
            eval_every: e.run.eval_every,
            seed: e.run.seed,
            report_mode: e.run.report_mode,
            workers: e.run.workers,
            target_loss: cfg.target_loss,
            target_accuracy: cfg.target_accuracy,
            reference_optimum: cfg.reference_optimum,
        },
    };
    toml::to_string(&layout).map_err(|e| config_err(format!("cannot emit config (seeds must fit in a signed 64-bit integer): {e}")))
}
