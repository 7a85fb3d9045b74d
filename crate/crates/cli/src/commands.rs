use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use fedsim_core::algorithms::{AlgorithmKind, DeviceState, ServerState};
use fedsim_core::datagen::{dump_dataset, load_dataset_dump};
use fedsim_core::federation::Federation;
use fedsim_core::localsolve::SolverMethod;
use fedsim_core::metrics::{
    global_loss, read_rounds_csv, rounds_to_target, rounds_to_target_loss, verify_gradient_recursion,
    verify_h_invariant, verify_onestep_h_invariant, CsvRecordSink, RecordSink, RoundRecord,
};
use fedsim_core::simulator::{build_federation, DataSpec, Simulation};
use fedsim_core::Result as CoreResult;

use crate::config::{parse_config_str, Config};
use crate::error::{io_err, CliError};
use crate::manifest::{compute_oracle, data_seed, read_json, write_json, RunManifest, RunStatus};

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "FEDSIM_OUT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from)
}

/// `[run] name`, else the config file stem, else `run`.
pub fn run_name(cfg: &Config, config_path: Option<&Path>) -> String {
    cfg.name
        .clone()
        .or_else(|| config_path.and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "run".into())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Final states written next to `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub server: ServerState,
    pub devices: Vec<DeviceState>,
}

/// One row of a run's `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub algorithm: String,
    pub rounds: usize,
    pub comm_units: f64,
    pub final_train_loss: f64,
    pub final_test_accuracy: Option<f64>,
    pub best_test_accuracy: Option<f64>,
    pub final_stationarity_norm: f64,
    /// Only when the reference computation converged.
    pub l_star: Option<f64>,
    pub excess_loss: Option<f64>,
    pub target_loss: Option<f64>,
    pub comm_to_target_loss: Option<String>,
    pub target_accuracy: Option<f64>,
    pub comm_to_target_accuracy: Option<String>,
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

struct Tee<'a> {
    csv: CsvRecordSink,
    records: &'a mut Vec<RoundRecord>,
}

impl RecordSink for Tee<'_> {
    fn record(&mut self, record: &RoundRecord) -> CoreResult<()> {
        self.csv.record(record)?;
        self.records.push(record.clone());
        Ok(())
    }
}

fn summarize(name: &str, cfg: &Config, records: &[RoundRecord], l_star: Option<f64>) -> RunSummary {
    let last = records.last().expect("the initial state is always recorded");
    let primary = last.primary();
    RunSummary {
        name: name.to_string(),
        algorithm: cfg.experiment.run.algorithm.kind.name().to_string(),
        rounds: last.round,
        comm_units: last.cumulative_comm_units,
        final_train_loss: primary.train_loss,
        final_test_accuracy: primary.test_accuracy,
        best_test_accuracy: records.iter().filter_map(|r| r.primary().test_accuracy).reduce(f64::max),
        final_stationarity_norm: primary.stationarity_norm,
        l_star,
        excess_loss: l_star.map(|l| primary.train_loss - l),
        target_loss: cfg.target_loss,
        comm_to_target_loss: cfg.target_loss.map(|t| rounds_to_target_loss(records, t).to_string()),
        target_accuracy: cfg.target_accuracy,
        comm_to_target_accuracy: cfg.target_accuracy.map(|t| rounds_to_target(records, t).to_string()),
    }
}

/// Run one experiment into `dir`:
/// `manifest.json`, `rounds.csv`, `summary.csv`, `state.json`, `shards/`.
///
/// The manifest is written before the first round and updated at the end,
/// so a failed run still documents itself.
pub fn execute_run(cfg: &Config, name: &str, dir: &Path, overrides: &[String]) -> Result<RunSummary, CliError> {
    create_dir(dir)?;
    let e = &cfg.experiment;
    let (fed, dataset) = build_federation(&e.data, &e.model)?;
    let dataset_fingerprint = match &dataset {
        Some(d) => {
            dump_dataset(&dir.join("shards"), d, json!({ "seed": data_seed(&e.data), "source": source_name(&e.data) }))?;
            Some(d.fingerprint())
        }
        None => None,
    };
    let oracle = if cfg.reference_optimum { compute_oracle(&fed)? } else { None };
    let l_star = oracle.as_ref().filter(|o| o.converged).map(|o| o.l_star);
    let mut manifest = RunManifest::new(name, cfg, overrides, &fed, dataset_fingerprint, oracle)?;
    manifest.write(dir)?;

    let mut records = Vec::new();
    let outcome = (|| -> CoreResult<FinalState> {
        let mut sim = Simulation::new(&fed, &e.run)?;
        let mut sink = Tee {
            csv: CsvRecordSink::create(dir.join("rounds.csv"))?,
            records: &mut records,
        };
        sim.run(&mut sink)?;
        Ok(FinalState {
            server: sim.server().clone(),
            devices: sim.devices().to_vec(),
        })
    })();
    match outcome {
        Ok(state) => {
            write_json(&dir.join("state.json"), &state)?;
            let summary = summarize(name, cfg, &records, l_star);
            write_csv_rows(&dir.join("summary.csv"), std::slice::from_ref(&summary))?;
            manifest.status = RunStatus::Completed;
            manifest.write(dir)?;
            Ok(summary)
        }
        Err(err) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(err.to_string());
            manifest.write(dir)?;
            Err(err.into())
        }
    }
}

fn source_name(data: &DataSpec) -> &'static str {
    match data {
        DataSpec::Synthetic(_) => "synthetic",
        DataSpec::Csv(_) => "csv",
        DataSpec::Quadratic(_) => "quadratic",
    }
}

/// Sweepable parameters and the config key each one sets.
pub const SWEEP_PARAMS: [(&str, &str); 5] = [
    ("alpha", "algorithm.alpha"),
    ("participation", "run.participation"),
    ("dirichlet_prior", "data.dirichlet_prior"),
    ("mu_prox", "algorithm.mu_prox"),
    ("lr", "solver.lr"),
];

/// One row of a sweep's `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub status: String,
    pub error: Option<String>,
    pub best_test_accuracy: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_stationarity_norm: Option<f64>,
    pub comm_units: Option<f64>,
    /// Highest best accuracy, or lowest final loss when no accuracy exists.
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub name: String,
    pub version: String,
    pub parameter: String,
    pub values: Vec<f64>,
    pub base_config: String,
    pub overrides: Vec<String>,
    pub children: Vec<String>,
}

/// One run per value under `dir/<parameter>-<value>/`, plus a comparison
/// `summary.csv`. Child failures are recorded and the sweep goes on; the
/// sweep fails only when every child does.
pub fn execute_sweep(
    base_text: &str,
    overrides: &[String],
    parameter: &str,
    values: &[f64],
    name: &str,
    dir: &Path,
) -> Result<Vec<SweepRow>, CliError> {
    let key = SWEEP_PARAMS
        .iter()
        .find(|(p, _)| *p == parameter)
        .map(|(_, k)| *k)
        .ok_or_else(|| {
            let names: Vec<&str> = SWEEP_PARAMS.iter().map(|p| p.0).collect();
            CliError::Config(format!("cannot sweep `{parameter}`; expected one of {}", names.join(", ")))
        })?;
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let base = parse_config_str(base_text, overrides)?;
    create_dir(dir)?;

    let mut rows = Vec::new();
    let mut children = Vec::new();
    let mut first_error = None;
    for &value in values {
        let child_name = format!("{parameter}-{value}");
        let mut child_overrides = overrides.to_vec();
        child_overrides.push(format!("{key}={value:?}"));
        let result = parse_config_str(base_text, &child_overrides)
            .and_then(|cfg| execute_run(&cfg, &format!("{name}/{child_name}"), &dir.join(&child_name), &child_overrides));
        let row = match result {
            Ok(s) => SweepRow {
                parameter: parameter.to_string(),
                value,
                status: "ok".into(),
                error: None,
                best_test_accuracy: s.best_test_accuracy,
                final_train_loss: Some(s.final_train_loss),
                final_stationarity_norm: Some(s.final_stationarity_norm),
                comm_units: Some(s.comm_units),
                best: false,
            },
            Err(err) => {
                eprintln!("{child_name}: {err}");
                let row = SweepRow {
                    parameter: parameter.to_string(),
                    value,
                    status: "error".into(),
                    error: Some(err.to_string()),
                    best_test_accuracy: None,
                    final_train_loss: None,
                    final_stationarity_norm: None,
                    comm_units: None,
                    best: false,
                };
                first_error.get_or_insert(err);
                row
            }
        };
        rows.push(row);
        children.push(child_name);
    }
    mark_best(&mut rows);
    write_csv_rows(&dir.join("summary.csv"), &rows)?;
    SweepManifest {
        name: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        parameter: parameter.to_string(),
        values: values.to_vec(),
        base_config: crate::config::emit(&base)?,
        overrides: overrides.to_vec(),
        children,
    }
    .write(dir)?;
    match first_error {
        Some(err) if rows.iter().all(|r| r.status != "ok") => Err(err),
        _ => Ok(rows),
    }
}

impl SweepManifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join("manifest.json"), self)
    }
}

fn mark_best(rows: &mut [SweepRow]) {
    let by_accuracy = rows.iter().any(|r| r.best_test_accuracy.is_some());
    let score = |r: &SweepRow| -> Option<f64> {
        if by_accuracy {
            r.best_test_accuracy
        } else {
            r.final_train_loss.map(|l| -l)
        }
    };
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| score(r).filter(|s| !s.is_nan()).map(|s| (i, s)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    if let Some(i) = best {
        rows[i].best = true;
    }
}

/// Write the config's dataset to `dir/shards/` with a manifest.
pub fn execute_gen_data(cfg: &Config, name: &str, dir: &Path, overrides: &[String]) -> Result<PathBuf, CliError> {
    let e = &cfg.experiment;
    if matches!(e.data, DataSpec::Quadratic(_)) {
        return Err(CliError::Config("the quadratic source has no data to generate".into()));
    }
    create_dir(dir)?;
    let (fed, dataset) = build_federation(&e.data, &e.model)?;
    let dataset = dataset.expect("data-backed source");
    let shards = dir.join("shards");
    dump_dataset(&shards, &dataset, json!({ "seed": data_seed(&e.data), "source": source_name(&e.data) }))?;
    let mut manifest = RunManifest::new(name, cfg, overrides, &fed, Some(dataset.fingerprint()), None)?;
    manifest.status = RunStatus::DataOnly;
    manifest.write(dir)?;
    Ok(shards)
}

/// Outcome of one probe run by `verify`.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl Probe {
    fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Probe {
            name: name.to_string(),
            value,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

fn flag(ok: bool) -> f64 {
    if ok {
        0.0
    } else {
        1.0
    }
}

fn rebuild(dir: &Path, cfg: &Config) -> Result<Federation, CliError> {
    let e = &cfg.experiment;
    let shards = dir.join("shards");
    if shards.join("meta.json").exists() {
        let data = load_dataset_dump(&shards)?;
        let model = e.model.build(data.num_features(), data.classes)?;
        Ok(Federation::from_dataset(model, &data)?)
    } else {
        Ok(build_federation(&e.data, &e.model)?.0)
    }
}

/// Re-check a finished run directory: fingerprint, record consistency and
/// the algorithm's state invariants. Probes report `0`/`1` for pass/fail
/// checks and a deviation otherwise.
pub fn verify_run(dir: &Path) -> Result<Vec<Probe>, CliError> {
    let manifest = RunManifest::read(dir)?;
    if manifest.status != RunStatus::Completed {
        return Err(CliError::Verify(format!("run status is {:?}, not completed", manifest.status)));
    }
    let cfg = parse_config_str(&manifest.config, &[])?;
    let run = &cfg.experiment.run;
    let fed = rebuild(dir, &cfg)?;
    let state: FinalState = read_json(&dir.join("state.json"))?;
    let records = read_rounds_csv(dir.join("rounds.csv"))?;

    let mut probes = vec![Probe::new("fingerprint matches manifest", flag(fed.fingerprint() == manifest.fingerprint), 0.0)];

    let factor = run.algorithm.comm_units_per_round();
    let p = manifest.participants_per_round as f64;
    let rounds_ok = records.first().is_some_and(|r| r.round == 0 && r.cumulative_comm_units == 0.0)
        && records.windows(2).all(|w| w[1].round > w[0].round && w[1].cumulative_comm_units >= w[0].cumulative_comm_units)
        && records.last().is_some_and(|r| r.round == run.rounds && r.round == state.server.round);
    probes.push(Probe::new("rounds recorded in order up to the last round", flag(rounds_ok), 0.0));
    let accounting_ok = records.iter().all(|r| {
        r.cumulative_comm_units == factor * r.round as f64 && r.models_transmitted == factor * p * r.round as f64
    });
    probes.push(Probe::new("communication units match the participation schedule", flag(accounting_ok), 0.0));

    let finite = state.server.theta.is_finite()
        && state.server.h.is_finite()
        && state.devices.iter().all(|d| d.theta_k.is_finite() && d.grad_cache.is_finite() && d.h_k.is_finite());
    probes.push(Probe::new("final states are finite", flag(finite), 0.0));

    if let Some(server) = records.last().and_then(|r| r.server.as_ref()) {
        let loss = global_loss(&fed, &state.server.theta)?;
        probes.push(Probe::new(
            "final server loss reproduces",
            (loss - server.train_loss).abs(),
            1e-12 * server.train_loss.abs().max(1.0),
        ));
    }

    let scale = |v: f64| 1e-9 * v.max(1.0);
    let h_scale = state.server.h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    match run.algorithm.kind {
        AlgorithmKind::FedDyn => {
            probes.push(Probe::new(
                "h equals the mean cached gradient",
                verify_h_invariant(&state.server, &state.devices),
                scale(h_scale),
            ));
            if run.algorithm.solver.method == SolverMethod::ClosedFormQuadratic {
                let g_scale = state.devices.iter().flat_map(|d| d.grad_cache.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
                probes.push(Probe::new(
                    "cached gradients equal the local gradients",
                    verify_gradient_recursion(&fed, &state.devices)?,
                    scale(g_scale),
                ));
            }
        }
        AlgorithmKind::FedDynOneStep => probes.push(Probe::new(
            "h equals the mean device state",
            verify_onestep_h_invariant(&state.server, &state.devices),
            scale(h_scale),
        )),
        AlgorithmKind::Scaffold => probes.push(Probe::new(
            "server control equals the mean device control",
            verify_onestep_h_invariant(&state.server, &state.devices),
            scale(h_scale),
        )),
        AlgorithmKind::FedAvg | AlgorithmKind::FedProx => {}
    }
    Ok(probes)
}
