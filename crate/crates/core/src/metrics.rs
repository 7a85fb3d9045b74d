//! Evaluation of the global objective, invariant probes, rate fitting and
//! CSV output.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{DeviceState, ServerState};
use crate::error::{FedError, Result};
use crate::federation::Federation;
use crate::localsolve::{minimize, LocalSolverConfig, MeanObjective, SolveContext};
use crate::losses::LossKind;
use crate::param::ParamVector;

/// `ℓ(θ) = (1/m) Σ_k L_k(θ)`, unweighted.
pub fn global_loss(fed: &Federation, params: &ParamVector) -> Result<f64> {
    let values = fed
        .devices()
        .par_iter()
        .map(|o| o.value(params))
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `(1/m) Σ_k ∇L_k(θ)`, summed in device order.
pub fn mean_gradient(fed: &Federation, params: &ParamVector) -> Result<ParamVector> {
    let grads = fed
        .devices()
        .par_iter()
        .map(|o| o.gradient(params))
        .collect::<Result<Vec<ParamVector>>>()?;
    Ok(ParamVector::mean(grads.iter()).expect("a federation has at least one device"))
}

/// `||∇ℓ(θ)||`.
pub fn stationarity_norm(fed: &Federation, params: &ParamVector) -> Result<f64> {
    Ok(mean_gradient(fed, params)?.norm())
}

/// Loss, test accuracy and stationarity of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub stationarity_norm: f64,
}

/// Evaluate loss and gradient in one pass per device.
pub fn evaluate_model(fed: &Federation, params: &ParamVector) -> Result<ModelMetrics> {
    let parts = fed
        .devices()
        .par_iter()
        .map(|o| o.model.loss_and_gradient(params, &o.shard))
        .collect::<Result<Vec<(f64, ParamVector)>>>()?;
    let m = parts.len() as f64;
    let train_loss = parts.iter().map(|(v, _)| v).sum::<f64>() / m;
    let grad = ParamVector::mean(parts.iter().map(|(_, g)| g)).expect("nonempty federation");
    Ok(ModelMetrics {
        train_loss,
        test_accuracy: fed.reference_model().accuracy(params, fed.test())?,
        stationarity_norm: grad.norm(),
    })
}

/// `ℓ* = min ℓ`: closed form for quadratic federations, otherwise long
/// full-gradient descent on the global objective (`None` for the
/// perceptron, whose loss is nonconvex).
pub fn reference_optimum(fed: &Federation, tol: f64, max_iters: usize) -> Result<Option<(ParamVector, f64)>> {
    if let Some(opt) = fed.quadratic_optimum() {
        return Ok(Some((opt.theta, opt.loss)));
    }
    if fed.reference_model().kind() == LossKind::TwoLayerMlp {
        return Ok(None);
    }
    let objective = MeanObjective(fed);
    let ctx = SolveContext {
        seed: 0,
        round: 0,
        device: 0,
    };
    let theta = minimize(&objective, &ParamVector::zeros(fed.dim()), &LocalSolverConfig::full_gd(tol, max_iters), &ctx)?.theta;
    let loss = global_loss(fed, &theta)?;
    Ok(Some((theta, loss)))
}

/// `max_i |h_i - (1/m) Σ_k grad_cache_k,i|`; zero along exact FedDyn runs.
pub fn verify_h_invariant(server: &ServerState, devices: &[DeviceState]) -> f64 {
    max_deviation(&server.h, devices.iter().map(|d| &d.grad_cache))
}

/// The same identity for the one-step variant, where `h_k` plays the role of
/// the cached gradient.
pub fn verify_onestep_h_invariant(server: &ServerState, devices: &[DeviceState]) -> f64 {
    max_deviation(&server.h, devices.iter().map(|d| &d.h_k))
}

fn max_deviation<'a>(h: &ParamVector, parts: impl Iterator<Item = &'a ParamVector>) -> f64 {
    match ParamVector::mean(parts) {
        Some(mean) => h.max_abs_diff(&mean),
        None => h.iter().fold(0.0, |acc, v| acc.max(v.abs())),
    }
}

/// `max_k max_i |grad_cache_k - ∇L_k(θ_k)|` over devices that have been
/// active at least once.
pub fn verify_gradient_recursion(fed: &Federation, devices: &[DeviceState]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (obj, dev) in fed.devices().iter().zip(devices) {
        if dev.last_active_round > 0 {
            worst = worst.max(dev.grad_cache.max_abs_diff(&obj.gradient(&dev.theta_k)?));
        }
    }
    Ok(worst)
}

/// Least-squares fit of `log(excess_t) ≈ a + t log(r)`; returns `r`.
///
/// Points are taken in order and the fit stops at the first non-positive
/// excess (converged below resolution). `None` when fewer than two usable
/// points remain.
pub fn fit_contraction(points: &[(f64, f64)]) -> Option<f64> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .take_while(|(_, e)| *e > 0.0 && e.is_finite())
        .map(|&(t, e)| (t, e.ln()))
        .collect();
    if usable.len() < 2 {
        return None;
    }
    let n = usable.len() as f64;
    let mean_t = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    (sxx > 0.0).then(|| (sxy / sxx).exp())
}

/// Per-round contraction of `ℓ(γ^t) - ℓ*` over records with
/// `first <= round <= last`.
pub fn empirical_rate(records: &[RoundRecord], l_star: f64, first: usize, last: usize) -> Option<f64> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.round >= first && r.round <= last)
        .filter_map(|r| r.gamma_train_loss.map(|l| (r.round as f64, l - l_star)))
        .collect();
    fit_contraction(&points)
}

/// One evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: usize,
    /// Cost in rounds of FedAvg at the configured participation.
    pub cumulative_comm_units: f64,
    /// Models sent by devices so far (control variates count as models).
    pub models_transmitted: f64,
    /// `ℓ(γ^t)` with `γ^t` the mean of this round's active device models.
    pub gamma_train_loss: Option<f64>,
    pub server: Option<ModelMetrics>,
    pub device_average: Option<ModelMetrics>,
}

impl RoundRecord {
    /// The server model's metrics, or the device average when the server
    /// model was not evaluated.
    pub fn primary(&self) -> &ModelMetrics {
        self.server
            .as_ref()
            .or(self.device_average.as_ref())
            .expect("every record evaluates at least one model")
    }
}

pub const ROUNDS_HEADER: [&str; 11] = [
    "round",
    "participants",
    "cumulative_comm_units",
    "models_transmitted",
    "gamma_train_loss",
    "server_train_loss",
    "server_test_accuracy",
    "server_stationarity_norm",
    "avg_train_loss",
    "avg_test_accuracy",
    "avg_stationarity_norm",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn record_row(r: &RoundRecord) -> Vec<String> {
    let side = |m: &Option<ModelMetrics>| -> [String; 3] {
        match m {
            Some(m) => [m.train_loss.to_string(), opt(m.test_accuracy), m.stationarity_norm.to_string()],
            None => Default::default(),
        }
    };
    let mut row = vec![
        r.round.to_string(),
        r.participants.to_string(),
        r.cumulative_comm_units.to_string(),
        r.models_transmitted.to_string(),
        opt(r.gamma_train_loss),
    ];
    row.extend(side(&r.server));
    row.extend(side(&r.device_average));
    row
}

/// Receives records as they are produced.
pub trait RecordSink {
    fn record(&mut self, record: &RoundRecord) -> Result<()>;
}

impl RecordSink for Vec<RoundRecord> {
    fn record(&mut self, record: &RoundRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Streams `rounds.csv`, flushing after every row so a failed run leaves
/// every completed record on disk.
pub struct CsvRecordSink {
    path: String,
    writer: csv::Writer<std::fs::File>,
}

impl CsvRecordSink {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path_ref = path.as_ref();
        let file = std::fs::File::create(path_ref).map_err(|e| FedError::io(path_ref, e))?;
        let mut sink = CsvRecordSink {
            path: path_ref.display().to_string(),
            writer: csv::Writer::from_writer(file),
        };
        sink.write_row(ROUNDS_HEADER.iter().map(|s| s.to_string()).collect())?;
        Ok(sink)
    }

    fn write_row(&mut self, row: Vec<String>) -> Result<()> {
        let path = self.path.clone();
        self.writer.write_record(&row).map_err(|e| csv_error(&path, e))?;
        self.writer.flush().map_err(|e| FedError::io(&path, e))
    }
}

impl RecordSink for CsvRecordSink {
    fn record(&mut self, record: &RoundRecord) -> Result<()> {
        self.write_row(record_row(record))
    }
}

fn csv_error(path: &str, e: csv::Error) -> FedError {
    FedError::Parse {
        path: path.to_string(),
        detail: e.to_string(),
    }
}

pub fn write_rounds_csv(path: impl AsRef<Path>, records: &[RoundRecord]) -> Result<()> {
    let mut sink = CsvRecordSink::create(path)?;
    records.iter().try_for_each(|r| sink.record(r))
}

/// Read back a file written by [`write_rounds_csv`] or [`CsvRecordSink`].
pub fn read_rounds_csv(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => FedError::io(path, io),
        other => FedError::Parse {
            path: p.clone(),
            detail: format!("{other:?}"),
        },
    })?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_error(&p, e))?.iter().map(str::to_string).collect();
    if header != ROUNDS_HEADER {
        return Err(FedError::Parse {
            path: p,
            detail: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(&p, e))?;
        let bad = |field: &str| FedError::Parse {
            path: p.clone(),
            detail: format!("row {}: bad {field}", line + 2),
        };
        let num = |i: usize| -> Result<Option<f64>> {
            match &row[i] {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(ROUNDS_HEADER[i])),
            }
        };
        let count = |i: usize| -> Result<usize> { row[i].parse().map_err(|_| bad(ROUNDS_HEADER[i])) };
        let side = |i: usize| -> Result<Option<ModelMetrics>> {
            Ok(match (num(i)?, num(i + 2)?) {
                (Some(train_loss), Some(stationarity_norm)) => Some(ModelMetrics {
                    train_loss,
                    test_accuracy: num(i + 1)?,
                    stationarity_norm,
                }),
                _ => None,
            })
        };
        out.push(RoundRecord {
            round: count(0)?,
            participants: count(1)?,
            cumulative_comm_units: num(2)?.ok_or_else(|| bad(ROUNDS_HEADER[2]))?,
            models_transmitted: num(3)?.ok_or_else(|| bad(ROUNDS_HEADER[3]))?,
            gamma_train_loss: num(4)?,
            server: side(5)?,
            device_average: side(8)?,
        });
    }
    Ok(out)
}

/// Communication spent to reach a target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "units", rename_all = "snake_case")]
pub enum CommCost {
    Reached(f64),
    /// Target never met; carries the units spent by the end of the run.
    NotReached(f64),
}

impl CommCost {
    pub fn units(self) -> f64 {
        match self {
            CommCost::Reached(u) | CommCost::NotReached(u) => u,
        }
    }

    pub fn reached(self) -> bool {
        matches!(self, CommCost::Reached(_))
    }
}

impl std::fmt::Display for CommCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommCost::Reached(u) => write!(f, "{u}"),
            CommCost::NotReached(u) => write!(f, "{u}+"),
        }
    }
}

/// Units at the first record satisfying `hit`.
pub fn cost_to_reach(records: &[RoundRecord], hit: impl Fn(&RoundRecord) -> bool) -> CommCost {
    match records.iter().find(|r| hit(r)) {
        Some(r) => CommCost::Reached(r.cumulative_comm_units),
        None => CommCost::NotReached(records.last().map_or(0.0, |r| r.cumulative_comm_units)),
    }
}

/// Units until the primary model's test accuracy reaches `target`.
pub fn rounds_to_target(records: &[RoundRecord], target_accuracy: f64) -> CommCost {
    cost_to_reach(records, |r| r.primary().test_accuracy.is_some_and(|a| a >= target_accuracy))
}

/// Units until the primary model's training loss drops to `target`.
pub fn rounds_to_target_loss(records: &[RoundRecord], target_loss: f64) -> CommCost {
    cost_to_reach(records, |r| r.primary().train_loss <= target_loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub setting: String,
    pub target: f64,
    pub cost: CommCost,
    /// `competitor / reference`; a lower bound when the competitor missed
    /// the target.
    pub savings_ratio: Option<f64>,
    pub ratio_is_lower_bound: bool,
}

impl SummaryRow {
    pub fn ratio_label(&self) -> String {
        match self.savings_ratio {
            Some(r) if self.ratio_is_lower_bound => format!(">{r:.1}x"),
            Some(r) => format!("{r:.1}x"),
            None => String::new(),
        }
    }
}

/// Communication table in the "units to target (savings vs reference)"
/// layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    /// Add one setting: `entries` are `(algorithm, cost)` and `reference`
    /// names the algorithm the ratios are taken against.
    pub fn add_setting(&mut self, setting: &str, target: f64, entries: &[(String, CommCost)], reference: &str) {
        let base = entries.iter().find(|(a, _)| a == reference).map(|(_, c)| *c);
        for (algorithm, cost) in entries {
            let (savings_ratio, ratio_is_lower_bound) = match base {
                Some(CommCost::Reached(b)) if algorithm != reference && b > 0.0 => {
                    (Some(cost.units() / b), !cost.reached())
                }
                _ => (None, false),
            };
            self.rows.push(SummaryRow {
                algorithm: algorithm.clone(),
                setting: setting.to_string(),
                target,
                cost: *cost,
                savings_ratio,
                ratio_is_lower_bound,
            });
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let p = path.display().to_string();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(&p, e))?;
        w.write_record(["algorithm", "setting", "target", "comm_units", "reached", "savings_ratio", "ratio_label"])
            .map_err(|e| csv_error(&p, e))?;
        for r in &self.rows {
            w.write_record([
                r.algorithm.clone(),
                r.setting.clone(),
                r.target.to_string(),
                r.cost.units().to_string(),
                r.cost.reached().to_string(),
                opt(r.savings_ratio),
                r.ratio_label(),
            ])
            .map_err(|e| csv_error(&p, e))?;
        }
        w.flush().map_err(|e| FedError::io(path, e))
    }

    /// Plain-text rendering, one row per line.
    pub fn render(&self) -> String {
        let mut out = Vec::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:<16} {:>10} {:>8}",
                r.setting,
                r.algorithm,
                r.cost.to_string(),
                r.ratio_label()
            );
        }
        String::from_utf8(out).expect("ascii table")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, HeterogeneityMode, SyntheticConfig};
    use crate::losses::{DataShard, LogisticModel, LossModel, QuadraticLoss};
    use nalgebra::DMatrix;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    fn scalar_fed(pairs: &[(f64, f64)]) -> Federation {
        Federation::from_quadratics(
            pairs
                .iter()
                .map(|&(c, s)| QuadraticLoss::isotropic(pv(&[c]), s).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn global_loss_examples() {
        let two = scalar_fed(&[(1.0, 1.0), (-1.0, 1.0)]);
        assert_eq!(global_loss(&two, &pv(&[0.0])).unwrap(), 0.5);
        let one = scalar_fed(&[(2.0, 3.0)]);
        let theta = pv(&[0.5]);
        assert_eq!(global_loss(&one, &theta).unwrap(), one.device(0).value(&theta).unwrap());
    }

    #[test]
    fn global_loss_matches_pooled_on_balanced_shards() {
        let data = generate_synthetic(&SyntheticConfig::standard(HeterogeneityMode::Type2, 3)).unwrap();
        let model = LossModel::Logistic(LogisticModel::new(30, 5, 1e-4));
        let fed = Federation::from_dataset(model.clone(), &data).unwrap();
        let theta = ParamVector::from_vec((0..model.dim()).map(|i| ((i % 7) as f64 - 3.0) * 0.05).collect());
        let pooled = DataShard::concat(30, &data.shards);
        let direct = model.loss_value(&theta, &pooled).unwrap();
        assert!((global_loss(&fed, &theta).unwrap() - direct).abs() < 1e-12);

        let mut expected = ParamVector::zeros(model.dim());
        for shard in &data.shards {
            expected.axpy(1.0 / 20.0, &model.loss_gradient(&theta, shard).unwrap());
        }
        assert!((stationarity_norm(&fed, &theta).unwrap() - expected.norm()).abs() < 1e-12);
    }

    #[test]
    fn stationarity_separates_global_and_average_minimizers() {
        let fed = scalar_fed(&[(1.0, 1.0), (-1.0, 2.0)]);
        let opt = fed.quadratic_optimum().unwrap();
        // (S1 + S2)^-1 (S1 c1 + S2 c2) = (1 - 2) / 3
        assert!((opt.theta[0] + 1.0 / 3.0).abs() < 1e-15);
        assert!(stationarity_norm(&fed, &opt.theta).unwrap() <= 1e-12);
        // at the mean of local minimizers: 0.5 * ((0 - 1) + 2 (0 + 1)) = 0.5
        assert!((stationarity_norm(&fed, &pv(&[0.0])).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reference_optimum_is_stationary() {
        let data = generate_synthetic(&SyntheticConfig {
            devices: 4,
            avg_samples: 50,
            ..SyntheticConfig::standard(HeterogeneityMode::Type1, 8)
        })
        .unwrap();
        let fed = Federation::from_dataset(LossModel::Logistic(LogisticModel::new(30, 5, 1e-2)), &data).unwrap();
        let (theta, loss) = reference_optimum(&fed, 1e-10, 200_000).unwrap().unwrap();
        assert!(stationarity_norm(&fed, &theta).unwrap() <= 1e-10);
        assert!(loss <= global_loss(&fed, &ParamVector::zeros(fed.dim())).unwrap());

        let quad = Federation::from_quadratics(vec![
            QuadraticLoss::isotropic(pv(&[1.0]), 1.0).unwrap(),
            QuadraticLoss::isotropic(pv(&[-1.0]), 2.0).unwrap(),
        ])
        .unwrap();
        let (theta, _) = reference_optimum(&quad, 1e-12, 10).unwrap().unwrap();
        assert!((theta[0] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn h_invariant_zero_at_start() {
        let theta = ParamVector::zeros(4);
        let server = ServerState::new(theta.clone());
        let devices = vec![DeviceState::new(&theta); 3];
        assert_eq!(verify_h_invariant(&server, &devices), 0.0);
        assert_eq!(verify_onestep_h_invariant(&server, &devices), 0.0);
    }

    #[test]
    fn contraction_fit_recovers_geometric_decay() {
        let pts: Vec<(f64, f64)> = (0..30).map(|t| (t as f64, 3.0 * 0.8f64.powi(t))).collect();
        assert!((fit_contraction(&pts).unwrap() - 0.8).abs() < 1e-12);
        let mut truncated = pts.clone();
        truncated[10].1 = 0.0;
        truncated[11].1 = 1e9;
        assert!((fit_contraction(&truncated).unwrap() - 0.8).abs() < 1e-12);
        assert!(fit_contraction(&pts[..1]).is_none());
    }

    #[test]
    fn plateau_fits_to_one() {
        let pts: Vec<(f64, f64)> = (0..20).map(|t| (t as f64, 0.25)).collect();
        assert!((fit_contraction(&pts).unwrap() - 1.0).abs() < 1e-12);
    }

    fn record(round: usize, units: f64, acc: f64, loss: f64) -> RoundRecord {
        RoundRecord {
            round,
            participants: 2,
            cumulative_comm_units: units,
            models_transmitted: units * 2.0,
            gamma_train_loss: None,
            server: Some(ModelMetrics {
                train_loss: loss,
                test_accuracy: Some(acc),
                stationarity_norm: 0.0,
            }),
            device_average: None,
        }
    }

    #[test]
    fn target_costs() {
        let recs = vec![record(0, 0.0, 0.3, 2.0), record(1, 1.0, 0.5, 1.0), record(2, 2.0, 0.7, 0.5)];
        assert_eq!(rounds_to_target(&recs, 0.2), CommCost::Reached(0.0));
        assert_eq!(rounds_to_target(&recs, 0.6), CommCost::Reached(2.0));
        assert_eq!(rounds_to_target(&recs, 1.1), CommCost::NotReached(2.0));
        assert_eq!(rounds_to_target_loss(&recs, 1.0), CommCost::Reached(1.0));
        assert_eq!(CommCost::NotReached(2.0).to_string(), "2+");
    }

    #[test]
    fn summary_ratios() {
        let mut table = SummaryTable::default();
        let entries = vec![
            ("feddyn".to_string(), CommCost::Reached(34.0)),
            ("scaffold".to_string(), CommCost::Reached(260.0)),
            ("fedavg".to_string(), CommCost::NotReached(1000.0)),
        ];
        table.add_setting("type3", 0.5, &entries, "feddyn");
        let row = |a: &str| table.rows.iter().find(|r| r.algorithm == a).unwrap().clone();
        assert_eq!(row("feddyn").savings_ratio, None);
        let sc = row("scaffold");
        assert!((sc.savings_ratio.unwrap() * 34.0 - 260.0).abs() <= 0.5);
        assert_eq!(sc.ratio_label(), "7.6x");
        let avg = row("fedavg");
        assert!(avg.ratio_is_lower_bound);
        assert!(avg.ratio_label().starts_with('>'));
        assert!(table.render().contains("1000+"));
    }

    #[test]
    fn rounds_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        let mut r = record(3, 1.5, 0.1 + 0.2, 1.0 / 3.0);
        r.gamma_train_loss = Some(0.25);
        write_rounds_csv(&path, &[r]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), ROUNDS_HEADER.join(","));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), ROUNDS_HEADER.len());
        assert_eq!(row[5].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(row[6].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert_eq!(row[8], "");
    }

    #[test]
    fn rounds_csv_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        let mut a = record(0, 0.0, 1.0 / 7.0, 2.5);
        a.device_average = a.server;
        let mut b = record(4, 8.0, 0.3, 1e-17);
        b.gamma_train_loss = Some(std::f64::consts::PI);
        write_rounds_csv(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_rounds_csv(&path).unwrap(), vec![a, b]);

        std::fs::write(&path, "round,oops\n").unwrap();
        assert!(matches!(read_rounds_csv(&path), Err(FedError::Parse { .. })));
        assert!(matches!(read_rounds_csv(dir.path().join("missing.csv")), Err(FedError::Io { .. })));
    }

    #[test]
    fn gradient_recursion_probe_skips_stale_devices() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let fed = Federation::from_quadratics(vec![QuadraticLoss::new(pv(&[1.0, 1.0]), s, 0.0).unwrap()]).unwrap();
        let mut dev = DeviceState::new(&pv(&[3.0, 3.0]));
        assert_eq!(verify_gradient_recursion(&fed, std::slice::from_ref(&dev)).unwrap(), 0.0);
        dev.last_active_round = 1;
        dev.grad_cache = fed.device(0).gradient(&dev.theta_k).unwrap();
        assert_eq!(verify_gradient_recursion(&fed, &[dev]).unwrap(), 0.0);
    }
}
