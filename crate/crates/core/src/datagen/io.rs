//! CSV ingestion and dataset dumps.
//!
//! Ingestion reads header-free `features.csv` (one row per sample, decimal
//! floats) and `labels.csv` (one integer per line). A dump is a directory of
//! `shard_<k>.csv` files whose rows are the sample's features followed by
//! its label, a `test.csv` in the same layout, and `meta.json`.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use super::{FederatedDataset, PartitionMeta};
use crate::error::{FedError, Result};
use crate::losses::DataShard;

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| FedError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_err(path: &Path, detail: impl Into<String>) -> FedError {
    FedError::Parse {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Returns `(row-major values, columns)`.
pub fn read_features_csv(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut values = Vec::new();
    let mut width = None;
    for (line, record) in reader(path)?.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, e.to_string()))?;
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(path, format!("row {} has {} columns, expected {w}", line + 1, record.len())));
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, format!("row {}: '{field}' is not a number", line + 1)))?;
            values.push(v);
        }
    }
    Ok((values, width.unwrap_or(0)))
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (line, record) in reader(path)?.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, e.to_string()))?;
        if record.len() != 1 {
            return Err(parse_err(path, format!("row {} must hold exactly one label", line + 1)));
        }
        let y: usize = record[0]
            .parse()
            .map_err(|_| parse_err(path, format!("row {}: '{}' is not a class index", line + 1, &record[0])))?;
        labels.push(y);
    }
    Ok(labels)
}

/// Load a labeled pool; returns the shard and the class count `max(label) + 1`.
pub fn load_csv_pool(features: &Path, labels: &Path) -> Result<(DataShard, usize)> {
    let (values, width) = read_features_csv(features)?;
    let labels_v = read_labels_csv(labels)?;
    if width == 0 || values.len() / width != labels_v.len() {
        return Err(parse_err(
            labels,
            format!("{} labels for {} feature rows", labels_v.len(), values.len().checked_div(width).unwrap_or(0)),
        ));
    }
    let classes = labels_v.iter().max().map_or(0, |m| m + 1);
    Ok((DataShard::new(values, width, labels_v)?, classes))
}

fn write_shard(path: &Path, shard: &DataShard) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| parse_err(path, e.to_string()))?;
    for i in 0..shard.len() {
        let mut row: Vec<String> = shard.row(i).iter().map(|v| v.to_string()).collect();
        row.push(shard.label(i).to_string());
        w.write_record(&row).map_err(|e| parse_err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| FedError::io(path, e))
}

fn read_shard(path: &Path, num_features: usize) -> Result<DataShard> {
    if fs::metadata(path).map_err(|e| FedError::io(path, e))?.len() == 0 {
        return Ok(DataShard::empty(num_features));
    }
    let (values, width) = read_features_csv(path)?;
    if width != num_features + 1 {
        return Err(parse_err(path, format!("expected {} columns, found {width}", num_features + 1)));
    }
    let mut features = Vec::with_capacity(values.len() / width * num_features);
    let mut labels = Vec::with_capacity(values.len() / width);
    for row in values.chunks(width) {
        features.extend_from_slice(&row[..num_features]);
        let y = row[num_features];
        if y < 0.0 || y.fract() != 0.0 {
            return Err(parse_err(path, format!("label {y} is not a class index")));
        }
        labels.push(y as usize);
    }
    DataShard::new(features, num_features, labels)
}

/// Write shards, the test split and `meta.json` into `dir`.
///
/// `extra` is merged into the manifest (seed, config echo, notes).
pub fn dump_dataset(dir: &Path, data: &FederatedDataset, extra: Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
    for (k, shard) in data.shards.iter().enumerate() {
        write_shard(&dir.join(format!("shard_{k}.csv")), shard)?;
    }
    write_shard(&dir.join("test.csv"), &data.test)?;
    let mut meta = json!({
        "devices": data.num_devices(),
        "features": data.num_features(),
        "classes": data.classes,
        "train_samples": data.total_train(),
        "test_samples": data.test.len(),
        "sizes": data.meta.sizes,
        "histograms": data.meta.histograms,
        "fingerprint": data.fingerprint(),
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut meta, extra) {
        base.extend(more);
    }
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("json value serializes");
    fs::write(&path, text).map_err(|e| FedError::io(&path, e))
}

/// Read back a directory written by [`dump_dataset`].
pub fn load_dataset_dump(dir: &Path) -> Result<FederatedDataset> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| FedError::io(&path, e))?;
    let meta: Value = serde_json::from_str(&text).map_err(|e| parse_err(&path, e.to_string()))?;
    let field = |name: &str| {
        meta[name]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| parse_err(&path, format!("missing '{name}'")))
    };
    let (devices, features, classes) = (field("devices")?, field("features")?, field("classes")?);
    let shards = (0..devices)
        .map(|k| read_shard(&dir.join(format!("shard_{k}.csv")), features))
        .collect::<Result<Vec<_>>>()?;
    let test = read_shard(&dir.join("test.csv"), features)?;
    let data = FederatedDataset {
        meta: PartitionMeta::from_shards(&shards, classes),
        shards,
        test,
        classes,
    };
    Ok(data)
}
