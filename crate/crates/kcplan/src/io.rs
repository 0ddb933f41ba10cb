//! File formats: JSON documents, JSON-Lines datasets and the loss CSV.
//!
//! A dataset file starts with one header line
//! `{"kind":"kcplan-dataset","version":1,...}` followed by one record per
//! line. Readers ignore unknown fields so older and newer files both parse.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use kcplan_core::dataset::DatasetRecord;
use kcplan_core::keyconfig::KeyConfigSet;
use kcplan_core::training::StepLoss;
use kcplan_core::ArmModel;

pub const DATASET_KIND: &str = "kcplan-dataset";
pub const DATASET_VERSION: u32 = 1;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush().with_context(|| format!("cannot write {}", path.display()))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub kind: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetHeader {
    pub fn new(level: Option<u8>, seed: Option<u64>) -> Self {
        DatasetHeader {
            kind: DATASET_KIND.to_string(),
            version: DATASET_VERSION,
            level,
            seed,
        }
    }
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, records: &[DatasetRecord]) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .with_context(|| format!("{} is empty", path.display()))?
        .with_context(|| format!("cannot read {}", path.display()))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).with_context(|| format!("{}: bad header line", path.display()))?;
    if header.kind != DATASET_KIND {
        bail!("{}: not a dataset file (kind {:?})", path.display(), header.kind);
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.with_context(|| format!("cannot read {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord =
            serde_json::from_str(&line).with_context(|| format!("{}: bad record on line {}", path.display(), i + 2))?;
        records.push(r);
    }
    Ok((header, records))
}

pub fn read_keys(path: &Path, arm: &ArmModel) -> Result<KeyConfigSet> {
    let mut keys: KeyConfigSet = read_json(path)?;
    keys.refresh_tips(arm)
        .with_context(|| format!("{}: key configurations do not fit the arm", path.display()))?;
    Ok(keys)
}

pub fn write_loss_csv(path: &Path, curve: &[StepLoss]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["step", "epoch", "l_diff", "l_coll", "l_smooth", "total"])?;
    for s in curve {
        w.write_record([
            s.step.to_string(),
            s.epoch.to_string(),
            s.loss.diff.to_string(),
            s.loss.coll.to_string(),
            s.loss.smooth.to_string(),
            s.loss.total.to_string(),
        ])?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
