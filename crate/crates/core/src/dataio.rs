//! Dataset ingestion, label schemas, scaffold splits and labeled/unlabeled pool
//! bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chemgraph::{parse_smiles, MoleculeGraph};
use crate::error::{Error, Result};
use crate::fingerprint::{scaffold, ScaffoldKey};
use crate::seeding;

pub const SMILES_COLUMN: &str = "smiles";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    SingleLabelClassification,
    MultiLabelClassification,
    Regression,
}

impl TaskType {
    pub fn is_classification(self) -> bool {
        !matches!(self, TaskType::Regression)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskType::SingleLabelClassification => "single-label-classification",
            TaskType::MultiLabelClassification => "multi-label-classification",
            TaskType::Regression => "regression",
        }
    }

    /// Primary test metric for this task type.
    pub fn metric_name(self) -> &'static str {
        if self.is_classification() {
            "auroc"
        } else {
            "mse"
        }
    }
}

impl std::str::FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-label-classification" | "classification" | "single" => {
                Ok(TaskType::SingleLabelClassification)
            }
            "multi-label-classification" | "multi" => Ok(TaskType::MultiLabelClassification),
            "regression" => Ok(TaskType::Regression),
            other => Err(Error::Config(format!("unknown task type {other:?}"))),
        }
    }
}

/// Task type plus the ordered label columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSchema {
    pub task_type: TaskType,
    pub columns: Vec<String>,
}

impl LabelSchema {
    pub fn new(task_type: TaskType, columns: Vec<String>) -> Result<Self> {
        let n = columns.len();
        let ok = match task_type {
            TaskType::SingleLabelClassification => n == 1,
            TaskType::MultiLabelClassification => n >= 2,
            TaskType::Regression => n >= 1,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{} cannot have {n} label columns",
                task_type.name()
            )));
        }
        Ok(Self { task_type, columns })
    }

    /// Uses every non-SMILES column of `header` as a label.
    pub fn from_header(task_type: TaskType, header: &[String]) -> Result<Self> {
        let columns = header
            .iter()
            .filter(|h| h.as_str() != SMILES_COLUMN)
            .cloned()
            .collect();
        Self::new(task_type, columns)
    }

    pub fn n(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeRecord {
    pub id: usize,
    pub smiles: String,
    pub labels: Vec<f64>,
}

fn parse_label(task: TaskType, raw: &str, row: usize, column: &str) -> Result<f64> {
    let invalid = || Error::InvalidLabel {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    };
    let value: f64 = match raw {
        "true" | "True" => 1.0,
        "false" | "False" => 0.0,
        _ => raw.parse().map_err(|_| invalid())?,
    };
    if !value.is_finite() {
        return Err(invalid());
    }
    if task.is_classification() {
        match value {
            v if v == 0.0 => Ok(0.0),
            v if v == 1.0 => Ok(1.0),
            _ => Err(invalid()),
        }
    } else {
        Ok(value)
    }
}

pub fn read_header(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    Ok(reader.headers()?.iter().map(str::to_string).collect())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::io(path, source),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Reads and validates every row. Rows are numbered from 1 after the header.
pub fn load_csv(path: &Path, schema: &LabelSchema) -> Result<Vec<MoleculeRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column {name:?} not in {}", path.display())))
    };
    let smiles_col = find(SMILES_COLUMN)?;
    let label_cols = schema
        .columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let smiles = row.get(smiles_col).unwrap_or("").to_string();
        parse_smiles(&smiles).map_err(|e| e.at_row(row_no))?;
        let mut labels = Vec::with_capacity(label_cols.len());
        for (&col, name) in label_cols.iter().zip(&schema.columns) {
            let raw = row.get(col).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::MissingLabel {
                    row: row_no,
                    column: name.clone(),
                });
            }
            labels.push(parse_label(schema.task_type, raw, row_no, name)?);
        }
        records.push(MoleculeRecord {
            id: i,
            smiles,
            labels,
        });
    }
    Ok(records)
}

/// Writes records in the same layout [`load_csv`] reads.
pub fn write_csv(path: &Path, schema: &LabelSchema, records: &[MoleculeRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec![SMILES_COLUMN.to_string()];
    header.extend(schema.columns.iter().cloned());
    writer.write_record(&header)?;
    for r in records {
        let mut row = vec![r.smiles.clone()];
        row.extend(r.labels.iter().map(|v| format_label(schema.task_type, *v)));
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn format_label(task: TaskType, v: f64) -> String {
    if task.is_classification() {
        format!("{}", v as u8)
    } else {
        // shortest representation that parses back to the same f64
        format!("{v:?}")
    }
}

/// Records with their parsed graphs and schema.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: LabelSchema,
    pub records: Vec<MoleculeRecord>,
    pub graphs: Vec<MoleculeGraph>,
}

impl Dataset {
    pub fn from_records(schema: LabelSchema, records: Vec<MoleculeRecord>) -> Result<Self> {
        let graphs = records
            .iter()
            .enumerate()
            .map(|(i, r)| parse_smiles(&r.smiles).map_err(|e| e.at_row(i + 1)))
            .collect::<Result<Vec<_>>>()?;
        for r in &records {
            if r.labels.len() != schema.n() {
                return Err(Error::Invalid(format!(
                    "record {} has {} labels, schema has {}",
                    r.id,
                    r.labels.len(),
                    schema.n()
                )));
            }
        }
        Ok(Self {
            schema,
            records,
            graphs,
        })
    }

    pub fn load(path: &Path, schema: &LabelSchema) -> Result<Self> {
        Self::from_records(schema.clone(), load_csv(path, schema)?)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Content hash over schema, SMILES and labels.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.schema).expect("schema serializes"));
        for r in &self.records {
            h.update(r.smiles.as_bytes());
            h.update([0]);
            for v in &r.labels {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn smiles(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.smiles.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn quotas(n: usize, ratios: (f64, f64, f64)) -> (usize, usize) {
    let total = ratios.0 + ratios.1 + ratios.2;
    let train = (n as f64 * ratios.0 / total).round() as usize;
    let val = (n as f64 * ratios.1 / total).round() as usize;
    (train, val.min(n - train))
}

/// Greedy largest-group-first assignment of precomputed keys to folds.
pub fn split_by_keys(keys: &[ScaffoldKey], ratios: (f64, f64, f64)) -> DatasetSplit {
    let mut groups: BTreeMap<&ScaffoldKey, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let mut groups: Vec<(&ScaffoldKey, Vec<usize>)> = groups.into_iter().collect();
    groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(b.0)));
    let (train_quota, val_quota) = quotas(keys.len(), ratios);
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (_, members) in groups {
        let fold = if split.train.len() < train_quota {
            &mut split.train
        } else if split.val.len() < val_quota {
            &mut split.val
        } else {
            &mut split.test
        };
        fold.extend(members);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

pub fn scaffold_split(graphs: &[MoleculeGraph], ratios: (f64, f64, f64)) -> Result<DatasetSplit> {
    if graphs.is_empty() {
        return Err(Error::Invalid("cannot split an empty dataset".into()));
    }
    let keys: Vec<ScaffoldKey> = graphs.iter().map(scaffold).collect();
    Ok(split_by_keys(&keys, ratios))
}

/// Labeled and unlabeled partitions of the training ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled: BTreeSet<usize>,
    pub unlabeled: BTreeSet<usize>,
    pub round: usize,
}

impl PoolState {
    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn labeled_ids(&self) -> Vec<usize> {
        self.labeled.iter().copied().collect()
    }

    pub fn unlabeled_ids(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    /// Every training id in ascending order.
    pub fn all_ids(&self) -> Vec<usize> {
        self.labeled.union(&self.unlabeled).copied().collect()
    }
}

/// Draws `floor(init_fraction * N)` ids uniformly without replacement.
pub fn init_pools(train_ids: &[usize], init_fraction: f64, seed: u64) -> Result<PoolState> {
    if !(init_fraction > 0.0 && init_fraction < 1.0) {
        return Err(Error::Config(format!(
            "initial fraction {init_fraction} not in (0, 1)"
        )));
    }
    let n_init = (init_fraction * train_ids.len() as f64).floor() as usize;
    let mut ids = train_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = seeding::rng(seed);
    ids.shuffle(&mut rng);
    let labeled: BTreeSet<usize> = ids[..n_init].iter().copied().collect();
    let unlabeled: BTreeSet<usize> = ids[n_init..].iter().copied().collect();
    Ok(PoolState {
        labeled,
        unlabeled,
        round: 0,
    })
}

/// Moves an annotated batch from the unlabeled to the labeled pool.
pub fn annotate_and_update(pool: &PoolState, batch: &[usize]) -> Result<PoolState> {
    let mut next = pool.clone();
    for &id in batch {
        if !next.unlabeled.remove(&id) {
            return Err(Error::NotUnlabeled(id));
        }
        next.labeled.insert(id);
    }
    next.round += 1;
    Ok(next)
}

/// Simulated oracle: held labels of the requested ids.
pub fn annotate<'a>(records: &'a [MoleculeRecord], batch: &[usize]) -> Vec<&'a [f64]> {
    batch.iter().map(|&i| records[i].labels.as_slice()).collect()
}

/// Per-round batch size `floor(fraction * N_train)`.
pub fn query_size(n_train: usize, fraction: f64) -> usize {
    (fraction * n_train as f64).floor() as usize
}
