//! Load leaf-level records from CSV files into panels.
//!
//! Data file: UTF-8 CSV, first row a header naming the timestamp column,
//! one column per dimension and one per fundamental metric; one row per
//! (timestamp, leaf). Manifest: a `key = value` text file describing the
//! dataset (see [`DatasetManifest`]).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::panel::MetricPanel;
use crate::schema::{AggFn, DimensionSchema, MetricSchema, SchemaError, AGG};
use crate::tree::NodeKey;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("empty data section")]
    EmptyInput,
    #[error("{count} malformed rows, first at line {line}: {msg}")]
    MalformedRows {
        count: usize,
        line: usize,
        msg: String,
    },
    #[error("reserved value `{AGG}` appears as a data value at line {line}")]
    ReservedValue { line: usize },
    #[error("duplicate (timestamp, key) row at line {line}: t={t} key={key}")]
    DuplicateRow { line: usize, t: String, key: NodeKey },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Where the data lives and how to interpret its columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub data: PathBuf,
    pub timestamp_col: String,
    pub dims: Vec<String>,
    pub fundamentals: Vec<String>,
    /// (name, formula) in definition order.
    pub derived: Vec<(String, String)>,
    /// Aggregation per fundamental; metrics not listed default to SUM.
    pub agg: Vec<(String, AggFn)>,
}

impl DatasetManifest {
    /// Parse a `key = value` manifest. Recognized keys: `data`,
    /// `timestamp_col`, `dims`, `fundamentals`, `derived.<name>`,
    /// `agg.<metric>`. Lines starting with `#` are comments. Relative
    /// `data` paths resolve against the manifest's directory.
    pub fn read(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let kv = parse_key_values(&text).map_err(|msg| IngestError::Manifest {
            path: path.to_path_buf(),
            msg,
        })?;
        let mut manifest = DatasetManifest {
            data: PathBuf::new(),
            timestamp_col: "timestamp".to_string(),
            dims: Vec::new(),
            fundamentals: Vec::new(),
            derived: Vec::new(),
            agg: Vec::new(),
        };
        let missing = |k: &str| IngestError::Manifest {
            path: path.to_path_buf(),
            msg: format!("missing required key `{k}`"),
        };
        for (key, value) in &kv {
            match key.as_str() {
                "data" => manifest.data = PathBuf::from(value),
                "timestamp_col" => manifest.timestamp_col = value.clone(),
                "dims" => manifest.dims = split_list(value),
                "fundamentals" => manifest.fundamentals = split_list(value),
                _ => {
                    if let Some(name) = key.strip_prefix("derived.") {
                        manifest.derived.push((name.to_string(), value.clone()));
                    } else if let Some(name) = key.strip_prefix("agg.") {
                        let agg = AggFn::parse(value).ok_or_else(|| IngestError::Manifest {
                            path: path.to_path_buf(),
                            msg: format!("agg.{name} must be SUM or MEAN, got `{value}`"),
                        })?;
                        manifest.agg.push((name.to_string(), agg));
                    } else {
                        return Err(IngestError::Manifest {
                            path: path.to_path_buf(),
                            msg: format!("unknown key `{key}`"),
                        });
                    }
                }
            }
        }
        if manifest.data.as_os_str().is_empty() {
            return Err(missing("data"));
        }
        if manifest.dims.is_empty() {
            return Err(missing("dims"));
        }
        if manifest.fundamentals.is_empty() {
            return Err(missing("fundamentals"));
        }
        if manifest.data.is_relative() {
            if let Some(dir) = path.parent() {
                manifest.data = dir.join(&manifest.data);
            }
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<(), IngestError> {
        let mut out = String::new();
        let file_name = self
            .data
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.data.to_string_lossy().into_owned());
        out.push_str(&format!("data = {file_name}\n"));
        out.push_str(&format!("timestamp_col = {}\n", self.timestamp_col));
        out.push_str(&format!("dims = {}\n", self.dims.join(",")));
        out.push_str(&format!("fundamentals = {}\n", self.fundamentals.join(",")));
        for (name, agg) in &self.agg {
            out.push_str(&format!("agg.{name} = {}\n", agg.name()));
        }
        for (name, formula) in &self.derived {
            out.push_str(&format!("derived.{name} = {formula}\n"));
        }
        fs::write(path, out).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Build the metric schema this manifest declares.
    pub fn metric_schema(&self) -> Result<MetricSchema, SchemaError> {
        let fundamentals = self
            .fundamentals
            .iter()
            .map(|name| {
                let agg = self
                    .agg
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, a)| *a)
                    .unwrap_or(AggFn::Sum);
                (name.clone(), agg)
            })
            .collect();
        MetricSchema::new(fundamentals, self.derived.clone())
    }
}

/// Shared `key = value` syntax used by manifests and run configs.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`", i + 1));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Load the manifest's data file. Dimension values are inferred from the
/// data (sorted for determinism); timestamps are sorted and re-indexed to
/// a dense 0-based range, numerically when every label parses as an
/// integer, lexically otherwise (ISO-8601 sorts correctly either way).
pub fn load_csv(
    manifest: &DatasetManifest,
) -> Result<(DimensionSchema, MetricSchema, MetricPanel), IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(&manifest.data)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => IngestError::Io {
                path: manifest.data.clone(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => IngestError::Csv(e),
        })?;

    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let t_col = col(&manifest.timestamp_col)?;
    let dim_cols: Vec<usize> = manifest
        .dims
        .iter()
        .map(|d| col(d))
        .collect::<Result<_, _>>()?;
    let metric_cols: Vec<usize> = manifest
        .fundamentals
        .iter()
        .map(|m| col(m))
        .collect::<Result<_, _>>()?;
    let expected_fields = headers.len();

    struct Row {
        t_label: String,
        key: NodeKey,
        values: Vec<f64>,
        line: usize,
    }

    let mut rows: Vec<Row> = Vec::new();
    let mut malformed = 0usize;
    let mut first_malformed: Option<(usize, String)> = None;
    let mut value_sets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); manifest.dims.len()];

    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record?;
        let mut bad = |msg: String| {
            malformed += 1;
            if first_malformed.is_none() {
                first_malformed = Some((line, msg));
            }
        };
        if record.len() != expected_fields {
            bad(format!(
                "expected {expected_fields} fields, got {}",
                record.len()
            ));
            continue;
        }
        let mut values = Vec::with_capacity(metric_cols.len());
        let mut ok = true;
        for (&c, name) in metric_cols.iter().zip(&manifest.fundamentals) {
            match record[c].trim().parse::<f64>() {
                Ok(v) => values.push(v),
                Err(_) => {
                    bad(format!(
                        "non-numeric `{}` in metric column {name}",
                        &record[c]
                    ));
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let mut labels = Vec::with_capacity(dim_cols.len());
        for &c in &dim_cols {
            let label = record[c].trim().to_string();
            if label == AGG {
                return Err(IngestError::ReservedValue { line });
            }
            labels.push(label);
        }
        for (set, label) in value_sets.iter_mut().zip(&labels) {
            set.insert(label.clone());
        }
        rows.push(Row {
            t_label: record[t_col].trim().to_string(),
            key: NodeKey::leaf(labels),
            values,
            line,
        });
    }

    if let Some((line, msg)) = first_malformed {
        return Err(IngestError::MalformedRows {
            count: malformed,
            line,
            msg,
        });
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyInput);
    }

    // dense 0-based timestamp index, order-preserving
    let labels: BTreeSet<&str> = rows.iter().map(|r| r.t_label.as_str()).collect();
    let all_numeric = labels.iter().all(|l| l.parse::<i64>().is_ok());
    let mut ordered: Vec<&str> = labels.into_iter().collect();
    if all_numeric {
        ordered.sort_by_key(|l| l.parse::<i64>().unwrap());
    } // BTreeSet already gives lexical order otherwise
    let t_index: HashMap<&str, usize> =
        ordered.iter().enumerate().map(|(i, l)| (*l, i)).collect();

    let schema = DimensionSchema::new(
        manifest.dims.clone(),
        value_sets
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect(),
    )?;
    let metrics = manifest.metric_schema()?;

    let keys: Vec<NodeKey> = rows
        .iter()
        .map(|r| r.key.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut panel = MetricPanel::new(keys, manifest.fundamentals.clone(), ordered.len());
    panel.set_t_labels(ordered.iter().map(|s| s.to_string()).collect());

    let mut seen: HashSet<(usize, NodeKey)> = HashSet::new();
    for row in &rows {
        let t = t_index[row.t_label.as_str()];
        if !seen.insert((t, row.key.clone())) {
            return Err(IngestError::DuplicateRow {
                line: row.line,
                t: row.t_label.clone(),
                key: row.key.clone(),
            });
        }
        let n = panel.key_index(&row.key).unwrap();
        for (m, v) in row.values.iter().enumerate() {
            panel.set_by_index(n, m, t, *v);
        }
    }
    Ok((schema, metrics, panel))
}

/// Serialize a leaf panel back to the CSV layout `load_csv` reads. Metric
/// columns can carry a suffix (`_expected` for forecast exports).
pub fn write_csv(
    panel: &MetricPanel,
    dims: &[String],
    timestamp_col: &str,
    metric_suffix: &str,
    path: &Path,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| IngestError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let mut header: Vec<String> = vec![timestamp_col.to_string()];
    header.extend(dims.iter().cloned());
    header.extend(
        panel
            .metrics()
            .iter()
            .map(|m| format!("{m}{metric_suffix}")),
    );
    w.write_record(&header)?;
    for t in 0..panel.t_len() {
        for key in panel.keys() {
            let n = panel.key_index(key).unwrap();
            let mut record: Vec<String> = vec![panel.t_labels()[t].clone()];
            record.extend(key.entries().map(|e| e.unwrap_or(AGG).to_string()));
            let mut complete = true;
            for m in 0..panel.metrics().len() {
                match panel.get_by_index(n, m, t) {
                    Some(v) => record.push(format!("{v}")),
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete {
                w.write_record(&record)?;
            }
        }
    }
    w.flush().map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Labels file: one line per anomalous timestamp,
/// `<t_index>,<leaf>;<leaf>...` with `|`-separated key entries.
pub fn write_labels(labels: &[(usize, Vec<NodeKey>)], path: &Path) -> Result<(), IngestError> {
    let mut out = String::new();
    for (t, keys) in labels {
        let joined: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
        out.push_str(&format!("{t},{}\n", joined.join(";")));
    }
    fs::write(path, out).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<(usize, Vec<NodeKey>)>, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out: BTreeMap<usize, Vec<NodeKey>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (t, keys) = line.split_once(',').ok_or_else(|| IngestError::Manifest {
            path: path.to_path_buf(),
            msg: format!("line {}: expected `<t>,<keys>`", i + 1),
        })?;
        let t: usize = t.trim().parse().map_err(|_| IngestError::Manifest {
            path: path.to_path_buf(),
            msg: format!("line {}: bad timestamp `{t}`", i + 1),
        })?;
        let keys: Vec<NodeKey> = keys
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| NodeKey::parse(s.trim()))
            .collect();
        out.entry(t).or_default().extend(keys);
    }
    Ok(out.into_iter().collect())
}
