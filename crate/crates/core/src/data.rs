//! Tabular data ingestion and the per-field statistics the data-dependent
//! rules consume.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::spec::{ChartSpec, Encoding};

/// Number of equal-width buckets a binned field is split into when grouping
/// rows for overlap detection.
pub const BIN_COUNT: usize = 10;

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$").unwrap());

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("row {row} has {found} cells, header has {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("table has no columns or no rows")]
    EmptyTable,
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("the x/y configuration is not continuous by discrete")]
    NotContinuousByDiscrete,
    #[error("unsupported cell value in column `{column}`: {value}")]
    UnsupportedValue { column: String, value: String },
    #[error("malformed table: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Number,
    String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Number(f64),
    Text(String),
}

impl Cell {
    pub fn is_null(&self) -> bool {
        matches!(self, Cell::Null)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Cell::Number(v) => Some(*v),
            _ => None,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Null => Value::Null,
            Cell::Text(s) => Value::from(s.as_str()),
            Cell::Number(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Value::from(*v as i64),
            Cell::Number(v) => serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number),
        }
    }
}

/// Whether `text` is a plain decimal number: optional sign, digits with an
/// optional fraction, optional exponent. `inf`, `NaN` and digit grouping are
/// not numbers.
pub fn is_number_literal(text: &str) -> bool {
    NUMBER.is_match(text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    pub name: String,
    pub columns: Vec<String>,
    pub kinds: Vec<FieldKind>,
    pub rows: Vec<Vec<Cell>>,
}

impl DataTable {
    pub fn column_index(&self, column: &str) -> Result<usize, DataError> {
        self.columns
            .iter()
            .position(|c| c == column)
            .ok_or_else(|| DataError::UnknownColumn(column.to_owned()))
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// The first `limit` rows as flat JSON objects, for inline chart data.
    pub fn json_rows(&self, limit: usize) -> Vec<Map<String, Value>> {
        self.rows
            .iter()
            .take(limit)
            .map(|row| {
                self.columns
                    .iter()
                    .zip(row)
                    .map(|(c, cell)| (c.clone(), cell.to_json()))
                    .collect()
            })
            .collect()
    }

    /// Build a table from raw cells, inferring each column's kind. Text cells
    /// in an all-numeric column are converted to numbers.
    pub fn from_raw(
        name: impl Into<String>,
        columns: Vec<String>,
        raw: Vec<Vec<RawCell>>,
    ) -> Result<Self, DataError> {
        if columns.is_empty() || raw.is_empty() {
            return Err(DataError::EmptyTable);
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.as_str()) {
                return Err(DataError::DuplicateColumn(c.clone()));
            }
        }
        for (i, row) in raw.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(DataError::RaggedRows {
                    row: i + 1,
                    expected: columns.len(),
                    found: row.len(),
                });
            }
        }
        let kinds: Vec<FieldKind> = (0..columns.len())
            .map(|j| {
                let numeric = raw.iter().all(|row| match &row[j] {
                    RawCell::Null | RawCell::Number(_) => true,
                    RawCell::Text(s) => is_number_literal(s),
                    RawCell::Json(_) => false,
                });
                if numeric {
                    FieldKind::Number
                } else {
                    FieldKind::String
                }
            })
            .collect();
        let rows = raw
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .zip(&kinds)
                    .map(|(cell, kind)| match (cell, kind) {
                        (RawCell::Null, _) => Cell::Null,
                        (RawCell::Number(v), FieldKind::Number) => Cell::Number(v),
                        (RawCell::Number(v), FieldKind::String) => Cell::Text(format_number(v)),
                        (RawCell::Text(s), FieldKind::Number) => {
                            Cell::Number(s.parse().expect("checked numeric literal"))
                        }
                        (RawCell::Text(s), FieldKind::String) => Cell::Text(s),
                        (RawCell::Json(s), _) => Cell::Text(s),
                    })
                    .collect()
            })
            .collect();
        Ok(DataTable {
            name: name.into(),
            columns,
            kinds,
            rows,
        })
    }
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// A cell before column kinds are known.
#[derive(Debug, Clone, PartialEq)]
pub enum RawCell {
    Null,
    Number(f64),
    Text(String),
    /// A JSON boolean, kept as its literal text.
    Json(String),
}

/// Load comma-separated text with a header row. Empty cells are null.
pub fn load_csv(name: impl Into<String>, text: &str) -> Result<DataTable, DataError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let prepared;
    let mut reader_input = text;
    // The csv reader skips blank lines; in a one-column table they are null cells.
    if let Some(header) = text.lines().next() {
        if !header.contains(',') && !header.trim().is_empty() {
            let body = text.trim_end_matches(['\n', '\r']);
            prepared = body
                .lines()
                .map(|l| if l.trim().is_empty() { "\"\"" } else { l })
                .collect::<Vec<_>>()
                .join("\n");
            reader_input = &prepared;
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader_input.as_bytes());
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Malformed(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_owned())
        .collect();
    if columns.iter().all(|c| c.is_empty()) {
        return Err(DataError::EmptyTable);
    }
    let mut raw = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Malformed(e.to_string()))?;
        raw.push(
            record
                .iter()
                .map(|cell| {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        RawCell::Null
                    } else {
                        RawCell::Text(cell.to_owned())
                    }
                })
                .collect(),
        );
    }
    DataTable::from_raw(name, columns, raw)
}

/// Load a list of flat objects sharing one key set.
pub fn load_rows(
    name: impl Into<String>,
    rows: &[Map<String, Value>],
) -> Result<DataTable, DataError> {
    let first = rows.first().ok_or(DataError::EmptyTable)?;
    let columns: Vec<String> = first.keys().cloned().collect();
    let mut raw = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != columns.len() || columns.iter().any(|c| !row.contains_key(c)) {
            return Err(DataError::RaggedRows {
                row: i + 1,
                expected: columns.len(),
                found: row.len(),
            });
        }
        let mut cells = Vec::with_capacity(columns.len());
        for c in &columns {
            cells.push(match &row[c] {
                Value::Null => RawCell::Null,
                Value::Number(n) => RawCell::Number(n.as_f64().unwrap_or(f64::NAN)),
                Value::String(s) if s.is_empty() => RawCell::Null,
                Value::String(s) => RawCell::Text(s.clone()),
                Value::Bool(b) => RawCell::Json(b.to_string()),
                other => {
                    return Err(DataError::UnsupportedValue {
                        column: c.clone(),
                        value: other.to_string(),
                    })
                }
            });
        }
        raw.push(cells);
    }
    DataTable::from_raw(name, columns, raw)
}

/// Load either form: a JSON array of objects, or delimited text.
pub fn load_table(name: impl Into<String>, source: &str) -> Result<DataTable, DataError> {
    if source.trim_start().starts_with('[') {
        let rows: Vec<Map<String, Value>> =
            serde_json::from_str(source).map_err(|e| DataError::Malformed(e.to_string()))?;
        load_rows(name, &rows)
    } else {
        load_csv(name, source)
    }
}

/// Load a table file; the table is named after the file stem.
pub fn load_table_file(path: &Path) -> Result<DataTable, DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Malformed(format!("{}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "table".into());
    load_table(name, &text)
}

/// Load every `.csv` and `.json` file in `dir`, sorted by name.
pub fn load_table_dir(dir: &Path) -> Result<Vec<DataTable>, DataError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| DataError::Malformed(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_table_file(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldProfile {
    pub name: String,
    pub kind: FieldKind,
    /// Distinct non-null values.
    pub cardinality: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub has_negative: bool,
    pub has_positive: bool,
    pub row_count: usize,
    pub null_count: usize,
}

#[derive(Hash, PartialEq, Eq)]
enum DistinctKey<'a> {
    Number(u64),
    Text(&'a str),
}

fn number_key(v: f64) -> u64 {
    // -0.0 and 0.0 are one value
    if v == 0.0 {
        0.0f64.to_bits()
    } else {
        v.to_bits()
    }
}

pub fn profile_field(table: &DataTable, column: &str) -> Result<FieldProfile, DataError> {
    let j = table.column_index(column)?;
    Ok(profile_column(table, j))
}

fn profile_column(table: &DataTable, j: usize) -> FieldProfile {
    let mut distinct = HashSet::new();
    let mut min: Option<f64> = None;
    let mut max: Option<f64> = None;
    let mut nulls = 0;
    for row in &table.rows {
        match &row[j] {
            Cell::Null => nulls += 1,
            Cell::Number(v) => {
                distinct.insert(DistinctKey::Number(number_key(*v)));
                min = Some(min.map_or(*v, |m| m.min(*v)));
                max = Some(max.map_or(*v, |m| m.max(*v)));
            }
            Cell::Text(s) => {
                distinct.insert(DistinctKey::Text(s));
            }
        }
    }
    FieldProfile {
        name: table.columns[j].clone(),
        kind: table.kinds[j],
        cardinality: distinct.len(),
        min,
        max,
        has_negative: min.is_some_and(|m| m < 0.0),
        has_positive: max.is_some_and(|m| m > 0.0),
        row_count: table.rows.len(),
        null_count: nulls,
    }
}

/// Profiles of every column, computed once per table.
pub fn profile_table(table: &DataTable) -> Vec<FieldProfile> {
    (0..table.columns.len())
        .map(|j| profile_column(table, j))
        .collect()
}

#[derive(Hash, PartialEq, Eq)]
enum GroupKey<'a> {
    All,
    Value(DistinctKey<'a>),
    Bin(usize),
}

/// Bucket of `v` in `BIN_COUNT` equal-width bins over `[min, max]`.
pub fn bin_index(v: f64, min: f64, max: f64) -> usize {
    if max <= min {
        return 0;
    }
    (((v - min) / (max - min)) * BIN_COUNT as f64)
        .floor()
        .clamp(0.0, (BIN_COUNT - 1) as f64) as usize
}

struct Grouping {
    column: Option<usize>,
    bins: Option<(f64, f64)>,
}

impl Grouping {
    fn new(table: &DataTable, encoding: &Encoding) -> Result<Self, DataError> {
        let Some(field) = encoding.field.as_deref() else {
            return Ok(Grouping {
                column: None,
                bins: None,
            });
        };
        let j = table.column_index(field)?;
        let bins = if encoding.binned && table.kinds[j] == FieldKind::Number {
            let p = profile_column(table, j);
            p.min.zip(p.max)
        } else {
            None
        };
        Ok(Grouping {
            column: Some(j),
            bins,
        })
    }

    /// `None` when the row has no value for this grouping.
    fn key<'a>(&self, row: &'a [Cell]) -> Option<GroupKey<'a>> {
        let Some(j) = self.column else {
            return Some(GroupKey::All);
        };
        match (&row[j], self.bins) {
            (Cell::Null, _) => None,
            (Cell::Number(v), Some((lo, hi))) => Some(GroupKey::Bin(bin_index(*v, lo, hi))),
            (Cell::Number(v), None) => Some(GroupKey::Value(DistinctKey::Number(number_key(*v)))),
            (Cell::Text(s), _) => Some(GroupKey::Value(DistinctKey::Text(s))),
        }
    }
}

/// Whether some discrete-axis slot holds more than one mark.
///
/// Rows are grouped by the discrete positional value together with the
/// values of any discrete non-positional channels. Rows with a null
/// discrete-axis value draw nothing. When any encoding aggregates, each group
/// collapses to a single mark, so there is no overlap.
pub fn detect_overlap(spec: &ChartSpec, table: &DataTable) -> Result<bool, DataError> {
    let (_, discrete) = spec
        .continuous_by_discrete()
        .ok_or(DataError::NotContinuousByDiscrete)?;
    let axis = Grouping::new(table, discrete)?;
    let extra = spec
        .encodings
        .iter()
        .filter(|e| !e.channel.is_positional() && e.is_discrete() && e.field.is_some())
        .map(|e| Grouping::new(table, e))
        .collect::<Result<Vec<_>, _>>()?;
    if spec.encodings.iter().any(|e| e.aggregate.is_some()) {
        return Ok(false);
    }
    let mut seen: HashSet<Vec<GroupKey>> = HashSet::with_capacity(table.rows.len());
    for row in &table.rows {
        let Some(head) = axis.key(row) else { continue };
        let mut key = Vec::with_capacity(1 + extra.len());
        key.push(head);
        for g in &extra {
            key.push(g.key(row).unwrap_or(GroupKey::All));
        }
        if !seen.insert(key) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Column profiles keyed by name.
#[derive(Debug, Clone)]
pub struct TableProfile {
    profiles: HashMap<String, FieldProfile>,
}

impl TableProfile {
    pub fn new(table: &DataTable) -> Self {
        TableProfile {
            profiles: profile_table(table)
                .into_iter()
                .map(|p| (p.name.clone(), p))
                .collect(),
        }
    }

    pub fn get(&self, column: &str) -> Option<&FieldProfile> {
        self.profiles.get(column)
    }
}
