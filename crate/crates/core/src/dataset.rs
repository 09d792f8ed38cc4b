//! Rectangular data with missing cells, the missing-data indicator matrix,
//! and pattern analysis.
//!
//! Missing cells are stored as `NaN`; observed cells are always finite.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMeta {
    pub name: String,
    pub kind: VariableKind,
}

/// An `n × K` grid of real-or-missing cells, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    n_rows: usize,
    columns: Vec<VariableMeta>,
    values: Vec<f64>,
}

impl DataMatrix {
    /// Builds a matrix from row-major cells, `None` meaning missing.
    ///
    /// Column kinds are inferred: binary iff at least one cell is observed and
    /// every observed cell is 0 or 1.
    pub fn from_rows(names: &[&str], rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let k = names.len();
        let mut values = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::RaggedRow {
                    row: i + 1,
                    expected: k,
                    found: row.len(),
                });
            }
            values.extend(row.iter().map(|c| c.unwrap_or(f64::NAN)));
        }
        let columns = names
            .iter()
            .map(|n| VariableMeta {
                name: n.to_string(),
                kind: VariableKind::Continuous,
            })
            .collect();
        let mut data = Self::from_parts(rows.len(), columns, values)?;
        data.infer_kinds();
        Ok(data)
    }

    /// Builds a matrix from explicit parts. `values` is row-major with `NaN`
    /// marking missing cells.
    pub fn from_parts(n_rows: usize, columns: Vec<VariableMeta>, values: Vec<f64>) -> Result<Self> {
        let k = columns.len();
        if n_rows == 0 || k == 0 {
            return Err(Error::InvalidData(
                "data must have at least one row and one column".into(),
            ));
        }
        if values.len() != n_rows * k {
            return Err(Error::Dimension(format!(
                "{} values for a {n_rows}x{k} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::InvalidData("infinite cell value".into()));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidData(format!("duplicate column name `{}`", c.name)));
            }
        }
        let data = DataMatrix {
            n_rows,
            columns,
            values,
        };
        for j in 0..k {
            if data.columns[j].kind == VariableKind::Binary && data.observed_column(j).any(|v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidData(format!(
                    "binary column `{}` has a value outside {{0,1}}",
                    data.columns[j].name
                )));
            }
        }
        Ok(data)
    }

    /// Builds a fully observed continuous matrix from row-major values.
    pub fn from_complete(names: &[&str], n_rows: usize, values: Vec<f64>) -> Result<Self> {
        let columns = names
            .iter()
            .map(|n| VariableMeta {
                name: n.to_string(),
                kind: VariableKind::Continuous,
            })
            .collect();
        Self::from_parts(n_rows, columns, values)
    }

    fn infer_kinds(&mut self) {
        for j in 0..self.n_cols() {
            let mut any = false;
            let mut binary = true;
            for v in self.observed_column(j) {
                any = true;
                if v != 0.0 && v != 1.0 {
                    binary = false;
                    break;
                }
            }
            self.columns[j].kind = if any && binary {
                VariableKind::Binary
            } else {
                VariableKind::Continuous
            };
        }
    }

    /// Overrides the inferred kind of column `j`.
    pub fn set_kind(&mut self, j: usize, kind: VariableKind) -> Result<()> {
        if kind == VariableKind::Binary && self.observed_column(j).any(|v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidData(format!(
                "column `{}` cannot be binary",
                self.columns[j].name
            )));
        }
        self.columns[j].kind = kind;
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[VariableMeta] {
        &self.columns
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Raw cell value; `NaN` when missing.
    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.columns.len() + j]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let v = self.value(i, j);
        (!v.is_nan()).then_some(v)
    }

    #[inline]
    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.value(i, j).is_nan()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.columns.len();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column `j` as a vector, `NaN` where missing.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.value(i, j)).collect()
    }

    pub fn observed_column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_rows).map(move |i| self.value(i, j)).filter(|v| !v.is_nan())
    }

    pub fn observed_count(&self, j: usize) -> usize {
        self.observed_column(j).count()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|v| !v.is_nan())
    }

    /// Writes `value` into cell `(i, j)`. Used to fill imputations into a
    /// copy of the data; `value` must be finite.
    pub(crate) fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(value.is_finite());
        let k = self.columns.len();
        self.values[i * k + j] = value;
    }

    /// Returns a copy in which every cell `(i, j)` with `missing(i, j)` is
    /// made missing.
    pub fn with_missing(&self, missing: impl Fn(usize, usize) -> bool) -> DataMatrix {
        let mut out = self.clone();
        let k = self.n_cols();
        for i in 0..self.n_rows {
            for j in 0..k {
                if missing(i, j) {
                    out.values[i * k + j] = f64::NAN;
                }
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        let mut buf: Vec<String> = Vec::with_capacity(self.n_cols());
        for i in 0..self.n_rows {
            buf.clear();
            for &v in self.row(i) {
                buf.push(format_cell(v));
            }
            w.write_record(&buf)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Formats an observed cell with the shortest representation that parses
/// back to the same `f64`; missing cells become `NA`.
pub fn format_cell(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v:?}")
    }
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub missing_tokens: Vec<String>,
    /// Per-column kind overrides by column name.
    pub kinds: BTreeMap<String, VariableKind>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            missing_tokens: vec![String::new(), "NA".to_string()],
            kinds: BTreeMap::new(),
        }
    }
}

pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<DataMatrix> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, options)
}

/// Parses comma-delimited text with a mandatory header row.
pub fn read_csv<R: Read>(reader: R, options: &CsvOptions) -> Result<DataMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let k = headers.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != k {
            return Err(Error::RaggedRow {
                row: i + 1,
                expected: k,
                found: record.len(),
            });
        }
        for (j, field) in record.iter().enumerate() {
            if options.missing_tokens.iter().any(|t| t == field) {
                values.push(f64::NAN);
                continue;
            }
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(Error::NonNumeric {
                        row: i + 1,
                        column: headers[j].clone(),
                        value: field.to_string(),
                    })
                }
            }
        }
        n += 1;
    }
    let columns = headers
        .iter()
        .map(|name| VariableMeta {
            name: name.clone(),
            kind: VariableKind::Continuous,
        })
        .collect();
    let mut data = DataMatrix::from_parts(n, columns, values)?;
    data.infer_kinds();
    for (name, &kind) in &options.kinds {
        let j = data
            .column_index(name)
            .ok_or_else(|| Error::InvalidData(format!("kind override for unknown column `{name}`")))?;
        data.set_kind(j, kind)?;
    }
    Ok(data)
}

/// The missing-data indicator matrix: `m_ij = 1` exactly where cell `(i, j)`
/// is missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MissingMask {
    n_rows: usize,
    n_cols: usize,
    bits: Vec<bool>,
}

impl MissingMask {
    pub fn from_bits(n_rows: usize, n_cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n_rows * n_cols {
            return Err(Error::Dimension("mask size does not match dimensions".into()));
        }
        Ok(MissingMask { n_rows, n_cols, bits })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n_cols + j]
    }

    /// The indicator value `m_ij` as 0 or 1.
    pub fn indicator(&self, i: usize, j: usize) -> u8 {
        u8::from(self.is_missing(i, j))
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn observed_count(&self, j: usize) -> usize {
        (0..self.n_rows).filter(|&i| !self.is_missing(i, j)).count()
    }
}

pub fn compute_mask(data: &DataMatrix) -> MissingMask {
    MissingMask {
        n_rows: data.n_rows(),
        n_cols: data.n_cols(),
        bits: data.values().iter().map(|v| v.is_nan()).collect(),
    }
}

/// Rows sharing one missingness pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub rows: Vec<usize>,
    /// `observed[j]` is true when column `j` is observed in these rows.
    pub observed: Vec<bool>,
}

impl Pattern {
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.observed.len()).filter(|&j| self.observed[j]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.observed.len()).filter(|&j| !self.observed[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSummary {
    /// Patterns ordered by first occurrence.
    pub patterns: Vec<Pattern>,
    /// A column permutation under which every row is observed on a prefix of
    /// columns, if one exists.
    pub monotone_order: Option<Vec<usize>>,
}

pub fn analyze_patterns(mask: &MissingMask) -> PatternSummary {
    let k = mask.n_cols();
    let mut index: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    let mut patterns: Vec<Pattern> = Vec::new();
    for i in 0..mask.n_rows() {
        let observed: Vec<bool> = mask.row(i).iter().map(|m| !m).collect();
        match index.get(&observed) {
            Some(&p) => patterns[p].rows.push(i),
            None => {
                index.insert(observed.clone(), patterns.len());
                patterns.push(Pattern {
                    rows: vec![i],
                    observed,
                });
            }
        }
    }

    // Stable sort keeps original column order among ties.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&j| std::cmp::Reverse(mask.observed_count(j)));
    let monotone = patterns.iter().all(|p| {
        let mut seen_missing = false;
        order.iter().all(|&j| {
            if p.observed[j] {
                !seen_missing
            } else {
                seen_missing = true;
                true
            }
        })
    });
    PatternSummary {
        patterns,
        monotone_order: monotone.then_some(order),
    }
}
