//! Field schemas, vocabulary building and instance encoding.
//!
//! Raw data arrives as CSV rows of categorical cells. Each schema field is
//! either one-hot (the cell is a single feature string) or multi-hot (the
//! cell is a delimiter-separated list). Encoding maps feature strings to
//! dense per-field indices; index 0 of every field is reserved for
//! out-of-vocabulary strings so encoding is total once a vocabulary exists.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a field's cell is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    OneHot,
    MultiHot,
}

fn default_delimiter() -> char {
    '|'
}

fn default_max_len() -> usize {
    50
}

/// One declared categorical field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub name: String,
    pub arity: Arity,
    /// Separator for multi-hot cells.
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Multi-hot cells longer than this keep only their trailing (most
    /// recent) entries.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl FieldSchema {
    pub fn one_hot(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            arity: Arity::OneHot,
            delimiter: default_delimiter(),
            max_len: default_max_len(),
        }
    }

    pub fn multi_hot(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            arity: Arity::MultiHot,
            delimiter: default_delimiter(),
            max_len: default_max_len(),
        }
    }
}

/// Full dataset schema: ordered fields plus the label column contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Name of the CSV column holding the label.
    pub label: String,
    /// When set, the label cell is read as a rating and rows with
    /// rating > threshold become positives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_threshold: Option<f64>,
    #[serde(rename = "field")]
    pub fields: Vec<FieldSchema>,
}

impl Schema {
    pub fn new(label: impl Into<String>, fields: Vec<FieldSchema>) -> Result<Self> {
        let schema = Self {
            label: label.into(),
            rating_threshold: None,
            fields,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::Config("schema declares no fields".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Config(format!("duplicate field name '{}'", f.name)));
            }
            if f.name == self.label {
                return Err(Error::Config(format!(
                    "field '{}' collides with the label column",
                    f.name
                )));
            }
            if f.max_len == 0 {
                return Err(Error::Config(format!("field '{}' has max_len 0", f.name)));
            }
        }
        Ok(())
    }

    /// Number of fields `m`.
    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: Schema =
            toml::from_str(text).map_err(|e| Error::Config(format!("schema parse: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("schema serialize: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Per-field feature-string -> index map. Index 0 is reserved for
/// out-of-vocabulary strings and never assigned to a real feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldVocab {
    /// Real features in index order; `entries[i]` has index `i + 1`.
    entries: Vec<String>,
    index: HashMap<String, u32>,
}

impl FieldVocab {
    fn from_entries(entries: Vec<String>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), (i + 1) as u32))
            .collect();
        Self { entries, index }
    }

    /// Index of a feature string; 0 when unseen.
    pub fn lookup(&self, feature: &str) -> u32 {
        self.index.get(feature).copied().unwrap_or(0)
    }

    /// Total index space `n_i` including the OOV slot.
    pub fn size(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }
}

/// Vocabularies for every schema field, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    fields: Vec<FieldVocab>,
}

#[derive(Serialize, Deserialize)]
struct VocabFileField {
    name: String,
    entries: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    fields: Vec<VocabFileField>,
}

impl Vocabulary {
    pub fn field(&self, i: usize) -> &FieldVocab {
        &self.fields[i]
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    /// `n_i` per field.
    pub fn sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.size()).collect()
    }

    /// SHA-256 over a canonical rendering of the vocabulary; checkpoints
    /// carry this hash so banks are never applied to mismatched index spaces.
    pub fn hash(&self, schema: &Schema) -> String {
        let mut hasher = Sha256::new();
        for (fs, fv) in schema.fields.iter().zip(&self.fields) {
            hasher.update(fs.name.as_bytes());
            hasher.update([0u8]);
            for entry in &fv.entries {
                hasher.update(entry.as_bytes());
                hasher.update([1u8]);
            }
            hasher.update([2u8]);
        }
        let mut hex = String::new();
        for b in hasher.finalize() {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }

    pub fn save(&self, schema: &Schema, path: &Path) -> Result<()> {
        let file = VocabFile {
            fields: schema
                .fields
                .iter()
                .zip(&self.fields)
                .map(|(fs, fv)| VocabFileField {
                    name: fs.name.clone(),
                    entries: fv.entries.clone(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Config(format!("vocab serialize: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(schema: &Schema, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: VocabFile =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("vocab parse: {e}")))?;
        if file.fields.len() != schema.fields.len() {
            return Err(Error::Config(format!(
                "vocabulary has {} fields but schema declares {}",
                file.fields.len(),
                schema.fields.len()
            )));
        }
        let mut fields = Vec::with_capacity(file.fields.len());
        for (fs, vf) in schema.fields.iter().zip(file.fields) {
            if fs.name != vf.name {
                return Err(Error::Config(format!(
                    "vocabulary field '{}' does not match schema field '{}'",
                    vf.name, fs.name
                )));
            }
            fields.push(FieldVocab::from_entries(vf.entries));
        }
        Ok(Self { fields })
    }
}

/// A raw row: the label cell plus one cell per schema field, in schema order.
#[derive(Debug, Clone)]
pub struct RawRow {
    pub label_cell: String,
    pub cells: Vec<String>,
    /// 1-based data row number in the source file, for error reporting.
    pub row_number: usize,
}

/// One encoded training/evaluation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    /// Active indices per field: length 1 for one-hot, >= 1 for multi-hot.
    pub fields: Vec<Vec<u32>>,
    /// Binary label.
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// An ordered set of encoded instances from one (domain, split).
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub instances: Vec<EncodedInstance>,
    pub domain: Domain,
    pub split: Split,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Reads all rows of a CSV file, projecting onto the schema columns.
/// The header row is required; a missing column is a schema error naming
/// the field.
pub fn read_csv_rows(path: &Path, schema: &Schema) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data {
            row: 0,
            message: format!("invalid header in {}: {e}", path.display()),
        })?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("missing column '{}' in {}", name, path.display()))
        })
    };
    let label_col = column(&schema.label)?;
    let field_cols: Vec<usize> = schema
        .fields
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row_number = i + 1;
        let record = record.map_err(|e| Error::Data {
            row: row_number,
            message: format!("{e}"),
        })?;
        let get = |col: usize| -> Result<String> {
            record
                .get(col)
                .map(str::to_owned)
                .ok_or_else(|| Error::Data {
                    row: row_number,
                    message: format!("row has {} cells, expected at least {}", record.len(), col + 1),
                })
        };
        rows.push(RawRow {
            label_cell: get(label_col)?,
            cells: field_cols.iter().map(|&c| get(c)).collect::<Result<_>>()?,
            row_number,
        });
    }
    Ok(rows)
}

fn split_cell<'a>(cell: &'a str, field: &FieldSchema) -> Vec<&'a str> {
    match field.arity {
        Arity::OneHot => vec![cell],
        Arity::MultiHot => {
            let parts: Vec<&str> = cell.split(field.delimiter).collect();
            if parts.len() > field.max_len {
                // keep the most recent entries (tail of the sequence)
                parts[parts.len() - field.max_len..].to_vec()
            } else {
                parts
            }
        }
    }
}

/// Builds per-field vocabularies from raw rows. Features occurring at least
/// `min_count` times get indices `1..` in first-appearance order; everything
/// else maps to the OOV index 0. Pass the union of source and target
/// training rows so both domains share one index space.
pub fn build_vocab(rows: &[RawRow], schema: &Schema, min_count: usize) -> Result<Vocabulary> {
    let m = schema.num_fields();
    let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); m];
    let mut order: Vec<Vec<String>> = vec![Vec::new(); m];
    for row in rows {
        if row.cells.len() != m {
            return Err(Error::Data {
                row: row.row_number,
                message: format!("row has {} field cells, schema declares {m}", row.cells.len()),
            });
        }
        for (i, field) in schema.fields.iter().enumerate() {
            for token in split_cell(&row.cells[i], field) {
                let count = counts[i].entry(token.to_owned()).or_insert(0);
                if *count == 0 {
                    order[i].push(token.to_owned());
                }
                *count += 1;
            }
        }
    }
    let min_count = min_count.max(1);
    let fields = order
        .into_iter()
        .enumerate()
        .map(|(i, appeared)| {
            let entries = appeared
                .into_iter()
                .filter(|t| counts[i][t] >= min_count)
                .collect();
            FieldVocab::from_entries(entries)
        })
        .collect();
    Ok(Vocabulary { fields })
}

fn parse_label(cell: &str, schema: &Schema, row_number: usize) -> Result<u8> {
    let value: f64 = cell.trim().parse().map_err(|_| Error::Data {
        row: row_number,
        message: format!("label cell '{cell}' is not numeric"),
    })?;
    match schema.rating_threshold {
        Some(threshold) => Ok(u8::from(value > threshold)),
        None => {
            if value == 0.0 {
                Ok(0)
            } else if value == 1.0 {
                Ok(1)
            } else {
                Err(Error::Data {
                    row: row_number,
                    message: format!("label '{cell}' is not 0/1 and no rating threshold is configured"),
                })
            }
        }
    }
}

/// Encodes one raw row. Unseen feature strings map to OOV index 0;
/// multi-hot duplicates are kept so the embedding mean weights repeats.
pub fn encode_instance(row: &RawRow, schema: &Schema, vocab: &Vocabulary) -> Result<EncodedInstance> {
    let label = parse_label(&row.label_cell, schema, row.row_number)?;
    let fields = schema
        .fields
        .iter()
        .enumerate()
        .map(|(i, field)| {
            split_cell(&row.cells[i], field)
                .iter()
                .map(|t| vocab.field(i).lookup(t))
                .collect()
        })
        .collect();
    Ok(EncodedInstance { fields, label })
}

/// Reads and encodes a whole CSV file as one dataset.
pub fn load_dataset(
    path: &Path,
    schema: &Schema,
    vocab: &Vocabulary,
    domain: Domain,
    split: Split,
) -> Result<DomainDataset> {
    let rows = read_csv_rows(path, schema)?;
    let instances = rows
        .iter()
        .map(|r| encode_instance(r, schema, vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainDataset {
        instances,
        domain,
        split,
    })
}
