//! CSV ingestion and emission. Files are UTF-8, comma-separated, with a
//! header row; missing values are empty fields. Reading keeps the raw rows
//! so commands that annotate data can write the original columns back
//! byte-identically.

use std::path::Path;

use anyhow::{anyhow, bail, Result};

use latent_markov::emissions::Observation;
use latent_markov::fit::{Dataset, ModelSpec, Sequence};

use crate::config::DataBlock;

/// A CSV file in memory: header names plus raw field rows.
#[derive(Debug, Clone)]
pub struct Table {
    pub path: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: Vec<String>) -> Self {
        Table {
            path: String::new(),
            headers,
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            anyhow!(
                "data file {}: no column named \"{name}\" (header has: {})",
                self.path,
                self.headers.join(", ")
            )
        })
    }

    /// 1-based file line of a data row (the header is line 1).
    fn line(&self, row: usize) -> usize {
        row + 2
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| anyhow!("data file {}: {e}", path.display()))?;
    let headers = reader
        .headers()
        .map_err(|e| anyhow!("data file {}: {e}", path.display()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| anyhow!("data file {}: {e}", path.display()))?;
        rows.push(record.iter().map(str::to_owned).collect());
    }
    Ok(Table {
        path: path.display().to_string(),
        headers,
        rows,
    })
}

pub fn write_table(table: &Table, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| anyhow!("cannot write {}: {e}", path.display()))?;
    writer
        .write_record(&table.headers)
        .map_err(|e| anyhow!("cannot write {}: {e}", path.display()))?;
    for row in &table.rows {
        writer
            .write_record(row)
            .map_err(|e| anyhow!("cannot write {}: {e}", path.display()))?;
    }
    writer
        .flush()
        .map_err(|e| anyhow!("cannot write {}: {e}", path.display()))?;
    Ok(())
}

/// Canonical float formatting: the shortest string that parses back to the
/// same value, so write(read(file)) is byte-identical for emitted files.
pub fn format_float(v: f64) -> String {
    format!("{v}")
}

/// A dataset bound to its source table: the model-facing sequences plus the
/// mapping from each raw row to its (sequence, observation) slot.
#[derive(Debug)]
pub struct BoundData {
    pub dataset: Dataset,
    pub table: Table,
    pub row_map: Vec<(usize, usize)>,
    /// Sequence labels in dataset order; empty string when no id column.
    pub ids: Vec<String>,
}

struct Columns {
    id: Option<usize>,
    time: Option<usize>,
    values: Vec<usize>,
    event: Option<usize>,
    covariates: Vec<usize>,
}

fn resolve_columns(table: &Table, block: &DataBlock) -> Result<Columns> {
    let lookup = |name: &str| table.column(name);
    Ok(Columns {
        id: block.id.as_deref().map(lookup).transpose()?,
        time: block.time.as_deref().map(lookup).transpose()?,
        values: block
            .values
            .iter()
            .map(|n| lookup(n))
            .collect::<Result<_>>()?,
        event: block.event.as_deref().map(lookup).transpose()?,
        covariates: block
            .covariates
            .iter()
            .map(|n| lookup(n))
            .collect::<Result<_>>()?,
    })
}

fn parse_field(table: &Table, row: usize, col: usize, what: &str) -> Result<f64> {
    let field = &table.rows[row][col];
    field.parse::<f64>().map_err(|_| {
        anyhow!(
            "data file {} line {}: cannot parse {what} \"{field}\" in column \"{}\"",
            table.path,
            table.line(row),
            table.headers[col]
        )
    })
}

/// Groups rows into per-id sequences (first-appearance order) and builds
/// the observation records the model classes consume.
pub fn bind(table: Table, block: &DataBlock, spec: &ModelSpec) -> Result<BoundData> {
    let cols = resolve_columns(&table, block)?;
    if spec.needs_times() && cols.time.is_none() {
        bail!("[data] time column is required for this model class");
    }

    let mut ids: Vec<String> = Vec::new();
    let mut sequences: Vec<Sequence> = Vec::new();
    let mut last_time: Vec<Option<f64>> = Vec::new();
    let mut row_map = Vec::with_capacity(table.rows.len());

    for row in 0..table.rows.len() {
        let fields = &table.rows[row];
        if fields.len() != table.headers.len() {
            bail!(
                "data file {} line {}: {} fields for {} columns",
                table.path,
                table.line(row),
                fields.len(),
                table.headers.len()
            );
        }
        let id = match cols.id {
            Some(c) => fields[c].clone(),
            None => String::new(),
        };
        let seq_idx = match ids.iter().position(|s| *s == id) {
            Some(k) => k,
            None => {
                ids.push(id);
                sequences.push(Sequence {
                    times: Vec::new(),
                    obs: Vec::new(),
                });
                last_time.push(None);
                ids.len() - 1
            }
        };
        let seq = &mut sequences[seq_idx];

        if let Some(c) = cols.time {
            let t = parse_field(&table, row, c, "time")?;
            if let Some(p) = last_time[seq_idx] {
                // Snapshot and event times must strictly increase; discrete
                // classes only need rows ordered by time.
                let bad = if spec.needs_times() { t <= p } else { t < p };
                if bad {
                    bail!(
                        "data file {} line {}: time {t} does not advance past {p} within id \"{}\"",
                        table.path,
                        table.line(row),
                        ids[seq_idx]
                    );
                }
            }
            last_time[seq_idx] = Some(t);
            if spec.needs_times() {
                if spec.is_point_process() && t <= 0.0 {
                    bail!(
                        "data file {} line {}: event times are measured from the window start and must be positive, got {t}",
                        table.path,
                        table.line(row)
                    );
                }
                seq.times.push(t);
            }
        }

        let mut values = Vec::with_capacity(cols.values.len());
        let mut missing = Vec::with_capacity(cols.values.len());
        for &c in &cols.values {
            if fields[c].is_empty() {
                values.push(0.0);
                missing.push(true);
            } else {
                values.push(parse_field(&table, row, c, "value")?);
                missing.push(false);
            }
        }
        let event = match cols.event {
            None => false,
            Some(c) => match fields[c].as_str() {
                "" | "0" => false,
                "1" => true,
                other => bail!(
                    "data file {} line {}: event marker must be 0, 1, or empty, got \"{other}\"",
                    table.path,
                    table.line(row)
                ),
            },
        };
        let mut covariates = Vec::with_capacity(cols.covariates.len());
        for &c in &cols.covariates {
            covariates.push(parse_field(&table, row, c, "covariate")?);
        }
        seq.obs.push(Observation {
            values,
            missing,
            event,
            covariates,
        });
        row_map.push((seq_idx, seq.obs.len() - 1));
    }

    if sequences.is_empty() {
        bail!("data file {}: no data rows", table.path);
    }
    Ok(BoundData {
        dataset: Dataset { sequences },
        table,
        row_map,
        ids,
    })
}
