//! CSV, JSON and PGM artifacts. Everything written here is a pure function of its inputs so
//! repeated runs give byte-identical files.

use std::fs;
use std::path::Path;

use gwshm_core::localization::DamageMap;
use gwshm_core::protocol::DataMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{read_wavf, write_wavf};

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

/// Header plus rows of numbers, formatted with Rust's shortest round-trip representation.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> CliResult<()> {
    let mut wr = csv::Writer::from_path(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    wr.write_record(header).map_err(|e| CliError::Format(e.to_string()))?;
    for row in rows {
        wr.write_record(row.iter().map(|v| v.to_string())).map_err(|e| CliError::Format(e.to_string()))?;
    }
    wr.flush().map_err(|e| CliError::io(path.display().to_string(), e))
}

pub fn write_map_csv(path: &Path, map: &DamageMap) -> CliResult<()> {
    write_table(path, &["x", "y", "value"], map.grid.points.iter().zip(&map.values).map(|(p, v)| vec![p.0, p.1, *v]))
}

/// 8-bit binary PGM, top row = largest y.
pub fn map_pgm(map: &DamageMap) -> Vec<u8> {
    let (nx, ny) = (map.grid.nx, map.grid.ny);
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for iy in (0..ny).rev() {
        for ix in 0..nx {
            out.push((map.values[iy * nx + ix].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_map_pgm(path: &Path, map: &DamageMap) -> CliResult<()> {
    fs::write(path, map_pgm(map)).map_err(|e| CliError::io(path.display().to_string(), e))
}

/// `index.json` of a persisted data matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixIndex {
    pub node_ids: Vec<String>,
    pub f0: f64,
    pub sample_rate: f64,
    pub timestamps: Vec<f64>,
    pub records: Vec<MatrixEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub tx: String,
    pub rx: String,
    pub file: String,
    pub samples: usize,
}

pub fn save_matrix(dir: &Path, m: &DataMatrix) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display().to_string(), e))?;
    let mut records = Vec::new();
    for (i, row) in m.records.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            if let Some(w) = w {
                let file = format!("{}_{}.wavf", m.node_ids[i], m.node_ids[j]);
                write_wavf(&dir.join(&file), w)?;
                records.push(MatrixEntry { tx: m.node_ids[i].clone(), rx: m.node_ids[j].clone(), file, samples: w.len() });
            }
        }
    }
    let index = MatrixIndex { node_ids: m.node_ids.clone(), f0: m.f0, sample_rate: m.sample_rate, timestamps: m.timestamps.clone(), records };
    write_json(&dir.join("index.json"), &index)
}

pub fn load_matrix(dir: &Path) -> CliResult<DataMatrix> {
    let index: MatrixIndex = read_json(&dir.join("index.json"))?;
    let n = index.node_ids.len();
    let mut records = vec![vec![None; n]; n];
    let pos = |id: &str| {
        index.node_ids.iter().position(|x| x == id).ok_or_else(|| CliError::Format(format!("index.json: unknown node `{id}`")))
    };
    for e in &index.records {
        let w = read_wavf(&dir.join(&e.file))?;
        if w.sample_rate != index.sample_rate {
            return Err(CliError::Format(format!("{}: sample rate differs from index", e.file)));
        }
        records[pos(&e.tx)?][pos(&e.rx)?] = Some(w);
    }
    Ok(DataMatrix { node_ids: index.node_ids, records, f0: index.f0, sample_rate: index.sample_rate, timestamps: index.timestamps })
}
