//! Waveform files: two-column CSV (time_s, amplitude) and a little-endian binary array
//! with a 16-byte header: b"WAVF", u32 sample count, f64 sample rate.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use gwshm_core::signal::Waveform;

use crate::error::{CliError, CliResult};

pub const WAVF_MAGIC: [u8; 4] = *b"WAVF";

pub fn write_waveform_csv(path: &Path, w: &Waveform) -> CliResult<()> {
    let mut wr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    wr.write_record(["time_s", "amplitude"]).map_err(|e| csv_err(path, e))?;
    for (i, v) in w.samples.iter().enumerate() {
        wr.write_record([w.time(i).to_string(), v.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    wr.flush().map_err(|e| CliError::io(path.display().to_string(), e))
}

/// Reads a CSV written by [`write_waveform_csv`]; the rate comes from the first time step.
pub fn read_waveform_csv(path: &Path) -> CliResult<Waveform> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut t = Vec::new();
    let mut x = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |k: usize| -> CliResult<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| CliError::Format(format!("{}: row {}: column {} is not a number", path.display(), line + 2, k + 1)))
        };
        t.push(field(0)?);
        x.push(field(1)?);
    }
    if t.len() < 2 {
        return Err(CliError::Format(format!("{}: need at least two samples", path.display())));
    }
    let fs = (t.len() - 1) as f64 / (t[t.len() - 1] - t[0]);
    Waveform::with_start(x, fs, t[0]).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

pub fn encode_wavf(w: &Waveform) -> CliResult<Vec<u8>> {
    let n = u32::try_from(w.len()).map_err(|_| CliError::Format("waveform longer than u32::MAX samples".into()))?;
    let mut out = Vec::with_capacity(16 + 8 * w.len());
    out.extend_from_slice(&WAVF_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    for v in &w.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_wavf(bytes: &[u8]) -> CliResult<Waveform> {
    if bytes.len() < 16 || bytes[..4] != WAVF_MAGIC {
        return Err(CliError::Format("not a WAVF file".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let fs = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[16..];
    if body.len() != 8 * n {
        return Err(CliError::Format(format!("WAVF header declares {n} samples, body holds {} bytes", body.len())));
    }
    let samples = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Waveform::new(samples, fs).map_err(|e| CliError::Format(e.to_string()))
}

pub fn write_wavf(path: &Path, w: &Waveform) -> CliResult<()> {
    let bytes = encode_wavf(w)?;
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(path.display().to_string(), e))
}

pub fn read_wavf(path: &Path) -> CliResult<Waveform> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path.display().to_string(), e))?;
    decode_wavf(&bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Format(format!("{}: {e}", path.display()))
}
