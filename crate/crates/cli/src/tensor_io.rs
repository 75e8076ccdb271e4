//! Raw `f32` tensor files and their `key = value` sidecars.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use noisear::{Condition, NoiseTensor};

use crate::CliError;

pub fn write_raw(path: &Path, t: &NoiseTensor<f64>) -> Result<(), CliError> {
    let bytes: Vec<u8> = t.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_raw(path: &Path, channels: usize, height: usize, width: usize) -> Result<NoiseTensor<f64>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let numel = channels * height * width;
    if bytes.len() != 4 * numel {
        return Err(CliError::Config(format!(
            "{}: {} bytes, expected {} for a {channels}x{height}x{width} f32 tensor",
            path.display(),
            bytes.len(),
            4 * numel
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(NoiseTensor::new(channels, height, width, values)?)
}

/// Rounds every value through `f32`, as [`write_raw`] does.
pub fn quantize(t: &NoiseTensor<f64>) -> NoiseTensor<f64> {
    NoiseTensor {
        values: t.values.iter().map(|&v| v as f32 as f64).collect(),
        ..t.clone()
    }
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn format_condition(c: &Condition) -> String {
    c.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_condition(s: &str) -> Result<Condition, CliError> {
    let tokens = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| CliError::Config(format!("bad condition token `{t}` in `{s}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Condition::new(tokens))
}

/// `;`-separated conditions, e.g. `0;1,2;5`.
pub fn parse_conditions(s: &str) -> Result<Vec<Condition>, CliError> {
    s.split(';').filter(|p| !p.trim().is_empty()).map(parse_condition).collect()
}

pub fn key_values(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        writeln!(out, "{k} = {v}").expect("writing to a String");
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
