//! Config files, run fingerprints and the metrics CSV.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{read_file, write_atomic, Error, Result};

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!("config line {}: expected key=value", n + 1)));
        };
        let k = k.trim().trim_start_matches("--");
        if k.is_empty() {
            return Err(Error::Format(format!("config line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Turns config entries into flags for `command`.
///
/// `known(key)` reports whether the subcommand has that long flag and
/// whether it takes a value. Unknown keys are skipped with a warning so one
/// file can serve several subcommands. Boolean flags are added only when the
/// value is `true` or `1`.
pub fn config_flags(entries: &[(String, String)], known: impl Fn(&str) -> Option<bool>) -> Vec<OsString> {
    let mut out = Vec::new();
    for (k, v) in entries {
        match known(k) {
            Some(true) => {
                out.push(format!("--{k}").into());
                out.push(v.into());
            }
            Some(false) => {
                if v == "true" || v == "1" {
                    out.push(format!("--{k}").into());
                }
            }
            None => log::warn!("config key {k:?} does not apply to this subcommand; ignored"),
        }
    }
    out
}

pub fn load_config(path: &Path) -> Result<Vec<(String, String)>> {
    let bytes = read_file(path)?;
    parse_config(std::str::from_utf8(&bytes).map_err(|_| Error::Format("config is not UTF-8".into()))?)
}

/// Fingerprint of a run: the subcommand, every resolved setting, and the
/// bytes of every input file. Output paths are left out, so the same run
/// aimed at a different directory has the same hash.
#[derive(Debug, Clone)]
pub struct RunHash {
    lines: Vec<String>,
}

impl RunHash {
    pub fn new(command: &str) -> Self {
        Self { lines: vec![format!("command={command}")] }
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Debug) -> &mut Self {
        self.lines.push(format!("{key}={value:?}"));
        self
    }

    pub fn input(&mut self, key: &str, bytes: &[u8]) -> &mut Self {
        self.lines.push(format!("{key}=sha256:{}", hex(&Sha256::digest(bytes))));
        self
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in &self.lines {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn hex(&self) -> String {
        hex(&self.digest())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// One row of the evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "metric,value,seed,config_hash,wall_seconds";

pub fn format_metrics(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{:?},{},{},{:.6}", r.metric, r.value, r.seed, r.config_hash, r.wall_seconds);
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_atomic(path, format_metrics(rows).as_bytes())
}
