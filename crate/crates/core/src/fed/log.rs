//! Round log: one JSON object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdpEcho {
    pub clip_norm: f64,
    pub laplace_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenEcho {
    pub tau: f64,
    pub rejected: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub participants: Vec<u32>,
    pub acc: f64,
    pub asr: Option<f64>,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub prompt_l2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ldp: Option<LdpEcho>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screen: Option<ScreenEcho>,
}

pub fn round_log_string(records: &[RoundRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_round_log(records: &[RoundRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(round_log_string(records)?.as_bytes())?;
    Ok(())
}

pub fn read_round_log(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
