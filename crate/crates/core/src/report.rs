//! Per-round CSV for plotting and a run summary table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{comm_ratio, RoundRecord};
use crate::model::ModelDims;

pub const CSV_HEADER: &str = "round,acc,asr,upload_bytes,download_bytes,prompt_l2";

/// One row per round; `asr` is left empty when no attack was configured.
pub fn report_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let asr = r.asr.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round, r.acc, asr, r.upload_bytes, r.download_bytes, r.prompt_l2
        );
    }
    out
}

/// Scalars exchanged per client per direction if the whole model
/// (backbone plus prompt) were aggregated instead of the prompt alone.
pub fn full_model_params(dims: ModelDims, prompt_len: usize) -> usize {
    dims.param_count() + prompt_len * dims.d_model
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub final_acc: f64,
    pub final_asr: Option<f64>,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub total_bytes: u64,
    pub prompt_params: f64,
    pub total_params: f64,
    pub comm_ratio: f64,
}

pub fn summarize(records: &[RoundRecord], prompt_params: f64, total_params: f64) -> Result<Summary> {
    let last = records
        .last()
        .ok_or_else(|| Error::invalid("round log is empty"))?;
    let upload_bytes: u64 = records.iter().map(|r| r.upload_bytes).sum();
    let download_bytes: u64 = records.iter().map(|r| r.download_bytes).sum();
    Ok(Summary {
        rounds: records.len(),
        final_acc: last.acc,
        final_asr: last.asr,
        upload_bytes,
        download_bytes,
        total_bytes: upload_bytes + download_bytes,
        prompt_params,
        total_params,
        comm_ratio: comm_ratio(prompt_params, total_params)?,
    })
}

pub fn summary_table(s: &Summary) -> String {
    let mut out = String::new();
    let mut row = |k: &str, v: String| {
        let _ = writeln!(out, "{k:<16} {v}");
    };
    row("rounds", s.rounds.to_string());
    row("final_acc", format!("{:.4}", s.final_acc));
    row("final_asr", s.final_asr.map_or("-".into(), |a| format!("{a:.4}")));
    row("upload_bytes", s.upload_bytes.to_string());
    row("download_bytes", s.download_bytes.to_string());
    row("total_bytes", s.total_bytes.to_string());
    row("prompt_params", s.prompt_params.to_string());
    row("total_params", s.total_params.to_string());
    row("comm_ratio", format!("{:.6}%", s.comm_ratio * 100.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: u32, asr: Option<f64>) -> RoundRecord {
        RoundRecord {
            round,
            participants: vec![0],
            acc: 0.75,
            asr,
            upload_bytes: 10,
            download_bytes: 20,
            prompt_l2: 1.5,
            ldp: None,
            screen: None,
        }
    }

    #[test]
    fn csv_rows() {
        let csv = report_csv(&[rec(0, None), rec(1, Some(0.5))]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, [CSV_HEADER, "0,0.75,,10,20,1.5", "1,0.75,0.5,10,20,1.5"]);
    }

    #[test]
    fn summary_sums_bytes() {
        let s = summarize(&[rec(0, None), rec(1, None)], 640.0, 64_000.0).unwrap();
        assert_eq!((s.upload_bytes, s.download_bytes, s.total_bytes), (20, 40, 60));
        assert_eq!(s.comm_ratio, 0.01);
        assert!(summarize(&[], 1.0, 1.0).is_err());
    }
}
