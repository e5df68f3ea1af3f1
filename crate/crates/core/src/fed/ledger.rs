//! Communication accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per communicated scalar (f64 on the wire).
pub const BYTES_PER_SCALAR: u64 = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundComm {
    pub round: u32,
    pub participants: Vec<u32>,
    pub uploaded_scalars: u64,
    pub downloaded_scalars: u64,
}

impl RoundComm {
    pub fn upload_bytes(&self) -> u64 {
        self.uploaded_scalars * BYTES_PER_SCALAR
    }

    pub fn download_bytes(&self) -> u64 {
        self.downloaded_scalars * BYTES_PER_SCALAR
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    /// One-off distribution of the frozen backbone to every client.
    pub setup_scalars: u64,
    pub rounds: Vec<RoundComm>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTotals {
    pub uploaded_scalars: u64,
    pub downloaded_scalars: u64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
}

impl CommLedger {
    pub fn record_setup(&mut self, backbone_scalars: u64, clients: u64) {
        self.setup_scalars += backbone_scalars * clients;
    }

    pub fn record_round(&mut self, round: RoundComm) {
        self.rounds.push(round);
    }

    /// Sums over all recorded rounds (setup excluded).
    pub fn cumulative(&self) -> CommTotals {
        let up: u64 = self.rounds.iter().map(|r| r.uploaded_scalars).sum();
        let down: u64 = self.rounds.iter().map(|r| r.downloaded_scalars).sum();
        CommTotals {
            uploaded_scalars: up,
            downloaded_scalars: down,
            upload_bytes: up * BYTES_PER_SCALAR,
            download_bytes: down * BYTES_PER_SCALAR,
        }
    }
}

/// Fraction of parameters communicated relative to a full-model exchange.
pub fn comm_ratio(prompt_params: f64, total_params: f64) -> Result<f64> {
    if !(prompt_params > 0.0 && total_params > 0.0) || !prompt_params.is_finite() || !total_params.is_finite() {
        return Err(Error::invalid("parameter counts must be positive and finite"));
    }
    if prompt_params > total_params {
        return Err(Error::invalid("prompt parameters cannot exceed the total"));
    }
    Ok(prompt_params / total_params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_rules() {
        assert_eq!(comm_ratio(5.0, 5.0).unwrap(), 1.0);
        assert!(comm_ratio(0.0, 5.0).is_err());
        assert!(comm_ratio(-1.0, 5.0).is_err());
        assert!(comm_ratio(6.0, 5.0).is_err());
    }

    #[test]
    fn cumulative_is_sum_of_rounds() {
        let mut l = CommLedger::default();
        l.record_setup(100, 2);
        for r in 0..3 {
            l.record_round(RoundComm {
                round: r,
                participants: vec![0, 1],
                uploaded_scalars: 10,
                downloaded_scalars: 20,
            });
        }
        let t = l.cumulative();
        assert_eq!((t.uploaded_scalars, t.download_bytes), (30, 480));
        assert_eq!(l.setup_scalars, 200);
    }
}
