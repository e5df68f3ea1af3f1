//! Federated protocol: client sampling, local rounds, prompt-only
//! aggregation, communication accounting and the round log.

pub mod aggregate;
pub mod client;
pub mod config;
pub mod ledger;
pub mod log;
pub mod runner;
pub mod select;

pub use aggregate::{aggregate, ClientUpdateMsg};
pub use client::LocalClient;
pub use config::{participants_per_round, DataSource, FedConfig};
pub use ledger::{comm_ratio, CommLedger, CommTotals, RoundComm, BYTES_PER_SCALAR};
pub use log::{read_round_log, round_log_string, write_round_log, LdpEcho, RoundRecord, ScreenEcho};
pub use runner::{
    load_datasets, make_partition, run_experiment, run_training, run_with_pool, shared_backbone, ClientPool,
    Experiment, InProcessPool, RoundView, RunOutput,
};
pub use select::select_clients;
