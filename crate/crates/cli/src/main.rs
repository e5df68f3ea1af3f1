//! `fedprompt`: data preparation, federated runs and reports.

use std::fs;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedprompt_core::data::{gen_synthetic, load_jsonl, poison_shard, save_jsonl, split_dirichlet, split_iid, SyntheticConfig};
use fedprompt_core::fed::{load_datasets, make_partition, read_round_log, write_round_log, FedConfig, RunOutput};
use fedprompt_core::model::PromptTensor;
use fedprompt_core::report::{full_model_params, report_csv, summarize, summary_table};
use fedprompt_core::rng::derive_seed;
use fedprompt_core::transport::{connect_client, serve};
use fedprompt_core::{Error, Experiment};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  any other failure
  2  bad command-line usage
  3  missing input file
  4  malformed config or input file
  5  shape mismatch (prompt checkpoint, update or sequence)
  6  network, protocol or timeout failure
  7  numerical failure (non-finite values)";

#[derive(Parser)]
#[command(name = "fedprompt", version, about = "Federated soft-prompt tuning over a frozen backbone", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sentiment dataset as JSONL.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        words: usize,
        #[arg(long, default_value_t = 0.1)]
        contamination: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a JSONL dataset across clients and write the manifest.
    Partition {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clients: usize,
        /// Dirichlet concentration; IID when absent.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        num_classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show a client's shard before and after poisoning.
    PoisonPreview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        client: u32,
        /// Examples printed from each side.
        #[arg(long, default_value_t = 5)]
        limit: usize,
    },
    /// Run the federation in-process.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Receives round_log.jsonl and prompt.ckpt.
        #[arg(long)]
        out_dir: PathBuf,
        /// Start from this checkpoint instead of the seeded prompt.
        #[arg(long)]
        init_prompt: Option<PathBuf>,
        /// Also write the per-round CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the server of the networked backend.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve one client of the networked backend.
    Client {
        #[arg(long)]
        id: u32,
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: SocketAddr,
    },
    /// Per-round CSV and a summary table from a round log.
    Report {
        #[arg(long)]
        log: PathBuf,
        /// Config whose model sizes give the parameter counts.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the prompt parameter count.
        #[arg(long)]
        prompt_params: Option<f64>,
        /// Overrides the full-model parameter count.
        #[arg(long)]
        total_params: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Print the summary as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Io(io) if io.kind() == ErrorKind::NotFound => 3,
        Error::Config(_) | Error::Parse { .. } | Error::InvalidLabel { .. } | Error::Json(_) => 4,
        Error::ShapeMismatch(_) => 5,
        Error::Protocol(_) | Error::MalformedFrame { .. } | Error::UnsupportedVersion(_) | Error::Timeout(_) => 6,
        Error::Io(io)
            if matches!(
                io.kind(),
                ErrorKind::ConnectionRefused | ErrorKind::ConnectionReset | ErrorKind::AddrInUse | ErrorKind::TimedOut
            ) =>
        {
            6
        }
        Error::Numerical(_) => 7,
        _ => 1,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn with_path(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| {
        let code = exit_code(&e);
        Failure {
            code,
            message: format!("{}: {e}", path.display()),
        }
    }
}

fn load_config(path: &Path) -> Result<FedConfig, Failure> {
    FedConfig::from_file(path).map_err(with_path(path))
}

fn write_outputs(out: &RunOutput<f64>, dir: &Path, csv: Option<&Path>) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| with_path(dir)(e.into()))?;
    let log = dir.join("round_log.jsonl");
    write_round_log(&out.log, &log).map_err(with_path(&log))?;
    let ckpt = dir.join("prompt.ckpt");
    out.final_prompt.save(&ckpt).map_err(with_path(&ckpt))?;
    if let Some(p) = csv {
        fs::write(p, report_csv(&out.log)).map_err(|e| with_path(p)(e.into()))?;
    }
    if let Some(last) = out.log.last() {
        println!("rounds {}  final acc {:.4}", out.log.len(), last.acc);
    }
    println!("wrote {} and {}", log.display(), ckpt.display());
    Ok(())
}

fn execute(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData {
            seed,
            n,
            words,
            contamination,
            out,
        } => {
            let cfg = SyntheticConfig {
                words_per_text: words,
                contamination,
            };
            let data = gen_synthetic(seed, n, cfg, 2)?;
            save_jsonl(&data, &out).map_err(with_path(&out))?;
            println!("wrote {} examples to {}", data.len(), out.display());
        }
        Command::Partition {
            data,
            clients,
            alpha,
            seed,
            num_classes,
            out,
        } => {
            let ds = load_jsonl(&data, num_classes).map_err(with_path(&data))?;
            let p = match alpha {
                Some(a) => split_dirichlet(ds.len(), clients, a, seed)?,
                None => split_iid(ds.len(), clients, seed)?,
            };
            p.save(&out).map_err(with_path(&out))?;
            println!("shard sizes {:?}", p.counts());
        }
        Command::PoisonPreview { config, client, limit } => {
            let cfg = load_config(&config)?;
            let attack = cfg
                .attack
                .clone()
                .ok_or_else(|| Failure::from(Error::Config("the config defines no attack (set `trigger`)".into())))?;
            let (train, _) = load_datasets(&cfg)?;
            let partition = make_partition(&cfg, train.len())?;
            let idx = partition
                .shard(client as usize)
                .ok_or_else(|| Failure::from(Error::Config(format!("no client {client}"))))?;
            let shard = train.select(idx)?;
            let after = if attack.is_malicious(client) {
                poison_shard(&shard, &attack, derive_seed(cfg.seed, "poison", &[u64::from(client)]))?
            } else {
                shard.clone()
            };
            println!(
                "client {client} ({}): n_k {} -> {}",
                if attack.is_malicious(client) { "malicious" } else { "benign" },
                shard.len(),
                after.len()
            );
            println!("-- before");
            for ex in shard.examples().iter().take(limit) {
                println!("{}\t{}", ex.label, ex.text);
            }
            println!("-- after (appended copies)");
            for ex in after.examples()[shard.len()..].iter().take(limit) {
                println!("{}\t{}", ex.label, ex.text);
            }
        }
        Command::Run {
            config,
            out_dir,
            init_prompt,
            csv,
        } => {
            let cfg = load_config(&config)?;
            let mut exp = Experiment::setup(cfg)?;
            if let Some(p) = init_prompt {
                let start = PromptTensor::load(&p).map_err(with_path(&p))?;
                exp = exp.with_start_prompt(start).map_err(with_path(&p))?;
            }
            let out = fedprompt_core::fed::run_experiment(&exp)?;
            write_outputs(&out, &out_dir, csv.as_deref())?;
        }
        Command::Serve { config, bind, out_dir } => {
            let cfg = load_config(&config)?;
            let exp = Experiment::setup(cfg)?;
            let listener = TcpListener::bind(&bind).map_err(Error::from)?;
            println!("listening on {}", listener.local_addr().map_err(Error::from)?);
            let out = serve(&exp, &listener, |v| {
                println!("round {}  acc {:.4}", v.record.round, v.record.acc);
                Ok(())
            })?;
            write_outputs(&out, &out_dir, None)?;
        }
        Command::Client { id, connect } => {
            let report = connect_client::<f64>(id, connect)?;
            println!("client {} served {} rounds", report.client, report.rounds_served);
        }
        Command::Report {
            log,
            config,
            prompt_params,
            total_params,
            csv,
            json,
        } => {
            let records = read_round_log(&log).map_err(with_path(&log))?;
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => FedConfig::default(),
            };
            let prompt = prompt_params.unwrap_or((cfg.prompt_len * cfg.dims.d_model) as f64);
            let total = total_params.unwrap_or(full_model_params(cfg.dims, cfg.prompt_len) as f64);
            let summary = summarize(&records, prompt, total)?;
            match csv {
                Some(p) => fs::write(&p, report_csv(&records)).map_err(|e| with_path(&p)(e.into()))?,
                None => print!("{}", report_csv(&records)),
            }
            if json {
                println!("{}", serde_json::to_string(&summary).map_err(Error::from)?);
            } else {
                print!("{}", summary_table(&summary));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
