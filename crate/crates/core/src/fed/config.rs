//! Run configuration and its flat `key = value` text format.
//!
//! ```text
//! # comments and blank lines are ignored
//! clients = 10
//! fraction = 1.0
//! alpha = 0.5          # absent (or `iid`) means an IID split
//! trigger = cf         # enables the backdoor attack
//! malicious = 0,3
//! ```
//!
//! Keys: `clients fraction rounds batch local_steps optimizer lr seed
//! backbone_seed data_seed alpha trigger target lambda malicious clip_norm
//! laplace_b screen_tau vocab d_model d_ff max_positions m l_max train_size
//! test_size words_per_text contamination train_path test_path num_classes
//! pretrain_steps pretrain_lr pretrain_batch timeout_ms`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AttackSpec;
use crate::error::{Error, Result};
use crate::model::{ModelDims, OptimizerConfig, PretrainConfig, TrainConfig};
use crate::privacy::{LdpSpec, ScreenSpec};
use crate::rng::derive_seed;

/// Where training and test data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic {
        train_size: usize,
        test_size: usize,
        words_per_text: usize,
        contamination: f64,
    },
    Files {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub clients: usize,
    pub fraction: f64,
    pub rounds: usize,
    pub batch: usize,
    pub local_steps: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub backbone_seed: u64,
    pub data_seed: u64,
    /// Dirichlet concentration; `None` selects the IID split.
    pub alpha: Option<f64>,
    pub attack: Option<AttackSpec>,
    pub ldp: Option<LdpSpec>,
    pub screen: Option<ScreenSpec>,
    pub dims: ModelDims,
    pub prompt_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub pretrain: PretrainConfig,
    pub data: DataSource,
    pub timeout_ms: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            fraction: 1.0,
            rounds: 20,
            batch: 16,
            local_steps: 100,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            backbone_seed: 0,
            data_seed: 0,
            alpha: None,
            attack: None,
            ldp: None,
            screen: None,
            dims: ModelDims::default(),
            prompt_len: 20,
            max_len: 32,
            num_classes: 2,
            pretrain: PretrainConfig::default(),
            data: DataSource::Synthetic {
                train_size: 2000,
                test_size: 400,
                words_per_text: 8,
                contamination: 0.1,
            },
            timeout_ms: 60_000,
        }
    }
}

/// `ceil(fraction * clients)` with a tolerance for binary rounding.
pub fn participants_per_round(clients: usize, fraction: f64) -> usize {
    (((fraction * clients as f64) - 1e-9).ceil().max(0.0) as usize).min(clients)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

impl FedConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.local_steps,
            batch: self.batch,
            optimizer: self.optimizer,
        }
    }

    pub fn participants_per_round(&self) -> usize {
        participants_per_round(self.clients, self.fraction)
    }

    pub fn prompt_seed(&self) -> u64 {
        derive_seed(self.seed, "global-prompt", &[])
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return fail("clients must be at least 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return fail(format!("fraction must lie in (0, 1], got {}", self.fraction));
        }
        if self.participants_per_round() == 0 {
            return fail("no client would be selected per round".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.batch == 0 {
            return fail("batch must be at least 1".into());
        }
        if self.prompt_len == 0 || self.max_len == 0 {
            return fail("m and l_max must be positive".into());
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.optimizer.lr));
        }
        self.dims.validate()?;
        if self.prompt_len + self.max_len + 3 > self.dims.max_positions {
            return fail(format!(
                "m + l_max + 3 = {} exceeds max_positions = {}",
                self.prompt_len + self.max_len + 3,
                self.dims.max_positions
            ));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return fail(format!("alpha must be positive, got {a}"));
            }
        }
        if let Some(attack) = &self.attack {
            attack.validate(self.num_classes)?;
            if let Some(&bad) = attack.malicious_clients.iter().find(|&&c| c as usize >= self.clients) {
                return fail(format!("malicious client {bad} does not exist"));
            }
        }
        if let Some(ldp) = &self.ldp {
            ldp.validate()?;
        }
        if let Some(s) = &self.screen {
            s.validate()?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if entries.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        let cfg = Self::from_entries(entries)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_entries(mut e: BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = FedConfig::default();
        macro_rules! set {
            ($key:literal => $field:expr) => {
                if let Some(v) = e.remove($key) {
                    $field = parse($key, &v)?;
                }
            };
        }
        set!("clients" => cfg.clients);
        set!("fraction" => cfg.fraction);
        set!("rounds" => cfg.rounds);
        set!("batch" => cfg.batch);
        set!("local_steps" => cfg.local_steps);
        set!("optimizer" => cfg.optimizer.kind);
        set!("lr" => cfg.optimizer.lr);
        set!("seed" => cfg.seed);
        cfg.backbone_seed = cfg.seed;
        cfg.data_seed = cfg.seed;
        set!("backbone_seed" => cfg.backbone_seed);
        set!("data_seed" => cfg.data_seed);
        set!("vocab" => cfg.dims.vocab);
        set!("d_model" => cfg.dims.d_model);
        set!("d_ff" => cfg.dims.d_ff);
        set!("max_positions" => cfg.dims.max_positions);
        set!("m" => cfg.prompt_len);
        set!("l_max" => cfg.max_len);
        set!("num_classes" => cfg.num_classes);
        set!("pretrain_steps" => cfg.pretrain.steps);
        set!("pretrain_lr" => cfg.pretrain.lr);
        set!("pretrain_batch" => cfg.pretrain.batch);
        set!("timeout_ms" => cfg.timeout_ms);

        if let Some(v) = e.remove("alpha") {
            cfg.alpha = match v.as_str() {
                "iid" | "none" => None,
                _ => Some(parse("alpha", &v)?),
            };
        }

        let train_path = e.remove("train_path");
        let test_path = e.remove("test_path");
        let synthetic_keys = ["train_size", "test_size", "words_per_text", "contamination"];
        match (train_path, test_path) {
            (Some(train), Some(test)) => {
                if let Some(k) = synthetic_keys.iter().find(|k| e.contains_key(**k)) {
                    return Err(Error::Config(format!("{k} cannot be combined with data files")));
                }
                cfg.data = DataSource::Files {
                    train: train.into(),
                    test: test.into(),
                };
            }
            (None, None) => {
                if let DataSource::Synthetic {
                    train_size,
                    test_size,
                    words_per_text,
                    contamination,
                } = &mut cfg.data
                {
                    set!("train_size" => *train_size);
                    set!("test_size" => *test_size);
                    set!("words_per_text" => *words_per_text);
                    set!("contamination" => *contamination);
                }
            }
            _ => return Err(Error::Config("train_path and test_path must be given together".into())),
        }

        let trigger = e.remove("trigger");
        let target = e.remove("target");
        let lambda = e.remove("lambda");
        let malicious = e.remove("malicious");
        match trigger {
            Some(trigger) => {
                let malicious_clients = match malicious {
                    Some(list) => list
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| parse::<u32>("malicious", s))
                        .collect::<Result<BTreeSet<_>>>()?,
                    None => BTreeSet::new(),
                };
                cfg.attack = Some(AttackSpec {
                    trigger,
                    target_label: target.map(|v| parse("target", &v)).transpose()?.unwrap_or(0),
                    poison_rate: lambda.map(|v| parse("lambda", &v)).transpose()?.unwrap_or(1.0),
                    malicious_clients,
                });
            }
            None => {
                if target.is_some() || lambda.is_some() || malicious.is_some() {
                    return Err(Error::Config("target/lambda/malicious require a trigger".into()));
                }
            }
        }

        let clip = e.remove("clip_norm");
        let lap = e.remove("laplace_b");
        if clip.is_some() || lap.is_some() {
            cfg.ldp = Some(LdpSpec {
                clip_norm: clip.map(|v| parse("clip_norm", &v)).transpose()?.unwrap_or(f64::INFINITY),
                laplace_scale: lap.map(|v| parse("laplace_b", &v)).transpose()?.unwrap_or(0.0),
                noise_seed: derive_seed(cfg.seed, "ldp-noise", &[]),
            });
        }
        if let Some(v) = e.remove("screen_tau") {
            cfg.screen = Some(ScreenSpec {
                mad_threshold: parse("screen_tau", &v)?,
            });
        }

        if let Some(k) = e.keys().next() {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        Ok(cfg)
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("clients", self.clients.to_string());
        kv("fraction", self.fraction.to_string());
        kv("rounds", self.rounds.to_string());
        kv("batch", self.batch.to_string());
        kv("local_steps", self.local_steps.to_string());
        kv("optimizer", self.optimizer.kind.to_string());
        kv("lr", self.optimizer.lr.to_string());
        kv("seed", self.seed.to_string());
        kv("backbone_seed", self.backbone_seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("alpha", self.alpha.map_or("iid".into(), |a| a.to_string()));
        kv("vocab", self.dims.vocab.to_string());
        kv("d_model", self.dims.d_model.to_string());
        kv("d_ff", self.dims.d_ff.to_string());
        kv("max_positions", self.dims.max_positions.to_string());
        kv("m", self.prompt_len.to_string());
        kv("l_max", self.max_len.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("pretrain_steps", self.pretrain.steps.to_string());
        kv("pretrain_lr", self.pretrain.lr.to_string());
        kv("pretrain_batch", self.pretrain.batch.to_string());
        kv("timeout_ms", self.timeout_ms.to_string());
        match &self.data {
            DataSource::Synthetic {
                train_size,
                test_size,
                words_per_text,
                contamination,
            } => {
                kv("train_size", train_size.to_string());
                kv("test_size", test_size.to_string());
                kv("words_per_text", words_per_text.to_string());
                kv("contamination", contamination.to_string());
            }
            DataSource::Files { train, test } => {
                kv("train_path", train.display().to_string());
                kv("test_path", test.display().to_string());
            }
        }
        if let Some(a) = &self.attack {
            kv("trigger", a.trigger.clone());
            kv("target", a.target_label.to_string());
            kv("lambda", a.poison_rate.to_string());
            let ids: Vec<String> = a.malicious_clients.iter().map(u32::to_string).collect();
            kv("malicious", ids.join(","));
        }
        if let Some(l) = &self.ldp {
            kv("clip_norm", l.clip_norm.to_string());
            kv("laplace_b", l.laplace_scale.to_string());
        }
        if let Some(sc) = &self.screen {
            kv("screen_tau", sc.mad_threshold.to_string());
        }
        s
    }
}
