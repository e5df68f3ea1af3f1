//! Experiment setup and the synchronous server loop.

use std::any::Any;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

use crate::data::{gen_synthetic, load_jsonl, make_poison_testset, split_dirichlet, split_iid, Dataset, Partition, SyntheticConfig};
use crate::error::{Error, Result};
use crate::fed::aggregate::{aggregate, ClientUpdateMsg};
use crate::fed::client::{ClientSetup, LocalClient};
use crate::fed::config::{DataSource, FedConfig};
use crate::fed::ledger::{CommLedger, RoundComm};
use crate::fed::log::{LdpEcho, RoundRecord, ScreenEcho};
use crate::fed::select::select_clients;
use crate::metrics::{eval_acc, eval_asr, EvalReport};
use crate::model::pretrain::default_verbalizer;
use crate::model::{encode_dataset, init_prompt, pretrained_backbone, EncodedExample, FrozenBackbone, PromptTensor, Verbalizer, Vocab};
use crate::privacy::screen_updates;
use crate::rng::derive_seed;
use crate::scalar::Scalar;

type CacheKey = (String, std::any::TypeId);
type Cache = Mutex<HashMap<CacheKey, Arc<dyn Any + Send + Sync>>>;

fn backbone_cache() -> &'static Cache {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Pre-trained backbone for `cfg`, memoized per process. Pre-training is a
/// pure function of (seed, dims, pre-training config), so sharing is safe.
pub fn shared_backbone<S: Scalar>(cfg: &FedConfig) -> Result<Arc<FrozenBackbone<S>>> {
    let key = (
        format!("{}|{:?}|{:?}", cfg.backbone_seed, cfg.dims, cfg.pretrain),
        std::any::TypeId::of::<S>(),
    );
    let cache = backbone_cache();
    if let Some(hit) = cache.lock().expect("backbone cache poisoned").get(&key) {
        if let Ok(b) = Arc::clone(hit).downcast::<FrozenBackbone<S>>() {
            return Ok(b);
        }
    }
    let built = Arc::new(pretrained_backbone::<S>(cfg.backbone_seed, cfg.dims, &cfg.pretrain)?);
    cache
        .lock()
        .expect("backbone cache poisoned")
        .insert(key, built.clone() as Arc<dyn Any + Send + Sync>);
    Ok(built)
}

/// Train and test sets described by `cfg.data`.
pub fn load_datasets(cfg: &FedConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic {
            train_size,
            test_size,
            words_per_text,
            contamination,
        } => {
            let sc = SyntheticConfig {
                words_per_text: *words_per_text,
                contamination: *contamination,
            };
            Ok((
                gen_synthetic(derive_seed(cfg.data_seed, "train-data", &[]), *train_size, sc, cfg.num_classes)?,
                gen_synthetic(derive_seed(cfg.data_seed, "test-data", &[]), *test_size, sc, cfg.num_classes)?,
            ))
        }
        DataSource::Files { train, test } => Ok((load_jsonl(train, cfg.num_classes)?, load_jsonl(test, cfg.num_classes)?)),
    }
}

/// IID or Dirichlet split of `n` training examples, as configured.
pub fn make_partition(cfg: &FedConfig, n: usize) -> Result<Partition> {
    let seed = derive_seed(cfg.data_seed, "partition", &[]);
    match cfg.alpha {
        None => split_iid(n, cfg.clients, seed),
        Some(a) => split_dirichlet(n, cfg.clients, a, seed),
    }
}

/// Everything a run needs, built deterministically from a config.
pub struct Experiment<S> {
    pub config: FedConfig,
    pub vocab: Vocab,
    pub verbalizer: Arc<Verbalizer>,
    pub backbone: Arc<FrozenBackbone<S>>,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub test_encoded: Vec<EncodedExample>,
    pub poison_test_encoded: Option<Vec<EncodedExample>>,
    /// Replaces the seeded initial prompt when set.
    pub start_prompt: Option<PromptTensor<S>>,
}

impl<S: Scalar> Experiment<S> {
    pub fn setup(config: FedConfig) -> Result<Self> {
        config.validate()?;
        let backbone = shared_backbone(&config)?;
        let (train, test) = load_datasets(&config)?;
        let partition = make_partition(&config, train.len())?;
        Self::from_parts(config, backbone, train, test, partition)
    }

    pub fn from_parts(
        config: FedConfig,
        backbone: Arc<FrozenBackbone<S>>,
        train: Dataset,
        test: Dataset,
        partition: Partition,
    ) -> Result<Self> {
        config.validate()?;
        if backbone.dims() != config.dims {
            return Err(Error::Config("backbone dimensions differ from the config".into()));
        }
        partition.validate(train.len())?;
        if partition.num_clients() != config.clients {
            return Err(Error::Config(format!(
                "partition has {} shards but the config names {} clients",
                partition.num_clients(),
                config.clients
            )));
        }
        let vocab = Vocab::new(config.dims.vocab)?;
        let verbalizer = default_verbalizer(&vocab)?;
        if verbalizer.num_classes() != config.num_classes || train.num_classes() != config.num_classes {
            return Err(Error::Config(format!(
                "the verbalizer covers {} classes, config says {}",
                verbalizer.num_classes(),
                config.num_classes
            )));
        }
        let test_encoded = encode_dataset(&test, &vocab, config.prompt_len, config.max_len)?;
        let poison_test_encoded = match &config.attack {
            Some(a) => Some(encode_dataset(
                &make_poison_testset(&test, a)?,
                &vocab,
                config.prompt_len,
                config.max_len,
            )?),
            None => None,
        };
        Ok(Self {
            config,
            vocab,
            verbalizer: Arc::new(verbalizer),
            backbone,
            train,
            test,
            partition,
            test_encoded,
            poison_test_encoded,
            start_prompt: None,
        })
    }

    pub fn initial_prompt(&self) -> Result<PromptTensor<S>> {
        match &self.start_prompt {
            Some(p) => Ok(p.clone()),
            None => init_prompt(self.config.prompt_seed(), self.config.prompt_len, self.config.dims.d_model),
        }
    }

    /// Starts training from `prompt` (for instance a saved checkpoint).
    pub fn with_start_prompt(mut self, prompt: PromptTensor<S>) -> Result<Self> {
        let want = (self.config.prompt_len, self.config.dims.d_model);
        if prompt.shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "start prompt is {:?}, the config needs {want:?}",
                prompt.shape()
            )));
        }
        if !prompt.is_finite() {
            return Err(Error::numerical("start prompt contains non-finite values"));
        }
        self.start_prompt = Some(prompt);
        Ok(self)
    }

    pub fn shard(&self, k: usize) -> Result<Dataset> {
        let idx = self
            .partition
            .shard(k)
            .ok_or_else(|| Error::invalid(format!("no client {k}")))?;
        self.train.select(idx)
    }

    pub fn client(&self, k: u32) -> Result<LocalClient<S>> {
        let shard = self.shard(k as usize)?;
        LocalClient::new(ClientSetup {
            id: k,
            shard: &shard,
            attack: self.config.attack.as_ref(),
            backbone: self.backbone.clone(),
            verbalizer: self.verbalizer.clone(),
            vocab: self.vocab.clone(),
            prompt_len: self.config.prompt_len,
            max_len: self.config.max_len,
            train: self.config.train_config(),
            seed: self.config.seed,
            ldp: self.config.ldp.clone(),
        })
        .map_err(|e| Error::Client {
            round: 0,
            client: k,
            source: Box::new(e),
        })
    }

    pub fn clients(&self) -> Result<Vec<LocalClient<S>>> {
        (0..self.config.clients as u32).map(|k| self.client(k)).collect()
    }

    pub fn evaluate(&self, prompt: &PromptTensor<S>) -> Result<EvalReport> {
        let acc = eval_acc(&self.backbone, prompt, &self.verbalizer, &self.test_encoded)?;
        let (asr, n_poison) = match (&self.poison_test_encoded, &self.config.attack) {
            (Some(set), Some(a)) => (
                Some(eval_asr(&self.backbone, prompt, &self.verbalizer, set, a.target_label)?),
                set.len(),
            ),
            _ => (None, 0),
        };
        Ok(EvalReport {
            acc,
            asr,
            n_clean: self.test_encoded.len(),
            n_poison,
        })
    }
}

/// Delivers the global prompt to the selected clients and collects their
/// updates. Backends differ only in transport.
pub trait ClientPool<S> {
    fn run_round(&mut self, round: u32, selected: &[u32], global: &PromptTensor<S>) -> Result<Vec<ClientUpdateMsg<S>>>;
}

/// Clients living in this process; a round's clients train in parallel.
pub struct InProcessPool<S> {
    clients: Vec<LocalClient<S>>,
}

impl<S: Scalar> InProcessPool<S> {
    pub fn new(clients: Vec<LocalClient<S>>) -> Self {
        Self { clients }
    }

    pub fn from_experiment(exp: &Experiment<S>) -> Result<Self> {
        Ok(Self::new(exp.clients()?))
    }
}

impl<S: Scalar> ClientPool<S> for InProcessPool<S> {
    fn run_round(&mut self, round: u32, selected: &[u32], global: &PromptTensor<S>) -> Result<Vec<ClientUpdateMsg<S>>> {
        let clients = &self.clients;
        selected
            .par_iter()
            .map(|&k| {
                let client = clients
                    .get(k as usize)
                    .ok_or_else(|| Error::protocol(format!("unknown client {k}")))?;
                client.client_round(round, global).map_err(|e| Error::Client {
                    round,
                    client: k,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

/// What the observer sees after each round.
pub struct RoundView<'a, S> {
    pub record: &'a RoundRecord,
    /// Every upload of the round, in client-id order, before screening.
    pub updates: &'a [ClientUpdateMsg<S>],
    pub global: &'a PromptTensor<S>,
}

pub struct RunOutput<S> {
    pub final_prompt: PromptTensor<S>,
    pub log: Vec<RoundRecord>,
    pub ledger: CommLedger,
}

fn check_updates<S: Scalar>(
    round: u32,
    selected: &[u32],
    global: &PromptTensor<S>,
    mut updates: Vec<ClientUpdateMsg<S>>,
) -> Result<Vec<ClientUpdateMsg<S>>> {
    updates.sort_by_key(|u| u.client);
    let ids: Vec<u32> = updates.iter().map(|u| u.client).collect();
    if ids != selected {
        return Err(Error::protocol(format!(
            "round {round}: expected updates from {selected:?}, got {ids:?}"
        )));
    }
    for u in &updates {
        let wrap = |e: Error| Error::Client {
            round,
            client: u.client,
            source: Box::new(e),
        };
        if u.round != round {
            return Err(wrap(Error::protocol(format!("update is for round {}", u.round))));
        }
        if u.prompt.shape() != global.shape() {
            return Err(wrap(Error::ShapeMismatch(format!(
                "prompt shape {:?} differs from global {:?}",
                u.prompt.shape(),
                global.shape()
            ))));
        }
        if u.n_k == 0 {
            return Err(wrap(Error::protocol("reported n_k = 0")));
        }
        if !u.prompt.is_finite() {
            return Err(wrap(Error::numerical("non-finite prompt values")));
        }
    }
    Ok(updates)
}

/// Runs all rounds against `pool`, calling `observer` after each one.
pub fn run_with_pool<S, P, O>(exp: &Experiment<S>, pool: &mut P, mut observer: O) -> Result<RunOutput<S>>
where
    S: Scalar,
    P: ClientPool<S> + ?Sized,
    O: FnMut(&RoundView<'_, S>) -> Result<()>,
{
    let cfg = &exp.config;
    let mut global = exp.initial_prompt()?;
    let scalars = global.len() as u64;
    let mut ledger = CommLedger::default();
    ledger.record_setup(exp.backbone.param_count() as u64, cfg.clients as u64);
    let mut log = Vec::with_capacity(cfg.rounds);

    for t in 0..cfg.rounds as u32 {
        let selected = select_clients(t, cfg.clients, cfg.fraction, cfg.seed);
        let updates = check_updates(t, &selected, &global, pool.run_round(t, &selected, &global)?)?;

        let (kept, screen) = match &cfg.screen {
            Some(spec) => {
                let prompts: Vec<&PromptTensor<S>> = updates.iter().map(|u| &u.prompt).collect();
                let outcome = screen_updates(&prompts, spec)?;
                if outcome.insufficient {
                    log::warn!("round {t}: fewer than 3 updates, screening skipped");
                }
                let kept: Vec<ClientUpdateMsg<S>> = outcome.accepted.iter().map(|&i| updates[i].clone()).collect();
                let echo = ScreenEcho {
                    tau: spec.mad_threshold,
                    rejected: outcome.rejected.iter().map(|&i| updates[i].client).collect(),
                };
                (kept, Some(echo))
            }
            None => (updates.clone(), None),
        };
        global = aggregate(&kept)?;

        let round = RoundComm {
            round: t,
            participants: selected.clone(),
            uploaded_scalars: updates.len() as u64 * scalars,
            downloaded_scalars: selected.len() as u64 * scalars,
        };
        let eval = exp.evaluate(&global)?;
        let record = RoundRecord {
            round: t,
            participants: selected,
            acc: eval.acc,
            asr: eval.asr,
            upload_bytes: round.upload_bytes(),
            download_bytes: round.download_bytes(),
            prompt_l2: global.l2_norm().as_f64(),
            ldp: cfg.ldp.as_ref().map(|l| LdpEcho {
                clip_norm: l.clip_norm,
                laplace_b: l.laplace_scale,
            }),
            screen,
        };
        ledger.record_round(round);
        observer(&RoundView {
            record: &record,
            updates: &updates,
            global: &global,
        })?;
        log.push(record);
    }
    Ok(RunOutput {
        final_prompt: global,
        log,
        ledger,
    })
}

/// In-process run of a prepared experiment.
pub fn run_experiment<S: Scalar>(exp: &Experiment<S>) -> Result<RunOutput<S>> {
    let mut pool = InProcessPool::from_experiment(exp)?;
    run_with_pool(exp, &mut pool, |_| Ok(()))
}

/// Builds the experiment from `cfg` and runs it in-process.
pub fn run_training<S: Scalar>(cfg: FedConfig) -> Result<RunOutput<S>> {
    run_experiment(&Experiment::setup(cfg)?)
}
