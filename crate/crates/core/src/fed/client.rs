use std::sync::Arc;

use crate::data::{poison_shard, Dataset};
use crate::error::{Error, Result};
use crate::fed::aggregate::ClientUpdateMsg;
use crate::model::{encode_dataset, local_train, EncodedExample, FrozenBackbone, PromptTensor, TrainConfig, Verbalizer, Vocab};
use crate::privacy::{add_laplace, LdpSpec};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

/// A client's local view: its (possibly poisoned) encoded shard plus shared
/// read-only model state.
#[derive(Clone, Debug)]
pub struct LocalClient<S> {
    pub id: u32,
    pub malicious: bool,
    shard: Vec<EncodedExample>,
    backbone: Arc<FrozenBackbone<S>>,
    verbalizer: Arc<Verbalizer>,
    train: TrainConfig,
    seed: u64,
    ldp: Option<LdpSpec>,
}

pub struct ClientSetup<'a, S> {
    pub id: u32,
    pub shard: &'a Dataset,
    pub attack: Option<&'a crate::data::AttackSpec>,
    pub backbone: Arc<FrozenBackbone<S>>,
    pub verbalizer: Arc<Verbalizer>,
    pub vocab: Vocab,
    pub prompt_len: usize,
    pub max_len: usize,
    pub train: TrainConfig,
    pub seed: u64,
    pub ldp: Option<LdpSpec>,
}

impl<S: Scalar> LocalClient<S> {
    /// Poisons the shard once (malicious clients only) and encodes it.
    pub fn new(setup: ClientSetup<'_, S>) -> Result<Self> {
        if setup.shard.is_empty() {
            return Err(Error::EmptyShard);
        }
        let malicious = setup.attack.is_some_and(|a| a.is_malicious(setup.id));
        let local = match setup.attack {
            Some(a) if malicious => {
                poison_shard(setup.shard, a, derive_seed(setup.seed, "poison", &[u64::from(setup.id)]))?
            }
            _ => setup.shard.clone(),
        };
        Ok(Self {
            id: setup.id,
            malicious,
            shard: encode_dataset(&local, &setup.vocab, setup.prompt_len, setup.max_len)?,
            backbone: setup.backbone,
            verbalizer: setup.verbalizer,
            train: setup.train,
            seed: setup.seed,
            ldp: setup.ldp,
        })
    }

    /// Size of the local training set after any poisoning.
    pub fn n_k(&self) -> u64 {
        self.shard.len() as u64
    }

    pub fn shard(&self) -> &[EncodedExample] {
        &self.shard
    }

    /// Trains a copy of the global prompt and packages the upload. Laplace
    /// noise, when configured, is added to the outgoing prompt only.
    pub fn client_round(&self, round: u32, global: &PromptTensor<S>) -> Result<ClientUpdateMsg<S>> {
        let ids = [u64::from(round), u64::from(self.id)];
        let trained = local_train(
            &self.shard,
            global,
            &self.backbone,
            &self.verbalizer,
            &self.train,
            derive_seed(self.seed, "local-train", &ids),
            self.ldp.as_ref(),
        )?;
        let prompt = match &self.ldp {
            Some(l) if l.laplace_scale > 0.0 => {
                add_laplace(&trained, l.laplace_scale, derive_seed(l.noise_seed, "ldp", &ids))?
            }
            _ => trained,
        };
        Ok(ClientUpdateMsg {
            round,
            client: self.id,
            n_k: self.n_k(),
            prompt,
        })
    }
}
