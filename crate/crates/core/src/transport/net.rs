//! TCP backend. The server owns the round loop; each client connects,
//! announces its id, receives the run config and rebuilds its shard from
//! it, then answers every GLOBAL_PROMPT with a CLIENT_UPDATE.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::fed::{run_with_pool, ClientPool, ClientUpdateMsg, Experiment, FedConfig, RoundView, RunOutput};
use crate::model::PromptTensor;
use crate::scalar::Scalar;
use crate::transport::wire::{read_message, write_message, MessageKind, WireMessage};

const ACCEPT_POLL: Duration = Duration::from_millis(5);

type Inbox = Receiver<(u32, Result<Option<WireMessage>>)>;

/// Server side of the networked backend.
pub struct NetworkPool {
    writers: BTreeMap<u32, TcpStream>,
    inbox: Inbox,
    timeout: Duration,
}

fn reader_loop(id: u32, mut stream: TcpStream, tx: Sender<(u32, Result<Option<WireMessage>>)>) {
    loop {
        let msg = read_message(&mut stream);
        let stop = !matches!(msg, Ok(Some(_)));
        if tx.send((id, msg)).is_err() || stop {
            return;
        }
    }
}

/// Reads the HELLO of a fresh connection, waiting at most until `deadline`.
fn read_hello(stream: &mut TcpStream, deadline: Instant) -> Result<u32> {
    let left = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
    stream.set_read_timeout(Some(left))?;
    let msg = read_message(stream)?.ok_or_else(|| Error::protocol("connection closed before HELLO"))?;
    stream.set_read_timeout(None)?;
    if msg.kind != MessageKind::Hello {
        return Err(Error::protocol(format!("expected HELLO, got {:?}", msg.kind)));
    }
    Ok(msg.client_id)
}

impl NetworkPool {
    /// Accepts connections until all `cfg.clients` ids have said HELLO,
    /// then sends each the config text. Duplicate or out-of-range ids get
    /// an ERROR frame and are dropped.
    pub fn accept(listener: &TcpListener, cfg: &FedConfig) -> Result<Self> {
        let timeout = Duration::from_millis(cfg.timeout_ms);
        let deadline = Instant::now() + timeout;
        let config_text = cfg.to_text();
        let (tx, inbox) = mpsc::channel();
        let mut writers = BTreeMap::new();
        listener.set_nonblocking(true)?;
        while writers.len() < cfg.clients {
            let mut stream = match listener.accept() {
                Ok((s, _)) => s,
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let pool = Self {
                            writers,
                            inbox,
                            timeout,
                        };
                        pool.broadcast(&WireMessage::error(0, 0, "timed out waiting for clients"));
                        return Err(Error::Timeout(format!(
                            "only {} of {} clients connected",
                            pool.writers.len(),
                            cfg.clients
                        )));
                    }
                    thread::sleep(ACCEPT_POLL);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            stream.set_nonblocking(false)?;
            stream.set_nodelay(true)?;
            let id = match read_hello(&mut stream, deadline) {
                Ok(id) => id,
                Err(e) => {
                    log::warn!("dropping connection: {e}");
                    let _ = write_message(&mut stream, &WireMessage::error(0, 0, &e.to_string()));
                    continue;
                }
            };
            let refusal = if id as usize >= cfg.clients {
                Some(format!("client id {id} out of range"))
            } else if writers.contains_key(&id) {
                Some(format!("client id {id} already connected"))
            } else {
                None
            };
            if let Some(reason) = refusal {
                log::warn!("refusing HELLO: {reason}");
                let _ = write_message(&mut stream, &WireMessage::error(0, id, &reason));
                continue;
            }
            write_message(&mut stream, &WireMessage::config(id, &config_text))?;
            let reader = stream.try_clone()?;
            let tx = tx.clone();
            thread::spawn(move || reader_loop(id, reader, tx));
            writers.insert(id, stream);
        }
        listener.set_nonblocking(false)?;
        Ok(Self {
            writers,
            inbox,
            timeout,
        })
    }

    /// Best-effort send to every connected client.
    pub fn broadcast(&self, msg: &WireMessage) {
        for mut s in self.writers.values() {
            let _ = write_message(&mut s, msg);
        }
    }

    fn collect<S: Scalar>(&mut self, round: u32, selected: &[u32]) -> Result<Vec<ClientUpdateMsg<S>>> {
        let deadline = Instant::now() + self.timeout;
        let mut got: BTreeMap<u32, ClientUpdateMsg<S>> = BTreeMap::new();
        while got.len() < selected.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            let (id, msg) = match self.inbox.recv_timeout(left) {
                Ok(x) => x,
                Err(RecvTimeoutError::Timeout) => {
                    let missing: Vec<u32> = selected.iter().copied().filter(|k| !got.contains_key(k)).collect();
                    return Err(Error::Timeout(format!("round {round}: no update from clients {missing:?}")));
                }
                Err(RecvTimeoutError::Disconnected) => return Err(Error::protocol("all client connections closed")),
            };
            let wrap = |e: Error| Error::Client {
                round,
                client: id,
                source: Box::new(e),
            };
            let msg = match msg {
                Ok(Some(m)) => m,
                Ok(None) => return Err(wrap(Error::protocol("connection closed"))),
                Err(e) => return Err(wrap(e)),
            };
            match msg.kind {
                MessageKind::ClientUpdate => {}
                MessageKind::Error => {
                    return Err(wrap(Error::protocol(format!("client reported: {}", msg.text().unwrap_or("?")))))
                }
                other => return Err(wrap(Error::protocol(format!("unexpected {other:?} frame")))),
            }
            if msg.client_id != id {
                return Err(wrap(Error::protocol(format!("update claims to be from client {}", msg.client_id))));
            }
            if !selected.contains(&id) || got.contains_key(&id) {
                return Err(wrap(Error::protocol("unsolicited update")));
            }
            got.insert(id, msg.to_update().map_err(wrap)?);
        }
        Ok(got.into_values().collect())
    }
}

impl Drop for NetworkPool {
    fn drop(&mut self) {
        for s in self.writers.values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl<S: Scalar> ClientPool<S> for NetworkPool {
    fn run_round(&mut self, round: u32, selected: &[u32], global: &PromptTensor<S>) -> Result<Vec<ClientUpdateMsg<S>>> {
        for &k in selected {
            let mut s = self
                .writers
                .get(&k)
                .ok_or_else(|| Error::protocol(format!("client {k} is not connected")))?;
            write_message(&mut s, &WireMessage::global_prompt(round, k, global)).map_err(|e| Error::Client {
                round,
                client: k,
                source: Box::new(e),
            })?;
        }
        self.collect(round, selected)
    }
}

/// Runs the whole federation over `listener`. On any failure an ERROR
/// frame is broadcast before the error is returned; on success every
/// client receives DONE.
pub fn serve<S, O>(exp: &Experiment<S>, listener: &TcpListener, observer: O) -> Result<RunOutput<S>>
where
    S: Scalar,
    O: FnMut(&RoundView<'_, S>) -> Result<()>,
{
    let mut pool = NetworkPool::accept(listener, &exp.config)?;
    match run_with_pool(exp, &mut pool, observer) {
        Ok(out) => {
            pool.broadcast(&WireMessage::done(exp.config.rounds as u32));
            Ok(out)
        }
        Err(e) => {
            pool.broadcast(&WireMessage::error(0, 0, &e.to_string()));
            Err(e)
        }
    }
}

/// Binds `addr` and serves one run.
pub fn serve_addr<S: Scalar>(exp: &Experiment<S>, addr: impl ToSocketAddrs) -> Result<RunOutput<S>> {
    let listener = TcpListener::bind(addr)?;
    serve(exp, &listener, |_| Ok(()))
}

/// What a client did before the server said DONE.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientReport {
    pub client: u32,
    pub rounds_served: usize,
}

/// Connects as client `k`, rebuilds its shard from the server's config and
/// serves rounds until DONE. An ERROR frame from the server ends the
/// session with a protocol error.
pub fn connect_client<S: Scalar>(k: u32, addr: SocketAddr) -> Result<ClientReport> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    write_message(&mut stream, &WireMessage::hello(k))?;
    let first = read_message(&mut stream)?.ok_or_else(|| Error::protocol("server closed the connection"))?;
    let cfg = match first.kind {
        MessageKind::Config => FedConfig::from_text(first.text()?)?,
        MessageKind::Error => return Err(Error::protocol(format!("server refused: {}", first.text()?))),
        other => return Err(Error::protocol(format!("expected CONFIG, got {other:?}"))),
    };
    let setup = Experiment::<S>::setup(cfg).and_then(|exp| exp.client(k));
    let client = match setup {
        Ok(c) => c,
        Err(e) => {
            let _ = write_message(&mut stream, &WireMessage::error(0, k, &e.to_string()));
            return Err(e);
        }
    };
    let mut rounds_served = 0;
    loop {
        let msg = read_message(&mut stream)?.ok_or_else(|| Error::protocol("server closed the connection"))?;
        match msg.kind {
            MessageKind::GlobalPrompt => {
                let global = crate::transport::wire::decode_prompt::<S>(&msg.payload)?;
                match client.client_round(msg.round, &global) {
                    Ok(update) => write_message(&mut stream, &WireMessage::client_update(&update))?,
                    Err(e) => {
                        let _ = write_message(&mut stream, &WireMessage::error(msg.round, k, &e.to_string()));
                        return Err(e);
                    }
                }
                rounds_served += 1;
            }
            MessageKind::Done => {
                return Ok(ClientReport {
                    client: k,
                    rounds_served,
                })
            }
            MessageKind::Error => return Err(Error::protocol(format!("server aborted: {}", msg.text()?))),
            other => return Err(Error::protocol(format!("unexpected {other:?} frame"))),
        }
    }
}
