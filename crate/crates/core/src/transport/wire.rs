//! Binary frame layout.
//!
//! ```text
//! offset size field
//! 0      4    magic "FPDT"
//! 4      1    version (1)
//! 5      1    kind
//! 6      4    round       u32 LE
//! 10     4    client_id   u32 LE
//! 14     8    n_k         u64 LE
//! 22     8    payload_len u64 LE
//! 30     ..   payload
//! ```
//!
//! Prompt payloads are `m`, `d` as u32 LE followed by `m*d` f64 LE values,
//! row-major.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::fed::ClientUpdateMsg;
use crate::model::PromptTensor;
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"FPDT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 30;
/// Upper bound on a payload; larger lengths are treated as corruption.
pub const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Hello = 1,
    Config = 2,
    GlobalPrompt = 3,
    ClientUpdate = 4,
    Done = 5,
    Error = 6,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::Hello,
            2 => Self::Config,
            3 => Self::GlobalPrompt,
            4 => Self::ClientUpdate,
            5 => Self::Done,
            6 => Self::Error,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub round: u32,
    pub client_id: u32,
    pub n_k: u64,
    pub payload: Vec<u8>,
}

fn malformed(offset: usize, reason: impl Into<String>) -> Error {
    Error::MalformedFrame {
        offset,
        reason: reason.into(),
    }
}

/// Checks whatever part of a header is present. Returns the payload length
/// once all header bytes are available.
fn check_header(bytes: &[u8]) -> Result<Option<(MessageKind, u64)>> {
    let n = bytes.len().min(4);
    if bytes[..n] != MAGIC[..n] {
        return Err(malformed(0, "bad magic"));
    }
    if let Some(&v) = bytes.get(4) {
        if v != VERSION {
            return Err(Error::UnsupportedVersion(v));
        }
    }
    let kind = match bytes.get(5) {
        Some(&k) => MessageKind::from_byte(k).ok_or_else(|| malformed(5, format!("unknown kind {k}")))?,
        None => return Ok(None),
    };
    if bytes.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = u64::from_le_bytes(bytes[22..30].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(malformed(22, format!("payload length {len} too large")));
    }
    Ok(Some((kind, len)))
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

impl WireMessage {
    pub fn new(kind: MessageKind, round: u32, client_id: u32, n_k: u64, payload: Vec<u8>) -> Self {
        Self {
            kind,
            round,
            client_id,
            n_k,
            payload,
        }
    }

    pub fn hello(client_id: u32) -> Self {
        Self::new(MessageKind::Hello, 0, client_id, 0, Vec::new())
    }

    pub fn config(client_id: u32, text: &str) -> Self {
        Self::new(MessageKind::Config, 0, client_id, 0, text.as_bytes().to_vec())
    }

    pub fn global_prompt<S: Scalar>(round: u32, client_id: u32, prompt: &PromptTensor<S>) -> Self {
        Self::new(MessageKind::GlobalPrompt, round, client_id, 0, encode_prompt(prompt))
    }

    pub fn client_update<S: Scalar>(u: &ClientUpdateMsg<S>) -> Self {
        Self::new(MessageKind::ClientUpdate, u.round, u.client, u.n_k, encode_prompt(&u.prompt))
    }

    pub fn done(round: u32) -> Self {
        Self::new(MessageKind::Done, round, 0, 0, Vec::new())
    }

    pub fn error(round: u32, client_id: u32, message: &str) -> Self {
        Self::new(MessageKind::Error, round, client_id, 0, message.as_bytes().to_vec())
    }

    pub fn text(&self) -> Result<&str> {
        std::str::from_utf8(&self.payload).map_err(|_| malformed(HEADER_LEN, "payload is not UTF-8"))
    }

    pub fn to_update<S: Scalar>(&self) -> Result<ClientUpdateMsg<S>> {
        if self.kind != MessageKind::ClientUpdate {
            return Err(Error::protocol(format!("expected CLIENT_UPDATE, got {:?}", self.kind)));
        }
        Ok(ClientUpdateMsg {
            round: self.round,
            client: self.client_id,
            n_k: self.n_k,
            prompt: decode_prompt(&self.payload)?,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.n_k.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        match decode_prefix(bytes)? {
            Some((msg, used)) if used == bytes.len() => Ok(msg),
            Some((_, used)) => Err(malformed(used, "trailing bytes after frame")),
            None => Err(malformed(bytes.len(), "truncated frame")),
        }
    }
}

/// Decodes the first frame of `bytes`, or `None` if it is incomplete.
pub fn decode_prefix(bytes: &[u8]) -> Result<Option<(WireMessage, usize)>> {
    let Some((kind, len)) = check_header(bytes)? else {
        return Ok(None);
    };
    let end = HEADER_LEN + len as usize;
    if bytes.len() < end {
        return Ok(None);
    }
    Ok(Some((
        WireMessage {
            kind,
            round: u32_at(bytes, 6),
            client_id: u32_at(bytes, 10),
            n_k: u64_at(bytes, 14),
            payload: bytes[HEADER_LEN..end].to_vec(),
        },
        end,
    )))
}

/// Incremental decoder over a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    /// Stream offset of `buf[0]`, for error reporting.
    base: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next whole frame, if one is buffered.
    pub fn next_message(&mut self) -> Result<Option<WireMessage>> {
        match decode_prefix(&self.buf) {
            Ok(Some((msg, used))) => {
                self.buf.drain(..used);
                self.base += used;
                Ok(Some(msg))
            }
            Ok(None) => Ok(None),
            Err(Error::MalformedFrame { offset, reason }) => Err(malformed(self.base + offset, reason)),
            Err(e) => Err(e),
        }
    }

    /// Bytes of an incomplete trailing frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

/// All whole frames in `bytes` plus the length of the incomplete tail.
pub fn decode_stream(bytes: &[u8]) -> Result<(Vec<WireMessage>, usize)> {
    let mut dec = FrameDecoder::new();
    dec.push(bytes);
    let mut out = Vec::new();
    while let Some(m) = dec.next_message()? {
        out.push(m);
    }
    Ok((out, dec.pending()))
}

pub fn encode_prompt<S: Scalar>(p: &PromptTensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * p.len());
    out.extend_from_slice(&(p.m() as u32).to_le_bytes());
    out.extend_from_slice(&(p.d() as u32).to_le_bytes());
    for v in p.as_slice() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

pub fn decode_prompt<S: Scalar>(payload: &[u8]) -> Result<PromptTensor<S>> {
    if payload.len() < 8 {
        return Err(malformed(HEADER_LEN, "prompt payload shorter than its shape"));
    }
    let (m, d) = (u32_at(payload, 0) as usize, u32_at(payload, 4) as usize);
    let expected = m.checked_mul(d).and_then(|n| n.checked_mul(8)).and_then(|n| n.checked_add(8));
    if expected != Some(payload.len()) {
        return Err(malformed(HEADER_LEN, format!("prompt payload of {} bytes does not hold {m}x{d} values", payload.len())));
    }
    let values = payload[8..]
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    PromptTensor::from_vec(m, d, values).map_err(|e| Error::protocol(format!("bad prompt payload: {e}")))
}

pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any header
/// byte.
pub fn read_message(r: &mut impl Read) -> Result<Option<WireMessage>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(malformed(got, "stream ended inside a header")),
            Ok(n) => {
                got += n;
                check_header(&header[..got])?;
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (kind, len) = check_header(&header)?.expect("full header");
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => malformed(HEADER_LEN, "stream ended inside a payload"),
        _ => e.into(),
    })?;
    Ok(Some(WireMessage {
        kind,
        round: u32_at(&header, 6),
        client_id: u32_at(&header, 10),
        n_k: u64_at(&header, 14),
        payload,
    }))
}
