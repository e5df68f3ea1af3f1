//! Message framing and the networked client pool. The in-process backend
//! is [`crate::fed::InProcessPool`].

pub mod net;
pub mod wire;

pub use net::{connect_client, serve, serve_addr, ClientReport, NetworkPool};
pub use wire::{decode_prefix, decode_stream, read_message, write_message, FrameDecoder, MessageKind, WireMessage};
