//! Split deployment: client encodes, server decodes and classifies.

pub mod client;
pub mod latency;
pub mod server;
pub mod wire;

use thiserror::Error;

pub use client::{Client, ClientModel, ClientTiming, InferOutcome};
pub use latency::{latency_report, standard_profiles, transfer_time_ms, ChannelProfile, LatencyReport};
pub use server::{serve, ServerHandle, ServerModel};
pub use wire::{WireError, WireMessage};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("cannot bind {address}: {source}")]
    Bind {
        address: String,
        source: std::io::Error,
    },
    #[error("channel {0} has a non-positive data rate")]
    ZeroRate(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("server error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Coding(#[from] crate::range_coder::CodingError),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error(transparent)]
    Backbone(#[from] crate::backbone::BackboneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Connect,
    Handshake,
    Encode,
    Send,
    Receive,
    Server,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Connect => "connect",
            Phase::Handshake => "handshake",
            Phase::Encode => "encode",
            Phase::Send => "send",
            Phase::Receive => "receive",
            Phase::Server => "server",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("{phase}: {source}")]
pub struct ClientError {
    pub phase: Phase,
    #[source]
    pub source: Box<RuntimeError>,
}
