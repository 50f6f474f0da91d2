//! Synchronous client: analyze, quantize, encode, ship, wait.

use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::codec::{quantize_eval, Encoder, LatentCode};
use crate::entropy::CdfTable;
use crate::range_coder::{self, CodedPayload};
use crate::tensor::Tensor;

use super::server::hex;
use super::wire::{read_message, write_message, ErrorCode, WireMessage, PROTOCOL_VERSION};
use super::{ClientError, Phase, RuntimeError};

/// Encoder half of the compression model plus the shared tables.
#[derive(Clone, Debug)]
pub struct ClientModel {
    pub encoder: Encoder,
    pub tables: CdfTable,
}

impl ClientModel {
    /// Rounded, clamped latent of one `1×C×H×W` image coded against the
    /// tables.
    pub fn encode(&self, x: &Tensor) -> Result<(CodedPayload, usize), RuntimeError> {
        let z = quantize_eval(&self.encoder.analyze_tensor(x)?);
        let s = x.shape();
        let mut code = LatentCode::from_tensor(&z, (s[2], s[3]))?;
        let clamped = range_coder::clamp_to_support(&mut code, &self.tables);
        Ok((range_coder::encode(&code, &self.tables)?, clamped))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientTiming {
    pub encode_us: u64,
    pub serialize_us: u64,
    pub round_trip_us: u64,
    pub server_us: u64,
    pub total_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOutcome {
    pub class: usize,
    pub logits: Option<Vec<f32>>,
    pub payload_bytes: usize,
    /// Body bytes of the INFER_REQUEST frame actually written.
    pub wire_body_bytes: usize,
    pub clamped_symbols: usize,
    pub timing: ClientTiming,
}

pub struct Client {
    stream: TcpStream,
    pub server_hash: [u8; 8],
}

fn fail<E: Into<RuntimeError>>(phase: Phase) -> impl FnOnce(E) -> ClientError {
    move |e| ClientError {
        phase,
        source: Box::new(e.into()),
    }
}

impl Client {
    /// Connects and runs the HELLO exchange.
    pub fn connect(address: &str, tables: &CdfTable, timeout: Duration) -> Result<Client, ClientError> {
        let addr = address
            .to_socket_addrs()
            .map_err(fail(Phase::Connect))?
            .next()
            .ok_or_else(|| fail(Phase::Connect)(RuntimeError::Protocol(format!("{address} resolves to nothing"))))?;
        let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(fail(Phase::Connect))?;
        stream.set_read_timeout(Some(timeout)).map_err(fail(Phase::Connect))?;
        stream.set_write_timeout(Some(timeout)).map_err(fail(Phase::Connect))?;
        let _ = stream.set_nodelay(true);
        let hash = tables.hash();
        write_message(
            &mut stream,
            &WireMessage::Hello {
                version: PROTOCOL_VERSION,
                table_hash: hash,
            },
        )
        .map_err(fail(Phase::Handshake))?;
        let server_hash = match read_message(&mut stream).map_err(fail(Phase::Handshake))? {
            Some((WireMessage::TableHash(h), _)) => h,
            Some((WireMessage::Error { code, message }, _)) => {
                return Err(fail(Phase::Handshake)(RuntimeError::Remote { code, message }))
            }
            Some((other, _)) => {
                return Err(fail(Phase::Handshake)(RuntimeError::Protocol(format!(
                    "expected TABLE_HASH, got {:?}",
                    other.message_type()
                ))))
            }
            None => return Err(fail(Phase::Handshake)(RuntimeError::Protocol("server closed".into()))),
        };
        if server_hash != hash {
            return Err(fail(Phase::Handshake)(RuntimeError::Remote {
                code: ErrorCode::HashMismatch as u16,
                message: format!("server tables {} differ from client tables {}", hex(&server_hash), hex(&hash)),
            }));
        }
        Ok(Client { stream, server_hash })
    }

    /// Sends an already-coded payload and waits for the response.
    pub fn send(&mut self, payload: &CodedPayload) -> Result<(usize, Option<Vec<f32>>, usize, ClientTiming), ClientError> {
        let t0 = Instant::now();
        let body = payload.to_bytes();
        let serialize_us = t0.elapsed().as_micros() as u64;
        let t1 = Instant::now();
        let written = write_message(&mut self.stream, &WireMessage::InferRequest(body)).map_err(fail(Phase::Send))?;
        let reply = read_message(&mut self.stream).map_err(fail(Phase::Receive))?;
        let round_trip_us = t1.elapsed().as_micros() as u64;
        match reply {
            Some((
                WireMessage::InferResponse {
                    class,
                    logits,
                    server_us,
                },
                _,
            )) => Ok((
                class as usize,
                logits,
                written,
                ClientTiming {
                    encode_us: 0,
                    serialize_us,
                    round_trip_us,
                    server_us: server_us as u64,
                    total_us: 0,
                },
            )),
            Some((WireMessage::Error { code, message }, _)) => Err(fail(Phase::Server)(RuntimeError::Remote { code, message })),
            Some((other, _)) => Err(fail(Phase::Receive)(RuntimeError::Protocol(format!(
                "expected INFER_RESPONSE, got {:?}",
                other.message_type()
            )))),
            None => Err(fail(Phase::Receive)(RuntimeError::Protocol("server closed".into()))),
        }
    }

    /// Encodes `x` locally and asks the server for its class.
    pub fn infer(&mut self, model: &ClientModel, x: &Tensor) -> Result<InferOutcome, ClientError> {
        let start = Instant::now();
        let (payload, clamped) = model.encode(x).map_err(fail(Phase::Encode))?;
        let encode_us = start.elapsed().as_micros() as u64;
        let payload_bytes = payload.len();
        let (class, logits, wire_body_bytes, mut timing) = self.send(&payload)?;
        timing.encode_us = encode_us;
        timing.total_us = start.elapsed().as_micros() as u64;
        Ok(InferOutcome {
            class,
            logits,
            payload_bytes,
            wire_body_bytes,
            clamped_symbols: clamped,
            timing,
        })
    }
}
