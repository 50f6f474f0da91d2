//! Thread-per-connection inference server hosting the decoder and tail.

use std::io::Read;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::backbone::{predict, Tail};
use crate::codec::Decoder;
use crate::entropy::CdfTable;
use crate::range_coder::{self, CodedPayload};

use super::wire::{read_message, write_message, ErrorCode, WireError, WireMessage, PROTOCOL_VERSION};
use super::RuntimeError;

/// Read-only state shared by every session.
#[derive(Debug)]
pub struct ServerModel {
    pub decoder: Decoder,
    pub tail: Tail,
    pub tables: CdfTable,
    /// Latent grid the server accepts, `(channels, height, width)`.
    pub latent_shape: (usize, usize, usize),
    pub send_logits: bool,
}

impl ServerModel {
    /// Decodes, synthesizes and classifies one payload.
    pub fn infer(&self, payload: &CodedPayload) -> Result<(usize, Vec<f32>), RuntimeError> {
        let [c, h, w] = payload.latent_shape.map(|v| v as usize);
        if (c, h, w) != self.latent_shape {
            return Err(RuntimeError::Protocol(format!(
                "latent shape {:?} does not match expected {:?}",
                (c, h, w),
                self.latent_shape
            )));
        }
        let code = range_coder::decode(payload, &self.tables)?;
        let feats = self.decoder.synthesize_tensor(&code.to_tensor())?;
        let logits = self.tail.logits(&feats)?;
        Ok((predict(&logits)[0], logits.data().to_vec()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionEnd {
    /// Peer closed at a frame boundary.
    Clean,
    /// Server sent ERROR and closed.
    Error(ErrorCode),
    /// Transport failed (reset, timeout) before a reply could be sent.
    Transport,
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub sessions: AtomicU64,
    pub clean_closes: AtomicU64,
    pub error_closes: AtomicU64,
    pub transport_closes: AtomicU64,
    pub requests: AtomicU64,
    pub request_body_bytes: AtomicU64,
}

impl ServerStats {
    pub fn get(v: &AtomicU64) -> u64 {
        v.load(Ordering::SeqCst)
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    pub stats: Arc<ServerStats>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    /// Stops accepting and waits for the accept loop.
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_inner();
        }
    }
}

/// Binds `address` and serves until the handle is shut down.
pub fn serve(address: &str, model: ServerModel) -> Result<ServerHandle, RuntimeError> {
    let listener = TcpListener::bind(address).map_err(|e| RuntimeError::Bind {
        address: address.to_string(),
        source: e,
    })?;
    let addr = listener.local_addr()?;
    let hash = model.tables.hash_hex();
    let model = Arc::new(model);
    let stats = Arc::new(ServerStats::default());
    let stop = Arc::new(AtomicBool::new(false));
    let (s2, st2) = (stats.clone(), stop.clone());
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if st2.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let model = model.clone();
            let stats = s2.clone();
            std::thread::spawn(move || {
                stats.sessions.fetch_add(1, Ordering::SeqCst);
                let end = run_session(stream, &model, &stats);
                let counter = match end {
                    SessionEnd::Clean => &stats.clean_closes,
                    SessionEnd::Error(_) => &stats.error_closes,
                    SessionEnd::Transport => &stats.transport_closes,
                };
                counter.fetch_add(1, Ordering::SeqCst);
            });
        }
    });
    log::info!("serving on {addr}, table hash {hash}");
    Ok(ServerHandle {
        addr,
        stats,
        stop,
        thread: Some(thread),
    })
}

fn send_error(stream: &mut TcpStream, code: ErrorCode, message: String) -> SessionEnd {
    log::debug!("session error {code:?}: {message}");
    let msg = WireMessage::Error {
        code: code as u16,
        message,
    };
    let end = match write_message(stream, &msg) {
        Ok(_) => SessionEnd::Error(code),
        Err(_) => return SessionEnd::Transport,
    };
    linger_close(stream);
    end
}

/// Half-closes and drains briefly, so unread input does not turn the close
/// into a reset that would discard the ERROR frame.
fn linger_close(stream: &mut TcpStream) {
    let _ = stream.shutdown(Shutdown::Write);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    let deadline = Instant::now() + Duration::from_millis(500);
    let mut sink = [0u8; 4096];
    while Instant::now() < deadline {
        match stream.read(&mut sink) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
    }
}

fn wire_error_code(e: &WireError) -> Option<ErrorCode> {
    match e {
        WireError::Version(_) => Some(ErrorCode::Version),
        WireError::Io(_) => None,
        _ => Some(ErrorCode::Malformed),
    }
}

/// Handles one connection: HELLO, then any number of requests.
pub fn run_session(mut stream: TcpStream, model: &ServerModel, stats: &ServerStats) -> SessionEnd {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let _ = stream.set_nodelay(true);
    let server_hash = model.tables.hash();
    let mut greeted = false;
    loop {
        let msg = match read_message(&mut stream) {
            Ok(None) => return SessionEnd::Clean,
            Ok(Some((m, _))) => m,
            Err(e) => {
                return match wire_error_code(&e) {
                    Some(code) => send_error(&mut stream, code, e.to_string()),
                    None => SessionEnd::Transport,
                }
            }
        };
        match msg {
            WireMessage::Hello { version, table_hash } if !greeted => {
                if version != PROTOCOL_VERSION {
                    return send_error(&mut stream, ErrorCode::Version, format!("unsupported protocol version {version}"));
                }
                if write_message(&mut stream, &WireMessage::TableHash(server_hash)).is_err() {
                    return SessionEnd::Transport;
                }
                if table_hash != server_hash {
                    return send_error(
                        &mut stream,
                        ErrorCode::HashMismatch,
                        format!("client tables {} differ from server tables {}", hex(&table_hash), hex(&server_hash)),
                    );
                }
                greeted = true;
            }
            WireMessage::InferRequest(body) if greeted => {
                let start = Instant::now();
                stats.requests.fetch_add(1, Ordering::SeqCst);
                stats.request_body_bytes.fetch_add(body.len() as u64, Ordering::SeqCst);
                let payload = match CodedPayload::from_bytes(&body) {
                    Ok(p) => p,
                    Err(e) => return send_error(&mut stream, ErrorCode::Decode, e.to_string()),
                };
                let (class, logits) = match model.infer(&payload) {
                    Ok(r) => r,
                    Err(RuntimeError::Coding(e)) => return send_error(&mut stream, ErrorCode::Decode, e.to_string()),
                    Err(e) => return send_error(&mut stream, ErrorCode::Inference, e.to_string()),
                };
                let reply = WireMessage::InferResponse {
                    class: class as u16,
                    logits: model.send_logits.then_some(logits),
                    server_us: start.elapsed().as_micros().min(u32::MAX as u128) as u32,
                };
                if write_message(&mut stream, &reply).is_err() {
                    return SessionEnd::Transport;
                }
            }
            other => {
                return send_error(
                    &mut stream,
                    ErrorCode::Protocol,
                    format!("unexpected {:?} message", other.message_type()),
                )
            }
        }
    }
}

pub(crate) fn hex(b: &[u8]) -> String {
    b.iter().map(|v| format!("{v:02x}")).collect()
}
