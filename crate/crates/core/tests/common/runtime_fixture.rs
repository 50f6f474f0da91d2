//! Untrained split deployment plus a frame fuzzer, shared by the runtime
//! and acceptance suites.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::time::Duration;

use rand::Rng;
use svbi::backbone::{build_teacher, BackboneSpec, SplitModel};
use svbi::codec::{CompressionModel, DecoderConfig, EncoderConfig};
use svbi::entropy::DEFAULT_MAX_ALPHABET;
use svbi::nn::seeded_rng;
use svbi::runtime::wire::{WireMessage, FRAME_HEADER_LEN, MAGIC, PROTOCOL_VERSION};
use svbi::runtime::{ClientModel, ServerModel};
use svbi::tensor::Tensor;

use super::rand_tensor;

pub struct Fixture {
    pub teacher: SplitModel,
    pub model: CompressionModel,
    pub images: Vec<Tensor>,
}

pub fn fixture(seed: u64, images: usize) -> Fixture {
    let spec = BackboneSpec {
        stage_channels: vec![16, 32, 64],
        ..BackboneSpec::default()
    };
    let teacher = build_teacher(&spec, seed).unwrap();
    let dec = DecoderConfig {
        output_channels: 32,
        ..Default::default()
    };
    let mut model = CompressionModel::new(EncoderConfig::default(), dec, seed).unwrap();
    let images: Vec<Tensor> = (0..images)
        .map(|i| rand_tensor(&[1, 3, 32, 32], seed * 1000 + i as u64))
        .collect();
    let mut bounds = vec![(0, 0); model.encoder.config.latent_channels];
    for x in &images {
        for (b, o) in bounds.iter_mut().zip(model.observed_bounds(x).unwrap()) {
            b.0 = b.0.min(o.0);
            b.1 = b.1.max(o.1);
        }
    }
    model.tables = Some(
        model
            .prior
            .freeze_tables(&model.prior_store, &bounds, 16, DEFAULT_MAX_ALPHABET)
            .unwrap(),
    );
    Fixture {
        teacher,
        model,
        images,
    }
}

pub fn server_model(model: &CompressionModel, teacher: &SplitModel, send_logits: bool) -> ServerModel {
    ServerModel {
        decoder: model.decoder.clone(),
        tail: teacher.tail.clone(),
        tables: model.tables().unwrap().clone(),
        latent_shape: (model.encoder.config.latent_channels, 8, 8),
        send_logits,
    }
}

pub fn client_model(model: &CompressionModel) -> ClientModel {
    ClientModel {
        encoder: model.encoder.clone(),
        tables: model.tables().unwrap().clone(),
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct FuzzSummary {
    pub sessions: usize,
    /// Sessions whose last frame from the server was ERROR.
    pub error_replies: usize,
    /// Sessions the server closed cleanly after zero or more good frames.
    pub clean_closes: usize,
    /// Anything else: resets, undecodable replies, timeouts.
    pub anomalies: usize,
}

fn frame(kind: u8, body: &[u8]) -> Vec<u8> {
    let mut f = MAGIC.to_vec();
    f.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    f.push(kind);
    f.extend_from_slice(&(body.len() as u32).to_le_bytes());
    f.extend_from_slice(body);
    f
}

/// One fuzzed byte stream. Mixes pure noise, corrupted headers, truncated
/// frames and garbage requests after a valid handshake.
fn fuzz_case(rng: &mut impl Rng, hash: [u8; 8], payload: &[u8]) -> Vec<u8> {
    let hello = WireMessage::Hello {
        version: PROTOCOL_VERSION,
        table_hash: hash,
    }
    .to_bytes();
    let request = WireMessage::InferRequest(payload.to_vec()).to_bytes();
    let noise = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<u8> { (0..n).map(|_| rng.random()).collect() };
    match rng.random_range(0..8) {
        0 => {
            let n = rng.random_range(0..64);
            noise(rng, n)
        }
        1 => {
            let n = rng.random_range(0..40);
            let body = noise(rng, n);
            frame(rng.random_range(0..8), &body)
        }
        2 => {
            let mut f = hello.clone();
            f.extend_from_slice(&request);
            let cut = rng.random_range(0..f.len());
            f.truncate(cut);
            f
        }
        3 => {
            let mut f = hello.clone();
            let n = rng.random_range(0..200);
            f.extend(frame(3, &noise(rng, n)));
            f
        }
        4 => {
            let mut f = hello.clone();
            let mut r = request.clone();
            let at = rng.random_range(FRAME_HEADER_LEN..r.len());
            r[at] ^= 1 << rng.random_range(0..8);
            f.extend(r);
            f
        }
        5 => {
            let mut f = hello.clone();
            f.extend_from_slice(&request);
            let at = rng.random_range(0..f.len());
            f[at] = rng.random();
            f
        }
        6 => {
            let mut f = hello.clone();
            let h = rng.random_range(0..FRAME_HEADER_LEN);
            f[h] ^= 0xFF;
            f
        }
        _ => {
            let mut f = hello;
            f.extend_from_slice(&request);
            f.extend(noise(rng, 16));
            f
        }
    }
}

/// Reads everything the server sends and classifies how the session ended.
fn classify(mut stream: TcpStream) -> Result<bool, ()> {
    let mut buf = Vec::new();
    stream.read_to_end(&mut buf).map_err(|_| ())?;
    let mut at = 0;
    let mut last_error = false;
    while at < buf.len() {
        let (msg, used) = WireMessage::parse(&buf[at..]).map_err(|_| ())?;
        last_error = matches!(msg, WireMessage::Error { .. });
        at += used;
    }
    Ok(last_error)
}

pub fn fuzz(addr: SocketAddr, hash: [u8; 8], payload: &[u8], sessions: usize, seed: u64) -> FuzzSummary {
    let mut rng = seeded_rng(seed);
    let mut s = FuzzSummary::default();
    for _ in 0..sessions {
        let bytes = fuzz_case(&mut rng, hash, payload);
        s.sessions += 1;
        let Ok(mut stream) = TcpStream::connect_timeout(&addr, Duration::from_secs(2)) else {
            s.anomalies += 1;
            continue;
        };
        let _ = stream.set_read_timeout(Some(Duration::from_secs(15)));
        if stream.write_all(&bytes).is_err() || stream.shutdown(Shutdown::Write).is_err() {
            s.anomalies += 1;
            continue;
        }
        match classify(stream) {
            Ok(true) => s.error_replies += 1,
            Ok(false) => s.clean_closes += 1,
            Err(()) => s.anomalies += 1,
        }
    }
    s
}
