//! Carry-less 32-bit range coder over frozen [`CdfTable`]s, and the
//! payload container that travels on the wire.
//!
//! Payload layout, little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | table hash |
//! | 6     | latent shape `C, H, W` as u16 |
//! | 4     | image dims `H, W` as u16 |
//! | 4     | body length u32 |
//! | n     | coder bytes |

use thiserror::Error;

use crate::codec::LatentCode;
use crate::entropy::CdfTable;

pub const HEADER_LEN: usize = 22;

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodingError {
    #[error("symbol {symbol} at index {index} outside channel {channel} support [{z_min}, {z_max}]")]
    OutOfSupport {
        index: usize,
        channel: usize,
        symbol: i32,
        z_min: i32,
        z_max: i32,
    },
    #[error("latent has {found} channels, table has {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("payload table hash {found} does not match loaded table {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("payload truncated: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload has {0} trailing bytes")]
    Trailing(usize),
    #[error("dimension {0} does not fit the header")]
    DimensionOverflow(usize),
    #[error("corrupt coder stream")]
    Corrupt,
    #[error("image dims must be positive")]
    ZeroDims,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedPayload {
    pub table_hash: [u8; 8],
    pub latent_shape: [u16; 3],
    pub image_dims: [u16; 2],
    pub body: Vec<u8>,
}

impl CodedPayload {
    pub fn len(&self) -> usize {
        HEADER_LEN + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.table_hash);
        for v in self.latent_shape.iter().chain(&self.image_dims) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CodedPayload, CodingError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodingError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let body_len = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as usize;
        let needed = HEADER_LEN + body_len;
        if bytes.len() < needed {
            return Err(CodingError::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(CodingError::Trailing(bytes.len() - needed));
        }
        Ok(CodedPayload {
            table_hash: bytes[..8].try_into().unwrap(),
            latent_shape: [u16_at(8), u16_at(10), u16_at(12)],
            image_dims: [u16_at(14), u16_at(16)],
            body: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

/// Encoder state: `low` and `range` over a 32-bit window.
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Narrows the interval to `[cum, cum + freq)` out of `2^precision`.
    pub fn encode(&mut self, cum: u32, freq: u32, precision: u32) {
        self.range >>= precision;
        self.low = self.low.wrapping_add(cum.wrapping_mul(self.range));
        self.range = self.range.wrapping_mul(freq);
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self, CodingError> {
        let mut d = RangeDecoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8, CodingError> {
        let b = *self.input.get(self.pos).ok_or(CodingError::Truncated {
            needed: self.pos + 1,
            available: self.input.len(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative frequency the next symbol falls on.
    pub fn target(&mut self, precision: u32) -> Result<u32, CodingError> {
        self.range >>= precision;
        if self.range == 0 {
            return Err(CodingError::Corrupt);
        }
        let v = self.code.wrapping_sub(self.low) / self.range;
        if v >= 1 << precision {
            return Err(CodingError::Corrupt);
        }
        Ok(v)
    }

    /// Consumes the symbol `[cum, cum + freq)` located via [`Self::target`].
    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<(), CodingError> {
        self.low = self.low.wrapping_add(cum.wrapping_mul(self.range));
        self.range = self.range.wrapping_mul(freq);
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

fn fit_u16(v: usize) -> Result<u16, CodingError> {
    u16::try_from(v).map_err(|_| CodingError::DimensionOverflow(v))
}

/// Range codes every symbol in channel-major order against its channel's
/// table.
pub fn encode(code: &LatentCode, table: &CdfTable) -> Result<CodedPayload, CodingError> {
    if code.channels != table.num_channels() {
        return Err(CodingError::ChannelMismatch {
            expected: table.num_channels(),
            found: code.channels,
        });
    }
    let plane = code.height * code.width;
    let mut enc = RangeEncoder::new();
    for (index, &symbol) in code.symbols.iter().enumerate() {
        let channel = index / plane.max(1);
        let ch = &table.channels[channel];
        let offset = symbol as i64 - ch.z_min as i64;
        if offset < 0 || offset >= ch.support_len() as i64 {
            return Err(CodingError::OutOfSupport {
                index,
                channel,
                symbol,
                z_min: ch.z_min,
                z_max: ch.z_max(),
            });
        }
        let o = offset as usize;
        enc.encode(ch.cdf[o], ch.cdf[o + 1] - ch.cdf[o], table.precision);
    }
    Ok(CodedPayload {
        table_hash: table.hash(),
        latent_shape: [
            fit_u16(code.channels)?,
            fit_u16(code.height)?,
            fit_u16(code.width)?,
        ],
        image_dims: [fit_u16(code.image_height)?, fit_u16(code.image_width)?],
        body: enc.finish(),
    })
}

pub fn decode(payload: &CodedPayload, table: &CdfTable) -> Result<LatentCode, CodingError> {
    let expected = table.hash();
    if payload.table_hash != expected {
        return Err(CodingError::HashMismatch {
            expected: hex(&expected),
            found: hex(&payload.table_hash),
        });
    }
    let [c, h, w] = payload.latent_shape.map(|v| v as usize);
    if c != table.num_channels() {
        return Err(CodingError::ChannelMismatch {
            expected: table.num_channels(),
            found: c,
        });
    }
    let mut dec = RangeDecoder::new(&payload.body)?;
    let plane = h * w;
    let mut symbols = Vec::with_capacity((c * plane).min(1 << 20));
    for channel in 0..c {
        let ch = &table.channels[channel];
        for _ in 0..plane {
            let t = dec.target(table.precision)?;
            let o = ch.cdf.partition_point(|&v| v <= t) - 1;
            dec.consume(ch.cdf[o], ch.cdf[o + 1] - ch.cdf[o])?;
            symbols.push(ch.z_min + o as i32);
        }
    }
    if dec.consumed() != payload.body.len() {
        return Err(CodingError::Trailing(payload.body.len() - dec.consumed()));
    }
    Ok(LatentCode {
        symbols,
        channels: c,
        height: h,
        width: w,
        image_height: payload.image_dims[0] as usize,
        image_width: payload.image_dims[1] as usize,
    })
}

/// Bits per pixel of the whole payload, header included.
pub fn bpp(payload_bytes: usize, image_height: usize, image_width: usize) -> Result<f64, CodingError> {
    if image_height == 0 || image_width == 0 {
        return Err(CodingError::ZeroDims);
    }
    Ok(payload_bytes as f64 * 8.0 / (image_height * image_width) as f64)
}

/// Clamps out-of-support symbols to the nearest table endpoint and returns
/// how many were changed.
pub fn clamp_to_support(code: &mut LatentCode, table: &CdfTable) -> usize {
    let plane = code.height * code.width;
    let mut clamped = 0;
    for (i, s) in code.symbols.iter_mut().enumerate() {
        let ch = &table.channels[(i / plane.max(1)).min(table.num_channels() - 1)];
        let v = (*s).clamp(ch.z_min, ch.z_max());
        if v != *s {
            *s = v;
            clamped += 1;
        }
    }
    if clamped > 0 {
        log::debug!("clamped {clamped} latent symbols into table support");
    }
    clamped
}

/// Σ −log₂(freq / 2^P) over the grid: the size an ideal coder would reach.
pub fn ideal_bits(code: &LatentCode, table: &CdfTable) -> f64 {
    let plane = code.height * code.width;
    code.symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| table.ideal_bits(i / plane.max(1), s))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpp_arithmetic() {
        assert!((bpp(8700, 224, 224).unwrap() - 1.387).abs() < 5e-4);
        assert_eq!(bpp(HEADER_LEN, 32, 32).unwrap(), HEADER_LEN as f64 * 8.0 / 1024.0);
        assert_eq!(bpp(200, 32, 32).unwrap(), 2.0 * bpp(100, 32, 32).unwrap());
        assert_eq!(bpp(10, 0, 32), Err(CodingError::ZeroDims));
    }

    #[test]
    fn header_round_trip() {
        let p = CodedPayload {
            table_hash: [1, 2, 3, 4, 5, 6, 7, 8],
            latent_shape: [24, 8, 8],
            image_dims: [32, 32],
            body: vec![9, 8, 7],
        };
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 3);
        assert_eq!(CodedPayload::from_bytes(&bytes).unwrap(), p);
        assert!(matches!(
            CodedPayload::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CodingError::Truncated { .. })
        ));
    }
}
