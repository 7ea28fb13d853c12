//! Bit-exact serialization of code sequences: fixed-width packing for
//! power-of-two codebooks, block radix packing for the rest, inside the
//! versioned `.muc` container. Byte layout is documented in FORMAT.md.

use num_bigint::BigUint;

use crate::error::{CodecError, Result};
use crate::rvq::CodeSeq;

pub const MUC_MAGIC: &[u8; 4] = b"MUC1";
pub const MUC_VERSION: u8 = 1;

/// Preset tag carried in headers and codebook files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigId {
    /// 1 codebook × 16384 — 0.35 kbps at 25 Hz.
    Low,
    /// 4 codebooks × 10000 — 1.33 kbps at 25 Hz (block-packed).
    High,
    Custom,
}

impl ConfigId {
    pub fn code(self) -> u8 {
        match self {
            ConfigId::Low => 0,
            ConfigId::High => 1,
            ConfigId::Custom => 255,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ConfigId::Low),
            1 => Some(ConfigId::High),
            255 => Some(ConfigId::Custom),
            _ => None,
        }
    }
}

impl std::fmt::Display for ConfigId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigId::Low => write!(f, "low"),
            ConfigId::High => write!(f, "high"),
            ConfigId::Custom => write!(f, "custom"),
        }
    }
}

/// Fixed-size stream header: 4 magic bytes then 20 bytes of fields, all
/// multi-byte values little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u8,
    pub config_id: ConfigId,
    pub sample_rate: u32,
    pub channels: u8,
    pub token_rate: u16,
    /// Frames per channel.
    pub n_frames: u32,
    pub n_codebooks: u8,
    pub codebook_size: u32,
    pub block_len: u16,
}

/// Header bytes after the 4-byte magic.
pub const HEADER_FIELD_BYTES: usize = 20;
/// Total container prologue: magic + header fields.
pub const HEADER_TOTAL_BYTES: usize = 4 + HEADER_FIELD_BYTES;

impl StreamHeader {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_TOTAL_BYTES);
        out.extend_from_slice(MUC_MAGIC);
        out.push(self.version);
        out.push(self.config_id.code());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.push(self.channels);
        out.extend_from_slice(&self.token_rate.to_le_bytes());
        out.extend_from_slice(&self.n_frames.to_le_bytes());
        out.push(self.n_codebooks);
        out.extend_from_slice(&self.codebook_size.to_le_bytes());
        out.extend_from_slice(&self.block_len.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_TOTAL_BYTES);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_TOTAL_BYTES {
            return Err(CodecError::TruncatedPayload);
        }
        if &bytes[0..4] != MUC_MAGIC {
            return Err(CodecError::Bitstream("bad magic (not a .muc stream)".into()));
        }
        let version = bytes[4];
        if version != MUC_VERSION {
            return Err(CodecError::Bitstream(format!("unsupported version {version}")));
        }
        let config_id = ConfigId::from_code(bytes[5])
            .ok_or_else(|| CodecError::Bitstream(format!("unknown config id {}", bytes[5])))?;
        let header = StreamHeader {
            version,
            config_id,
            sample_rate: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
            channels: bytes[10],
            token_rate: u16::from_le_bytes(bytes[11..13].try_into().unwrap()),
            n_frames: u32::from_le_bytes(bytes[13..17].try_into().unwrap()),
            n_codebooks: bytes[17],
            codebook_size: u32::from_le_bytes(bytes[18..22].try_into().unwrap()),
            block_len: u16::from_le_bytes(bytes[22..24].try_into().unwrap()),
        };
        if header.n_codebooks == 0 || header.codebook_size < 2 {
            return Err(CodecError::Bitstream("degenerate codebook geometry".into()));
        }
        if header.block_len == 0 {
            return Err(CodecError::Bitstream("block_len must be >= 1".into()));
        }
        if header.channels != 1 && header.channels != 2 {
            return Err(CodecError::Bitstream(format!("{} channels", header.channels)));
        }
        Ok(header)
    }
}

/// Exact bit cost of `count` radix-`base` digits: bits of base^count − 1.
pub fn bits_for_digits(base: u32, count: usize) -> u64 {
    if count == 0 {
        return 0;
    }
    if base.is_power_of_two() {
        return (base.trailing_zeros() as u64) * count as u64;
    }
    let max = BigUint::from(base).pow(count as u32) - 1u32;
    max.bits()
}

/// Per-frame bit costs of a codebook geometry.
#[derive(Debug, Clone, Copy)]
pub struct BitrateInfo {
    /// n_codebooks · log2(codebook_size), before packing.
    pub exact_bits_per_frame: f64,
    /// ceil(block bits) / block_len.
    pub packed_bits_per_frame: f64,
    /// Bits of one full block of `block_len` frames.
    pub bits_per_block: u64,
}

impl BitrateInfo {
    pub fn exact_kbps(&self, token_rate: u16) -> f64 {
        self.exact_bits_per_frame * token_rate as f64 / 1000.0
    }

    pub fn packed_kbps(&self, token_rate: u16) -> f64 {
        self.packed_bits_per_frame * token_rate as f64 / 1000.0
    }
}

pub fn bits_per_frame(n_codebooks: u8, codebook_size: u32, block_len: u16) -> BitrateInfo {
    let exact = n_codebooks as f64 * (codebook_size as f64).log2();
    let count = block_len as usize * n_codebooks as usize;
    let block_bits = bits_for_digits(codebook_size, count);
    BitrateInfo {
        exact_bits_per_frame: exact,
        packed_bits_per_frame: block_bits as f64 / block_len as f64,
        bits_per_block: block_bits,
    }
}

// ── Bit-level writer/reader (little-endian bit order) ───────────────

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    /// Bits used in the final byte (0..8).
    used: u32,
}

impl BitWriter {
    fn push_bit(&mut self, bit: bool) {
        if self.used == 0 {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.len() - 1;
            self.bytes[last] |= 1 << self.used;
        }
        self.used = (self.used + 1) % 8;
    }

    /// Write the low `n_bits` of a little-endian byte string.
    fn write_le_bits(&mut self, le_bytes: &[u8], n_bits: u64) {
        for i in 0..n_bits {
            let byte = (i / 8) as usize;
            let bit = (i % 8) as u32;
            let v = le_bytes.get(byte).copied().unwrap_or(0);
            self.push_bit(v >> bit & 1 == 1);
        }
    }

    fn bit_len(&self) -> u64 {
        if self.bytes.is_empty() {
            0
        } else {
            (self.bytes.len() as u64 - 1) * 8 + if self.used == 0 { 8 } else { self.used as u64 }
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    fn read_le_bits(&mut self, n_bits: u64) -> Result<Vec<u8>> {
        let end = self.pos + n_bits;
        if end > self.bytes.len() as u64 * 8 {
            return Err(CodecError::TruncatedPayload);
        }
        let mut out = vec![0u8; n_bits.div_ceil(8) as usize];
        for i in 0..n_bits {
            let src = self.pos + i;
            let bit = self.bytes[(src / 8) as usize] >> (src % 8) & 1;
            out[(i / 8) as usize] |= bit << (i % 8);
        }
        self.pos = end;
        Ok(out)
    }
}

// ── Block radix packing ─────────────────────────────────────────────

/// Compose a flattened block of indices (frame-major, codebook-minor) into a
/// little-endian radix value: Σ idx_j · base^j.
pub fn pack_block(indices: &[u32], base: u32) -> Result<BigUint> {
    let big_base = BigUint::from(base);
    let mut value = BigUint::from(0u32);
    for &idx in indices.iter().rev() {
        if idx >= base {
            return Err(CodecError::Bitstream(format!("index {idx} >= base {base}")));
        }
        value = value * &big_base + idx;
    }
    Ok(value)
}

/// Inverse of [`pack_block`]: extract `count` digits; a non-zero remainder
/// after the last digit marks corruption.
pub fn unpack_block(value: &BigUint, base: u32, count: usize) -> Result<Vec<u32>> {
    let big_base = BigUint::from(base);
    let mut v = value.clone();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let digit = &v % &big_base;
        out.push(digit.to_u32_digits().first().copied().unwrap_or(0));
        v /= &big_base;
    }
    if v != BigUint::from(0u32) {
        return Err(CodecError::Corrupt("block value exceeds digit range".into()));
    }
    Ok(out)
}

/// Serialize per-channel code sequences under `header`. Full blocks carry
/// `bits_for_digits(base, block_len·n_codebooks)` bits; the final partial
/// block is packed at its own exact width; payload is the bit-concatenation,
/// zero-padded to a whole byte.
pub fn encode_stream(codes: &[CodeSeq], header: &StreamHeader) -> Result<Vec<u8>> {
    if codes.is_empty() || codes.len() != header.channels as usize {
        return Err(CodecError::Bitstream(format!(
            "{} channel code sequences for {}-channel header",
            codes.len(),
            header.channels
        )));
    }
    for c in codes {
        if c.n_frames != header.n_frames as usize
            || c.n_codebooks != header.n_codebooks as usize
        {
            return Err(CodecError::Bitstream(
                "code sequence dims disagree with header".into(),
            ));
        }
    }
    let base = header.codebook_size;
    let ncb = header.n_codebooks as usize;
    let block_frames = header.block_len as usize;
    let mut w = BitWriter::default();
    for ch in codes {
        for block in ch.data().chunks(block_frames * ncb) {
            let n_bits = bits_for_digits(base, block.len());
            let value = pack_block(block, base)?;
            w.write_le_bits(&value.to_bytes_le(), n_bits);
        }
    }
    let mut out = header.to_bytes();
    out.extend_from_slice(&w.bytes);
    let _ = w.bit_len();
    Ok(out)
}

/// Bit length of the payload implied by a header.
pub fn payload_bits(header: &StreamHeader) -> u64 {
    let ncb = header.n_codebooks as usize;
    let frames = header.n_frames as usize;
    let block_frames = header.block_len as usize;
    let full = frames / block_frames;
    let rem = frames % block_frames;
    let mut bits = full as u64 * bits_for_digits(header.codebook_size, block_frames * ncb);
    if rem > 0 {
        bits += bits_for_digits(header.codebook_size, rem * ncb);
    }
    bits * header.channels as u64
}

/// Exact inverse of [`encode_stream`].
pub fn decode_stream(bytes: &[u8]) -> Result<(StreamHeader, Vec<CodeSeq>)> {
    let header = StreamHeader::from_bytes(bytes)?;
    let expected_bits = payload_bits(&header);
    let expected_bytes = expected_bits.div_ceil(8) as usize;
    let payload = &bytes[HEADER_TOTAL_BYTES.min(bytes.len())..];
    if payload.len() < expected_bytes {
        return Err(CodecError::TruncatedPayload);
    }
    if payload.len() > expected_bytes {
        return Err(CodecError::Corrupt(format!(
            "{} payload bytes, header implies {expected_bytes}",
            payload.len()
        )));
    }
    // Padding bits of the final byte must be zero.
    let tail_bits = (expected_bytes as u64 * 8 - expected_bits) as u32;
    if tail_bits > 0 {
        let last = payload[expected_bytes - 1];
        if last >> (8 - tail_bits) != 0 {
            return Err(CodecError::Corrupt("non-zero padding bits".into()));
        }
    }

    let base = header.codebook_size;
    let ncb = header.n_codebooks as usize;
    let frames = header.n_frames as usize;
    let block_frames = header.block_len as usize;
    let mut r = BitReader { bytes: payload, pos: 0 };
    let mut channels = Vec::with_capacity(header.channels as usize);
    for _ in 0..header.channels {
        let mut data = Vec::with_capacity(frames * ncb);
        let mut remaining = frames;
        while remaining > 0 {
            let this = remaining.min(block_frames);
            let count = this * ncb;
            let n_bits = bits_for_digits(base, count);
            let le = r.read_le_bits(n_bits)?;
            let value = BigUint::from_bytes_le(&le);
            data.extend(unpack_block(&value, base, count)?);
            remaining -= this;
        }
        channels.push(CodeSeq::new(data, frames, ncb, base, header.config_id));
    }
    Ok((header, channels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn low_header(n_frames: u32) -> StreamHeader {
        StreamHeader {
            version: MUC_VERSION,
            config_id: ConfigId::Low,
            sample_rate: 24000,
            channels: 1,
            token_rate: 25,
            n_frames,
            n_codebooks: 1,
            codebook_size: 16384,
            block_len: 64,
        }
    }

    fn high_header(n_frames: u32, block_len: u16) -> StreamHeader {
        StreamHeader {
            version: MUC_VERSION,
            config_id: ConfigId::High,
            sample_rate: 24000,
            channels: 1,
            token_rate: 25,
            n_frames,
            n_codebooks: 4,
            codebook_size: 10000,
            block_len,
        }
    }

    #[test]
    fn header_is_4_plus_20_bytes_and_round_trips() {
        let h = high_header(896, 64);
        let bytes = h.to_bytes();
        assert_eq!(bytes.len(), HEADER_TOTAL_BYTES);
        assert_eq!(bytes.len() - 4, HEADER_FIELD_BYTES);
        let back = StreamHeader::from_bytes(&bytes).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn low_preset_is_exactly_14_bits_per_frame() {
        let info = bits_per_frame(1, 16384, 64);
        assert_eq!(info.exact_bits_per_frame, 14.0);
        assert_eq!(info.packed_bits_per_frame, 14.0);
        assert_eq!(info.exact_kbps(25), 0.35);
    }

    #[test]
    fn high_preset_block_and_frame_rates() {
        // 4·log2(10000) = 53.15 bits/frame exact → 1.3288 kbps.
        let info = bits_per_frame(4, 10000, 64);
        assert!((info.exact_bits_per_frame - 53.150849518).abs() < 1e-6);
        assert!((info.exact_kbps(25) - 1.3288).abs() < 1e-3);
        // Block of 64 frames: ceil(256·log2(10000)) = 3402 bits.
        assert_eq!(info.bits_per_block, 3402);
        assert!(info.packed_kbps(25) <= 1.336);

        // block_len = 1: ceil(53.15) = 54 bits → 1.35 kbps exactly.
        let single = bits_per_frame(4, 10000, 1);
        assert_eq!(single.bits_per_block, 54);
        assert_eq!(single.packed_kbps(25), 1.35);
    }

    #[test]
    fn pack_block_hand_radix_example() {
        // base 10, [3,1,4,1] → 3 + 1·10 + 4·100 + 1·1000 = 1413.
        let v = pack_block(&[3, 1, 4, 1], 10).unwrap();
        assert_eq!(v, BigUint::from(1413u32));
        assert_eq!(unpack_block(&v, 10, 4).unwrap(), vec![3, 1, 4, 1]);
    }

    #[test]
    fn pack_block_zeros_and_range_check() {
        let v = pack_block(&[0, 0, 0], 10000).unwrap();
        assert_eq!(v, BigUint::from(0u32));
        assert!(pack_block(&[10000], 10000).is_err());
    }

    #[test]
    fn low_896_frames_payload_is_1568_bytes() {
        // 35.84 s at 25 Hz → 896 frames × 14 bits = 1568 bytes exactly.
        let header = low_header(896);
        let codes = CodeSeq::new(
            (0..896).map(|i| (i * 37 % 16384) as u32).collect(),
            896,
            1,
            16384,
            ConfigId::Low,
        );
        let bytes = encode_stream(std::slice::from_ref(&codes), &header).unwrap();
        assert_eq!(bytes.len() - HEADER_TOTAL_BYTES, 1568);
        let (h2, decoded) = decode_stream(&bytes).unwrap();
        assert_eq!(h2, header);
        assert_eq!(decoded[0], codes);
    }

    #[test]
    fn zero_frames_is_header_only() {
        let header = low_header(0);
        let codes = CodeSeq::new(vec![], 0, 1, 16384, ConfigId::Low);
        let bytes = encode_stream(std::slice::from_ref(&codes), &header).unwrap();
        assert_eq!(bytes.len(), HEADER_TOTAL_BYTES);
        let (_, decoded) = decode_stream(&bytes).unwrap();
        assert_eq!(decoded[0].n_frames, 0);
    }

    #[test]
    fn encoding_is_deterministic() {
        let header = high_header(130, 64);
        let codes = CodeSeq::new(
            (0..130 * 4).map(|i| (i * 31 % 10000) as u32).collect(),
            130,
            4,
            10000,
            ConfigId::High,
        );
        let a = encode_stream(std::slice::from_ref(&codes), &header).unwrap();
        let b = encode_stream(std::slice::from_ref(&codes), &header).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_detected_without_partial_result() {
        let header = high_header(100, 64);
        let codes = CodeSeq::new(
            (0..400).map(|i| (i * 13 % 10000) as u32).collect(),
            100,
            4,
            10000,
            ConfigId::High,
        );
        let bytes = encode_stream(std::slice::from_ref(&codes), &header).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_stream(cut), Err(CodecError::TruncatedPayload)));
    }

    #[test]
    fn power_of_two_block_path_matches_fixed_width_layout() {
        // For base 2^14 the radix composition must equal concatenated 14-bit
        // little-endian fields.
        let codes: Vec<u32> = vec![1, 16383, 8192, 42];
        let v = pack_block(&codes, 16384).unwrap();
        let mut manual = BitWriter::default();
        for &c in &codes {
            manual.write_le_bits(&c.to_le_bytes(), 14);
        }
        let via_radix = {
            let mut w = BitWriter::default();
            w.write_le_bits(&v.to_bytes_le(), 56);
            w.bytes
        };
        assert_eq!(manual.bytes, via_radix);
    }
}
