//! Golden fixtures pinning the pure data formats at pipeline stage
//! boundaries: features → codes → stream bytes for one fixed clip-sized
//! feature block, plus the byte-level vectors documented in FORMAT.md.
//!
//! Regenerate with MUC_REGEN_FIXTURES=1 after an intentional format change.

use std::path::PathBuf;

use muc_codec::bitstream::{decode_stream, encode_stream, ConfigId, StreamHeader, MUC_VERSION};
use muc_codec::rvq::{dequantize, quantize, CodeSeq, Codebooks, RvqConfig};
use muc_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn regen() -> bool {
    std::env::var("MUC_REGEN_FIXTURES").is_ok()
}

/// Deterministic stand-in for one golden clip's tapped features.
fn golden_features() -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x601DC11F);
    Tensor::randn(vec![64, 4], &mut rng)
}

fn golden_books() -> Codebooks<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB00C5);
    let cfg = RvqConfig::custom(2, 8, 4);
    Codebooks::from_books(
        cfg,
        vec![Tensor::randn(vec![8, 4], &mut rng), Tensor::randn(vec![8, 4], &mut rng)],
    )
    .unwrap()
}

fn golden_header(n_frames: u32) -> StreamHeader {
    StreamHeader {
        version: MUC_VERSION,
        config_id: ConfigId::Custom,
        sample_rate: 24000,
        channels: 1,
        token_rate: 25,
        n_frames,
        n_codebooks: 2,
        codebook_size: 8,
        block_len: 16,
    }
}

#[test]
fn golden_clip_codes_and_stream_bytes() {
    let dir = fixture_dir();
    let books_path = dir.join("golden_books.rvq");
    let codes_path = dir.join("golden_codes.json");
    let muc_path = dir.join("golden.muc");

    if regen() {
        std::fs::create_dir_all(&dir).unwrap();
        muc_codec::rvq::save_codebooks(&books_path, &golden_books()).unwrap();
    }
    let books = muc_codec::rvq::load_codebooks::<f32>(&books_path).unwrap();

    let feats = golden_features();
    let (codes, dequant, _) = quantize(&feats, &books).unwrap();
    let indices: Vec<u32> = codes.data().to_vec();

    if regen() {
        std::fs::write(&codes_path, serde_json::to_vec_pretty(&indices).unwrap()).unwrap();
    }
    let expected: Vec<u32> =
        serde_json::from_slice(&std::fs::read(&codes_path).unwrap()).unwrap();
    assert_eq!(indices, expected, "quantizer output drifted from the committed fixture");

    let header = golden_header(codes.n_frames as u32);
    let bytes = encode_stream(std::slice::from_ref(&codes), &header).unwrap();
    if regen() {
        std::fs::write(&muc_path, &bytes).unwrap();
    }
    let expected_bytes = std::fs::read(&muc_path).unwrap();
    assert_eq!(bytes, expected_bytes, "stream bytes drifted from the committed fixture");

    // And the committed stream decodes to the committed codes.
    let (h2, decoded) = decode_stream(&expected_bytes).unwrap();
    assert_eq!(h2, header);
    assert_eq!(decoded[0].data(), expected.as_slice());

    // Dequantize agrees with quantize's reconstruction bit-for-bit.
    let again = dequantize(&decoded[0], &books).unwrap();
    assert_eq!(again.data(), dequant.data());
}

/// The worked example documented in FORMAT.md, byte for byte.
#[test]
fn format_md_worked_example() {
    let header = StreamHeader {
        version: 1,
        config_id: ConfigId::Low,
        sample_rate: 24000,
        channels: 1,
        token_rate: 25,
        n_frames: 3,
        n_codebooks: 1,
        codebook_size: 16384,
        block_len: 64,
    };
    let codes = CodeSeq::new(vec![1, 16383, 42], 3, 1, 16384, ConfigId::Low);
    let bytes = encode_stream(std::slice::from_ref(&codes), &header).unwrap();
    let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
    // 24-byte prologue + ceil(3·14/8) = 6 payload bytes.
    assert_eq!(bytes.len(), 24 + 6);
    assert_eq!(
        hex,
        "4d5543310100c05d0000011900030000000100400000400001c0ffaf0200",
        "FORMAT.md worked example drifted"
    );
    let (h2, decoded) = decode_stream(&bytes).unwrap();
    assert_eq!(h2, header);
    assert_eq!(decoded[0].data(), &[1, 16383, 42]);
}
