//! Property tests for the bit-exact stream container.

use muc_codec::bitstream::{
    decode_stream, encode_stream, pack_block, unpack_block, ConfigId, StreamHeader, MUC_VERSION,
};
use muc_codec::rvq::CodeSeq;
use num_bigint::BigUint;
use proptest::prelude::*;

fn header_for(
    config_id: ConfigId,
    n_codebooks: u8,
    codebook_size: u32,
    n_frames: u32,
    block_len: u16,
) -> StreamHeader {
    StreamHeader {
        version: MUC_VERSION,
        config_id,
        sample_rate: 24000,
        channels: 1,
        token_rate: 25,
        n_frames,
        n_codebooks,
        codebook_size,
        block_len,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Radix pack/unpack are exact inverses for every base the codec uses.
    #[test]
    fn pack_unpack_inverse(
        base_pick in 0usize..4,
        indices in prop::collection::vec(0u32..u32::MAX, 1..64),
    ) {
        let base = [2u32, 10, 10000, 16384][base_pick];
        let digits: Vec<u32> = indices.iter().map(|&i| i % base).collect();
        let value = pack_block(&digits, base).unwrap();
        let back = unpack_block(&value, base, digits.len()).unwrap();
        prop_assert_eq!(back, digits);
    }

    /// Stream round-trip for both presets at arbitrary frame counts.
    #[test]
    fn stream_round_trip(
        preset in 0usize..2,
        n_frames in 1usize..220,
        block_len in 1u16..80,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let (ncb, size, id) = if preset == 0 {
            (1usize, 16384u32, ConfigId::Low)
        } else {
            (4usize, 10000u32, ConfigId::High)
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u32> = (0..n_frames * ncb).map(|_| rng.gen_range(0..size)).collect();
        let codes = CodeSeq::new(data, n_frames, ncb, size, id);
        let header = header_for(id, ncb as u8, size, n_frames as u32, block_len);
        let bytes = encode_stream(std::slice::from_ref(&codes), &header).unwrap();
        let (h2, decoded) = decode_stream(&bytes).unwrap();
        prop_assert_eq!(h2, header);
        prop_assert_eq!(&decoded[0], &codes);
    }

    /// Unpack rejects values that exceed the digit range instead of wrapping.
    #[test]
    fn unpack_rejects_excess_value(count in 1usize..12) {
        let base = 10000u32;
        let limit = BigUint::from(base).pow(count as u32);
        prop_assert!(unpack_block(&limit, base, count).is_err());
        let ok = &limit - 1u32;
        prop_assert!(unpack_block(&ok, base, count).is_ok());
    }
}

/// Single-bit corruption across the whole stream never panics: every flip
/// either decodes to different indices or reports a structured error.
#[test]
fn bit_flip_fuzz_never_crashes() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9001);
    let mut flips = 0usize;
    let mut changed = 0usize;
    let mut errored = 0usize;
    while flips < 10_000 {
        let high = rng.gen_bool(0.5);
        let (ncb, size, id) = if high {
            (4usize, 10000u32, ConfigId::High)
        } else {
            (1usize, 16384u32, ConfigId::Low)
        };
        let n_frames = rng.gen_range(1..150usize);
        let data: Vec<u32> = (0..n_frames * ncb).map(|_| rng.gen_range(0..size)).collect();
        let codes = CodeSeq::new(data, n_frames, ncb, size, id);
        let header = header_for(id, ncb as u8, size, n_frames as u32, 64);
        let bytes = encode_stream(std::slice::from_ref(&codes), &header).unwrap();
        for _ in 0..40 {
            if flips >= 10_000 {
                break;
            }
            let mut corrupted = bytes.clone();
            let bit = rng.gen_range(0..corrupted.len() * 8);
            corrupted[bit / 8] ^= 1 << (bit % 8);
            match decode_stream(&corrupted) {
                Ok((h, decoded)) => {
                    if h != header || decoded[0] != codes {
                        changed += 1;
                    }
                }
                Err(_) => errored += 1,
            }
            flips += 1;
        }
    }
    // A flipped bit can never be silently absorbed.
    assert_eq!(changed + errored, flips, "some flips produced identical decodes");
    assert!(errored > 0, "expected some corruption errors over {flips} flips");
}

/// 1000 random code sequences per preset decode back exactly.
#[test]
fn thousand_round_trips_per_preset() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31337);
    for (ncb, size, id) in [(1usize, 16384u32, ConfigId::Low), (4, 10000, ConfigId::High)] {
        for _ in 0..1000 {
            let n_frames = rng.gen_range(1..120usize);
            let data: Vec<u32> = (0..n_frames * ncb).map(|_| rng.gen_range(0..size)).collect();
            let codes = CodeSeq::new(data, n_frames, ncb, size, id);
            let header = header_for(id, ncb as u8, size, n_frames as u32, 64);
            let bytes = encode_stream(std::slice::from_ref(&codes), &header).unwrap();
            let (_, decoded) = decode_stream(&bytes).unwrap();
            assert_eq!(decoded[0], codes);
        }
    }
}

/// Stereo payloads hold both channels independently.
#[test]
fn two_channel_round_trip() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5150);
    let n_frames = 77usize;
    let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
        let data: Vec<u32> = (0..n_frames).map(|_| rng.gen_range(0..16384)).collect();
        CodeSeq::new(data, n_frames, 1, 16384, ConfigId::Low)
    };
    let l = mk(&mut rng);
    let r = mk(&mut rng);
    let mut header = header_for(ConfigId::Low, 1, 16384, n_frames as u32, 64);
    header.channels = 2;
    let bytes = encode_stream(&[l.clone(), r.clone()], &header).unwrap();
    let (_, decoded) = decode_stream(&bytes).unwrap();
    assert_eq!(decoded.len(), 2);
    assert_eq!(decoded[0], l);
    assert_eq!(decoded[1], r);
}
