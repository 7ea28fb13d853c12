//! Greedy per-stage RVQ selection against exhaustive nearest-neighbor search.

use muc_codec::rvq::{quantize, Codebooks, RvqConfig};
use muc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stage-by-stage exhaustive search: full squared distance per codeword in
/// f64, strict `<` (lowest index wins ties).
fn brute_force_codes(
    features: &Tensor<f64>,
    books: &[Tensor<f64>],
) -> (Vec<u32>, Vec<Vec<f64>>) {
    let (n, _dim) = features.dims2();
    let mut residuals: Vec<Vec<f64>> =
        (0..n).map(|p| features.row(p).to_vec()).collect();
    let mut codes = vec![0u32; n * books.len()];
    for (stage, book) in books.iter().enumerate() {
        let size = book.dims2().0;
        for (p, residual) in residuals.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..size {
                let row = book.row(j);
                let d: f64 = row
                    .iter()
                    .zip(residual.iter())
                    .map(|(&c, &x)| (x - c) * (x - c))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            codes[p * books.len() + stage] = best as u32;
            for (r, &c) in residual.iter_mut().zip(book.row(best)) {
                *r -= c;
            }
        }
    }
    (codes, residuals)
}

#[test]
fn greedy_selection_matches_exhaustive_search_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    for trial in 0..100 {
        let dim = rng.gen_range(1..=8usize);
        let size = rng.gen_range(2..=32usize);
        let stages = rng.gen_range(1..=3usize);
        let n = rng.gen_range(1..=24usize);
        let books: Vec<Tensor<f64>> =
            (0..stages).map(|_| Tensor::randn(vec![size, dim], &mut rng)).collect();
        let features = Tensor::randn(vec![n, dim], &mut rng);

        let cfg = RvqConfig::custom(stages, size, dim);
        let cb = Codebooks::from_books(cfg, books.clone()).unwrap();
        let (codes, dequant, _) = quantize(&features, &cb).unwrap();
        let (expected, residuals) = brute_force_codes(&features, &books);

        assert_eq!(codes.data(), expected.as_slice(), "trial {trial}");
        // Dequantized + final residual reconstructs the input.
        for p in 0..n {
            for d in 0..dim {
                let rebuilt = dequant.at2(p, d) + residuals[p][d];
                assert!(
                    (rebuilt - features.at2(p, d)).abs() < 1e-9,
                    "trial {trial} point {p} dim {d}"
                );
            }
        }
    }
}

#[test]
fn quantize_round_trips_codes_for_well_separated_books() {
    // When codewords sit farther apart than twice the residual norm,
    // quantize(dequantize(c)) returns c exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(778);
    let dim = 4usize;
    let size = 6usize;
    // Well-separated codewords on a coarse grid.
    let mut data = Vec::new();
    for j in 0..size {
        for d in 0..dim {
            data.push((j * 10 + d) as f64 * 3.0);
        }
    }
    let book = Tensor::from_vec(vec![size, dim], data);
    let cfg = RvqConfig::custom(1, size, dim);
    let books = Codebooks::from_books(cfg, vec![book]).unwrap();
    for _ in 0..50 {
        let n = rng.gen_range(1..=12usize);
        let indices: Vec<u32> = (0..n).map(|_| rng.gen_range(0..size as u32)).collect();
        let codes = muc_codec::rvq::CodeSeq::new(
            indices.clone(),
            n,
            1,
            size as u32,
            muc_codec::bitstream::ConfigId::Custom,
        );
        let rebuilt = muc_codec::rvq::dequantize(&codes, &books).unwrap();
        let (again, _, energies) = quantize(&rebuilt, &books).unwrap();
        assert_eq!(again.data(), indices.as_slice());
        assert!(energies[0] < 1e-18);
    }
}
