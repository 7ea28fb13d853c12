//! Residual vector quantization: cascaded codebooks with EMA updates and
//! dead-code reseeding. Encode-path nearest-neighbor distances are compared
//! in f64 with ties broken toward the lowest index, so code streams are
//! bit-reproducible; training-path scoring runs in the working dtype.

use std::fs;
use std::path::Path;

use muc_core::{Dtype, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitstream::ConfigId;
use crate::error::{CodecError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvqConfig {
    pub n_codebooks: usize,
    pub codebook_size: usize,
    pub dim: usize,
    pub ema_decay: f64,
    /// Usage fraction below which an entry counts as dead.
    pub reseed_threshold: f64,
    pub config_id: ConfigId,
}

impl RvqConfig {
    /// 1 × 16384 — the 0.35 kbps preset.
    pub fn low(dim: usize) -> Self {
        RvqConfig {
            n_codebooks: 1,
            codebook_size: 16384,
            dim,
            ema_decay: 0.99,
            reseed_threshold: 0.1 / 16384.0,
            config_id: ConfigId::Low,
        }
    }

    /// 4 × 10000 — the 1.33 kbps preset.
    pub fn high(dim: usize) -> Self {
        RvqConfig {
            n_codebooks: 4,
            codebook_size: 10000,
            dim,
            ema_decay: 0.99,
            reseed_threshold: 0.1 / 10000.0,
            config_id: ConfigId::High,
        }
    }

    pub fn custom(n_codebooks: usize, codebook_size: usize, dim: usize) -> Self {
        RvqConfig {
            n_codebooks,
            codebook_size,
            dim,
            ema_decay: 0.99,
            reseed_threshold: 0.1 / codebook_size as f64,
            config_id: ConfigId::Custom,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_codebooks < 1 {
            return Err(CodecError::Rvq("need at least one codebook".into()));
        }
        if self.codebook_size < 2 {
            return Err(CodecError::Rvq("codebook_size must be >= 2".into()));
        }
        if self.ema_decay <= 0.0 || self.ema_decay >= 1.0 {
            return Err(CodecError::Rvq("ema_decay must lie in (0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.reseed_threshold) {
            return Err(CodecError::Rvq("reseed_threshold must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Per-frame codebook indices (frame-major, codebook-minor).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSeq {
    data: Vec<u32>,
    pub n_frames: usize,
    pub n_codebooks: usize,
    pub codebook_size: u32,
    pub config_id: ConfigId,
}

impl CodeSeq {
    pub fn new(
        data: Vec<u32>,
        n_frames: usize,
        n_codebooks: usize,
        codebook_size: u32,
        config_id: ConfigId,
    ) -> Self {
        assert_eq!(data.len(), n_frames * n_codebooks);
        debug_assert!(data.iter().all(|&i| i < codebook_size));
        CodeSeq { data, n_frames, n_codebooks, codebook_size, config_id }
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn index(&self, frame: usize, stage: usize) -> u32 {
        self.data[frame * self.n_codebooks + stage]
    }
}

/// Cascaded codebooks plus the EMA statistics that train them.
#[derive(Debug, Clone)]
pub struct Codebooks<T> {
    pub cfg: RvqConfig,
    /// Per stage: (codebook_size × dim) codewords.
    books: Vec<Tensor<T>>,
    /// EMA cluster sizes.
    usage: Vec<Vec<f64>>,
    /// EMA cluster sums (codebook_size × dim).
    ema_sum: Vec<Tensor<T>>,
}

impl<T: Scalar> Codebooks<T> {
    pub fn from_books(cfg: RvqConfig, books: Vec<Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        if books.len() != cfg.n_codebooks {
            return Err(CodecError::Rvq("stage count mismatch".into()));
        }
        for b in &books {
            if b.shape() != [cfg.codebook_size, cfg.dim] {
                return Err(CodecError::Rvq(format!(
                    "codebook shape {:?}, expected [{}, {}]",
                    b.shape(),
                    cfg.codebook_size,
                    cfg.dim
                )));
            }
            if !b.all_finite() {
                return Err(CodecError::Rvq("NaN in codebook".into()));
            }
        }
        let usage = vec![vec![1.0f64; cfg.codebook_size]; cfg.n_codebooks];
        let ema_sum = books.clone();
        Ok(Codebooks { cfg, books, usage, ema_sum })
    }

    pub fn book(&self, stage: usize) -> &Tensor<T> {
        &self.books[stage]
    }

    pub fn usage(&self, stage: usize) -> &[f64] {
        &self.usage[stage]
    }

    pub fn codeword(&self, stage: usize, index: usize) -> &[T] {
        self.books[stage].row(index)
    }
}

/// Nearest codeword per row of `points` under squared L2; strict `<` keeps
/// the lowest index on exact ties. Scoring uses −2x·c + ‖c‖² (the ‖x‖² term
/// is constant per row); distances reported by `with_dist` add it back.
fn assign_nearest<S: Scalar>(
    points: &[S],
    n_points: usize,
    book: &[S],
    size: usize,
    dim: usize,
) -> (Vec<u32>, Vec<S>) {
    let mut c_norm = vec![S::zero(); size];
    for (j, cn) in c_norm.iter_mut().enumerate() {
        let row = &book[j * dim..(j + 1) * dim];
        *cn = row.iter().map(|&v| v * v).sum();
    }
    let mut out = Vec::with_capacity(n_points);
    let mut best_scores = Vec::with_capacity(n_points);
    let chunk = 2048usize.min(n_points.max(1));
    let mut scores = vec![S::zero(); chunk * size];
    let mut start = 0;
    while start < n_points {
        let n = chunk.min(n_points - start);
        let a = &points[start * dim..(start + n) * dim];
        muc_core::gemm_into(
            &mut scores[..n * size],
            n,
            dim,
            size,
            a,
            false,
            book,
            true,
            S::f(-2.0),
            S::zero(),
        );
        for p in 0..n {
            let row = &scores[p * size..(p + 1) * size];
            let mut best = 0usize;
            let mut best_d = row[0] + c_norm[0];
            for (j, (&s, &cn)) in row.iter().zip(&c_norm).enumerate().skip(1) {
                let d = s + cn;
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            out.push(best as u32);
            best_scores.push(best_d);
        }
        start += n;
    }
    (out, best_scores)
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to64()).collect()
}

/// Greedy per-stage quantization on the bit-exact f64 path. Returns the code
/// sequence, the summed dequantized reconstruction, and the mean squared
/// residual energy left after each stage.
pub fn quantize<T: Scalar>(
    features: &Tensor<T>,
    books: &Codebooks<T>,
) -> Result<(CodeSeq, Tensor<T>, Vec<f64>)> {
    let (n, dim) = features.dims2();
    if dim != books.cfg.dim {
        return Err(CodecError::Rvq(format!(
            "feature dim {dim} vs codebook dim {}",
            books.cfg.dim
        )));
    }
    let ncb = books.cfg.n_codebooks;
    let size = books.cfg.codebook_size;
    let mut residual = to_f64(features);
    let mut dequant = vec![0.0f64; n * dim];
    let mut codes = vec![0u32; n * ncb];
    let mut energies = Vec::with_capacity(ncb);
    for stage in 0..ncb {
        let book = to_f64(&books.books[stage]);
        let (assign, _) = assign_nearest(&residual, n, &book, size, dim);
        for (p, &j) in assign.iter().enumerate() {
            codes[p * ncb + stage] = j;
            let cw = &book[j as usize * dim..(j as usize + 1) * dim];
            for d in 0..dim {
                residual[p * dim + d] -= cw[d];
                dequant[p * dim + d] += cw[d];
            }
        }
        let energy = residual.iter().map(|&v| v * v).sum::<f64>() / (n.max(1) * dim) as f64;
        energies.push(energy);
    }
    let dequant_t = Tensor::from_vec(vec![n, dim], dequant.iter().map(|&v| T::f(v)).collect());
    Ok((
        CodeSeq::new(codes, n, ncb, size as u32, books.cfg.config_id),
        dequant_t,
        energies,
    ))
}

/// Sum of addressed codewords per frame (same f64 accumulation as the
/// dequantized output of [`quantize`], so the two agree bit-for-bit).
pub fn dequantize<T: Scalar>(codes: &CodeSeq, books: &Codebooks<T>) -> Result<Tensor<T>> {
    if codes.n_codebooks != books.cfg.n_codebooks {
        return Err(CodecError::Rvq("stage count mismatch".into()));
    }
    let dim = books.cfg.dim;
    let mut out = vec![0.0f64; codes.n_frames * dim];
    for f in 0..codes.n_frames {
        for stage in 0..codes.n_codebooks {
            let idx = codes.index(f, stage) as usize;
            if idx >= books.cfg.codebook_size {
                return Err(CodecError::Corrupt(format!(
                    "index {idx} out of range for stage {stage}"
                )));
            }
            let cw = books.codeword(stage, idx);
            for d in 0..dim {
                out[f * dim + d] += cw[d].to64();
            }
        }
    }
    Ok(Tensor::from_vec(
        vec![codes.n_frames, dim],
        out.iter().map(|&v| T::f(v)).collect(),
    ))
}

// ── Training primitives ─────────────────────────────────────────────

/// In-place EMA state for one stage.
struct StageState<'a, T> {
    book: &'a mut Tensor<T>,
    usage: &'a mut Vec<f64>,
    ema_sum: &'a mut Tensor<T>,
    decay: f64,
    size: usize,
    dim: usize,
}

impl<T: Scalar> StageState<'_, T> {
    /// Assign `batch` rows, update EMA stats, subtract the pre-update
    /// codewords from `batch` in place (producing the next stage's
    /// residuals). Returns the mean pre-update quantization error.
    fn update(&mut self, batch: &mut [T], n: usize) -> f64 {
        let (assign, best) = assign_nearest(batch, n, self.book.data(), self.size, self.dim);
        let x_norm: f64 = batch.iter().map(|&v| v.to64() * v.to64()).sum();
        let score_sum: f64 = best.iter().map(|&v| v.to64()).sum();
        let mean_err = ((x_norm + score_sum) / (n.max(1) * self.dim) as f64).max(0.0);

        let mut counts = vec![0.0f64; self.size];
        let mut sums = vec![T::zero(); self.size * self.dim];
        for (p, &j) in assign.iter().enumerate() {
            counts[j as usize] += 1.0;
            for d in 0..self.dim {
                sums[j as usize * self.dim + d] += batch[p * self.dim + d];
            }
        }
        for (p, &j) in assign.iter().enumerate() {
            let row = j as usize * self.dim;
            for d in 0..self.dim {
                let cw = self.book.data()[row + d];
                batch[p * self.dim + d] -= cw;
            }
        }
        let decay = T::f(self.decay);
        let one_minus = T::f(1.0 - self.decay);
        for j in 0..self.size {
            self.usage[j] = self.decay * self.usage[j] + (1.0 - self.decay) * counts[j];
            let inv = T::f(1.0 / self.usage[j].max(1e-12));
            for d in 0..self.dim {
                let idx = j * self.dim + d;
                let m = decay * self.ema_sum.data()[idx] + one_minus * sums[idx];
                self.ema_sum.data_mut()[idx] = m;
                self.book.data_mut()[idx] = m * inv;
            }
        }
        mean_err
    }

    fn reseed(&mut self, residuals: &[T], n: usize, threshold: f64, rng: &mut ChaCha8Rng) -> usize {
        let total: f64 = self.usage.iter().sum();
        let mut reseeded = 0usize;
        for j in 0..self.size {
            let frac = self.usage[j] / total.max(1e-12);
            if frac < threshold {
                let pick = rng.gen_range(0..n);
                let mean_usage = (total / self.size as f64).max(1e-4);
                self.usage[j] = mean_usage;
                let scale = T::f(mean_usage);
                for d in 0..self.dim {
                    let v = residuals[pick * self.dim + d];
                    self.book.data_mut()[j * self.dim + d] = v;
                    self.ema_sum.data_mut()[j * self.dim + d] = v * scale;
                }
                reseeded += 1;
            }
        }
        reseeded
    }
}

/// One EMA update over a batch: per stage, assigned residuals move their
/// codeword's cluster statistics; unassigned entries only decay (their
/// sum/size ratio, hence the codeword, is unchanged).
pub fn ema_update<T: Scalar>(books: &mut Codebooks<T>, batch: &Tensor<T>) -> Result<()> {
    let (n, dim) = batch.dims2();
    if dim != books.cfg.dim {
        return Err(CodecError::Rvq("feature dim mismatch".into()));
    }
    let mut residual = batch.data().to_vec();
    let decay = books.cfg.ema_decay;
    let size = books.cfg.codebook_size;
    for stage in 0..books.cfg.n_codebooks {
        let mut state = StageState {
            book: &mut books.books[stage],
            usage: &mut books.usage[stage],
            ema_sum: &mut books.ema_sum[stage],
            decay,
            size,
            dim,
        };
        state.update(&mut residual, n);
    }
    Ok(())
}

/// Re-center entries whose usage fraction fell below `threshold` on randomly
/// sampled residuals from `recent`. Returns the number reseeded per stage.
pub fn reseed_dead<T: Scalar>(
    books: &mut Codebooks<T>,
    recent: &Tensor<T>,
    threshold: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    let (n, dim) = recent.dims2();
    if n == 0 {
        return Err(CodecError::Rvq("no recent features cached".into()));
    }
    if dim != books.cfg.dim {
        return Err(CodecError::Rvq("feature dim mismatch".into()));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(CodecError::Rvq("threshold must lie in [0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = books.cfg.codebook_size;
    let decay = books.cfg.ema_decay;
    let mut counts = Vec::with_capacity(books.cfg.n_codebooks);
    let mut residual = recent.data().to_vec();
    for stage in 0..books.cfg.n_codebooks {
        let mut state = StageState {
            book: &mut books.books[stage],
            usage: &mut books.usage[stage],
            ema_sum: &mut books.ema_sum[stage],
            decay,
            size,
            dim,
        };
        counts.push(state.reseed(&residual, n, threshold, &mut rng));
        // Advance residuals with the (post-reseed) stage.
        let (assign, _) = assign_nearest(&residual, n, books.books[stage].data(), size, dim);
        for (p, &j) in assign.iter().enumerate() {
            let row = j as usize * dim;
            for d in 0..dim {
                let cw = books.books[stage].data()[row + d];
                residual[p * dim + d] -= cw;
            }
        }
    }
    Ok(counts)
}

/// Utilization (distinct indices / codebook size) and index-distribution
/// perplexity per stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StageStats {
    pub utilization: f64,
    pub perplexity: f64,
}

pub fn codebook_stats(codes: &CodeSeq) -> Result<Vec<StageStats>> {
    if codes.n_frames == 0 {
        return Err(CodecError::Rvq("empty code sequence".into()));
    }
    let size = codes.codebook_size as usize;
    let mut out = Vec::with_capacity(codes.n_codebooks);
    for stage in 0..codes.n_codebooks {
        let mut hist = vec![0u64; size];
        for f in 0..codes.n_frames {
            hist[codes.index(f, stage) as usize] += 1;
        }
        let used = hist.iter().filter(|&&c| c > 0).count();
        let n = codes.n_frames as f64;
        let entropy: f64 = hist
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        out.push(StageStats { utilization: used as f64 / size as f64, perplexity: entropy.exp() });
    }
    Ok(out)
}

// ── Training loop ───────────────────────────────────────────────────

/// Seeded k-means++-style init. When the codebook is comparable in size to
/// the buffer, sampling distinct points (with jitter once exhausted) replaces
/// the D² sweep.
fn init_stage<T: Scalar>(
    residual: &[T],
    n: usize,
    dim: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let mut book = vec![T::zero(); size * dim];
    if size * 2 >= n {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for j in 0..size {
            let src = order[j % n];
            for d in 0..dim {
                let jitter = if j >= n { T::f(rng.gen_range(-1e-4..1e-4)) } else { T::zero() };
                book[j * dim + d] = residual[src * dim + d] + jitter;
            }
        }
    } else {
        let pool: Vec<usize> = if n > 8 * size {
            (0..8 * size).map(|_| rng.gen_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let first = pool[rng.gen_range(0..pool.len())];
        book[..dim].copy_from_slice(&residual[first * dim..(first + 1) * dim]);
        let mut min_d = vec![f64::INFINITY; pool.len()];
        for j in 1..size {
            let prev = &book[(j - 1) * dim..j * dim];
            let mut total = 0.0;
            for (pi, &p) in pool.iter().enumerate() {
                let row = &residual[p * dim..(p + 1) * dim];
                let d2: f64 = row
                    .iter()
                    .zip(prev)
                    .map(|(&a, &b)| (a.to64() - b.to64()).powi(2))
                    .sum();
                min_d[pi] = min_d[pi].min(d2);
                total += min_d[pi];
            }
            let mut target = rng.gen_range(0.0..total.max(1e-12));
            let mut pick = pool.len() - 1;
            for (pi, &d) in min_d.iter().enumerate() {
                if target < d {
                    pick = pi;
                    break;
                }
                target -= d;
            }
            let src = pool[pick];
            book[j * dim..(j + 1) * dim].copy_from_slice(&residual[src * dim..(src + 1) * dim]);
        }
    }
    Tensor::from_vec(vec![size, dim], book)
}

/// Train cascaded codebooks on frozen features: per stage, seeded init on
/// that stage's residuals, then EMA epochs over shuffled mini-batches with
/// dead-code reseeding between epochs. Pushes a mean quantization error per
/// mini-batch into `log`.
pub fn train<T: Scalar>(
    features: &Tensor<T>,
    cfg: RvqConfig,
    epochs: usize,
    batch_frames: usize,
    seed: u64,
    log: &mut Vec<f64>,
) -> Result<Codebooks<T>> {
    cfg.validate()?;
    let (n, dim) = features.dims2();
    if dim != cfg.dim {
        return Err(CodecError::Rvq(format!("feature dim {dim} vs config dim {}", cfg.dim)));
    }
    if n == 0 {
        return Err(CodecError::Rvq("no training features".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual: Vec<T> = features.data().to_vec();
    let mut books: Vec<Tensor<T>> = Vec::with_capacity(cfg.n_codebooks);
    let mut usages: Vec<Vec<f64>> = Vec::new();
    let mut ema_sums: Vec<Tensor<T>> = Vec::new();

    for _stage in 0..cfg.n_codebooks {
        let mut book = init_stage::<T>(&residual, n, dim, cfg.codebook_size, &mut rng);
        let mut usage = vec![1.0f64; cfg.codebook_size];
        let mut ema_sum = book.clone();
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..epochs {
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(batch_frames.max(1)) {
                let mut rows: Vec<T> = Vec::with_capacity(chunk.len() * dim);
                for &p in chunk {
                    rows.extend_from_slice(&residual[p * dim..(p + 1) * dim]);
                }
                let mut state = StageState {
                    book: &mut book,
                    usage: &mut usage,
                    ema_sum: &mut ema_sum,
                    decay: cfg.ema_decay,
                    size: cfg.codebook_size,
                    dim,
                };
                log.push(state.update(&mut rows, chunk.len()));
            }
            if epoch + 1 < epochs {
                let mut state = StageState {
                    book: &mut book,
                    usage: &mut usage,
                    ema_sum: &mut ema_sum,
                    decay: cfg.ema_decay,
                    size: cfg.codebook_size,
                    dim,
                };
                state.reseed(&residual, n, cfg.reseed_threshold, &mut rng);
            }
        }
        // Advance residuals with the trained stage.
        let (assign, _) = assign_nearest(&residual, n, book.data(), cfg.codebook_size, dim);
        for (p, &j) in assign.iter().enumerate() {
            let row = j as usize * dim;
            for d in 0..dim {
                let cw = book.data()[row + d];
                residual[p * dim + d] -= cw;
            }
        }
        books.push(book);
        usages.push(usage);
        ema_sums.push(ema_sum);
    }
    let mut out = Codebooks::from_books(cfg, books)?;
    out.usage = usages;
    out.ema_sum = ema_sums;
    Ok(out)
}

// ── Codebook file I/O ───────────────────────────────────────────────

pub const RVQ_MAGIC: &[u8; 4] = b"MRQ1";
pub const RVQ_VERSION: u8 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Codebook container: config id, dims, raw values, trailing FNV-1a checksum
/// enforced at load (layout in FORMAT.md).
pub fn save_codebooks<T: Scalar>(path: &Path, books: &Codebooks<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(RVQ_MAGIC);
    out.push(RVQ_VERSION);
    out.push(T::DTYPE.code());
    out.push(books.cfg.config_id.code());
    out.push(books.cfg.n_codebooks as u8);
    out.extend_from_slice(&(books.cfg.codebook_size as u32).to_le_bytes());
    out.extend_from_slice(&(books.cfg.dim as u32).to_le_bytes());
    out.extend_from_slice(&books.cfg.ema_decay.to_le_bytes());
    out.extend_from_slice(&books.cfg.reseed_threshold.to_le_bytes());
    for stage in 0..books.cfg.n_codebooks {
        for &v in books.books[stage].data() {
            v.write_le(&mut out);
        }
        for &u in &books.usage[stage] {
            out.extend_from_slice(&u.to_le_bytes());
        }
        for &v in books.ema_sum[stage].data() {
            v.write_le(&mut out);
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_codebooks<T: Scalar>(path: &Path) -> Result<Codebooks<T>> {
    let buf = fs::read(path).map_err(|e| CodecError::Rvq(format!("{}: {e}", path.display())))?;
    if buf.len() < 8 + 32 {
        return Err(CodecError::Rvq("codebook file too short".into()));
    }
    let (body, check) = buf.split_at(buf.len() - 8);
    let want = u64::from_le_bytes(check.try_into().unwrap());
    if fnv1a64(body) != want {
        return Err(CodecError::Rvq("codebook checksum mismatch (file corrupt)".into()));
    }
    if &body[0..4] != RVQ_MAGIC {
        return Err(CodecError::Rvq("bad codebook magic".into()));
    }
    if body[4] != RVQ_VERSION {
        return Err(CodecError::Rvq(format!("unsupported codebook version {}", body[4])));
    }
    let dtype = Dtype::from_code(body[5]).ok_or_else(|| CodecError::Rvq("bad dtype".into()))?;
    if dtype != T::DTYPE {
        return Err(CodecError::Rvq(format!(
            "codebook dtype {dtype} does not match runtime {}",
            T::DTYPE
        )));
    }
    let config_id =
        ConfigId::from_code(body[6]).ok_or_else(|| CodecError::Rvq("bad config id".into()))?;
    let n_codebooks = body[7] as usize;
    let codebook_size = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let ema_decay = f64::from_le_bytes(body[16..24].try_into().unwrap());
    let reseed_threshold = f64::from_le_bytes(body[24..32].try_into().unwrap());
    let cfg = RvqConfig { n_codebooks, codebook_size, dim, ema_decay, reseed_threshold, config_id };
    cfg.validate()?;

    let esz = T::DTYPE.size();
    let per_stage = 2 * codebook_size * dim * esz + codebook_size * 8;
    let expect = 32 + n_codebooks * per_stage;
    if body.len() != expect {
        return Err(CodecError::Rvq(format!(
            "codebook payload {} bytes, expected {expect}",
            body.len()
        )));
    }
    let mut pos = 32;
    let mut books = Vec::new();
    let mut usage = Vec::new();
    let mut ema_sum = Vec::new();
    for _ in 0..n_codebooks {
        let take = codebook_size * dim * esz;
        let data: Vec<T> = body[pos..pos + take].chunks_exact(esz).map(T::read_le).collect();
        books.push(Tensor::from_vec(vec![codebook_size, dim], data));
        pos += take;
        let u: Vec<f64> = body[pos..pos + codebook_size * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        usage.push(u);
        pos += codebook_size * 8;
        let data: Vec<T> = body[pos..pos + take].chunks_exact(esz).map(T::read_le).collect();
        ema_sum.push(Tensor::from_vec(vec![codebook_size, dim], data));
        pos += take;
    }
    let mut out = Codebooks::from_books(cfg, books)?;
    out.usage = usage;
    out.ema_sum = ema_sum;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_books(entries: Vec<Vec<f64>>) -> Codebooks<f64> {
        let dim = entries[0].len();
        let size = entries.len();
        let data: Vec<f64> = entries.into_iter().flatten().collect();
        let cfg = RvqConfig::custom(1, size, dim);
        Codebooks::from_books(cfg, vec![Tensor::from_vec(vec![size, dim], data)]).unwrap()
    }

    #[test]
    fn hand_worked_nearest_neighbor() {
        // d²((0,0)) = 2.02 > d²((1,1)) = 0.02 → index 1, residual (−0.1, 0.1).
        let books = tiny_books(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let x = Tensor::from_vec(vec![1, 2], vec![0.9, 1.1]);
        let (codes, dequant, energies) = quantize(&x, &books).unwrap();
        assert_eq!(codes.index(0, 0), 1);
        assert_eq!(dequant.data(), &[1.0, 1.0]);
        let expected = (0.1f64.powi(2) + 0.1f64.powi(2)) / 2.0;
        assert!((energies[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn exact_codeword_has_zero_residual() {
        let books = tiny_books(vec![vec![0.25, -0.5], vec![2.0, 3.0]]);
        let x = Tensor::from_vec(vec![1, 2], vec![2.0, 3.0]);
        let (codes, _, energies) = quantize(&x, &books).unwrap();
        assert_eq!(codes.index(0, 0), 1);
        assert_eq!(energies[0], 0.0);
    }

    #[test]
    fn exact_ties_break_to_lowest_index() {
        let books = tiny_books(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let x = Tensor::from_vec(vec![1, 2], vec![0.0, 5.0]);
        let (codes, _, _) = quantize(&x, &books).unwrap();
        assert_eq!(codes.index(0, 0), 0);
        let dup = tiny_books(vec![vec![0.3, 0.3], vec![0.3, 0.3]]);
        let (codes, _, _) = quantize(&x, &dup).unwrap();
        assert_eq!(codes.index(0, 0), 0);
    }

    #[test]
    fn dequantize_matches_quantize_output_bit_for_bit() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = RvqConfig::custom(2, 8, 4);
        let books = Codebooks::from_books(
            cfg,
            vec![Tensor::<f64>::randn(vec![8, 4], &mut rng), Tensor::randn(vec![8, 4], &mut rng)],
        )
        .unwrap();
        let x = Tensor::randn(vec![6, 4], &mut rng);
        let (codes, dequant, _) = quantize(&x, &books).unwrap();
        let again = dequantize(&codes, &books).unwrap();
        assert_eq!(dequant.data(), again.data());
    }

    #[test]
    fn all_zero_codebooks_dequantize_to_zero() {
        let cfg = RvqConfig::custom(2, 4, 3);
        let books =
            Codebooks::from_books(
                cfg,
                vec![Tensor::<f64>::zeros(vec![4, 3]), Tensor::zeros(vec![4, 3])],
            )
                .unwrap();
        let codes = CodeSeq::new(vec![0, 3, 2, 1], 2, 2, 4, ConfigId::Custom);
        let out = dequantize(&codes, &books).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ema_fixed_point_when_batch_equals_codewords() {
        let mut books = tiny_books(vec![vec![0.5, -0.25], vec![-1.0, 2.0]]);
        let batch = Tensor::from_vec(vec![2, 2], vec![0.5, -0.25, -1.0, 2.0]);
        let before = books.book(0).clone();
        ema_update(&mut books, &batch).unwrap();
        for (a, b) in before.data().iter().zip(books.book(0).data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn single_codeword_converges_geometrically() {
        let cfg = RvqConfig { ema_decay: 0.99, ..RvqConfig::custom(1, 2, 2) };
        let mut books = Codebooks::from_books(
            cfg,
            vec![Tensor::<f64>::from_vec(vec![2, 2], vec![0.0, 0.0, 1e6, 1e6])],
        )
        .unwrap();
        let x = Tensor::from_vec(vec![1, 2], vec![1.0, -1.0]);
        for _ in 0..1000 {
            ema_update(&mut books, &x).unwrap();
        }
        let cw = books.codeword(0, 0);
        assert!((cw[0] - 1.0).abs() < 1e-3 && (cw[1] + 1.0).abs() < 1e-3, "{cw:?}");
    }

    #[test]
    fn usage_total_grows_by_at_most_batch_frames() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = RvqConfig::custom(1, 8, 3);
        let mut books =
            Codebooks::from_books(cfg, vec![Tensor::<f64>::randn(vec![8, 3], &mut rng)]).unwrap();
        let batch = Tensor::randn(vec![5, 3], &mut rng);
        let before: f64 = books.usage(0).iter().sum();
        ema_update(&mut books, &batch).unwrap();
        let after: f64 = books.usage(0).iter().sum();
        assert!(after <= before + 5.0 + 1e-9, "{before} -> {after}");
    }

    #[test]
    fn reseed_counts_dead_entries_and_improves_utilization() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = RvqConfig::custom(1, 4, 2);
        let mut books = Codebooks::from_books(
            cfg,
            vec![Tensor::from_vec(vec![4, 2], vec![0.0, 0.0, 1.0, 1.0, 50.0, 50.0, -50.0, 50.0])],
        )
        .unwrap();
        let batch = Tensor::<f64>::randn(vec![64, 2], &mut rng);
        for _ in 0..30 {
            ema_update(&mut books, &batch).unwrap();
        }
        let none = reseed_dead(&mut books, &batch, 0.0, 1).unwrap();
        assert_eq!(none, vec![0]);
        let before_util = {
            let (codes, _, _) = quantize(&batch, &books).unwrap();
            codebook_stats(&codes).unwrap()[0].utilization
        };
        let counts = reseed_dead(&mut books, &batch, 0.05, 2).unwrap();
        assert_eq!(counts, vec![2]);
        let after_util = {
            let (codes, _, _) = quantize(&batch, &books).unwrap();
            codebook_stats(&codes).unwrap()[0].utilization
        };
        assert!(after_util >= before_util, "{before_util} -> {after_util}");
    }

    #[test]
    fn reseed_requires_recent_features() {
        let mut books = tiny_books(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let empty = Tensor::<f64>::zeros(vec![0, 2]);
        assert!(reseed_dead(&mut books, &empty, 0.1, 3).is_err());
    }

    #[test]
    fn stats_on_uniform_and_constant_codes() {
        let codes = CodeSeq::new(vec![0, 1, 2, 3, 0, 1, 2, 3], 8, 1, 4, ConfigId::Custom);
        let stats = codebook_stats(&codes).unwrap();
        assert!((stats[0].perplexity - 4.0).abs() < 1e-9);
        assert_eq!(stats[0].utilization, 1.0);

        let constant = CodeSeq::new(vec![2; 10], 10, 1, 4, ConfigId::Custom);
        let stats = codebook_stats(&constant).unwrap();
        assert!((stats[0].perplexity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_draw_utilization_matches_expected_distinct_count() {
        use rand::SeedableRng;
        // 896 uniform draws over 16384: E[distinct]/size = 1 − (1 − 1/size)^896.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let size = 16384u32;
        let n = 896usize;
        let data: Vec<u32> = (0..n).map(|_| rng.gen_range(0..size)).collect();
        let codes = CodeSeq::new(data, n, 1, size, ConfigId::Low);
        let stats = codebook_stats(&codes).unwrap();
        let expected = 1.0 - (1.0 - 1.0 / size as f64).powi(n as i32);
        assert!(
            (stats[0].utilization - expected).abs() <= 0.01,
            "measured {} vs expected {expected}",
            stats[0].utilization
        );
    }

    #[test]
    fn training_reduces_residual_energy_and_orders_stages() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // Clustered data so codebooks have something to learn.
        let mut rows = Vec::new();
        for _ in 0..600 {
            let c = rng.gen_range(0..4) as f64;
            for d in 0..6 {
                rows.push(c + 0.05 * rng.gen_range(-1.0..1.0) + d as f64 * 0.01);
            }
        }
        let feats = Tensor::<f64>::from_vec(vec![600, 6], rows);
        let mut log = Vec::new();
        let cfg = RvqConfig::custom(3, 16, 6);
        let books = train(&feats, cfg, 4, 128, 42, &mut log).unwrap();
        let (_, _, energies) = quantize(&feats, &books).unwrap();
        // Residual energy non-increasing across stages on the training set.
        for w in energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{energies:?}");
        }
        // And the 3-stage reconstruction beats a 1-stage one.
        let one = Codebooks::from_books(
            RvqConfig { n_codebooks: 1, ..cfg },
            vec![books.book(0).clone()],
        )
        .unwrap();
        let (_, _, e1) = quantize(&feats, &one).unwrap();
        assert!(energies[2] <= e1[0]);
    }

    #[test]
    fn codebook_file_round_trip_and_checksum() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = RvqConfig::custom(2, 6, 3);
        let books = Codebooks::from_books(
            cfg,
            vec![Tensor::<f32>::randn(vec![6, 3], &mut rng), Tensor::randn(vec![6, 3], &mut rng)],
        )
        .unwrap();
        let dir = std::env::temp_dir().join("muc_rvq_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("books.rvq");
        save_codebooks(&path, &books).unwrap();
        let loaded = load_codebooks::<f32>(&path).unwrap();
        assert_eq!(loaded.book(0).data(), books.book(0).data());
        assert_eq!(loaded.book(1).data(), books.book(1).data());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 0x10;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_codebooks::<f32>(&path).is_err());
    }
}
