//! Objective metrics and report records: log-spectral distance, mel
//! distortion, latent MSE, codebook statistics, achieved bitrate, plus the
//! frame-level linear probe used for feature-quality comparisons.

use muc_core::{AdamConfig, AdamState, Graph, ParamStore, Scalar, Tensor};
use muc_dsp::{stft, AudioBuffer, Sample, LOG_FLOOR};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::symbol_intervals;
use crate::error::Result;
use crate::rvq::StageStats;

/// Log-spectral distance in dB between two magnitude spectrograms computed on
/// audio: per frame sqrt(mean over bins of 400·(log10|S| − log10|Ŝ|)²),
/// averaged over frames. Magnitudes are floored before the log.
pub fn log_spectral_distance<T: Sample>(
    reference: &AudioBuffer<T>,
    estimate: &AudioBuffer<T>,
) -> Result<f64> {
    let a = stft(reference, 1024, 240)?;
    let b = stft(estimate, 1024, 240)?;
    let frames = a.n_frames.min(b.n_frames);
    let floor = LOG_FLOOR;
    let mut acc = 0.0f64;
    for fi in 0..frames {
        let mut frame_acc = 0.0f64;
        for k in 0..a.n_bins {
            let ra = a.magnitude(fi, k).to64().max(floor).log10();
            let rb = b.magnitude(fi, k).to64().max(floor).log10();
            frame_acc += 400.0 * (ra - rb) * (ra - rb);
        }
        acc += (frame_acc / a.n_bins as f64).sqrt();
    }
    Ok(acc / frames.max(1) as f64)
}

/// Mean absolute difference between two log-mel matrices, cropped to the
/// shorter frame count.
pub fn mel_distortion<T: Scalar>(reference: &Tensor<T>, estimate: &Tensor<T>) -> f64 {
    let (ta, d) = reference.dims2();
    let (tb, db) = estimate.dims2();
    assert_eq!(d, db, "mel width mismatch");
    let frames = ta.min(tb);
    let mut acc = 0.0f64;
    for fi in 0..frames {
        for ci in 0..d {
            acc += (reference.at2(fi, ci).to64() - estimate.at2(fi, ci).to64()).abs();
        }
    }
    acc / (frames * d).max(1) as f64
}

/// Mean squared error between two matrices cropped to the shorter length.
pub fn matrix_mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let (ta, d) = a.dims2();
    let (tb, db) = b.dims2();
    assert_eq!(d, db);
    let frames = ta.min(tb);
    let mut acc = 0.0f64;
    for fi in 0..frames {
        for ci in 0..d {
            let dv = a.at2(fi, ci).to64() - b.at2(fi, ci).to64();
            acc += dv * dv;
        }
    }
    acc / (frames * d).max(1) as f64
}

/// One line of the machine-readable eval report (JSON per line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipRecord {
    pub record: String,
    pub clip_id: String,
    pub preset: String,
    pub kbps: f64,
    pub lsd_db: f64,
    pub mel_distortion: f64,
    pub mel_distortion_random: f64,
    pub latent_mse: f64,
    pub stage_stats: Vec<StageStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub record: String,
    pub preset: String,
    pub n_clips: usize,
    pub mean_kbps: f64,
    pub mean_lsd_db: f64,
    pub mean_mel_distortion: f64,
    pub mean_mel_distortion_random: f64,
    pub mean_latent_mse: f64,
    /// Fraction of clips whose real-code decode beats the random-code decode
    /// on mel distortion.
    pub frac_real_beats_random: f64,
}

/// Full eval output: per-clip records then one aggregate per preset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipRecord>,
    pub aggregates: Vec<AggregateRecord>,
}

impl EvalReport {
    pub fn aggregate(preset: &str, clips: &[ClipRecord]) -> AggregateRecord {
        let sel: Vec<&ClipRecord> = clips.iter().filter(|c| c.preset == preset).collect();
        let n = sel.len().max(1) as f64;
        let mean = |f: fn(&ClipRecord) -> f64| sel.iter().map(|c| f(c)).sum::<f64>() / n;
        AggregateRecord {
            record: "aggregate".into(),
            preset: preset.to_string(),
            n_clips: sel.len(),
            mean_kbps: mean(|c| c.kbps),
            mean_lsd_db: mean(|c| c.lsd_db),
            mean_mel_distortion: mean(|c| c.mel_distortion),
            mean_mel_distortion_random: mean(|c| c.mel_distortion_random),
            mean_latent_mse: mean(|c| c.latent_mse),
            frac_real_beats_random: sel
                .iter()
                .filter(|c| c.mel_distortion < c.mel_distortion_random)
                .count() as f64
                / n,
        }
    }

    /// Line-delimited JSON: every clip record, then every aggregate.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.clips {
            out.push_str(&serde_json::to_string(c).expect("serializable"));
            out.push('\n');
        }
        for a in &self.aggregates {
            out.push_str(&serde_json::to_string(a).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

// ── Frame-label probe ───────────────────────────────────────────────

/// Frame-level symbol labels at the token rate: a frame gets the symbol whose
/// sounding interval contains its center, else `blank` (= n_symbols).
pub fn frame_labels(
    clip_symbols: &[u8],
    clip_duration_s: f64,
    n_frames: usize,
    token_rate_hz: f64,
    blank: usize,
) -> Vec<usize> {
    let intervals = symbol_intervals(clip_symbols.len(), clip_duration_s);
    (0..n_frames)
        .map(|f| {
            let t = (f as f64 + 0.5) / token_rate_hz;
            for (sym, &(s, e)) in clip_symbols.iter().zip(&intervals) {
                if t >= s && t < e {
                    return *sym as usize;
                }
            }
            blank
        })
        .collect()
}

/// Multinomial logistic-regression probe: train on (features, labels), report
/// top-1 error over non-blank test frames. Deterministic under the seed.
pub fn linear_probe_error<T: Scalar>(
    train: &[(Tensor<T>, Vec<usize>)],
    test: &[(Tensor<T>, Vec<usize>)],
    n_classes: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let dim = train[0].0.dims2().1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::<T>::new();
    muc_core::linear_init(&mut params, "probe", dim, n_classes, &mut rng);
    let mut adam = AdamState::new(AdamConfig::with_lr(0.05));

    // Flatten all training frames once.
    let mut rows: Vec<T> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (feats, labs) in train {
        let (t, d) = feats.dims2();
        assert_eq!(d, dim);
        assert_eq!(labs.len(), t);
        rows.extend_from_slice(feats.data());
        labels.extend_from_slice(labs);
    }
    let n = labels.len();
    let x_all = Tensor::from_vec(vec![n, dim], rows);

    for _ in 0..steps {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        // Mini-batch of 256 seeded rows.
        let batch: Vec<usize> =
            (0..256.min(n)).map(|_| rand::Rng::gen_range(&mut rng, 0..n)).collect();
        let x = g.constant(x_all.clone());
        let picked = g.gather_rows(x, batch.clone());
        let logits = muc_core::linear_apply(&mut g, &bound, "probe", picked);
        let lab: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let loss = g.cross_entropy(logits, lab);
        let grads = g.backward(loss)?;
        adam.step(&mut params, &bound.grads(&g, &grads))?;
    }

    // Error over non-blank test frames.
    let blank = n_classes - 1;
    let w = params.get("probe.w");
    let b = params.get("probe.b");
    let mut wrong = 0usize;
    let mut total = 0usize;
    for (feats, labs) in test {
        let (t, _) = feats.dims2();
        for fi in 0..t {
            if labs[fi] == blank {
                continue;
            }
            let row = feats.row(fi);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..n_classes {
                let mut v = b.data()[c].to64();
                for (d, &x) in row.iter().enumerate() {
                    v += x.to64() * w.at2(d, c).to64();
                }
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            total += 1;
            if best != labs[fi] {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / total.max(1) as f64)
}
