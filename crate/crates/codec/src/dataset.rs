//! Synthetic desk-scale music corpus: a harmonic "vocal" line carrying a
//! known symbol sequence over a chordal background, with aligned transcripts,
//! plus manifest I/O and batch loading.

use std::fs;
use std::path::{Path, PathBuf};

use muc_dsp::{read_wav, write_wav, AudioBuffer, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CodecError, Result};

/// Symbols 'a'..='p'.
pub const VOCAB_SIZE: usize = 16;

pub fn symbol_char(sym: u8) -> char {
    (b'a' + sym) as char
}

pub fn symbol_of_char(c: char) -> Option<u8> {
    let v = c as i32 - 'a' as i32;
    (0..VOCAB_SIZE as i32).contains(&v).then_some(v as u8)
}

pub fn transcript_string(symbols: &[u8]) -> String {
    symbols.iter().map(|&s| symbol_char(s)).collect()
}

pub fn parse_transcript(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| {
            symbol_of_char(c)
                .ok_or_else(|| CodecError::Dataset(format!("symbol `{c}` outside vocabulary")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Mixed,
    VocalOnly,
    BackgroundOnly,
}

/// Everything that determines one synthetic clip.
#[derive(Debug, Clone)]
pub struct ClipSpec {
    pub seed: u64,
    pub duration_s: f64,
    pub symbols: Vec<u8>,
    pub tempo: f64,
    pub chord_pattern: u8,
    pub vocal_gain: f64,
    pub background_gain: f64,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2.56..=35.84).contains(&self.duration_s) {
            return Err(CodecError::Dataset(format!(
                "duration {} s outside [2.56, 35.84]",
                self.duration_s
            )));
        }
        if self.vocal_gain > 0.0 && self.symbols.is_empty() {
            return Err(CodecError::Dataset("vocal clip without symbols".into()));
        }
        if self.vocal_gain == 0.0 && !self.symbols.is_empty() {
            return Err(CodecError::Dataset("background-only clip carries symbols".into()));
        }
        if self.symbols.iter().any(|&s| s as usize >= VOCAB_SIZE) {
            return Err(CodecError::Dataset("symbol outside vocabulary".into()));
        }
        Ok(())
    }
}

/// Symbol timing rule shared by synthesis, crop transcripts, and probe
/// labels: n symbols split the clip into equal slots; symbol i sounds during
/// [i·slot + 0.05·slot, i·slot + 0.05·slot + min(0.8·slot, 0.5 s)].
pub fn symbol_intervals(n_symbols: usize, duration_s: f64) -> Vec<(f64, f64)> {
    if n_symbols == 0 {
        return Vec::new();
    }
    let slot = duration_s / n_symbols as f64;
    (0..n_symbols)
        .map(|i| {
            let start = i as f64 * slot + 0.05 * slot;
            let len = (0.8 * slot).min(0.5);
            (start, start + len)
        })
        .collect()
}

fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

/// Per-symbol pitch: a pentatonic-ish scale over two octaves.
fn symbol_pitch_hz(sym: u8) -> f64 {
    const SCALE: [f64; 8] = [0.0, 2.0, 4.0, 7.0, 9.0, 12.0, 14.0, 16.0];
    let octave = (sym / 8) as f64;
    midi_to_hz(57.0 + SCALE[(sym % 8) as usize] + 12.0 * octave)
}

/// Two formant center frequencies per symbol.
fn symbol_formants(sym: u8) -> (f64, f64) {
    const SETS: [(f64, f64); 4] = [(600.0, 1000.0), (400.0, 1900.0), (800.0, 1300.0), (350.0, 2400.0)];
    SETS[(sym % 4) as usize]
}

fn formant_gain(f: f64, f1: f64, f2: f64) -> f64 {
    let g = |c: f64, bw: f64| (-((f - c) * (f - c)) / (2.0 * bw * bw)).exp();
    0.25 + g(f1, 130.0) + 0.7 * g(f2, 180.0)
}

/// Render the isolated vocal stem. Per-clip timbre (vibrato, rolloff,
/// formant placement) varies continuously with the seed so features do not
/// collapse onto a few discrete points.
fn render_vocal(spec: &ClipSpec, sample_rate: u32, out: &mut [f64], rng: &mut ChaCha8Rng) {
    let sr = sample_rate as f64;
    let intervals = symbol_intervals(spec.symbols.len(), spec.duration_s);
    let vib_depth = rng.gen_range(0.002..0.015);
    let vib_rate = rng.gen_range(4.5..6.5);
    let rolloff = rng.gen_range(0.45..1.10);
    let formant_scale = rng.gen_range(0.88..1.12);
    for (sym, &(start, end)) in spec.symbols.iter().zip(&intervals) {
        let base = symbol_pitch_hz(*sym) * (1.0 + rng.gen_range(-0.005..0.005));
        // Melisma: each note glides between two seeded offsets around its
        // base pitch, so successive frames differ even within one symbol.
        let glide_from = base * 2f64.powf(rng.gen_range(-2.0..2.0) / 12.0);
        let glide_to = base * 2f64.powf(rng.gen_range(-2.0..2.0) / 12.0);
        let (f1, f2) = symbol_formants(*sym);
        let (f1, f2) = (f1 * formant_scale, f2 * formant_scale);
        let i0 = (start * sr) as usize;
        let i1 = ((end * sr) as usize).min(out.len());
        let note_len = (i1 - i0).max(1) as f64;
        let max_h = ((0.4 * sr) / base.max(glide_from).max(glide_to)).floor() as usize;
        let n_harm = max_h.clamp(1, 24);
        let phase0: Vec<f64> =
            (0..n_harm).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let vib_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let note_gain = rng.gen_range(0.85..1.0);
        // Integrated phase tracks the gliding fundamental exactly.
        let mut phase_acc = 0.0f64;
        for i in i0..i1 {
            let t = (i - i0) as f64 / sr;
            let pos = (i - i0) as f64 / note_len;
            // 10 ms attack, 40 ms release.
            let attack = (t / 0.010).min(1.0);
            let rel_t = (note_len / sr) - t;
            let release = (rel_t / 0.040).clamp(0.0, 1.0);
            let env = attack * release;
            let vib = 1.0 + vib_depth * (std::f64::consts::TAU * vib_rate * t + vib_phase).sin();
            let f_now = (glide_from + (glide_to - glide_from) * pos) * vib;
            phase_acc += std::f64::consts::TAU * f_now / sr;
            let mut v = 0.0;
            for (h, ph) in phase0.iter().enumerate() {
                let hf = f_now * (h + 1) as f64;
                let amp = formant_gain(hf, f1, f2) / ((h + 1) as f64).powf(rolloff);
                v += amp * (phase_acc * (h + 1) as f64 + ph).sin();
            }
            out[i] += env * v * 0.22 * note_gain;
        }
    }
}

/// Four loopable triad progressions (roots as MIDI notes, minor flag).
const CHORD_PATTERNS: [[(f64, bool); 4]; 4] = [
    [(48.0, false), (53.0, false), (55.0, false), (48.0, false)],
    [(45.0, true), (50.0, true), (52.0, false), (45.0, true)],
    [(50.0, false), (55.0, false), (57.0, true), (53.0, false)],
    [(47.0, true), (52.0, false), (54.0, false), (49.0, true)],
];

fn render_background(spec: &ClipSpec, sample_rate: u32, out: &mut [f64], rng: &mut ChaCha8Rng) {
    let sr = sample_rate as f64;
    let pattern = CHORD_PATTERNS[(spec.chord_pattern as usize) % CHORD_PATTERNS.len()];
    let chord_dur = 0.96 / spec.tempo;
    let n_chords = (spec.duration_s / chord_dur).ceil() as usize;
    let transpose = rng.gen_range(-3i32..=3) as f64;
    let rolloff = rng.gen_range(0.9..1.7);
    let trem_depth = rng.gen_range(0.0..0.25);
    let trem_rate = rng.gen_range(2.5..4.0);
    // Arpeggiated accompaniment: chord tones cycle as short overlapping
    // notes, so the spectral mix moves frame to frame.
    let arp_rate = rng.gen_range(6.0..12.0) / spec.tempo.max(0.5);
    let note_dur = rng.gen_range(1.6..2.4) / arp_rate;
    for ci in 0..n_chords {
        let (root, minor) = pattern[ci % 4];
        let root = root + transpose;
        let third = if minor { 3.0 } else { 4.0 };
        let tones = [root - 12.0, root, root + third, root + 7.0, root + 12.0];
        let start = ci as f64 * chord_dur;
        if (start * sr) as usize >= out.len() {
            break;
        }
        // Seeded tone order for this chord's arpeggio.
        let mut order: Vec<usize> = (0..tones.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let n_steps = (chord_dur * arp_rate).ceil() as usize;
        for si in 0..n_steps {
            let n_start = start + si as f64 / arp_rate;
            let i0 = (n_start * sr) as usize;
            let i1 = (((n_start + note_dur) * sr) as usize).min(out.len());
            if i0 >= out.len() || i0 >= ((start + chord_dur) * sr) as usize {
                break;
            }
            let midi = tones[order[si % order.len()]];
            let f = midi_to_hz(midi);
            let octave_jitter = rng.gen_range(-0.3..0.3);
            let phases: Vec<f64> =
                (0..5).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            let gain = rng.gen_range(0.7..1.0);
            for i in i0..i1 {
                let t = (i - i0) as f64 / sr;
                let attack = (t / 0.012).min(1.0);
                let decay = (-(t / note_dur) * 2.2).exp();
                let trem =
                    1.0 + trem_depth * (std::f64::consts::TAU * trem_rate * (t + n_start)).sin();
                let mut v = 0.0;
                for h in 0..5 {
                    let hf = f * (1.0 + octave_jitter * 0.002) * (h + 1) as f64;
                    if hf > 0.4 * sr {
                        break;
                    }
                    let amp = 1.0 / ((h + 1) as f64).powf(rolloff);
                    v += amp * (std::f64::consts::TAU * hf * t + phases[h]).sin();
                }
                out[i] += attack * decay * trem * gain * v * 0.14;
            }
        }
    }
}

/// Deterministic clip synthesis. Returns the mixed audio and the transcript.
pub fn synth_clip<T: Sample>(spec: &ClipSpec, sample_rate: u32) -> Result<(AudioBuffer<T>, String)> {
    spec.validate()?;
    let n = (spec.duration_s * sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vocal = vec![0.0f64; n];
    let mut background = vec![0.0f64; n];
    // Draw both streams regardless of gains so seeds stay aligned.
    render_vocal(spec, sample_rate, &mut vocal, &mut rng);
    render_background(spec, sample_rate, &mut background, &mut rng);
    let mix: Vec<T> = vocal
        .iter()
        .zip(&background)
        .map(|(&v, &b)| T::f(spec.vocal_gain * v + spec.background_gain * b))
        .collect();
    let mut audio = AudioBuffer::mono(mix, sample_rate)?;
    audio.normalize_peak(0.95);
    Ok((audio, transcript_string(&spec.symbols)))
}

/// Isolated vocal stem (the onset-count oracle analyzes this).
pub fn synth_vocal_stem<T: Sample>(spec: &ClipSpec, sample_rate: u32) -> Result<AudioBuffer<T>> {
    spec.validate()?;
    let n = (spec.duration_s * sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vocal = vec![0.0f64; n];
    render_vocal(spec, sample_rate, &mut vocal, &mut rng);
    let samples: Vec<T> = vocal.iter().map(|&v| T::f(v * spec.vocal_gain.max(0.6))).collect();
    let mut audio = AudioBuffer::mono(samples, sample_rate)?;
    audio.normalize_peak(0.95);
    Ok(audio)
}

// ── Corpus ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
    pub transcript: String,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub records: Vec<ManifestRecord>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Tab-separated, one record per line: id, relative path, split, transcript.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.id,
                r.path.display(),
                r.split.tag(),
                r.transcript
            ));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Load and verify: unique ids, known splits, every referenced file exists.
    pub fn load(path: &Path, root: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CodecError::Dataset(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(CodecError::Dataset(format!(
                    "manifest line {}: want 4 tab-separated fields, got {}",
                    ln + 1,
                    parts.len()
                )));
            }
            let id = parts[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(CodecError::Dataset(format!("duplicate clip id `{id}`")));
            }
            let rel = PathBuf::from(parts[1]);
            if !root.join(&rel).exists() {
                return Err(CodecError::Dataset(format!(
                    "missing audio file {}",
                    root.join(&rel).display()
                )));
            }
            let split = Split::from_tag(parts[2])
                .ok_or_else(|| CodecError::Dataset(format!("unknown split `{}`", parts[2])))?;
            parse_transcript(parts[3])?;
            records.push(ManifestRecord { id, path: rel, split, transcript: parts[3].to_string() });
        }
        Ok(CorpusManifest { records })
    }
}

/// Scenario pattern with an exact 70/15/15 mixed/vocal/background ratio over
/// any window of 20 clips.
const SCENARIO_PATTERN: [Scenario; 20] = {
    use Scenario::*;
    [
        Mixed, Mixed, VocalOnly, Mixed, Mixed, BackgroundOnly, Mixed, Mixed, Mixed, VocalOnly,
        Mixed, Mixed, Mixed, BackgroundOnly, Mixed, Mixed, VocalOnly, Mixed, Mixed, BackgroundOnly,
    ]
};

/// Deterministic clip spec for (corpus seed, split, index).
pub fn clip_spec_for(seed: u64, split: Split, index: usize) -> ClipSpec {
    let split_id = match split {
        Split::Train => 1u64,
        Split::Dev => 2,
        Split::Test => 3,
    };
    let clip_seed = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(split_id << 48)
        .wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
    let scenario = SCENARIO_PATTERN[index % SCENARIO_PATTERN.len()];
    let duration_s = rng.gen_range(12.0..18.0);
    let tempo = rng.gen_range(0.75..1.3);
    let chord_pattern = rng.gen_range(0..4u8);
    let n_sym = (duration_s * rng.gen_range(1.1..1.6f64)).round() as usize;
    let symbols: Vec<u8> = (0..n_sym).map(|_| rng.gen_range(0..VOCAB_SIZE as u8)).collect();
    let (symbols, vocal_gain, background_gain) = match scenario {
        Scenario::Mixed => (symbols, rng.gen_range(0.5..0.62), rng.gen_range(0.30..0.40)),
        Scenario::VocalOnly => (symbols, rng.gen_range(0.55..0.68), 0.0),
        Scenario::BackgroundOnly => (Vec::new(), 0.0, rng.gen_range(0.45..0.6)),
    };
    ClipSpec { seed: clip_seed, duration_s, symbols, tempo, chord_pattern, vocal_gain, background_gain }
}

/// Generate a corpus on disk: WAV files under `dir/wav/`, manifest at
/// `dir/manifest.tsv`. Regeneration with the same arguments is bit-identical.
pub fn build_corpus<T: Sample>(
    dir: &Path,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<CorpusManifest> {
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(CodecError::Dataset("every split needs at least one clip".into()));
    }
    fs::create_dir_all(dir.join("wav"))?;
    let mut records = Vec::new();
    for (split, count) in [(Split::Train, n_train), (Split::Dev, n_dev), (Split::Test, n_test)] {
        for i in 0..count {
            let spec = clip_spec_for(seed, split, i);
            let (audio, transcript) = synth_clip::<T>(&spec, sample_rate)?;
            let id = format!("{}{:04}", split.tag(), i);
            let rel = PathBuf::from("wav").join(format!("{id}.wav"));
            write_wav(&dir.join(&rel), &audio)?;
            records.push(ManifestRecord { id, path: rel, split, transcript });
        }
    }
    let manifest = CorpusManifest { records };
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

// ── Batch loading ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Segment<T> {
    pub clip_id: String,
    pub audio: AudioBuffer<T>,
    /// Symbols fully inside the crop window.
    pub symbols: Vec<u8>,
    /// Crop start within the source clip, seconds.
    pub offset_s: f64,
    /// Full-clip transcript length (for interval reconstruction).
    pub clip_symbols: Vec<u8>,
    pub clip_duration_s: f64,
}

/// Seeded segment stream: random crops for the train split, deterministic
/// center crops for dev/test.
pub struct BatchStream<T> {
    root: PathBuf,
    records: Vec<ManifestRecord>,
    batch_size: usize,
    segment_s: f64,
    train_mode: bool,
    rng: ChaCha8Rng,
    cursor: usize,
    order: Vec<usize>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Sample> BatchStream<T> {
    pub fn new(
        manifest: &CorpusManifest,
        root: &Path,
        split: Split,
        batch_size: usize,
        segment_s: f64,
        seed: u64,
    ) -> Result<Self> {
        let records: Vec<ManifestRecord> =
            manifest.split(split).into_iter().cloned().collect();
        if records.is_empty() {
            return Err(CodecError::Dataset(format!("split `{}` is empty", split.tag())));
        }
        let order = (0..records.len()).collect();
        Ok(BatchStream {
            root: root.to_path_buf(),
            records,
            batch_size,
            segment_s,
            train_mode: split == Split::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
            order,
            _marker: std::marker::PhantomData,
        })
    }

    fn load_segment(&mut self, rec_idx: usize) -> Result<Segment<T>> {
        let rec = self.records[rec_idx].clone();
        let audio = read_wav::<T>(&self.root.join(&rec.path))?;
        let duration = audio.duration_s();
        if self.segment_s > duration + 1e-9 {
            return Err(CodecError::Dataset(format!(
                "segment {}s longer than clip {} ({duration:.2}s)",
                self.segment_s, rec.id
            )));
        }
        let max_off = duration - self.segment_s;
        let offset_s =
            if self.train_mode { self.rng.gen_range(0.0..=max_off) } else { max_off / 2.0 };
        let sr = audio.sample_rate();
        let i0 = (offset_s * sr as f64).round() as usize;
        let n = (self.segment_s * sr as f64).round() as usize;
        let i1 = (i0 + n).min(audio.len_frames());
        let cropped = AudioBuffer::mono(audio.samples()[i0..i1].to_vec(), sr)?;

        let clip_symbols = parse_transcript(&rec.transcript)?;
        let intervals = symbol_intervals(clip_symbols.len(), duration);
        let symbols: Vec<u8> = clip_symbols
            .iter()
            .zip(&intervals)
            .filter(|(_, &(s, e))| s >= offset_s && e <= offset_s + self.segment_s)
            .map(|(&sym, _)| sym)
            .collect();
        Ok(Segment {
            clip_id: rec.id,
            audio: cropped,
            symbols,
            offset_s,
            clip_symbols,
            clip_duration_s: duration,
        })
    }

    /// Next batch of exactly `batch_size` segments. Train mode cycles forever
    /// (reshuffling each epoch); dev/test return `None` after one pass.
    pub fn next_batch(&mut self) -> Result<Option<Vec<Segment<T>>>> {
        let mut out = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            if self.cursor >= self.order.len() {
                if self.train_mode {
                    self.cursor = 0;
                    for i in (1..self.order.len()).rev() {
                        let j = self.rng.gen_range(0..=i);
                        self.order.swap(i, j);
                    }
                } else {
                    return if out.is_empty() { Ok(None) } else { Ok(Some(out)) };
                }
            }
            let idx = self.order[self.cursor];
            self.cursor += 1;
            out.push(self.load_segment(idx)?);
        }
        Ok(Some(out))
    }
}

/// Count energy onsets (10 ms frames, rising edges with a refractory gap) —
/// the oracle for "how many notes sound in this stem".
pub fn count_onsets<T: Sample>(audio: &AudioBuffer<T>) -> usize {
    let sr = audio.sample_rate() as usize;
    let frame = sr / 100;
    let samples = audio.samples();
    let n_frames = samples.len() / frame;
    let mut energy = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let e: f64 = samples[i * frame..(i + 1) * frame]
            .iter()
            .map(|&v| v.to64() * v.to64())
            .sum();
        energy.push(e / frame as f64);
    }
    let peak = energy.iter().copied().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return 0;
    }
    let hi = 0.15 * peak;
    let lo = 0.03 * peak;
    let mut count = 0;
    let mut active = false;
    for &e in &energy {
        if !active && e > hi {
            count += 1;
            active = true;
        } else if active && e < lo {
            active = false;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed_spec(seed: u64, n_sym: usize) -> ClipSpec {
        ClipSpec {
            seed,
            duration_s: 6.4,
            symbols: (0..n_sym as u8).map(|i| i % VOCAB_SIZE as u8).collect(),
            tempo: 1.0,
            chord_pattern: 1,
            vocal_gain: 0.55,
            background_gain: 0.35,
        }
    }

    #[test]
    fn zero_vocal_gain_means_background_only_and_empty_transcript() {
        let spec = ClipSpec { symbols: vec![], vocal_gain: 0.0, ..mixed_spec(3, 4) };
        let (audio, transcript) = synth_clip::<f32>(&spec, 24000).unwrap();
        assert!(transcript.is_empty());
        assert!(audio.rms() > 1e-4, "background should still sound");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = mixed_spec(42, 6);
        let (a, _) = synth_clip::<f32>(&spec, 24000).unwrap();
        let (b, _) = synth_clip::<f32>(&spec, 24000).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn eight_symbols_make_eight_onsets() {
        let spec = ClipSpec { background_gain: 0.0, ..mixed_spec(7, 8) };
        let stem = synth_vocal_stem::<f64>(&spec, 24000).unwrap();
        assert_eq!(count_onsets(&stem), 8);
    }

    #[test]
    fn clips_are_finite_and_peak_bounded() {
        for seed in 0..6 {
            let spec = mixed_spec(seed, 5 + seed as usize);
            let (audio, _) = synth_clip::<f64>(&spec, 24000).unwrap();
            assert!(audio.all_finite());
            assert!(audio.peak() <= 0.95 + 1e-9);
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(ClipSpec { duration_s: 1.0, ..mixed_spec(1, 3) }.validate().is_err());
        assert!(ClipSpec { duration_s: 40.0, ..mixed_spec(1, 3) }.validate().is_err());
        assert!(ClipSpec { symbols: vec![], ..mixed_spec(1, 3) }.validate().is_err());
    }

    #[test]
    fn transcript_alphabet_matches_vocab() {
        assert_eq!(VOCAB_SIZE, 16);
        let all: Vec<u8> = (0..VOCAB_SIZE as u8).collect();
        let s = transcript_string(&all);
        assert_eq!(s, "abcdefghijklmnop");
        assert_eq!(parse_transcript(&s).unwrap(), all);
        assert!(parse_transcript("aq").is_err());
    }

    #[test]
    fn corpus_build_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_corpus::<f32>(dir.path(), 4, 1, 1, 24000, 7).unwrap();
        assert_eq!(manifest.records.len(), 6);
        let loaded = CorpusManifest::load(&dir.path().join("manifest.tsv"), dir.path()).unwrap();
        assert_eq!(loaded.records.len(), 6);
        let ids: std::collections::BTreeSet<_> =
            loaded.records.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 6);
        assert_eq!(loaded.split(Split::Train).len(), 4);
        assert_eq!(loaded.split(Split::Dev).len(), 1);
        assert_eq!(loaded.split(Split::Test).len(), 1);
    }

    #[test]
    fn corpus_regeneration_is_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_corpus::<f32>(d1.path(), 2, 1, 1, 24000, 9).unwrap();
        build_corpus::<f32>(d2.path(), 2, 1, 1, 24000, 9).unwrap();
        let m1 = fs::read(d1.path().join("manifest.tsv")).unwrap();
        let m2 = fs::read(d2.path().join("manifest.tsv")).unwrap();
        assert_eq!(m1, m2);
        let w1 = fs::read(d1.path().join("wav/train0000.wav")).unwrap();
        let w2 = fs::read(d2.path().join("wav/train0000.wav")).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn scenario_ratio_is_70_15_15_over_100() {
        let mut mixed = 0;
        let mut vocal = 0;
        let mut bg = 0;
        for i in 0..100 {
            match SCENARIO_PATTERN[i % 20] {
                Scenario::Mixed => mixed += 1,
                Scenario::VocalOnly => vocal += 1,
                Scenario::BackgroundOnly => bg += 1,
            }
        }
        assert!((mixed as i64 - 70).abs() <= 2);
        assert!((vocal as i64 - 15).abs() <= 2);
        assert!((bg as i64 - 15).abs() <= 2);
    }

    #[test]
    fn dev_batches_are_deterministic_and_sized() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_corpus::<f32>(dir.path(), 4, 4, 1, 24000, 11).unwrap();
        let collect = || {
            let mut s =
                BatchStream::<f32>::new(&manifest, dir.path(), Split::Dev, 2, 5.12, 1).unwrap();
            let mut all = Vec::new();
            while let Some(batch) = s.next_batch().unwrap() {
                assert!(batch.len() <= 2);
                for seg in &batch {
                    assert_eq!(seg.audio.len_frames(), (5.12 * 24000.0) as usize);
                }
                all.extend(batch.into_iter().map(|s| (s.clip_id, s.offset_s)));
            }
            all
        };
        let a = collect();
        let b = collect();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn train_crop_offsets_cover_the_valid_range() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_corpus::<f32>(dir.path(), 3, 1, 1, 24000, 13).unwrap();
        let mut s = BatchStream::<f32>::new(&manifest, dir.path(), Split::Train, 1, 5.12, 5).unwrap();
        // Bucket normalized offsets over many draws.
        let mut buckets = [false; 10];
        for _ in 0..1000 {
            let batch = s.next_batch().unwrap().unwrap();
            let seg = &batch[0];
            let max_off = seg.clip_duration_s - 5.12;
            let x = (seg.offset_s / max_off).clamp(0.0, 0.999);
            buckets[(x * 10.0) as usize] = true;
        }
        let covered = buckets.iter().filter(|&&b| b).count();
        assert!(covered >= 9, "offset coverage {covered}/10");
    }

    #[test]
    fn crop_transcripts_take_fully_contained_symbols() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_corpus::<f32>(dir.path(), 4, 1, 1, 24000, 17).unwrap();
        let mut s = BatchStream::<f32>::new(&manifest, dir.path(), Split::Train, 1, 5.12, 7).unwrap();
        for _ in 0..40 {
            let batch = s.next_batch().unwrap().unwrap();
            let seg = &batch[0];
            let intervals = symbol_intervals(seg.clip_symbols.len(), seg.clip_duration_s);
            let expected: Vec<u8> = seg
                .clip_symbols
                .iter()
                .zip(&intervals)
                .filter(|(_, &(st, en))| st >= seg.offset_s && en <= seg.offset_s + 5.12)
                .map(|(&sym, _)| sym)
                .collect();
            assert_eq!(seg.symbols, expected);
            assert!(seg.symbols.len() <= seg.clip_symbols.len());
        }
    }

    #[test]
    fn segment_longer_than_clip_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_corpus::<f32>(dir.path(), 1, 1, 1, 24000, 19).unwrap();
        let mut s = BatchStream::<f32>::new(&manifest, dir.path(), Split::Dev, 1, 30.0, 1).unwrap();
        assert!(s.next_batch().is_err());
    }
}
