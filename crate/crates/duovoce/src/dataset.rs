//! Data protocol at desk scale: RMS-relative noise mixing, a simulated
//! vibration channel, and a synthetic toy corpus of harmonic "normal" and
//! noise-excited "whisper" utterances.
//!
//! Mixing scales a seeded tile of the noise source so its RMS sits exactly
//! `level_db` below (or above) the clean RMS; the sum is left unclipped.
//! The vibration channel is a linear-phase band-pass (10 Hz to 2 kHz) with
//! a fixed insertion loss and an additive sensor floor, whisper mode being
//! further attenuated. All randomness derives from named substreams, so a
//! corpus is a pure function of its seed.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{
    self, AudioError, DualCapture, SampleFormat, Waveform, CANONICAL_SAMPLE_RATE_HZ,
};
use crate::losses::{LossError, PseudoLabels, StubTeacher, TEACHER_VOCAB};
use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{which} signal is silent")]
    SilentInput { which: &'static str },
    #[error("waveform at {got} Hz, expected {want} Hz")]
    SampleRate { got: u32, want: u32 },
    #[error("invalid spec: {detail}")]
    InvalidSpec { detail: String },
    #[error("utterance id {id:?} not in manifest")]
    MissingId { id: String },
    #[error("duplicate utterance id {id:?} in manifest")]
    DuplicateId { id: String },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("referenced file missing: {path}")]
    MissingFile { path: String },
    #[error("i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

// ------------------------------------------------------------------ mixing

/// How the noise instance is positioned against the clean signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseOffsetPolicy {
    #[default]
    RandomTile,
}

/// Noise level relative to the clean RMS, in dB. Positive means louder
/// noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub level_db: f64,
    pub seed: u64,
    #[serde(default)]
    pub noise_offset_policy: NoiseOffsetPolicy,
}

impl MixSpec {
    pub fn new(level_db: f64, seed: u64) -> Self {
        MixSpec { level_db, seed, noise_offset_policy: NoiseOffsetPolicy::RandomTile }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if !self.level_db.is_finite() {
            return Err(DatasetError::InvalidSpec {
                detail: format!("level_db must be finite, got {}", self.level_db),
            });
        }
        Ok(())
    }
}

/// Adds a seeded tile of `noise` to `clean`, scaled so the noise RMS equals
/// `rms(clean) * 10^(level_db/20)`. No clipping: float samples may leave
/// [-1, 1]; only integer WAV writes clamp.
pub fn mix_noise(
    clean: &Waveform,
    noise: &Waveform,
    spec: &MixSpec,
) -> Result<Waveform, DatasetError> {
    spec.validate()?;
    let rms_clean = clean.rms();
    if rms_clean <= 0.0 {
        return Err(DatasetError::SilentInput { which: "clean" });
    }
    if noise.rms() <= 0.0 {
        return Err(DatasetError::SilentInput { which: "noise" });
    }
    if noise.sample_rate != clean.sample_rate {
        return Err(DatasetError::SampleRate { got: noise.sample_rate, want: clean.sample_rate });
    }
    let NoiseOffsetPolicy::RandomTile = spec.noise_offset_policy;
    let offset =
        rng::below(&mut rng::substream(spec.seed, "mix-offset", 0), noise.len() as u64) as usize;

    let tile: Vec<f64> = (0..clean.len())
        .map(|i| noise.samples[(offset + i) % noise.len()] as f64)
        .collect();
    let tile_power: f64 = tile.iter().map(|v| v * v).sum::<f64>() / tile.len().max(1) as f64;
    if tile_power <= 0.0 {
        // The crop landed on an all-zero stretch; there is no noise to scale.
        return Err(DatasetError::SilentInput { which: "noise" });
    }
    let target_rms = rms_clean * 10f64.powf(spec.level_db / 20.0);
    let scale = target_rms / tile_power.sqrt();
    let samples = clean
        .samples
        .iter()
        .zip(&tile)
        .map(|(&c, &n)| (c as f64 + scale * n) as f32)
        .collect();
    Ok(Waveform::new(samples, clean.sample_rate))
}

// ----------------------------------------------------------- noise sources

/// Tile length generated for corpus and batch mixing, two seconds.
const NOISE_LEN: usize = 32_000;
const NOISE_RMS: f64 = 0.2;

fn normalize_rms(samples: &mut [f64], target: f64) {
    let power: f64 = samples.iter().map(|v| v * v).sum::<f64>() / samples.len().max(1) as f64;
    if power > 0.0 {
        let s = target / power.sqrt();
        for v in samples.iter_mut() {
            *v *= s;
        }
    }
}

fn to_waveform(samples: Vec<f64>) -> Waveform {
    Waveform::new(samples.into_iter().map(|v| v as f32).collect(), CANONICAL_SAMPLE_RATE_HZ)
}

/// Pink noise via the Kellet three-pole approximation, RMS-normalized.
pub fn pink_noise(len: usize, seed: u64) -> Waveform {
    const WARMUP: usize = 1000;
    let mut r = rng::substream(seed, "pink-noise", 0);
    let (mut b0, mut b1, mut b2) = (0f64, 0f64, 0f64);
    let mut samples = Vec::with_capacity(len);
    // The warmup carries the filter state past its longest time constant.
    for i in 0..WARMUP + len {
        let white = rng::normal(&mut r);
        b0 = 0.99765 * b0 + white * 0.0990460;
        b1 = 0.96300 * b1 + white * 0.2965164;
        b2 = 0.57000 * b2 + white * 1.0526913;
        if i >= WARMUP {
            samples.push(b0 + b1 + b2 + white * 0.1848);
        }
    }
    normalize_rms(&mut samples, NOISE_RMS);
    to_waveform(samples)
}

/// Babble-like noise: several static harmonic complexes, each amplitude-
/// modulated at a syllabic rate, summed and RMS-normalized.
pub fn babble_noise(len: usize, seed: u64) -> Waveform {
    const VOICES: usize = 8;
    const HARMONICS: usize = 6;
    let fs = CANONICAL_SAMPLE_RATE_HZ as f64;
    let mut r = rng::substream(seed, "babble-noise", 0);
    let mut samples = vec![0f64; len];
    for _ in 0..VOICES {
        let f0 = rng::uniform_in(&mut r, 90.0, 240.0);
        let am_rate = rng::uniform_in(&mut r, 2.0, 6.0);
        let am_phase = rng::uniform_in(&mut r, 0.0, std::f64::consts::TAU);
        let phases: Vec<f64> =
            (0..HARMONICS).map(|_| rng::uniform_in(&mut r, 0.0, std::f64::consts::TAU)).collect();
        for (n, slot) in samples.iter_mut().enumerate() {
            let t = n as f64 / fs;
            let mut v = 0.0;
            for (h, &ph) in phases.iter().enumerate() {
                let k = (h + 1) as f64;
                v += (std::f64::consts::TAU * f0 * k * t + ph).sin() / k;
            }
            let env = 0.2 + 0.8 * 0.5 * (1.0 + (std::f64::consts::TAU * am_rate * t + am_phase).sin());
            *slot += v * env;
        }
    }
    normalize_rms(&mut samples, NOISE_RMS);
    to_waveform(samples)
}

// ------------------------------------------------------- vibration channel

/// Utterance voicing mode. Whisper lacks harmonic structure and couples
/// weakly into the vibration sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Normal,
    Whisper,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Normal => "normal",
            Mode::Whisper => "whisper",
        })
    }
}

const VIB_TAPS: usize = 481;
const VIB_LOW_HZ: f64 = 10.0;
const VIB_HIGH_HZ: f64 = 2000.0;
const VIB_GAIN: f64 = 0.501_187_233_627_272_2; // -6 dB
const VIB_WHISPER_EXTRA: f64 = 0.251_188_643_150_957_96; // -12 dB
const VIB_FLOOR: f64 = 0.003_162_277_660_168_379_4; // -50 dB

/// Linear-phase band-pass taps, symmetric by construction, with the tap sum
/// removed so the DC gain is exactly zero.
fn vib_taps() -> &'static [f64] {
    static TAPS: OnceLock<Vec<f64>> = OnceLock::new();
    TAPS.get_or_init(|| {
        let fs = CANONICAL_SAMPLE_RATE_HZ as f64;
        let m = (VIB_TAPS - 1) / 2;
        let sinc = |x: f64| {
            if x == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            }
        };
        let mut taps = vec![0f64; VIB_TAPS];
        for d in 0..=m {
            let x = d as f64;
            // Blackman window evaluated at index m + d; mirroring below
            // makes the symmetry exact rather than trusting cos rounding.
            let u = std::f64::consts::TAU * (m as f64 + x) / (VIB_TAPS - 1) as f64;
            let win = 0.42 - 0.5 * u.cos() + 0.08 * (2.0 * u).cos();
            let ideal = 2.0 * VIB_HIGH_HZ / fs * sinc(2.0 * VIB_HIGH_HZ / fs * x)
                - 2.0 * VIB_LOW_HZ / fs * sinc(2.0 * VIB_LOW_HZ / fs * x);
            let v = ideal * win;
            taps[m + d] = v;
            taps[m - d] = v;
        }
        let mean: f64 = taps.iter().sum::<f64>() / VIB_TAPS as f64;
        for t in taps.iter_mut() {
            *t -= mean;
        }
        taps
    })
}

/// Band-limited, attenuated copy of the clean signal plus a sensor floor.
/// The filter's group delay is compensated, so output aligns with input.
pub fn simulate_vib(clean: &Waveform, mode: Mode, seed: u64) -> Result<Waveform, DatasetError> {
    if clean.sample_rate != CANONICAL_SAMPLE_RATE_HZ {
        return Err(DatasetError::SampleRate {
            got: clean.sample_rate,
            want: CANONICAL_SAMPLE_RATE_HZ,
        });
    }
    let taps = vib_taps();
    let delay = (VIB_TAPS - 1) / 2;
    let len = clean.len();
    let gain = match mode {
        Mode::Normal => VIB_GAIN,
        Mode::Whisper => VIB_GAIN * VIB_WHISPER_EXTRA,
    };
    let floor_rms = clean.rms() * VIB_FLOOR;
    let mut floor_rng = rng::substream(seed, "vib-floor", 0);
    let samples = (0..len)
        .map(|i| {
            let mut acc = 0f64;
            for (n, &t) in taps.iter().enumerate() {
                let j = i as isize + delay as isize - n as isize;
                if j >= 0 && (j as usize) < len {
                    acc += t * clean.samples[j as usize] as f64;
                }
            }
            (gain * acc + floor_rms * rng::normal(&mut floor_rng)) as f32
        })
        .collect();
    Ok(Waveform::new(samples, clean.sample_rate))
}

// ----------------------------------------------------------- toy synthesis

const PITCH_LOW_HZ: f64 = 85.0;
const PITCH_HIGH_HZ: f64 = 240.0;
const NORMAL_RMS: f64 = 0.15;
const WHISPER_RMS: f64 = 0.05;
const PEAK_CAP: f64 = 0.8;

struct Formant {
    center_hz: f64,
    lfo_rate_hz: f64,
    lfo_phase: f64,
    r: f64,
    gain: f64,
}

/// Speech-like utterance: pulse-train (normal) or white-noise (whisper)
/// excitation through slowly drifting parallel resonators, with edge fades
/// and mild amplitude modulation.
fn synth_clean(seed: u64, id: u64, mode: Mode) -> Waveform {
    let fs = CANONICAL_SAMPLE_RATE_HZ as f64;
    let mut r = rng::substream(seed, "utterance-synth", id);
    let dur = rng::uniform_in(&mut r, 1.0, 3.0);
    let len = (dur * fs).round() as usize;

    let f0_base = rng::uniform_in(&mut r, PITCH_LOW_HZ, PITCH_HIGH_HZ);
    let f0_depth = rng::uniform_in(&mut r, 0.01, 0.04);
    let f0_rate = rng::uniform_in(&mut r, 0.5, 2.0);
    let f0_phase = rng::uniform_in(&mut r, 0.0, std::f64::consts::TAU);

    // Whispered formants are broader: turbulent excitation spreads energy,
    // and the wide bandwidth is what keeps whisper autocorrelation low.
    let bw_mult = match mode {
        Mode::Normal => 1.0,
        Mode::Whisper => 3.0,
    };
    let ranges = [(320.0, 800.0), (1000.0, 2200.0), (2400.0, 3200.0)];
    let gains = [1.0, 0.6, 0.35];
    let n_formants = 2 + rng::below(&mut r, 2) as usize;
    let formants: Vec<Formant> = (0..n_formants)
        .map(|k| {
            let (lo, hi) = ranges[k];
            let bw = rng::uniform_in(&mut r, 80.0, 150.0) * bw_mult;
            Formant {
                center_hz: rng::uniform_in(&mut r, lo, hi),
                lfo_rate_hz: rng::uniform_in(&mut r, 0.3, 1.5),
                lfo_phase: rng::uniform_in(&mut r, 0.0, std::f64::consts::TAU),
                r: (-std::f64::consts::PI * bw / fs).exp(),
                gain: gains[k],
            }
        })
        .collect();

    let am_rate = rng::uniform_in(&mut r, 2.0, 5.0);
    let am_phase = rng::uniform_in(&mut r, 0.0, std::f64::consts::TAU);

    let mut phase = rng::uniform(&mut r);
    let mut state: Vec<(f64, f64)> = vec![(0.0, 0.0); formants.len()];
    let mut out = vec![0f64; len];
    for (n, slot) in out.iter_mut().enumerate() {
        let t = n as f64 / fs;
        let excitation = match mode {
            Mode::Normal => {
                let f0 = f0_base
                    * (1.0 + f0_depth * (std::f64::consts::TAU * f0_rate * t + f0_phase).sin());
                phase += f0 / fs;
                if phase >= 1.0 {
                    phase -= 1.0;
                    1.0
                } else {
                    0.0
                }
            }
            Mode::Whisper => rng::normal(&mut r),
        };
        let mut v = 0.0;
        for (f, st) in formants.iter().zip(state.iter_mut()) {
            let center = f.center_hz
                * (1.0 + 0.08 * (std::f64::consts::TAU * f.lfo_rate_hz * t + f.lfo_phase).sin());
            let theta = std::f64::consts::TAU * center / fs;
            let y = excitation + 2.0 * f.r * theta.cos() * st.0 - f.r * f.r * st.1;
            st.1 = st.0;
            st.0 = y;
            v += f.gain * y;
        }
        let fade_len = 0.05 * fs;
        let edge = (n as f64).min((len - 1 - n) as f64);
        let fade = if edge < fade_len {
            0.5 * (1.0 - (std::f64::consts::PI * edge / fade_len).cos())
        } else {
            1.0
        };
        let am = 1.0 + 0.25 * (std::f64::consts::TAU * am_rate * t + am_phase).sin();
        *slot = v * fade * am;
    }

    let target = match mode {
        Mode::Normal => NORMAL_RMS,
        Mode::Whisper => WHISPER_RMS,
    };
    let power: f64 = out.iter().map(|v| v * v).sum::<f64>() / len as f64;
    let peak = out.iter().fold(0f64, |a, &v| a.max(v.abs()));
    if power > 0.0 && peak > 0.0 {
        let s = (target / power.sqrt()).min(PEAK_CAP / peak);
        for v in out.iter_mut() {
            *v *= s;
        }
    }
    to_waveform(out)
}

// ----------------------------------------------------------------- corpus

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean_path: String,
    pub vib_path: String,
    pub noisy_path: String,
    pub mode: Mode,
    pub level_db: f64,
    pub transcript_tokens: Vec<usize>,
}

/// Corpus index: one utterance per entry, file paths relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

impl CorpusManifest {
    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    /// Parses a JSONL manifest, requiring unique ids and existing files.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| DatasetError::Manifest { line: i + 1, detail: e.to_string() })?;
            if entries.iter().any(|prev| prev.id == entry.id) {
                return Err(DatasetError::DuplicateId { id: entry.id });
            }
            entries.push(entry);
        }
        let manifest = CorpusManifest { root, entries };
        for e in &manifest.entries {
            for rel in [&e.clean_path, &e.vib_path, &e.noisy_path] {
                let p = manifest.resolve(rel);
                if !p.is_file() {
                    return Err(DatasetError::MissingFile { path: p.display().to_string() });
                }
            }
        }
        Ok(manifest)
    }

    fn save(&self) -> Result<(), DatasetError> {
        let path = self.manifest_path();
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let line = serde_json::to_string(e)
                .map_err(|e| DatasetError::Manifest { line: 0, detail: e.to_string() })?;
            writeln!(w, "{line}").map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))
    }
}

/// Synthesizes `n_utterances` utterances (modes alternating), mixes each
/// with a seeded noise instance at a level drawn uniformly from [-10, +10],
/// simulates the vibration channel, transcribes the clean signal with the
/// frozen stub teacher, and writes float32 WAVs plus a JSONL manifest.
pub fn gen_toy_corpus(
    n_utterances: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusManifest, DatasetError> {
    if n_utterances == 0 {
        return Err(DatasetError::InvalidSpec { detail: "n_utterances must be >= 1".into() });
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let teacher = StubTeacher::frozen();
    let mut entries = Vec::with_capacity(n_utterances);
    for id in 0..n_utterances as u64 {
        let mode = if id % 2 == 0 { Mode::Normal } else { Mode::Whisper };
        let clean = synth_clean(seed, id, mode);

        let mut r = rng::substream(seed, "utterance-mix", id);
        let level_db = rng::uniform_in(&mut r, -10.0, 10.0);
        let noise_seed = r.next_u64();
        let mix_seed = r.next_u64();
        let vib_seed = r.next_u64();
        let noise = if rng::uniform(&mut r) < 0.5 {
            pink_noise(NOISE_LEN, noise_seed)
        } else {
            babble_noise(NOISE_LEN, noise_seed)
        };

        let noisy = mix_noise(&clean, &noise, &MixSpec::new(level_db, mix_seed))?;
        let vib = simulate_vib(&clean, mode, vib_seed)?;
        let labels = teacher.transcribe(&clean)?;

        let name = format!("utt-{id:04}");
        let entry = ManifestEntry {
            id: name.clone(),
            clean_path: format!("{name}.clean.wav"),
            vib_path: format!("{name}.vib.wav"),
            noisy_path: format!("{name}.noisy.wav"),
            mode,
            level_db,
            transcript_tokens: labels.tokens,
        };
        for (rel, wave) in
            [(&entry.clean_path, &clean), (&entry.vib_path, &vib), (&entry.noisy_path, &noisy)]
        {
            audio_io::write_wav(&out_dir.join(rel), wave, SampleFormat::Float32)?;
        }
        entries.push(entry);
    }
    let manifest = CorpusManifest { root: out_dir.to_path_buf(), entries };
    manifest.save()?;
    Ok(manifest)
}

// --------------------------------------------------------- training batches

/// One training batch: dual captures aligned with clean targets and the
/// pseudo-labels recorded in the manifest.
#[derive(Debug)]
pub struct TrainingBatch {
    pub captures: Vec<DualCapture>,
    pub cleans: Vec<Waveform>,
    pub labels: Vec<PseudoLabels>,
}

/// Re-mixes the requested utterances at `spec.level_db` with fresh seeded
/// noise and a fresh vibration simulation. The vibration path never sees
/// the mixing level.
pub fn build_training_batch(
    manifest: &CorpusManifest,
    ids: &[&str],
    spec: &MixSpec,
) -> Result<TrainingBatch, DatasetError> {
    spec.validate()?;
    let mut captures = Vec::with_capacity(ids.len());
    let mut cleans = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for (slot, id) in ids.iter().enumerate() {
        let entry = manifest
            .entry(id)
            .ok_or_else(|| DatasetError::MissingId { id: (*id).to_string() })?;
        let clean = audio_io::read_wav(&manifest.resolve(&entry.clean_path))?;
        if clean.sample_rate != CANONICAL_SAMPLE_RATE_HZ {
            return Err(DatasetError::SampleRate {
                got: clean.sample_rate,
                want: CANONICAL_SAMPLE_RATE_HZ,
            });
        }
        let mut r = rng::substream(spec.seed, "batch-mix", slot as u64);
        let noise_seed = r.next_u64();
        let mix_seed = r.next_u64();
        let vib_seed = r.next_u64();
        let noise = if rng::uniform(&mut r) < 0.5 {
            pink_noise(NOISE_LEN, noise_seed)
        } else {
            babble_noise(NOISE_LEN, noise_seed)
        };
        let mic = mix_noise(&clean, &noise, &MixSpec::new(spec.level_db, mix_seed))?;
        let vib = simulate_vib(&clean, entry.mode, vib_seed)?;
        captures.push(DualCapture::new(vib, mic)?);
        labels.push(PseudoLabels::new(entry.transcript_tokens.clone(), TEACHER_VOCAB)?);
        cleans.push(clean);
    }
    Ok(TrainingBatch { captures, cleans, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    const FS: f64 = CANONICAL_SAMPLE_RATE_HZ as f64;
    // Frozen dB ratios: 10^(x/20) for x = -10, -6, -12, -40.
    const RATIO_M10: f64 = 0.31622776601683794;
    const RATIO_M6: f64 = 0.5011872336272722;
    const RATIO_M12: f64 = 0.25118864315095796;
    const RATIO_M40: f64 = 0.01;

    fn test_wave(len: usize, index: u64, amp: f64) -> Waveform {
        let mut r = rng::substream(7000, "dataset-test", index);
        let samples =
            (0..len).map(|_| rng::uniform_in(&mut r, -amp, amp) as f32).collect();
        Waveform::new(samples, CANONICAL_SAMPLE_RATE_HZ)
    }

    fn sine(freq_hz: f64, len: usize, amp: f64) -> Waveform {
        let samples =
            (0..len).map(|n| (amp * (TAU * freq_hz * n as f64 / FS).sin()) as f32).collect();
        Waveform::new(samples, CANONICAL_SAMPLE_RATE_HZ)
    }

    fn noise_component_ratio_db(mix: &Waveform, clean: &Waveform) -> f64 {
        let p: f64 = mix
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(&m, &c)| {
                let d = m as f64 - c as f64;
                d * d
            })
            .sum::<f64>()
            / mix.len() as f64;
        20.0 * (p.sqrt() / clean.rms()).log10()
    }

    #[test]
    fn mix_hits_requested_ratio_at_zero_db() {
        let clean = test_wave(4800, 0, 0.3);
        let noise = test_wave(7000, 1, 0.5);
        let mix = mix_noise(&clean, &noise, &MixSpec::new(0.0, 11)).unwrap();
        let db = noise_component_ratio_db(&mix, &clean);
        let ratio = 10f64.powf(db / 20.0);
        assert!((ratio - 1.0).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn mix_hits_requested_ratio_at_minus_ten_db() {
        let clean = test_wave(4800, 2, 0.3);
        let noise = test_wave(3000, 3, 0.5);
        let mix = mix_noise(&clean, &noise, &MixSpec::new(-10.0, 12)).unwrap();
        let db = noise_component_ratio_db(&mix, &clean);
        let ratio = 10f64.powf(db / 20.0);
        assert!((ratio - RATIO_M10).abs() < 1e-5, "ratio {ratio} vs {RATIO_M10}");
    }

    #[test]
    fn mix_is_deterministic_per_seed() {
        let clean = test_wave(2400, 4, 0.3);
        let noise = test_wave(5000, 5, 0.5);
        let a = mix_noise(&clean, &noise, &MixSpec::new(3.0, 21)).unwrap();
        let b = mix_noise(&clean, &noise, &MixSpec::new(3.0, 21)).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = mix_noise(&clean, &noise, &MixSpec::new(3.0, 22)).unwrap();
        assert_ne!(a.samples, c.samples, "a different seed must move the noise offset");
    }

    #[test]
    fn mix_rejects_silent_and_mismatched_inputs() {
        let clean = test_wave(2400, 6, 0.3);
        let noise = test_wave(2400, 7, 0.5);
        let silent = Waveform::zeros(2400, CANONICAL_SAMPLE_RATE_HZ);
        assert!(matches!(
            mix_noise(&silent, &noise, &MixSpec::new(0.0, 1)),
            Err(DatasetError::SilentInput { which: "clean" })
        ));
        assert!(matches!(
            mix_noise(&clean, &silent, &MixSpec::new(0.0, 1)),
            Err(DatasetError::SilentInput { which: "noise" })
        ));
        assert!(matches!(
            mix_noise(&clean, &noise, &MixSpec::new(f64::NAN, 1)),
            Err(DatasetError::InvalidSpec { .. })
        ));
        let wrong_rate = Waveform::new(noise.samples.clone(), 8000);
        assert!(matches!(
            mix_noise(&clean, &wrong_rate, &MixSpec::new(0.0, 1)),
            Err(DatasetError::SampleRate { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mixing_snr_is_exact_within_a_hundredth_db(
            clean_len in 400usize..4000,
            noise_len in 100usize..5000,
            level in -10f64..10.0,
            seed in 0u64..1000,
        ) {
            let clean = test_wave(clean_len, 100 + seed, 0.3);
            let noise = test_wave(noise_len, 200 + seed, 0.5);
            let mix = mix_noise(&clean, &noise, &MixSpec::new(level, seed)).unwrap();
            let db = noise_component_ratio_db(&mix, &clean);
            prop_assert!((db - level).abs() < 0.01, "requested {level} dB, measured {db} dB");
        }
    }

    // |H(f)| of the tap vector by direct evaluation, the response oracle.
    fn tap_response(freq_hz: f64) -> f64 {
        let taps = vib_taps();
        let (mut re, mut im) = (0f64, 0f64);
        for (n, &t) in taps.iter().enumerate() {
            let w = TAU * freq_hz * n as f64 / FS;
            re += t * w.cos();
            im -= t * w.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn vib_taps_are_linear_phase_with_zero_dc() {
        let taps = vib_taps();
        assert_eq!(taps.len(), VIB_TAPS);
        for d in 0..VIB_TAPS / 2 {
            assert_eq!(taps[d], taps[VIB_TAPS - 1 - d], "tap {d} breaks symmetry");
        }
        let sum: f64 = taps.iter().sum();
        assert!(sum.abs() < 1e-15, "tap sum {sum}");
    }

    #[test]
    fn vib_frequency_response_meets_the_band_spec() {
        assert!(tap_response(0.0) < 1e-12);
        for f in [300.0, 500.0, 1000.0, 1500.0] {
            let h = tap_response(f);
            assert!((h - 1.0).abs() < 0.03, "passband {f} Hz response {h}");
        }
        for f in [3000.0, 5000.0, 7000.0] {
            let h = tap_response(f);
            assert!(h <= RATIO_M40, "stopband {f} Hz response {h} above -40 dB");
        }
    }

    #[test]
    fn vib_attenuates_out_of_band_sine() {
        let input = sine(5000.0, 16000, 0.3);
        let out = simulate_vib(&input, Mode::Normal, 31).unwrap();
        let bound = input.rms() * RATIO_M40 + input.rms() * VIB_FLOOR * 1.5;
        assert!(out.rms() <= bound, "5 kHz leak: rms {} vs bound {bound}", out.rms());
    }

    #[test]
    fn vib_passes_in_band_sine_at_minus_six_db() {
        let input = sine(500.0, 16000, 0.3);
        let out = simulate_vib(&input, Mode::Normal, 32).unwrap();
        let expected = input.rms() * RATIO_M6;
        assert!(
            (out.rms() - expected).abs() < 0.1 * expected,
            "500 Hz rms {} vs expected {expected}",
            out.rms()
        );
    }

    #[test]
    fn vib_whisper_applies_extra_attenuation() {
        let input = sine(500.0, 16000, 0.3);
        let normal = simulate_vib(&input, Mode::Normal, 33).unwrap();
        let whisper = simulate_vib(&input, Mode::Whisper, 33).unwrap();
        let ratio = whisper.rms() / normal.rms();
        assert!((ratio - RATIO_M12).abs() < 0.02, "whisper/normal rms ratio {ratio}");
    }

    #[test]
    fn vib_kills_dc() {
        let input = Waveform::new(vec![0.5; 16000], CANONICAL_SAMPLE_RATE_HZ);
        let out = simulate_vib(&input, Mode::Normal, 34).unwrap();
        // Interior samples see the full tap window, whose sum is zero; the
        // first and last half-window are edge transients and excluded.
        let interior = &out.samples[VIB_TAPS / 2..out.len() - VIB_TAPS / 2];
        let mean: f64 =
            interior.iter().map(|&v| v as f64).sum::<f64>() / interior.len() as f64;
        assert!(mean.abs() < 1e-4, "interior mean {mean}");
    }

    #[test]
    fn vib_is_homogeneous_for_fixed_seed() {
        let input = test_wave(8000, 8, 0.3);
        let doubled = Waveform::new(
            input.samples.iter().map(|&v| v * 2.0).collect(),
            CANONICAL_SAMPLE_RATE_HZ,
        );
        let a = simulate_vib(&input, Mode::Normal, 35).unwrap();
        let b = simulate_vib(&doubled, Mode::Normal, 35).unwrap();
        let worst = a
            .samples
            .iter()
            .zip(&b.samples)
            .map(|(&x, &y)| (2.0 * x - y).abs())
            .fold(0f32, f32::max);
        assert!(worst < 1e-5, "linearity residual {worst}");
    }

    #[test]
    fn vib_compensates_filter_delay() {
        // White noise probe: its cross-correlation against the filter
        // output traces the tap vector, whose peak sits on the center tap,
        // so any residual delay shows up as a shifted peak. A sine cannot
        // serve here, its periodicity aliases whole-period shifts to zero.
        let input = test_wave(16000, 9, 0.3);
        let out = simulate_vib(&input, Mode::Normal, 36).unwrap();
        let score = |lag: isize| -> f64 {
            let mut s = 0f64;
            for n in 400..15600usize {
                let j = n as isize + lag;
                s += out.samples[n] as f64 * input.samples[j as usize] as f64;
            }
            s
        };
        let best = (-40..=40).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        assert_eq!(best, 0, "peak correlation at lag {best}");
    }

    #[test]
    fn vib_rejects_wrong_sample_rate() {
        let input = Waveform::new(vec![0.1; 4000], 8000);
        assert!(matches!(
            simulate_vib(&input, Mode::Normal, 1),
            Err(DatasetError::SampleRate { .. })
        ));
    }

    #[test]
    fn pink_noise_is_deterministic_with_low_tilt() {
        let a = pink_noise(16000, 50);
        let b = pink_noise(16000, 50);
        assert_eq!(a.samples, b.samples);
        assert!((a.rms() - NOISE_RMS).abs() < 0.01);

        // Pink slope: average power per bin over 100..400 Hz should clearly
        // exceed 1600..6400 Hz (about 12 dB apart for a 1/f spectrum).
        let band_power = |lo: f64, hi: f64| -> f64 {
            let mut total = 0f64;
            let mut count = 0usize;
            let mut f = lo;
            while f < hi {
                let (mut re, mut im) = (0f64, 0f64);
                for (n, &v) in a.samples.iter().enumerate() {
                    let w = TAU * f * n as f64 / FS;
                    re += v as f64 * w.cos();
                    im -= v as f64 * w.sin();
                }
                total += re * re + im * im;
                count += 1;
                f += 50.0;
            }
            total / count as f64
        };
        let low = band_power(100.0, 400.0);
        let high = band_power(1600.0, 6400.0);
        assert!(low > 4.0 * high, "pink tilt too weak: low {low} high {high}");
    }

    #[test]
    fn babble_noise_is_deterministic_and_modulated() {
        let a = babble_noise(16000, 60);
        let b = babble_noise(16000, 60);
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, babble_noise(16000, 61).samples);
        assert!((a.rms() - NOISE_RMS).abs() < 0.01);

        let window = 1600;
        let mut level = Vec::new();
        for chunk in a.samples.chunks(window) {
            let p: f64 =
                chunk.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / chunk.len() as f64;
            level.push(p.sqrt());
        }
        let max = level.iter().cloned().fold(0f64, f64::max);
        let min = level.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min > 1.3, "amplitude modulation too shallow: {min}..{max}");
    }

    /// Normalized autocorrelation peak over the pitch-lag range, the mode
    /// separation oracle.
    fn pitch_peak(wave: &Waveform) -> f64 {
        let x: Vec<f64> = wave.samples.iter().map(|&v| v as f64).collect();
        let lag_min = (FS / 250.0).floor() as usize;
        let lag_max = (FS / 80.0).ceil() as usize;
        let mut best = 0f64;
        for lag in lag_min..=lag_max {
            let n = x.len() - lag;
            let (mut num, mut e0, mut e1) = (0f64, 0f64, 0f64);
            for i in 0..n {
                num += x[i] * x[i + lag];
                e0 += x[i] * x[i];
                e1 += x[i + lag] * x[i + lag];
            }
            let denom = (e0 * e1).sqrt();
            if denom > 0.0 {
                best = best.max(num / denom);
            }
        }
        best
    }

    #[test]
    fn modes_separate_under_the_autocorrelation_oracle() {
        for id in 0..50u64 {
            let normal = synth_clean(90, id, Mode::Normal);
            let peak = pitch_peak(&normal);
            assert!(peak >= 0.35, "normal utterance {id} peak {peak} below margin");
            let whisper = synth_clean(90, id, Mode::Whisper);
            let peak = pitch_peak(&whisper);
            assert!(peak < 0.25, "whisper utterance {id} peak {peak} above margin");
        }
    }

    #[test]
    fn toy_corpus_writes_a_consistent_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_toy_corpus(4, 70, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        for (i, e) in manifest.entries.iter().enumerate() {
            let expected = if i % 2 == 0 { Mode::Normal } else { Mode::Whisper };
            assert_eq!(e.mode, expected);
            assert!((-10.0..=10.0).contains(&e.level_db));
            assert!(!e.transcript_tokens.is_empty());
            let clean = audio_io::read_wav(&manifest.resolve(&e.clean_path)).unwrap();
            assert!(clean.duration_seconds() >= 1.0 && clean.duration_seconds() <= 3.0);
        }
        let loaded = CorpusManifest::load(&manifest.manifest_path()).unwrap();
        assert_eq!(loaded.entries, manifest.entries);
    }

    #[test]
    fn toy_corpus_is_byte_identical_per_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_toy_corpus(2, 71, a.path()).unwrap();
        gen_toy_corpus(2, 71, b.path()).unwrap();
        for name in
            ["manifest.jsonl", "utt-0000.clean.wav", "utt-0000.noisy.wav", "utt-0001.vib.wav"]
        {
            let x = fs::read(a.path().join(name)).unwrap();
            let y = fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between identical seeds");
        }
    }

    #[test]
    fn training_batch_matches_power_addition() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_toy_corpus(2, 72, dir.path()).unwrap();
        let batch =
            build_training_batch(&manifest, &["utt-0000", "utt-0001"], &MixSpec::new(0.0, 5))
                .unwrap();
        assert_eq!(batch.captures.len(), 2);
        for (cap, clean) in batch.captures.iter().zip(&batch.cleans) {
            let ratio = cap.mic.rms() / clean.rms();
            assert!(
                (ratio - std::f64::consts::SQRT_2).abs() < 0.1 * std::f64::consts::SQRT_2,
                "0 dB mic/clean rms ratio {ratio}"
            );
        }
    }

    #[test]
    fn training_batch_vib_ignores_level_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_toy_corpus(1, 73, dir.path()).unwrap();
        let a = build_training_batch(&manifest, &["utt-0000"], &MixSpec::new(0.0, 9)).unwrap();
        let b = build_training_batch(&manifest, &["utt-0000"], &MixSpec::new(10.0, 9)).unwrap();
        assert_eq!(a.captures[0].vib.samples, b.captures[0].vib.samples);
        assert_ne!(a.captures[0].mic.samples, b.captures[0].mic.samples);
        let c = build_training_batch(&manifest, &["utt-0000"], &MixSpec::new(0.0, 9)).unwrap();
        assert_eq!(a.captures[0].mic.samples, c.captures[0].mic.samples);
        assert_eq!(a.labels[0], c.labels[0]);
    }

    #[test]
    fn training_batch_rejects_unknown_ids() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_toy_corpus(1, 74, dir.path()).unwrap();
        assert!(matches!(
            build_training_batch(&manifest, &["utt-9999"], &MixSpec::new(0.0, 1)),
            Err(DatasetError::MissingId { .. })
        ));
    }

    #[test]
    fn manifest_load_rejects_duplicates_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_toy_corpus(1, 75, dir.path()).unwrap();
        let line = fs::read_to_string(manifest.manifest_path()).unwrap();
        let doubled = format!("{line}{line}");
        let path = dir.path().join(MANIFEST_NAME);
        fs::write(&path, doubled).unwrap();
        assert!(matches!(CorpusManifest::load(&path), Err(DatasetError::DuplicateId { .. })));

        fs::write(&path, line).unwrap();
        fs::remove_file(dir.path().join("utt-0000.vib.wav")).unwrap();
        assert!(matches!(CorpusManifest::load(&path), Err(DatasetError::MissingFile { .. })));
    }
}
