//! Synthetic spoken-word corpus and audio/manifest I/O.
//!
//! Each vocabulary word renders as a short pattern of two or three sine
//! segments with word-distinct frequencies, with amplitude and speaking
//! rate jitter; background noise covers the voiced span at a configured
//! SNR while the lead-in/out stays digitally silent, so pure zeros are
//! in-distribution for the models. Everything is seeded and bitwise
//! reproducible.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PCM_MAX: f64 = 32767.0;
pub const PCM_MIN: f64 = -32768.0;

/// One corpus item: waveform in raw 16-bit sample units plus its
/// reference transcript.
#[derive(Debug, Clone)]
pub struct Utterance<S: Scalar> {
    pub id: String,
    pub waveform: Tensor<S>,
    pub transcript: String,
    pub sample_rate: u32,
}

impl<S: Scalar> Utterance<S> {
    pub fn duration_seconds(&self) -> f64 {
        self.waveform.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub vocabulary: Vec<String>,
    pub words_min: usize,
    pub words_max: usize,
    pub sample_rate: u32,
    /// Base duration of one tone segment; words have 2-3 segments.
    pub segment_ms: f64,
    /// Noise-only gap between words.
    pub gap_ms: f64,
    /// Digitally silent tail, and the upper bound of the jittered lead-in
    /// (no noise in either). The lead varies from 0 to this value so the
    /// first frames are not reliably silent, which would let the
    /// frame-synchronous losses park their alignment on silence.
    pub silence_ms: f64,
    pub snr_db: f64,
    /// Relative amplitude jitter, e.g. 0.25 for +/-25%.
    pub amplitude_jitter: f64,
    /// Relative segment-length jitter, e.g. 0.15 for +/-15%.
    pub rate_jitter: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

pub fn digit_vocabulary() -> Vec<String> {
    ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocabulary: digit_vocabulary(),
            words_min: 1,
            words_max: 8,
            sample_rate: 16_000,
            segment_ms: 70.0,
            gap_ms: 40.0,
            silence_ms: 30.0,
            snr_db: 20.0,
            amplitude_jitter: 0.25,
            rate_jitter: 0.15,
            train_count: 64,
            test_count: 32,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Small, low-rate profile for CI-sized experiments.
    pub fn fast_4khz() -> Self {
        CorpusConfig {
            sample_rate: 4_000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.is_empty() {
            return Err(Error::config("vocabulary must be nonempty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for w in &self.vocabulary {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("bad vocabulary word {w:?}")));
            }
            if !seen.insert(w) {
                return Err(Error::config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        if self.words_min == 0 || self.words_min > self.words_max {
            return Err(Error::config("words_min..words_max must be a nonempty range"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::config("snr_db must be finite"));
        }
        if !(self.segment_ms > 0.0) || self.gap_ms < 0.0 || self.silence_ms < 0.0 {
            return Err(Error::config("segment/gap/silence durations must be sane"));
        }
        Ok(())
    }

    /// Tone pattern of a word: 2-3 (frequency Hz, relative length)
    /// segments. Base frequencies are log-spaced across the usable band,
    /// one per vocabulary slot, and the segment order alternates so words
    /// are told apart by trajectory as well as pitch.
    pub fn tone_pattern(&self, word_index: usize) -> Vec<(f64, f64)> {
        let n = self.vocabulary.len();
        let nyquist = self.sample_rate as f64 / 2.0;
        let lo = 0.10 * nyquist;
        let hi = 0.58 * nyquist;
        let base = if n == 1 {
            lo
        } else {
            lo * (hi / lo).powf(word_index as f64 / (n - 1) as f64)
        };
        let up = base * 1.26;
        match word_index % 3 {
            0 => vec![(base, 1.0), (up, 1.0)],
            1 => vec![(up, 1.0), (base, 1.0)],
            _ => vec![(base, 0.8), (up, 0.8), (base, 0.8)],
        }
    }
}

fn ms_to_samples(sr: u32, ms: f64) -> usize {
    (sr as f64 * ms / 1000.0).round() as usize
}

fn render_utterance<S: Scalar>(cfg: &CorpusConfig, rng: &mut ChaCha8Rng, id: String) -> Utterance<S> {
    let n_words = rng.gen_range(cfg.words_min..=cfg.words_max);
    let word_ids: Vec<usize> = (0..n_words)
        .map(|_| rng.gen_range(0..cfg.vocabulary.len()))
        .collect();

    let sr = cfg.sample_rate;
    let lead = rng.gen_range(0..=ms_to_samples(sr, cfg.silence_ms));
    let trail = ms_to_samples(sr, cfg.silence_ms);
    let gap = ms_to_samples(sr, cfg.gap_ms);
    let base_amp = 0.35 * PCM_MAX;
    let ramp = ms_to_samples(sr, 5.0).max(1);

    let mut voiced: Vec<f64> = Vec::new();
    for (wi, &w) in word_ids.iter().enumerate() {
        if wi > 0 {
            voiced.extend(std::iter::repeat(0.0).take(gap));
        }
        let amp = base_amp * (1.0 + rng.gen_range(-cfg.amplitude_jitter..=cfg.amplitude_jitter));
        let rate = 1.0 + rng.gen_range(-cfg.rate_jitter..=cfg.rate_jitter);
        for (freq, rel_len) in cfg.tone_pattern(w) {
            let len = (ms_to_samples(sr, cfg.segment_ms) as f64 * rel_len * rate).round() as usize;
            let len = len.max(2 * ramp);
            for i in 0..len {
                let envelope = if i < ramp {
                    i as f64 / ramp as f64
                } else if i + ramp >= len {
                    (len - i) as f64 / ramp as f64
                } else {
                    1.0
                };
                let t = i as f64 / sr as f64;
                voiced.push(amp * envelope * (2.0 * std::f64::consts::PI * freq * t).sin());
            }
        }
    }

    // noise over the voiced span only, scaled against the signal RMS
    let rms = (voiced.iter().map(|v| v * v).sum::<f64>() / voiced.len().max(1) as f64).sqrt();
    let noise_std = rms / 10f64.powf(cfg.snr_db / 20.0);
    for v in voiced.iter_mut() {
        // Box-Muller keeps us on the one seeded stream
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        *v += noise_std * z;
    }

    let mut samples = Vec::with_capacity(voiced.len() + lead + trail);
    samples.extend(std::iter::repeat(0.0).take(lead));
    samples.extend(voiced);
    samples.extend(std::iter::repeat(0.0).take(trail));
    let data: Vec<S> = samples
        .into_iter()
        .map(|v| S::of(v.round().clamp(PCM_MIN, PCM_MAX)))
        .collect();

    let transcript = word_ids
        .iter()
        .map(|&w| cfg.vocabulary[w].as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let n = data.len();
    Utterance {
        id,
        waveform: Tensor::new(vec![n], data).expect("rendered shape"),
        transcript,
        sample_rate: sr,
    }
}

/// Seeded train/test corpus with disjoint ids. A pure function of the
/// config: the same config yields bitwise-identical corpora.
pub fn generate_corpus<S: Scalar>(cfg: &CorpusConfig) -> Result<(Vec<Utterance<S>>, Vec<Utterance<S>>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = (0..cfg.train_count)
        .map(|i| render_utterance(cfg, &mut rng, format!("train-{i:03}")))
        .collect();
    let test = (0..cfg.test_count)
        .map(|i| render_utterance(cfg, &mut rng, format!("test-{i:03}")))
        .collect();
    Ok((train, test))
}

// ── WAV ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteStats {
    /// Samples clamped into the 16-bit range during rounding.
    pub clipped: usize,
}

/// Write mono 16-bit PCM, rounding raw sample units to the nearest
/// integer. Out-of-range samples clamp to the int16 limits and are
/// reported (and warned about on stderr).
pub fn write_wav<S: Scalar>(path: &Path, waveform: &Tensor<S>, sample_rate: u32) -> Result<WriteStats> {
    let mut stats = WriteStats::default();
    let mut pcm = Vec::with_capacity(waveform.len() * 2);
    for &v in waveform.data() {
        let r = v.as_f64().round();
        let c = r.clamp(PCM_MIN, PCM_MAX);
        if c != r {
            stats.clipped += 1;
        }
        pcm.extend_from_slice(&(c as i16).to_le_bytes());
    }
    let data_len = pcm.len() as u32;
    let mut bytes = Vec::with_capacity(44 + pcm.len());
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes());
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    bytes.extend_from_slice(&pcm);
    fs::write(path, bytes)?;
    if stats.clipped > 0 {
        eprintln!(
            "warning: {} sample(s) clipped to the 16-bit range writing {}",
            stats.clipped,
            path.display()
        );
    }
    Ok(stats)
}

/// Read mono 16-bit PCM. Returns integer-valued raw samples and the
/// sample rate.
pub fn read_wav<S: Scalar>(path: &Path) -> Result<(Tensor<S>, u32)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let what = path.display().to_string();
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format(&what, "missing RIFF/WAVE header"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            let name = String::from_utf8_lossy(id).into_owned();
            return Err(Error::format(&what, format!("truncated `{name}` chunk")));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format(&what, "short `fmt ` chunk"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {} // skip ancillary chunks
        }
        pos = body_start + size + (size % 2); // chunks are word-aligned
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::format(&what, "missing `fmt ` chunk"))?;
    if format != 1 {
        return Err(Error::format(&what, format!("`fmt ` declares non-PCM format {format}")));
    }
    if channels != 1 {
        return Err(Error::format(&what, format!("`fmt ` declares {channels} channels, need mono")));
    }
    if bits != 16 {
        return Err(Error::format(&what, format!("`fmt ` declares {bits}-bit samples, need 16")));
    }
    let data = data.ok_or_else(|| Error::format(&what, "missing `data` chunk"))?;
    if data.len() % 2 != 0 {
        return Err(Error::format(&what, "odd `data` chunk length"));
    }
    let samples: Vec<S> = data
        .chunks_exact(2)
        .map(|c| S::of(i16::from_le_bytes([c[0], c[1]]) as f64))
        .collect();
    if samples.is_empty() {
        return Err(Error::format(&what, "empty `data` chunk"));
    }
    let n = samples.len();
    Ok((Tensor::new(vec![n], samples)?, rate))
}

// ── manifests and corpus layout ──────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    wav: String,
    transcript: String,
}

/// Read a JSON-lines manifest (`{"id","wav","transcript"}` per line) and
/// load every referenced WAV, resolving paths against the manifest's
/// directory.
pub fn read_manifest<S: Scalar>(path: &Path) -> Result<Vec<Utterance<S>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(path.display().to_string(), format!("cannot read manifest: {e}")))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| {
            Error::format(
                format!("{}:{}", path.display(), lineno + 1),
                format!("bad manifest line: {e}"),
            )
        })?;
        let wav_path = dir.join(&parsed.wav);
        let (waveform, sample_rate) = read_wav(&wav_path)?;
        out.push(Utterance {
            id: parsed.id,
            waveform,
            transcript: parsed.transcript,
            sample_rate,
        });
    }
    Ok(out)
}

/// Write one split under `dir`: `NNN.wav` files plus `manifest.jsonl`.
pub fn write_split<S: Scalar>(dir: &Path, utterances: &[Utterance<S>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, utt) in utterances.iter().enumerate() {
        let name = format!("{i:03}.wav");
        write_wav(&dir.join(&name), &utt.waveform, utt.sample_rate)?;
        let line = serde_json::to_string(&ManifestLine {
            id: utt.id.clone(),
            wav: name,
            transcript: utt.transcript.clone(),
        })
        .expect("manifest line serializes");
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let mut f = fs::File::create(dir.join("manifest.jsonl"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

/// `corpus/{train,test}/NNN.wav` + per-split `manifest.jsonl`.
pub fn write_corpus<S: Scalar>(dir: &Path, train: &[Utterance<S>], test: &[Utterance<S>]) -> Result<()> {
    write_split(&dir.join("train"), train)?;
    write_split(&dir.join("test"), test)
}

pub fn split_manifest_path(corpus_dir: &Path, split: &str) -> PathBuf {
    corpus_dir.join(split).join("manifest.jsonl")
}
