//! Toy end-to-end ASR model families: a shared unidirectional GRU
//! encoder over log-mel frames with one of three heads — content-based
//! attention decoder, CTC projection, or RNN-T prediction+joint network.
//! Models are immutable after build/train; every forward pass runs on a
//! caller-provided tape, so one model serves many threads.

mod attention;
mod checkpoint;
mod rnnt;
mod trainer;

pub use checkpoint::{load_model, save_model, CHECKPOINT_MAGIC};
pub use trainer::{train, TrainOutcome};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::losses::{self, LabelSequence};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Attention,
    Ctc,
    Rnnt,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::Attention => write!(f, "attention"),
            Arch::Ctc => write!(f, "ctc"),
            Arch::Rnnt => write!(f, "rnnt"),
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Arch::Attention),
            "ctc" => Ok(Arch::Ctc),
            "rnnt" => Ok(Arch::Rnnt),
            other => Err(Error::config(format!(
                "unknown arch {other:?}, expected attention|ctc|rnnt"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    /// Attention projection width; set exactly when `arch` is attention.
    pub attention_dim: Option<usize>,
    pub vocabulary: Vec<String>,
    pub features: FeatureConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Arch, vocabulary: Vec<String>) -> Self {
        ModelConfig {
            arch,
            encoder_layers: 2,
            encoder_hidden: 64,
            decoder_hidden: 64,
            attention_dim: match arch {
                Arch::Attention => Some(32),
                _ => None,
            },
            vocabulary,
            features: FeatureConfig::default(),
            seed: 0,
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
        if self.encoder_layers == 0 || self.encoder_hidden == 0 || self.decoder_hidden == 0 {
            return Err(Error::config("layer sizes must be positive"));
        }
        match (self.arch, self.attention_dim) {
            (Arch::Attention, Some(a)) if a > 0 => {}
            (Arch::Attention, _) => {
                return Err(Error::config("attention arch requires a positive attention_dim"))
            }
            (_, None) => {}
            (_, Some(_)) => {
                return Err(Error::config("attention_dim is only valid for the attention arch"))
            }
        }
        self.features.validate()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Half-width of the uniform init interval, 1/sqrt(fan-in).
    pub init_bound: f64,
}

fn gru_specs(prefix: &str, d_in: usize, hidden: usize, out: &mut Vec<ParamSpec>) {
    let ki = 1.0 / (d_in as f64).sqrt();
    let kh = 1.0 / (hidden as f64).sqrt();
    out.push(ParamSpec {
        name: format!("{prefix}.wi"),
        shape: vec![d_in, 3 * hidden],
        init_bound: ki,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.wh"),
        shape: vec![hidden, 3 * hidden],
        init_bound: kh,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bi"),
        shape: vec![1, 3 * hidden],
        init_bound: ki,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bh"),
        shape: vec![1, 3 * hidden],
        init_bound: kh,
    });
}

/// Full parameter roster for a config, in creation (and checkpoint)
/// order.
pub(crate) fn param_spec(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mels = cfg.features.num_mels;
    let h = cfg.encoder_hidden;
    for l in 0..cfg.encoder_layers {
        let d_in = if l == 0 { mels } else { h };
        gru_specs(&format!("enc{l}"), d_in, h, &mut out);
    }
    let v = cfg.vocab_size();
    let dd = cfg.decoder_hidden;
    match cfg.arch {
        Arch::Ctc => {
            let k = 1.0 / (h as f64).sqrt();
            out.push(ParamSpec {
                name: "ctc.w".into(),
                shape: vec![h, v + 1],
                init_bound: k,
            });
            out.push(ParamSpec {
                name: "ctc.b".into(),
                shape: vec![1, v + 1],
                init_bound: k,
            });
        }
        Arch::Attention => {
            let a = cfg.attention_dim.expect("validated");
            let ke = 1.0 / (dd as f64).sqrt();
            out.push(ParamSpec {
                name: "att.embed".into(),
                shape: vec![v + 2, dd],
                init_bound: ke,
            });
            gru_specs("att.gru", dd + h, dd, &mut out);
            out.push(ParamSpec {
                name: "att.wq".into(),
                shape: vec![dd, a],
                init_bound: 1.0 / (dd as f64).sqrt(),
            });
            out.push(ParamSpec {
                name: "att.wk".into(),
                shape: vec![h, a],
                init_bound: 1.0 / (h as f64).sqrt(),
            });
            let ko = 1.0 / ((dd + h) as f64).sqrt();
            out.push(ParamSpec {
                name: "att.out.w".into(),
                shape: vec![dd + h, v + 2],
                init_bound: ko,
            });
            out.push(ParamSpec {
                name: "att.out.b".into(),
                shape: vec![1, v + 2],
                init_bound: ko,
            });
        }
        Arch::Rnnt => {
            let ke = 1.0 / (dd as f64).sqrt();
            out.push(ParamSpec {
                name: "rnnt.embed".into(),
                shape: vec![v + 1, dd], // slot V doubles as the start symbol
                init_bound: ke,
            });
            gru_specs("rnnt.pred", dd, dd, &mut out);
            let j = dd;
            out.push(ParamSpec {
                name: "rnnt.joint.we".into(),
                shape: vec![h, j],
                init_bound: 1.0 / (h as f64).sqrt(),
            });
            out.push(ParamSpec {
                name: "rnnt.joint.wp".into(),
                shape: vec![dd, j],
                init_bound: 1.0 / (dd as f64).sqrt(),
            });
            out.push(ParamSpec {
                name: "rnnt.joint.b".into(),
                shape: vec![1, j],
                init_bound: 1.0 / (h as f64).sqrt(),
            });
            let kj = 1.0 / (j as f64).sqrt();
            out.push(ParamSpec {
                name: "rnnt.joint.w".into(),
                shape: vec![j, v + 1],
                init_bound: kj,
            });
            out.push(ParamSpec {
                name: "rnnt.joint.bo".into(),
                shape: vec![1, v + 1],
                init_bound: kj,
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<S>>,
    extractor: FeatureExtractor<S>,
}

/// Seeded model with uniform(-k, k), k = 1/sqrt(fan-in) parameters.
/// The same config always builds bitwise-identical parameters.
pub fn build_model<S: Scalar>(config: ModelConfig) -> Result<Model<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = BTreeMap::new();
    for spec in param_spec(&config) {
        let len: usize = spec.shape.iter().product();
        let data: Vec<S> = (0..len)
            .map(|_| S::of(rng.gen_range(-spec.init_bound..spec.init_bound)))
            .collect();
        params.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Model::from_parts(config, params)
}

impl<S: Scalar> Model<S> {
    pub(crate) fn from_parts(config: ModelConfig, params: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        let extractor = FeatureExtractor::new(config.features.clone())?;
        for (name, p) in &params {
            if !p.all_finite() {
                return Err(Error::contract(format!("parameter {name} is not finite")));
            }
        }
        Ok(Model {
            config,
            params,
            extractor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size()
    }

    pub fn sample_rate(&self) -> u32 {
        self.config.features.sample_rate
    }

    /// Word-level tokenizer: whitespace-separated words to indices.
    /// Unknown words are contract errors.
    pub fn encode_transcript(&self, text: &str) -> Result<LabelSequence> {
        let mut tokens = Vec::new();
        for word in text.split_whitespace() {
            let idx = self
                .config
                .vocabulary
                .iter()
                .position(|w| w == word)
                .ok_or_else(|| {
                    Error::contract(format!("word {word:?} is not in the model vocabulary"))
                })?;
            tokens.push(idx);
        }
        LabelSequence::new(tokens, self.vocab_size())
    }

    pub fn decode_tokens(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.config.vocabulary[t].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub(crate) fn bind_frozen(&self) -> BoundParams<S> {
        BoundParams {
            map: self.params.clone(),
        }
    }

    #[cfg(test)]
    pub(crate) fn extractor_for_tests(&self) -> &FeatureExtractor<S> {
        &self.extractor
    }

    /// The unified attack/training loss: features, encoder, and the
    /// arch's own loss, differentiable through to the waveform samples
    /// whenever the waveform is tracked on `tape`.
    pub fn loss(
        &self,
        tape: &mut Tape<S>,
        waveform: &Tensor<S>,
        transcript: &LabelSequence,
    ) -> Result<Tensor<S>> {
        let bound = self.bind_frozen();
        self.loss_with(tape, &bound, waveform, transcript)
    }

    pub(crate) fn loss_with(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams<S>,
        waveform: &Tensor<S>,
        transcript: &LabelSequence,
    ) -> Result<Tensor<S>> {
        if transcript.vocab_size() != self.vocab_size() {
            return Err(Error::contract("transcript vocabulary does not match the model"));
        }
        let feats = self.extractor.extract(tape, waveform)?;
        let enc = encode(tape, bound, &self.config, &feats)?;
        match self.config.arch {
            Arch::Ctc => {
                let lp = ctc_log_probs(tape, bound, &enc)?;
                losses::ctc_loss(tape, &lp, transcript)
            }
            Arch::Attention => {
                let lp = attention::teacher_log_probs(tape, bound, &self.config, &enc, transcript)?;
                losses::attention_ce_loss(tape, &lp, transcript)
            }
            Arch::Rnnt => {
                let states = rnnt::pred_states(tape, bound, &self.config, transcript.tokens())?;
                let joint = rnnt::joint_lattice(tape, bound, &enc, &states)?;
                losses::rnnt_loss(tape, &joint, transcript)
            }
        }
    }

    /// Greedy transcription; total on any finite waveform at least one
    /// feature window long, and deterministic.
    pub fn transcribe(&self, waveform: &Tensor<S>) -> Result<String> {
        let tokens = self.transcribe_tokens(waveform)?;
        Ok(self.decode_tokens(&tokens))
    }

    fn transcribe_tokens(&self, waveform: &Tensor<S>) -> Result<Vec<usize>> {
        // nothing is tracked here, so the tape records nothing
        let mut tape = Tape::new();
        let bound = self.bind_frozen();
        let feats = self.extractor.extract(&mut tape, waveform)?;
        let enc = encode(&mut tape, &bound, &self.config, &feats)?;
        match self.config.arch {
            Arch::Ctc => {
                let lp = ctc_log_probs(&mut tape, &bound, &enc)?;
                Ok(losses::ctc_greedy_decode(&lp)?.tokens().to_vec())
            }
            Arch::Attention => {
                let (tokens, _) = attention::greedy_decode(&mut tape, &bound, &self.config, &enc)?;
                Ok(tokens)
            }
            Arch::Rnnt => rnnt::greedy_decode(&mut tape, &bound, &self.config, &enc),
        }
    }

    /// Beam-search transcription for the attention arch (width <= 4 is
    /// plenty at this scale); other archs decode greedily anyway.
    pub fn transcribe_beam(&self, waveform: &Tensor<S>, width: usize) -> Result<String> {
        if self.config.arch != Arch::Attention {
            return Err(Error::contract("beam decoding is only available for the attention arch"));
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen();
        let feats = self.extractor.extract(&mut tape, waveform)?;
        let enc = encode(&mut tape, &bound, &self.config, &feats)?;
        let tokens = attention::beam_decode(&mut tape, &bound, &self.config, &enc, width)?;
        Ok(self.decode_tokens(&tokens))
    }

    /// Row-stochastic attention probabilities from the greedy decode:
    /// one row per emitted output step (including the EOS step), one
    /// column per encoder frame.
    pub fn attention_map(&self, waveform: &Tensor<S>) -> Result<Tensor<S>> {
        if self.config.arch != Arch::Attention {
            return Err(Error::contract("attention_map requires the attention arch"));
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen();
        let feats = self.extractor.extract(&mut tape, waveform)?;
        let enc = encode(&mut tape, &bound, &self.config, &feats)?;
        let (_, alphas) = attention::greedy_decode(&mut tape, &bound, &self.config, &enc)?;
        let refs: Vec<&Tensor<S>> = alphas.iter().collect();
        tape.concat(0, &refs)
    }

    /// Encoder frames for a waveform of this length (a fixed function of
    /// the length; no data dependence).
    pub fn encoder_frames(&self, samples: usize) -> Result<usize> {
        self.config.features.frame_count(samples)
    }
}

pub(crate) struct BoundParams<S: Scalar> {
    pub(crate) map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> BoundParams<S> {
    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// Broadcast a [1, n] row to [rows, n] by multiplying with a constant
/// ones column (shapes must otherwise match exactly; this is the one
/// sanctioned tiling trick).
pub(crate) fn tile_rows<S: Scalar>(
    tape: &mut Tape<S>,
    row: &Tensor<S>,
    rows: usize,
) -> Result<Tensor<S>> {
    let ones = Tensor::filled(&[rows, 1], S::one());
    tape.matmul(&ones, row)
}

/// One GRU step; `x` is [1, d_in], `h` is [1, hidden].
pub(crate) fn gru_cell<S: Scalar>(
    tape: &mut Tape<S>,
    prefix: &str,
    bound: &BoundParams<S>,
    x: &Tensor<S>,
    h: &Tensor<S>,
    hidden: usize,
) -> Result<Tensor<S>> {
    let gi = {
        let xi = tape.matmul(x, bound.get(&format!("{prefix}.wi")))?;
        tape.add(&xi, bound.get(&format!("{prefix}.bi")))?
    };
    let gh = {
        let hh = tape.matmul(h, bound.get(&format!("{prefix}.wh")))?;
        tape.add(&hh, bound.get(&format!("{prefix}.bh")))?
    };
    let gi_r = tape.slice(1, 0..hidden, &gi)?;
    let gi_z = tape.slice(1, hidden..2 * hidden, &gi)?;
    let gi_n = tape.slice(1, 2 * hidden..3 * hidden, &gi)?;
    let gh_r = tape.slice(1, 0..hidden, &gh)?;
    let gh_z = tape.slice(1, hidden..2 * hidden, &gh)?;
    let gh_n = tape.slice(1, 2 * hidden..3 * hidden, &gh)?;

    let r = {
        let s = tape.add(&gi_r, &gh_r)?;
        tape.sigmoid(&s)?
    };
    let z = {
        let s = tape.add(&gi_z, &gh_z)?;
        tape.sigmoid(&s)?
    };
    let n = {
        let gated = tape.mul(&r, &gh_n)?;
        let s = tape.add(&gi_n, &gated)?;
        tape.tanh(&s)?
    };
    // h' = (1 - z) * n + z * h
    let ones = Tensor::filled(&[1, hidden], S::one());
    let keep = tape.sub(&ones, &z)?;
    let a = tape.mul(&keep, &n)?;
    let b = tape.mul(&z, h)?;
    tape.add(&a, &b)
}

// Fixed affine on the log-mel features so the recurrent gates start in
// their linear range: log energies run from ln(log_floor) ~ -14 on
// silence to ~+8 on loud frames, which would saturate tanh/sigmoid at
// init. Part of the encoder, not the feature recipe.
const FEATURE_SHIFT: f64 = 7.0;
const FEATURE_SCALE: f64 = 1.0 / 7.0;

/// Stacked unidirectional GRU over feature frames; returns [F, hidden].
pub(crate) fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams<S>,
    cfg: &ModelConfig,
    feats: &Tensor<S>,
) -> Result<Tensor<S>> {
    let frames = feats.shape()[0];
    let hidden = cfg.encoder_hidden;
    let shift = Tensor::filled(feats.shape(), S::of(FEATURE_SHIFT));
    let shifted = tape.add(feats, &shift)?;
    let scaled = tape.scalar_mul(&shifted, S::of(FEATURE_SCALE))?;
    let mut rows: Vec<Tensor<S>> = Vec::with_capacity(frames);
    for l in 0..cfg.encoder_layers {
        let prefix = format!("enc{l}");
        let mut h = Tensor::zeros(&[1, hidden]);
        let mut next = Vec::with_capacity(frames);
        for t in 0..frames {
            let x = if l == 0 {
                tape.slice(0, t..t + 1, &scaled)?
            } else {
                rows[t].clone()
            };
            h = gru_cell(tape, &prefix, bound, &x, &h, hidden)?;
            next.push(h.clone());
        }
        rows = next;
    }
    let refs: Vec<&Tensor<S>> = rows.iter().collect();
    tape.concat(0, &refs)
}

/// CTC head: per-frame log-distributions over V+1 with blank last.
pub(crate) fn ctc_log_probs<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams<S>,
    enc: &Tensor<S>,
) -> Result<Tensor<S>> {
    let frames = enc.shape()[0];
    let proj = tape.matmul(enc, bound.get("ctc.w"))?;
    let bias = tile_rows(tape, bound.get("ctc.b"), frames)?;
    let logits = tape.add(&proj, &bias)?;
    tape.log_softmax(1, &logits)
}
