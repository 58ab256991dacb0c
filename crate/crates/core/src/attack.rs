//! Perturbation operators and the projected-Adam solvers for targeted
//! universal perturbations, plus the per-utterance and untargeted
//! baseline variants.
//!
//! The solver minimizes the batch-mean model loss of the perturbed
//! inputs against the target transcript (gradient ascent on the
//! ground-truth loss for the untargeted variant) and clamps the
//! perturbation into the L-infinity ball after every step. Batch members
//! run forward/backward on separate tapes in parallel; gradients fold in
//! a fixed order, so results do not depend on the thread count.

use serde::{Deserialize, Serialize};

use crate::dataio::Utterance;
use crate::error::{Error, Result};
use crate::losses::LabelSequence;
use crate::models::Model;
use crate::optim::Adam;
use crate::parallel::par_map;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Additive,
    Prepend,
}

impl std::fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PerturbMode::Additive => write!(f, "additive"),
            PerturbMode::Prepend => write!(f, "prepend"),
        }
    }
}

impl std::str::FromStr for PerturbMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(PerturbMode::Additive),
            "prepend" => Ok(PerturbMode::Prepend),
            other => Err(Error::config(format!(
                "unknown mode {other:?}, expected additive|prepend"
            ))),
        }
    }
}

/// A learned perturbation in raw sample units, its application mode, and
/// its max-norm budget.
#[derive(Debug, Clone)]
pub struct Perturbation<S: Scalar> {
    pub samples: Tensor<S>,
    pub mode: PerturbMode,
    pub epsilon: f64,
    pub sample_rate: u32,
}

impl<S: Scalar> Perturbation<S> {
    pub fn zeros(len: usize, mode: PerturbMode, epsilon: f64, sample_rate: u32) -> Self {
        Perturbation {
            samples: Tensor::zeros(&[len]),
            mode,
            epsilon,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn linf_norm(&self) -> f64 {
        self.samples.max_abs().as_f64()
    }

    /// Apply to an (untracked) waveform on a scratch tape.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        apply_perturbation(&mut tape, &self.samples, self.mode, x)
    }
}

/// The perturbed input: additive truncates or zero-pads delta to the
/// utterance length and adds it; prepend concatenates delta before the
/// utterance, leaving its samples untouched. Differentiable w.r.t. a
/// tracked delta.
pub fn apply_perturbation<S: Scalar>(
    tape: &mut Tape<S>,
    delta: &Tensor<S>,
    mode: PerturbMode,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    if x.rank() != 1 || delta.rank() != 1 {
        return Err(Error::shape(
            "apply-perturbation",
            format!("want rank-1 waveforms, got {:?} and {:?}", delta.shape(), x.shape()),
        ));
    }
    match mode {
        PerturbMode::Additive => {
            let t = x.len();
            let s = delta.len();
            let fitted = if s == t {
                delta.clone()
            } else if s < t {
                tape.pad_zeros(0, 0, t - s, delta)?
            } else {
                tape.slice(0, 0..t, delta)?
            };
            tape.add(x, &fitted)
        }
        PerturbMode::Prepend => tape.concat(0, &[delta, x]),
    }
}

/// Elementwise clamp into [-epsilon, +epsilon]; idempotent.
pub fn project_linf<S: Scalar>(delta: &Tensor<S>, epsilon: f64) -> Tensor<S> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let e = S::of(epsilon);
    let data: Vec<S> = delta.data().iter().map(|&v| v.min(e).max(-e)).collect();
    Tensor::new(delta.shape().to_vec(), data).expect("same shape")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Step index after which the exponential decay starts; defaults to
    /// half of `steps`.
    pub decay_after: Option<usize>,
    /// Per-step multiplicative decay once past `decay_after`.
    pub decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub stabilizer: f64,
    pub seed: u64,
    /// L-infinity budget in raw sample units; 2^15 is the full 16-bit
    /// signal range.
    pub epsilon: f64,
    /// Perturbation length in seconds (ignored by the additive
    /// per-utterance attack, which matches the utterance length).
    pub perturbation_seconds: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 5_000,
            batch_size: 32,
            lr: 1.0,
            decay_after: None,
            decay_rate: 0.9999,
            beta1: 0.9,
            beta2: 0.999,
            stabilizer: 1e-8,
            seed: 0,
            epsilon: 32_768.0,
            perturbation_seconds: 0.5,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config("decay_rate must be in (0, 1]"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if !(self.perturbation_seconds > 0.0) {
            return Err(Error::config("perturbation_seconds must be positive"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("lr must be nonnegative"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let decay_after = self.decay_after.unwrap_or(self.steps / 2);
        if step < decay_after {
            self.lr
        } else {
            self.lr * self.decay_rate.powi((step - decay_after + 1) as i32)
        }
    }

    fn delta_len(&self, sample_rate: u32) -> usize {
        ((self.perturbation_seconds * sample_rate as f64).round() as usize).max(1)
    }
}

/// Optional per-step instrumentation: (step index, delta after
/// projection, mean batch loss).
pub type StepObserver<'a, S> = &'a mut dyn FnMut(usize, &Tensor<S>, f64);

struct Objective<'a, S: Scalar> {
    model: &'a Model<S>,
    items: Vec<(&'a Utterance<S>, LabelSequence)>,
    mode: PerturbMode,
    /// -1 flips to gradient ascent for the untargeted attack.
    sign: f64,
}

fn solve<S: Scalar>(
    objective: &Objective<'_, S>,
    cfg: &AttackConfig,
    delta_len: usize,
    init: Option<&Tensor<S>>,
    mut observer: Option<StepObserver<'_, S>>,
) -> Result<(Perturbation<S>, Vec<f64>)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    cfg.validate()?;
    let model = objective.model;
    let mut delta: Vec<S> = match init {
        Some(t) => {
            if t.len() != delta_len {
                return Err(Error::contract(format!(
                    "resume perturbation has {} samples, expected {delta_len}",
                    t.len()
                )));
            }
            project_linf(t, cfg.epsilon).to_vec()
        }
        None => vec![S::zero(); delta_len],
    };
    let mut adam = Adam::single(delta_len, cfg.beta1, cfg.beta2, cfg.stabilizer);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..objective.items.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let batch = cfg.batch_size.min(objective.items.len());
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let picked: Vec<usize> = order[cursor..cursor + batch].to_vec();
        cursor += batch;

        let delta_t = Tensor::new(vec![delta_len], delta.clone())?;
        let results = par_map(&picked, |_, &idx| -> Result<(f64, Vec<S>)> {
            let (utt, labels) = &objective.items[idx];
            let mut tape = Tape::new();
            let tracked = tape.leaf(&delta_t);
            let perturbed = apply_perturbation(&mut tape, &tracked, objective.mode, &utt.waveform)?;
            let loss = model.loss(&mut tape, &perturbed, labels)?;
            let grads = tape.backward(&loss)?;
            Ok((loss.to_scalar()?.as_f64(), grads.wrt(&tracked).to_vec()))
        });

        let scale = S::of(objective.sign / batch as f64);
        let mut mean_grad = vec![S::zero(); delta_len];
        let mut mean_loss = 0.0f64;
        for r in results {
            let (loss, g) = r?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite attack loss at step {step}"
                )));
            }
            mean_loss += loss / batch as f64;
            for (a, v) in mean_grad.iter_mut().zip(g) {
                *a += v * scale;
            }
        }
        curve.push(mean_loss);

        adam.step(S::of(cfg.lr_at(step)), std::slice::from_mut(&mut delta), &[mean_grad]);
        let projected = project_linf(&Tensor::new(vec![delta_len], delta)?, cfg.epsilon);
        delta = projected.to_vec();
        if let Some(obs) = observer.as_mut() {
            obs(step, &projected, mean_loss);
        }
    }

    Ok((
        Perturbation {
            samples: Tensor::new(vec![delta_len], delta)?,
            mode: objective.mode,
            epsilon: cfg.epsilon,
            sample_rate: model.sample_rate(),
        },
        curve,
    ))
}

fn targeted_items<'a, S: Scalar>(
    model: &Model<S>,
    train_set: &'a [Utterance<S>],
    target: &LabelSequence,
) -> Result<Vec<(&'a Utterance<S>, LabelSequence)>> {
    if train_set.is_empty() {
        return Err(Error::contract("attack training set is empty"));
    }
    if target.vocab_size() != model.vocab_size() {
        return Err(Error::contract("target vocabulary does not match the model"));
    }
    Ok(train_set.iter().map(|u| (u, target.clone())).collect())
}

/// Learn one perturbation that drives the model toward `target` on every
/// utterance (Adam on the batch-mean targeted loss, projected each
/// step). Returns the perturbation and the per-step mean loss curve.
pub fn learn_universal<S: Scalar>(
    model: &Model<S>,
    train_set: &[Utterance<S>],
    target: &LabelSequence,
    mode: PerturbMode,
    cfg: &AttackConfig,
) -> Result<(Perturbation<S>, Vec<f64>)> {
    learn_universal_full(model, train_set, target, mode, cfg, None, None)
}

/// [`learn_universal`] with an optional warm start and per-step observer
/// (used for resume and for instrumented invariant checks).
pub fn learn_universal_full<S: Scalar>(
    model: &Model<S>,
    train_set: &[Utterance<S>],
    target: &LabelSequence,
    mode: PerturbMode,
    cfg: &AttackConfig,
    init: Option<&Tensor<S>>,
    observer: Option<StepObserver<'_, S>>,
) -> Result<(Perturbation<S>, Vec<f64>)> {
    let objective = Objective {
        model,
        items: targeted_items(model, train_set, target)?,
        mode,
        sign: 1.0,
    };
    solve(&objective, cfg, cfg.delta_len(model.sample_rate()), init, observer)
}

/// Single-utterance targeted attack. In additive mode the perturbation
/// spans the whole utterance; in prepend mode it keeps the configured
/// duration.
pub fn learn_per_utterance<S: Scalar>(
    model: &Model<S>,
    utterance: &Utterance<S>,
    target: &LabelSequence,
    mode: PerturbMode,
    cfg: &AttackConfig,
) -> Result<(Perturbation<S>, Vec<f64>)> {
    let items = targeted_items(model, std::slice::from_ref(utterance), target)?;
    let objective = Objective {
        model,
        items,
        mode,
        sign: 1.0,
    };
    let delta_len = match mode {
        PerturbMode::Additive => utterance.waveform.len(),
        PerturbMode::Prepend => cfg.delta_len(model.sample_rate()),
    };
    solve(&objective, cfg, delta_len, None, None)
}

/// Untargeted universal attack: gradient ascent on each utterance's own
/// ground-truth loss, same projection. The curve reports the (raw,
/// maximized) mean loss.
pub fn learn_untargeted<S: Scalar>(
    model: &Model<S>,
    train_set: &[Utterance<S>],
    mode: PerturbMode,
    cfg: &AttackConfig,
) -> Result<(Perturbation<S>, Vec<f64>)> {
    if train_set.is_empty() {
        return Err(Error::contract("attack training set is empty"));
    }
    let items = train_set
        .iter()
        .map(|u| Ok((u, model.encode_transcript(&u.transcript)?)))
        .collect::<Result<Vec<_>>>()?;
    let objective = Objective {
        model,
        items,
        mode,
        sign: -1.0,
    };
    solve(&objective, cfg, cfg.delta_len(model.sample_rate()), None, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_corpus, CorpusConfig};
    use crate::features::FeatureConfig;
    use crate::models::{build_model, Arch, ModelConfig};

    fn wave(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn additive_application() {
        let mut tape = Tape::new();
        let out = apply_perturbation(
            &mut tape,
            &wave(&[10.0]),
            PerturbMode::Additive,
            &wave(&[1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[11.0, 2.0, 3.0]);
    }

    #[test]
    fn additive_truncates_long_delta() {
        let mut tape = Tape::new();
        let out = apply_perturbation(
            &mut tape,
            &wave(&[1.0, 1.0, 1.0]),
            PerturbMode::Additive,
            &wave(&[5.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn prepend_application_keeps_suffix_bitwise() {
        let mut tape = Tape::new();
        let x = wave(&[1.0, 2.0]);
        let out =
            apply_perturbation(&mut tape, &wave(&[9.0]), PerturbMode::Prepend, &x).unwrap();
        assert_eq!(out.data(), &[9.0, 1.0, 2.0]);
        let suffix: Vec<u64> = out.data()[1..].iter().map(|v| v.to_bits()).collect();
        let original: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(suffix, original);
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let d = wave(&[40_000.0, -40_000.0, 5.0]);
        let p = project_linf(&d, 32_768.0);
        assert_eq!(p.data(), &[32_768.0, -32_768.0, 5.0]);
        let pp = project_linf(&p, 32_768.0);
        assert_eq!(pp.data(), p.data());
    }

    fn tiny_setup() -> (crate::models::Model<f64>, Vec<Utterance<f64>>) {
        let mut ccfg = CorpusConfig::fast_4khz();
        ccfg.train_count = 3;
        ccfg.test_count = 0;
        ccfg.words_min = 1;
        ccfg.words_max = 1;
        let (train, _) = generate_corpus(&ccfg).unwrap();
        let mut mcfg = ModelConfig::new(Arch::Ctc, ccfg.vocabulary.clone());
        mcfg.encoder_hidden = 8;
        mcfg.decoder_hidden = 6;
        mcfg.encoder_layers = 1;
        mcfg.features = FeatureConfig::fast_4khz();
        (build_model(mcfg).unwrap(), train)
    }

    #[test]
    fn zero_lr_keeps_delta_at_init() {
        let (model, train) = tiny_setup();
        let target = model.encode_transcript("two").unwrap();
        let cfg = AttackConfig {
            steps: 1,
            batch_size: 2,
            lr: 0.0,
            perturbation_seconds: 0.1,
            ..Default::default()
        };
        let (p, curve) =
            learn_universal(&model, &train, &target, PerturbMode::Prepend, &cfg).unwrap();
        assert!(p.samples.data().iter().all(|&v| v == 0.0));
        assert_eq!(curve.len(), 1);

        let (p, _) =
            learn_per_utterance(&model, &train[0], &target, PerturbMode::Additive, &cfg).unwrap();
        assert!(p.samples.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.len(), train[0].waveform.len());

        let (p, _) = learn_untargeted(&model, &train, PerturbMode::Additive, &cfg).unwrap();
        assert!(p.samples.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attack_is_deterministic() {
        let (model, train) = tiny_setup();
        let target = model.encode_transcript("two").unwrap();
        let cfg = AttackConfig {
            steps: 4,
            batch_size: 2,
            lr: 50.0,
            perturbation_seconds: 0.1,
            seed: 9,
            ..Default::default()
        };
        let (a, curve_a) =
            learn_universal(&model, &train, &target, PerturbMode::Additive, &cfg).unwrap();
        let (b, curve_b) =
            learn_universal(&model, &train, &target, PerturbMode::Additive, &cfg).unwrap();
        let bits_a: Vec<u64> = a.samples.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.samples.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
        assert_eq!(curve_a, curve_b);
    }

    #[test]
    fn projection_invariant_holds_every_step() {
        let (model, train) = tiny_setup();
        let target = model.encode_transcript("two").unwrap();
        let eps = 100.0;
        let cfg = AttackConfig {
            steps: 6,
            batch_size: 2,
            lr: 200.0,
            epsilon: eps,
            perturbation_seconds: 0.1,
            ..Default::default()
        };
        let mut violations = 0usize;
        let mut steps_seen = 0usize;
        let mut obs = |_step: usize, delta: &Tensor<f64>, _loss: f64| {
            steps_seen += 1;
            if delta.max_abs() > eps {
                violations += 1;
            }
        };
        let (p, _) = learn_universal_full(
            &model,
            &train,
            &target,
            PerturbMode::Additive,
            &cfg,
            None,
            Some(&mut obs),
        )
        .unwrap();
        assert_eq!(steps_seen, 6);
        assert_eq!(violations, 0);
        assert!(p.linf_norm() <= eps);
        // lr 200 against eps 100 guarantees the clamp actually bites
        assert!(p.linf_norm() >= eps * 0.99, "{}", p.linf_norm());
    }

    #[test]
    fn target_vocabulary_mismatch_is_rejected() {
        let (model, train) = tiny_setup();
        let bad = LabelSequence::new(vec![0], 3).unwrap(); // wrong vocab size
        let cfg = AttackConfig {
            steps: 1,
            ..Default::default()
        };
        assert!(learn_universal(&model, &train, &bad, PerturbMode::Additive, &cfg).is_err());
    }

    #[test]
    fn apply_is_target_independent() {
        // swapping the target changes only loss labels, never T's output
        let (model, train) = tiny_setup();
        let cfg = AttackConfig {
            steps: 2,
            lr: 30.0,
            perturbation_seconds: 0.1,
            seed: 4,
            ..Default::default()
        };
        let t1 = model.encode_transcript("two").unwrap();
        let (p, _) = learn_universal(&model, &train, &t1, PerturbMode::Prepend, &cfg).unwrap();
        let a = p.apply(&train[0].waveform).unwrap();
        let b = p.apply(&train[0].waveform).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.len(), p.len() + train[0].waveform.len());
    }
}
