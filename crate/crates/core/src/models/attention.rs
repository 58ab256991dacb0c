//! Content-based attention decoder (single head, dot-product over
//! learned projections). Decode length is capped at twice the encoder
//! frame count, so adversarial inputs terminate.

use super::{gru_cell, BoundParams, ModelConfig};
use crate::error::Result;
use crate::losses::LabelSequence;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

struct DecoderState<S: Scalar> {
    hidden: Tensor<S>,
    context: Tensor<S>,
}

impl<S: Scalar> Clone for DecoderState<S> {
    fn clone(&self) -> Self {
        DecoderState {
            hidden: self.hidden.clone(),
            context: self.context.clone(),
        }
    }
}

struct StepOut<S: Scalar> {
    log_probs: Tensor<S>, // [1, V+2]
    alpha: Tensor<S>,     // [1, F]
    state: DecoderState<S>,
}

fn initial_state<S: Scalar>(cfg: &ModelConfig, enc_hidden: usize) -> DecoderState<S> {
    DecoderState {
        hidden: Tensor::zeros(&[1, cfg.decoder_hidden]),
        context: Tensor::zeros(&[1, enc_hidden]),
    }
}

fn step<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams<S>,
    cfg: &ModelConfig,
    enc: &Tensor<S>,
    keys: &Tensor<S>,
    token: usize,
    state: &DecoderState<S>,
) -> Result<StepOut<S>> {
    let att_dim = cfg.attention_dim.expect("validated") as f64;
    let emb = tape.gather(&[token], bound.get("att.embed"))?;
    let x = tape.concat(1, &[&emb, &state.context])?;
    let hidden = gru_cell(tape, "att.gru", bound, &x, &state.hidden, cfg.decoder_hidden)?;

    // scores = (s Wq) . (enc Wk) per frame, scaled by 1/sqrt(A)
    let q = tape.matmul(&hidden, bound.get("att.wq"))?;
    let q_col = tape.reshape(&q, vec![q.len(), 1])?;
    let scores = tape.matmul(keys, &q_col)?;
    let row = tape.reshape(&scores, vec![1, scores.len()])?;
    let scaled = tape.scalar_mul(&row, S::of(1.0 / att_dim.sqrt()))?;
    let alpha = tape.softmax(1, &scaled)?;
    let context = tape.matmul(&alpha, enc)?;

    let o = tape.concat(1, &[&hidden, &context])?;
    let logits = {
        let proj = tape.matmul(&o, bound.get("att.out.w"))?;
        tape.add(&proj, bound.get("att.out.b"))?
    };
    let log_probs = tape.log_softmax(1, &logits)?;
    Ok(StepOut {
        log_probs,
        alpha,
        state: DecoderState { hidden, context },
    })
}

/// Teacher-forced decoder log-probs on SOS + target: (L+1) x (V+2).
pub(super) fn teacher_log_probs<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams<S>,
    cfg: &ModelConfig,
    enc: &Tensor<S>,
    target: &LabelSequence,
) -> Result<Tensor<S>> {
    let keys = tape.matmul(enc, bound.get("att.wk"))?;
    let mut state = initial_state(cfg, enc.shape()[1]);
    let mut rows = Vec::with_capacity(target.len() + 1);
    let mut token = target.sos();
    for i in 0..=target.len() {
        let out = step(tape, bound, cfg, enc, &keys, token, &state)?;
        rows.push(out.log_probs);
        state = out.state;
        if i < target.len() {
            token = target.tokens()[i];
        }
    }
    let refs: Vec<&Tensor<S>> = rows.iter().collect();
    tape.concat(0, &refs)
}

/// Greedy decode until EOS or 2x the encoder frames; returns the emitted
/// tokens and the attention row of every step taken (EOS step included).
pub(super) fn greedy_decode<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams<S>,
    cfg: &ModelConfig,
    enc: &Tensor<S>,
) -> Result<(Vec<usize>, Vec<Tensor<S>>)> {
    let keys = tape.matmul(enc, bound.get("att.wk"))?;
    let v = cfg.vocab_size();
    let eos = v + 1;
    let cap = 2 * enc.shape()[0];
    let mut state = initial_state(cfg, enc.shape()[1]);
    let mut token = v; // SOS
    let mut tokens = Vec::new();
    let mut alphas = Vec::new();
    for _ in 0..cap {
        let out = step(tape, bound, cfg, enc, &keys, token, &state)?;
        alphas.push(out.alpha);
        state = out.state;
        let row = out.log_probs.row(0);
        let mut best = 0usize;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        if best == eos {
            break;
        }
        // SOS is never a useful emission; treat it like EOS if it wins
        if best == v {
            break;
        }
        tokens.push(best);
        token = best;
    }
    Ok((tokens, alphas))
}

struct Hypothesis<S: Scalar> {
    tokens: Vec<usize>,
    score: S,
    state: DecoderState<S>,
    prev: usize,
    finished: bool,
}

/// Small beam search over the same decoder; hypotheses finish at EOS and
/// the best total log-prob wins.
pub(super) fn beam_decode<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams<S>,
    cfg: &ModelConfig,
    enc: &Tensor<S>,
    width: usize,
) -> Result<Vec<usize>> {
    let width = width.clamp(1, 4);
    let keys = tape.matmul(enc, bound.get("att.wk"))?;
    let v = cfg.vocab_size();
    let eos = v + 1;
    let cap = 2 * enc.shape()[0];
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        score: S::zero(),
        state: initial_state(cfg, enc.shape()[1]),
        prev: v, // SOS
        finished: false,
    }];
    for _ in 0..cap {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut next: Vec<Hypothesis<S>> = Vec::new();
        for h in &beam {
            if h.finished {
                next.push(Hypothesis {
                    tokens: h.tokens.clone(),
                    score: h.score,
                    state: h.state.clone(),
                    prev: h.prev,
                    finished: true,
                });
                continue;
            }
            let out = step(tape, bound, cfg, enc, &keys, h.prev, &h.state)?;
            let row = out.log_probs.row(0).to_vec();
            for (tok, &lp) in row.iter().enumerate() {
                if tok == v {
                    continue; // never emit SOS
                }
                next.push(Hypothesis {
                    tokens: if tok == eos {
                        h.tokens.clone()
                    } else {
                        let mut t = h.tokens.clone();
                        t.push(tok);
                        t
                    },
                    score: h.score + lp,
                    state: out.state.clone(),
                    prev: tok,
                    finished: tok == eos,
                });
            }
        }
        next.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        next.truncate(width);
        beam = next;
    }
    let best = beam
        .iter()
        .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(std::cmp::Ordering::Equal))
        .expect("beam is never empty");
    Ok(best.tokens.clone())
}
