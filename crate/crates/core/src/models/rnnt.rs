//! RNN-T head: GRU prediction network over the label history plus an
//! additive tanh joint network projecting to V+1 log-probs (blank last).

use super::{gru_cell, tile_rows, BoundParams, ModelConfig};
use crate::error::Result;
use crate::losses::{self, TransducerStepper};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub(super) const MAX_SYMBOLS_PER_FRAME: usize = 4;

/// Prediction-network states g_0..g_U; g_0 consumes the start symbol
/// (embedding slot V), g_u consumes label u.
pub(super) fn pred_states<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams<S>,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<Vec<Tensor<S>>> {
    let start = cfg.vocab_size();
    let mut states = Vec::with_capacity(tokens.len() + 1);
    let h0 = Tensor::zeros(&[1, cfg.decoder_hidden]);
    let mut state = advance(tape, bound, cfg, &h0, start)?;
    states.push(state.clone());
    for &tok in tokens {
        state = advance(tape, bound, cfg, &state, tok)?;
        states.push(state.clone());
    }
    Ok(states)
}

fn advance<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams<S>,
    cfg: &ModelConfig,
    state: &Tensor<S>,
    token: usize,
) -> Result<Tensor<S>> {
    let emb = tape.gather(&[token], bound.get("rnnt.embed"))?;
    gru_cell(tape, "rnnt.pred", bound, &emb, state, cfg.decoder_hidden)
}

/// Full joint lattice T x (U+1) x (V+1) of log-probs for the loss.
pub(super) fn joint_lattice<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams<S>,
    enc: &Tensor<S>,
    states: &[Tensor<S>],
) -> Result<Tensor<S>> {
    let frames = enc.shape()[0];
    let ej = {
        let proj = tape.matmul(enc, bound.get("rnnt.joint.we"))?;
        let bias = tile_rows(tape, bound.get("rnnt.joint.b"), frames)?;
        tape.add(&proj, &bias)?
    };
    let mut per_state = Vec::with_capacity(states.len());
    for g in states {
        let pj = tape.matmul(g, bound.get("rnnt.joint.wp"))?;
        let tiled = tile_rows(tape, &pj, frames)?;
        let pre = tape.add(&ej, &tiled)?;
        let hidden = tape.tanh(&pre)?;
        let logits = {
            let proj = tape.matmul(&hidden, bound.get("rnnt.joint.w"))?;
            let bias = tile_rows(tape, bound.get("rnnt.joint.bo"), frames)?;
            tape.add(&proj, &bias)?
        };
        per_state.push(tape.log_softmax(1, &logits)?);
    }
    let refs: Vec<&Tensor<S>> = per_state.iter().collect();
    tape.stack(1, &refs)
}

struct Stepper<'a, S: Scalar> {
    tape: &'a mut Tape<S>,
    bound: &'a BoundParams<S>,
    cfg: &'a ModelConfig,
    ej: Tensor<S>, // [F, J], joint.b folded in
}

impl<S: Scalar> TransducerStepper<S> for Stepper<'_, S> {
    type State = Tensor<S>;

    fn frames(&self) -> usize {
        self.ej.shape()[0]
    }

    fn start_state(&mut self) -> Result<Tensor<S>> {
        let h0 = Tensor::zeros(&[1, self.cfg.decoder_hidden]);
        advance(self.tape, self.bound, self.cfg, &h0, self.cfg.vocab_size())
    }

    fn joint_log_probs(&mut self, t: usize, state: &Tensor<S>) -> Result<Vec<S>> {
        let e_row = self.tape.slice(0, t..t + 1, &self.ej)?;
        let pj = self.tape.matmul(state, self.bound.get("rnnt.joint.wp"))?;
        let pre = self.tape.add(&e_row, &pj)?;
        let hidden = self.tape.tanh(&pre)?;
        let proj = self.tape.matmul(&hidden, self.bound.get("rnnt.joint.w"))?;
        let logits = self.tape.add(&proj, self.bound.get("rnnt.joint.bo"))?;
        Ok(self.tape.log_softmax(1, &logits)?.to_vec())
    }

    fn advance(&mut self, state: &Tensor<S>, token: usize) -> Result<Tensor<S>> {
        advance(self.tape, self.bound, self.cfg, state, token)
    }
}

/// Time-synchronous greedy decode with the per-frame emission cap.
pub(super) fn greedy_decode<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams<S>,
    cfg: &ModelConfig,
    enc: &Tensor<S>,
) -> Result<Vec<usize>> {
    let frames = enc.shape()[0];
    let ej = {
        let proj = tape.matmul(enc, bound.get("rnnt.joint.we"))?;
        let bias = tile_rows(tape, bound.get("rnnt.joint.b"), frames)?;
        tape.add(&proj, &bias)?
    };
    let mut stepper = Stepper {
        tape,
        bound,
        cfg,
        ej,
    };
    losses::rnnt_greedy_decode(&mut stepper, MAX_SYMBOLS_PER_FRAME)
}
