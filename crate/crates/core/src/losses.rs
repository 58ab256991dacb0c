//! Attack/training losses for the three model families: CTC and RNN-T
//! lattice losses plus attention cross-entropy, together with the greedy
//! decoders used for evaluation.
//!
//! Both lattice losses run their dynamic programs in log-space with
//! log-sum-exp and are recorded on the tape as fused ops whose backward
//! rule is the classic alpha/beta posterior. The exhaustive path oracles
//! in the tests pin the forward values; finite differences pin the
//! gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{CustomVjp, Tape};
use crate::tensor::Tensor;

/// Token sequence over a vocabulary of size `vocab_size`.
///
/// Index conventions: CTC/RNN-T blank = `vocab_size`; attention start and
/// end symbols are `vocab_size` and `vocab_size + 1`. None of those may
/// appear inside `tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    tokens: Vec<usize>,
    vocab_size: usize,
}

impl LabelSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::contract("vocabulary must be nonempty"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::contract(format!(
                "token {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(LabelSequence { tokens, vocab_size })
    }

    pub fn empty(vocab_size: usize) -> Self {
        LabelSequence {
            tokens: Vec::new(),
            vocab_size,
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    pub fn sos(&self) -> usize {
        self.vocab_size
    }

    pub fn eos(&self) -> usize {
        self.vocab_size + 1
    }
}

fn lse2<S: Scalar>(a: S, b: S) -> S {
    if a == S::neg_infinity() {
        return b;
    }
    if b == S::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3<S: Scalar>(a: S, b: S, c: S) -> S {
    lse2(lse2(a, b), c)
}

struct SavedGradVjp<S: Scalar> {
    grad: Vec<S>,
}

impl<S: Scalar> CustomVjp<S> for SavedGradVjp<S> {
    fn input_grad(&self, upstream: &[S]) -> Vec<S> {
        let u = upstream[0];
        self.grad.iter().map(|&g| g * u).collect()
    }
}

// ── CTC ──────────────────────────────────────────────────────────────

/// Minimum frame count that admits an alignment: one slot per label plus
/// a mandatory blank between adjacent repeats.
fn ctc_min_frames(tokens: &[usize]) -> usize {
    let repeats = tokens.windows(2).filter(|w| w[0] == w[1]).count();
    tokens.len() + repeats
}

/// -log P(labels | log_probs) by the forward recursion over the
/// blank-interleaved extended label sequence. `log_probs` is frames x
/// (V+1) with blank in the last column, each row a normalized
/// log-distribution.
pub fn ctc_loss<S: Scalar>(
    tape: &mut Tape<S>,
    log_probs: &Tensor<S>,
    labels: &LabelSequence,
) -> Result<Tensor<S>> {
    let v = labels.vocab_size();
    if log_probs.rank() != 2 || log_probs.shape()[1] != v + 1 {
        return Err(Error::shape(
            "ctc-loss",
            format!("expected [T, {}], got {:?}", v + 1, log_probs.shape()),
        ));
    }
    let t_len = log_probs.shape()[0];
    let needed = ctc_min_frames(labels.tokens());
    if t_len < needed {
        return Err(Error::InfeasibleAlignment {
            frames: t_len,
            needed,
        });
    }

    let blank = labels.blank();
    let width = v + 1;
    let u = labels.len();
    let ext_len = 2 * u + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            labels.tokens()[s / 2]
        }
    };
    let lp = |t: usize, k: usize| log_probs.data()[t * width + k];
    let ninf = S::neg_infinity();

    // alpha[t][s]: all prefixes ending in extended slot s at frame t,
    // emission at t included.
    let mut alpha = vec![ninf; t_len * ext_len];
    alpha[0] = lp(0, blank);
    if u > 0 {
        alpha[1] = lp(0, ext(1));
    }
    for t in 1..t_len {
        for s in 0..ext_len {
            let stay = alpha[(t - 1) * ext_len + s];
            let step = if s >= 1 {
                alpha[(t - 1) * ext_len + s - 1]
            } else {
                ninf
            };
            let skip = if s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) {
                alpha[(t - 1) * ext_len + s - 2]
            } else {
                ninf
            };
            let acc = lse3(stay, step, skip);
            alpha[t * ext_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext(s)) };
        }
    }
    let last = (t_len - 1) * ext_len;
    let log_p = if u > 0 {
        lse2(alpha[last + ext_len - 1], alpha[last + ext_len - 2])
    } else {
        alpha[last + ext_len - 1]
    };

    let grad = log_probs.node_ref().map(|_| {
        // beta mirrors alpha from the end; alpha + beta - lp counts the
        // emission at (t, s) once, so the occupancy posterior is
        // exp(alpha + beta - lp - logP).
        let mut beta = vec![ninf; t_len * ext_len];
        beta[last + ext_len - 1] = lp(t_len - 1, blank);
        if u > 0 {
            beta[last + ext_len - 2] = lp(t_len - 1, ext(ext_len - 2));
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..ext_len {
                let stay = beta[(t + 1) * ext_len + s];
                let step = if s + 1 < ext_len {
                    beta[(t + 1) * ext_len + s + 1]
                } else {
                    ninf
                };
                let skip = if s + 2 < ext_len && ext(s + 2) != blank && ext(s) != ext(s + 2) {
                    beta[(t + 1) * ext_len + s + 2]
                } else {
                    ninf
                };
                let acc = lse3(stay, step, skip);
                beta[t * ext_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext(s)) };
            }
        }
        let mut g = vec![S::zero(); t_len * width];
        for t in 0..t_len {
            for s in 0..ext_len {
                let a = alpha[t * ext_len + s];
                let b = beta[t * ext_len + s];
                if a == ninf || b == ninf {
                    continue;
                }
                let k = ext(s);
                let occupancy = (a + b - lp(t, k) - log_p).exp();
                g[t * width + k] = g[t * width + k] - occupancy;
            }
        }
        g
    });

    Ok(tape.record_custom(log_probs, Vec::new(), vec![-log_p], move || {
        Box::new(SavedGradVjp {
            grad: grad.expect("grad computed for tracked input"),
        })
    }))
}

/// Per-frame argmax (ties resolve to the lowest index), collapse adjacent
/// repeats, delete blanks.
pub fn ctc_greedy_decode<S: Scalar>(log_probs: &Tensor<S>) -> Result<LabelSequence> {
    if log_probs.rank() != 2 || log_probs.shape()[1] < 2 {
        return Err(Error::shape(
            "ctc-greedy-decode",
            format!("expected [T, V+1] with V >= 1, got {:?}", log_probs.shape()),
        ));
    }
    let width = log_probs.shape()[1];
    let blank = width - 1;
    let mut out = Vec::new();
    let mut prev = blank;
    for t in 0..log_probs.shape()[0] {
        let row = log_probs.row(t);
        let mut k = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[k] {
                k = i;
            }
        }
        if k != blank && k != prev {
            out.push(k);
        }
        prev = k;
    }
    LabelSequence::new(out, blank)
}

// ── RNN-T ────────────────────────────────────────────────────────────

/// -log P(labels) over the transducer lattice. `joint` is
/// T x (U+1) x (V+1) log-probs with blank in the last column: position
/// (t, u) conditions on frame t after emitting u labels. Emit moves
/// (t, u) -> (t, u+1), blank moves (t, u) -> (t+1, u); the path ends with
/// a blank at (T-1, U).
pub fn rnnt_loss<S: Scalar>(
    tape: &mut Tape<S>,
    joint: &Tensor<S>,
    labels: &LabelSequence,
) -> Result<Tensor<S>> {
    let v = labels.vocab_size();
    let u_len = labels.len();
    if joint.rank() != 3 || joint.shape()[1] != u_len + 1 || joint.shape()[2] != v + 1 {
        return Err(Error::shape(
            "rnnt-loss",
            format!(
                "expected [T, {}, {}], got {:?}",
                u_len + 1,
                v + 1,
                joint.shape()
            ),
        ));
    }
    let t_len = joint.shape()[0];
    let width = v + 1;
    let blank = labels.blank();
    let rows = u_len + 1;
    let lp = |t: usize, u: usize, k: usize| joint.data()[(t * rows + u) * width + k];
    let ninf = S::neg_infinity();

    let mut alpha = vec![ninf; t_len * rows];
    alpha[0] = S::zero();
    for t in 0..t_len {
        for u in 0..rows {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                let a = alpha[(t - 1) * rows + u];
                if a == ninf {
                    ninf
                } else {
                    a + lp(t - 1, u, blank)
                }
            } else {
                ninf
            };
            let from_emit = if u > 0 {
                let a = alpha[t * rows + u - 1];
                if a == ninf {
                    ninf
                } else {
                    a + lp(t, u - 1, labels.tokens()[u - 1])
                }
            } else {
                ninf
            };
            alpha[t * rows + u] = lse2(from_blank, from_emit);
        }
    }
    let log_p = alpha[(t_len - 1) * rows + u_len] + lp(t_len - 1, u_len, blank);

    let grad = joint.node_ref().map(|_| {
        // beta[t][u]: completion probability from (t, u), transitions out
        // of (t, u) included.
        let mut beta = vec![ninf; t_len * rows];
        beta[(t_len - 1) * rows + u_len] = lp(t_len - 1, u_len, blank);
        for t in (0..t_len).rev() {
            for u in (0..rows).rev() {
                if t == t_len - 1 && u == u_len {
                    continue;
                }
                let via_blank = if t + 1 < t_len {
                    let b = beta[(t + 1) * rows + u];
                    if b == ninf {
                        ninf
                    } else {
                        b + lp(t, u, blank)
                    }
                } else {
                    ninf
                };
                let via_emit = if u < u_len {
                    let b = beta[t * rows + u + 1];
                    if b == ninf {
                        ninf
                    } else {
                        b + lp(t, u, labels.tokens()[u])
                    }
                } else {
                    ninf
                };
                beta[t * rows + u] = lse2(via_blank, via_emit);
            }
        }
        let mut g = vec![S::zero(); t_len * rows * width];
        for t in 0..t_len {
            for u in 0..rows {
                let a = alpha[t * rows + u];
                if a == ninf {
                    continue;
                }
                // blank out of (t, u)
                let down = if t + 1 < t_len {
                    beta[(t + 1) * rows + u]
                } else if u == u_len {
                    S::zero() // terminal blank completes the path
                } else {
                    ninf
                };
                if down != ninf {
                    let post = (a + lp(t, u, blank) + down - log_p).exp();
                    g[(t * rows + u) * width + blank] -= post;
                }
                // emit y[u] out of (t, u)
                if u < u_len {
                    let right = beta[t * rows + u + 1];
                    if right != ninf {
                        let k = labels.tokens()[u];
                        let post = (a + lp(t, u, k) + right - log_p).exp();
                        g[(t * rows + u) * width + k] -= post;
                    }
                }
            }
        }
        g
    });

    Ok(tape.record_custom(joint, Vec::new(), vec![-log_p], move || {
        Box::new(SavedGradVjp {
            grad: grad.expect("grad computed for tracked input"),
        })
    }))
}

/// Incremental interface a transducer model exposes for greedy decoding.
pub trait TransducerStepper<S: Scalar> {
    type State;

    fn frames(&self) -> usize;
    fn start_state(&mut self) -> Result<Self::State>;
    /// Joint log-probs (length V+1, blank last) at encoder frame `t`
    /// given the prediction-network state.
    fn joint_log_probs(&mut self, t: usize, state: &Self::State) -> Result<Vec<S>>;
    fn advance(&mut self, state: &Self::State, token: usize) -> Result<Self::State>;
}

/// Time-synchronous greedy transducer search: at each frame emit argmax
/// symbols (ties to the lowest index) until blank or the per-frame cap,
/// then advance. The cap keeps adversarial inputs from looping forever.
pub fn rnnt_greedy_decode<S: Scalar, M: TransducerStepper<S>>(
    stepper: &mut M,
    max_symbols_per_frame: usize,
) -> Result<Vec<usize>> {
    if max_symbols_per_frame < 1 {
        return Err(Error::config("max_symbols_per_frame must be at least 1"));
    }
    let mut out = Vec::new();
    let mut state = stepper.start_state()?;
    for t in 0..stepper.frames() {
        let mut emitted = 0usize;
        while emitted < max_symbols_per_frame {
            let lp = stepper.joint_log_probs(t, &state)?;
            let blank = lp.len() - 1;
            let mut k = 0usize;
            for (i, &v) in lp.iter().enumerate() {
                if v > lp[k] {
                    k = i;
                }
            }
            if k == blank {
                break;
            }
            out.push(k);
            state = stepper.advance(&state, k)?;
            emitted += 1;
        }
    }
    Ok(out)
}

// ── attention ────────────────────────────────────────────────────────

/// Teacher-forced cross-entropy, averaged over the L+1 positions that
/// predict the target tokens followed by EOS. `log_probs` is
/// (L+1) x (V+2) from decoding on SOS + target.
pub fn attention_ce_loss<S: Scalar>(
    tape: &mut Tape<S>,
    log_probs: &Tensor<S>,
    target: &LabelSequence,
) -> Result<Tensor<S>> {
    let v = target.vocab_size();
    let l = target.len();
    if log_probs.rank() != 2 || log_probs.shape()[0] != l + 1 || log_probs.shape()[1] != v + 2 {
        return Err(Error::contract(format!(
            "attention-ce: expected [{}, {}] log-probs for a {l}-token target, got {:?}",
            l + 1,
            v + 2,
            log_probs.shape()
        )));
    }
    let width = v + 2;
    let mut onehot = vec![S::zero(); (l + 1) * width];
    for (i, &tok) in target.tokens().iter().enumerate() {
        onehot[i * width + tok] = S::one();
    }
    onehot[l * width + target.eos()] = S::one();
    let mask = Tensor::new(vec![l + 1, width], onehot)?;
    let picked = tape.mul(log_probs, &mask)?;
    let total = tape.reduce_sum(None, &picked)?;
    tape.scalar_mul(&total, S::of(-1.0 / (l + 1) as f64))
}
