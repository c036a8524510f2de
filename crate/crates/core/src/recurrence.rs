//! Gated EMA recurrence around the encoder stack.
//!
//! Per step: u = f(h + s), gamma = gate(h, s), h <- h + gamma (.) u,
//! s <- alpha s + (1 - alpha) h. The history s starts at zero. A single
//! optional mid tap exposes the hidden state after a chosen step for deep
//! supervision.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

#[derive(Debug)]
pub struct RecurOutput {
    pub final_h: NodeId,
    /// Hidden state captured after the mid-tap step, when requested.
    pub mid: Option<NodeId>,
}

/// Unroll `k_steps` of the gated EMA recurrence. `encoder` is f_theta over
/// the current-plus-history state; `gate` produces the per-token,
/// per-channel gamma in (0, 1). `mid_tap` is a 1-based step index.
pub fn recur_forward<F, G>(
    tape: &mut Tape,
    h0: NodeId,
    k_steps: usize,
    alpha: f64,
    mut encoder: F,
    mut gate: G,
    mid_tap: Option<usize>,
) -> Result<RecurOutput>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
    G: FnMut(&mut Tape, NodeId, NodeId) -> Result<NodeId>,
{
    assert!(k_steps >= 1);
    let dim = tape.value(h0).dim();
    let mut h = h0;
    let mut s = tape.zeros(dim.0, dim.1);
    let mut mid = None;
    for k in 1..=k_steps {
        let input = tape.add(h, s);
        let u = encoder(tape, input)?;
        let gamma = gate(tape, h, s)?;
        let gu = tape.hadamard(gamma, u);
        h = tape.add(h, gu);
        s = tape.weighted_sum(&[(s, alpha), (h, 1.0 - alpha)]);
        if tape.value(h).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState(k));
        }
        if mid_tap == Some(k) {
            mid = Some(h);
        }
    }
    Ok(RecurOutput { final_h: h, mid })
}
