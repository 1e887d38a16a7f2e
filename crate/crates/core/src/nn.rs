//! Layers shared by the generators.

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// `x @ w + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Linear {
            w: store.matrix(format!("{name}.w"), fan_in, fan_out, rng),
            b: store.bias(format!("{name}.b"), fan_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add(y, p[self.b])
    }
}

/// Single-layer GRU cell with gates ordered (reset, update, new).
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z  = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Gru {
            w_ih: store.matrix(format!("{name}.w_ih"), input, 3 * hidden, rng),
            w_hh: store.matrix(format!("{name}.w_hh"), hidden, 3 * hidden, rng),
            b_ih: store.bias(format!("{name}.b_ih"), 3 * hidden),
            b_hh: store.bias(format!("{name}.b_hh"), 3 * hidden),
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let hs = self.hidden;
        let gi = tape.matmul(x, p[self.w_ih])?;
        let gi = tape.add(gi, p[self.b_ih])?;
        let gh = tape.matmul(h, p[self.w_hh])?;
        let gh = tape.add(gh, p[self.b_hh])?;
        let (ri, zi, ni) = (tape.slice(gi, 1, 0, hs)?, tape.slice(gi, 1, hs, hs)?, tape.slice(gi, 1, 2 * hs, hs)?);
        let (rh, zh, nh) = (tape.slice(gh, 1, 0, hs)?, tape.slice(gh, 1, hs, hs)?, tape.slice(gh, 1, 2 * hs, hs)?);
        let r = tape.add(ri, rh)?;
        let r = tape.sigmoid(r);
        let z = tape.add(zi, zh)?;
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, nh)?;
        let n = tape.add(ni, rn)?;
        let n = tape.tanh(n);
        // n + z ⊙ (h - n)
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        tape.add(n, zd)
    }

    /// Step that keeps the previous state for rows where `active[r]` is false.
    pub fn step_masked(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var, active: &[bool]) -> Result<Var> {
        let next = self.step(tape, p, x, h)?;
        if active.iter().all(|&a| a) {
            return Ok(next);
        }
        tape.select_rows(active, next, h)
    }
}

/// Zero initial state `[batch, hidden]`.
pub fn zeros_state(tape: &mut Tape, batch: usize, hidden: usize) -> Var {
    tape.constant(crate::tensor::Tensor::zeros(&[batch, hidden]))
}

/// Index of the largest entry among `allowed`; ties go to the lowest index.
pub fn argmax_allowed(row: &[f64], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if allowed(i) && (best == usize::MAX || v > best_v) {
            best = i;
            best_v = v;
        }
    }
    best
}
