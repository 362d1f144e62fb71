//! Recurrent cell updates: the standard GRU, the two subtractive variants
//! used by the untranslated-content (Future) layer, and the translated-
//! content (Past) update, which is a plain GRU because its gated
//! interpolation already behaves like accumulation.
//!
//! All cells are pure functions of their parameters and inputs; binding the
//! parameters onto a tape snapshots them, so concurrent passes over shared
//! parameters are safe.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Tape, Tensor, Var};

/// GRU weights for state dim `d` and input dim `m`. The gate equations in
/// the model description carry no bias terms; biases are included here as
/// standard practice and initialize to zero.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub u: Tensor,   // [d×d] state -> candidate
    pub w: Tensor,   // [d×m] input -> candidate
    pub b: Tensor,   // [d]
    pub u_r: Tensor, // reset gate
    pub w_r: Tensor,
    pub b_r: Tensor,
    pub u_u: Tensor, // update gate
    pub w_u: Tensor,
    pub b_u: Tensor,
}

impl GruParams {
    pub fn init<R: Rng>(rng: &mut R, d: usize, m: usize) -> Self {
        GruParams {
            u: init::orthogonal(rng, d),
            w: init::uniform(rng, &[d, m]),
            b: init::zeros(&[d]),
            u_r: init::orthogonal(rng, d),
            w_r: init::uniform(rng, &[d, m]),
            b_r: init::zeros(&[d]),
            u_u: init::orthogonal(rng, d),
            w_u: init::uniform(rng, &[d, m]),
            b_u: init::zeros(&[d]),
        }
    }

    pub fn zeros(d: usize, m: usize) -> Self {
        GruParams {
            u: Tensor::zeros(&[d, d]),
            w: Tensor::zeros(&[d, m]),
            b: Tensor::zeros(&[d]),
            u_r: Tensor::zeros(&[d, d]),
            w_r: Tensor::zeros(&[d, m]),
            b_r: Tensor::zeros(&[d]),
            u_u: Tensor::zeros(&[d, d]),
            w_u: Tensor::zeros(&[d, m]),
            b_u: Tensor::zeros(&[d]),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.u.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.u"), &self.u);
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
        f(&format!("{prefix}.u_r"), &self.u_r);
        f(&format!("{prefix}.w_r"), &self.w_r);
        f(&format!("{prefix}.b_r"), &self.b_r);
        f(&format!("{prefix}.u_u"), &self.u_u);
        f(&format!("{prefix}.w_u"), &self.w_u);
        f(&format!("{prefix}.b_u"), &self.b_u);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.u"), &mut self.u);
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
        f(&format!("{prefix}.u_r"), &mut self.u_r);
        f(&format!("{prefix}.w_r"), &mut self.w_r);
        f(&format!("{prefix}.b_r"), &mut self.b_r);
        f(&format!("{prefix}.u_u"), &mut self.u_u);
        f(&format!("{prefix}.w_u"), &mut self.w_u);
        f(&format!("{prefix}.b_u"), &mut self.b_u);
    }
}

/// GRU extended with the minus-operation transform applied outside the cell:
/// the cell consumes M = tanh(U_m s - W_m c + b_m) instead of c.
#[derive(Debug, Clone)]
pub struct GruOParams {
    /// Inner cell; its input dim equals the state dim (it consumes M).
    pub gru: GruParams,
    pub u_m: Tensor, // [d×d]
    pub w_m: Tensor, // [d×m]
    pub b_m: Tensor, // [d]
}

impl GruOParams {
    pub fn init<R: Rng>(rng: &mut R, d: usize, m: usize) -> Self {
        GruOParams {
            gru: GruParams::init(rng, d, d),
            u_m: init::orthogonal(rng, d),
            w_m: init::uniform(rng, &[d, m]),
            b_m: init::zeros(&[d]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.gru.visit(prefix, f);
        f(&format!("{prefix}.u_m"), &self.u_m);
        f(&format!("{prefix}.w_m"), &self.w_m);
        f(&format!("{prefix}.b_m"), &self.b_m);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gru.visit_mut(prefix, f);
        f(&format!("{prefix}.u_m"), &mut self.u_m);
        f(&format!("{prefix}.w_m"), &mut self.w_m);
        f(&format!("{prefix}.b_m"), &mut self.b_m);
    }
}

/// Which activation the untranslated-content layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FutureCellKind {
    /// Plain GRU; subtraction is left entirely to learning.
    Gru,
    /// Explicit minus outside the cell (GRU-o).
    GruO,
    /// Minus folded into the candidate state, reset gate on the input (GRU-i).
    GruI,
}

/// Parameters for the untranslated-content layer, one variant per cell kind.
#[derive(Debug, Clone)]
pub enum FutureParams {
    Gru(GruParams),
    GruO(GruOParams),
    GruI {
        cell: GruParams,
        /// Projects the attention context down to the state dim; present
        /// only when the two differ (the elementwise product inside GRU-i
        /// needs equal dims).
        ctx_proj: Option<Tensor>,
    },
}

impl FutureParams {
    pub fn init<R: Rng>(rng: &mut R, kind: FutureCellKind, d: usize, ctx_dim: usize) -> Self {
        match kind {
            FutureCellKind::Gru => FutureParams::Gru(GruParams::init(rng, d, ctx_dim)),
            FutureCellKind::GruO => FutureParams::GruO(GruOParams::init(rng, d, ctx_dim)),
            FutureCellKind::GruI => FutureParams::GruI {
                cell: GruParams::init(rng, d, d),
                ctx_proj: (ctx_dim != d).then(|| init::uniform(rng, &[d, ctx_dim])),
            },
        }
    }

    pub fn kind(&self) -> FutureCellKind {
        match self {
            FutureParams::Gru(_) => FutureCellKind::Gru,
            FutureParams::GruO(_) => FutureCellKind::GruO,
            FutureParams::GruI { .. } => FutureCellKind::GruI,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            FutureParams::Gru(p) => p.visit(&format!("{prefix}.cell"), f),
            FutureParams::GruO(p) => p.visit(&format!("{prefix}.cell"), f),
            FutureParams::GruI { cell, ctx_proj } => {
                cell.visit(&format!("{prefix}.cell"), f);
                if let Some(p) = ctx_proj {
                    f(&format!("{prefix}.ctx_proj"), p);
                }
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            FutureParams::Gru(p) => p.visit_mut(&format!("{prefix}.cell"), f),
            FutureParams::GruO(p) => p.visit_mut(&format!("{prefix}.cell"), f),
            FutureParams::GruI { cell, ctx_proj } => {
                cell.visit_mut(&format!("{prefix}.cell"), f);
                if let Some(p) = ctx_proj {
                    f(&format!("{prefix}.ctx_proj"), p);
                }
            }
        }
    }
}

// ---- tape-bound forms ----------------------------------------------------

/// GRU parameters snapshotted onto a tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    pub u: Var,
    pub w: Var,
    pub b: Var,
    pub u_r: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub u_u: Var,
    pub w_u: Var,
    pub b_u: Var,
}

impl BoundGru {
    pub fn bind(tape: &mut Tape, p: &GruParams) -> Self {
        BoundGru {
            u: tape.leaf(&p.u),
            w: tape.leaf(&p.w),
            b: tape.leaf(&p.b),
            u_r: tape.leaf(&p.u_r),
            w_r: tape.leaf(&p.w_r),
            b_r: tape.leaf(&p.b_r),
            u_u: tape.leaf(&p.u_u),
            w_u: tape.leaf(&p.w_u),
            b_u: tape.leaf(&p.b_u),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGruO {
    pub gru: BoundGru,
    pub u_m: Var,
    pub w_m: Var,
    pub b_m: Var,
}

impl BoundGruO {
    pub fn bind(tape: &mut Tape, p: &GruOParams) -> Self {
        BoundGruO {
            gru: BoundGru::bind(tape, &p.gru),
            u_m: tape.leaf(&p.u_m),
            w_m: tape.leaf(&p.w_m),
            b_m: tape.leaf(&p.b_m),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundFuture {
    Gru(BoundGru),
    GruO(BoundGruO),
    GruI { cell: BoundGru, ctx_proj: Option<Var> },
}

impl BoundFuture {
    pub fn bind(tape: &mut Tape, p: &FutureParams) -> Self {
        match p {
            FutureParams::Gru(p) => BoundFuture::Gru(BoundGru::bind(tape, p)),
            FutureParams::GruO(p) => BoundFuture::GruO(BoundGruO::bind(tape, p)),
            FutureParams::GruI { cell, ctx_proj } => BoundFuture::GruI {
                cell: BoundGru::bind(tape, cell),
                ctx_proj: ctx_proj.as_ref().map(|t| tape.leaf(t)),
            },
        }
    }

    pub fn kind(&self) -> FutureCellKind {
        match self {
            BoundFuture::Gru(_) => FutureCellKind::Gru,
            BoundFuture::GruO(_) => FutureCellKind::GruO,
            BoundFuture::GruI { .. } => FutureCellKind::GruI,
        }
    }
}

/// Reset/update gate: sigmoid(U·s + W·x + b).
fn gate(tape: &mut Tape, u: Var, w: Var, b: Var, s: Var, x: Var) -> Result<Var> {
    let us = tape.matvec(u, s)?;
    let wx = tape.matvec(w, x)?;
    let pre = tape.add(us, wx)?;
    let pre = tape.add(pre, b)?;
    Ok(tape.sigmoid(pre))
}

/// Gated interpolation u·s + (1-u)·cand. Every component lands in the convex
/// hull of {s_i, cand_i}.
fn interpolate(tape: &mut Tape, update: Var, s_prev: Var, cand: Var) -> Result<Var> {
    let one = tape.scalar(1.0);
    let keep = tape.mul(update, s_prev)?;
    let inv = tape.sub(one, update)?;
    let take = tape.mul(inv, cand)?;
    tape.add(keep, take)
}

/// Standard GRU update.
pub fn gru_step(tape: &mut Tape, p: &BoundGru, s_prev: Var, x: Var) -> Result<Var> {
    let r = gate(tape, p.u_r, p.w_r, p.b_r, s_prev, x)?;
    let u = gate(tape, p.u_u, p.w_u, p.b_u, s_prev, x)?;
    let rs = tape.mul(r, s_prev)?;
    let urs = tape.matvec(p.u, rs)?;
    let wx = tape.matvec(p.w, x)?;
    let pre = tape.add(urs, wx)?;
    let pre = tape.add(pre, p.b)?;
    let cand = tape.tanh(pre);
    interpolate(tape, u, s_prev, cand)
}

/// GRU-o: an explicit minus transform produces the current untranslated
/// content M = tanh(U_m·s - W_m·c + b_m), then a plain GRU consumes M.
pub fn gru_o_step(tape: &mut Tape, p: &BoundGruO, s_prev: Var, c: Var) -> Result<Var> {
    let us = tape.matvec(p.u_m, s_prev)?;
    let wc = tape.matvec(p.w_m, c)?;
    let pre = tape.sub(us, wc)?;
    let pre = tape.add(pre, p.b_m)?;
    let m = tape.tanh(pre);
    gru_step(tape, &p.gru, s_prev, m)
}

/// GRU-i: the minus lives inside the candidate, and the reset gate throttles
/// the input instead of the previous state:
/// cand = tanh(U·s - W·(r·c) + b). Requires input dim == state dim.
pub fn gru_i_step(tape: &mut Tape, p: &BoundGru, s_prev: Var, c: Var) -> Result<Var> {
    if tape.shape(c) != tape.shape(s_prev) {
        return Err(Error::Dimension(format!(
            "gru-i needs input dim == state dim for the gated product, got {:?} vs {:?}",
            tape.shape(c),
            tape.shape(s_prev)
        )));
    }
    let r = gate(tape, p.u_r, p.w_r, p.b_r, s_prev, c)?;
    let u = gate(tape, p.u_u, p.w_u, p.b_u, s_prev, c)?;
    let rc = tape.mul(r, c)?;
    let us = tape.matvec(p.u, s_prev)?;
    let wrc = tape.matvec(p.w, rc)?;
    let pre = tape.sub(us, wrc)?;
    let pre = tape.add(pre, p.b)?;
    let cand = tape.tanh(pre);
    interpolate(tape, u, s_prev, cand)
}

/// One step of the untranslated-content layer. `kind` must match the bound
/// parameter variant. For GRU-i the context is first projected to the state
/// dim when a projection is present.
pub fn future_step(
    tape: &mut Tape,
    kind: FutureCellKind,
    p: &BoundFuture,
    s_prev: Var,
    c: Var,
) -> Result<Var> {
    if kind != p.kind() {
        return Err(Error::Config(format!(
            "future cell kind {kind:?} does not match parameters of kind {:?}",
            p.kind()
        )));
    }
    match p {
        BoundFuture::Gru(g) => gru_step(tape, g, s_prev, c),
        BoundFuture::GruO(g) => gru_o_step(tape, g, s_prev, c),
        BoundFuture::GruI { cell, ctx_proj } => {
            let c = match ctx_proj {
                Some(proj) => tape.matvec(*proj, c)?,
                None => c,
            };
            gru_i_step(tape, cell, s_prev, c)
        }
    }
}

/// One step of the translated-content layer: a plain GRU accumulating the
/// attention context. The caller supplies the all-zero state at t = 0.
pub fn past_step(tape: &mut Tape, p: &BoundGru, s_prev: Var, c: Var) -> Result<Var> {
    gru_step(tape, p, s_prev, c)
}
