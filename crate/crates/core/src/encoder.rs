//! Token embedding and bidirectional GRU encoding.
//!
//! Each source position gets an annotation h_i = [fwd_i; bwd_i]. The decoder
//! and the untranslated-content layer are initialized from the summary
//! [fwd_last; bwd_first] through a learned tanh projection; the translated-
//! content layer always starts at zero.

use rand::Rng;

use crate::cells::{self, BoundGru, GruParams};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Tape, Tensor, Var};

pub const PAD_ID: usize = 0;

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub src_emb: Tensor, // [V_src × e]
    pub fwd: GruParams,  // state d_enc, input e
    pub bwd: GruParams,
    pub w_s: Tensor, // [d_dec × 2·d_enc]
    pub b_s: Tensor, // [d_dec]
    /// Separate projection for the untranslated-content layer's initial
    /// state; allocated only when the model config asks for one, otherwise
    /// that layer shares w_s/b_s.
    pub w_s_future: Option<Tensor>,
    pub b_s_future: Option<Tensor>,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        rng: &mut R,
        v_src: usize,
        emb: usize,
        d_enc: usize,
        d_dec: usize,
        separate_future_init: bool,
    ) -> Self {
        let mut src_emb = init::uniform(rng, &[v_src, emb]);
        // The padding row embeds to zero; padded positions are additionally
        // masked out of attention.
        for v in src_emb.data[PAD_ID * emb..(PAD_ID + 1) * emb].iter_mut() {
            *v = 0.0;
        }
        EncoderParams {
            src_emb,
            fwd: GruParams::init(rng, d_enc, emb),
            bwd: GruParams::init(rng, d_enc, emb),
            w_s: init::uniform(rng, &[d_dec, 2 * d_enc]),
            b_s: init::zeros(&[d_dec]),
            w_s_future: separate_future_init.then(|| init::uniform(rng, &[d_dec, 2 * d_enc])),
            b_s_future: separate_future_init.then(|| init::zeros(&[d_dec])),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.src_emb.rows()
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("encoder.src_emb", &self.src_emb);
        self.fwd.visit("encoder.fwd", f);
        self.bwd.visit("encoder.bwd", f);
        f("encoder.w_s", &self.w_s);
        f("encoder.b_s", &self.b_s);
        if let Some(t) = &self.w_s_future {
            f("encoder.w_s_future", t);
        }
        if let Some(t) = &self.b_s_future {
            f("encoder.b_s_future", t);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("encoder.src_emb", &mut self.src_emb);
        self.fwd.visit_mut("encoder.fwd", f);
        self.bwd.visit_mut("encoder.bwd", f);
        f("encoder.w_s", &mut self.w_s);
        f("encoder.b_s", &mut self.b_s);
        if let Some(t) = &mut self.w_s_future {
            f("encoder.w_s_future", t);
        }
        if let Some(t) = &mut self.b_s_future {
            f("encoder.b_s_future", t);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder {
    pub src_emb: Var,
    pub fwd: BoundGru,
    pub bwd: BoundGru,
    pub w_s: Var,
    pub b_s: Var,
    pub w_s_future: Option<Var>,
    pub b_s_future: Option<Var>,
}

impl BoundEncoder {
    pub fn bind(tape: &mut Tape, p: &EncoderParams) -> Self {
        BoundEncoder {
            src_emb: tape.leaf(&p.src_emb),
            fwd: BoundGru::bind(tape, &p.fwd),
            bwd: BoundGru::bind(tape, &p.bwd),
            w_s: tape.leaf(&p.w_s),
            b_s: tape.leaf(&p.b_s),
            w_s_future: p.w_s_future.as_ref().map(|t| tape.leaf(t)),
            b_s_future: p.b_s_future.as_ref().map(|t| tape.leaf(t)),
        }
    }
}

/// Materialized annotations: one row per source position plus the mask of
/// real (non-pad) positions.
#[derive(Debug, Clone)]
pub struct Annotations {
    pub h: Tensor, // [I × 2·d_enc]
    pub mask: Vec<bool>,
}

/// Tape-resident encoder output for one sentence. Pad rows hold zero
/// annotations and are masked; the directional end states come from the
/// real positions only.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub h: Vec<Var>, // [2·d_enc] per position
    pub mask: Vec<bool>,
    pub fwd_last: Var, // forward state at the last real position
    pub bwd_first: Var, // backward state at the first position
}

impl EncodedSource {
    pub fn annotations(&self, tape: &Tape) -> Annotations {
        let cols = tape.value(self.h[0]).len();
        let mut data = Vec::with_capacity(self.h.len() * cols);
        for &v in &self.h {
            data.extend_from_slice(tape.value(v));
        }
        Annotations {
            h: Tensor { shape: vec![self.h.len(), cols], data, grad: None },
            mask: self.mask.clone(),
        }
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Run the bidirectional encoder. Trailing padding is allowed and is
/// excluded from both directions; interior padding is rejected.
pub fn encode(tape: &mut Tape, p: &BoundEncoder, src_ids: &[usize]) -> Result<EncodedSource> {
    if src_ids.is_empty() {
        return Err(Error::Data("empty source sentence".into()));
    }
    let v_src = tape.shape(p.src_emb)[0];
    let mut real_len = src_ids.len();
    for (i, &id) in src_ids.iter().enumerate() {
        if id >= v_src {
            return Err(Error::Vocab { id, size: v_src });
        }
        if id == PAD_ID {
            real_len = real_len.min(i);
        } else if i > real_len {
            return Err(Error::Data(format!(
                "interior padding at position {i} (padding must be trailing)"
            )));
        }
    }
    if real_len == 0 {
        return Err(Error::Data("source sentence is all padding".into()));
    }

    let d_enc = tape.shape(p.fwd.u)[0];
    let embs: Vec<Var> = src_ids[..real_len]
        .iter()
        .map(|&id| tape.row(p.src_emb, id))
        .collect::<Result<_>>()?;

    let mut fwd_states = Vec::with_capacity(real_len);
    let mut state = tape.zeros(&[d_enc]);
    for &e in &embs {
        state = cells::gru_step(tape, &p.fwd, state, e)?;
        fwd_states.push(state);
    }

    let mut bwd_states = vec![state; real_len]; // placeholder, overwritten below
    let mut bstate = tape.zeros(&[d_enc]);
    for i in (0..real_len).rev() {
        bstate = cells::gru_step(tape, &p.bwd, bstate, embs[i])?;
        bwd_states[i] = bstate;
    }

    let mut h = Vec::with_capacity(src_ids.len());
    for i in 0..real_len {
        h.push(tape.concat(&[fwd_states[i], bwd_states[i]])?);
    }
    for _ in real_len..src_ids.len() {
        h.push(tape.zeros(&[2 * d_enc]));
    }
    let mut mask = vec![true; real_len];
    mask.resize(src_ids.len(), false);

    Ok(EncodedSource {
        h,
        mask,
        fwd_last: fwd_states[real_len - 1],
        bwd_first: bwd_states[0],
    })
}

/// Initial states for one decode: the decoder state from the tanh-projected
/// summary, the untranslated-content state (same projection, or its own when
/// configured), and the all-zero translated-content state.
pub struct InitialStates {
    pub s0: Var,
    pub s0_future: Option<Var>,
    pub s0_past: Var,
}

pub fn initial_states(
    tape: &mut Tape,
    p: &BoundEncoder,
    enc: &EncodedSource,
    want_future: bool,
) -> Result<InitialStates> {
    let summary = tape.concat(&[enc.fwd_last, enc.bwd_first])?;
    let proj = tape.matvec(p.w_s, summary)?;
    let proj = tape.add(proj, p.b_s)?;
    let s0 = tape.tanh(proj);

    let s0_future = if want_future {
        Some(match (p.w_s_future, p.b_s_future) {
            (Some(w), Some(b)) => {
                let t = tape.matvec(w, summary)?;
                let t = tape.add(t, b)?;
                tape.tanh(t)
            }
            _ => s0,
        })
    } else {
        None
    };

    let d_dec = tape.shape(s0).to_vec();
    let s0_past = tape.zeros(&d_dec);
    Ok(InitialStates { s0, s0_future, s0_past })
}
