//! Additive attention over the encoder annotations, optionally extended
//! with the untranslated- and translated-content states as extra terms
//! inside the tanh. With both extensions absent the scorer is exactly the
//! baseline a(s_{t-1}, h_i).

use rand::Rng;

use crate::encoder::EncodedSource;
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_a: Tensor, // [d_a × d_dec]
    pub u_a: Tensor, // [d_a × 2·d_enc]
    /// Present iff the model has an untranslated-content layer.
    pub v_f: Option<Tensor>, // [d_a × d_dec]
    /// Present iff the model has a translated-content layer.
    pub v_p: Option<Tensor>, // [d_a × d_dec]
    pub v_a: Tensor, // [d_a]
    pub b_a: Tensor, // [d_a]
}

impl AttentionParams {
    pub fn init<R: Rng>(
        rng: &mut R,
        d_a: usize,
        d_dec: usize,
        d_enc: usize,
        future: bool,
        past: bool,
    ) -> Self {
        AttentionParams {
            w_a: init::uniform(rng, &[d_a, d_dec]),
            u_a: init::uniform(rng, &[d_a, 2 * d_enc]),
            v_f: future.then(|| init::uniform(rng, &[d_a, d_dec])),
            v_p: past.then(|| init::uniform(rng, &[d_a, d_dec])),
            v_a: init::uniform(rng, &[d_a]),
            b_a: init::zeros(&[d_a]),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("attention.w_a", &self.w_a);
        f("attention.u_a", &self.u_a);
        if let Some(t) = &self.v_f {
            f("attention.v_f", t);
        }
        if let Some(t) = &self.v_p {
            f("attention.v_p", t);
        }
        f("attention.v_a", &self.v_a);
        f("attention.b_a", &self.b_a);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("attention.w_a", &mut self.w_a);
        f("attention.u_a", &mut self.u_a);
        if let Some(t) = &mut self.v_f {
            f("attention.v_f", t);
        }
        if let Some(t) = &mut self.v_p {
            f("attention.v_p", t);
        }
        f("attention.v_a", &mut self.v_a);
        f("attention.b_a", &mut self.b_a);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub w_a: Var,
    pub u_a: Var,
    pub v_f: Option<Var>,
    pub v_p: Option<Var>,
    pub v_a: Var,
    pub b_a: Var,
}

impl BoundAttention {
    pub fn bind(tape: &mut Tape, p: &AttentionParams) -> Self {
        BoundAttention {
            w_a: tape.leaf(&p.w_a),
            u_a: tape.leaf(&p.u_a),
            v_f: p.v_f.as_ref().map(|t| tape.leaf(t)),
            v_p: p.v_p.as_ref().map(|t| tape.leaf(t)),
            v_a: tape.leaf(&p.v_a),
            b_a: tape.leaf(&p.b_a),
        }
    }
}

/// Per-sentence precomputation shared by every decode step: the projected
/// annotation terms U_a·h_i and the row-stacked annotation matrix.
#[derive(Debug, Clone)]
pub struct ProjectedAnnotations {
    pub uh: Vec<Var>,  // [d_a] per position
    pub h_rows: Var,   // [I × 2·d_enc]
}

pub fn project_annotations(
    tape: &mut Tape,
    att: &BoundAttention,
    enc: &EncodedSource,
) -> Result<ProjectedAnnotations> {
    let uh = enc
        .h
        .iter()
        .map(|&h| tape.matvec(att.u_a, h))
        .collect::<Result<_>>()?;
    let h_rows = tape.stack_rows(&enc.h)?;
    Ok(ProjectedAnnotations { uh, h_rows })
}

/// One attention read: weights over (unmasked) source positions and the
/// context vector c = Σ_i α_i h_i. The optional states must be present
/// exactly when the corresponding scorer terms exist.
pub fn attend(
    tape: &mut Tape,
    att: &BoundAttention,
    proj: &ProjectedAnnotations,
    enc: &EncodedSource,
    s_prev: Var,
    s_future_prev: Option<Var>,
    s_past_prev: Option<Var>,
) -> Result<(Var, Var)> {
    if att.v_f.is_some() != s_future_prev.is_some() {
        return Err(Error::Config(
            "untranslated-content state does not match attention configuration".into(),
        ));
    }
    if att.v_p.is_some() != s_past_prev.is_some() {
        return Err(Error::Config(
            "translated-content state does not match attention configuration".into(),
        ));
    }
    if !enc.mask.iter().any(|&m| m) {
        return Err(Error::InvalidMask);
    }

    let ws = tape.matvec(att.w_a, s_prev)?;
    let vf = match (att.v_f, s_future_prev) {
        (Some(v), Some(s)) => Some(tape.matvec(v, s)?),
        _ => None,
    };
    let vp = match (att.v_p, s_past_prev) {
        (Some(v), Some(s)) => Some(tape.matvec(v, s)?),
        _ => None,
    };

    let mut scores = Vec::with_capacity(enc.h.len());
    for (i, &uh) in proj.uh.iter().enumerate() {
        if !enc.mask[i] {
            scores.push(tape.scalar(0.0));
            continue;
        }
        let mut t = tape.add(ws, uh)?;
        if let Some(v) = vf {
            t = tape.add(t, v)?;
        }
        if let Some(v) = vp {
            t = tape.add(t, v)?;
        }
        t = tape.add(t, att.b_a)?;
        let t = tape.tanh(t);
        scores.push(tape.dot(att.v_a, t)?);
    }
    let score_vec = tape.concat(&scores)?;
    let alpha = tape.softmax(score_vec, Some(&enc.mask))?;
    let c = tape.vecmat(alpha, proj.h_rows)?;
    Ok((alpha, c))
}
