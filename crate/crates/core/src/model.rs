//! The full trainable parameter set for one model configuration, the
//! tape binding used by every forward pass, and gradient write-back.

use std::collections::HashMap;

use rand::Rng;

use crate::attention::{AttentionParams, BoundAttention};
use crate::cells::{BoundFuture, BoundGru, FutureParams, GruParams};
use crate::decoder::{BoundDecoder, BoundStepParams, DecoderParams, ModelConfig};
use crate::encoder::{BoundEncoder, EncoderParams};
use crate::error::{Error, Result};
use crate::objective::{AuxLossParams, BoundAux};
use crate::tensor::{ParamCollection, Tape, Tensor, Var};

/// Named collection of every trainable tensor for one model configuration.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub decoder: DecoderParams,
    pub future: Option<FutureParams>,
    pub past: Option<GruParams>,
    pub aux: AuxLossParams,
}

impl ModelParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, v_src: usize, v_tgt: usize, rng: &mut R) -> Self {
        let d = cfg.dims;
        ModelParams {
            encoder: EncoderParams::init(
                rng,
                v_src,
                d.emb,
                d.enc,
                d.dec,
                cfg.separate_future_init && cfg.use_future,
            ),
            attention: AttentionParams::init(
                rng,
                d.attn,
                d.dec,
                d.enc,
                cfg.use_future,
                cfg.use_past,
            ),
            decoder: DecoderParams::init(rng, cfg, v_tgt),
            future: cfg
                .use_future
                .then(|| FutureParams::init(rng, cfg.future_kind, d.dec, 2 * d.enc)),
            past: cfg.use_past.then(|| GruParams::init(rng, d.dec, 2 * d.enc)),
            aux: AuxLossParams::init(rng, cfg, v_tgt > 0),
        }
    }

    pub fn v_src(&self) -> usize {
        self.encoder.vocab_size()
    }

    pub fn v_tgt(&self) -> usize {
        self.decoder.vocab_size()
    }

    /// Sanity-check the parameter set against a config (kind and presence
    /// of the optional layers).
    pub fn check_matches(&self, cfg: &ModelConfig) -> Result<()> {
        if self.future.is_some() != cfg.use_future {
            return Err(Error::Config(
                "untranslated-content parameters do not match configuration".into(),
            ));
        }
        if let Some(f) = &self.future {
            if f.kind() != cfg.future_kind {
                return Err(Error::Config(format!(
                    "untranslated-content cell is {:?}, configuration says {:?}",
                    f.kind(),
                    cfg.future_kind
                )));
            }
        }
        if self.past.is_some() != cfg.use_past {
            return Err(Error::Config(
                "translated-content parameters do not match configuration".into(),
            ));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param_mut(&mut |_, t| {
            t.ensure_grad();
            t.zero_grad();
        });
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each_param(&mut |_, t| {
            if let Some(g) = &t.grad {
                acc += g.iter().map(|v| v * v).sum::<f64>();
            }
        });
        acc.sqrt()
    }

    pub fn scale_grads(&mut self, k: f64) {
        self.for_each_param_mut(&mut |_, t| {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= k);
            }
        });
    }

    /// Zero-filled per-tensor buffers in visitation order.
    pub fn grad_buffer(&self) -> Vec<Vec<f64>> {
        let mut buf = Vec::new();
        self.for_each_param(&mut |_, t| buf.push(vec![0.0; t.numel()]));
        buf
    }
}

impl ParamCollection for ModelParams {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(f);
        self.attention.visit(f);
        self.decoder.visit(f);
        if let Some(fut) = &self.future {
            fut.visit("future", f);
        }
        if let Some(p) = &self.past {
            p.visit("past", f);
        }
        self.aux.visit(f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(f);
        self.attention.visit_mut(f);
        self.decoder.visit_mut(f);
        if let Some(fut) = &mut self.future {
            fut.visit_mut("future", f);
        }
        if let Some(p) = &mut self.past {
            p.visit_mut("past", f);
        }
        self.aux.visit_mut(f);
    }
}

/// Leaf snapshot of every model tensor on one tape, with the name of each
/// leaf recorded so gradients can be written back after the reverse pass.
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub attention: BoundAttention,
    pub decoder: BoundDecoder,
    pub future: Option<BoundFuture>,
    pub past: Option<BoundGru>,
    pub aux: BoundAux,
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let start = tape.len();
        let bound = BoundModel {
            encoder: BoundEncoder::bind(tape, &params.encoder),
            attention: BoundAttention::bind(tape, &params.attention),
            decoder: BoundDecoder::bind(tape, &params.decoder),
            future: params.future.as_ref().map(|f| BoundFuture::bind(tape, f)),
            past: params.past.as_ref().map(|p| BoundGru::bind(tape, p)),
            aux: BoundAux::bind(tape, &params.aux),
            names: params.param_names(),
            vars: Vec::new(),
        };
        // Binding snapshots tensors in exactly the visitation order, one
        // leaf each, so leaf k holds the tensor named names[k]. A test
        // pins this alignment for every preset.
        let vars = (start..tape.len()).map(|i| tape.leaf_at(i)).collect();
        BoundModel { vars, ..bound }
    }

    pub fn step_params(&self) -> BoundStepParams {
        BoundStepParams {
            att: self.attention,
            dec: self.decoder.clone(),
            future: self.future,
            past: self.past,
        }
    }

    /// Accumulate this tape's leaf gradients into the parameter tensors.
    pub fn write_grads(&self, tape: &Tape, params: &mut ModelParams) {
        let by_name: HashMap<&str, Var> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(self.vars.iter().copied())
            .collect();
        params.for_each_param_mut(&mut |name, t| {
            let var = by_name[name];
            let g = tape.grad(var);
            let slot = t.ensure_grad();
            for (s, gv) in slot.iter_mut().zip(g) {
                *s += gv;
            }
        });
    }

    /// Add this tape's leaf gradients into a buffer laid out in visitation
    /// order (see [`ModelParams::grad_buffer`]), for callers that merge
    /// gradients from several tapes before touching the params.
    pub fn add_grads_into(&self, tape: &Tape, buf: &mut [Vec<f64>]) {
        debug_assert_eq!(buf.len(), self.vars.len());
        for (slot, &v) in buf.iter_mut().zip(&self.vars) {
            for (s, g) in slot.iter_mut().zip(tape.grad(v)) {
                *s += g;
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.vars.len()
    }

    pub fn leaf_names(&self) -> &[String] {
        &self.names
    }

    pub fn leaf_var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Merge per-sentence gradient vectors (in visitation order) into the
/// parameter grads.
pub fn accumulate_grads(params: &mut ModelParams, grads: &[Vec<f64>]) {
    let mut k = 0;
    params.for_each_param_mut(&mut |_, t| {
        let slot = t.ensure_grad();
        for (s, g) in slot.iter_mut().zip(&grads[k]) {
            *s += g;
        }
        k += 1;
    });
}
