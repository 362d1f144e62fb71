//! One full decode step: attention read, untranslated/translated-content
//! updates, the decoder GRU, and the output distribution; plus the
//! teacher-forced pass used for training and rescoring.
//!
//! The decoder GRU keeps one input transform per feed (previous embedding,
//! attention context, and the optional extra states) instead of a single
//! matrix over their concatenation. The update is algebraically the same,
//! and it lets a baseline checkpoint initialize an extended model without
//! any shape surgery: shared feeds keep their exact shapes, new feeds are
//! fresh tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, BoundAttention, ProjectedAnnotations};
use crate::cells::{self, BoundFuture, BoundGru, FutureCellKind};
use crate::encoder::{self, BoundEncoder, EncodedSource};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Tape, Tensor, Var};

pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

/// Which untranslated-content state feeds the decoder GRU: the one just
/// updated with the current context, or the previous step's. The combined
/// model update uses the previous state, which is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedFutureTiming {
    Current,
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Word embedding size.
    pub emb: usize,
    /// Encoder state size per direction (annotations are 2× this).
    pub enc: usize,
    /// Decoder state size; also the size of the two content layers.
    pub dec: usize,
    /// Attention energy size.
    pub attn: usize,
    /// Readout hidden size.
    pub readout: usize,
}

impl Dims {
    pub fn desk() -> Self {
        Dims { emb: 32, enc: 64, dec: 64, attn: 64, readout: 64 }
    }
}

/// Everything that decides the model's structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub use_future: bool,
    pub future_kind: FutureCellKind,
    pub use_past: bool,
    /// Enables the auxiliary delta losses for whichever content layers exist.
    pub use_losses: bool,
    pub dims: Dims,
    pub feed_future_timing: FeedFutureTiming,
    /// Give the untranslated-content layer its own initialization projection
    /// instead of sharing the decoder's.
    pub separate_future_init: bool,
    pub future_loss_weight: f64,
    pub past_loss_weight: f64,
}

impl ModelConfig {
    pub fn baseline(dims: Dims) -> Self {
        ModelConfig {
            use_future: false,
            future_kind: FutureCellKind::GruI,
            use_past: false,
            use_losses: false,
            dims,
            feed_future_timing: FeedFutureTiming::Previous,
            separate_future_init: false,
            future_loss_weight: 1.0,
            past_loss_weight: 1.0,
        }
    }

    /// Named presets matching the model family: `baseline`, `+frnn-gru`,
    /// `+frnn-gru-o`, `+frnn-gru-i`, `+frnn+loss`, `+prnn`, `+prnn+loss`,
    /// `+frnn+prnn`, `+frnn+prnn+loss`. The unsuffixed `+frnn` forms use
    /// GRU-i, the strongest variant.
    pub fn preset(name: &str, dims: Dims) -> Result<Self> {
        let mut cfg = ModelConfig::baseline(dims);
        match name {
            "baseline" => {}
            "+frnn-gru" => {
                cfg.use_future = true;
                cfg.future_kind = FutureCellKind::Gru;
            }
            "+frnn-gru-o" => {
                cfg.use_future = true;
                cfg.future_kind = FutureCellKind::GruO;
            }
            "+frnn" | "+frnn-gru-i" => {
                cfg.use_future = true;
                cfg.future_kind = FutureCellKind::GruI;
            }
            "+frnn+loss" => {
                cfg.use_future = true;
                cfg.future_kind = FutureCellKind::GruI;
                cfg.use_losses = true;
            }
            "+prnn" => {
                cfg.use_past = true;
            }
            "+prnn+loss" => {
                cfg.use_past = true;
                cfg.use_losses = true;
            }
            "+frnn+prnn" => {
                cfg.use_future = true;
                cfg.future_kind = FutureCellKind::GruI;
                cfg.use_past = true;
            }
            "+frnn+prnn+loss" => {
                cfg.use_future = true;
                cfg.future_kind = FutureCellKind::GruI;
                cfg.use_past = true;
                cfg.use_losses = true;
            }
            other => {
                return Err(Error::Config(format!("unknown model preset `{other}`")));
            }
        }
        Ok(cfg)
    }

    pub const PRESETS: [&'static str; 9] = [
        "baseline",
        "+frnn-gru",
        "+frnn-gru-o",
        "+frnn-gru-i",
        "+frnn+loss",
        "+prnn",
        "+prnn+loss",
        "+frnn+prnn",
        "+frnn+prnn+loss",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.use_losses && !self.use_future && !self.use_past {
            return Err(Error::Config(
                "auxiliary losses need at least one content layer enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Input transform for one decoder-cell feed: candidate, reset, update.
#[derive(Debug, Clone)]
pub struct CellInput {
    pub w: Tensor,
    pub w_r: Tensor,
    pub w_u: Tensor,
}

impl CellInput {
    fn init<R: Rng>(rng: &mut R, d: usize, m: usize) -> Self {
        CellInput {
            w: init::uniform(rng, &[d, m]),
            w_r: init::uniform(rng, &[d, m]),
            w_u: init::uniform(rng, &[d, m]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.w_r"), &self.w_r);
        f(&format!("{prefix}.w_u"), &self.w_u);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.w_r"), &mut self.w_r);
        f(&format!("{prefix}.w_u"), &mut self.w_u);
    }
}

/// Decoder GRU with one input transform per feed.
#[derive(Debug, Clone)]
pub struct DecoderCell {
    pub u: Tensor,
    pub b: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub u_u: Tensor,
    pub b_u: Tensor,
    pub emb: CellInput,
    pub ctx: CellInput,
    pub fut: Option<CellInput>,
    pub past: Option<CellInput>,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub tgt_emb: Tensor, // [V_tgt × e]
    pub cell: DecoderCell,
    pub w_o1: Tensor, // [d_o × (e + d_dec + 2·d_enc)]
    pub b_o1: Tensor,
    pub w_o2: Tensor, // [V_tgt × d_o]
    pub b_o2: Tensor,
}

impl DecoderParams {
    pub fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig, v_tgt: usize) -> Self {
        let d = cfg.dims.dec;
        let mut tgt_emb = init::uniform(rng, &[v_tgt, cfg.dims.emb]);
        for v in tgt_emb.data[..cfg.dims.emb].iter_mut() {
            *v = 0.0; // padding row
        }
        DecoderParams {
            tgt_emb,
            cell: DecoderCell {
                u: init::orthogonal(rng, d),
                b: init::zeros(&[d]),
                u_r: init::orthogonal(rng, d),
                b_r: init::zeros(&[d]),
                u_u: init::orthogonal(rng, d),
                b_u: init::zeros(&[d]),
                emb: CellInput::init(rng, d, cfg.dims.emb),
                ctx: CellInput::init(rng, d, 2 * cfg.dims.enc),
                fut: cfg.use_future.then(|| CellInput::init(rng, d, d)),
                past: cfg.use_past.then(|| CellInput::init(rng, d, d)),
            },
            w_o1: init::uniform(rng, &[cfg.dims.readout, cfg.dims.emb + d + 2 * cfg.dims.enc]),
            b_o1: init::zeros(&[cfg.dims.readout]),
            w_o2: init::uniform(rng, &[v_tgt, cfg.dims.readout]),
            b_o2: init::zeros(&[v_tgt]),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tgt_emb.rows()
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("decoder.tgt_emb", &self.tgt_emb);
        f("decoder.cell.u", &self.cell.u);
        f("decoder.cell.b", &self.cell.b);
        f("decoder.cell.u_r", &self.cell.u_r);
        f("decoder.cell.b_r", &self.cell.b_r);
        f("decoder.cell.u_u", &self.cell.u_u);
        f("decoder.cell.b_u", &self.cell.b_u);
        self.cell.emb.visit("decoder.cell.emb", f);
        self.cell.ctx.visit("decoder.cell.ctx", f);
        if let Some(c) = &self.cell.fut {
            c.visit("decoder.cell.fut", f);
        }
        if let Some(c) = &self.cell.past {
            c.visit("decoder.cell.past", f);
        }
        f("decoder.w_o1", &self.w_o1);
        f("decoder.b_o1", &self.b_o1);
        f("decoder.w_o2", &self.w_o2);
        f("decoder.b_o2", &self.b_o2);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("decoder.tgt_emb", &mut self.tgt_emb);
        f("decoder.cell.u", &mut self.cell.u);
        f("decoder.cell.b", &mut self.cell.b);
        f("decoder.cell.u_r", &mut self.cell.u_r);
        f("decoder.cell.b_r", &mut self.cell.b_r);
        f("decoder.cell.u_u", &mut self.cell.u_u);
        f("decoder.cell.b_u", &mut self.cell.b_u);
        self.cell.emb.visit_mut("decoder.cell.emb", f);
        self.cell.ctx.visit_mut("decoder.cell.ctx", f);
        if let Some(c) = &mut self.cell.fut {
            c.visit_mut("decoder.cell.fut", f);
        }
        if let Some(c) = &mut self.cell.past {
            c.visit_mut("decoder.cell.past", f);
        }
        f("decoder.w_o1", &mut self.w_o1);
        f("decoder.b_o1", &mut self.b_o1);
        f("decoder.w_o2", &mut self.w_o2);
        f("decoder.b_o2", &mut self.b_o2);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundCellInput {
    pub w: Var,
    pub w_r: Var,
    pub w_u: Var,
}

impl BoundCellInput {
    fn bind(tape: &mut Tape, p: &CellInput) -> Self {
        BoundCellInput {
            w: tape.leaf(&p.w),
            w_r: tape.leaf(&p.w_r),
            w_u: tape.leaf(&p.w_u),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundDecoder {
    pub tgt_emb: Var,
    pub u: Var,
    pub b: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub u_u: Var,
    pub b_u: Var,
    pub emb: BoundCellInput,
    pub ctx: BoundCellInput,
    pub fut: Option<BoundCellInput>,
    pub past: Option<BoundCellInput>,
    pub w_o1: Var,
    pub b_o1: Var,
    pub w_o2: Var,
    pub b_o2: Var,
}

impl BoundDecoder {
    pub fn bind(tape: &mut Tape, p: &DecoderParams) -> Self {
        BoundDecoder {
            tgt_emb: tape.leaf(&p.tgt_emb),
            u: tape.leaf(&p.cell.u),
            b: tape.leaf(&p.cell.b),
            u_r: tape.leaf(&p.cell.u_r),
            b_r: tape.leaf(&p.cell.b_r),
            u_u: tape.leaf(&p.cell.u_u),
            b_u: tape.leaf(&p.cell.b_u),
            emb: BoundCellInput::bind(tape, &p.cell.emb),
            ctx: BoundCellInput::bind(tape, &p.cell.ctx),
            fut: p.cell.fut.as_ref().map(|c| BoundCellInput::bind(tape, c)),
            past: p.cell.past.as_ref().map(|c| BoundCellInput::bind(tape, c)),
            w_o1: tape.leaf(&p.w_o1),
            b_o1: tape.leaf(&p.b_o1),
            w_o2: tape.leaf(&p.w_o2),
            b_o2: tape.leaf(&p.b_o2),
        }
    }
}

/// Decoder GRU step over the active feeds, in order: previous-word
/// embedding, context, untranslated state, translated state.
fn cell_step(tape: &mut Tape, d: &BoundDecoder, s_prev: Var, feeds: &[(BoundCellInput, Var)]) -> Result<Var> {
    let gate = |tape: &mut Tape, u: Var, b: Var, pick: &dyn Fn(&BoundCellInput) -> Var| -> Result<Var> {
        let mut acc = tape.matvec(u, s_prev)?;
        for (input, x) in feeds {
            let wx = tape.matvec(pick(input), *x)?;
            acc = tape.add(acc, wx)?;
        }
        tape.add(acc, b)
    };
    let r_pre = gate(tape, d.u_r, d.b_r, &|i| i.w_r)?;
    let r = tape.sigmoid(r_pre);
    let u_pre = gate(tape, d.u_u, d.b_u, &|i| i.w_u)?;
    let u = tape.sigmoid(u_pre);

    let rs = tape.mul(r, s_prev)?;
    let mut cand_pre = tape.matvec(d.u, rs)?;
    for (input, x) in feeds {
        let wx = tape.matvec(input.w, *x)?;
        cand_pre = tape.add(cand_pre, wx)?;
    }
    cand_pre = tape.add(cand_pre, d.b)?;
    let cand = tape.tanh(cand_pre);

    let one = tape.scalar(1.0);
    let keep = tape.mul(u, s_prev)?;
    let inv = tape.sub(one, u)?;
    let take = tape.mul(inv, cand)?;
    tape.add(keep, take)
}

/// Recurrent state carried between decode steps.
#[derive(Debug, Clone, Copy)]
pub struct StepState {
    pub s: Var,
    pub s_future: Option<Var>,
    pub s_past: Option<Var>,
}

/// Tape-resident result of one decode step.
#[derive(Debug, Clone)]
pub struct StepOut {
    pub state: StepState,
    pub c: Var,
    pub alpha: Var,
    pub logprobs: Var,
}

/// Materialized per-step bundle, for inspection and tests.
#[derive(Debug, Clone)]
pub struct DecodeStep {
    pub s: Tensor,
    pub s_future: Option<Tensor>,
    pub s_past: Option<Tensor>,
    pub c: Tensor,
    pub alpha: Tensor,
    pub logprobs: Tensor,
}

impl StepOut {
    pub fn materialize(&self, tape: &Tape) -> DecodeStep {
        DecodeStep {
            s: tape.to_tensor(self.state.s),
            s_future: self.state.s_future.map(|v| tape.to_tensor(v)),
            s_past: self.state.s_past.map(|v| tape.to_tensor(v)),
            c: tape.to_tensor(self.c),
            alpha: tape.to_tensor(self.alpha),
            logprobs: tape.to_tensor(self.logprobs),
        }
    }
}

/// Bound parameter set for a whole decode, grouped here because decode
/// steps touch every module.
#[derive(Debug, Clone)]
pub struct BoundStepParams {
    pub att: BoundAttention,
    pub dec: BoundDecoder,
    pub future: Option<BoundFuture>,
    pub past: Option<BoundGru>,
}

/// One decode step. Order: (1) attention read with the previous states,
/// (2) untranslated-content update, (3) translated-content update, (4)
/// decoder GRU over [E(y_prev), c, feed-timed untranslated state, previous
/// translated state], (5) readout to log-probabilities.
pub fn decode_step(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &BoundStepParams,
    proj: &ProjectedAnnotations,
    enc: &EncodedSource,
    prev: &StepState,
    y_prev: usize,
) -> Result<StepOut> {
    if prev.s_future.is_some() != cfg.use_future {
        return Err(Error::Config(
            "untranslated-content state does not match model configuration".into(),
        ));
    }
    if prev.s_past.is_some() != cfg.use_past {
        return Err(Error::Config(
            "translated-content state does not match model configuration".into(),
        ));
    }
    if cfg.use_future && params.future.is_none() || cfg.use_past && params.past.is_none() {
        return Err(Error::Config("model parameters missing an enabled layer".into()));
    }

    let (alpha, c) = attention::attend(
        tape,
        &params.att,
        proj,
        enc,
        prev.s,
        prev.s_future,
        prev.s_past,
    )?;

    let s_future = match (cfg.use_future, &params.future) {
        (true, Some(f)) => Some(cells::future_step(
            tape,
            cfg.future_kind,
            f,
            prev.s_future.unwrap(),
            c,
        )?),
        _ => None,
    };
    let s_past = match (cfg.use_past, &params.past) {
        (true, Some(p)) => Some(cells::past_step(tape, p, prev.s_past.unwrap(), c)?),
        _ => None,
    };

    let e_prev = tape.row(params.dec.tgt_emb, y_prev)?;
    let mut feeds = vec![(params.dec.emb, e_prev), (params.dec.ctx, c)];
    if cfg.use_future {
        let f_feed = match cfg.feed_future_timing {
            FeedFutureTiming::Current => s_future.unwrap(),
            FeedFutureTiming::Previous => prev.s_future.unwrap(),
        };
        feeds.push((params.dec.fut.unwrap(), f_feed));
    }
    if cfg.use_past {
        feeds.push((params.dec.past.unwrap(), prev.s_past.unwrap()));
    }
    let s = cell_step(tape, &params.dec, prev.s, &feeds)?;

    let readout_in = tape.concat(&[e_prev, s, c])?;
    let hidden_pre = tape.matvec(params.dec.w_o1, readout_in)?;
    let hidden_pre = tape.add(hidden_pre, params.dec.b_o1)?;
    let hidden = tape.tanh(hidden_pre);
    let logits = tape.matvec(params.dec.w_o2, hidden)?;
    let logits = tape.add(logits, params.dec.b_o2)?;
    let logprobs = tape.log_softmax(logits)?;

    Ok(StepOut { state: StepState { s, s_future, s_past }, c, alpha, logprobs })
}

/// Teacher-forced pass over one sentence pair.
#[derive(Debug, Clone)]
pub struct ForcedPass {
    pub steps: Vec<StepOut>,
    /// Scalar -log P(y_t | ...) per target position.
    pub nll: Vec<Var>,
    /// Untranslated-content states s^F_0..s^F_T when that layer is on.
    pub future_states: Option<Vec<Var>>,
    /// Translated-content states s^P_0..s^P_T when that layer is on.
    pub past_states: Option<Vec<Var>>,
}

impl ForcedPass {
    pub fn total_nll(&self, tape: &Tape) -> f64 {
        self.nll.iter().map(|&v| tape.val1(v)).sum()
    }
}

/// Encode, initialize, then decode with gold inputs; `tgt_ids` must end
/// with EOS. Also used by inference to rescore a finished hypothesis.
pub fn teacher_forced_pass(
    tape: &mut Tape,
    cfg: &ModelConfig,
    enc_params: &BoundEncoder,
    step_params: &BoundStepParams,
    src_ids: &[usize],
    tgt_ids: &[usize],
) -> Result<ForcedPass> {
    if tgt_ids.last() != Some(&EOS_ID) {
        return Err(Error::Contract(
            "teacher-forced target must end with EOS".into(),
        ));
    }
    let v_tgt = tape.shape(step_params.dec.tgt_emb)[0];
    if let Some(&bad) = tgt_ids.iter().find(|&&id| id >= v_tgt) {
        return Err(Error::Vocab { id: bad, size: v_tgt });
    }

    let enc = encoder::encode(tape, enc_params, src_ids)?;
    let proj = attention::project_annotations(tape, &step_params.att, &enc)?;
    let init = encoder::initial_states(tape, enc_params, &enc, cfg.use_future)?;

    let mut state = StepState {
        s: init.s0,
        s_future: init.s0_future,
        s_past: cfg.use_past.then_some(init.s0_past),
    };
    let mut future_states = cfg.use_future.then(|| vec![state.s_future.unwrap()]);
    let mut past_states = cfg.use_past.then(|| vec![state.s_past.unwrap()]);

    let mut steps = Vec::with_capacity(tgt_ids.len());
    let mut nll = Vec::with_capacity(tgt_ids.len());
    let mut y_prev = BOS_ID;
    for &y in tgt_ids {
        let out = decode_step(tape, cfg, step_params, &proj, &enc, &state, y_prev)?;
        let lp = tape.pick(out.logprobs, y)?;
        nll.push(tape.neg(lp));
        if let Some(fs) = &mut future_states {
            fs.push(out.state.s_future.unwrap());
        }
        if let Some(ps) = &mut past_states {
            ps.push(out.state.s_past.unwrap());
        }
        state = out.state;
        steps.push(out);
        y_prev = y;
    }

    Ok(ForcedPass { steps, nll, future_states, past_states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionParams;
    use crate::encoder::EncoderParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn zero_model(
        cfg: &ModelConfig,
        v_src: usize,
        v_tgt: usize,
    ) -> (EncoderParams, AttentionParams, DecoderParams) {
        use crate::cells::GruParams;
        let d = cfg.dims;
        let enc = EncoderParams {
            src_emb: Tensor::zeros(&[v_src, d.emb]),
            fwd: GruParams::zeros(d.enc, d.emb),
            bwd: GruParams::zeros(d.enc, d.emb),
            w_s: Tensor::zeros(&[d.dec, 2 * d.enc]),
            b_s: Tensor::zeros(&[d.dec]),
            w_s_future: None,
            b_s_future: None,
        };
        let att = AttentionParams {
            w_a: Tensor::zeros(&[d.attn, d.dec]),
            u_a: Tensor::zeros(&[d.attn, 2 * d.enc]),
            v_f: cfg.use_future.then(|| Tensor::zeros(&[d.attn, d.dec])),
            v_p: cfg.use_past.then(|| Tensor::zeros(&[d.attn, d.dec])),
            v_a: Tensor::zeros(&[d.attn]),
            b_a: Tensor::zeros(&[d.attn]),
        };
        let zero_input = |m: usize| CellInput {
            w: Tensor::zeros(&[d.dec, m]),
            w_r: Tensor::zeros(&[d.dec, m]),
            w_u: Tensor::zeros(&[d.dec, m]),
        };
        let dec = DecoderParams {
            tgt_emb: Tensor::zeros(&[v_tgt, d.emb]),
            cell: DecoderCell {
                u: Tensor::zeros(&[d.dec, d.dec]),
                b: Tensor::zeros(&[d.dec]),
                u_r: Tensor::zeros(&[d.dec, d.dec]),
                b_r: Tensor::zeros(&[d.dec]),
                u_u: Tensor::zeros(&[d.dec, d.dec]),
                b_u: Tensor::zeros(&[d.dec]),
                emb: zero_input(d.emb),
                ctx: zero_input(2 * d.enc),
                fut: cfg.use_future.then(|| zero_input(d.dec)),
                past: cfg.use_past.then(|| zero_input(d.dec)),
            },
            w_o1: Tensor::zeros(&[d.readout, d.emb + d.dec + 2 * d.enc]),
            b_o1: Tensor::zeros(&[d.readout]),
            w_o2: Tensor::zeros(&[v_tgt, d.readout]),
            b_o2: Tensor::zeros(&[v_tgt]),
        };
        (enc, att, dec)
    }

    #[test]
    fn zero_params_give_uniform_logprobs() {
        let cfg = ModelConfig::baseline(Dims { emb: 3, enc: 2, dec: 3, attn: 3, readout: 3 });
        let v_tgt = 10;
        let (e, a, d) = zero_model(&cfg, 8, v_tgt);
        let mut tape = Tape::new();
        let be = BoundEncoder::bind(&mut tape, &e);
        let sp = BoundStepParams {
            att: BoundAttention::bind(&mut tape, &a),
            dec: BoundDecoder::bind(&mut tape, &d),
            future: None,
            past: None,
        };
        let pass =
            teacher_forced_pass(&mut tape, &cfg, &be, &sp, &[4, 5, 6], &[4, 5, EOS_ID]).unwrap();
        let want = -(v_tgt as f64).ln();
        for step in &pass.steps {
            for &lp in tape.value(step.logprobs) {
                assert!((lp - want).abs() < 1e-12);
            }
        }
        // Per-token NLL = ln V, total = 3 ln 10.
        let total = pass.total_nll(&tape);
        assert!((total - 3.0 * (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn logprob_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let dims = Dims { emb: 3, enc: 2, dec: 3, attn: 3, readout: 4 };
        let cfg = ModelConfig::preset("+frnn+prnn+loss", dims).unwrap();
        let model = crate::model::ModelParams::init(&cfg, 9, 11, &mut rng);
        let mut tape = Tape::new();
        let bound = crate::model::BoundModel::bind(&mut tape, &model);
        let pass = teacher_forced_pass(
            &mut tape,
            &cfg,
            &bound.encoder,
            &bound.step_params(),
            &[4, 5, 6, 7],
            &[8, 9, 4, EOS_ID],
        )
        .unwrap();
        for step in &pass.steps {
            let lse = tape
                .value(step.logprobs)
                .iter()
                .map(|&v| v.exp())
                .sum::<f64>()
                .ln();
            assert!(lse.abs() < 1e-9, "logsumexp {lse}");
            assert!(tape.value(step.logprobs).iter().all(|&v| v <= 0.0));
        }
    }

    #[test]
    fn nll_sum_matches_sequence_logprob_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let dims = Dims { emb: 3, enc: 2, dec: 3, attn: 3, readout: 4 };
        let cfg = ModelConfig::baseline(dims);
        let model = crate::model::ModelParams::init(&cfg, 9, 11, &mut rng);
        let mut tape = Tape::new();
        let bound = crate::model::BoundModel::bind(&mut tape, &model);
        let tgt = [5, 6, EOS_ID];
        let pass = teacher_forced_pass(
            &mut tape,
            &cfg,
            &bound.encoder,
            &bound.step_params(),
            &[4, 5],
            &tgt,
        )
        .unwrap();
        let direct: f64 = pass
            .steps
            .iter()
            .zip(&tgt)
            .map(|(s, &y)| -tape.value(s.logprobs)[y])
            .sum();
        assert!((pass.total_nll(&tape) - direct).abs() < 1e-15);
    }

    #[test]
    fn target_without_eos_is_rejected() {
        let cfg = ModelConfig::baseline(Dims { emb: 2, enc: 2, dec: 2, attn: 2, readout: 2 });
        let (e, a, d) = zero_model(&cfg, 6, 6);
        let mut tape = Tape::new();
        let be = BoundEncoder::bind(&mut tape, &e);
        let sp = BoundStepParams {
            att: BoundAttention::bind(&mut tape, &a),
            dec: BoundDecoder::bind(&mut tape, &d),
            future: None,
            past: None,
        };
        assert!(matches!(
            teacher_forced_pass(&mut tape, &cfg, &be, &sp, &[4], &[4, 5]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            teacher_forced_pass(&mut tape, &cfg, &be, &sp, &[4], &[17, EOS_ID]),
            Err(Error::Vocab { .. })
        ));
    }

    #[test]
    fn state_mismatch_is_configuration_error() {
        let cfg = ModelConfig::baseline(Dims { emb: 2, enc: 2, dec: 2, attn: 2, readout: 2 });
        let (e, a, d) = zero_model(&cfg, 6, 6);
        let mut tape = Tape::new();
        let be = BoundEncoder::bind(&mut tape, &e);
        let sp = BoundStepParams {
            att: BoundAttention::bind(&mut tape, &a),
            dec: BoundDecoder::bind(&mut tape, &d),
            future: None,
            past: None,
        };
        let enc = encoder::encode(&mut tape, &be, &[4]).unwrap();
        let proj = attention::project_annotations(&mut tape, &sp.att, &enc).unwrap();
        let s = tape.zeros(&[2]);
        let bogus = tape.zeros(&[2]);
        let state = StepState { s, s_future: Some(bogus), s_past: None };
        assert!(matches!(
            decode_step(&mut tape, &cfg, &sp, &proj, &enc, &state, BOS_ID),
            Err(Error::Config(_))
        ));
    }
}
