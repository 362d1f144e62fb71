//! Beam-search and greedy decoding, hypothesis reranking with the
//! auxiliary delta-loss scores, and attention-argmax alignment extraction.

use crate::decoder::{self, BOS_ID, EOS_ID, ModelConfig, StepState};
use crate::encoder::{self, PAD_ID};
use crate::error::{Error, Result};
use crate::attention;
use crate::model::{BoundModel, ModelParams};
use crate::objective;
use crate::tensor::Tape;

/// A (possibly partial) translation. The log-probability is the exact sum
/// of the chosen tokens' log-probabilities; the two loss fields accumulate
/// the per-step delta losses charged to the hypothesis's own tokens while
/// it was decoded (zero when the model has no such layer).
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub future_loss: f64,
    pub past_loss: f64,
    /// One attention row per emitted token.
    pub alphas: Vec<Vec<f64>>,
    /// Number of real source positions (attention rows may include padding).
    pub src_len: usize,
    pub finished: bool,
}

impl Hypothesis {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Ranking score: log-probability, length-normalized when asked.
    pub fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.tokens.is_empty() {
            self.logprob / self.tokens.len() as f64
        } else {
            self.logprob
        }
    }

    /// Content tokens (EOS stripped).
    pub fn surface(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeSettings {
    pub beam: usize,
    pub max_out_len: usize,
    pub length_normalize: bool,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings { beam: 12, max_out_len: 80, length_normalize: true }
    }
}

struct LiveHyp {
    tokens: Vec<usize>,
    state: StepState,
    logprob: f64,
    future_loss: f64,
    past_loss: f64,
    alphas: Vec<Vec<f64>>,
}

impl LiveHyp {
    fn retire(self, src_len: usize, finished: bool) -> Hypothesis {
        Hypothesis {
            tokens: self.tokens,
            logprob: self.logprob,
            future_loss: self.future_loss,
            past_loss: self.past_loss,
            alphas: self.alphas,
            src_len,
            finished,
        }
    }
}

/// Standard beam search over decode steps. Each live hypothesis is expanded
/// with its `beam` best tokens; the best `beam` expansions survive, those
/// emitting EOS retire to the finished pool. Stops when no hypothesis is
/// live or `max_out_len` is reached (remaining live hypotheses retire
/// unfinished). The result is sorted by the ranking score, best first.
pub fn beam_search(
    cfg: &ModelConfig,
    params: &ModelParams,
    src_ids: &[usize],
    settings: &DecodeSettings,
) -> Result<Vec<Hypothesis>> {
    if settings.beam < 1 {
        return Err(Error::Config(format!(
            "beam width must be at least 1, got {}",
            settings.beam
        )));
    }
    params.check_matches(cfg)?;
    let beam = settings.beam;
    let v_tgt = params.v_tgt();

    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params);
    let step_params = bound.step_params();
    let enc = encoder::encode(&mut tape, &bound.encoder, src_ids)?;
    let proj = attention::project_annotations(&mut tape, &step_params.att, &enc)?;
    let init = encoder::initial_states(&mut tape, &bound.encoder, &enc, cfg.use_future)?;
    let src_len = enc.real_len();

    let mut live = vec![LiveHyp {
        tokens: Vec::new(),
        state: StepState {
            s: init.s0,
            s_future: init.s0_future,
            s_past: cfg.use_past.then_some(init.s0_past),
        },
        logprob: 0.0,
        future_loss: 0.0,
        past_loss: 0.0,
        alphas: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    let want_future_loss = cfg.use_losses && cfg.use_future;
    let want_past_loss = cfg.use_losses && cfg.use_past;

    for _ in 0..settings.max_out_len {
        // (source hyp index, token, new logprob, future, past, step output)
        let mut candidates: Vec<(usize, usize, f64, f64, f64, usize)> = Vec::new();
        let mut step_outs = Vec::with_capacity(live.len());

        for (hi, hyp) in live.iter().enumerate() {
            let y_prev = hyp.tokens.last().copied().unwrap_or(BOS_ID);
            let out = decoder::decode_step(
                &mut tape,
                cfg,
                &step_params,
                &proj,
                &enc,
                &hyp.state,
                y_prev,
            )?;

            // Delta losses for this step do not depend on the token chosen,
            // so one row serves every expansion of this hypothesis.
            let future_row = if want_future_loss {
                let scorer = bound.aux.future.as_ref().expect("aux params for enabled loss");
                let delta = tape.sub(hyp.state.s_future.unwrap(), out.state.s_future.unwrap())?;
                let row =
                    objective::delta_loss_row(&mut tape, scorer, delta, bound.decoder.tgt_emb)?;
                Some(tape.value(row).to_vec())
            } else {
                None
            };
            let past_row = if want_past_loss {
                let scorer = bound.aux.past.as_ref().expect("aux params for enabled loss");
                let delta = tape.sub(out.state.s_past.unwrap(), hyp.state.s_past.unwrap())?;
                let row =
                    objective::delta_loss_row(&mut tape, scorer, delta, bound.decoder.tgt_emb)?;
                Some(tape.value(row).to_vec())
            } else {
                None
            };

            let logprobs = tape.value(out.logprobs);
            // Never emit padding or the start symbol.
            let mut order: Vec<usize> =
                (0..v_tgt).filter(|&y| y != PAD_ID && y != BOS_ID).collect();
            order.sort_by(|&a, &b| {
                logprobs[b].partial_cmp(&logprobs[a]).unwrap().then(a.cmp(&b))
            });
            for &y in order.iter().take(beam) {
                let f = hyp.future_loss + future_row.as_ref().map_or(0.0, |r| -r[y]);
                let p = hyp.past_loss + past_row.as_ref().map_or(0.0, |r| -r[y]);
                candidates.push((hi, y, hyp.logprob + logprobs[y], f, p, step_outs.len()));
            }
            step_outs.push(out);
        }

        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.1.cmp(&b.1)));
        candidates.truncate(beam);

        let mut next_live = Vec::with_capacity(beam);
        for (hi, y, lp, fl, pl, oi) in candidates {
            let src = &live[hi];
            let out = &step_outs[oi];
            let mut tokens = src.tokens.clone();
            tokens.push(y);
            let mut alphas = src.alphas.clone();
            alphas.push(tape.value(out.alpha).to_vec());
            let hyp = LiveHyp {
                tokens,
                state: out.state,
                logprob: lp,
                future_loss: fl,
                past_loss: pl,
                alphas,
            };
            if y == EOS_ID {
                finished.push(hyp.retire(src_len, true));
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|h| h.retire(src_len, false)));

    finished.sort_by(|a, b| {
        b.score(settings.length_normalize)
            .partial_cmp(&a.score(settings.length_normalize))
            .unwrap()
    });
    Ok(finished)
}

/// Greedy decoding: argmax token each step, smallest id on ties.
pub fn greedy(
    cfg: &ModelConfig,
    params: &ModelParams,
    src_ids: &[usize],
    max_out_len: usize,
) -> Result<Hypothesis> {
    let settings = DecodeSettings { beam: 1, max_out_len, length_normalize: true };
    let mut hyps = beam_search(cfg, params, src_ids, &settings)?;
    Ok(hyps.remove(0))
}

/// Rescore and stably reorder hypotheses:
/// w_nll·score − w_future·future_loss/|h| − w_past·past_loss/|h|.
pub fn rerank(
    hyps: &mut [Hypothesis],
    weights: (f64, f64, f64),
    length_normalize: bool,
) {
    let (w_nll, w_f, w_p) = weights;
    let key = |h: &Hypothesis| {
        let len = h.tokens.len().max(1) as f64;
        w_nll * h.score(length_normalize) - w_f * h.future_loss / len - w_p * h.past_loss / len
    };
    hyps.sort_by(|a, b| key(b).partial_cmp(&key(a)).unwrap());
}

/// Hard alignment links (target_pos, source_pos), 1-based, one per content
/// token: the argmax of its attention row over real source positions, ties
/// to the smallest position.
pub fn extract_alignment(hyp: &Hypothesis) -> Vec<(usize, usize)> {
    let mut links = Vec::new();
    for (t, (tok, row)) in hyp.tokens.iter().zip(&hyp.alphas).enumerate() {
        if *tok == EOS_ID {
            continue;
        }
        let mut best = 0;
        for i in 1..hyp.src_len.min(row.len()) {
            if row[i] > row[best] {
                best = i;
            }
        }
        links.push((t + 1, best + 1));
    }
    links
}
