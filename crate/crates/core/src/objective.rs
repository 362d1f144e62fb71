//! The three-part training loss: per-token negative log-likelihood plus the
//! two auxiliary delta losses. The subtraction loss scores the drop of the
//! untranslated-content state, Δ^F_t = s^F_{t-1} - s^F_t, against the word
//! embedding of y_t through a bilinear form, softmaxed over the vocabulary;
//! the addition loss does the same for the growth of the translated-content
//! state, Δ^P_t = s^P_t - s^P_{t-1}. Both propagate into the content layers
//! and into the target embeddings; nothing is detached.

use rand::Rng;

use crate::decoder::{ForcedPass, ModelConfig};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Tape, Tensor, Var};

/// One bilinear scorer l(u, v) = uᵀ W v + b.
#[derive(Debug, Clone)]
pub struct Bilinear {
    pub w: Tensor, // [d_dec × e]
    pub b: Tensor, // scalar
}

impl Bilinear {
    fn init<R: Rng>(rng: &mut R, d_dec: usize, emb: usize) -> Self {
        Bilinear { w: init::uniform(rng, &[d_dec, emb]), b: Tensor::scalar(0.0) }
    }
}

/// Scorer parameters for whichever delta losses the config enables. The two
/// losses do not share weights.
#[derive(Debug, Clone, Default)]
pub struct AuxLossParams {
    pub future: Option<Bilinear>,
    pub past: Option<Bilinear>,
}

impl AuxLossParams {
    pub fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig, _nonempty: bool) -> Self {
        let d = cfg.dims;
        AuxLossParams {
            future: (cfg.use_losses && cfg.use_future)
                .then(|| Bilinear::init(rng, d.dec, d.emb)),
            past: (cfg.use_losses && cfg.use_past).then(|| Bilinear::init(rng, d.dec, d.emb)),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(b) = &self.future {
            f("aux.future.w", &b.w);
            f("aux.future.b", &b.b);
        }
        if let Some(b) = &self.past {
            f("aux.past.w", &b.w);
            f("aux.past.b", &b.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(b) = &mut self.future {
            f("aux.future.w", &mut b.w);
            f("aux.future.b", &mut b.b);
        }
        if let Some(b) = &mut self.past {
            f("aux.past.w", &mut b.w);
            f("aux.past.b", &mut b.b);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBilinear {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BoundAux {
    pub future: Option<BoundBilinear>,
    pub past: Option<BoundBilinear>,
}

impl BoundAux {
    pub fn bind(tape: &mut Tape, p: &AuxLossParams) -> Self {
        BoundAux {
            future: p.future.as_ref().map(|b| BoundBilinear {
                w: tape.leaf(&b.w),
                b: tape.leaf(&b.b),
            }),
            past: p.past.as_ref().map(|b| BoundBilinear {
                w: tape.leaf(&b.w),
                b: tape.leaf(&b.b),
            }),
        }
    }
}

/// Per-step state deltas, oriented so both approximate the attention
/// context c_t: the untranslated state shrinks, the translated one grows.
#[derive(Debug, Clone, Copy)]
pub struct StepDeltas {
    pub future: Option<Var>, // s^F_{t-1} - s^F_t
    pub past: Option<Var>,   // s^P_t - s^P_{t-1}
}

/// Deltas for every target step of a teacher-forced pass.
pub fn step_deltas(tape: &mut Tape, pass: &ForcedPass) -> Result<Vec<StepDeltas>> {
    let steps = pass.steps.len();
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let future = match &pass.future_states {
            Some(fs) => Some(tape.sub(fs[t], fs[t + 1])?),
            None => None,
        };
        let past = match &pass.past_states {
            Some(ps) => Some(tape.sub(ps[t + 1], ps[t])?),
            None => None,
        };
        out.push(StepDeltas { future, past });
    }
    Ok(out)
}

/// -log softmax_y(deltaᵀ W E(y) + b) at the gold word. One vector-matrix
/// product, then one score per vocabulary entry.
pub fn delta_loss(
    tape: &mut Tape,
    scorer: &BoundBilinear,
    delta: Var,
    gold_id: usize,
    tgt_emb: Var,
) -> Result<Var> {
    let v_tgt = tape.shape(tgt_emb)[0];
    if gold_id >= v_tgt {
        return Err(Error::Vocab { id: gold_id, size: v_tgt });
    }
    let u = tape.vecmat(delta, scorer.w)?; // [e]
    let scores = tape.matvec(tgt_emb, u)?; // [V]
    let scores = tape.add(scores, scorer.b)?;
    let logprobs = tape.log_softmax(scores)?;
    let lp = tape.pick(logprobs, gold_id)?;
    Ok(tape.neg(lp))
}

/// Scores of every vocabulary entry under one delta (used by reranking to
/// charge a hypothesis for its own tokens during decoding).
pub fn delta_loss_row(
    tape: &mut Tape,
    scorer: &BoundBilinear,
    delta: Var,
    tgt_emb: Var,
) -> Result<Var> {
    let u = tape.vecmat(delta, scorer.w)?;
    let scores = tape.matvec(tgt_emb, u)?;
    let scores = tape.add(scores, scorer.b)?;
    tape.log_softmax(scores)
}

/// Value of the total objective with its components, all still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveOut {
    pub total: Var,
    pub nll: f64,
    pub future_loss: f64,
    pub past_loss: f64,
    pub tokens: usize,
}

/// Σ_t [ nll_t + w_F·loss(Δ^F_t, y_t) + w_P·loss(Δ^P_t, y_t) ], the
/// unweighted sum when both weights are 1 (the default).
pub fn total_objective(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pass: &ForcedPass,
    aux: &BoundAux,
    tgt_ids: &[usize],
    tgt_emb: Var,
) -> Result<ObjectiveOut> {
    if tgt_ids.len() != pass.nll.len() {
        return Err(Error::Contract(format!(
            "{} target tokens vs {} decoded steps",
            tgt_ids.len(),
            pass.nll.len()
        )));
    }
    let want_future = cfg.use_losses && cfg.use_future;
    let want_past = cfg.use_losses && cfg.use_past;
    if want_future && aux.future.is_none() || want_past && aux.past.is_none() {
        return Err(Error::Config("auxiliary loss parameters missing".into()));
    }

    let deltas = if want_future || want_past {
        step_deltas(tape, pass)?
    } else {
        Vec::new()
    };

    let mut nll_value = 0.0;
    let mut future_value = 0.0;
    let mut past_value = 0.0;
    let mut total: Option<Var> = None;
    let add_term = |tape: &mut Tape, term: Var, total: &mut Option<Var>| -> Result<()> {
        *total = Some(match *total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        Ok(())
    };

    for (t, &y) in tgt_ids.iter().enumerate() {
        let nll_t = pass.nll[t];
        nll_value += tape.val1(nll_t);
        add_term(tape, nll_t, &mut total)?;

        if want_future {
            let scorer = aux.future.as_ref().unwrap();
            let delta = deltas[t].future.expect("delta for enabled layer");
            let mut loss = delta_loss(tape, scorer, delta, y, tgt_emb)?;
            future_value += tape.val1(loss);
            if cfg.future_loss_weight != 1.0 {
                loss = tape.scale(loss, cfg.future_loss_weight);
            }
            add_term(tape, loss, &mut total)?;
        }
        if want_past {
            let scorer = aux.past.as_ref().unwrap();
            let delta = deltas[t].past.expect("delta for enabled layer");
            let mut loss = delta_loss(tape, scorer, delta, y, tgt_emb)?;
            past_value += tape.val1(loss);
            if cfg.past_loss_weight != 1.0 {
                loss = tape.scale(loss, cfg.past_loss_weight);
            }
            add_term(tape, loss, &mut total)?;
        }
    }

    Ok(ObjectiveOut {
        total: total.expect("at least one target token"),
        nll: nll_value,
        future_loss: future_value,
        past_loss: past_value,
        tokens: tgt_ids.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{Dims, EOS_ID};
    use crate::model::{BoundModel, ModelParams};
    use crate::tensor::ParamCollection;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_scorer_gives_log_vocab() {
        let v = 7;
        let mut tape = Tape::new();
        let scorer = BoundBilinear {
            w: tape.leaf(&Tensor::zeros(&[4, 3])),
            b: tape.leaf(&Tensor::scalar(0.0)),
        };
        let delta = tape.leaf_parts(vec![4], vec![0.3, -0.2, 0.5, 0.1]);
        let emb = tape.leaf(&Tensor::zeros(&[v, 3]));
        let loss = delta_loss(&mut tape, &scorer, delta, 5, emb).unwrap();
        assert!((tape.val1(loss) - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_analytic_value() {
        // Scores (2, 0), gold = 0: loss = ln(1 + e^{-2}).
        let mut tape = Tape::new();
        let scorer = BoundBilinear {
            w: tape.leaf_parts(vec![1, 1], vec![1.0]),
            b: tape.leaf(&Tensor::scalar(0.0)),
        };
        let delta = tape.leaf_parts(vec![1], vec![1.0]);
        let emb = tape.leaf_parts(vec![2, 1], vec![2.0, 0.0]);
        let loss = delta_loss(&mut tape, &scorer, delta, 0, emb).unwrap();
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((tape.val1(loss) - want).abs() < 1e-12, "{}", tape.val1(loss));
        assert!((want - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn gold_out_of_range_is_vocab_error() {
        let mut tape = Tape::new();
        let scorer = BoundBilinear {
            w: tape.leaf(&Tensor::zeros(&[2, 2])),
            b: tape.leaf(&Tensor::scalar(0.0)),
        };
        let delta = tape.leaf_parts(vec![2], vec![0.0, 0.0]);
        let emb = tape.leaf(&Tensor::zeros(&[5, 2]));
        assert!(matches!(
            delta_loss(&mut tape, &scorer, delta, 9, emb),
            Err(Error::Vocab { id: 9, size: 5 })
        ));
    }

    #[test]
    fn delta_loss_nonnegative_and_log_vocab_iff_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let (d, e, v) = (3, 2, 6);
            let w = init::uniform(&mut rng, &[d, e]);
            let emb = init::uniform(&mut rng, &[v, e]);
            let mut tape = Tape::new();
            let scorer = BoundBilinear {
                w: tape.leaf(&w),
                b: tape.leaf(&Tensor::scalar(0.2)),
            };
            let delta_data: Vec<f64> =
                (0..d).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            let delta = tape.leaf_parts(vec![d], delta_data);
            let bemb = tape.leaf(&emb);
            let loss = delta_loss(&mut tape, &scorer, delta, 4, bemb).unwrap();
            assert!(tape.val1(loss) >= 0.0);
        }
    }

    fn run_pass(
        cfg: &ModelConfig,
        params: &ModelParams,
        src: &[usize],
        tgt: &[usize],
    ) -> (Tape, ObjectiveOut) {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, params);
        let pass = crate::decoder::teacher_forced_pass(
            &mut tape,
            cfg,
            &bound.encoder,
            &bound.step_params(),
            src,
            tgt,
        )
        .unwrap();
        let out =
            total_objective(&mut tape, cfg, &pass, &bound.aux, tgt, bound.decoder.tgt_emb)
                .unwrap();
        (tape, out)
    }

    #[test]
    fn disabled_losses_reduce_to_nll_sum() {
        let dims = Dims { emb: 3, enc: 2, dec: 3, attn: 3, readout: 3 };
        let cfg = ModelConfig::baseline(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let params = ModelParams::init(&cfg, 8, 9, &mut rng);
        let (tape, out) = run_pass(&cfg, &params, &[4, 5], &[4, 5, EOS_ID]);
        assert_eq!(tape.val1(out.total), out.nll);
        assert_eq!(out.future_loss, 0.0);
        assert_eq!(out.past_loss, 0.0);
    }

    #[test]
    fn zero_model_gives_three_uniform_components() {
        // All-zero params, |y| = 2, V = 10, both losses on: every component
        // is 2·ln 10, totalling 6·ln 10.
        let dims = Dims { emb: 3, enc: 2, dec: 3, attn: 3, readout: 3 };
        let cfg = ModelConfig::preset("+frnn+prnn+loss", dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let mut params = ModelParams::init(&cfg, 8, 10, &mut rng);
        params.for_each_param_mut(&mut |_, t| t.data.iter_mut().for_each(|v| *v = 0.0));
        let (tape, out) = run_pass(&cfg, &params, &[4, 5, 6], &[7, EOS_ID]);
        let ln10 = 10.0f64.ln();
        assert!((out.nll - 2.0 * ln10).abs() < 1e-12);
        assert!((out.future_loss - 2.0 * ln10).abs() < 1e-12);
        assert!((out.past_loss - 2.0 * ln10).abs() < 1e-12);
        assert!((tape.val1(out.total) - 6.0 * ln10).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_contract_violation() {
        let dims = Dims { emb: 2, enc: 2, dec: 2, attn: 2, readout: 2 };
        let cfg = ModelConfig::baseline(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let params = ModelParams::init(&cfg, 6, 6, &mut rng);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &params);
        let pass = crate::decoder::teacher_forced_pass(
            &mut tape,
            &cfg,
            &bound.encoder,
            &bound.step_params(),
            &[4],
            &[4, EOS_ID],
        )
        .unwrap();
        let err = total_objective(
            &mut tape,
            &cfg,
            &pass,
            &bound.aux,
            &[4],
            bound.decoder.tgt_emb,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
