//! Scalar reference implementations used as oracles by the integration
//! tests. Everything here is plain loops over `f64` slices — no tape, no
//! shared code with the library's forward path. Accumulation orders follow
//! the written equations (left to right), which the library also uses, so
//! the baseline comparison can be exact.

#![allow(dead_code)]

use pastfuture::attention::AttentionParams;
use pastfuture::cells::{FutureParams, GruOParams, GruParams};
use pastfuture::decoder::{DecoderParams, FeedFutureTiming, ModelConfig};
use pastfuture::encoder::EncoderParams;
use pastfuture::model::ModelParams;
use pastfuture::objective::Bilinear;
use pastfuture::tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let (r, c) = (m.shape[0], m.shape[1]);
    assert_eq!(c, x.len());
    let mut out = vec![0.0; r];
    for i in 0..r {
        let mut acc = 0.0;
        for j in 0..c {
            acc += m.data[i * c + j] * x[j];
        }
        out[i] = acc;
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn tanh_vec(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.tanh()).collect()
}

pub fn sigmoid_vec(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&x| sigmoid(x)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn softmax_masked(x: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if mask[i] && v > max {
            max = v;
        }
    }
    let mut out = vec![0.0; x.len()];
    let mut z = 0.0;
    for i in 0..x.len() {
        if mask[i] {
            out[i] = (x[i] - max).exp();
            z += out[i];
        }
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    out
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &v in x {
        z += (v - max).exp();
    }
    let lse = z.ln();
    x.iter().map(|&v| v - max - lse).collect()
}

/// r = σ(U_r s + W_r x + b_r); u = σ(U_u s + W_u x + b_u);
/// cand = tanh(U(r·s) + W x + b); out = u·s + (1-u)·cand.
pub fn gru_step(p: &GruParams, s: &[f64], x: &[f64]) -> Vec<f64> {
    let r = sigmoid_vec(&add(&add(&matvec(&p.u_r, s), &matvec(&p.w_r, x)), &p.b_r.data));
    let u = sigmoid_vec(&add(&add(&matvec(&p.u_u, s), &matvec(&p.w_u, x)), &p.b_u.data));
    let rs = mul(&r, s);
    let cand = tanh_vec(&add(&add(&matvec(&p.u, &rs), &matvec(&p.w, x)), &p.b.data));
    let one_minus_u: Vec<f64> = u.iter().map(|v| 1.0 - v).collect();
    add(&mul(&u, s), &mul(&one_minus_u, &cand))
}

/// M = tanh(U_m s - W_m c + b_m), then a GRU step consuming M.
pub fn gru_o_step(p: &GruOParams, s: &[f64], c: &[f64]) -> Vec<f64> {
    let m = tanh_vec(&add(
        &sub(&matvec(&p.u_m, s), &matvec(&p.w_m, c)),
        &p.b_m.data,
    ));
    gru_step(&p.gru, s, &m)
}

/// Gates as in the GRU; cand = tanh(U s - W(r·c) + b).
pub fn gru_i_step(p: &GruParams, s: &[f64], c: &[f64]) -> Vec<f64> {
    let r = sigmoid_vec(&add(&add(&matvec(&p.u_r, s), &matvec(&p.w_r, c)), &p.b_r.data));
    let u = sigmoid_vec(&add(&add(&matvec(&p.u_u, s), &matvec(&p.w_u, c)), &p.b_u.data));
    let rc = mul(&r, c);
    let cand = tanh_vec(&add(&sub(&matvec(&p.u, s), &matvec(&p.w, &rc)), &p.b.data));
    let one_minus_u: Vec<f64> = u.iter().map(|v| 1.0 - v).collect();
    add(&mul(&u, s), &mul(&one_minus_u, &cand))
}

pub fn future_step(p: &FutureParams, s: &[f64], c: &[f64]) -> Vec<f64> {
    match p {
        FutureParams::Gru(g) => gru_step(g, s, c),
        FutureParams::GruO(g) => gru_o_step(g, s, c),
        FutureParams::GruI { cell, ctx_proj } => {
            let c2 = match ctx_proj {
                Some(proj) => matvec(proj, c),
                None => c.to_vec(),
            };
            gru_i_step(cell, s, &c2)
        }
    }
}

pub struct RefEncoding {
    /// Annotation rows, one per source position.
    pub h: Vec<Vec<f64>>,
    pub fwd_last: Vec<f64>,
    pub bwd_first: Vec<f64>,
}

pub fn encode(p: &EncoderParams, src_ids: &[usize]) -> RefEncoding {
    let e_dim = p.src_emb.shape[1];
    let d = p.fwd.state_dim();
    let embs: Vec<Vec<f64>> = src_ids
        .iter()
        .map(|&id| p.src_emb.data[id * e_dim..(id + 1) * e_dim].to_vec())
        .collect();
    let n = src_ids.len();

    let mut fwd = Vec::with_capacity(n);
    let mut state = vec![0.0; d];
    for e in &embs {
        state = gru_step(&p.fwd, &state, e);
        fwd.push(state.clone());
    }
    let mut bwd = vec![vec![0.0; d]; n];
    let mut bstate = vec![0.0; d];
    for i in (0..n).rev() {
        bstate = gru_step(&p.bwd, &bstate, &embs[i]);
        bwd[i] = bstate.clone();
    }
    let h = (0..n)
        .map(|i| {
            let mut row = fwd[i].clone();
            row.extend_from_slice(&bwd[i]);
            row
        })
        .collect();
    RefEncoding {
        h,
        fwd_last: fwd[n - 1].clone(),
        bwd_first: bwd[0].clone(),
    }
}

/// tanh(W_s [fwd_last; bwd_first] + b_s).
pub fn initial_state(p: &EncoderParams, enc: &RefEncoding) -> Vec<f64> {
    let mut summary = enc.fwd_last.clone();
    summary.extend_from_slice(&enc.bwd_first);
    tanh_vec(&add(&matvec(&p.w_s, &summary), &p.b_s.data))
}

pub fn initial_future_state(p: &EncoderParams, enc: &RefEncoding) -> Vec<f64> {
    match (&p.w_s_future, &p.b_s_future) {
        (Some(w), Some(b)) => {
            let mut summary = enc.fwd_last.clone();
            summary.extend_from_slice(&enc.bwd_first);
            tanh_vec(&add(&matvec(w, &summary), &b.data))
        }
        _ => initial_state(p, enc),
    }
}

/// score_i = v_a·tanh(W_a s + U_a h_i [+ V_f sF] [+ V_p sP] + b_a);
/// alpha = softmax(score); c = Σ alpha_i h_i.
pub fn attend(
    p: &AttentionParams,
    s_prev: &[f64],
    h: &[Vec<f64>],
    mask: &[bool],
    s_future: Option<&[f64]>,
    s_past: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let ws = matvec(&p.w_a, s_prev);
    let vf = p.v_f.as_ref().zip(s_future).map(|(v, s)| matvec(v, s));
    let vp = p.v_p.as_ref().zip(s_past).map(|(v, s)| matvec(v, s));
    let mut scores = vec![0.0; h.len()];
    for (i, row) in h.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let mut t = add(&ws, &matvec(&p.u_a, row));
        if let Some(v) = &vf {
            t = add(&t, v);
        }
        if let Some(v) = &vp {
            t = add(&t, v);
        }
        t = add(&t, &p.b_a.data);
        scores[i] = dot(&p.v_a.data, &tanh_vec(&t));
    }
    let alpha = softmax_masked(&scores, mask);
    let width = h[0].len();
    let mut c = vec![0.0; width];
    for j in 0..width {
        let mut acc = 0.0;
        for (i, row) in h.iter().enumerate() {
            acc += alpha[i] * row[j];
        }
        c[j] = acc;
    }
    (alpha, c)
}

/// Decoder GRU over the active feeds, mirroring the per-feed transforms.
pub fn decoder_cell_step(p: &DecoderParams, s: &[f64], feeds: &[(usize, &[f64])]) -> Vec<f64> {
    // feeds: (index, input) where index 0 = emb, 1 = ctx, 2 = fut, 3 = past.
    let input_of = |k: usize| match k {
        0 => &p.cell.emb,
        1 => &p.cell.ctx,
        2 => p.cell.fut.as_ref().unwrap(),
        _ => p.cell.past.as_ref().unwrap(),
    };
    let mut r_pre = matvec(&p.cell.u_r, s);
    for &(k, x) in feeds {
        r_pre = add(&r_pre, &matvec(&input_of(k).w_r, x));
    }
    let r = sigmoid_vec(&add(&r_pre, &p.cell.b_r.data));
    let mut u_pre = matvec(&p.cell.u_u, s);
    for &(k, x) in feeds {
        u_pre = add(&u_pre, &matvec(&input_of(k).w_u, x));
    }
    let u = sigmoid_vec(&add(&u_pre, &p.cell.b_u.data));
    let rs = mul(&r, s);
    let mut cand = matvec(&p.cell.u, &rs);
    for &(k, x) in feeds {
        cand = add(&cand, &matvec(&input_of(k).w, x));
    }
    let cand = tanh_vec(&add(&cand, &p.cell.b.data));
    let one_minus_u: Vec<f64> = u.iter().map(|v| 1.0 - v).collect();
    add(&mul(&u, s), &mul(&one_minus_u, &cand))
}

pub fn readout_logprobs(p: &DecoderParams, e_prev: &[f64], s: &[f64], c: &[f64]) -> Vec<f64> {
    let mut cat = e_prev.to_vec();
    cat.extend_from_slice(s);
    cat.extend_from_slice(c);
    let hidden = tanh_vec(&add(&matvec(&p.w_o1, &cat), &p.b_o1.data));
    let logits = add(&matvec(&p.w_o2, &hidden), &p.b_o2.data);
    log_softmax(&logits)
}

pub struct RefStep {
    pub s: Vec<f64>,
    pub s_future: Option<Vec<f64>>,
    pub s_past: Option<Vec<f64>>,
    pub c: Vec<f64>,
    pub alpha: Vec<f64>,
    pub logprobs: Vec<f64>,
}

/// One full decode step of the configured model.
pub fn decode_step(
    cfg: &ModelConfig,
    params: &ModelParams,
    h: &[Vec<f64>],
    mask: &[bool],
    s_prev: &[f64],
    s_future_prev: Option<&[f64]>,
    s_past_prev: Option<&[f64]>,
    y_prev: usize,
) -> RefStep {
    let (alpha, c) = attend(
        &params.attention,
        s_prev,
        h,
        mask,
        s_future_prev,
        s_past_prev,
    );
    let s_future = cfg.use_future.then(|| {
        future_step(params.future.as_ref().unwrap(), s_future_prev.unwrap(), &c)
    });
    let s_past = cfg
        .use_past
        .then(|| gru_step(params.past.as_ref().unwrap(), s_past_prev.unwrap(), &c));

    let e_dim = params.decoder.tgt_emb.shape[1];
    let e_prev = params.decoder.tgt_emb.data[y_prev * e_dim..(y_prev + 1) * e_dim].to_vec();
    let mut feeds: Vec<(usize, &[f64])> = vec![(0, &e_prev), (1, &c)];
    let f_feed;
    if cfg.use_future {
        f_feed = match cfg.feed_future_timing {
            FeedFutureTiming::Current => s_future.clone().unwrap(),
            FeedFutureTiming::Previous => s_future_prev.unwrap().to_vec(),
        };
        feeds.push((2, &f_feed));
    }
    let p_feed;
    if cfg.use_past {
        p_feed = s_past_prev.unwrap().to_vec();
        feeds.push((3, &p_feed));
    }
    let s = decoder_cell_step(&params.decoder, s_prev, &feeds);
    let logprobs = readout_logprobs(&params.decoder, &e_prev, &s, &c);
    RefStep { s, s_future, s_past, c, alpha, logprobs }
}

/// Teacher-forced pass; returns per-step bundles and per-step nll.
pub fn forced_pass(
    cfg: &ModelConfig,
    params: &ModelParams,
    src_ids: &[usize],
    tgt_ids: &[usize],
) -> (Vec<RefStep>, Vec<f64>) {
    let enc = encode(&params.encoder, src_ids);
    let mask = vec![true; src_ids.len()];
    let s0 = initial_state(&params.encoder, &enc);
    let mut s = s0.clone();
    let mut s_future = cfg
        .use_future
        .then(|| initial_future_state(&params.encoder, &enc));
    let mut s_past = cfg.use_past.then(|| vec![0.0; s0.len()]);

    let mut steps = Vec::new();
    let mut nll = Vec::new();
    let mut y_prev = 2; // start symbol
    for &y in tgt_ids {
        let step = decode_step(
            cfg,
            params,
            &enc.h,
            &mask,
            &s,
            s_future.as_deref(),
            s_past.as_deref(),
            y_prev,
        );
        nll.push(-step.logprobs[y]);
        s = step.s.clone();
        s_future = step.s_future.clone();
        s_past = step.s_past.clone();
        steps.push(step);
        y_prev = y;
    }
    (steps, nll)
}

/// -log softmax(deltaᵀ W E(y) + b)[gold].
pub fn delta_loss(scorer: &Bilinear, delta: &[f64], gold: usize, tgt_emb: &Tensor) -> f64 {
    let (d, e) = (scorer.w.shape[0], scorer.w.shape[1]);
    let mut u = vec![0.0; e];
    for j in 0..e {
        let mut acc = 0.0;
        for i in 0..d {
            acc += delta[i] * scorer.w.data[i * e + j];
        }
        u[j] = acc;
    }
    let v = tgt_emb.shape[0];
    let mut scores = vec![0.0; v];
    for y in 0..v {
        scores[y] = dot(&tgt_emb.data[y * e..(y + 1) * e], &u) + scorer.b.data[0];
    }
    -log_softmax(&scores)[gold]
}

pub fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "{what}[{i}]: got {g}, want {w} (diff {})",
            (g - w).abs()
        );
    }
}

pub fn assert_bitwise(got: &[f64], want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert_eq!(
            g.to_bits(),
            w.to_bits(),
            "{what}[{i}]: got {g:e}, want {w:e}"
        );
    }
}
