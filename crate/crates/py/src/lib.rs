//! Python bindings: train / load / translate / score models and compute
//! the evaluation metrics without leaving Python. The module mirrors the
//! CLI's behavior; checkpoints are interchangeable between the two.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pastfuture::data::{self, SynthTask, Vocabulary};
use pastfuture::decoder::{self, Dims, ModelConfig};
use pastfuture::evaluation::{self, AlignmentGold, CoverageTask};
use pastfuture::inference::{self, DecodeSettings};
use pastfuture::model::{BoundModel, ModelParams};
use pastfuture::objective;
use pastfuture::tensor::{finite_difference_check_multi, ParamCollection, Tape};
use pastfuture::trainer::{Checkpoint, TrainConfig, Trainer};

fn err(e: pastfuture::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A trained translation model (parameters, configuration, vocabularies).
#[pyclass]
struct Model {
    cfg: ModelConfig,
    params: ModelParams,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

#[pymethods]
impl Model {
    /// Load a checkpoint written by training (CLI or `train` below).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        let (cfg, params) = ckpt.build_model().map_err(err)?;
        let (src_vocab, tgt_vocab) = ckpt.vocabularies();
        Ok(Model { cfg, params, src_vocab, tgt_vocab })
    }

    /// Translate one whitespace-tokenized line.
    #[pyo3(signature = (line, beam = 12, max_out_len = 80))]
    fn translate(&self, line: &str, beam: usize, max_out_len: usize) -> PyResult<String> {
        Ok(self.translate_many(vec![line.to_string()], beam, max_out_len)?.remove(0))
    }

    /// Translate many lines, preserving order. Empty lines stay empty.
    #[pyo3(signature = (lines, beam = 12, max_out_len = 80))]
    fn translate_many(
        &self,
        lines: Vec<String>,
        beam: usize,
        max_out_len: usize,
    ) -> PyResult<Vec<String>> {
        let settings = DecodeSettings { beam, max_out_len, length_normalize: true };
        lines
            .iter()
            .map(|line| {
                let ids = self.src_vocab.map_ids(line);
                if ids.is_empty() {
                    return Ok(String::new());
                }
                let mut hyps =
                    inference::beam_search(&self.cfg, &self.params, &ids, &settings).map_err(err)?;
                inference::rerank(&mut hyps, (1.0, 1.0, 1.0), true);
                Ok(self.tgt_vocab.render(hyps[0].surface()))
            })
            .collect()
    }

    /// Total negative log-likelihood of a target line given a source line.
    fn score(&self, src_line: &str, tgt_line: &str) -> PyResult<f64> {
        let src = self.src_vocab.map_ids(src_line);
        let mut tgt = self.tgt_vocab.map_ids(tgt_line);
        tgt.push(data::EOS_ID);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &self.params);
        let pass = decoder::teacher_forced_pass(
            &mut tape,
            &self.cfg,
            &bound.encoder,
            &bound.step_params(),
            &src,
            &tgt,
        )
        .map_err(err)?;
        Ok(pass.total_nll(&tape))
    }

    /// Hard alignment links (target_pos, source_pos), 1-based, for the
    /// 1-best translation of a line.
    #[pyo3(signature = (line, beam = 12, max_out_len = 80))]
    fn alignment(
        &self,
        line: &str,
        beam: usize,
        max_out_len: usize,
    ) -> PyResult<Vec<(usize, usize)>> {
        let ids = self.src_vocab.map_ids(line);
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let settings = DecodeSettings { beam, max_out_len, length_normalize: true };
        let mut hyps =
            inference::beam_search(&self.cfg, &self.params, &ids, &settings).map_err(err)?;
        inference::rerank(&mut hyps, (1.0, 1.0, 1.0), true);
        Ok(inference::extract_alignment(&hyps[0]))
    }

    /// Preset-style description of the model structure.
    #[getter]
    fn config(&self) -> String {
        format!("{:?}", self.cfg)
    }
}

/// Train a model on line-aligned text files and write a checkpoint.
/// Returns per-epoch (train_nll, dev_nll) pairs.
#[pyfunction]
#[pyo3(signature = (
    train_src, train_tgt, dev_src, dev_tgt, checkpoint,
    preset = "baseline", emb_dim = 32, hidden_dim = 64, vocab_size = 64,
    epochs = 10, lr = 5e-4, batch_size = 16, seed = 1,
    halve_on_plateau = true, init_from = None,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    train_src: PathBuf,
    train_tgt: PathBuf,
    dev_src: PathBuf,
    dev_tgt: PathBuf,
    checkpoint: PathBuf,
    preset: &str,
    emb_dim: usize,
    hidden_dim: usize,
    vocab_size: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    halve_on_plateau: bool,
    init_from: Option<PathBuf>,
) -> PyResult<Vec<(f64, f64)>> {
    let dims = Dims {
        emb: emb_dim,
        enc: hidden_dim,
        dec: hidden_dim,
        attn: hidden_dim,
        readout: hidden_dim,
    };
    let cfg = ModelConfig::preset(preset, dims).map_err(err)?;

    let read_lines = |p: &Path| -> PyResult<Vec<String>> {
        Ok(std::fs::read_to_string(p)
            .map_err(|e| PyValueError::new_err(format!("cannot read {}: {e}", p.display())))?
            .lines()
            .map(str::to_string)
            .collect())
    };
    let src_vocab = data::build_vocab(&read_lines(&train_src)?, vocab_size).map_err(err)?;
    let tgt_vocab = data::build_vocab(&read_lines(&train_tgt)?, vocab_size).map_err(err)?;
    let train_corpus =
        data::load_corpus(&train_src, &train_tgt, &src_vocab, &tgt_vocab).map_err(err)?;
    let dev_corpus = data::load_corpus(&dev_src, &dev_tgt, &src_vocab, &tgt_vocab).map_err(err)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&cfg, src_vocab.len(), tgt_vocab.len(), &mut rng);
    let train_cfg = TrainConfig {
        batch_size,
        max_len: 50,
        lr0: lr,
        halve_on_plateau,
        max_epochs: epochs,
        shuffle_seed: seed,
        grad_clip_norm: 1.0,
        init_from: init_from.clone(),
    };
    let mut trainer =
        Trainer::new(cfg, train_cfg, params, src_vocab, tgt_vocab, 1).map_err(err)?;
    if let Some(path) = init_from {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        trainer.init_shared(&ckpt).map_err(err)?;
    }

    let mut sink = Vec::new();
    let outcome = trainer
        .train(&train_corpus, &dev_corpus, &checkpoint, &mut sink)
        .map_err(err)?;
    Ok(outcome
        .metrics
        .iter()
        .map(|m| (m.train_nll, m.dev_nll))
        .collect())
}

/// Corpus BLEU in [0, 100] over whitespace-tokenized lines.
#[pyfunction]
#[pyo3(signature = (hyps, refs, case_sensitive = true))]
fn corpus_bleu(hyps: Vec<String>, refs: Vec<String>, case_sensitive: bool) -> PyResult<f64> {
    evaluation::corpus_bleu(&hyps, &refs, 4, case_sensitive).map_err(err)
}

/// Alignment error rate over per-sentence link lists. Links are
/// (target_pos, source_pos), 1-based; `possible` is unioned with `sure`.
#[pyfunction]
#[pyo3(signature = (pred, sure, possible = None))]
fn aer(
    pred: Vec<Vec<(usize, usize)>>,
    sure: Vec<Vec<(usize, usize)>>,
    possible: Option<Vec<Vec<(usize, usize)>>>,
) -> PyResult<f64> {
    let mut gold = AlignmentGold::default();
    for (i, s) in sure.iter().enumerate() {
        let s: HashSet<(usize, usize)> = s.iter().copied().collect();
        let p: HashSet<(usize, usize)> = possible
            .as_ref()
            .and_then(|p| p.get(i))
            .map(|v| v.iter().copied().collect())
            .unwrap_or_default();
        gold.push(s, p);
    }
    evaluation::aer(&pred, &gold).map_err(err)
}

/// Over- and under-translation ratios of hypotheses against references,
/// for tasks where every reference token belongs in the output exactly
/// once.
#[pyfunction]
fn coverage(refs: Vec<String>, hyps: Vec<String>) -> PyResult<(f64, f64)> {
    let pairs: Vec<(Vec<String>, Vec<String>)> = refs
        .iter()
        .zip(&hyps)
        .map(|(r, h)| {
            (
                r.split_whitespace().map(str::to_string).collect(),
                h.split_whitespace().map(str::to_string).collect(),
            )
        })
        .collect();
    Ok(evaluation::corpus_coverage(&pairs, CoverageTask::PermutedCopy))
}

/// Generate a synthetic parallel corpus. Returns (src_lines, tgt_lines,
/// alignments) with tokens `w4..`; alignments are 1-based
/// (target_pos, source_pos) links.
#[pyfunction]
#[pyo3(signature = (task, vocab_size = 20, len_min = 5, len_max = 12, n_pairs = 100, seed = 1))]
fn gen_synthetic(
    task: &str,
    vocab_size: usize,
    len_min: usize,
    len_max: usize,
    n_pairs: usize,
    seed: u64,
) -> PyResult<(Vec<String>, Vec<String>, Vec<Vec<(usize, usize)>>)> {
    let task = SynthTask::parse(task).map_err(err)?;
    let pairs =
        data::gen_synthetic(task, vocab_size, (len_min, len_max), n_pairs, seed).map_err(err)?;
    let vocab = data::synthetic_vocab(vocab_size);
    let mut src_lines = Vec::with_capacity(pairs.len());
    let mut tgt_lines = Vec::with_capacity(pairs.len());
    let mut aligns = Vec::with_capacity(pairs.len());
    for p in pairs {
        src_lines.push(vocab.render(&p.src));
        tgt_lines.push(vocab.render(&p.tgt));
        aligns.push(p.alignment);
    }
    Ok((src_lines, tgt_lines, aligns))
}

/// Finite-difference gradient check of the full objective for one preset;
/// returns the worst relative error (tolerance for a healthy build: 1e-4).
#[pyfunction]
#[pyo3(signature = (preset = "baseline", dim = 6, emb = 6, vocab = 9, seed = 1))]
fn gradcheck(preset: &str, dim: usize, emb: usize, vocab: usize, seed: u64) -> PyResult<f64> {
    let dims = Dims { emb, enc: dim, dec: dim, attn: dim, readout: dim };
    let cfg = ModelConfig::preset(preset, dims).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg, vocab, vocab, &mut rng);
    params.for_each_param_mut(&mut |_, t| {
        for v in &mut t.data {
            let magnitude: f64 = rng.random_range(0.2..0.5);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            *v = sign * magnitude;
        }
    });
    let content = vocab - 4;
    let src: Vec<usize> = (0..4).map(|i| 4 + (i * 3 + 1) % content).collect();
    let tgt: Vec<usize> = (0..3)
        .map(|i| 4 + (i * 5 + 2) % content)
        .chain([decoder::EOS_ID])
        .collect();

    let forward = |p: &ModelParams| -> pastfuture::Result<f64> {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, p);
        let pass = decoder::teacher_forced_pass(
            &mut tape,
            &cfg,
            &bound.encoder,
            &bound.step_params(),
            &src,
            &tgt,
        )?;
        let obj = objective::total_objective(
            &mut tape,
            &cfg,
            &pass,
            &bound.aux,
            &tgt,
            bound.decoder.tgt_emb,
        )?;
        Ok(tape.val1(obj.total))
    };
    let report = finite_difference_check_multi(
        &mut params,
        &[1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 5e-3],
        |p| forward(p),
        |p: &mut ModelParams| {
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, p);
            let pass = decoder::teacher_forced_pass(
                &mut tape,
                &cfg,
                &bound.encoder,
                &bound.step_params(),
                &src,
                &tgt,
            )?;
            let obj = objective::total_objective(
                &mut tape,
                &cfg,
                &pass,
                &bound.aux,
                &tgt,
                bound.decoder.tgt_emb,
            )?;
            tape.backward(obj.total)?;
            p.zero_grads();
            bound.write_grads(&tape, p);
            Ok(tape.val1(obj.total))
        },
    )
    .map_err(err)?;
    Ok(report.max_rel_error)
}

#[pymodule]
fn pastfuture_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(aer, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
