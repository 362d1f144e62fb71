//! Command-line entry point: train / translate / evaluate / gradcheck /
//! gen-data over a flat TOML config.
//!
//! Exit codes: 0 success; 1 gradcheck tolerance exceeded or internal error;
//! 2 config parse error; 3 data error; 4 numeric divergence; 5 checkpoint/
//! config mismatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pastfuture::config::{self, RunConfig};
use pastfuture::data::{self, SynthTask, Vocabulary};
use pastfuture::decoder::{Dims, ModelConfig};
use pastfuture::error::{Error, Result};
use pastfuture::evaluation::{self, AlignmentGold, CoverageTask};
use pastfuture::inference::{self, Hypothesis};
use pastfuture::model::{BoundModel, ModelParams};
use pastfuture::tensor::{finite_difference_check_multi, ParamCollection, Tape};
use pastfuture::trainer::{Checkpoint, Trainer};
use pastfuture::{decoder, objective};

#[derive(Parser)]
#[command(
    name = "pastfuture",
    version,
    about = "Attention seq2seq with translated/untranslated content tracking"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file; writes the best checkpoint and a
    /// tab-separated metrics log.
    Train(TrainArgs),
    /// Translate a file, one sentence per line.
    Translate(TranslateArgs),
    /// Score hypotheses against references (BLEU, optional AER and
    /// over-/under-translation ratios).
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central finite differences for
    /// every model preset.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic parallel corpus with vocabulary files, gold
    /// test alignments, and a ready-to-run config.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Initialize parameters shared with this checkpoint (two-pass
    /// training); overrides `init_from` in the config.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Write the effective configuration to this path before training.
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Input file, one source sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    /// Argmax decoding (equivalent to --beam 1).
    #[arg(long)]
    greedy: bool,
    /// Comma-separated w_nll,w_future,w_past reranking weights.
    #[arg(long)]
    rerank_weights: Option<String>,
    /// Write hard alignments of the 1-best hypotheses ("t-i" per line).
    #[arg(long)]
    dump_alignments: Option<PathBuf>,
    /// Write the K best hypotheses per sentence: K PATH.
    #[arg(long, num_args = 2, value_names = ["K", "PATH"])]
    nbest: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Predicted alignments (as written by translate --dump-alignments).
    #[arg(long)]
    pred_alignments: Option<PathBuf>,
    /// Gold alignments ("t-i" sure, "t?i" possible, 1-based).
    #[arg(long)]
    gold_alignments: Option<PathBuf>,
    /// Coverage counting task: copy or permuted-copy (hypotheses are
    /// compared against the reference side).
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    case_insensitive: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// State size used for the encoder, decoder, attention, and readout.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    emb: usize,
    #[arg(long, default_value_t = 11)]
    vocab: usize,
    #[arg(long, default_value_t = 5)]
    src_len: usize,
    /// Target length including the end marker.
    #[arg(long, default_value_t = 4)]
    tgt_len: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Check a single preset instead of all of them.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    vocab_size: usize,
    #[arg(long, default_value_t = 5)]
    len_min: usize,
    #[arg(long, default_value_t = 12)]
    len_max: usize,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_dev: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Translate(args) => cmd_translate(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::GenData(args) => cmd_gen_data(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Vocab { .. } => 3,
        Error::Divergence(_) => 4,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

fn load_or_build_vocab(
    declared: &Option<PathBuf>,
    corpus_path: &Path,
    vocab_size: usize,
) -> Result<Vocabulary> {
    if let Some(path) = declared {
        if path.exists() {
            return Vocabulary::load(path);
        }
        return Err(Error::Data(format!(
            "vocabulary path does not exist: {}",
            path.display()
        )));
    }
    let text = fs::read_to_string(corpus_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", corpus_path.display())))?;
    let lines: Vec<&str> = text.lines().collect();
    data::build_vocab(&lines, vocab_size)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(p) = args.init_from {
        cfg.init_from = Some(p);
    }
    if let Some(dump) = &args.dump_config {
        cfg.save(dump)?;
    }

    let model_cfg = cfg.model_config()?;
    let train_src = cfg.require("train_src", &cfg.train_src)?;
    let train_tgt = cfg.require("train_tgt", &cfg.train_tgt)?;
    let dev_src = cfg.require("dev_src", &cfg.dev_src)?;
    let dev_tgt = cfg.require("dev_tgt", &cfg.dev_tgt)?;

    let src_vocab = load_or_build_vocab(&cfg.src_vocab, train_src, cfg.vocab_size)?;
    let tgt_vocab = load_or_build_vocab(&cfg.tgt_vocab, train_tgt, cfg.vocab_size)?;
    let train = data::load_corpus(train_src, train_tgt, &src_vocab, &tgt_vocab)?;
    let dev = data::load_corpus(dev_src, dev_tgt, &src_vocab, &tgt_vocab)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(&model_cfg, src_vocab.len(), tgt_vocab.len(), &mut rng);
    let mut trainer = Trainer::new(
        model_cfg,
        cfg.train_config(),
        params,
        src_vocab,
        tgt_vocab,
        cfg.threads,
    )?;

    if let Some(init_path) = &trainer.cfg.init_from.clone() {
        let ckpt = Checkpoint::load(init_path)?;
        let (loaded, fresh) = trainer.init_shared(&ckpt)?;
        println!(
            "initialized from {}: {loaded} shared tensors loaded, {fresh} fresh",
            init_path.display()
        );
    }

    let mut metrics = fs::File::create(&cfg.metrics_log)?;
    let outcome = trainer.train(&train, &dev, &cfg.checkpoint, &mut metrics)?;
    for m in &outcome.metrics {
        println!(
            "epoch {}: train {:.4} dev {:.4} lr {:.2e}",
            m.epoch, m.train_nll, m.dev_nll, m.lr
        );
    }
    println!(
        "best dev nll {:.4} at epoch {}; checkpoint {}",
        outcome.best_dev_nll,
        outcome.best_epoch,
        cfg.checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_rerank_weights(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad rerank weights `{s}` (expected a,b,c)")))?;
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "rerank weights need exactly three values, got {}",
            parts.len()
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

/// Structural compatibility between a run config and a checkpoint: same
/// layers, cell kind, dims, and wiring (loss weights may differ).
fn check_compatible(cfg: &ModelConfig, ckpt: &ModelConfig) -> Result<()> {
    let strip = |c: &ModelConfig| {
        (
            c.use_future,
            c.future_kind,
            c.use_past,
            c.use_losses,
            c.dims,
            c.feed_future_timing,
            c.separate_future_init,
        )
    };
    if strip(cfg) != strip(ckpt) {
        return Err(Error::Checkpoint(format!(
            "checkpoint model {ckpt:?} does not match configured model {cfg:?}"
        )));
    }
    Ok(())
}

fn map_in_order<T: Send, F>(items: &[String], threads: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(&str) -> Result<T> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(|s| f(s)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let chunks: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|slice| scope.spawn(|| slice.iter().map(|s| f(s)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn cmd_translate(args: TranslateArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(b) = args.beam {
        cfg.beam = b;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = &args.rerank_weights {
        let (a, b, c) = parse_rerank_weights(w)?;
        cfg.rerank_nll_weight = a;
        cfg.rerank_future_weight = b;
        cfg.rerank_past_weight = c;
    }
    if args.greedy {
        cfg.beam = 1;
    }
    if let Some(dump) = &args.dump_config {
        cfg.save(dump)?;
    }

    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    check_compatible(&cfg.model_config()?, &ckpt.model)?;
    let (model_cfg, params) = ckpt.build_model()?;
    let (src_vocab, tgt_vocab) = ckpt.vocabularies();

    let text = fs::read_to_string(&args.input)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", args.input.display())))?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();

    let settings = cfg.decode_settings();
    let weights = cfg.rerank_weights();
    let nbest_k = match &args.nbest {
        Some(kv) => Some((
            kv[0]
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad nbest count `{}`", kv[0])))?,
            PathBuf::from(&kv[1]),
        )),
        None => None,
    };

    let decoded: Vec<Vec<Hypothesis>> = map_in_order(&lines, cfg.threads, |line| {
        let ids = src_vocab.map_ids(line);
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let mut hyps = inference::beam_search(&model_cfg, &params, &ids, &settings)?;
        inference::rerank(&mut hyps, weights, settings.length_normalize);
        Ok(hyps)
    })?;

    let mut out_lines = Vec::with_capacity(decoded.len());
    let mut align_lines = Vec::new();
    let mut nbest_lines = Vec::new();
    for (sent_id, hyps) in decoded.iter().enumerate() {
        match hyps.first() {
            None => {
                out_lines.push(String::new());
                align_lines.push(String::new());
            }
            Some(best) => {
                out_lines.push(tgt_vocab.render(best.surface()));
                align_lines.push(AlignmentGold::format_line(&inference::extract_alignment(
                    best,
                )));
            }
        }
        if let Some((k, _)) = &nbest_k {
            for h in hyps.iter().take(*k) {
                nbest_lines.push(format!(
                    "{} ||| {} ||| {:.6} ||| {:.6} ||| {:.6}",
                    sent_id,
                    tgt_vocab.render(h.surface()),
                    -h.logprob,
                    h.future_loss,
                    h.past_loss
                ));
            }
        }
    }

    let rendered = if out_lines.is_empty() {
        String::new()
    } else {
        out_lines.join("\n") + "\n"
    };
    match &args.output {
        Some(path) => fs::write(path, rendered)?,
        None => print!("{rendered}"),
    }
    if let Some(path) = &args.dump_alignments {
        fs::write(path, align_lines.join("\n") + "\n")?;
    }
    if let Some((_, path)) = &nbest_k {
        fs::write(path, nbest_lines.join("\n") + "\n")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let read_lines = |p: &Path| -> Result<Vec<String>> {
        Ok(fs::read_to_string(p)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?
            .lines()
            .map(str::to_string)
            .collect())
    };
    let hyps = read_lines(&args.hyp)?;
    let refs = read_lines(&args.reference)?;
    let bleu = evaluation::corpus_bleu(&hyps, &refs, 4, !args.case_insensitive)?;
    println!("bleu = {bleu:.2}");

    match (&args.pred_alignments, &args.gold_alignments) {
        (Some(pred_path), Some(gold_path)) => {
            let gold = AlignmentGold::load(gold_path)?;
            let pred_gold = AlignmentGold::load(pred_path)?;
            let pred: Vec<Vec<(usize, usize)>> = pred_gold
                .sure
                .iter()
                .map(|s| s.iter().copied().collect())
                .collect();
            let aer = evaluation::aer(&pred, &gold)?;
            println!("aer = {aer:.2}");
        }
        (None, Some(_)) | (Some(_), None) => {
            return Err(Error::Data(
                "alignment scoring needs both --pred-alignments and --gold-alignments".into(),
            ));
        }
        (None, None) => {}
    }

    if let Some(task) = &args.task {
        let task = CoverageTask::parse(task)?;
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
        let (over, under) = evaluation::corpus_coverage(&pairs, task);
        println!("over_ratio = {over:.4}");
        println!("under_ratio = {under:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let dims = Dims {
        emb: args.emb,
        enc: args.dim,
        dec: args.dim,
        attn: args.dim,
        readout: args.dim,
    };
    let presets: Vec<&str> = match &args.preset {
        Some(p) => vec![p.as_str()],
        None => ModelConfig::PRESETS.to_vec(),
    };
    let corrupt = std::env::var_os("PF_GRADCHECK_CORRUPT").is_some();

    let mut all_ok = true;
    for (pi, preset) in presets.iter().enumerate() {
        let cfg = ModelConfig::preset(preset, dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(pi as u64));
        let mut params = ModelParams::init(&cfg, args.vocab, args.vocab, &mut rng);
        // Training-scale initialization leaves many gradients down at the
        // finite-difference noise floor; the check wants O(1) parameters,
        // drawn away from zero so no single near-zero weight flattens a
        // whole downstream row. Summing over two sentences keeps entries
        // away from coincidentally flat spots (a state component crossing
        // zero nullifies its gate weights for that sentence).
        params.for_each_param_mut(&mut |_, t| {
            for v in &mut t.data {
                let magnitude: f64 = rand::Rng::random_range(&mut rng, 0.2..0.5);
                let sign = if rand::Rng::random_bool(&mut rng, 0.5) { 1.0 } else { -1.0 };
                *v = sign * magnitude;
            }
        });
        let content = args.vocab - 4;
        let sentences: Vec<(Vec<usize>, Vec<usize>)> = (0..3)
            .map(|k| {
                let src: Vec<usize> = (0..args.src_len)
                    .map(|i| 4 + (i * 3 + 2 * k + 1) % content)
                    .collect();
                let mut tgt: Vec<usize> = (0..args.tgt_len.saturating_sub(1))
                    .map(|i| 4 + (i * 5 + 3 * k + 2) % content)
                    .collect();
                tgt.push(decoder::EOS_ID);
                (src, tgt)
            })
            .collect();

        let run = |p: &ModelParams, tape: &mut Tape| -> Result<(f64, BoundModel, Vec<pastfuture::tensor::Var>)> {
            let bound = BoundModel::bind(tape, p);
            let mut totals = Vec::new();
            let mut value = 0.0;
            for (src, tgt) in &sentences {
                let pass = decoder::teacher_forced_pass(
                    tape,
                    &cfg,
                    &bound.encoder,
                    &bound.step_params(),
                    src,
                    tgt,
                )?;
                let obj = objective::total_objective(
                    tape,
                    &cfg,
                    &pass,
                    &bound.aux,
                    tgt,
                    bound.decoder.tgt_emb,
                )?;
                value += tape.val1(obj.total);
                totals.push(obj.total);
            }
            Ok((value, bound, totals))
        };

        let forward = |p: &ModelParams| -> Result<f64> {
            let mut tape = Tape::new();
            Ok(run(p, &mut tape)?.0)
        };
        let backward = |p: &mut ModelParams| -> Result<f64> {
            let mut tape = Tape::new();
            let (value, bound, totals) = run(p, &mut tape)?;
            let mut loss = totals[0];
            for &t in &totals[1..] {
                loss = tape.add(loss, t)?;
            }
            tape.backward(loss)?;
            p.zero_grads();
            bound.write_grads(&tape, p);
            if corrupt {
                let mut first = true;
                p.for_each_param_mut(&mut |_, t| {
                    if first {
                        if let Some(g) = &mut t.grad {
                            g[0] += 1.0;
                        }
                        first = false;
                    }
                });
            }
            Ok(value)
        };

        let report = finite_difference_check_multi(
            &mut params,
            &[1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 5e-3],
            forward,
            backward,
        )?;

        let mut modules: Vec<(String, f64)> = Vec::new();
        for (name, err) in &report.per_param {
            let module = name.split('.').next().unwrap_or(name).to_string();
            match modules.iter_mut().find(|(m, _)| *m == module) {
                Some((_, worst)) => *worst = worst.max(*err),
                None => modules.push((module, *err)),
            }
        }
        let ok = report.max_rel_error < args.tolerance;
        all_ok &= ok;
        println!(
            "{} {preset}: max rel err {:.3e}",
            if ok { "ok  " } else { "FAIL" },
            report.max_rel_error
        );
        for (module, err) in &modules {
            println!("      {module}: {err:.3e}");
        }
        if !ok {
            for (name, err) in report.failing(args.tolerance) {
                println!("      exceeds tolerance: {name} ({err:.3e})");
            }
        }
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let task = SynthTask::parse(&args.task)?;
    let total = args.n_train + args.n_dev + args.n_test;
    let pairs = data::gen_synthetic(
        task,
        args.vocab_size,
        (args.len_min, args.len_max),
        total,
        args.seed,
    )?;
    let vocab = data::synthetic_vocab(args.vocab_size);

    fs::create_dir_all(&args.out)?;
    let write_split = |name: &str, slice: &[data::SyntheticPair]| -> Result<()> {
        let mut src = String::new();
        let mut tgt = String::new();
        for p in slice {
            src.push_str(&vocab.render(&p.src));
            src.push('\n');
            tgt.push_str(&vocab.render(&p.tgt));
            tgt.push('\n');
        }
        fs::write(args.out.join(format!("{name}.src")), src)?;
        fs::write(args.out.join(format!("{name}.tgt")), tgt)?;
        Ok(())
    };
    let (train, rest) = pairs.split_at(args.n_train);
    let (dev, test) = rest.split_at(args.n_dev);
    write_split("train", train)?;
    write_split("dev", dev)?;
    write_split("test", test)?;

    let mut align = String::new();
    for p in test {
        align.push_str(&AlignmentGold::format_line(&p.alignment));
        align.push('\n');
    }
    fs::write(args.out.join("test.align"), align)?;

    vocab.save(&args.out.join("vocab.src"))?;
    vocab.save(&args.out.join("vocab.tgt"))?;
    let abs_out = args.out.canonicalize().unwrap_or_else(|_| args.out.clone());
    let mut cfg_file = fs::File::create(args.out.join("config.toml"))?;
    cfg_file.write_all(config::template(&abs_out).as_bytes())?;

    println!(
        "wrote {} train / {} dev / {} test pairs to {}",
        train.len(),
        dev.len(),
        test.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
