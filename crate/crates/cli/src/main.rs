//! `fracpos`: data generation, training, decoding, evaluation and
//! benchmarking for insertion models with pluggable positional encodings.

mod config;
mod out;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fracpos::bench::{bench_csv, latency_markdown, length_bins, run_bench, summary_markdown, BenchConfig, BenchEntry, DEFAULT_BIN_EDGES};
use fracpos::data::{make_splits, save_pairs, stats_table};
use fracpos::flops::COMPONENTS;
use fracpos::metrics::{corpus_bleu, exact_match, token_accuracy};
use fracpos::training::train;
use fracpos::vocab::Token;
use fracpos::{batch_decode, DecodeOptions, HeadKind, Mode, Model, ModelConfig, Pair, PeScheme};
use serde::Serialize;

use config::{Overrides, RunConfig};
use out::Staged;

#[derive(Parser)]
#[command(name = "fracpos", version, about = "Insertion models with reusable positional encodings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/dev/test splits for a synthetic task.
    GenData {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on `train.tsv`, validating on `dev.tsv`.
    Train {
        #[command(flatten)]
        o: Overrides,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the sources of a pairs file.
    Decode {
        #[command(flatten)]
        o: Overrides,
        /// Directory written by train.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a decode output against the targets of a pairs file.
    Eval {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latency of one or more models across batch budgets.
    Bench {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-component FLOPs of every decode mode each model supports.
    Flops {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the dev set once per EOS penalty and pick the best.
    SweepEos {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    inputs: Vec<String>,
    config: &'a RunConfig,
}

fn write_run(stage: &Staged, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<()> {
    let rec = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        config: cfg,
    };
    stage.write("run.toml", toml::to_string(&rec)?)
}

fn load_model(dir: &Path) -> Result<Model> {
    let cfg_path = dir.join("model.toml");
    let text = std::fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg: ModelConfig = toml::from_str(&text).with_context(|| format!("parsing {}", cfg_path.display()))?;
    let ckpt = substrate::Checkpoint::load(dir.join("model.ckpt")).with_context(|| format!("loading checkpoint in {}", dir.display()))?;
    Ok(Model::from_checkpoint(cfg, &ckpt)?)
}

fn decode_options(model: &Model, cfg: &RunConfig) -> DecodeOptions {
    let mut o = DecodeOptions::for_model(model);
    if let Some(m) = cfg.decode.mode {
        o.mode = m;
    }
    o.eos_penalty = cfg.decode.eos_penalty;
    o.beam_size = cfg.decode.beam_size;
    if let Some(l) = cfg.decode.max_len {
        o.max_len = l;
        o.max_steps = l + 2;
    }
    o
}

fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let path = path.as_ref();
    fracpos::data::load_pairs(path).with_context(|| format!("loading pairs from {}", path.display()))
}

fn srcs(pairs: &[Pair]) -> Vec<Vec<Token>> {
    pairs.iter().map(|p| p.src.clone()).collect()
}

fn refs(pairs: &[Pair]) -> Vec<Vec<Token>> {
    pairs.iter().map(|p| p.tgt.clone()).collect()
}

fn scheme_label(model: &Model) -> &'static str {
    match model.config.head {
        HeadKind::L2r => "l2r",
        HeadKind::Insertion => model.scheme().name(),
    }
}

fn gen_data(o: &Overrides, out: &Path) -> Result<()> {
    let cfg = o.resolve()?;
    let stage = Staged::new(out)?;
    let sets = make_splits(cfg.task, &cfg.data)?;
    for d in &sets {
        save_pairs(&d.pairs, stage.path(&format!("{}.tsv", d.split.name())))?;
    }
    stage.write("stats.md", stats_table(&[&sets[0], &sets[1], &sets[2]]))?;
    write_run(&stage, "gen-data", &cfg, &[])?;
    stage.commit()
}

fn train_cmd(o: &Overrides, data: &Path, out: &Path) -> Result<()> {
    let cfg = o.resolve()?;
    let train_set = load_pairs(data.join("train.tsv"))?;
    let dev_set = load_pairs(data.join("dev.tsv"))?;
    let max_tok = train_set.iter().chain(&dev_set).flat_map(|p| p.src.iter().chain(&p.tgt)).max();
    if let Some(&t) = max_tok {
        if t as usize >= cfg.model.vocab_size {
            bail!("data token {t} does not fit model vocab_size {}", cfg.model.vocab_size);
        }
    }
    let stage = Staged::new(out)?;
    let model = Model::new(cfg.model.clone())?;
    let mut curve = String::from("step,train_loss,dev_loss,dev_metric\n");
    let outcome = train(model, cfg.train.clone(), &train_set, &dev_set, |r| {
        eprintln!("step {} train {:.4} dev {:.4} em {:.3}", r.step, r.train_loss, r.dev_loss, r.dev_metric);
        curve.push_str(&r.csv());
        curve.push('\n');
    })?;
    if let Some(s) = outcome.diverged_at {
        eprintln!("training diverged at step {s}; keeping the last good model");
    }
    outcome.model.checkpoint().save(stage.path("model.ckpt"))?;
    stage.write("model.toml", toml::to_string(&outcome.model.config)?)?;
    stage.write("curve.csv", curve)?;
    write_run(&stage, "train", &cfg, &[data])?;
    stage.commit()
}

fn decode_cmd(o: &Overrides, model_dir: &Path, input: &Path, out: &Path) -> Result<()> {
    let cfg = o.resolve()?;
    // Refuse before touching any file: ABS positions shift on insertion.
    if o.pe == Some(PeScheme::Abs) && cfg.decode.mode == Some(Mode::Incremental) {
        return Err(fracpos::Error::AbsIncremental.into());
    }
    let model = load_model(model_dir)?;
    if let Some(p) = o.pe {
        if model.config.head == HeadKind::Insertion && p != model.scheme() {
            bail!("model in {} uses {}, not {}", model_dir.display(), model.scheme().name(), p.name());
        }
    }
    let pairs = load_pairs(input)?;
    let stage = Staged::new(out)?;
    let opts = decode_options(&model, &cfg);
    let res = batch_decode(&model, &srcs(&pairs), cfg.decode.budget, &opts)?;
    let mut text = String::new();
    for (i, r) in res.results.iter().enumerate() {
        text.push_str(&fracpos::decoding::format_result_line(i, r));
        text.push('\n');
    }
    stage.write("decode.tsv", text)?;
    let mut run = cfg.clone();
    run.model = model.config.clone();
    run.decode.mode = Some(opts.mode);
    write_run(&stage, "decode", &run, &[model_dir, input])?;
    stage.commit()
}

struct DecodedLine {
    n_steps: usize,
    tokens: Vec<Token>,
}

fn parse_decode_file(path: &Path) -> Result<Vec<DecodedLine>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || format!("{}:{}: malformed decode line", path.display(), i + 1);
        if f.len() != 5 {
            bail!(bad());
        }
        let tokens = f[4]
            .split_whitespace()
            .map(|t| t.parse::<Token>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(bad)?;
        rows.push(DecodedLine {
            n_steps: f[1].parse().with_context(bad)?,
            tokens,
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct Metrics {
    n: usize,
    exact_match: f64,
    token_accuracy: f64,
    bleu: f64,
    mean_steps: f64,
    mean_len: f64,
}

fn metrics(hyps: &[Vec<Token>], steps: &[usize], gold: &[Vec<Token>]) -> Result<Metrics> {
    let n = hyps.len();
    Ok(Metrics {
        n,
        exact_match: exact_match(hyps, gold)?,
        token_accuracy: token_accuracy(hyps, gold)?,
        bleu: corpus_bleu(hyps, gold, 4)?,
        mean_steps: steps.iter().sum::<usize>() as f64 / n.max(1) as f64,
        mean_len: hyps.iter().map(|h| h.len()).sum::<usize>() as f64 / n.max(1) as f64,
    })
}

fn eval_cmd(o: &Overrides, hyp: &Path, refs_path: &Path, out: &Path) -> Result<()> {
    let cfg = o.resolve()?;
    let lines = parse_decode_file(hyp)?;
    let pairs = load_pairs(refs_path)?;
    if lines.len() != pairs.len() {
        bail!("{} hypotheses for {} references", lines.len(), pairs.len());
    }
    let hyps: Vec<Vec<Token>> = lines.iter().map(|l| l.tokens.clone()).collect();
    let steps: Vec<usize> = lines.iter().map(|l| l.n_steps).collect();
    let m = metrics(&hyps, &steps, &refs(&pairs))?;
    let stage = Staged::new(out)?;
    let text = toml::to_string(&m)?;
    print!("{text}");
    stage.write("metrics.toml", text)?;
    write_run(&stage, "eval", &cfg, &[hyp, refs_path])?;
    stage.commit()
}

fn bench_cmd(o: &Overrides, model_dirs: &[PathBuf], input: &Path, out: &Path) -> Result<()> {
    let cfg = o.resolve()?;
    let models = model_dirs.iter().map(|d| load_model(d)).collect::<Result<Vec<_>>>()?;
    let pairs = load_pairs(input)?;
    let sources = srcs(&pairs);
    let gold = refs(&pairs);
    let stage = Staged::new(out)?;
    let entries: Vec<BenchEntry> = models
        .iter()
        .map(|m| BenchEntry {
            model: m,
            opts: decode_options(m, &cfg),
        })
        .collect();
    let bc = BenchConfig {
        warmup: cfg.bench.warmup,
        repeats: cfg.bench.repeats,
    };
    let (rows, results) = run_bench(cfg.task.name(), &entries, &sources, &cfg.bench.budgets, &bc)?;
    let mut quality = Vec::new();
    let mut bins = String::new();
    let lens: Vec<usize> = sources.iter().map(|s| s.len()).collect();
    for (e, res) in entries.iter().zip(results.chunks(cfg.bench.budgets.len())) {
        let last = res.last().expect("one result set per budget");
        let hyps: Vec<Vec<Token>> = last.iter().map(|r| r.tokens.clone()).collect();
        quality.push((e.scheme_name().to_string(), exact_match(&hyps, &gold)?));
        let walls: Vec<_> = res[0].iter().map(|r| r.wall_time).collect();
        let b = length_bins(&lens, &walls, &DEFAULT_BIN_EDGES)?;
        let _ = write!(bins, "\n### {} {} (budget {})\n\n{}", e.scheme_name(), e.opts.mode.name(), cfg.bench.budgets[0], b.markdown());
    }
    stage.write("bench.csv", bench_csv(&rows))?;
    let summary = format!(
        "## Summary (quality = exact match)\n\n{}\n## Latency per instance (ms)\n\n{}\n## Latency by source length\n{}",
        summary_markdown(&rows, &quality),
        latency_markdown(&rows),
        bins
    );
    print!("{summary}");
    stage.write("summary.md", summary)?;
    let dirs: Vec<&Path> = model_dirs.iter().map(|p| p.as_path()).chain([input]).collect();
    write_run(&stage, "bench", &cfg, &dirs)?;
    stage.commit()
}

fn flops_cmd(o: &Overrides, model_dirs: &[PathBuf], input: &Path, out: &Path) -> Result<()> {
    let cfg = o.resolve()?;
    let models = model_dirs.iter().map(|d| load_model(d)).collect::<Result<Vec<_>>>()?;
    let pairs = load_pairs(input)?;
    let sources = srcs(&pairs);
    let stage = Staged::new(out)?;
    let mut csv = format!("scheme,mode,n,mean_len,mean_steps,total,{}\n", COMPONENTS.join(","));
    for m in &models {
        let base = decode_options(m, &cfg);
        let modes: Vec<Mode> = if base.mode == Mode::Incremental {
            vec![Mode::Recompute, Mode::Incremental]
        } else {
            vec![Mode::Recompute]
        };
        for mode in modes {
            let opts = DecodeOptions {
                trace: true,
                ..base.clone().with_mode(mode)
            };
            // One instance per batch so nothing is averaged across instances.
            let res: Vec<_> = sources
                .iter()
                .map(|s| fracpos::decode(m, s, &opts))
                .collect::<fracpos::Result<_>>()?;
            let n = res.len().max(1) as f64;
            let mean = |f: &dyn Fn(&fracpos::DecodeResult) -> f64| res.iter().map(f).sum::<f64>() / n;
            let report = |r: &fracpos::DecodeResult| r.flops.clone().unwrap_or_default();
            let _ = write!(
                csv,
                "{},{},{},{:.3},{:.3},{:.1}",
                scheme_label(m),
                mode.name(),
                res.len(),
                mean(&|r| r.out_len as f64),
                mean(&|r| r.n_steps as f64),
                mean(&|r| report(r).total as f64)
            );
            for c in COMPONENTS {
                let _ = write!(csv, ",{:.1}", mean(&|r| report(r).component(c) as f64));
            }
            csv.push('\n');
        }
    }
    print!("{csv}");
    stage.write("flops.csv", csv)?;
    let dirs: Vec<&Path> = model_dirs.iter().map(|p| p.as_path()).chain([input]).collect();
    write_run(&stage, "flops", &cfg, &dirs)?;
    stage.commit()
}

fn sweep_cmd(o: &Overrides, model_dir: &Path, dev: &Path, out: &Path) -> Result<()> {
    let cfg = o.resolve()?;
    if cfg.decode.eos_grid.is_empty() {
        bail!("empty EOS penalty grid");
    }
    let model = load_model(model_dir)?;
    let pairs = load_pairs(dev)?;
    let sources = srcs(&pairs);
    let gold = refs(&pairs);
    let stage = Staged::new(out)?;
    let mut csv = String::from("eos_penalty,exact_match,bleu,mean_len,mean_steps\n");
    let mut best: Option<(f64, f64, f64)> = None;
    for &beta in &cfg.decode.eos_grid {
        let opts = DecodeOptions {
            eos_penalty: beta,
            ..decode_options(&model, &cfg)
        };
        let res = batch_decode(&model, &sources, cfg.decode.budget, &opts)?.results;
        let hyps: Vec<Vec<Token>> = res.iter().map(|r| r.tokens.clone()).collect();
        let steps: Vec<usize> = res.iter().map(|r| r.n_steps).collect();
        let m = metrics(&hyps, &steps, &gold)?;
        let _ = writeln!(csv, "{beta},{:.6},{:.6},{:.4},{:.4}", m.exact_match, m.bleu, m.mean_len, m.mean_steps);
        // Exact match first, BLEU breaks ties, the smaller penalty wins a full tie.
        if best.map_or(true, |(_, em, bl)| (m.exact_match, m.bleu) > (em, bl)) {
            best = Some((beta, m.exact_match, m.bleu));
        }
    }
    let (beta, em, bleu) = best.expect("non-empty grid");
    println!("selected eos_penalty {beta} (exact match {em:.4}, bleu {bleu:.4})");
    stage.write("sweep.csv", csv)?;
    stage.write(
        "sweep.toml",
        format!("selected_eos_penalty = {beta:?}\nexact_match = {em}\nbleu = {bleu}\ndecodes = {}\n", cfg.decode.eos_grid.len()),
    )?;
    write_run(&stage, "sweep-eos", &cfg, &[model_dir, dev])?;
    stage.commit()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { o, out } => gen_data(o, out),
        Command::Train { o, data, out } => train_cmd(o, data, out),
        Command::Decode { o, model, input, out } => decode_cmd(o, model, input, out),
        Command::Eval { o, hyp, refs, out } => eval_cmd(o, hyp, refs, out),
        Command::Bench { o, model, input, out } => bench_cmd(o, model, input, out),
        Command::Flops { o, model, input, out } => flops_cmd(o, model, input, out),
        Command::SweepEos { o, model, dev, out } => sweep_cmd(o, model, dev, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
