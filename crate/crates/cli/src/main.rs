//! `senvae` command-line front end.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use senvae::bayesopt::{BoOptions, FitMethod};
use senvae::checkpoint::Checkpoint;
use senvae::config::RunConfig;
use senvae::evaluation::{self, EvalOptions};
use senvae::models::Decoding;
use senvae::pipeline::{self, Vocabulary};
use senvae::seed;
use senvae::train::{self, Datasets};
use senvae::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "senvae", version, about = "Train, evaluate and probe sentence VAEs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration file (flat `key = value` text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Importance samples for NLL estimates (overrides `eval.samples`).
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Override the target rate `objective.r`.
    #[arg(long, global = true)]
    rate: Option<f64>,
    /// Output directory (overrides `run.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` config overrides, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train to convergence and write checkpoint, metrics and report.
    Train,
    /// Importance-sampled evaluation of a checkpoint.
    Evaluate {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, default_value = "valid")]
        split: String,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Bayesian optimisation of the technique's hyperparameters.
    Tune {
        #[arg(long, default_value_t = 25)]
        iterations: usize,
        /// Technique to tune (defaults to `objective.technique`).
        #[arg(long)]
        technique: Option<String>,
        /// Average EI over MCMC samples of the kernel hyperparameters.
        #[arg(long)]
        mcmc: bool,
    },
    /// Decode sentences and list each one's nearest training sentence.
    Sample {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, value_enum, default_value_t = SampleMode::GreedyPrior)]
        mode: SampleMode,
        #[arg(short, long, default_value_t = 10)]
        n: usize,
        /// Split to encode in `greedy-posterior` mode.
        #[arg(long, default_value = "valid")]
        split: String,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Greedy decodes along a line between two sentences' codes.
    Homotopy {
        #[command(flatten)]
        ckpt: CheckpointArg,
        sentence_a: String,
        sentence_b: String,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Nearest training sentence by TER for each input line.
    Neighbors {
        /// Sentences to look up; read from stdin when absent.
        sentences: Vec<String>,
    },
    /// Rate-progression and PPL-vs-rate figures from run directories.
    Plot {
        /// Run directories containing `metrics.jsonl`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Checkpoint file (defaults to `best.ckpt` in the run directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SampleMode {
    GreedyPrior,
    AncestralPrior,
    GreedyPosterior,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.cmd {
        Command::Train => cmd_train(c),
        Command::Evaluate { ckpt, split, json } => cmd_evaluate(c, &ckpt, &split, json),
        Command::Tune { iterations, technique, mcmc } => cmd_tune(c, iterations, technique.as_deref(), mcmc),
        Command::Sample { ckpt, mode, n, split, max_len } => cmd_sample(c, &ckpt, mode, n, &split, max_len),
        Command::Homotopy { ckpt, sentence_a, sentence_b, steps, max_len } => {
            cmd_homotopy(c, &ckpt, &sentence_a, &sentence_b, steps, max_len)
        }
        Command::Neighbors { sentences } => cmd_neighbors(c, sentences),
        Command::Plot { runs } => plot::cmd_plot(&runs, &c.out.clone().unwrap_or_else(|| PathBuf::from("."))),
    }
}

/// Config from `--config` (paths relative to its directory) or the
/// defaults, with command-line overrides applied and paths made absolute.
fn load_config(c: &Common) -> Result<RunConfig> {
    let cwd = std::env::current_dir()?;
    let mut cfg = match &c.config {
        Some(p) => {
            let mut cfg = RunConfig::load(p)?;
            let base = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            cfg.resolve_paths(&cwd.join(base));
            cfg
        }
        None => {
            let mut cfg = RunConfig::default();
            cfg.resolve_paths(&cwd);
            cfg
        }
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.rate {
        cfg.set("objective.r", &r.to_string())?;
    }
    if let Some(s) = c.samples {
        cfg.eval.samples = s;
    }
    if let Some(o) = &c.out {
        cfg.out = cwd.join(o);
    }
    cfg.resolve_paths(&cwd);
    cfg.validate()?;
    Ok(cfg)
}

/// Checkpoint and the corpus it was trained on; errors when the corpus
/// vocabulary differs from the stored one.
fn load_checkpoint(c: &Common, arg: &CheckpointArg) -> Result<(RunConfig, Checkpoint, Datasets)> {
    let mut common = c.clone();
    let path = match &arg.checkpoint {
        Some(p) => p.clone(),
        None => load_config(c)?.out.join(train::CHECKPOINT_FILE),
    };
    if common.config.is_none() {
        let beside = path.parent().unwrap_or(Path::new(".")).join(train::CONFIG_FILE);
        if beside.exists() {
            common.config = Some(beside);
        }
    }
    let cfg = load_config(&common)?;
    let ck = Checkpoint::load(&path)?;
    let data = Datasets::load(&cfg)?;
    ck.check_vocabulary(&data.vocab)?;
    Ok((cfg, ck, data))
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let (outcome, report) = train::run_training(&cfg)?;
    println!(
        "best epoch {} after {} steps; validation NLL {:.3} PPL {:.2} (no EOS {:.2}) D {:.3} R {:.3} AU {}",
        outcome.best_epoch,
        outcome.steps,
        report.nll_mean,
        report.ppl,
        report.ppl_no_eos,
        report.distortion,
        report.rate,
        report.active_units
    );
    println!("run written to {}", cfg.out.display());
    Ok(())
}

fn cmd_evaluate(c: &Common, arg: &CheckpointArg, split: &str, json: bool) -> Result<()> {
    let (cfg, ck, data) = load_checkpoint(c, arg)?;
    let opts = EvalOptions { samples: cfg.eval.samples, ..train::report_options(&cfg, evaluation::workers_from_env()) };
    let report = evaluation::evaluate(&ck.model, data.split(split)?, &opts)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("split        {split} ({} sentences, {} tokens incl. EOS)", report.sentences, report.tokens);
    println!("samples      {}", report.samples);
    println!("NLL          {:.4}", report.nll_mean);
    println!("PPL          {:.3}", report.ppl);
    println!("PPL (no EOS) {:.3}", report.ppl_no_eos);
    println!("D            {:.4}", report.distortion);
    println!("R            {:.4}", report.rate);
    println!("AU           {}", report.active_units);
    if let Some(g) = report.acc_gap {
        println!("Acc_gap      {g:.4}");
    }
    Ok(())
}

fn cmd_tune(c: &Common, iterations: usize, technique: Option<&str>, mcmc: bool) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(t) = technique {
        cfg.set("objective.technique", t)?;
    }
    let space = train::search_space(cfg.objective.technique)?;
    let opts = BoOptions { fit: if mcmc { FitMethod::mcmc_default() } else { FitMethod::MarginalLikelihood }, ..BoOptions::default() };
    let result = train::tune_technique(&cfg, iterations, &opts)?;
    println!("best validation NLL {:.4}", result.best_value);
    for (p, v) in space.params.iter().zip(&result.best_point) {
        println!("{} = {v}", p.name);
    }
    println!("history in {}", cfg.out.join(train::HISTORY_FILE).display());
    Ok(())
}

fn text(vocab: &Vocabulary, ids: &[usize]) -> String {
    pipeline::detokenize(&vocab.decode(ids))
}

fn default_max_len(data: &Datasets, max_len: Option<usize>) -> usize {
    max_len.unwrap_or(data.cap + 10)
}

fn cmd_sample(
    c: &Common,
    arg: &CheckpointArg,
    mode: SampleMode,
    n: usize,
    split: &str,
    max_len: Option<usize>,
) -> Result<()> {
    let (cfg, ck, data) = load_checkpoint(c, arg)?;
    let model = &ck.model;
    let max_len = default_max_len(&data, max_len);
    let mut rng = seed::rng(seed::derive(cfg.seed, 7));
    let (zs, sources) = match mode {
        SampleMode::GreedyPrior | SampleMode::AncestralPrior => (model.sample_prior(n, &mut rng)?, None),
        SampleMode::GreedyPosterior => {
            let inputs: Vec<Vec<usize>> = data.split(split)?.iter().take(n).cloned().collect();
            let zs = model.posteriors(&inputs)?.iter().map(|q| q.sample(&mut rng)).collect();
            (zs, Some(inputs))
        }
    };
    let decoding = if mode == SampleMode::AncestralPrior { Decoding::Ancestral } else { Decoding::Greedy };
    let outputs = model.generate(&zs, decoding, max_len, &mut rng)?;
    println!("#\tTER\tgeneration\tnearest training sentence");
    for (i, out) in outputs.iter().enumerate() {
        let words = data.vocab.decode(out);
        let (j, ter) = evaluation::ter_nearest_neighbor(&words, &data.train_text)?;
        if let Some(src) = &sources {
            println!("{i}\t\tinput: {}", text(&data.vocab, &src[i]));
        }
        println!("{i}\t{ter:.3}\t{}\t{}", pipeline::detokenize(&words), pipeline::detokenize(&data.train_text[j]));
    }
    Ok(())
}

fn cmd_homotopy(
    c: &Common,
    arg: &CheckpointArg,
    a: &str,
    b: &str,
    steps: usize,
    max_len: Option<usize>,
) -> Result<()> {
    let (cfg, ck, data) = load_checkpoint(c, arg)?;
    let xa = data.vocab.encode(&pipeline::tokenize(a));
    let xb = data.vocab.encode(&pipeline::tokenize(b));
    let h = evaluation::homotopy(&ck.model, &xa, &xb, steps, seed::derive(cfg.seed, 8), default_max_len(&data, max_len))?;
    println!("A\t{}", text(&data.vocab, &xa));
    for (t, d) in h.decoded.iter().enumerate() {
        println!("{t}\t{}", text(&data.vocab, d));
    }
    println!("B\t{}", text(&data.vocab, &xb));
    Ok(())
}

fn cmd_neighbors(c: &Common, sentences: Vec<String>) -> Result<()> {
    let cfg = load_config(c)?;
    let data = Datasets::load(&cfg)?;
    let lines = if sentences.is_empty() {
        std::io::read_to_string(std::io::stdin())?.lines().map(str::to_owned).collect()
    } else {
        sentences
    };
    println!("TER\tsentence\tnearest training sentence");
    for line in lines.iter().filter(|l| !l.trim().is_empty()) {
        let words = pipeline::tokenize(line);
        let (j, ter) = evaluation::ter_nearest_neighbor(&words, &data.train_text)?;
        println!("{ter:.3}\t{}\t{}", pipeline::detokenize(&words), pipeline::detokenize(&data.train_text[j]));
    }
    Ok(())
}
