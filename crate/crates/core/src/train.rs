//! Training runs: data preparation, the optimisation loop with early
//! stopping on validation IS-NLL, metrics rows, run directories and
//! hyperparameter tuning of each technique.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayesopt::{self, BoOptions, ParamSpec, SearchSpace, TuneResult};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{PriorKind, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalOptions, EvalReport};
use crate::models::{init_vamp_pseudo_inputs, PriorSpec, Regularizer, SenVae};
use crate::objectives::{self, Controller, ControllerState, LossBreakdown, Technique};
use crate::pipeline::{self, Batch, LengthStats, Order, Sentence, Splits, ToyGrammarSpec, Vocabulary};
use crate::seed;
use crate::tensor::{clip_global_norm, Adam, Tape};

/// Encoded corpus splits and the vocabulary built from the training split.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub vocab: Vocabulary,
    pub train_text: Vec<Sentence>,
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    /// Training sentences longer than this were truncated.
    pub cap: usize,
    /// SHA-256 over the three splits.
    pub hash: String,
}

impl Datasets {
    pub fn from_splits(splits: Splits, min_count: usize) -> Result<Self> {
        if splits.train.is_empty() || splits.valid.is_empty() {
            return Err(Error::Data("training and validation splits must be non-empty".into()));
        }
        let vocab = Vocabulary::build(&splits.train, min_count)?;
        let lengths: Vec<usize> = splits.train.iter().map(Vec::len).collect();
        let cap = pipeline::truncation_cap(&lengths)?.max(1);
        let mut h = Sha256::new();
        for (name, part) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
            h.update(name.as_bytes());
            for s in part {
                h.update(pipeline::detokenize(s).as_bytes());
                h.update(b"\n");
            }
        }
        Ok(Self {
            train: pipeline::encode_corpus(&splits.train, &vocab, cap),
            valid: pipeline::encode_corpus(&splits.valid, &vocab, usize::MAX),
            test: pipeline::encode_corpus(&splits.test, &vocab, usize::MAX),
            train_text: splits.train,
            vocab,
            cap,
            hash: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        })
    }

    /// Corpus files from the config, or a seeded toy corpus split 80/10/10.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let splits = match &d.train {
            Some(train) => Splits {
                train: pipeline::read_corpus(train)?,
                valid: pipeline::read_corpus(d.valid.as_deref().ok_or_else(|| Error::Config("data.valid missing".into()))?)?,
                test: match &d.test {
                    Some(p) => pipeline::read_corpus(p)?,
                    None => Vec::new(),
                },
            },
            None => {
                let toy = pipeline::generate_toy_corpus(&ToyGrammarSpec::default(), d.toy_sentences, d.toy_seed)?;
                pipeline::split_corpus(&toy.sentences, d.toy_seed)
            }
        };
        Self::from_splits(splits, d.min_count)
    }

    pub fn split(&self, name: &str) -> Result<&[Vec<usize>]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split {name:?}"))),
        }
    }
}

/// Fresh model for a config; VampPrior pseudo inputs take their lengths
/// from the training-length statistics.
pub fn build_model(cfg: &RunConfig, data: &Datasets) -> Result<SenVae> {
    let model_seed = seed::derive(cfg.seed, 0);
    let (prior, vamp) = match cfg.prior {
        PriorKind::Standard => (PriorSpec::Standard, None),
        PriorKind::Mog => (PriorSpec::Mog { components: cfg.prior_components }, None),
        PriorKind::Vamp => {
            let stats = LengthStats::of(data.train.iter().map(Vec::len))?;
            let (spec, t) =
                init_vamp_pseudo_inputs(cfg.prior_components, stats, cfg.model.emb_dim, seed::derive(cfg.seed, 3))?;
            (spec, Some(t))
        }
    };
    SenVae::new(&cfg.model, data.vocab.len(), prior, vamp, model_seed)
}

/// One metrics line. `split` is `step` for per-step rows, `train` for
/// epoch averages and `valid` for validation evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub distortion: f64,
    pub rate: f64,
    pub beta: f64,
    pub u: f64,
    pub u1: f64,
    pub u2: f64,
    pub word_dropout: f64,
    pub loss: Option<f64>,
    pub mmd: Option<f64>,
    pub nll: Option<f64>,
    pub ppl: Option<f64>,
    pub au: Option<usize>,
    pub acc_gap: Option<f64>,
    pub wall_time: f64,
}

impl MetricsRow {
    fn new(step: u64, epoch: usize, split: &str, s: &ControllerState, wall_time: f64) -> Self {
        Self {
            step,
            epoch,
            split: split.into(),
            distortion: 0.0,
            rate: 0.0,
            beta: s.beta,
            u: s.u,
            u1: s.u1,
            u2: s.u2,
            word_dropout: s.word_dropout,
            loss: None,
            mmd: None,
            nll: None,
            ppl: None,
            au: None,
            acc_gap: None,
            wall_time,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model at the best validation epoch.
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub best_epoch: usize,
    pub best_valid_nll: f64,
    pub steps: u64,
}

/// Options for the per-epoch validation pass.
pub fn valid_options(cfg: &RunConfig, workers: usize) -> EvalOptions {
    EvalOptions {
        samples: cfg.train.valid_samples,
        rate_samples: cfg.eval.rate_samples,
        repeats: cfg.eval.repeats,
        seed: seed::derive(cfg.seed, 4),
        workers,
        intrinsic_only: true,
    }
}

/// Options for final reports, shared by training and `evaluate`.
pub fn report_options(cfg: &RunConfig, workers: usize) -> EvalOptions {
    EvalOptions {
        samples: cfg.eval.samples,
        rate_samples: cfg.eval.rate_samples,
        repeats: cfg.eval.repeats,
        seed: seed::derive(cfg.seed, 5),
        workers,
        intrinsic_only: false,
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: u64,
    epoch: usize,
    controller: &'a Controller,
    batch_ids: &'a [Vec<usize>],
    batch_indices: &'a [usize],
    breakdown: &'a LossBreakdown,
}

/// One optimiser step; returns the batch quantities.
pub fn train_step(
    model: &mut SenVae,
    adam: &mut Adam,
    controller: &mut Controller,
    batch: &Batch,
    cfg: &RunConfig,
    weight_decay: f64,
    noise_rng: &mut seed::SeededRng,
    reg_rng: &mut seed::SeededRng,
) -> Result<(LossBreakdown, bool)> {
    controller.begin_step();
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let mut reg = Regularizer { rng: reg_rng, dropout: cfg.model.dropout, word_dropout: controller.state.word_dropout };
    let terms = objectives::elbo_terms(model, &p, batch, cfg.train.rate_samples, noise_rng, Some(&mut reg))?;
    let d = terms.mean_distortion();
    let r = terms.mean_rate();
    let mmd = if controller.technique().uses_mmd() {
        Some(objectives::batch_mmd(model, &terms.z, noise_rng)?)
    } else {
        None
    };
    let loss = controller.loss(&d, &r, mmd.as_ref())?;
    let breakdown = LossBreakdown {
        distortion: d.item(),
        rate: r.item(),
        mmd: mmd.map(|m| m.item()),
        loss: loss.item(),
    };
    let mut grads = tape.backward(loss)?;
    let mut g = p.gradients(&mut grads);
    drop(p);
    for id in model.io_layer_params() {
        let w = model.params.get(id);
        for (gi, wi) in g[id.0].data_mut().iter_mut().zip(w.data()) {
            *gi += weight_decay * wi;
        }
    }
    let finite = breakdown.loss.is_finite() && g.iter().all(|t| t.all_finite());
    if !finite {
        return Ok((breakdown, false));
    }
    clip_global_norm(&mut g, cfg.optim.clip);
    adam.step(&mut model.params, &g);
    controller.end_step(&breakdown);
    Ok((breakdown, true))
}

/// Train to convergence. Rows go to `sink` as they are produced; when
/// `dump_dir` is set a non-finite loss writes `nan_dump.json` there.
pub fn train(
    cfg: &RunConfig,
    data: &Datasets,
    dump_dir: Option<&Path>,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutcome> {
    let model = build_model(cfg, data)?;
    train_model(cfg, data, model, dump_dir, sink)
}

/// [`train`] starting from a given model.
pub fn train_model(
    cfg: &RunConfig,
    data: &Datasets,
    mut model: SenVae,
    dump_dir: Option<&Path>,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let workers = evaluation::workers_from_env();
    let mut controller = Controller::new(cfg.objective.clone())?;
    let mut adam = Adam::new(cfg.optim.adam, &model.params);
    let weight_decay = (1.0 - cfg.model.dropout) / data.train.len() as f64;
    let mut noise_rng = seed::rng(seed::derive(cfg.seed, 1));
    let mut reg_rng = seed::rng(seed::derive(cfg.seed, 2));
    let mut metrics = Vec::new();
    let mut emit = |row: MetricsRow, metrics: &mut Vec<MetricsRow>| -> Result<()> {
        sink(&row)?;
        metrics.push(row);
        Ok(())
    };
    let mut best: Option<(f64, usize, SenVae, Controller)> = None;
    let mut bad_epochs = 0;
    let mut step: u64 = 0;
    for epoch in 0..cfg.train.max_epochs {
        let order = Order::Shuffled(seed::derive(cfg.seed, 1000 + epoch as u64));
        let (mut sd, mut sr, mut sl, mut n) = (0.0, 0.0, 0.0, 0usize);
        for batch in pipeline::make_batches(&data.train, cfg.optim.batch_size, order) {
            let (b, ok) =
                train_step(&mut model, &mut adam, &mut controller, &batch, cfg, weight_decay, &mut noise_rng, &mut reg_rng)?;
            if !ok {
                if let Some(dir) = dump_dir {
                    let dump = NanDump {
                        step,
                        epoch,
                        controller: &controller,
                        batch_ids: &batch.ids,
                        batch_indices: &batch.indices,
                        breakdown: &b,
                    };
                    std::fs::write(dir.join("nan_dump.json"), serde_json::to_string_pretty(&dump)?)?;
                }
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at step {step} (epoch {epoch}): D={} R={} loss={}",
                    b.distortion, b.rate, b.loss
                )));
            }
            step += 1;
            sd += b.distortion;
            sr += b.rate;
            sl += b.loss;
            n += 1;
            if cfg.train.step_metrics {
                let mut row = MetricsRow::new(step, epoch, "step", &controller.state, start.elapsed().as_secs_f64());
                row.distortion = b.distortion;
                row.rate = b.rate;
                row.loss = Some(b.loss);
                row.mmd = b.mmd;
                emit(row, &mut metrics)?;
            }
            if cfg.train.max_steps > 0 && step as usize >= cfg.train.max_steps {
                break;
            }
        }
        let n = n.max(1) as f64;
        let mut row = MetricsRow::new(step, epoch, "train", &controller.state, start.elapsed().as_secs_f64());
        row.distortion = sd / n;
        row.rate = sr / n;
        row.loss = Some(sl / n);
        emit(row, &mut metrics)?;

        let rep = evaluation::evaluate(&model, &data.valid, &valid_options(cfg, workers))?;
        let mut row = MetricsRow::new(step, epoch, "valid", &controller.state, start.elapsed().as_secs_f64());
        row.distortion = rep.distortion;
        row.rate = rep.rate;
        row.nll = Some(rep.nll_mean);
        row.ppl = Some(rep.ppl);
        row.au = Some(rep.active_units);
        emit(row, &mut metrics)?;

        if !rep.nll_mean.is_finite() {
            return Err(Error::Numerical(format!("validation NLL is {} at epoch {epoch}", rep.nll_mean)));
        }
        if best.as_ref().is_none_or(|b| rep.nll_mean < b.0) {
            best = Some((rep.nll_mean, epoch, model.clone(), controller.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        let out_of_steps = cfg.train.max_steps > 0 && step as usize >= cfg.train.max_steps;
        let patience_spent = bad_epochs >= cfg.train.patience && epoch + 1 >= cfg.train.min_epochs;
        if patience_spent || out_of_steps {
            break;
        }
    }
    let (best_valid_nll, best_epoch, model, controller) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            vocab: data.vocab.clone(),
            meta: CheckpointMeta { epoch: best_epoch, step, seed: cfg.seed, controller: Some(controller) },
        },
        metrics,
        best_epoch,
        best_valid_nll,
        steps: step,
    })
}

/// Reproducibility record of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub corpus_sha256: String,
    pub vocab_size: usize,
    pub truncation_cap: usize,
    pub train_sentences: usize,
    pub valid_sentences: usize,
    pub test_sentences: usize,
    pub best_epoch: usize,
    pub steps: u64,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Train into `cfg.out`: config, vocabulary, run record, metrics stream,
/// best checkpoint and a final validation report.
pub fn run_training(cfg: &RunConfig) -> Result<(TrainOutcome, EvalReport)> {
    cfg.validate()?;
    let data = Datasets::load(cfg)?;
    let dir = &cfg.out;
    std::fs::create_dir_all(dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    data.vocab.save(&dir.join("vocab.txt"))?;
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(dir.join(METRICS_FILE))?);
    let outcome = train(cfg, &data, Some(dir), &mut |row| {
        writeln!(metrics_file, "{}", serde_json::to_string(row)?)?;
        Ok(())
    })?;
    metrics_file.flush()?;
    outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    let report = evaluation::evaluate(
        &outcome.checkpoint.model,
        &data.valid,
        &report_options(cfg, evaluation::workers_from_env()),
    )?;
    std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    let record = RunRecord {
        seed: cfg.seed,
        corpus_sha256: data.hash.clone(),
        vocab_size: data.vocab.len(),
        truncation_cap: data.cap,
        train_sentences: data.train.len(),
        valid_sentences: data.valid.len(),
        test_sentences: data.test.len(),
        best_epoch: outcome.best_epoch,
        steps: outcome.steps,
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok((outcome, report))
}

/// Hyperparameters tuned for each technique, keyed by config name.
pub fn search_space(technique: Technique) -> Result<SearchSpace> {
    let params = match technique {
        Technique::Vanilla => {
            return Err(Error::Config("the vanilla objective has no hyperparameters to tune".into()))
        }
        Technique::Annealing => vec![ParamSpec::log("objective.anneal_increment", 1e-6, 1e-3)],
        Technique::WordDropout => vec![ParamSpec::log("objective.word_dropout_decrement", 1e-6, 1e-3)],
        Technique::FreeBits | Technique::Mdr => vec![ParamSpec::linear("objective.r", 0.5, 20.0)],
        Technique::SoftFreeBits => vec![
            ParamSpec::linear("objective.r", 0.5, 20.0),
            ParamSpec::linear("objective.sfb_gamma", 1.0, 1.5),
            ParamSpec::linear("objective.sfb_epsilon", 0.5, 1.0),
            ParamSpec::log("objective.sfb_omega", 1e-3, 0.1),
        ],
        Technique::BetaVae => vec![ParamSpec::linear("objective.beta", 0.05, 1.0)],
        Technique::InfoVae => vec![
            ParamSpec::linear("objective.info_beta", 0.05, 1.0),
            ParamSpec::log("objective.info_lambda", 1.0, 1000.0),
        ],
        Technique::LagVae => vec![
            ParamSpec::linear("objective.lag_alpha", -50.0, -1.0),
            ParamSpec::log("objective.lag_target_mmd", 1e-4, 0.1),
            ParamSpec::linear("objective.lag_target_elbo", 1.0, 200.0),
        ],
    };
    SearchSpace::new(params)
}

/// `cfg` with the tuned keys of `space` set to `point`.
pub fn apply_point(cfg: &RunConfig, space: &SearchSpace, point: &[f64]) -> Result<RunConfig> {
    let mut c = cfg.clone();
    for (p, v) in space.params.iter().zip(point) {
        c.set(&p.name, &v.to_string())?;
    }
    c.validate()?;
    Ok(c)
}

pub const HISTORY_FILE: &str = "history.jsonl";

/// Tune `cfg.objective.technique` by BO on validation NLL. Each iteration
/// trains into `out/iter-NNN`; the history in `out/history.jsonl` makes the
/// search resumable, and the winner is written to `out/best.txt`.
pub fn tune_technique(cfg: &RunConfig, iterations: usize, opts: &BoOptions) -> Result<TuneResult> {
    let space = search_space(cfg.objective.technique)?;
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out)?;
    let history_path = out.join(HISTORY_FILE);
    let history = bayesopt::load_history(&history_path)?;
    let mut iteration = history.len();
    let result = bayesopt::tune(
        |point| {
            let mut c = apply_point(cfg, &space, point)?;
            c.out = iter_dir(&out, iteration);
            iteration += 1;
            let (_, report) = run_training(&c)?;
            Ok(report.nll_mean)
        },
        &space,
        iterations,
        cfg.seed,
        opts,
        history,
        |obs| bayesopt::append_history(&history_path, obs),
    )?;
    let best = apply_point(cfg, &space, &result.best_point)?;
    best.save(&out.join("best.txt"))?;
    Ok(result)
}

fn iter_dir(out: &Path, i: usize) -> PathBuf {
    out.join(format!("iter-{i:03}"))
}
