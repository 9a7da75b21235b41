//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stderr (so it shows without `--nocapture`) and then
//! asserts. Trained toy models are shared between tests through `OnceLock`s.

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::Rng;

use senvae::bayesopt::{tune, BoOptions, ParamSpec, SearchSpace};
use senvae::config::RunConfig;
use senvae::distributions::{
    self, kl_standard_rows, Density, log_prob_rows, mixture_log_prob_rows, reparam, DiagGaussian, KernelConfig, McEstimate,
};
use senvae::evaluation::{self, AU_THRESHOLD};
use senvae::models::{gru_cell, Decoding, PriorSpec, SenVae};
use senvae::objectives::{standard_normal, Controller, LossBreakdown, ObjectiveConfig, Technique};
use senvae::pipeline::Batch;
use senvae::seed::{self, SeededRng};
use senvae::tensor::{gradcheck, Tape, Tensor, TensorError};
use senvae::train::{self, Datasets, TrainOutcome};

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn to_tensor_err(e: senvae::Error) -> TensorError {
    match e {
        senvae::Error::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let e = McEstimate::from_samples(xs);
    (e.mean, e.std_err)
}

// ---- shared toy-corpus training -----------------------------------------

fn toy_data() -> &'static Datasets {
    static DATA: OnceLock<Datasets> = OnceLock::new();
    DATA.get_or_init(|| Datasets::load(&RunConfig::toy()).expect("toy corpus"))
}

/// Training is serialised: the runs are CPU bound and share one corpus.
static TRAIN_LOCK: Mutex<()> = Mutex::new(());

fn toy_config(technique: &str, rate: f64, seed: u64, prior: &str, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.set("objective.technique", technique).unwrap();
    cfg.set("objective.r", &rate.to_string()).unwrap();
    cfg.set("prior.kind", prior).unwrap();
    cfg.prior_components = 10;
    cfg.seed = seed;
    cfg.train.max_epochs = epochs;
    cfg.train.valid_samples = 16;
    cfg
}

fn run(cfg: &RunConfig) -> TrainOutcome {
    let _guard = TRAIN_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    let t0 = Instant::now();
    let out = train::train(cfg, toy_data(), None, &mut |_| Ok(())).expect("training run");
    let _ = writeln!(
        std::io::stderr(),
        "  trained {} r={} prior={} seed={} in {:.0}s ({} epochs)",
        cfg.objective.technique.name(),
        cfg.objective.rate,
        cfg.prior.name(),
        cfg.seed,
        t0.elapsed().as_secs_f64(),
        out.metrics.iter().filter(|r| r.split == "valid").count()
    );
    out
}

fn best_valid(out: &TrainOutcome) -> &train::MetricsRow {
    out.metrics
        .iter()
        .find(|r| r.split == "valid" && r.epoch == out.best_epoch)
        .expect("validation row of the best epoch")
}

/// Vanilla ELBO trained until early stopping ends it; the epoch cap is
/// only a backstop.
fn vanilla_run() -> &'static TrainOutcome {
    static RUN: OnceLock<TrainOutcome> = OnceLock::new();
    RUN.get_or_init(|| run(&toy_config("vanilla", 5.0, 0, "standard", 150)))
}

const PRIOR_EPOCHS: usize = 15;

fn mdr5_standard_run() -> &'static TrainOutcome {
    static RUN: OnceLock<TrainOutcome> = OnceLock::new();
    RUN.get_or_init(|| run(&toy_config("mdr", 5.0, 0, "standard", PRIOR_EPOCHS)))
}

// ---- 1 -------------------------------------------------------------------

#[test]
fn c01_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let mut r = seed::rng(101);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let rand_m = |r: &mut SeededRng, n: usize, m: usize, lo: f64, hi: f64| {
        Tensor::matrix(n, m, (0..n * m).map(|_| r.random_range(lo..hi)).collect()).unwrap()
    };
    let mut record = |c: gradcheck::GradCheck| {
        worst = worst.max(c.max_rel_error());
        checks += 1;
    };
    for _ in 0..20 {
        let (b, h, i) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
        let (n, v, d, c) = (r.random_range(1..6), r.random_range(2..7), r.random_range(1..5), r.random_range(1..4));

        // GRU cell with its input projection
        let inputs = vec![
            rand_m(&mut r, b, i, -1.0, 1.0),
            rand_m(&mut r, b, h, -1.0, 1.0),
            rand_m(&mut r, i, 3 * h, -1.0, 1.0),
            rand_m(&mut r, h, 3 * h, -1.0, 1.0),
            rand_m(&mut r, 1, 3 * h, -1.0, 1.0),
            rand_m(&mut r, 1, 3 * h, -1.0, 1.0),
        ];
        let w = rand_m(&mut r, b, h, -1.0, 1.0);
        record(
            gradcheck::check(&inputs, 1e-5, |tape, x| {
                let gx = x[0].matmul(&x[2])?.add(&x[4])?;
                let out = gru_cell(&gx, &x[1], &x[3], &x[5]).map_err(to_tensor_err)?;
                Ok(out.mul(&tape.constant(w.clone()))?.sum())
            })
            .unwrap(),
        );

        // masked softmax cross-entropy
        let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..v)).collect();
        let mask: Vec<f64> = (0..n).map(|k| if k == 0 || r.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
        record(
            gradcheck::check(&[rand_m(&mut r, n, v, -2.0, 2.0)], 1e-5, |_, x| {
                Ok(x[0].softmax_xent(&targets, &mask)?.sum())
            })
            .unwrap(),
        );

        // closed-form KL to the standard normal
        let (loc, scale) = (rand_m(&mut r, n, d, -1.5, 1.5), rand_m(&mut r, n, d, 0.3, 2.0));
        record(
            gradcheck::check(&[loc.clone(), scale.clone()], 1e-5, |_, x| {
                Ok(kl_standard_rows(&x[0], &x[1]).map_err(to_tensor_err)?.sum())
            })
            .unwrap(),
        );

        // mixture log-density in z and in the component parameters
        let (z, mloc, mscale) = (rand_m(&mut r, n, d, -2.0, 2.0), rand_m(&mut r, c, d, -1.0, 1.0), rand_m(&mut r, c, d, 0.5, 1.5));
        record(
            gradcheck::check(&[z, mloc.clone(), mscale.clone()], 1e-5, |_, x| {
                Ok(mixture_log_prob_rows(&x[0], &x[1], &x[2]).map_err(to_tensor_err)?.sum())
            })
            .unwrap(),
        );

        // reparameterised single-sample rate log q(z) - log p(z), z = loc + scale * eps
        let noise = rand_m(&mut r, n, d, -2.0, 2.0);
        record(
            gradcheck::check(&[loc, scale, mloc, mscale], 1e-5, |_, x| {
                let z = reparam(&x[0], &x[1], &noise).map_err(to_tensor_err)?;
                let lq = log_prob_rows(&z, &x[0], &x[1]).map_err(to_tensor_err)?;
                let lp = mixture_log_prob_rows(&z, &x[2], &x[3]).map_err(to_tensor_err)?;
                Ok(lq.sub(&lp)?.sum())
            })
            .unwrap(),
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 60.0;
    report(1, pass, &format!("{checks} checks over 20 configurations, max rel err {worst:.2e}, {secs:.1}s"));
    assert!(pass);
}

// ---- 2 -------------------------------------------------------------------

fn max_len() -> usize {
    toy_data().cap + 10
}

#[test]
fn c02_vanilla_collapses() {
    let t0 = Instant::now();
    let out = vanilla_run();
    let rate = best_valid(out).rate;
    let model = &out.checkpoint.model;
    let zs = model.sample_prior(20, &mut seed::rng(202)).unwrap();
    let decoded = model.generate(&zs, Decoding::Greedy, max_len(), &mut seed::rng(0)).unwrap();
    let mut unique = decoded.clone();
    unique.sort();
    unique.dedup();
    let epochs = out.metrics.iter().filter(|r| r.split == "valid").count();
    let converged = epochs < 150;
    let secs = t0.elapsed().as_secs_f64();
    let pass = converged && rate < 0.5 && unique.len() == 1 && secs < 900.0;
    report(
        2,
        pass,
        &format!(
            "stopped after {epochs} epochs, validation R {rate:.3} nats, {} unique greedy decodes of 20 prior codes, {secs:.0}s",
            unique.len()
        ),
    );
    assert!(pass);
}

// ---- 3 -------------------------------------------------------------------

#[test]
fn c03_rate_targeting() {
    let t0 = Instant::now();
    let mdr = mdr5_standard_run();
    let (mdr_rate, mdr_au) = (best_valid(mdr).rate, best_valid(mdr).au.unwrap());
    let t_mdr = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let fb = run(&toy_config("fb", 5.0, 0, "standard", PRIOR_EPOCHS));
    let fb_rate = best_valid(&fb).rate;
    let t_fb = t1.elapsed().as_secs_f64();
    let pass = (mdr_rate - 5.0).abs() <= 0.75 && mdr_au >= 1 && fb_rate >= 4.25;
    report(
        3,
        pass,
        &format!("MDR R_val {mdr_rate:.3} AU {mdr_au} ({t_mdr:.0}s); FB R_val {fb_rate:.3} ({t_fb:.0}s)"),
    );
    assert!(pass);
}

// ---- 4 -------------------------------------------------------------------

struct Dynamics {
    first_reach: Option<u64>,
    end_gap: f64,
}

fn dynamics(technique: &str, seed: u64) -> Dynamics {
    let target = 20.0;
    let mut cfg = toy_config(technique, target, seed, "standard", 10);
    cfg.train.min_epochs = cfg.train.max_epochs;
    let out = run(&cfg);
    let first_reach = out.metrics.iter().find(|r| r.split == "step" && r.rate >= 0.9 * target).map(|r| r.step);
    let last = out.metrics.iter().rev().find(|r| r.split == "valid").unwrap();
    Dynamics { first_reach, end_gap: (last.rate - target).abs() }
}

#[test]
fn c04_mdr_reaches_high_targets_faster_than_fb() {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..4 {
        let mdr = dynamics("mdr", seed);
        let fb = dynamics("fb", seed);
        let faster = match (mdr.first_reach, fb.first_reach) {
            (Some(m), Some(f)) => m < f,
            (Some(_), None) => true,
            _ => false,
        };
        let closer = mdr.end_gap < fb.end_gap;
        if faster && closer {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: steps to 0.9r MDR {:?} FB {:?}, end |R-r| MDR {:.2} FB {:.2}",
            mdr.first_reach, fb.first_reach, mdr.end_gap, fb.end_gap
        ));
    }
    let pass = wins >= 3;
    report(4, pass, &format!("{wins}/4 seeds; {}", lines.join("; ")));
    assert!(pass);
}

// ---- 5 -------------------------------------------------------------------

#[test]
fn c05_sfb_recovers_mdr() {
    let t0 = Instant::now();
    let (rho, target) = (0.05, 5.0);
    let mut mdr = Controller::new(ObjectiveConfig { rate: target, dual_lr: rho, ..ObjectiveConfig::new(Technique::Mdr) }).unwrap();
    let mut sfb = Controller::new(ObjectiveConfig {
        rate: target,
        sfb_gamma: 1.0,
        sfb_epsilon: 1.0,
        ..ObjectiveConfig::new(Technique::SoftFreeBits)
    })
    .unwrap();
    // beta mirrors 1 - u, which is only projected from above
    sfb.config.sfb_beta_min = f64::NEG_INFINITY;
    sfb.state.beta = 1.0;
    let mut r = seed::rng(505);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let rate = target + r.random_range(-3.0..3.0);
        sfb.config.sfb_omega = rho * (rate - target).abs();
        let b = LossBreakdown { distortion: 0.0, rate, mmd: None, loss: 0.0 };
        mdr.end_step(&b);
        sfb.end_step(&b);
        worst = worst.max((sfb.state.beta - (1.0 - mdr.state.u)).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && secs < 1.0;
    report(5, pass, &format!("max |beta - (1 - u)| = {worst:.1e} over 10^4 steps, {secs:.3}s"));
    assert!(pass);
}

// ---- 6 -------------------------------------------------------------------

#[test]
fn c06_mc_rate_matches_closed_form_kl() {
    let t0 = Instant::now();
    let mut r = seed::rng(606);
    let mut worst_z: f64 = 0.0;
    let mut inside = 0;
    for _ in 0..50 {
        let d = r.random_range(1..9);
        let loc: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let scale: Vec<f64> = (0..d).map(|_| r.random_range(0.2..2.0)).collect();
        let q = DiagGaussian::new(loc.clone(), scale.clone()).unwrap();
        // oracle: textbook per-dimension formula
        let kl: f64 = loc.iter().zip(&scale).map(|(m, s)| 0.5 * (m * m + s * s - 1.0) - s.ln()).sum();
        let est = distributions::mc_rate(&q, &DiagGaussian::standard(d), 100_000, &mut r).unwrap();
        let z = (est.mean - kl).abs() / est.std_err;
        worst_z = worst_z.max(z);
        if z <= 3.0 {
            inside += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = inside == 50 && secs < 30.0;
    report(6, pass, &format!("{inside}/50 posteriors within 3 SE (max {worst_z:.2} SE), {secs:.1}s"));
    assert!(pass);
}

// ---- 7 -------------------------------------------------------------------

#[test]
fn c07_importance_sampling_bound() {
    let model = &mdr5_standard_run().checkpoint.model;
    let sents: Vec<Vec<usize>> = toy_data().valid.iter().take(200).cloned().collect();
    assert_eq!(sents.len(), 200);
    let s = 707;
    let one = evaluation::is_estimates(model, &sents, 1, s, 1).unwrap();
    let many = evaluation::is_estimates(model, &sents, 1000, s, 1).unwrap();
    let diffs: Vec<f64> = one.iter().zip(&many).map(|(a, b)| b.nll - a.nll).collect();
    let (mean_diff, se) = mean_se(&diffs);
    let tighter = mean_diff <= 3.0 * se;

    // oracle for S = 1: the single-sample ELBO rebuilt from the same noise
    let prior = model.prior_density().unwrap();
    let qs = model.posteriors(&sents).unwrap();
    let mut exact = 0;
    for (i, x) in sents.iter().enumerate() {
        let noise = standard_normal(&mut seed::rng(seed::derive(s, i as u64)), 1, model.latent_dim());
        let z = qs[i].reparam_sample(noise.row_slice(0));
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let b = Batch::from_sentences(&[x.as_slice()], vec![0]);
        let d = model.nll(&p, &tape.constant(Tensor::row(z.clone())), &b, None).unwrap().item();
        let elbo = -d + prior.log_prob(&z) - qs[i].log_prob(&z);
        if one[i].nll == -elbo {
            exact += 1;
        }
    }
    let mean_one = one.iter().map(|e| e.nll).sum::<f64>() / 200.0;
    let mean_many = many.iter().map(|e| e.nll).sum::<f64>() / 200.0;
    let pass = tighter && exact == sents.len();
    report(
        7,
        pass,
        &format!(
            "mean NLL S=1 {mean_one:.3}, S=1000 {mean_many:.3} (diff {mean_diff:.3} +- {se:.3}); S=1 equals -ELBO exactly for {exact}/200"
        ),
    );
    assert!(pass);
}

// ---- 8 -------------------------------------------------------------------

fn gaussian_sample(r: &mut SeededRng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    let g = DiagGaussian::new(vec![shift; d], vec![1.0; d]).unwrap();
    (0..n).map(|_| g.sample(r)).collect()
}

#[test]
fn c08_mmd_sanity() {
    let mut r = seed::rng(808);
    let k = KernelConfig::rbf(1.0).unwrap();
    let (mut same, mut apart) = (Vec::new(), Vec::new());
    let mut symmetric = true;
    for _ in 0..100 {
        let (x, y) = (gaussian_sample(&mut r, 50, 3, 0.0), gaussian_sample(&mut r, 50, 3, 0.0));
        let w = gaussian_sample(&mut r, 50, 3, 1.0);
        let s = distributions::mmd(&x, &y, &k).unwrap();
        let a = distributions::mmd(&x, &w, &k).unwrap();
        symmetric &= s == distributions::mmd(&y, &x, &k).unwrap() && a == distributions::mmd(&w, &x, &k).unwrap();
        same.push(s);
        apart.push(a);
    }
    let (ms, ss) = mean_se(&same);
    let (ma, sa) = mean_se(&apart);
    let pass = ms.abs() <= 3.0 * ss && ma > 5.0 * sa && symmetric;
    report(
        8,
        pass,
        &format!("same {ms:.2e} +- {ss:.1e}; shifted {ma:.3e} +- {sa:.1e}; symmetric {symmetric}"),
    );
    assert!(pass);
}

// ---- 9 -------------------------------------------------------------------

fn branin(p: &[f64]) -> f64 {
    use std::f64::consts::PI;
    let (x1, x2) = (p[0], p[1]);
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

#[test]
fn c09_bayesian_optimisation() {
    let t0 = Instant::now();
    let space = SearchSpace::new(vec![ParamSpec::linear("x1", -5.0, 10.0), ParamSpec::linear("x2", 0.0, 15.0)]).unwrap();
    let mut hits = 0;
    for seed in 0..10 {
        let r = tune(|p| Ok(branin(p)), &space, 25, seed, &BoOptions::default(), vec![], |_| Ok(())).unwrap();
        if r.best_value <= 0.5 {
            hits += 1;
        }
    }
    let line = SearchSpace::new(vec![ParamSpec::linear("x", -2.0, 3.0)]).unwrap();
    let q = tune(|p| Ok((p[0] - 0.731).powi(2)), &line, 15, 9, &BoOptions::default(), vec![], |_| Ok(())).unwrap();
    let q_err = (q.best_point[0] - 0.731).abs();
    let secs = t0.elapsed().as_secs_f64();
    let pass = hits >= 9 && q_err <= 0.05 && secs < 120.0;
    report(9, pass, &format!("Branin <= 0.5 for {hits}/10 seeds; quadratic argmin error {q_err:.4}; {secs:.1}s"));
    assert!(pass);
}

// ---- 10 ------------------------------------------------------------------

/// VampPrior whose pseudo inputs are the embeddings of real token sequences,
/// so each component can be recomputed through the ordinary encoder.
#[test]
fn c10_prior_mechanism() {
    let data = toy_data();
    let mut pairs = Vec::new();
    let mut wins = 0;
    for seed in 0..4 {
        let std_au = if seed == 0 {
            best_valid(mdr5_standard_run()).au.unwrap()
        } else {
            best_valid(&run(&toy_config("mdr", 5.0, seed, "standard", PRIOR_EPOCHS))).au.unwrap()
        };
        let mog_au = best_valid(&run(&toy_config("mdr", 5.0, seed, "mog", PRIOR_EPOCHS))).au.unwrap();
        if mog_au >= std_au {
            wins += 1;
        }
        pairs.push(format!("{mog_au}>={std_au}"));
    }

    let cfg = toy_config("vanilla", 5.0, 0, "standard", 1).model;
    let lengths = vec![3, 1, 4];
    let mut m = SenVae::new(&cfg, data.vocab.len(), PriorSpec::Vamp { lengths: lengths.clone() }, None, 10).unwrap();
    let mut r = seed::rng(1010);
    let tokens: Vec<Vec<usize>> =
        lengths.iter().map(|&l| (0..l).map(|_| r.random_range(4..data.vocab.len())).collect()).collect();
    let emb = m.params.get(m.params.find("emb").unwrap()).clone();
    let inputs_id = m.params.find("prior.vamp.inputs").unwrap();
    let t_max = *lengths.iter().max().unwrap();
    let c = lengths.len();
    let mut block = Tensor::zeros(&[t_max * c, cfg.emb_dim]);
    for (k, seq) in tokens.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let row = t * c + k;
            block.data_mut()[row * cfg.emb_dim..(row + 1) * cfg.emb_dim].copy_from_slice(emb.row_slice(tok));
        }
    }
    *m.params.get_mut(inputs_id) = block;
    let comps = m.posteriors(&tokens).unwrap();
    let prior = m.prior_density().unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| r.random_range(-3.0..3.0)).collect();
        let oracle = (comps.iter().map(|q| q.log_prob(&z).exp()).sum::<f64>() / c as f64).ln();
        let tape = Tape::new();
        let p = m.params.bind_frozen(&tape);
        let on_tape = m.prior_log_prob(&p, &tape.constant(Tensor::row(z.clone()))).unwrap().item();
        let numeric = prior.log_prob(&z);
        worst = worst.max((on_tape - oracle).abs()).max((numeric - oracle).abs());
    }
    let pass = wins >= 3 && worst <= 1e-10;
    report(
        10,
        pass,
        &format!("MoG AU >= standard AU in {wins}/4 pairs [{}]; vamp density max abs err {worst:.1e}", pairs.join(", ")),
    );
    assert!(pass);
}

// ---- 11 ------------------------------------------------------------------

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for a in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Full-table Levenshtein distance.
fn edit_distance(a: &[u8], b: &[u8]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

#[test]
fn c11_diagnostic_oracles() {
    let mut r = seed::rng(1111);
    let mut au_ok = true;
    for _ in 0..20 {
        let (n, d) = (r.random_range(2..40), r.random_range(1..8));
        let spread: Vec<f64> = (0..d).map(|_| [0.0, 0.05, 0.09, 0.12, 1.0][r.random_range(0..5)]).collect();
        let locs: Vec<Vec<f64>> =
            (0..n).map(|_| spread.iter().map(|s| r.random_range(-1.0..1.0) * s + 0.3).collect()).collect();
        let brute = (0..d)
            .filter(|&j| {
                let col: Vec<f64> = locs.iter().map(|l| l[j]).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64 > AU_THRESHOLD
            })
            .count();
        au_ok &= evaluation::active_units(&locs, AU_THRESHOLD).unwrap() == brute;
    }

    let seqs = all_sequences(6, 3);
    let mut ter_mismatch = 0usize;
    for a in &seqs {
        for b in &seqs {
            let want = if b.is_empty() {
                if a.is_empty() { 0.0 } else { 1.0 }
            } else {
                (edit_distance(a, b) as f64 / b.len() as f64).min(1.0)
            };
            if evaluation::ter(a, b) != want {
                ter_mismatch += 1;
            }
        }
    }

    let collapsed = &vanilla_run().checkpoint.model;
    let subset = evaluation::modal_length_subset(&toy_data().valid);
    let curve = evaluation::js_sensitivity(collapsed, &subset, 10, 1112).unwrap();
    let js_mean = curve.iter().sum::<f64>() / curve.len() as f64;

    let pass = au_ok && ter_mismatch == 0 && js_mean.abs() < 0.01;
    report(
        11,
        pass,
        &format!(
            "AU brute force agrees {au_ok}; TER mismatches {ter_mismatch} of {} pairs; collapsed JS curve mean {js_mean:.2e}",
            seqs.len() * seqs.len()
        ),
    );
    assert!(pass);
}

// ---- 12 ------------------------------------------------------------------

#[test]
fn c12_default_config_values() {
    let text = RunConfig::default().to_text();
    let want = [
        "optim.lr = 0.001",
        "optim.batch_size = 64",
        "model.dropout = 0.4",
        "optim.clip = 1.5",
        "optim.beta1 = 0.9",
        "optim.beta2 = 0.999",
    ];
    let missing: Vec<&str> = want.iter().copied().filter(|w| !text.lines().any(|l| l == *w)).collect();
    let pass = missing.is_empty();
    report(12, pass, &if pass { "all six defaults serialised exactly".to_string() } else { format!("missing {missing:?}") });
    assert!(pass);
}
