//! Intrinsic evaluation: importance-sampled NLL and perplexity, rate and
//! distortion, active units, accuracy gap, output sensitivity, decoding,
//! latent homotopies and edit-distance novelty.
//!
//! Every per-sentence quantity draws from its own stream derived from
//! `(seed, sentence index)`, so results do not depend on the worker count.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::distributions::{self, Density, DiagGaussian};
use crate::error::{contract, Error, Result};
use crate::models::{Decoding, PriorSpec, SenVae};
use crate::objectives::standard_normal;
use crate::pipeline::Batch;
use crate::seed;
use crate::tensor::{log_sum_exp, Tape, Tensor};

/// Environment variable holding the evaluation worker count.
pub const WORKERS_ENV: &str = "SENVAE_WORKERS";

pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// `f(0..n)` spread over `workers` threads, results in index order.
pub fn par_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<T>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Per-sentence importance-sampling results.
#[derive(Clone, Debug, PartialEq)]
pub struct IsEstimate {
    /// `-log p(x)` estimate.
    pub nll: f64,
    /// Mean `-log P(x | z_s)` over the importance samples.
    pub distortion: f64,
}

/// Importance-sampled `-log p(x)` with the posterior as proposal:
/// `-(logsumexp_s [log P(x|z_s) + log p(z_s) - log q(z_s|x)] - log S)`.
/// Sentence `i` uses the stream `derive(seed, i)`.
pub fn is_estimates(
    model: &SenVae,
    sentences: &[Vec<usize>],
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<IsEstimate>> {
    if samples == 0 {
        return Err(contract("importance sampling needs S >= 1"));
    }
    let prior = model.prior_density()?;
    let posteriors = model.posteriors(sentences)?;
    let group = (256 / samples).max(1);
    let groups = sentences.len().div_ceil(group);
    let per_group = par_map(groups, workers, |g| {
        let range = g * group..((g + 1) * group).min(sentences.len());
        let mut zs = Vec::with_capacity(range.len() * samples);
        let mut refs: Vec<&[usize]> = Vec::with_capacity(zs.capacity());
        for i in range.clone() {
            let mut rng = seed::rng(seed::derive(seed, i as u64));
            let noise = standard_normal(&mut rng, samples, model.latent_dim());
            for s in 0..samples {
                zs.push(posteriors[i].reparam_sample(noise.row_slice(s)));
                refs.push(&sentences[i]);
            }
        }
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let batch = Batch::from_sentences(&refs, vec![0; refs.len()]);
        let z = tape.constant(Tensor::from_rows(&zs)?);
        let nll = model.nll(&p, &z, &batch, None)?.value();
        let mut out = Vec::with_capacity(range.len());
        for (k, i) in range.enumerate() {
            let rows = k * samples..(k + 1) * samples;
            let logw: Vec<f64> = rows
                .clone()
                .map(|r| -nll.get(r, 0) + prior.log_prob(&zs[r]) - posteriors[i].log_prob(&zs[r]))
                .collect();
            let d = rows.map(|r| nll.get(r, 0)).sum::<f64>() / samples as f64;
            out.push(IsEstimate {
                nll: -(log_sum_exp(&logw) - (samples as f64).ln()),
                distortion: d,
            });
        }
        Ok(out)
    })?;
    Ok(per_group.into_iter().flatten().collect())
}

pub fn is_nll(model: &SenVae, sentence: &[usize], samples: usize, seed: u64) -> Result<f64> {
    Ok(is_estimates(model, &[sentence.to_vec()], samples, seed, 1)?[0].nll)
}

/// Rate of one posterior: closed form for the standard prior, otherwise a
/// Monte-Carlo estimate with `mc_samples` draws.
pub fn posterior_rate(
    model: &SenVae,
    prior: &dyn Density,
    q: &DiagGaussian,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    match model.prior {
        PriorSpec::Standard => distributions::kl_diag_gaussian(q, &DiagGaussian::standard(q.dim())),
        _ => Ok(distributions::mc_rate(q, prior, mc_samples, &mut seed::rng(seed))?.mean),
    }
}

/// Dimensions whose posterior-mean variance across the data exceeds
/// `threshold` (strictly). Population variance.
pub fn active_units(locs: &[Vec<f64>], threshold: f64) -> Result<usize> {
    if locs.len() < 2 {
        return Err(contract("active units need at least two data points"));
    }
    let n = locs.len() as f64;
    let d = locs[0].len();
    Ok((0..d)
        .filter(|&j| {
            let mean = locs.iter().map(|l| l[j]).sum::<f64>() / n;
            let var = locs.iter().map(|l| (l[j] - mean).powi(2)).sum::<f64>() / n;
            var > threshold
        })
        .count())
}

pub const AU_THRESHOLD: f64 = 0.01;

/// Teacher-forced softmax outputs for one code per sentence, returned as
/// per-sentence lists of per-step distributions (EOS step included).
fn output_distributions(
    model: &SenVae,
    sentences: &[&[usize]],
    zs: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let batch = Batch::from_sentences(sentences, (0..sentences.len()).collect());
    let z = tape.constant(Tensor::from_rows(zs)?);
    let logits = model.logits(&p, &z, &batch, None)?.value();
    let b = sentences.len();
    Ok((0..b)
        .map(|k| {
            (0..=sentences[k].len())
                .map(|t| {
                    let row = logits.row_slice(t * b + k);
                    let lse = log_sum_exp(row);
                    row.iter().map(|l| (l - lse).exp()).collect()
                })
                .collect()
        })
        .collect())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = j;
        }
    }
    best
}

/// Next-word argmax accuracy with a posterior code minus the accuracy with
/// a prior code, pooled over tokens and averaged over `repeats`.
pub fn acc_gap(
    model: &SenVae,
    sentences: &[Vec<usize>],
    repeats: usize,
    seed: u64,
    workers: usize,
) -> Result<f64> {
    if sentences.is_empty() || repeats == 0 {
        return Err(contract("accuracy gap needs sentences and at least one repeat"));
    }
    let prior = model.prior_density()?;
    let posteriors = model.posteriors(sentences)?;
    let chunk = 64;
    let chunks = sentences.len().div_ceil(chunk);
    let counts = par_map(chunks * repeats, workers, |job| {
        let (rep, c) = (job / chunks, job % chunks);
        let range = c * chunk..((c + 1) * chunk).min(sentences.len());
        let mut zq = Vec::new();
        let mut zp = Vec::new();
        for i in range.clone() {
            let mut rng = seed::rng(seed::derive(seed::derive(seed, rep as u64), i as u64));
            zq.push(posteriors[i].sample(&mut rng));
            zp.push(prior.sample(&mut rng));
        }
        let refs: Vec<&[usize]> = range.clone().map(|i| sentences[i].as_slice()).collect();
        let dq = output_distributions(model, &refs, &zq)?;
        let dp = output_distributions(model, &refs, &zp)?;
        let (mut hit_q, mut hit_p, mut total) = (0usize, 0usize, 0usize);
        for (k, s) in refs.iter().enumerate() {
            for t in 0..=s.len() {
                let gold = if t < s.len() { s[t] } else { crate::pipeline::EOS };
                hit_q += usize::from(argmax(&dq[k][t]) == gold);
                hit_p += usize::from(argmax(&dp[k][t]) == gold);
                total += 1;
            }
        }
        Ok((hit_q, hit_p, total))
    })?;
    let mut gap = 0.0;
    for rep in 0..repeats {
        let (q, p, t) = counts[rep * chunks..(rep + 1) * chunks]
            .iter()
            .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
        gap += (q as f64 - p as f64) / t as f64;
    }
    Ok(gap / repeats as f64)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// Per-step mean of `JS(pi || eta) - JS(pi || pi')`, where `pi`, `pi'` are
/// decoder outputs under two posterior codes and `eta` under a prior code.
/// All sentences must share one length.
pub fn js_sensitivity(
    model: &SenVae,
    sentences: &[Vec<usize>],
    repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let Some(first) = sentences.first() else {
        return Err(contract("sensitivity needs at least one sentence"));
    };
    if sentences.iter().any(|s| s.len() != first.len()) {
        return Err(contract("sensitivity sentences must share one length"));
    }
    if repeats == 0 {
        return Err(contract("sensitivity needs at least one repeat"));
    }
    let steps = first.len() + 1;
    let prior = model.prior_density()?;
    let posteriors = model.posteriors(sentences)?;
    let refs: Vec<&[usize]> = sentences.iter().map(Vec::as_slice).collect();
    let mut curve = vec![0.0; steps];
    for rep in 0..repeats {
        let (mut z1, mut z2, mut z0) = (Vec::new(), Vec::new(), Vec::new());
        for (i, q) in posteriors.iter().enumerate() {
            let mut rng = seed::rng(seed::derive(seed::derive(seed, rep as u64), i as u64));
            z1.push(q.sample(&mut rng));
            z2.push(q.sample(&mut rng));
            z0.push(prior.sample(&mut rng));
        }
        let (d1, d2, d0) = (
            output_distributions(model, &refs, &z1)?,
            output_distributions(model, &refs, &z2)?,
            output_distributions(model, &refs, &z0)?,
        );
        for k in 0..sentences.len() {
            for (t, c) in curve.iter_mut().enumerate() {
                *c += js_divergence(&d1[k][t], &d0[k][t]) - js_divergence(&d1[k][t], &d2[k][t]);
            }
        }
    }
    let n = (repeats * sentences.len()) as f64;
    curve.iter_mut().for_each(|c| *c /= n);
    Ok(curve)
}

/// Sentences of the most frequent length (the longest among ties).
pub fn modal_length_subset(sentences: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut counts = std::collections::BTreeMap::new();
    for s in sentences {
        *counts.entry(s.len()).or_insert(0usize) += 1;
    }
    let Some((&len, _)) = counts.iter().max_by_key(|&(l, c)| (*c, *l)) else {
        return Vec::new();
    };
    sentences.iter().filter(|s| s.len() == len).cloned().collect()
}

pub fn decode_greedy(model: &SenVae, z: &[f64], max_len: usize) -> Result<Vec<usize>> {
    let mut rng = seed::rng(0);
    Ok(model.generate(&[z.to_vec()], Decoding::Greedy, max_len, &mut rng)?.remove(0))
}

pub fn ancestral_sample(model: &SenVae, z: &[f64], seed: u64, max_len: usize) -> Result<Vec<usize>> {
    let mut rng = seed::rng(seed);
    Ok(model.generate(&[z.to_vec()], Decoding::Ancestral, max_len, &mut rng)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomotopyResult {
    pub endpoints: (Vec<usize>, Vec<usize>),
    pub points: Vec<Vec<f64>>,
    pub decoded: Vec<Vec<usize>>,
}

/// Greedy decodes of `T` evenly spaced points from `z_a` to `z_b`.
pub fn homotopy_between(
    model: &SenVae,
    z_a: &[f64],
    z_b: &[f64],
    steps: usize,
    max_len: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    if steps < 2 {
        return Err(contract("a homotopy needs at least two points"));
    }
    let points: Vec<Vec<f64>> = (0..steps)
        .map(|t| {
            let w = t as f64 / (steps - 1) as f64;
            z_a.iter().zip(z_b).map(|(a, b)| (1.0 - w) * a + w * b).collect()
        })
        .collect();
    let decoded = model.generate(&points, Decoding::Greedy, max_len, &mut seed::rng(0))?;
    Ok((points, decoded))
}

/// Interpolate between one posterior sample of each endpoint sentence.
pub fn homotopy(
    model: &SenVae,
    x_a: &[usize],
    x_b: &[usize],
    steps: usize,
    seed: u64,
    max_len: usize,
) -> Result<HomotopyResult> {
    let qs = model.posteriors(&[x_a.to_vec(), x_b.to_vec()])?;
    let mut rng = seed::rng(seed);
    let z_a = qs[0].sample(&mut rng);
    let z_b = qs[1].sample(&mut rng);
    let (points, decoded) = homotopy_between(model, &z_a, &z_b, steps, max_len)?;
    Ok(HomotopyResult {
        endpoints: (x_a.to_vec(), x_b.to_vec()),
        points,
        decoded,
    })
}

/// Word-level Levenshtein distance with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance of `hyp` against `reference`, normalised by the reference
/// length and clamped to `[0, 1]` (no block shifts).
pub fn ter<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 0.0 } else { 1.0 };
    }
    (levenshtein(hyp, reference) as f64 / reference.len() as f64).min(1.0)
}

/// Closest corpus sentence by [`ter`]; the first one wins ties.
pub fn ter_nearest_neighbor<T: PartialEq>(sentence: &[T], corpus: &[Vec<T>]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in corpus.iter().enumerate() {
        let d = ter(sentence, c);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
            if d == 0.0 {
                break;
            }
        }
    }
    best.ok_or_else(|| contract("nearest neighbour needs a non-empty corpus"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Importance samples per sentence.
    pub samples: usize,
    /// Monte-Carlo samples for the rate under mixture priors.
    pub rate_samples: usize,
    /// Repeats for the accuracy gap and sensitivity curve.
    pub repeats: usize,
    pub seed: u64,
    pub workers: usize,
    /// Skip the accuracy gap and sensitivity curve.
    pub intrinsic_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 1000,
            rate_samples: 1024,
            repeats: 10,
            seed: 0,
            workers: 1,
            intrinsic_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sentences: usize,
    /// Predicted tokens, one EOS per sentence included.
    pub tokens: usize,
    pub words: usize,
    pub samples: usize,
    pub nll_total: f64,
    pub nll_mean: f64,
    /// `exp(nll_total / tokens)`.
    pub ppl: f64,
    /// `exp(nll_total / words)`, the convention that drops EOS.
    pub ppl_no_eos: f64,
    pub distortion: f64,
    pub rate: f64,
    pub active_units: usize,
    pub acc_gap: Option<f64>,
    pub js_curve: Option<Vec<f64>>,
}

pub fn evaluate(model: &SenVae, sentences: &[Vec<usize>], opts: &EvalOptions) -> Result<EvalReport> {
    if sentences.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let est = is_estimates(model, sentences, opts.samples, opts.seed, opts.workers)?;
    let n = sentences.len();
    let words: usize = sentences.iter().map(Vec::len).sum();
    let tokens = words + n;
    let nll_total: f64 = est.iter().map(|e| e.nll).sum();
    let prior = model.prior_density()?;
    let posteriors = model.posteriors(sentences)?;
    let rate_seed = seed::derive(opts.seed, u64::MAX);
    let rates = par_map(n, opts.workers, |i| {
        posterior_rate(model, &prior, &posteriors[i], opts.rate_samples, seed::derive(rate_seed, i as u64))
    })?;
    let locs: Vec<Vec<f64>> = posteriors.iter().map(|q| q.loc().to_vec()).collect();
    let au = if n >= 2 { active_units(&locs, AU_THRESHOLD)? } else { 0 };
    let (gap, js) = if opts.intrinsic_only {
        (None, None)
    } else {
        let gap = acc_gap(model, sentences, opts.repeats, seed::derive(opts.seed, 1), opts.workers)?;
        let subset = modal_length_subset(sentences);
        let js = js_sensitivity(model, &subset, opts.repeats, seed::derive(opts.seed, 2))?;
        (Some(gap), Some(js))
    };
    Ok(EvalReport {
        sentences: n,
        tokens,
        words,
        samples: opts.samples,
        nll_total,
        nll_mean: nll_total / n as f64,
        ppl: (nll_total / tokens as f64).exp(),
        ppl_no_eos: (nll_total / words.max(1) as f64).exp(),
        distortion: est.iter().map(|e| e.distortion).sum::<f64>() / n as f64,
        rate: rates.iter().sum::<f64>() / n as f64,
        active_units: au,
        acc_gap: gap,
        js_curve: js,
    })
}
