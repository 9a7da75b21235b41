//! Gaussian-process Bayesian optimisation for hyperparameter search:
//! Matérn-5/2 ARD surrogate, expected improvement, Latin-hypercube warm-up,
//! Halton candidates with local polish, and a resumable serial tuner.
//!
//! All GP work happens in the unit box with standardised observations.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{contract, Error, Result};
use crate::seed::{self, SeededRng};

const SQRT5: f64 = 2.236_067_977_499_79;

/// Matérn-5/2 kernel with one lengthscale per input dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matern52 {
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl Matern52 {
    pub fn new(signal_var: f64, lengthscales: Vec<f64>, noise_var: f64) -> Result<Self> {
        if !(signal_var > 0.0) || !(noise_var >= 0.0) || lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(contract("kernel needs positive variance and lengthscales"));
        }
        Ok(Self { signal_var, lengthscales, noise_var })
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Scaled distance `sqrt(sum_d ((a_d - b_d) / l_d)^2)`.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = self.distance(a, b);
        self.signal_var * (1.0 + SQRT5 * d + 5.0 * d * d / 3.0) * (-SQRT5 * d).exp()
    }

    fn to_log(&self) -> Vec<f64> {
        let mut t = vec![self.signal_var.ln()];
        t.extend(self.lengthscales.iter().map(|l| l.ln()));
        t.push(self.noise_var.ln());
        t
    }

    fn from_log(theta: &[f64]) -> Self {
        let d = theta.len() - 2;
        Self {
            signal_var: theta[0].exp(),
            lengthscales: theta[1..=d].iter().map(|t| t.exp()).collect(),
            noise_var: theta[d + 1].exp(),
        }
    }
}

/// Box bounds on the log hyperparameters for standardised data in the unit box.
fn log_bounds(dim: usize) -> Vec<(f64, f64)> {
    let mut b = vec![(1e-4f64.ln(), 20f64.ln())];
    b.extend(std::iter::repeat_n((1e-2f64.ln(), 10f64.ln()), dim));
    b.push((1e-6f64.ln(), 1f64.ln()));
    b
}

fn clamp_to(theta: &mut [f64], bounds: &[(f64, f64)]) {
    for (t, (lo, hi)) in theta.iter_mut().zip(bounds) {
        *t = t.clamp(*lo, *hi);
    }
}

const MAX_JITTER_STEPS: usize = 10;

fn kernel_matrix(kernel: &Matern52, x: &[Vec<f64>]) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = kernel.signal_var + kernel.noise_var;
        for j in 0..i {
            let v = kernel.eval(&x[i], &x[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + noise I`, adding diagonal jitter on failure.
fn factor(kernel: &Matern52, x: &[Vec<f64>]) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let k = kernel_matrix(kernel, x);
    let mut jitter = 0.0;
    for step in 0..=MAX_JITTER_STEPS {
        let mut kj = k.clone();
        for i in 0..x.len() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, jitter));
        }
        jitter = kernel.signal_var * 1e-10 * 10f64.powi(step as i32);
    }
    let diag = k.diagonal();
    Err(Error::Numerical(format!(
        "kernel matrix not positive definite after jitter {jitter:.3e} \
         ({} points, diagonal in [{:.3e}, {:.3e}], signal {:.3e}, noise {:.3e})",
        x.len(),
        diag.min(),
        diag.max(),
        kernel.signal_var,
        kernel.noise_var
    )))
}

/// GP conditioned on observations in the unit box.
#[derive(Clone, Debug)]
pub struct GpSurrogate {
    pub kernel: Matern52,
    x: Vec<Vec<f64>>,
    y: DVector<f64>,
    y_mean: f64,
    y_scale: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    pub jitter: f64,
}

/// Zero-mean, unit-variance copy of `y`, with the mean and scale used.
pub fn standardize(y: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 };
    (y.iter().map(|v| (v - mean) / scale).collect(), mean, scale)
}

impl GpSurrogate {
    /// Condition on `x` (unit box) and raw observations `y`.
    pub fn new(kernel: Matern52, x: Vec<Vec<f64>>, y: &[f64]) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(contract("GP needs matching, non-empty inputs and observations"));
        }
        if x.iter().any(|p| p.len() != kernel.dim()) {
            return Err(contract("input dimension differs from kernel dimension"));
        }
        let (ys, y_mean, y_scale) = standardize(y);
        let y = DVector::from_vec(ys);
        let (chol, jitter) = factor(&kernel, &x)?;
        let alpha = chol.solve(&y);
        Ok(Self { kernel, x, y, y_mean, y_scale, chol, alpha, jitter })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    /// Observations in standardised units.
    pub fn standardized_y(&self) -> &[f64] {
        self.y.as_slice()
    }

    pub fn to_standard(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_scale
    }

    /// Latent-function posterior `(mean, variance)` in standardised units.
    pub fn posterior_standardized(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| self.kernel.eval(x, xi)));
        let mean = k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).expect("triangular factor");
        (mean, (self.kernel.signal_var - v.norm_squared()).max(0.0))
    }

    /// Log marginal likelihood of the standardised observations.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.x.len() as f64;
        let logdet: f64 = self.chol.l().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * self.y.dot(&self.alpha) - logdet - 0.5 * n * (2.0 * PI).ln()
    }

    /// Gradient of [`Self::log_marginal_likelihood`] with respect to
    /// `(ln signal, ln lengthscales.., ln noise)`.
    pub fn lml_gradient(&self) -> Vec<f64> {
        let n = self.x.len();
        let d = self.kernel.dim();
        let kinv = self.chol.inverse();
        let w = &self.alpha * self.alpha.transpose() - kinv;
        let mut g = vec![0.0; d + 2];
        for i in 0..n {
            g[0] += 0.5 * w[(i, i)] * self.kernel.signal_var;
            g[d + 1] += 0.5 * w[(i, i)] * self.kernel.noise_var;
            for j in 0..i {
                let r = self.kernel.distance(&self.x[i], &self.x[j]);
                let e = (-SQRT5 * r).exp();
                let k = self.kernel.signal_var * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * e;
                let radial = self.kernel.signal_var * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e;
                // symmetric pair counted twice
                g[0] += w[(i, j)] * k;
                for (m, l) in self.kernel.lengthscales.iter().enumerate() {
                    let delta = (self.x[i][m] - self.x[j][m]) / l;
                    g[1 + m] += w[(i, j)] * radial * delta * delta;
                }
            }
        }
        g
    }
}

/// Posterior `(mean, variance)` of the latent function in the units of the
/// observations.
pub fn gp_posterior(s: &GpSurrogate, x: &[f64]) -> (f64, f64) {
    let (m, v) = s.posterior_standardized(x);
    (s.y_mean + s.y_scale * m, s.y_scale * s.y_scale * v)
}

/// Expected improvement below `best` (minimisation).
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return (best - mean).max(0.0);
    }
    let n = Normal::standard();
    let g = (best - mean) / sigma;
    ((best - mean) * n.cdf(g) + sigma * n.pdf(g)).max(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    /// Type-II maximum likelihood by multi-start projected gradient ascent.
    #[default]
    MarginalLikelihood,
    /// Slice sampling over the log hyperparameters.
    Mcmc { samples: usize, burn_in: usize },
}

impl FitMethod {
    pub fn mcmc_default() -> Self {
        FitMethod::Mcmc { samples: 10, burn_in: 100 }
    }
}

/// Result of a kernel fit: one surrogate for ML-II, several for MCMC.
#[derive(Clone, Debug)]
pub struct FittedGp {
    pub models: Vec<GpSurrogate>,
    /// Log marginal likelihood after each accepted ascent step of the
    /// winning start (empty for MCMC).
    pub trace: Vec<f64>,
}

impl FittedGp {
    /// EI averaged over the retained surrogates, standardised units.
    pub fn expected_improvement(&self, x: &[f64]) -> f64 {
        let total: f64 = self
            .models
            .iter()
            .map(|m| {
                let best = m.standardized_y().iter().copied().fold(f64::INFINITY, f64::min);
                let (mu, var) = m.posterior_standardized(x);
                expected_improvement(mu, var, best)
            })
            .sum();
        total / self.models.len() as f64
    }
}

fn lml_at(theta: &[f64], x: &[Vec<f64>], y: &[f64]) -> Option<(f64, GpSurrogate)> {
    let gp = GpSurrogate::new(Matern52::from_log(theta), x.to_vec(), y).ok()?;
    let l = gp.log_marginal_likelihood();
    l.is_finite().then_some((l, gp))
}

const ASCENT_ITERS: usize = 200;

fn ascend(theta0: Vec<f64>, x: &[Vec<f64>], y: &[f64], bounds: &[(f64, f64)]) -> Option<(f64, GpSurrogate, Vec<f64>)> {
    let mut theta = theta0;
    clamp_to(&mut theta, bounds);
    let (mut lml, mut gp) = lml_at(&theta, x, y)?;
    let mut trace = vec![lml];
    let mut step = 0.5;
    for _ in 0..ASCENT_ITERS {
        let g = gp.lml_gradient();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            break;
        }
        let mut accepted = false;
        while step > 1e-8 {
            let mut cand: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t + step * gi / norm).collect();
            clamp_to(&mut cand, bounds);
            match lml_at(&cand, x, y) {
                Some((l, next)) if l > lml => {
                    theta = cand;
                    lml = l;
                    gp = next;
                    trace.push(l);
                    step *= 1.5;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    Some((lml, gp, trace))
}

/// Univariate slice sampling (stepping out, shrinkage), one sweep over the
/// coordinates, uniform prior on the box.
fn slice_sweep(
    theta: &mut [f64],
    lml: &mut f64,
    x: &[Vec<f64>],
    y: &[f64],
    bounds: &[(f64, f64)],
    rng: &mut SeededRng,
) {
    let width = 1.0;
    for j in 0..theta.len() {
        let level = *lml + rng.random::<f64>().ln();
        let (lo_b, hi_b) = bounds[j];
        let u: f64 = rng.random();
        let mut lo = (theta[j] - width * u).max(lo_b);
        let mut hi = (lo + width).min(hi_b);
        let eval = |v: f64, th: &mut [f64]| {
            let old = th[j];
            th[j] = v;
            let l = lml_at(th, x, y).map(|p| p.0).unwrap_or(f64::NEG_INFINITY);
            th[j] = old;
            l
        };
        while lo > lo_b && eval(lo, theta) > level {
            lo = (lo - width).max(lo_b);
        }
        while hi < hi_b && eval(hi, theta) > level {
            hi = (hi + width).min(hi_b);
        }
        for _ in 0..100 {
            let v = lo + rng.random::<f64>() * (hi - lo);
            let l = eval(v, theta);
            if l > level {
                theta[j] = v;
                *lml = l;
                break;
            }
            if v < theta[j] {
                lo = v;
            } else {
                hi = v;
            }
        }
    }
}

/// Fit kernel hyperparameters to observations `y` at unit-box inputs `x`.
pub fn fit_kernel(x: &[Vec<f64>], y: &[f64], method: FitMethod, seed: u64) -> Result<FittedGp> {
    if x.len() < 2 {
        return Err(contract("kernel fitting needs at least two observations"));
    }
    let dim = x[0].len();
    let bounds = log_bounds(dim);
    let mut rng = seed::rng(seed);
    let mut starts: Vec<Vec<f64>> = [0.1, 0.3, 1.0]
        .iter()
        .map(|l| Matern52 { signal_var: 1.0, lengthscales: vec![*l; dim], noise_var: 1e-3 }.to_log())
        .collect();
    for _ in 0..2 {
        starts.push(bounds.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect());
    }
    let mut best: Option<(f64, GpSurrogate, Vec<f64>)> = None;
    for s in starts {
        if let Some(r) = ascend(s, x, y, &bounds) {
            if best.as_ref().is_none_or(|b| r.0 > b.0) {
                best = Some(r);
            }
        }
    }
    let Some((lml, gp, trace)) = best else {
        // every start failed to factor; surface the error of a plain fit
        GpSurrogate::new(Matern52::new(1.0, vec![0.3; dim], 1e-3)?, x.to_vec(), y)?;
        return Err(Error::Numerical("no kernel hyperparameters could be fitted".into()));
    };
    match method {
        FitMethod::MarginalLikelihood => Ok(FittedGp { models: vec![gp], trace }),
        FitMethod::Mcmc { samples, burn_in } => {
            if samples == 0 {
                return Err(contract("MCMC needs at least one retained sample"));
            }
            let mut theta = gp.kernel.to_log();
            let mut l = lml;
            for _ in 0..burn_in {
                slice_sweep(&mut theta, &mut l, x, y, &bounds, &mut rng);
            }
            let mut models = Vec::with_capacity(samples);
            for _ in 0..samples {
                slice_sweep(&mut theta, &mut l, x, y, &bounds, &mut rng);
                models.push(lml_at(&theta, x, y).map(|p| p.1).unwrap_or_else(|| gp.clone()));
            }
            Ok(FittedGp { models, trace: Vec::new() })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    /// Searched uniformly in log10 space.
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
    pub integer: bool,
}

impl ParamSpec {
    pub fn linear(name: &str, lower: f64, upper: f64) -> Self {
        Self { name: name.into(), lower, upper, scale: Scale::Linear, integer: false }
    }

    pub fn log(name: &str, lower: f64, upper: f64) -> Self {
        Self { name: name.into(), lower, upper, scale: Scale::Log, integer: false }
    }

    pub fn integer(name: &str, lower: f64, upper: f64) -> Self {
        Self { name: name.into(), lower, upper, scale: Scale::Linear, integer: true }
    }

    fn ends(&self) -> (f64, f64) {
        match self.scale {
            Scale::Linear => (self.lower, self.upper),
            Scale::Log => (self.lower.log10(), self.upper.log10()),
        }
    }

    pub fn to_unit(&self, v: f64) -> f64 {
        let (a, b) = self.ends();
        let t = match self.scale {
            Scale::Linear => v,
            Scale::Log => v.log10(),
        };
        ((t - a) / (b - a)).clamp(0.0, 1.0)
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        let (a, b) = self.ends();
        let t = a + u.clamp(0.0, 1.0) * (b - a);
        let v = match self.scale {
            Scale::Linear => t,
            Scale::Log => 10f64.powf(t),
        };
        let v = v.clamp(self.lower, self.upper);
        if self.integer {
            v.round().clamp(self.lower.ceil(), self.upper.floor())
        } else {
            v
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<ParamSpec>,
}

impl SearchSpace {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self> {
        let s = Self { params };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(contract("search space has no parameters"));
        }
        for p in &self.params {
            if !(p.lower < p.upper) || !p.lower.is_finite() || !p.upper.is_finite() {
                return Err(Error::Config(format!("{}: need finite lower < upper", p.name)));
            }
            if p.scale == Scale::Log && p.lower <= 0.0 {
                return Err(Error::Config(format!("{}: log scale needs positive bounds", p.name)));
            }
            if p.integer && p.lower.ceil() > p.upper.floor() {
                return Err(Error::Config(format!("{}: no integer inside the bounds", p.name)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn to_unit(&self, point: &[f64]) -> Vec<f64> {
        self.params.iter().zip(point).map(|(p, v)| p.to_unit(*v)).collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.params.iter().zip(u).map(|(p, v)| p.from_unit(*v)).collect()
    }
}

/// `n` points of a seeded Latin hypercube in `[0, 1]^dim`.
pub fn latin_hypercube(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed);
    let mut pts = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, s) in strata.into_iter().enumerate() {
            pts[i][d] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Halton points `1..=n` with a seeded Cranley-Patterson rotation.
pub fn halton(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "Halton sequence supports up to 16 dimensions");
    let mut rng = seed::rng(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random()).collect();
    (1..=n as u64)
        .map(|i| (0..dim).map(|d| (radical_inverse(i, PRIMES[d]) + shift[d]).fract()).collect())
        .collect()
}

/// One tuning step's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub iteration: usize,
    pub point: Vec<f64>,
    /// `None` when the objective failed.
    pub value: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoOptions {
    pub initial_points: usize,
    pub candidates: usize,
    pub polish: usize,
    pub fit: FitMethod,
}

impl Default for BoOptions {
    fn default() -> Self {
        Self { initial_points: 5, candidates: 4096, polish: 8, fit: FitMethod::MarginalLikelihood }
    }
}

/// Values used for fitting: failures become the worst success plus one
/// standard deviation of the successes.
pub fn effective_values(history: &[Observation]) -> Option<Vec<f64>> {
    let ok: Vec<f64> = history.iter().filter_map(|o| o.value).collect();
    if ok.is_empty() {
        return None;
    }
    let worst = ok.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    let std = (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ok.len() as f64).sqrt();
    Some(history.iter().map(|o| o.value.unwrap_or(worst + std)).collect())
}

fn polish(gp: &FittedGp, start: &[f64]) -> (Vec<f64>, f64) {
    let mut x = start.to_vec();
    let mut best = gp.expected_improvement(&x);
    let mut step = 0.05;
    while step > 1e-4 {
        let mut improved = false;
        for d in 0..x.len() {
            for dir in [-1.0, 1.0] {
                let mut c = x.clone();
                c[d] = (c[d] + dir * step).clamp(0.0, 1.0);
                let v = gp.expected_improvement(&c);
                if v > best {
                    best = v;
                    x = c;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, best)
}

/// Next point to evaluate given the history (points in original units).
pub fn suggest_next(history: &[Observation], space: &SearchSpace, seed: u64, opts: &BoOptions) -> Result<Vec<f64>> {
    space.validate()?;
    let dim = space.dim();
    let init = opts.initial_points.max(1);
    let values = effective_values(history);
    if history.len() < init || values.is_none() || history.len() < 2 {
        let idx = history.len() % init;
        let lhs = latin_hypercube(init, dim, seed::derive(seed, 0));
        return Ok(space.from_unit(&lhs[idx]));
    }
    let y = values.expect("checked above");
    let x: Vec<Vec<f64>> = history.iter().map(|o| space.to_unit(&o.point)).collect();
    let step = history.len() as u64;
    let gp = fit_kernel(&x, &y, opts.fit, seed::derive(seed, 2 * step + 1))?;
    let cands = halton(opts.candidates.max(1), dim, seed::derive(seed, 2 * step + 2));
    let mut scored: Vec<(f64, usize)> = cands.iter().enumerate().map(|(i, c)| (gp.expected_improvement(c), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut best = (cands[scored[0].1].clone(), scored[0].0);
    for &(_, i) in scored.iter().take(opts.polish) {
        let (p, v) = polish(&gp, &cands[i]);
        if v > best.1 {
            best = (p, v);
        }
    }
    Ok(space.from_unit(&best.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub history: Vec<Observation>,
}

/// Serial BO loop. `history` may hold earlier iterations of the same run
/// (same seed and options); they are kept and the loop continues from there.
/// `on_record` sees every new observation, e.g. to append it to a file.
pub fn tune<F, R>(
    mut objective: F,
    space: &SearchSpace,
    iterations: usize,
    seed: u64,
    opts: &BoOptions,
    mut history: Vec<Observation>,
    mut on_record: R,
) -> Result<TuneResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: FnMut(&Observation) -> Result<()>,
{
    while history.len() < iterations {
        let point = suggest_next(&history, space, seed, opts)?;
        let start = Instant::now();
        let value = match objective(&point) {
            Ok(v) if v.is_finite() => Some(v),
            _ => None,
        };
        let obs = Observation { iteration: history.len(), point, value, wall_time: start.elapsed().as_secs_f64() };
        on_record(&obs)?;
        history.push(obs);
    }
    let best = history
        .iter()
        .filter_map(|o| o.value.map(|v| (v, &o.point)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let Some((best_value, best_point)) = best else {
        return Err(Error::Tuning(format!("all {} objective evaluations failed", history.len())));
    };
    Ok(TuneResult { best_point: best_point.clone(), best_value, history })
}

/// Running minimum of the successful values.
pub fn running_best(history: &[Observation]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    history
        .iter()
        .map(|o| {
            if let Some(v) = o.value {
                best = best.min(v);
            }
            best
        })
        .collect()
}

/// Read a JSON-lines history file; a missing file is an empty history.
pub fn load_history(path: &Path) -> Result<Vec<Observation>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn append_history(path: &Path, obs: &Observation) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(obs)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn k(sv: f64, ls: Vec<f64>, nv: f64) -> Matern52 {
        Matern52::new(sv, ls, nv).unwrap()
    }

    fn branin(p: &[f64]) -> f64 {
        let (x1, x2) = (p[0], p[1]);
        let b = 5.1 / (4.0 * PI * PI);
        let c = 5.0 / PI;
        let t = 1.0 / (8.0 * PI);
        (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
    }

    #[test]
    fn kernel_values() {
        let m = k(2.0, vec![0.5], 0.0);
        assert_eq!(m.eval(&[0.3], &[0.3]), 2.0);
        let d: f64 = 0.4 / 0.5;
        let want = 2.0 * (1.0 + 5f64.sqrt() * d + 5.0 * d * d / 3.0) * (-(5f64.sqrt()) * d).exp();
        assert!((m.eval(&[0.1], &[0.5]) - want).abs() < 1e-15);
        assert!(Matern52::new(1.0, vec![0.0], 0.0).is_err());
    }

    #[test]
    fn kernel_matrix_symmetric() {
        let x = latin_hypercube(20, 3, 4);
        let km = kernel_matrix(&k(1.3, vec![0.2, 0.7, 1.1], 1e-3), &x);
        assert!((&km - km.transpose()).amax() < 1e-12);
        assert!(Cholesky::new(km).is_some());
    }

    #[test]
    fn posterior_interpolates_and_decays() {
        let x = vec![vec![0.1], vec![0.4], vec![0.8]];
        let y = [1.0, -2.0, 0.5];
        let gp = GpSurrogate::new(k(1.0, vec![0.2], 1e-12), x.clone(), &y).unwrap();
        for (xi, yi) in x.iter().zip(y) {
            let (m, v) = gp_posterior(&gp, xi);
            assert!((m - yi).abs() < 1e-5, "{m} vs {yi}");
            assert!(v < 1e-6);
        }
        let (m, v) = gp.posterior_standardized(&[50.0]);
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
        let (m, _) = gp_posterior(&gp, &[50.0]);
        assert!((m - (-0.5 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn posterior_matches_dense_inverse() {
        let x: Vec<Vec<f64>> = [0.05, 0.3, 0.42, 0.7, 0.95].iter().map(|v| vec![*v]).collect();
        let y = [0.3, -1.2, 0.8, 2.0, -0.4];
        let kern = k(1.7, vec![0.25], 0.01);
        let gp = GpSurrogate::new(kern.clone(), x.clone(), &y).unwrap();
        let (ys, mean, scale) = standardize(&y);
        // dense oracle via explicit inverse built from Gaussian elimination
        let n = 5;
        let mut a = vec![vec![0.0; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = kern.eval(&x[i], &x[j]) + if i == j { 0.01 } else { 0.0 };
            }
            a[i][n + i] = 1.0;
        }
        for c in 0..n {
            let piv = (c..n).max_by(|&p, &q| a[p][c].abs().total_cmp(&a[q][c].abs())).unwrap();
            a.swap(c, piv);
            let d = a[c][c];
            a[c].iter_mut().for_each(|v| *v /= d);
            for r in 0..n {
                if r != c {
                    let f = a[r][c];
                    let row_c = a[c].clone();
                    a[r].iter_mut().zip(row_c).for_each(|(v, w)| *v -= f * w);
                }
            }
        }
        let inv: Vec<Vec<f64>> = a.iter().map(|r| r[n..].to_vec()).collect();
        for xs in [0.0, 0.2, 0.5, 0.77, 1.3] {
            let kv: Vec<f64> = x.iter().map(|xi| kern.eval(&[xs], xi)).collect();
            let mut m = 0.0;
            let mut q = 0.0;
            for i in 0..n {
                for j in 0..n {
                    m += kv[i] * inv[i][j] * ys[j];
                    q += kv[i] * inv[i][j] * kv[j];
                }
            }
            let (gm, gv) = gp_posterior(&gp, &[xs]);
            assert!((gm - (mean + scale * m)).abs() < 1e-8);
            assert!((gv - scale * scale * (1.7 - q)).abs() < 1e-8);
        }
    }

    #[test]
    fn ei_examples() {
        assert_eq!(expected_improvement(1.0, 0.0, 1.0), 0.0);
        assert_eq!(expected_improvement(2.0, 0.0, 1.0), 0.0);
        let phi0 = 1.0 / (2.0 * PI).sqrt();
        assert!((expected_improvement(0.0, 1.0, 0.0) - phi0).abs() < 1e-15);
        for v in [0.0, 0.1, 4.0] {
            for m in [-3.0, 0.0, 2.0] {
                assert!(expected_improvement(m, v, 0.5) >= 0.0);
            }
        }
    }

    #[test]
    fn ei_matches_monte_carlo() {
        let mut rng = seed::rng(5);
        for _ in 0..5 {
            let mu: f64 = rng.random_range(-2.0..2.0);
            let sigma: f64 = rng.random_range(0.1..2.0);
            let best: f64 = rng.random_range(-2.0..2.0);
            let samples: Vec<f64> = (0..1_000_000)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (best - (mu + sigma * z)).max(0.0)
                })
                .collect();
            let est = crate::distributions::McEstimate::from_samples(&samples);
            let ei = expected_improvement(mu, sigma * sigma, best);
            assert!((est.mean - ei).abs() <= 3.0 * est.std_err, "{ei} vs {est:?}");
        }
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let x = latin_hypercube(12, 2, 9);
        let y: Vec<f64> = x.iter().map(|p| (4.0 * p[0]).sin() + p[1] * p[1]).collect();
        let theta = k(0.8, vec![0.3, 0.6], 0.02).to_log();
        let gp = GpSurrogate::new(Matern52::from_log(&theta), x.clone(), &y).unwrap();
        let g = gp.lml_gradient();
        let h = 1e-5;
        for j in 0..theta.len() {
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let fd = (lml_at(&tp, &x, &y).unwrap().0 - lml_at(&tm, &x, &y).unwrap().0) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6 * fd.abs().max(1.0), "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn recovers_lengthscale_and_trace_is_monotone() {
        let mut rng = seed::rng(11);
        let x: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random::<f64>()]).collect();
        let truth = k(1.0, vec![0.3], 1e-4);
        let kc = Cholesky::new(kernel_matrix(&truth, &x)).unwrap();
        let e = DVector::from_iterator(40, (0..40).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y = kc.l() * e;
        let fit = fit_kernel(&x, y.as_slice(), FitMethod::MarginalLikelihood, 1).unwrap();
        let l = fit.models[0].kernel.lengthscales[0];
        assert!((0.15..=0.6).contains(&l), "lengthscale {l}");
        assert!(fit.trace.windows(2).all(|w| w[1] > w[0]));
        assert!(fit.trace.len() > 1);
    }

    #[test]
    fn constant_observations_give_no_improvement() {
        let x = latin_hypercube(8, 2, 3);
        let y = vec![4.2; 8];
        for method in [FitMethod::MarginalLikelihood, FitMethod::mcmc_default()] {
            let fit = fit_kernel(&x, &y, method, 2).unwrap();
            for c in halton(200, 2, 1) {
                assert!(fit.expected_improvement(&c) < 1e-2);
            }
        }
    }

    #[test]
    fn mcmc_retains_requested_samples() {
        let x = latin_hypercube(10, 1, 2);
        let y: Vec<f64> = x.iter().map(|p| (6.0 * p[0]).sin()).collect();
        let fit = fit_kernel(&x, &y, FitMethod::mcmc_default(), 3).unwrap();
        assert_eq!(fit.models.len(), 10);
        let again = fit_kernel(&x, &y, FitMethod::mcmc_default(), 3).unwrap();
        assert_eq!(fit.models[9].kernel, again.models[9].kernel);
    }

    #[test]
    fn space_transforms() {
        let s = SearchSpace::new(vec![
            ParamSpec::linear("a", -1.0, 3.0),
            ParamSpec::log("b", 0.01, 100.0),
            ParamSpec::integer("c", 1.0, 9.0),
        ])
        .unwrap();
        let p = s.from_unit(&[0.5, 0.5, 0.5]);
        assert_eq!(p[0], 1.0);
        assert!((p[1] - 1.0).abs() < 1e-12);
        assert_eq!(p[2], 5.0);
        let u = s.to_unit(&[2.0, 10.0, 3.0]);
        assert!((u[0] - 0.75).abs() < 1e-15 && (u[1] - 0.75).abs() < 1e-12 && (u[2] - 0.25).abs() < 1e-15);
        assert!(SearchSpace::new(vec![ParamSpec::log("x", 0.0, 1.0)]).is_err());
        assert!(SearchSpace::new(vec![ParamSpec::linear("x", 1.0, 1.0)]).is_err());
    }

    #[test]
    fn lhs_stratifies() {
        let pts = latin_hypercube(5, 3, 8);
        for d in 0..3 {
            let mut cells: Vec<usize> = pts.iter().map(|p| (p[d] * 5.0) as usize).collect();
            cells.sort_unstable();
            assert_eq!(cells, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn cold_start_and_determinism() {
        let s = SearchSpace::new(vec![ParamSpec::linear("x", 0.0, 1.0), ParamSpec::linear("y", 0.0, 1.0)]).unwrap();
        let opts = BoOptions::default();
        let first = suggest_next(&[], &s, 7, &opts).unwrap();
        assert_eq!(first, latin_hypercube(5, 2, seed::derive(7, 0))[0]);
        let hist: Vec<Observation> = latin_hypercube(6, 2, 1)
            .into_iter()
            .enumerate()
            .map(|(i, p)| Observation { iteration: i, value: Some(p[0] * p[1]), point: p, wall_time: 0.0 })
            .collect();
        assert_eq!(suggest_next(&hist, &s, 3, &opts).unwrap(), suggest_next(&hist, &s, 3, &opts).unwrap());
    }

    #[test]
    fn suggestions_invariant_to_box_rescaling() {
        let unit = SearchSpace::new(vec![ParamSpec::linear("x", 0.0, 1.0)]).unwrap();
        let wide = SearchSpace::new(vec![ParamSpec::linear("x", 10.0, 30.0)]).unwrap();
        let f = |u: f64| (u - 0.37).powi(2);
        let a = tune(|p| Ok(f(p[0])), &unit, 9, 4, &BoOptions::default(), vec![], |_| Ok(())).unwrap();
        let b = tune(|p| Ok(f((p[0] - 10.0) / 20.0)), &wide, 9, 4, &BoOptions::default(), vec![], |_| Ok(())).unwrap();
        for (oa, ob) in a.history.iter().zip(&b.history) {
            assert!((oa.point[0] - (ob.point[0] - 10.0) / 20.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_is_located() {
        let s = SearchSpace::new(vec![ParamSpec::linear("x", 0.0, 1.0)]).unwrap();
        let r = tune(|p| Ok((p[0] - 0.3).powi(2)), &s, 25, 0, &BoOptions::default(), vec![], |_| Ok(())).unwrap();
        assert!((r.best_point[0] - 0.3).abs() < 0.05, "{:?}", r.best_point);
        assert_eq!(r.history.len(), 25);
        let rb = running_best(&r.history);
        assert!(rb.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*rb.last().unwrap(), r.best_value);
    }

    #[test]
    fn branin_is_minimized() {
        let s = SearchSpace::new(vec![ParamSpec::linear("x1", -5.0, 10.0), ParamSpec::linear("x2", 0.0, 15.0)]).unwrap();
        let mut hits = 0;
        for seed in 0..10 {
            let r = tune(|p| Ok(branin(p)), &s, 25, seed, &BoOptions::default(), vec![], |_| Ok(())).unwrap();
            if r.best_value <= 0.5 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "{hits}/10 seeds reached 0.5");
    }

    #[test]
    fn failures_are_imputed_and_all_failures_error() {
        let s = SearchSpace::new(vec![ParamSpec::linear("x", 0.0, 1.0)]).unwrap();
        let mut calls = 0;
        let r = tune(
            |p| {
                calls += 1;
                if calls % 3 == 0 { Err(Error::Numerical("nan".into())) } else { Ok(p[0]) }
            },
            &s,
            9,
            1,
            &BoOptions::default(),
            vec![],
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(r.history.iter().filter(|o| o.value.is_none()).count(), 3);
        let eff = effective_values(&r.history).unwrap();
        let ok: Vec<f64> = r.history.iter().filter_map(|o| o.value).collect();
        let worst = ok.iter().copied().fold(f64::MIN, f64::max);
        let mean = ok.iter().sum::<f64>() / ok.len() as f64;
        let std = (ok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ok.len() as f64).sqrt();
        assert_eq!(eff[2], worst + std);
        let e = tune(|_| Err(Error::Numerical("x".into())), &s, 7, 1, &BoOptions::default(), vec![], |_| Ok(()));
        assert!(matches!(e, Err(Error::Tuning(_))));
    }

    #[test]
    fn history_resumes_identically() {
        let dir = std::env::temp_dir().join(format!("senvae-bo-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("history.jsonl");
        let _ = std::fs::remove_file(&path);
        let s = SearchSpace::new(vec![ParamSpec::linear("x", 0.0, 1.0), ParamSpec::log("y", 0.1, 10.0)]).unwrap();
        let f = |p: &[f64]| Ok((p[0] - 0.6).powi(2) + p[1].log10().powi(2));
        let full = tune(f, &s, 8, 2, &BoOptions::default(), vec![], |_| Ok(())).unwrap();
        tune(f, &s, 6, 2, &BoOptions::default(), vec![], |o| append_history(&path, o)).unwrap();
        let loaded = load_history(&path).unwrap();
        assert_eq!(loaded.len(), 6);
        let resumed = tune(f, &s, 8, 2, &BoOptions::default(), loaded, |o| append_history(&path, o)).unwrap();
        let points = |h: &[Observation]| h.iter().map(|o| o.point.clone()).collect::<Vec<_>>();
        assert_eq!(points(&resumed.history), points(&full.history));
        assert_eq!(load_history(&path).unwrap().len(), 8);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
