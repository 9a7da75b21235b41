//! Training objectives and their controllers: vanilla ELBO, KL annealing,
//! annealed word dropout, free bits, soft free bits, beta-VAE, InfoVAE,
//! LagVAE and minimum desired rate (MDR) dual ascent.
//!
//! The scalar functions below are the reference definitions; [`Controller`]
//! builds the same losses on the tape and updates controller state after
//! each optimizer step.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{self, median_bandwidth};
use crate::error::{contract, Error, Result};
use crate::models::{Regularizer, SenVae};
use crate::pipeline::Batch;
use crate::seed::SeededRng;
use crate::tensor::{Bound, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Technique {
    Vanilla,
    Annealing,
    WordDropout,
    FreeBits,
    SoftFreeBits,
    BetaVae,
    InfoVae,
    LagVae,
    Mdr,
}

impl Technique {
    pub const ALL: [Technique; 9] = [
        Technique::Vanilla,
        Technique::Annealing,
        Technique::WordDropout,
        Technique::FreeBits,
        Technique::SoftFreeBits,
        Technique::BetaVae,
        Technique::InfoVae,
        Technique::LagVae,
        Technique::Mdr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Vanilla => "vanilla",
            Technique::Annealing => "annealing",
            Technique::WordDropout => "word-dropout",
            Technique::FreeBits => "free-bits",
            Technique::SoftFreeBits => "soft-free-bits",
            Technique::BetaVae => "beta-vae",
            Technique::InfoVae => "info-vae",
            Technique::LagVae => "lag-vae",
            Technique::Mdr => "mdr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        let aliases = [("fb", "free-bits"), ("sfb", "soft-free-bits"), ("beta", "beta-vae"), ("infovae", "info-vae"), ("lagvae", "lag-vae"), ("wd", "word-dropout")];
        let key = aliases
            .iter()
            .find(|(a, _)| *a == key)
            .map_or(key.as_str(), |(_, full)| full)
            .to_owned();
        Self::ALL
            .into_iter()
            .find(|t| t.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown technique {s:?}")))
    }

    /// Whether the loss needs an MMD estimate.
    pub fn uses_mmd(self) -> bool {
        matches!(self, Technique::InfoVae | Technique::LagVae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub technique: Technique,
    /// Target rate `r` in nats (FB, SFB, MDR).
    pub rate: f64,
    /// Fixed KL weight (beta-VAE).
    pub beta: f64,
    /// Per-step increment of the annealed KL weight.
    pub anneal_increment: f64,
    /// Per-step decrement of the word-dropout rate.
    pub word_dropout_decrement: f64,
    /// SFB step size.
    pub sfb_omega: f64,
    /// SFB upper tolerance: beta grows while `R > gamma * r`.
    pub sfb_gamma: f64,
    /// SFB lower tolerance: beta shrinks while `R < epsilon * r`.
    pub sfb_epsilon: f64,
    pub sfb_beta_min: f64,
    pub sfb_beta_max: f64,
    /// InfoVAE KL weight.
    pub info_beta: f64,
    /// InfoVAE MMD weight.
    pub info_lambda: f64,
    /// LagVAE distortion weight (negative in MI-maximisation mode).
    pub lag_alpha: f64,
    /// LagVAE bound on the negative ELBO.
    pub lag_target_elbo: f64,
    /// LagVAE bound on the MMD.
    pub lag_target_mmd: f64,
    /// Dual learning rate for MDR and LagVAE multipliers.
    pub dual_lr: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            technique: Technique::Vanilla,
            rate: 5.0,
            beta: 0.66,
            anneal_increment: 2e-5,
            word_dropout_decrement: 2e-5,
            sfb_omega: 0.01,
            sfb_gamma: 1.05,
            sfb_epsilon: 1.0,
            sfb_beta_min: 1e-4,
            sfb_beta_max: 1.0,
            info_beta: 0.7,
            info_lambda: 31.62,
            lag_alpha: -21.7,
            lag_target_elbo: 100.8,
            lag_target_mmd: 0.0017,
            dual_lr: 1e-3,
        }
    }
}

impl ObjectiveConfig {
    pub fn new(technique: Technique) -> Self {
        let mut c = Self { technique, ..Self::default() };
        if technique == Technique::SoftFreeBits {
            c.rate = 6.46;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if !(self.rate >= 0.0) {
            return bad("objective.rate must be >= 0");
        }
        if !(self.dual_lr > 0.0) {
            return bad("objective.dual_lr must be > 0");
        }
        if !(self.sfb_omega > 0.0) {
            return bad("objective.sfb_omega must be > 0");
        }
        if !(self.beta >= 0.0 && self.info_beta >= 0.0 && self.info_lambda >= 0.0) {
            return bad("KL and MMD weights must be >= 0");
        }
        if !(self.anneal_increment > 0.0 && self.word_dropout_decrement > 0.0) {
            return bad("schedule increments must be > 0");
        }
        if !(0.0 < self.sfb_beta_min && self.sfb_beta_min <= self.sfb_beta_max) {
            return bad("need 0 < sfb_beta_min <= sfb_beta_max");
        }
        Ok(())
    }
}

pub fn loss_vanilla(d: f64, r: f64) -> f64 {
    d + r
}

pub fn loss_beta(d: f64, r: f64, beta: f64) -> f64 {
    d + beta * r
}

/// Linear KL-weight schedule `min(1, step * increment)`.
pub fn anneal_beta(step: u64, increment: f64) -> f64 {
    (step as f64 * increment).min(1.0)
}

/// Linear word-dropout schedule `max(0, 1 - step * decrement)`.
pub fn word_dropout_rate(step: u64, decrement: f64) -> f64 {
    (1.0 - step as f64 * decrement).max(0.0)
}

pub fn loss_fb(d: f64, r: f64, target: f64) -> f64 {
    d + r.max(target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfbRule {
    pub omega: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

/// `beta + omega` if `R > gamma r`, `beta - omega` if `R < epsilon r`,
/// otherwise unchanged; clamped to `[beta_min, beta_max]`.
pub fn sfb_update(beta: f64, rate: f64, target: f64, rule: &SfbRule) -> f64 {
    let next = if rate > rule.gamma * target {
        beta + rule.omega
    } else if rate < rule.epsilon * target {
        beta - rule.omega
    } else {
        beta
    };
    next.clamp(rule.beta_min, rule.beta_max)
}

/// Lagrangian `D + R + u (r - R)` of the minimum-rate constrained ELBO.
pub fn mdr_loss(d: f64, r: f64, u: f64, target: f64) -> f64 {
    d + r + u * (target - r)
}

/// Projected dual ascent on the rate violation: `max(0, u + rho (r - R))`.
pub fn mdr_dual_update(u: f64, rate: f64, target: f64, rho: f64) -> f64 {
    (u + rho * (target - rate)).max(0.0)
}

pub fn infovae_loss(d: f64, r: f64, mmd: f64, beta: f64, lambda: f64) -> f64 {
    d + beta * r + lambda * mmd
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagTargets {
    pub alpha: f64,
    pub elbo: f64,
    pub mmd: f64,
}

/// LagVAE primal loss `-alpha D + u1 ((D + R) - t_elbo) + u2 (MMD - t_mmd)`
/// and the projected dual updates of both multipliers.
pub fn lagvae_step(
    d: f64,
    r: f64,
    mmd: f64,
    t: &LagTargets,
    u1: f64,
    u2: f64,
    rho: f64,
) -> (f64, f64, f64) {
    let v1 = (d + r) - t.elbo;
    let v2 = mmd - t.mmd;
    let loss = -t.alpha * d + u1 * v1 + u2 * v2;
    (loss, (u1 + rho * v1).max(0.0), (u2 + rho * v2).max(0.0))
}

/// Mutable controller variables, logged every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    /// KL weight for annealing and SFB.
    pub beta: f64,
    /// MDR multiplier.
    pub u: f64,
    /// LagVAE multipliers.
    pub u1: f64,
    pub u2: f64,
    pub word_dropout: f64,
    /// Optimizer steps taken.
    pub step: u64,
}

impl ControllerState {
    pub fn initial(cfg: &ObjectiveConfig) -> Self {
        let beta = match cfg.technique {
            Technique::Annealing => 0.0,
            Technique::SoftFreeBits => cfg.sfb_beta_max.min(1.0),
            _ => 1.0,
        };
        let word_dropout = match cfg.technique {
            Technique::WordDropout => 1.0,
            _ => 0.0,
        };
        Self {
            beta,
            u: 0.0,
            u1: 0.0,
            u2: 0.0,
            word_dropout,
            step: 0,
        }
    }
}

/// Batch-level quantities of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean per-sentence distortion.
    pub distortion: f64,
    /// Mean per-sentence rate.
    pub rate: f64,
    pub mmd: Option<f64>,
    pub loss: f64,
}

/// Differentiable ELBO pieces for one batch.
pub struct ElboTerms<'t> {
    /// `-log P(x | z)` per sentence, `B x 1`.
    pub distortion: Var<'t>,
    /// Rate per sentence, `B x 1`.
    pub rate: Var<'t>,
    /// The code used for the distortion, `B x D_z`.
    pub z: Var<'t>,
    pub loc: Var<'t>,
    pub scale: Var<'t>,
}

impl<'t> ElboTerms<'t> {
    pub fn mean_distortion(&self) -> Var<'t> {
        self.distortion.mean()
    }

    pub fn mean_rate(&self) -> Var<'t> {
        self.rate.mean()
    }
}

pub fn standard_normal(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// `D` from one reparameterised code per sentence; `R` in closed form for
/// the standard prior and as a `rate_samples`-sample Monte-Carlo estimate
/// otherwise.
pub fn elbo_terms<'t>(
    model: &SenVae,
    p: &Bound<'t>,
    batch: &Batch,
    rate_samples: usize,
    rng: &mut SeededRng,
    reg: Option<&mut Regularizer<'_>>,
) -> Result<ElboTerms<'t>> {
    let b = batch.size();
    let dz = model.latent_dim();
    let (loc, scale) = model.encode(p, batch)?;
    let z = distributions::reparam(&loc, &scale, &standard_normal(rng, b, dz))?;
    let rate = match model.prior {
        crate::models::PriorSpec::Standard => distributions::kl_standard_rows(&loc, &scale)?,
        _ => {
            if rate_samples == 0 {
                return Err(contract("Monte-Carlo rate needs at least one sample"));
            }
            let s = rate_samples;
            let (lr, sr) = (loc.repeat_rows(s), scale.repeat_rows(s));
            let zs = distributions::reparam(&lr, &sr, &standard_normal(rng, b * s, dz))?;
            let log_q = distributions::log_prob_rows(&zs, &lr, &sr)?;
            let log_p = model.prior_log_prob(p, &zs)?;
            log_q.sub(&log_p)?.reshape(b, s)?.row_sums().scale(1.0 / s as f64)
        }
    };
    let distortion = model.nll(p, &z, batch, reg)?;
    Ok(ElboTerms {
        distortion,
        rate,
        z,
        loc,
        scale,
    })
}

/// Unbiased MMD between the batch codes and as many prior samples, RBF
/// kernel with median-heuristic bandwidth.
pub fn batch_mmd<'t>(model: &SenVae, z: &Var<'t>, rng: &mut SeededRng) -> Result<Var<'t>> {
    let n = z.value().rows();
    let prior = model.prior_density()?;
    let ys: Vec<Vec<f64>> = (0..n).map(|_| prior.sample(rng)).collect();
    let ys = z.tape().constant(Tensor::from_rows(&ys)?);
    let bw = median_bandwidth(&z.value(), &ys.value());
    distributions::mmd_var(z, &ys, bw)
}

/// Objective configuration plus its evolving state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub config: ObjectiveConfig,
    pub state: ControllerState,
}

impl Controller {
    pub fn new(config: ObjectiveConfig) -> Result<Self> {
        config.validate()?;
        let state = ControllerState::initial(&config);
        Ok(Self { config, state })
    }

    pub fn technique(&self) -> Technique {
        self.config.technique
    }

    pub fn sfb_rule(&self) -> SfbRule {
        SfbRule {
            omega: self.config.sfb_omega,
            gamma: self.config.sfb_gamma,
            epsilon: self.config.sfb_epsilon,
            beta_min: self.config.sfb_beta_min,
            beta_max: self.config.sfb_beta_max,
        }
    }

    pub fn lag_targets(&self) -> LagTargets {
        LagTargets {
            alpha: self.config.lag_alpha,
            elbo: self.config.lag_target_elbo,
            mmd: self.config.lag_target_mmd,
        }
    }

    /// Schedules that depend only on the step count, refreshed before the
    /// loss of step `state.step` is built.
    pub fn begin_step(&mut self) {
        let c = &self.config;
        match c.technique {
            Technique::Annealing => self.state.beta = anneal_beta(self.state.step, c.anneal_increment),
            Technique::WordDropout => {
                self.state.word_dropout = word_dropout_rate(self.state.step, c.word_dropout_decrement)
            }
            _ => {}
        }
    }

    /// Effective weight on the rate term's gradient.
    pub fn rate_weight(&self) -> f64 {
        match self.config.technique {
            Technique::Annealing | Technique::SoftFreeBits => self.state.beta,
            Technique::BetaVae => self.config.beta,
            Technique::InfoVae => self.config.info_beta,
            Technique::Mdr => 1.0 - self.state.u,
            _ => 1.0,
        }
    }

    /// Loss on the tape from batch-mean `d`, `r` and optional MMD.
    pub fn loss<'t>(&self, d: &Var<'t>, r: &Var<'t>, mmd: Option<&Var<'t>>) -> Result<Var<'t>> {
        let c = &self.config;
        let s = &self.state;
        let need_mmd = || mmd.ok_or_else(|| contract(format!("{} needs an MMD term", c.technique.name())));
        Ok(match c.technique {
            Technique::Vanilla | Technique::WordDropout => d.add(r)?,
            Technique::Annealing | Technique::SoftFreeBits => d.add(&r.scale(s.beta))?,
            Technique::BetaVae => d.add(&r.scale(c.beta))?,
            Technique::FreeBits => d.add(&r.max_scalar(c.rate))?,
            // D + R + u (r - R), with the constant u r kept so values agree
            Technique::Mdr => d.add(&r.scale(1.0 - s.u))?.add_scalar(s.u * c.rate),
            Technique::InfoVae => d
                .add(&r.scale(c.info_beta))?
                .add(&need_mmd()?.scale(c.info_lambda))?,
            Technique::LagVae => {
                let t = self.lag_targets();
                let elbo = d.add(r)?.add_scalar(-t.elbo).scale(s.u1);
                let m = need_mmd()?.add_scalar(-t.mmd).scale(s.u2);
                d.scale(-t.alpha).add(&elbo)?.add(&m)?
            }
        })
    }

    /// Reference value of [`Controller::loss`] from plain numbers.
    pub fn loss_value(&self, d: f64, r: f64, mmd: Option<f64>) -> f64 {
        let c = &self.config;
        let s = &self.state;
        match c.technique {
            Technique::Vanilla | Technique::WordDropout => loss_vanilla(d, r),
            Technique::Annealing | Technique::SoftFreeBits => loss_beta(d, r, s.beta),
            Technique::BetaVae => loss_beta(d, r, c.beta),
            Technique::FreeBits => loss_fb(d, r, c.rate),
            Technique::Mdr => mdr_loss(d, r, s.u, c.rate),
            Technique::InfoVae => infovae_loss(d, r, mmd.unwrap_or(0.0), c.info_beta, c.info_lambda),
            Technique::LagVae => {
                lagvae_step(d, r, mmd.unwrap_or(0.0), &self.lag_targets(), s.u1, s.u2, c.dual_lr).0
            }
        }
    }

    /// Controller updates after the primal step, from the batch values.
    pub fn end_step(&mut self, b: &LossBreakdown) {
        let c = self.config.clone();
        match c.technique {
            Technique::SoftFreeBits => {
                self.state.beta = sfb_update(self.state.beta, b.rate, c.rate, &self.sfb_rule())
            }
            Technique::Mdr => self.state.u = mdr_dual_update(self.state.u, b.rate, c.rate, c.dual_lr),
            Technique::LagVae => {
                let (_, u1, u2) = lagvae_step(
                    b.distortion,
                    b.rate,
                    b.mmd.unwrap_or(0.0),
                    &self.lag_targets(),
                    self.state.u1,
                    self.state.u2,
                    c.dual_lr,
                );
                self.state.u1 = u1;
                self.state.u2 = u2;
            }
            _ => {}
        }
        self.state.step += 1;
    }
}
