//! GRU language model, the sentence VAE built on it, and the three prior
//! families (standard normal, uniform mixture of Gaussians, VampPrior).
//!
//! All recurrent computation is time-major: a `T x B` block of token ids
//! becomes a `(T * B) x D` matrix whose rows `t * B .. (t + 1) * B` belong
//! to step `t`.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::distributions::{self, Density, DiagGaussian, MixtureOfGaussians};
use crate::error::{contract, Error, Result};
use crate::pipeline::{Batch, LengthStats, BOS, EOS, PAD, UNK};
use crate::seed::{self, SeededRng};
use crate::tensor::{softplus_inv, Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `D_e`
    pub emb_dim: usize,
    /// `D_h^theta`; must equal `emb_dim` because the output layer is tied.
    pub dec_hidden: usize,
    /// `L_theta`
    pub dec_layers: usize,
    /// `D_h^lambda`
    pub enc_hidden: usize,
    /// `L_lambda`
    pub enc_layers: usize,
    /// `D_z`
    pub latent_dim: usize,
    /// Decoder dropout rate, shared mask across time steps.
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn ptb() -> Self {
        Self {
            emb_dim: 256,
            dec_hidden: 256,
            dec_layers: 2,
            enc_hidden: 256,
            enc_layers: 1,
            latent_dim: 32,
            dropout: 0.4,
        }
    }

    /// Small architecture for the synthetic corpus on one CPU core.
    pub fn toy() -> Self {
        Self {
            emb_dim: 48,
            dec_hidden: 48,
            dec_layers: 1,
            enc_hidden: 48,
            enc_layers: 1,
            latent_dim: 16,
            dropout: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.emb_dim,
            self.dec_hidden,
            self.dec_layers,
            self.enc_hidden,
            self.enc_layers,
            self.latent_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.dec_hidden != self.emb_dim {
            return Err(Error::Config(format!(
                "tied output layer needs dec_hidden == emb_dim, got {} and {}",
                self.dec_hidden, self.emb_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Uniform in `+-1/sqrt(fan_in)`.
fn fan_in_init(rng: &mut SeededRng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a).expect("finite bound");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| u.sample(rng)).collect())
        .expect("consistent shape")
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl GruIds {
    fn register(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let g = 3 * hidden;
        Self {
            w_ih: store.add(format!("{prefix}.w_ih"), fan_in_init(rng, input, g, hidden)),
            w_hh: store.add(format!("{prefix}.w_hh"), fan_in_init(rng, hidden, g, hidden)),
            b_ih: store.add(format!("{prefix}.b_ih"), Tensor::zeros(&[1, g])),
            b_hh: store.add(format!("{prefix}.b_hh"), Tensor::zeros(&[1, g])),
        }
    }
}

/// One GRU step with gates ordered `(r, z, n)`:
///
/// ```text
/// r  = sigmoid(gx_r + h W_hr + b_hr)
/// z  = sigmoid(gx_z + h W_hz + b_hz)
/// n  = tanh(gx_n + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
///
/// `gx = x W_ih + b_ih` is passed precomputed (`B x 3H`).
pub fn gru_cell<'t>(
    gx: &Var<'t>,
    h: &Var<'t>,
    w_hh: &Var<'t>,
    b_hh: &Var<'t>,
) -> Result<Var<'t>> {
    let hd = h.value().cols();
    let gh = h.matmul(w_hh)?.add(b_hh)?;
    let r = gx.slice_cols(0, hd)?.add(&gh.slice_cols(0, hd)?)?.sigmoid();
    let z = gx.slice_cols(hd, 2 * hd)?.add(&gh.slice_cols(hd, 2 * hd)?)?.sigmoid();
    let n = gx
        .slice_cols(2 * hd, 3 * hd)?
        .add(&r.mul(&gh.slice_cols(2 * hd, 3 * hd)?)?)?
        .tanh();
    Ok(n.add(&z.mul(&h.sub(&n)?)?)?)
}

/// Run one GRU layer over a time-major input, returning the per-step states
/// stacked time-major. With `masks`, a row keeps its previous state where
/// the step mask is zero.
fn gru_layer<'t>(
    p: &Bound<'t>,
    ids: GruIds,
    x: &Var<'t>,
    h0: Var<'t>,
    steps: usize,
    masks: Option<&[Var<'t>]>,
    reverse: bool,
) -> Result<(Vec<Var<'t>>, Var<'t>)> {
    let b = h0.value().rows();
    let gx_all = x.matmul(&p[ids.w_ih])?.add(&p[ids.b_ih])?;
    let mut h = h0;
    let mut outs: Vec<Option<Var<'t>>> = vec![None; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let gx = gx_all.slice_rows(t * b, (t + 1) * b)?;
        let next = gru_cell(&gx, &h, &p[ids.w_hh], &p[ids.b_hh])?;
        h = match masks {
            Some(m) => h.add(&m[t].mul(&next.sub(&h)?)?)?,
            None => next,
        };
        outs[t] = Some(h);
    }
    Ok((outs.into_iter().map(|o| o.expect("every step visited")).collect(), h))
}

/// Decoder input ids and targets of a batch, time-major.
fn teacher_forcing(batch: &Batch) -> (usize, Vec<usize>, Vec<usize>, Vec<f64>) {
    let steps = batch.width() - 1;
    let b = batch.size();
    let mut inputs = Vec::with_capacity(steps * b);
    let mut targets = Vec::with_capacity(steps * b);
    let mut mask = Vec::with_capacity(steps * b);
    for t in 0..steps {
        for k in 0..b {
            inputs.push(batch.ids[k][t]);
            targets.push(batch.ids[k][t + 1]);
            mask.push(batch.mask[k][t]);
        }
    }
    (steps, inputs, targets, mask)
}

/// Stochastic regularisation applied to the generative network during
/// training. Rates of zero consume no randomness.
pub struct Regularizer<'a> {
    pub rng: &'a mut SeededRng,
    pub dropout: f64,
    pub word_dropout: f64,
}

impl Regularizer<'_> {
    /// Inverted-dropout mask of shape `rows x cols`, tiled `steps` times.
    fn shared_mask(&mut self, steps: usize, rows: usize, cols: usize) -> Option<Tensor> {
        if self.dropout <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout;
        let bern = Bernoulli::new(keep).expect("rate in [0, 1)");
        let one: Vec<f64> = (0..rows * cols)
            .map(|_| if bern.sample(self.rng) { 1.0 / keep } else { 0.0 })
            .collect();
        let mut data = Vec::with_capacity(steps * one.len());
        for _ in 0..steps {
            data.extend_from_slice(&one);
        }
        Some(Tensor::matrix(steps * rows, cols, data).expect("consistent shape"))
    }

    /// Replace history words (never BOS, EOS or padding) by UNK.
    fn drop_words(&mut self, inputs: &mut [usize]) {
        if self.word_dropout <= 0.0 {
            return;
        }
        let bern = Bernoulli::new(self.word_dropout.min(1.0)).expect("rate in [0, 1]");
        for id in inputs.iter_mut() {
            if *id != BOS && *id != EOS && *id != PAD && bern.sample(self.rng) {
                *id = UNK;
            }
        }
    }
}

/// Embedding, GRU stack and tied output layer shared by both models.
#[derive(Clone, Debug)]
struct Decoder {
    emb: ParamId,
    layers: Vec<GruIds>,
    out_b: ParamId,
    hidden: usize,
}

impl Decoder {
    fn register(store: &mut ParamStore, rng: &mut SeededRng, cfg: &ModelConfig, vocab: usize) -> Self {
        let emb = store.add("emb", fan_in_init(rng, vocab, cfg.emb_dim, cfg.emb_dim));
        let layers = (0..cfg.dec_layers)
            .map(|l| {
                let input = if l == 0 { cfg.emb_dim } else { cfg.dec_hidden };
                GruIds::register(store, rng, &format!("dec.gru{l}"), input, cfg.dec_hidden)
            })
            .collect();
        let out_b = store.add("out.b", Tensor::zeros(&[1, vocab]));
        Self {
            emb,
            layers,
            out_b,
            hidden: cfg.dec_hidden,
        }
    }

    /// Teacher-forced logits, `(steps * B) x V`, time-major.
    fn logits<'t>(
        &self,
        p: &Bound<'t>,
        h0: &[Var<'t>],
        steps: usize,
        mut inputs: Vec<usize>,
        reg: Option<&mut Regularizer<'_>>,
    ) -> Result<Var<'t>> {
        let b = inputs.len() / steps.max(1);
        let (in_mask, out_mask) = match reg {
            Some(r) => {
                r.drop_words(&mut inputs);
                let e = p[self.emb].value().cols();
                (r.shared_mask(steps, b, e), r.shared_mask(steps, b, self.hidden))
            }
            None => (None, None),
        };
        let tape = p[self.emb].tape();
        let mut x = p[self.emb].gather_rows(&inputs)?;
        if let Some(m) = in_mask {
            x = x.mul(&tape.constant(m))?;
        }
        for (l, ids) in self.layers.iter().enumerate() {
            let (outs, _) = gru_layer(p, *ids, &x, h0[l], steps, None, false)?;
            x = tape.concat_rows(&outs)?;
        }
        if let Some(m) = out_mask {
            x = x.mul(&tape.constant(m))?;
        }
        Ok(x.matmul_t(&p[self.emb])?.add(&p[self.out_b])?)
    }

    /// Token-summed negative log-likelihood per sentence, `B x 1`.
    fn nll<'t>(
        &self,
        p: &Bound<'t>,
        h0: &[Var<'t>],
        batch: &Batch,
        reg: Option<&mut Regularizer<'_>>,
    ) -> Result<Var<'t>> {
        let (steps, inputs, targets, mask) = teacher_forcing(batch);
        let logits = self.logits(p, h0, steps, inputs, reg)?;
        let xent = logits.softmax_xent(&targets, &mask)?;
        // (steps * B) x 1 -> steps x B -> 1 x B -> B x 1
        Ok(xent.reshape(steps, batch.size())?.col_sums().transpose())
    }

    fn zero_states<'t>(&self, tape: &'t Tape, b: usize, from: usize) -> Vec<Var<'t>> {
        (from..self.layers.len())
            .map(|_| tape.constant(Tensor::zeros(&[b, self.hidden])))
            .collect()
    }

    /// Autoregressive generation from initial states (`N x H` per layer).
    fn generate<'t>(
        &self,
        p: &Bound<'t>,
        h0: Vec<Var<'t>>,
        mode: Decoding,
        max_len: usize,
        rng: &mut SeededRng,
    ) -> Result<Vec<Vec<usize>>> {
        let n = h0[0].value().rows();
        let mut h = h0;
        let mut current = vec![BOS; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for _ in 0..max_len {
            let mut x = p[self.emb].gather_rows(&current)?;
            for (l, ids) in self.layers.iter().enumerate() {
                let gx = x.matmul(&p[ids.w_ih])?.add(&p[ids.b_ih])?;
                h[l] = gru_cell(&gx, &h[l], &p[ids.w_hh], &p[ids.b_hh])?;
                x = h[l];
            }
            let logits = x.matmul_t(&p[self.emb])?.add(&p[self.out_b])?.value();
            for k in 0..n {
                if done[k] {
                    current[k] = PAD;
                    continue;
                }
                let tok = pick(logits.row_slice(k), mode, rng);
                current[k] = tok;
                if tok == EOS {
                    done[k] = true;
                } else {
                    out[k].push(tok);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decoding {
    Greedy,
    Ancestral,
}

/// Next token from one logit row; PAD and BOS are never emitted.
fn pick(row: &[f64], mode: Decoding, rng: &mut SeededRng) -> usize {
    let allowed = |j: usize| j != PAD && j != BOS;
    match mode {
        Decoding::Greedy => {
            let mut best = EOS;
            for (j, &l) in row.iter().enumerate() {
                if allowed(j) && l > row[best] {
                    best = j;
                }
            }
            best
        }
        Decoding::Ancestral => {
            let mx = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| allowed(j))
                .map(|(_, &l)| l)
                .fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &l)| if allowed(j) { (l - mx).exp() } else { 0.0 })
                .collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (j, &wj) in w.iter().enumerate() {
                u -= wj;
                if u <= 0.0 && wj > 0.0 {
                    return j;
                }
            }
            EOS
        }
    }
}

/// Recurrent language model with a learned initial state per layer.
#[derive(Clone, Debug)]
pub struct RnnLm {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
    dec: Decoder,
    h0: Vec<ParamId>,
}

impl RnnLm {
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = ParamStore::new();
        let dec = Decoder::register(&mut params, &mut rng, config, vocab_size);
        let h0 = (0..config.dec_layers)
            .map(|l| params.add(format!("lm.h0.{l}"), Tensor::zeros(&[1, config.dec_hidden])))
            .collect();
        Ok(Self {
            config: config.clone(),
            vocab_size,
            params,
            dec,
            h0,
        })
    }

    fn initial_states<'t>(&self, p: &Bound<'t>, b: usize) -> Vec<Var<'t>> {
        self.h0.iter().map(|&id| p[id].repeat_rows(b)).collect()
    }

    /// Teacher-forced logits for a batch, `(steps * B) x V`, time-major.
    pub fn logits<'t>(
        &self,
        p: &Bound<'t>,
        batch: &Batch,
        reg: Option<&mut Regularizer<'_>>,
    ) -> Result<Var<'t>> {
        if batch.size() == 0 {
            return Err(contract("empty batch"));
        }
        let (steps, inputs, _, _) = teacher_forcing(batch);
        self.dec.logits(p, &self.initial_states(p, batch.size()), steps, inputs, reg)
    }

    /// Per-sentence negative log-likelihood, `B x 1`.
    pub fn nll<'t>(
        &self,
        p: &Bound<'t>,
        batch: &Batch,
        reg: Option<&mut Regularizer<'_>>,
    ) -> Result<Var<'t>> {
        if batch.size() == 0 {
            return Err(contract("empty batch"));
        }
        self.dec.nll(p, &self.initial_states(p, batch.size()), batch, reg)
    }

    pub fn generate(
        &self,
        n: usize,
        mode: Decoding,
        max_len: usize,
        rng: &mut SeededRng,
    ) -> Result<Vec<Vec<usize>>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        self.dec.generate(&p, self.initial_states(&p, n), mode, max_len, rng)
    }
}

/// Which prior a model uses, with everything needed to rebuild its
/// parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PriorSpec {
    Standard,
    /// Uniform mixture of `components` learned diagonal Gaussians.
    Mog { components: usize },
    /// Mixture of posteriors at learned pseudo-input embedding sequences of
    /// fixed lengths (one per component).
    Vamp { lengths: Vec<usize> },
}

impl PriorSpec {
    pub fn components(&self) -> usize {
        match self {
            PriorSpec::Standard => 1,
            PriorSpec::Mog { components } => *components,
            PriorSpec::Vamp { lengths } => lengths.len(),
        }
    }
}

/// Draw `C` pseudo-input lengths `round(N(mean, std))`, clamped to at least
/// one, and their initial embeddings (time-major, zero-padded to the longest
/// length). Deterministic in `seed`.
pub fn init_vamp_pseudo_inputs(
    components: usize,
    stats: LengthStats,
    emb_dim: usize,
    seed: u64,
) -> Result<(PriorSpec, Tensor)> {
    if components < 1 {
        return Err(contract("vamp prior needs at least one pseudo input"));
    }
    let mut rng = seed::rng(seed);
    let lengths: Vec<usize> = (0..components)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            (stats.mean + stats.std * e).round().max(1.0) as usize
        })
        .collect();
    let inputs = vamp_inputs_init(&lengths, emb_dim, &mut rng);
    Ok((PriorSpec::Vamp { lengths }, inputs))
}

fn vamp_inputs_init(lengths: &[usize], emb_dim: usize, rng: &mut SeededRng) -> Tensor {
    let c = lengths.len();
    let t_max = lengths.iter().copied().max().unwrap_or(1);
    let mut t = fan_in_init(rng, t_max * c, emb_dim, emb_dim);
    for step in 0..t_max {
        for (k, &l) in lengths.iter().enumerate() {
            if step >= l {
                let row = step * c + k;
                t.data_mut()[row * emb_dim..(row + 1) * emb_dim].fill(0.0);
            }
        }
    }
    t
}

#[derive(Clone, Debug)]
enum PriorIds {
    Standard,
    Mog { loc: ParamId, raw_scale: ParamId },
    Vamp { inputs: ParamId, lengths: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Encoder {
    fwd: Vec<GruIds>,
    bwd: Vec<GruIds>,
    loc_w: ParamId,
    loc_b: ParamId,
    scale_w: ParamId,
    scale_b: ParamId,
    hidden: usize,
}

impl Encoder {
    fn register(store: &mut ParamStore, rng: &mut SeededRng, cfg: &ModelConfig) -> Self {
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        for l in 0..cfg.enc_layers {
            let input = if l == 0 { cfg.emb_dim } else { 2 * cfg.enc_hidden };
            fwd.push(GruIds::register(store, rng, &format!("enc.fwd{l}"), input, cfg.enc_hidden));
            bwd.push(GruIds::register(store, rng, &format!("enc.bwd{l}"), input, cfg.enc_hidden));
        }
        let h2 = 2 * cfg.enc_hidden;
        let dz = cfg.latent_dim;
        Self {
            fwd,
            bwd,
            loc_w: store.add("enc.loc.w", fan_in_init(rng, h2, dz, h2)),
            loc_b: store.add("enc.loc.b", Tensor::zeros(&[1, dz])),
            scale_w: store.add("enc.scale.w", fan_in_init(rng, h2, dz, h2)),
            scale_b: store.add("enc.scale.b", Tensor::zeros(&[1, dz])),
            hidden: cfg.enc_hidden,
        }
    }

    /// Posterior `(loc, scale)`, each `B x D_z`, from embedded time-major
    /// input `(steps * B) x D_e` and per-step `B x 1` length masks.
    fn run<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        masks: &[Var<'t>],
        b: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let steps = masks.len();
        let zero = || tape.constant(Tensor::zeros(&[b, self.hidden]));
        let mut x = x;
        let mut finals = None;
        for (f, r) in self.fwd.iter().zip(&self.bwd) {
            let (fo, fh) = gru_layer(p, *f, &x, zero(), steps, Some(masks), false)?;
            let (bo, bh) = gru_layer(p, *r, &x, zero(), steps, Some(masks), true)?;
            if steps > 0 {
                let per_step: Vec<Var<'t>> = fo
                    .iter()
                    .zip(&bo)
                    .map(|(a, c)| tape.concat_cols(&[*a, *c]))
                    .collect::<std::result::Result<_, _>>()?;
                x = tape.concat_rows(&per_step)?;
            }
            finals = Some(tape.concat_cols(&[fh, bh])?);
        }
        let h = finals.expect("at least one encoder layer");
        let loc = h.matmul(&p[self.loc_w])?.add(&p[self.loc_b])?;
        let scale = h.matmul(&p[self.scale_w])?.add(&p[self.scale_b])?.softplus();
        Ok((loc, scale))
    }
}

fn step_masks<'t>(tape: &'t Tape, lengths: &[usize], steps: usize) -> Vec<Var<'t>> {
    (0..steps)
        .map(|t| {
            let m: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            tape.constant(Tensor::matrix(lengths.len(), 1, m).expect("column"))
        })
        .collect()
}

/// Numeric prior density for evaluation.
#[derive(Clone, Debug)]
pub enum PriorDensity {
    Standard(DiagGaussian),
    Mixture(MixtureOfGaussians),
}

impl Density for PriorDensity {
    fn dim(&self) -> usize {
        match self {
            PriorDensity::Standard(g) => g.dim(),
            PriorDensity::Mixture(m) => m.dim(),
        }
    }

    fn log_prob(&self, z: &[f64]) -> f64 {
        match self {
            PriorDensity::Standard(g) => g.log_prob(z),
            PriorDensity::Mixture(m) => m.log_prob(z),
        }
    }
}

impl PriorDensity {
    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        match self {
            PriorDensity::Standard(g) => g.sample(rng),
            PriorDensity::Mixture(m) => m.sample(rng),
        }
    }
}

/// Gaussian sentence VAE: BiGRU inference network, GRU decoder initialised
/// from `tanh(affine(z))`, embeddings shared by encoder, decoder and output.
#[derive(Clone, Debug)]
pub struct SenVae {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub prior: PriorSpec,
    pub params: ParamStore,
    dec: Decoder,
    enc: Encoder,
    init_w: ParamId,
    init_b: ParamId,
    prior_ids: PriorIds,
}

impl SenVae {
    /// Fresh model. For a VampPrior built with [`init_vamp_pseudo_inputs`],
    /// pass the returned tensor as `vamp_inputs`; otherwise pseudo inputs
    /// are initialised from `seed`.
    pub fn new(
        config: &ModelConfig,
        vocab_size: usize,
        prior: PriorSpec,
        vamp_inputs: Option<Tensor>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = ParamStore::new();
        let dec = Decoder::register(&mut params, &mut rng, config, vocab_size);
        let enc = Encoder::register(&mut params, &mut rng, config);
        let (dz, h) = (config.latent_dim, config.dec_hidden);
        let init_w = params.add("dec.init.w", fan_in_init(&mut rng, dz, h, dz));
        let init_b = params.add("dec.init.b", Tensor::zeros(&[1, h]));
        let prior_ids = match &prior {
            PriorSpec::Standard => PriorIds::Standard,
            PriorSpec::Mog { components } => {
                if *components < 1 {
                    return Err(contract("mixture prior needs at least one component"));
                }
                let loc: Vec<f64> =
                    (0..components * dz).map(|_| rng.sample(StandardNormal)).collect();
                PriorIds::Mog {
                    loc: params.add("prior.mog.loc", Tensor::matrix(*components, dz, loc)?),
                    raw_scale: params.add(
                        "prior.mog.raw_scale",
                        Tensor::full(&[*components, dz], softplus_inv(1.0)),
                    ),
                }
            }
            PriorSpec::Vamp { lengths } => {
                if lengths.is_empty() || lengths.contains(&0) {
                    return Err(contract("vamp pseudo inputs need positive lengths"));
                }
                let t = match vamp_inputs {
                    Some(t) => t,
                    None => vamp_inputs_init(lengths, config.emb_dim, &mut rng),
                };
                let t_max = *lengths.iter().max().expect("non-empty");
                if t.shape() != [t_max * lengths.len(), config.emb_dim] {
                    return Err(contract(format!(
                        "pseudo inputs have shape {:?}, expected [{}, {}]",
                        t.shape(),
                        t_max * lengths.len(),
                        config.emb_dim
                    )));
                }
                PriorIds::Vamp {
                    inputs: params.add("prior.vamp.inputs", t),
                    lengths: lengths.clone(),
                }
            }
        };
        Ok(Self {
            config: config.clone(),
            vocab_size,
            prior,
            params,
            dec,
            enc,
            init_w,
            init_b,
            prior_ids,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Posterior parameters `(loc, scale)` for every sentence of the batch.
    pub fn encode<'t>(&self, p: &Bound<'t>, batch: &Batch) -> Result<(Var<'t>, Var<'t>)> {
        if batch.size() == 0 {
            return Err(contract("empty batch"));
        }
        let b = batch.size();
        let steps = batch.lengths.iter().copied().max().unwrap_or(0);
        let mut ids = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for k in 0..b {
                ids.push(if t < batch.lengths[k] { batch.ids[k][t + 1] } else { PAD });
            }
        }
        let tape = p[self.dec.emb].tape();
        let x = if steps > 0 {
            p[self.dec.emb].gather_rows(&ids)?
        } else {
            tape.constant(Tensor::zeros(&[0, self.config.emb_dim]))
        };
        let masks = step_masks(tape, &batch.lengths, steps);
        self.enc.run(p, x, &masks, b)
    }

    /// Numeric posteriors for a list of encoded sentences.
    pub fn posteriors(&self, sentences: &[Vec<usize>]) -> Result<Vec<DiagGaussian>> {
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let refs: Vec<&[usize]> = sentences.iter().map(Vec::as_slice).collect();
        let batch = Batch::from_sentences(&refs, (0..sentences.len()).collect());
        let (loc, scale) = self.encode(&p, &batch)?;
        let (loc, scale) = (loc.value(), scale.value());
        (0..sentences.len())
            .map(|i| DiagGaussian::new(loc.row_slice(i).to_vec(), scale.row_slice(i).to_vec()))
            .collect()
    }

    fn initial_states<'t>(&self, p: &Bound<'t>, z: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let b = z.value().rows();
        let mut h = vec![z.matmul(&p[self.init_w])?.add(&p[self.init_b])?.tanh()];
        h.extend(self.dec.zero_states(z.tape(), b, 1));
        Ok(h)
    }

    /// Teacher-forced logits given one code per sentence (`B x D_z`).
    pub fn logits<'t>(
        &self,
        p: &Bound<'t>,
        z: &Var<'t>,
        batch: &Batch,
        reg: Option<&mut Regularizer<'_>>,
    ) -> Result<Var<'t>> {
        let (steps, inputs, _, _) = teacher_forcing(batch);
        self.dec.logits(p, &self.initial_states(p, z)?, steps, inputs, reg)
    }

    /// `-log P(x | z)` per sentence, `B x 1`.
    pub fn nll<'t>(
        &self,
        p: &Bound<'t>,
        z: &Var<'t>,
        batch: &Batch,
        reg: Option<&mut Regularizer<'_>>,
    ) -> Result<Var<'t>> {
        if z.value().rows() != batch.size() {
            return Err(contract(format!(
                "{} codes for {} sentences",
                z.value().rows(),
                batch.size()
            )));
        }
        self.dec.nll(p, &self.initial_states(p, z)?, batch, reg)
    }

    /// Mixture components `(locs, scales)`, each `C x D_z`, for MoG and
    /// VampPrior; `None` for the standard prior.
    pub fn prior_components<'t>(&self, p: &Bound<'t>) -> Result<Option<(Var<'t>, Var<'t>)>> {
        match &self.prior_ids {
            PriorIds::Standard => Ok(None),
            PriorIds::Mog { loc, raw_scale } => Ok(Some((p[*loc], p[*raw_scale].softplus()))),
            PriorIds::Vamp { inputs, lengths } => {
                let t_max = *lengths.iter().max().expect("non-empty");
                let masks = step_masks(p[*inputs].tape(), lengths, t_max);
                Ok(Some(self.enc.run(p, p[*inputs], &masks, lengths.len())?))
            }
        }
    }

    /// `log p(z)` for every row of `z`, `N x 1`.
    pub fn prior_log_prob<'t>(&self, p: &Bound<'t>, z: &Var<'t>) -> Result<Var<'t>> {
        match self.prior_components(p)? {
            None => Ok(distributions::standard_log_prob_rows(z)),
            Some((locs, scales)) => distributions::mixture_log_prob_rows(z, &locs, &scales),
        }
    }

    /// Current prior as a plain numeric density.
    pub fn prior_density(&self) -> Result<PriorDensity> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        match self.prior_components(&p)? {
            None => Ok(PriorDensity::Standard(DiagGaussian::standard(self.latent_dim()))),
            Some((locs, scales)) => {
                let (l, s) = (locs.value(), scales.value());
                let comps = (0..l.rows())
                    .map(|c| DiagGaussian::new(l.row_slice(c).to_vec(), s.row_slice(c).to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(PriorDensity::Mixture(MixtureOfGaussians::new(comps)?))
            }
        }
    }

    pub fn sample_prior(&self, n: usize, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
        let prior = self.prior_density()?;
        Ok((0..n).map(|_| prior.sample(rng)).collect())
    }

    /// Decode one sentence per code (`zs` rows) up to `max_len` tokens.
    pub fn generate(
        &self,
        zs: &[Vec<f64>],
        mode: Decoding,
        max_len: usize,
        rng: &mut SeededRng,
    ) -> Result<Vec<Vec<usize>>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let z = tape.constant(Tensor::from_rows(zs)?);
        if z.value().cols() != self.latent_dim() {
            return Err(contract("code dimensionality differs from the model's"));
        }
        let h0 = self.initial_states(&p, &z)?;
        self.dec.generate(&p, h0, mode, max_len, rng)
    }

    /// Parameters of the generative input/output layers (embedding and
    /// output bias).
    pub fn io_layer_params(&self) -> [ParamId; 2] {
        [self.dec.emb, self.dec.out_b]
    }

    /// Decoder-init affine, the only path from `z` into the decoder.
    pub fn init_params(&self) -> [ParamId; 2] {
        [self.init_w, self.init_b]
    }
}
