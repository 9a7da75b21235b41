//! Diagonal Gaussians, uniform Gaussian mixtures, Monte-Carlo rate and the
//! MMD two-sample estimator.
//!
//! Each quantity exists twice: a plain numeric form over `&[f64]` (used by
//! evaluation and as test oracles) and a batched, differentiable form over
//! tape [`Var`]s whose rows are independent items.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{self, Tensor, Var};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Mean and standard error of a Monte-Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

pub trait Density {
    fn dim(&self) -> usize;
    fn log_prob(&self, z: &[f64]) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    loc: Vec<f64>,
    scale: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(loc: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if loc.len() != scale.len() {
            return Err(contract(format!(
                "loc has {} dims, scale has {}",
                loc.len(),
                scale.len()
            )));
        }
        if let Some(s) = scale.iter().find(|s| !(**s > 0.0)) {
            return Err(contract(format!("scale must be positive, got {s}")));
        }
        Ok(Self { loc, scale })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            loc: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn loc(&self) -> &[f64] {
        &self.loc
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// `loc + scale * noise`.
    pub fn reparam_sample(&self, noise: &[f64]) -> Vec<f64> {
        self.loc
            .iter()
            .zip(&self.scale)
            .zip(noise)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.reparam_sample(&noise)
    }
}

impl Density for DiagGaussian {
    fn dim(&self) -> usize {
        self.loc.len()
    }

    fn log_prob(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.loc)
            .zip(&self.scale)
            .map(|((z, m), s)| {
                let u = (z - m) / s;
                -0.5 * u * u - s.ln() - HALF_LN_2PI
            })
            .sum()
    }
}

/// Closed-form `KL(q || p)` in nats.
pub fn kl_diag_gaussian(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(contract(format!("kl between {} and {} dims", q.dim(), p.dim())));
    }
    Ok(q.loc
        .iter()
        .zip(&q.scale)
        .zip(p.loc.iter().zip(&p.scale))
        .map(|((mq, sq), (mp, sp))| {
            let vq = sq * sq;
            let vp = sp * sp;
            0.5 * (vq / vp + (mq - mp).powi(2) / vp - 1.0 + vp.ln() - vq.ln())
        })
        .sum())
}

/// Uniformly weighted mixture of diagonal Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureOfGaussians {
    components: Vec<DiagGaussian>,
}

impl MixtureOfGaussians {
    pub fn new(components: Vec<DiagGaussian>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(contract("mixture needs at least one component"));
        };
        if components.iter().any(|c| c.dim() != first.dim()) {
            return Err(contract("mixture components differ in dimensionality"));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let c = rng.random_range(0..self.components.len());
        self.components[c].sample(rng)
    }
}

impl Density for MixtureOfGaussians {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn log_prob(&self, z: &[f64]) -> f64 {
        let logs: Vec<f64> = self.components.iter().map(|c| c.log_prob(z)).collect();
        tensor::log_sum_exp(&logs) - (self.components.len() as f64).ln()
    }
}

/// `(1/n) sum_i [log q(z_i) - log p(z_i)]` with `z_i ~ q`.
pub fn mc_rate<R: Rng + ?Sized>(
    q: &DiagGaussian,
    prior: &dyn Density,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(contract("mc_rate needs at least one sample"));
    }
    if prior.dim() != q.dim() {
        return Err(contract("posterior and prior differ in dimensionality"));
    }
    let terms: Vec<f64> = (0..n_samples)
        .map(|_| {
            let z = q.sample(rng);
            q.log_prob(&z) - prior.log_prob(&z)
        })
        .collect();
    Ok(McEstimate::from_samples(&terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    GaussianRbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

impl KernelConfig {
    pub fn rbf(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(contract(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self {
            kind: KernelKind::GaussianRbf,
            bandwidth,
        })
    }

    /// RBF kernel whose bandwidth is the median pairwise distance of the
    /// pooled sample (1.0 if that median is zero).
    pub fn median_heuristic(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Self {
        let pooled: Vec<&[f64]> = xs.iter().chain(ys).map(Vec::as_slice).collect();
        Self {
            kind: KernelKind::GaussianRbf,
            bandwidth: median_distance(&pooled),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            KernelKind::GaussianRbf => {
                (-sq_dist(x, y) / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
        }
    }
}

fn median_distance(points: &[&[f64]]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len() / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(points[i], points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let m = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Unbiased (U-statistic) squared MMD. May be slightly negative.
pub fn mmd(xs: &[Vec<f64>], ys: &[Vec<f64>], kernel: &KernelConfig) -> Result<f64> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(contract(format!(
            "mmd needs at least 2 samples per set, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += kernel.eval(&s[i], &s[j]);
                }
            }
        }
        acc / (s.len() * (s.len() - 1)) as f64
    };
    // sorted summation makes the estimate exactly symmetric in (xs, ys)
    let mut cross: Vec<f64> = xs
        .iter()
        .flat_map(|x| ys.iter().map(move |y| kernel.eval(x, y)))
        .collect();
    cross.sort_by(f64::total_cmp);
    let cross = cross.iter().sum::<f64>() / (xs.len() * ys.len()) as f64;
    Ok(within(xs) + within(ys) - 2.0 * cross)
}

// ---- differentiable, batched forms -------------------------------------

/// `loc + scale * noise` over `B x D` rows.
pub fn reparam<'t>(loc: &Var<'t>, scale: &Var<'t>, noise: &Tensor) -> Result<Var<'t>> {
    let eps = loc.tape().constant(noise.clone());
    Ok(loc.add(&scale.mul(&eps)?)?)
}

/// Per-row `KL(N(loc, scale) || N(0, I))`, `B x 1`.
pub fn kl_standard_rows<'t>(loc: &Var<'t>, scale: &Var<'t>) -> Result<Var<'t>> {
    let var = scale.square();
    let terms = var
        .add(&loc.square())?
        .sub(&var.log()?)?
        .add_scalar(-1.0)
        .scale(0.5);
    Ok(terms.row_sums())
}

/// Per-row `KL(q || p)` between diagonal Gaussians, `B x 1`. `p` may be a
/// single row broadcast over the batch.
pub fn kl_diag_rows<'t>(
    q_loc: &Var<'t>,
    q_scale: &Var<'t>,
    p_loc: &Var<'t>,
    p_scale: &Var<'t>,
) -> Result<Var<'t>> {
    let vq = q_scale.square();
    let vp = p_scale.square();
    let ratio = vq.div(&vp)?;
    let mahal = q_loc.sub(p_loc)?.square().div(&vp)?;
    let logs = vp.log()?.sub(&vq.log()?)?;
    Ok(ratio.add(&mahal)?.add(&logs)?.add_scalar(-1.0).scale(0.5).row_sums())
}

/// Per-row `log N(z | loc, scale)`, `B x 1`.
pub fn log_prob_rows<'t>(z: &Var<'t>, loc: &Var<'t>, scale: &Var<'t>) -> Result<Var<'t>> {
    let d = z.value().cols() as f64;
    let u = z.sub(loc)?.div(scale)?;
    let quad = u.square().row_sums().scale(-0.5);
    let norm = scale.log()?.row_sums();
    Ok(quad.sub(&norm)?.add_scalar(-d * HALF_LN_2PI))
}

/// Per-row standard-normal log-density, `B x 1`.
pub fn standard_log_prob_rows<'t>(z: &Var<'t>) -> Var<'t> {
    let d = z.value().cols() as f64;
    z.square().row_sums().scale(-0.5).add_scalar(-d * HALF_LN_2PI)
}

/// Per-row uniform-mixture log-density; `locs`, `scales` are `C x D`.
pub fn mixture_log_prob_rows<'t>(
    z: &Var<'t>,
    locs: &Var<'t>,
    scales: &Var<'t>,
) -> Result<Var<'t>> {
    let c = locs.value().rows() as f64;
    Ok(z
        .gauss_log_pdf_pairwise(locs, scales)?
        .log_sum_exp_rows()
        .add_scalar(-c.ln()))
}

/// Differentiable unbiased squared MMD between the rows of `xs` and `ys`
/// under an RBF kernel of the given bandwidth.
pub fn mmd_var<'t>(xs: &Var<'t>, ys: &Var<'t>, bandwidth: f64) -> Result<Var<'t>> {
    let n = xs.value().rows();
    let m = ys.value().rows();
    if n < 2 || m < 2 {
        return Err(contract(format!(
            "mmd needs at least 2 samples per set, got {n} and {m}"
        )));
    }
    let gamma = -1.0 / (2.0 * bandwidth * bandwidth);
    let k = |a: &Var<'t>, b: &Var<'t>| -> Result<Var<'t>> {
        Ok(a.pairwise_sq_dist(b)?.scale(gamma).exp().sum())
    };
    // RBF diagonals are exactly one
    let kxx = k(xs, xs)?.add_scalar(-(n as f64)).scale(1.0 / (n * (n - 1)) as f64);
    let kyy = k(ys, ys)?.add_scalar(-(m as f64)).scale(1.0 / (m * (m - 1)) as f64);
    let kxy = k(xs, ys)?.scale(-2.0 / (n * m) as f64);
    Ok(kxx.add(&kyy)?.add(&kxy)?)
}

/// Median-heuristic bandwidth over the pooled rows of two tensors.
pub fn median_bandwidth(xs: &Tensor, ys: &Tensor) -> f64 {
    let pooled: Vec<&[f64]> = (0..xs.rows())
        .map(|i| xs.row_slice(i))
        .chain((0..ys.rows()).map(|i| ys.row_slice(i)))
        .collect();
    median_distance(&pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_gaussian(r: &mut ChaCha8Rng, d: usize) -> DiagGaussian {
        DiagGaussian::new(
            (0..d).map(|_| r.random_range(-1.5..1.5)).collect(),
            (0..d).map(|_| r.random_range(0.4..1.8)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(MixtureOfGaussians::new(vec![]).is_err());
        assert!(KernelConfig::rbf(0.0).is_err());
    }

    #[test]
    fn reparam_examples() {
        let q = DiagGaussian::new(vec![0.5, -2.0], vec![0.3, 4.0]).unwrap();
        assert_eq!(q.reparam_sample(&[0.0, 0.0]), vec![0.5, -2.0]);
        let std = DiagGaussian::standard(3);
        assert_eq!(std.reparam_sample(&[0.1, -0.7, 2.0]), vec![0.1, -0.7, 2.0]);
    }

    #[test]
    fn reparam_empirical_mean() {
        let q = DiagGaussian::new(vec![1.5, -0.5], vec![0.7, 2.0]).unwrap();
        let mut r = rng(3);
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| q.sample(&mut r)).collect();
        for d in 0..2 {
            let est = McEstimate::from_samples(&draws.iter().map(|z| z[d]).collect::<Vec<_>>());
            assert!((est.mean - q.loc()[d]).abs() < 4.0 * est.std_err);
        }
    }

    #[test]
    fn kl_examples() {
        let p = DiagGaussian::standard(1);
        assert_eq!(kl_diag_gaussian(&p, &p).unwrap(), 0.0);
        let q = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_diag_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut r = rng(11);
        for _ in 0..5 {
            let q = random_gaussian(&mut r, 3);
            let p = random_gaussian(&mut r, 3);
            let n = 100_000;
            let terms: Vec<f64> = (0..n)
                .map(|_| {
                    let z = q.sample(&mut r);
                    q.log_prob(&z) - p.log_prob(&z)
                })
                .collect();
            let est = McEstimate::from_samples(&terms);
            let exact = kl_diag_gaussian(&q, &p).unwrap();
            assert!((est.mean - exact).abs() < 3.0 * est.std_err, "{est:?} vs {exact}");
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_iff_equal() {
        let mut r = rng(5);
        for _ in 0..200 {
            let q = random_gaussian(&mut r, 4);
            let p = random_gaussian(&mut r, 4);
            assert!(kl_diag_gaussian(&q, &p).unwrap() > 1e-12);
            assert!(kl_diag_gaussian(&q, &q).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_examples() {
        let std = DiagGaussian::standard(1);
        assert!((std.log_prob(&[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-15);
        let mut r = rng(8);
        let c = random_gaussian(&mut r, 3);
        let one = MixtureOfGaussians::new(vec![c.clone()]).unwrap();
        let z = [0.2, -0.3, 1.1];
        assert_eq!(one.log_prob(&z), c.log_prob(&z));
    }

    #[test]
    fn mixture_matches_direct_sum() {
        let mut r = rng(21);
        let comps: Vec<DiagGaussian> = (0..3).map(|_| random_gaussian(&mut r, 2)).collect();
        let mix = MixtureOfGaussians::new(comps.clone()).unwrap();
        for _ in 0..50 {
            let z = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
            // direct density product and sum, no log-space tricks
            let mut total = 0.0;
            for c in &comps {
                let mut dens = 1.0;
                for d in 0..2 {
                    let (m, s) = (c.loc()[d], c.scale()[d]);
                    dens *= (-(z[d] - m).powi(2) / (2.0 * s * s)).exp()
                        / (s * (2.0 * std::f64::consts::PI).sqrt());
                }
                total += dens;
            }
            let direct = (total / 3.0).ln();
            assert!((mix.log_prob(&z) - direct).abs() < 1e-10);
            let best = comps.iter().map(|c| c.log_prob(&z)).fold(f64::NEG_INFINITY, f64::max);
            let lp = mix.log_prob(&z);
            assert!(lp >= best - 3f64.ln() - 1e-12 && lp <= best + 1e-12);
        }
    }

    #[test]
    fn mc_rate_examples() {
        let mut r = rng(13);
        let q = random_gaussian(&mut r, 4);
        let same = mc_rate(&q, &q, 500, &mut r).unwrap();
        assert!(same.mean.abs() <= 3.0 * same.std_err + 1e-12);
        let std = DiagGaussian::standard(4);
        let est = mc_rate(&q, &std, 20_000, &mut r).unwrap();
        let exact = kl_diag_gaussian(&q, &std).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.std_err);
        assert!(mc_rate(&q, &std, 0, &mut r).is_err());
    }

    #[test]
    fn mc_rate_variance_shrinks_like_one_over_n() {
        let mut r = rng(17);
        let q = random_gaussian(&mut r, 3);
        let std = DiagGaussian::standard(3);
        let spread = |n: usize, r: &mut ChaCha8Rng| {
            let reps: Vec<f64> = (0..200).map(|_| mc_rate(&q, &std, n, r).unwrap().mean).collect();
            let m = reps.iter().sum::<f64>() / 200.0;
            reps.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 199.0
        };
        let ratio = spread(10, &mut r) / spread(1000, &mut r);
        // expected ratio 100; sampling noise of a 200-rep variance is ~10%
        assert!(ratio > 60.0 && ratio < 160.0, "ratio {ratio}");
    }

    #[test]
    fn mmd_examples() {
        let mut r = rng(23);
        let draw = |r: &mut ChaCha8Rng, off: f64, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..2).map(|_| off + r.sample::<f64, _>(StandardNormal)).collect())
                .collect()
        };
        let xs = draw(&mut r, 0.0, 50);
        let ys = draw(&mut r, 0.0, 50);
        let k = KernelConfig::rbf(1.0).unwrap();
        assert_eq!(mmd(&xs, &ys, &k).unwrap(), mmd(&ys, &xs, &k).unwrap());
        assert!(mmd(&xs[..1], &ys, &k).is_err());

        let at_zero = vec![vec![0.0, 0.0]; 4];
        let far = vec![vec![10.0, 0.0]; 4];
        let est = mmd(&at_zero, &far, &k).unwrap();
        let expected = k.eval(&[0.0, 0.0], &[0.0, 0.0]) + k.eval(&[10.0, 0.0], &[10.0, 0.0])
            - 2.0 * k.eval(&[0.0, 0.0], &[10.0, 0.0]);
        assert!((est - expected).abs() < 1e-12 && est > 0.0);
    }

    fn row_tensor(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn batched_forms_match_plain_forms() {
        let mut r = rng(29);
        let qs: Vec<DiagGaussian> = (0..4).map(|_| random_gaussian(&mut r, 3)).collect();
        let p = random_gaussian(&mut r, 3);
        let tape = Tape::new();
        let loc = tape.constant(row_tensor(&qs.iter().map(|q| q.loc().to_vec()).collect::<Vec<_>>()));
        let scale = tape.constant(row_tensor(&qs.iter().map(|q| q.scale().to_vec()).collect::<Vec<_>>()));
        let ploc = tape.constant(Tensor::row(p.loc().to_vec()));
        let pscale = tape.constant(Tensor::row(p.scale().to_vec()));
        let kl = kl_diag_rows(&loc, &scale, &ploc, &pscale).unwrap().value();
        let kls = kl_standard_rows(&loc, &scale).unwrap().value();
        let std = DiagGaussian::standard(3);
        for (i, q) in qs.iter().enumerate() {
            assert!((kl.data()[i] - kl_diag_gaussian(q, &p).unwrap()).abs() < 1e-12);
            assert!((kls.data()[i] - kl_diag_gaussian(q, &std).unwrap()).abs() < 1e-12);
        }
        let z = tape.constant(row_tensor(&[vec![0.1, 0.2, -0.3], vec![1.0, -1.0, 0.5]]));
        let lp = log_prob_rows(&z, &ploc, &pscale).unwrap().value();
        let mix = mixture_log_prob_rows(&z, &loc, &scale).unwrap().value();
        let mog = MixtureOfGaussians::new(qs.clone()).unwrap();
        for i in 0..2 {
            let zi = z.value().row_slice(i).to_vec();
            assert!((lp.data()[i] - p.log_prob(&zi)).abs() < 1e-12);
            assert!((mix.data()[i] - mog.log_prob(&zi)).abs() < 1e-12);
            assert!((standard_log_prob_rows(&z).value().data()[i] - std.log_prob(&zi)).abs() < 1e-12);
        }
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| r.random_range(-0.5..1.5)).collect()).collect();
        let k = KernelConfig::median_heuristic(&xs, &ys);
        let mv = mmd_var(&tape.constant(row_tensor(&xs)), &tape.constant(row_tensor(&ys)), k.bandwidth).unwrap();
        assert!((mv.item() - mmd(&xs, &ys, &k).unwrap()).abs() < 1e-12);
        assert_eq!(median_bandwidth(&row_tensor(&xs), &row_tensor(&ys)), k.bandwidth);
    }

    #[test]
    fn batched_gradients_pass_finite_differences() {
        let mut r = rng(31);
        let mut rand_t = |rows: usize, lo: f64, hi: f64| {
            Tensor::matrix(rows, 3, (0..rows * 3).map(|_| r.random_range(lo..hi)).collect()).unwrap()
        };
        let (ql, qs, pl, ps) = (rand_t(4, -1.0, 1.0), rand_t(4, 0.4, 1.5), rand_t(1, -1.0, 1.0), rand_t(1, 0.5, 1.5));
        let z = rand_t(4, -1.5, 1.5);
        let check = |inputs: Vec<Tensor>, f: &dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>| {
            let rep = gradcheck::check(&inputs, 1e-5, |_, v| f(v).map_err(|e| match e {
                crate::Error::Tensor(t) => t,
                other => crate::tensor::TensorError::Contract(other.to_string()),
            }))
            .unwrap();
            assert!(rep.max_rel_error() < 1e-4, "{:?}", rep.rel_errors);
        };
        check(vec![ql.clone(), qs.clone(), pl.clone(), ps.clone()], &|v| {
            Ok(kl_diag_rows(&v[0], &v[1], &v[2], &v[3])?.sum())
        });
        check(vec![ql.clone(), qs.clone()], &|v| Ok(kl_standard_rows(&v[0], &v[1])?.sum()));
        check(vec![z.clone(), ql.clone(), qs.clone()], &|v| Ok(mixture_log_prob_rows(&v[0], &v[1], &v[2])?.sum()));
        check(vec![z.clone(), pl.clone(), ps.clone()], &|v| Ok(log_prob_rows(&v[0], &v[1], &v[2])?.sum()));
        check(vec![z, ql], &|v| Ok(mmd_var(&v[0], &v[1], 1.3)?));
    }
}
