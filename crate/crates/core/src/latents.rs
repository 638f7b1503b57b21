//! Per-cell latent variables, their priors, and reparameterized samplers.
//!
//! Tensors are laid out `(B, G, ...)` with `G = grid_h * grid_w` cells in
//! row-major order (cell `row * grid_w + col`).

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{Config, ModelConfig};
use crate::error::{Error, Result};

/// Smallest and largest uniform draw used for Gumbel/logistic noise.
const UNIFORM_EPS: f64 = 1e-12;

/// Posterior distribution parameters emitted by the encoder.
#[derive(Debug, Clone)]
pub struct PosteriorParams {
    /// `(B, G)` raw presence logit.
    pub pres_logit: Tensor,
    /// `(B, G)` sigmoid of `pres_logit`.
    pub pres_prob: Tensor,
    /// `(B, G, 4)`
    pub where_mean: Tensor,
    pub where_log_std: Tensor,
    /// `(B, G)`
    pub depth_mean: Tensor,
    pub depth_log_std: Tensor,
    /// `(B, G, C)`
    pub cat_logits: Tensor,
    /// `(B, G, A)`
    pub what_mean: Tensor,
    pub what_log_std: Tensor,
}

/// One draw of every latent for every cell.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    /// `(B, G)` relaxed or hard presence.
    pub z_pres: Tensor,
    /// `(B, G, A)`
    pub z_what: Tensor,
    /// `(B, G, C)` relaxed or hard one-hot.
    pub z_cat: Tensor,
    /// `(B, G, 4)` raw offsets and log-scales, see [`crate::inference::decode_where`].
    pub z_where: Tensor,
    /// `(B, G)`
    pub z_depth: Tensor,
}

impl LatentGrid {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.z_pres.dim(0)?)
    }

    pub fn num_cells(&self) -> Result<usize> {
        Ok(self.z_pres.dim(1)?)
    }

    /// Detached copy, safe to edit without touching any graph.
    pub fn detach(&self) -> Self {
        Self {
            z_pres: self.z_pres.detach(),
            z_what: self.z_what.detach(),
            z_cat: self.z_cat.detach(),
            z_where: self.z_where.detach(),
            z_depth: self.z_depth.detach(),
        }
    }

    /// Checks `z_pres ∈ [0,1]` and that every `z_cat` row sums to one.
    pub fn check_invariants(&self) -> Result<()> {
        let pres: Vec<f64> = self.z_pres.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        if pres.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Precondition("z_pres outside [0, 1]".into()));
        }
        let sums: Vec<f64> = self
            .z_cat
            .to_dtype(DType::F64)?
            .sum(D::Minus1)?
            .flatten_all()?
            .to_vec1()?;
        if sums.iter().any(|s| (s - 1.0).abs() > 1e-5) {
            return Err(Error::Precondition("z_cat row does not sum to 1".into()));
        }
        Ok(())
    }
}

/// Learnable per-cluster Gaussian parameters of the appearance prior.
///
/// Both matrices are `(C, A)`; a category vector selects (or mixes) rows
/// through a bias-free linear map.
#[derive(Debug, Clone)]
pub struct MixturePrior {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
}

impl MixturePrior {
    pub fn num_clusters(&self) -> Result<usize> {
        Ok(self.mu.dim(0)?)
    }

    pub fn what_dim(&self) -> Result<usize> {
        Ok(self.mu.dim(1)?)
    }

    /// Prior mean and standard deviation of `z_what` given `z_cat (..., C)`.
    ///
    /// A one-hot `e_k` returns row `k` exactly; a relaxed vector returns the
    /// convex combination of means and `exp` of the combined log-scales.
    pub fn params(&self, z_cat: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mu, log_sigma) = self.params_log(z_cat)?;
        Ok((mu, log_sigma.exp()?))
    }

    /// As [`Self::params`] but returning the clamped log-scale.
    pub fn params_log(&self, z_cat: &Tensor) -> Result<(Tensor, Tensor)> {
        let dims = z_cat.dims().to_vec();
        let c = *dims.last().ok_or_else(|| Error::Shape("empty z_cat".into()))?;
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let flat = z_cat.reshape((lead, c))?;
        let a = self.what_dim()?;
        let mu = flat.matmul(&self.mu)?;
        let log_sigma = flat
            .matmul(&self.log_sigma)?
            .clamp(self.log_sigma_min, self.log_sigma_max)?;
        let mut out_dims = dims[..dims.len() - 1].to_vec();
        out_dims.push(a);
        Ok((mu.reshape(out_dims.clone())?, log_sigma.reshape(out_dims)?))
    }

    /// Means and standard deviations as nested vectors, `[k][d]`.
    pub fn to_vecs(&self) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mu: Vec<Vec<f64>> = self.mu.to_dtype(DType::F64)?.to_vec2()?;
        let sigma: Vec<Vec<f64>> = self
            .log_sigma
            .clamp(self.log_sigma_min, self.log_sigma_max)?
            .exp()?
            .to_dtype(DType::F64)?
            .to_vec2()?;
        Ok((mu, sigma))
    }
}

/// `mixture_params` as a free function.
pub fn mixture_params(mp: &MixturePrior, z_cat: &Tensor) -> Result<(Tensor, Tensor)> {
    mp.params(z_cat)
}

/// `log Σ_k π_k Π_d N(x_d; μ_kd, σ_kd²)`, evaluated with log-sum-exp.
pub fn mixture_log_density(mp: &MixturePrior, pi: &[f64], x: &[f64]) -> Result<f64> {
    let (mu, sigma) = mp.to_vecs()?;
    mixture_log_density_raw(&mu, &sigma, pi, x)
}

pub fn mixture_log_density_raw(
    mu: &[Vec<f64>],
    sigma: &[Vec<f64>],
    pi: &[f64],
    x: &[f64],
) -> Result<f64> {
    if mu.len() != pi.len() || sigma.len() != pi.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} components",
            pi.len(),
            mu.len()
        )));
    }
    let terms: Vec<f64> = mu
        .iter()
        .zip(sigma)
        .zip(pi)
        .map(|((m, s), &p)| {
            p.ln()
                + x.iter()
                    .zip(m)
                    .zip(s)
                    .map(|((&xd, &md), &sd)| normal_log_pdf(xd, md, sd))
                    .sum::<f64>()
        })
        .collect();
    Ok(log_sum_exp(&terms))
}

pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Fixed priors plus the learnable mixture.
#[derive(Debug, Clone)]
pub struct PriorParams {
    pub pres_prob: f64,
    pub cat_pi: Vec<f64>,
    pub where_mean: f64,
    pub where_std: f64,
    pub depth_mean: f64,
    pub depth_std: f64,
    pub mixture: MixturePrior,
}

impl PriorParams {
    /// Priors in effect at `step`, with the presence prior taken from its schedule.
    pub fn at_step(cfg: &Config, mixture: MixturePrior, step: u64) -> Self {
        let c = cfg.model.num_clusters;
        Self {
            pres_prob: cfg.pres_prior_at(step),
            cat_pi: vec![1.0 / c as f64; c],
            where_mean: cfg.prior.where_mean,
            where_std: cfg.prior.where_std,
            depth_mean: cfg.prior.depth_mean,
            depth_std: cfg.prior.depth_std,
            mixture,
        }
    }
}

/// Draws a standard normal tensor from `rng`.
pub fn standard_normal<R: Rng + ?Sized>(
    shape: &[usize],
    dtype: DType,
    device: &Device,
    rng: &mut R,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
}

fn gumbel_noise<R: Rng + ?Sized>(
    shape: &[usize],
    dtype: DType,
    device: &Device,
    rng: &mut R,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| -(-open_uniform(rng).ln()).ln()).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// `mean + exp(log_std) * eps` with `eps ~ N(0, I)` drawn from `rng`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &Tensor,
    log_std: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let eps = standard_normal(mean.dims(), mean.dtype(), mean.device(), rng)?;
    Ok((mean + (log_std.exp()? * eps)?)?)
}

/// One-hot of the argmax along the last dimension, as a constant.
pub fn one_hot_argmax(x: &Tensor) -> Result<Tensor> {
    let k = x.dim(D::Minus1)?;
    let idx = x.argmax_keepdim(D::Minus1)?;
    let range = Tensor::arange(0u32, k as u32, x.device())?;
    let shape = x.dims().to_vec();
    let mut rshape = vec![1; shape.len()];
    rshape[shape.len() - 1] = k;
    let hot = idx
        .broadcast_eq(&range.reshape(rshape)?)?
        .to_dtype(x.dtype())?;
    Ok(hot.broadcast_as(shape)?.contiguous()?)
}

/// Forward value `hard`, gradient of `soft`.
pub fn straight_through(hard: &Tensor, soft: &Tensor) -> Result<Tensor> {
    Ok((hard + (soft - soft.detach())?)?)
}

/// Gumbel-Softmax sample along the last dimension of `logits`.
///
/// With `hard`, the forward value is the one-hot argmax of the relaxed
/// sample and gradients flow through the relaxed sample.
pub fn sample_gumbel_softmax<R: Rng + ?Sized>(
    logits: &Tensor,
    temperature: f64,
    rng: &mut R,
    hard: bool,
) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let g = gumbel_noise(logits.dims(), logits.dtype(), logits.device(), rng)?;
    let soft = candle_nn::ops::softmax(&((logits + g)? / temperature)?, D::Minus1)?;
    if hard {
        straight_through(&one_hot_argmax(&soft)?, &soft)
    } else {
        Ok(soft)
    }
}

/// Binary Gumbel-Softmax on a presence logit: the first component of a
/// two-way relaxation with logits `(logit, 0)`.
pub fn sample_relaxed_bernoulli<R: Rng + ?Sized>(
    logit: &Tensor,
    temperature: f64,
    rng: &mut R,
    hard: bool,
) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    // The difference of two Gumbel draws is logistic.
    let n = logit.elem_count();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let u = open_uniform(rng);
            u.ln() - (1.0 - u).ln()
        })
        .collect();
    let noise = Tensor::from_vec(v, logit.dims(), logit.device())?.to_dtype(logit.dtype())?;
    let soft = candle_nn::ops::sigmoid(&((logit + noise)? / temperature)?)?;
    if hard {
        let hard_v = soft.ge(0.5)?.to_dtype(soft.dtype())?;
        straight_through(&hard_v, &soft)
    } else {
        Ok(soft)
    }
}

/// Scalar Gumbel-Softmax over a slice of logits.
pub fn gumbel_softmax<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    rng: &mut R,
    hard: bool,
) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Argument("no logits".into()));
    }
    let perturbed: Vec<f64> = logits
        .iter()
        .map(|l| (l - (-open_uniform(rng).ln()).ln()) / temperature)
        .collect();
    let lse = log_sum_exp(&perturbed);
    let soft: Vec<f64> = perturbed.iter().map(|p| (p - lse).exp()).collect();
    if hard {
        let k = argmax(&soft);
        Ok((0..soft.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
    } else {
        Ok(soft)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Builds the mixture matrices from explicit values (tests, tools).
pub fn mixture_from_rows(
    mu: &[Vec<f64>],
    log_sigma: &[Vec<f64>],
    cfg: &ModelConfig,
    dtype: DType,
) -> Result<MixturePrior> {
    let c = mu.len();
    let a = mu.first().map_or(0, |r| r.len());
    let flat = |m: &[Vec<f64>]| m.iter().flatten().copied().collect::<Vec<f64>>();
    Ok(MixturePrior {
        mu: Tensor::from_vec(flat(mu), (c, a), &Device::Cpu)?.to_dtype(dtype)?,
        log_sigma: Tensor::from_vec(flat(log_sigma), (c, a), &Device::Cpu)?.to_dtype(dtype)?,
        log_sigma_min: cfg.log_std_min,
        log_sigma_max: cfg.log_std_max,
    })
}
