//! The training loss: reconstruction, the five KL terms, the overlap
//! penalty and their weighted sum.
//!
//! Per-cell KLs for location, depth, category and appearance are weighted by
//! the soft presence probability; the presence KL is not. Every term is
//! summed over cells and averaged over the batch.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::generation::overlap_penalty;
use crate::latents::{LatentGrid, MixturePrior, PosteriorParams, PriorParams};
use crate::model::ForwardOutput;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside Bernoulli KLs.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub overlap: f64,
    pub pres: f64,
    #[serde(rename = "where")]
    pub where_: f64,
    pub depth: f64,
    pub cat: f64,
    pub what: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Component values in the order recon, overlap, pres, where, depth, cat, what.
    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("recon", self.recon),
            ("overlap", self.overlap),
            ("pres", self.pres),
            ("where", self.where_),
            ("depth", self.depth),
            ("cat", self.cat),
            ("what", self.what),
        ]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.alpha_recon * self.recon
            + w.alpha_overlap * self.overlap
            + w.alpha_pres * self.pres
            + w.alpha_where * self.where_
            + w.alpha_depth * self.depth
            + w.alpha_cat * self.cat
            + w.alpha_what * self.what
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|(_, v)| v.is_finite()) && self.total.is_finite()
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.recon += b.recon / n;
            m.overlap += b.overlap / n;
            m.pres += b.pres / n;
            m.where_ += b.where_ / n;
            m.depth += b.depth / n;
            m.cat += b.cat / n;
            m.what += b.what / n;
            m.total += b.total / n;
        }
        m
    }
}

/// Scalar loss tensors, still attached to the graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub recon: Tensor,
    pub overlap: Tensor,
    pub pres: Tensor,
    pub where_: Tensor,
    pub depth: Tensor,
    pub cat: Tensor,
    pub what: Tensor,
}

impl LossTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> Result<Tensor> {
        let parts = [
            (&self.recon, w.alpha_recon),
            (&self.overlap, w.alpha_overlap),
            (&self.pres, w.alpha_pres),
            (&self.where_, w.alpha_where),
            (&self.depth, w.alpha_depth),
            (&self.cat, w.alpha_cat),
            (&self.what, w.alpha_what),
        ];
        let mut total = (parts[0].0 * parts[0].1)?;
        for (t, a) in &parts[1..] {
            total = (total + (*t * *a)?)?;
        }
        Ok(total)
    }

    pub fn breakdown(&self, w: &LossWeights) -> Result<LossBreakdown> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let mut b = LossBreakdown {
            recon: s(&self.recon)?,
            overlap: s(&self.overlap)?,
            pres: s(&self.pres)?,
            where_: s(&self.where_)?,
            depth: s(&self.depth)?,
            cat: s(&self.cat)?,
            what: s(&self.what)?,
            total: 0.0,
        };
        b.total = b.weighted_total(w);
        Ok(b)
    }
}

pub fn kl_bernoulli(q_prob: f64, p_prob: f64) -> f64 {
    let q = q_prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let p = p_prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
}

pub fn kl_gaussian_diag(q_mean: &[f64], q_log_std: &[f64], p_mean: &[f64], p_log_std: &[f64]) -> f64 {
    (0..q_mean.len())
        .map(|d| {
            let (qs2, ps2) = ((2.0 * q_log_std[d]).exp(), (2.0 * p_log_std[d]).exp());
            let dm = q_mean[d] - p_mean[d];
            p_log_std[d] - q_log_std[d] + (qs2 + dm * dm) / (2.0 * ps2) - 0.5
        })
        .sum()
}

/// `KL(softmax(q_logits) || pi)`. Logits may be `-inf`; zero-probability
/// categories contribute nothing.
pub fn kl_categorical(q_logits: &[f64], pi: &[f64]) -> f64 {
    let m = q_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = q_logits.iter().map(|l| (l - m).exp()).sum();
    let log_z = m + z.ln();
    q_logits
        .iter()
        .zip(pi)
        .map(|(&l, &p)| {
            let log_q = l - log_z;
            let q = log_q.exp();
            if q == 0.0 {
                0.0
            } else {
                q * (log_q - p.ln())
            }
        })
        .sum()
}

/// Appearance KL averaged over category samples; each sample picks the prior
/// component mix through [`MixturePrior::params_log`].
pub fn kl_what_term(
    what_mean: &[f64],
    what_log_std: &[f64],
    z_cat_samples: &[Vec<f64>],
    mp: &MixturePrior,
) -> Result<f64> {
    if z_cat_samples.is_empty() {
        return Err(Error::Argument("at least one category sample is needed".into()));
    }
    let mut acc = 0.0;
    for z in z_cat_samples {
        let zc = Tensor::from_vec(z.clone(), (1, z.len()), mp.mu.device())?.to_dtype(mp.mu.dtype())?;
        let (mu, ls) = mp.params_log(&zc)?;
        let mu: Vec<f64> = mu.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let ls: Vec<f64> = ls.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        acc += kl_gaussian_diag(what_mean, what_log_std, &mu, &ls);
    }
    Ok(acc / z_cat_samples.len() as f64)
}

/// Per-image reconstruction term `sum_p (x - x_hat)^2 / (2 std^2)`, shape `(B,)`.
pub fn reconstruction_per_image(x: &Tensor, x_hat: &Tensor, std: f64) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let b = x.dim(0)?;
    let sq = (x - x_hat)?.sqr()?.reshape((b, ()))?.sum(1)?;
    Ok((sq / (2.0 * std * std))?)
}

/// Batch mean of [`reconstruction_per_image`].
pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor, std: f64) -> Result<Tensor> {
    Ok(reconstruction_per_image(x, x_hat, std)?.mean_all()?)
}

/// Gaussian KL per element with scalar prior parameters.
fn kl_normal_scalar_prior(mean: &Tensor, log_std: &Tensor, p_mean: f64, p_std: f64) -> Result<Tensor> {
    let ps2 = p_std * p_std;
    let var_q = (log_std * 2.0)?.exp()?;
    let dm2 = mean.affine(1.0, -p_mean)?.sqr()?;
    let t = ((var_q + dm2)? / (2.0 * ps2))?;
    Ok((t - log_std)?.affine(1.0, p_std.ln() - 0.5)?)
}

/// Unweighted per-cell KLs, each `(B, G)`.
#[derive(Debug, Clone)]
pub struct CellKl {
    pub pres: Tensor,
    pub where_: Tensor,
    pub depth: Tensor,
    pub cat: Tensor,
    pub what: Tensor,
}

pub fn cell_kls(post: &PosteriorParams, latents: &LatentGrid, prior: &PriorParams) -> Result<CellKl> {
    let p = prior.pres_prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = post.pres_prob.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_q = q.affine(-1.0, 1.0)?;
    let pres = ((&q * q.affine(1.0 / p, 0.0)?.log()?)?
        + (&one_minus_q * one_minus_q.affine(1.0 / (1.0 - p), 0.0)?.log()?)?)?;

    let where_ = kl_normal_scalar_prior(
        &post.where_mean,
        &post.where_log_std,
        prior.where_mean,
        prior.where_std,
    )?
    .sum(D::Minus1)?;
    let depth = kl_normal_scalar_prior(
        &post.depth_mean,
        &post.depth_log_std,
        prior.depth_mean,
        prior.depth_std,
    )?;

    let c = post.cat_logits.dim(D::Minus1)?;
    if prior.cat_pi.len() != c {
        return Err(Error::Shape(format!(
            "category prior has {} entries for {c} categories",
            prior.cat_pi.len()
        )));
    }
    let log_q = candle_nn::ops::log_softmax(&post.cat_logits, D::Minus1)?;
    let log_pi: Vec<f64> = prior.cat_pi.iter().map(|p| p.ln()).collect();
    let log_pi = Tensor::from_vec(log_pi, c, log_q.device())?.to_dtype(log_q.dtype())?;
    let cat = (log_q.exp()? * log_q.broadcast_sub(&log_pi)?)?.sum(D::Minus1)?;

    let (mu, log_sigma) = prior.mixture.params_log(&latents.z_cat)?;
    let var_q = (&post.what_log_std * 2.0)?.exp()?;
    let var_p = (&log_sigma * 2.0)?.exp()?;
    let dm2 = (&post.what_mean - &mu)?.sqr()?;
    let what = ((log_sigma - &post.what_log_std)? + ((var_q + dm2)? / (var_p * 2.0)?)?)?
        .affine(1.0, -0.5)?
        .sum(D::Minus1)?;

    Ok(CellKl {
        pres,
        where_,
        depth,
        cat,
        what,
    })
}

/// Builds the loss terms from one forward pass.
pub fn loss_terms(out: &ForwardOutput, prior: &PriorParams, recon_std: f64) -> Result<LossTerms> {
    let kl = cell_kls(&out.posterior, &out.latents, prior)?;
    let w = &out.posterior.pres_prob;
    let reduce = |t: &Tensor| -> Result<Tensor> { Ok(t.sum(1)?.mean_all()?) };
    let weighted = |t: &Tensor| -> Result<Tensor> { reduce(&(t * w)?) };
    Ok(LossTerms {
        recon: reconstruction_loss(&out.input, &out.rendered.image, recon_std)?,
        overlap: overlap_penalty(&out.rendered.rgb, w)?,
        pres: reduce(&kl.pres)?,
        where_: weighted(&kl.where_)?,
        depth: weighted(&kl.depth)?,
        cat: weighted(&kl.cat)?,
        what: weighted(&kl.what)?,
    })
}

/// Weighted total and its breakdown.
pub fn total_loss(
    out: &ForwardOutput,
    prior: &PriorParams,
    weights: &LossWeights,
    recon_std: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let terms = loss_terms(out, prior, recon_std)?;
    let total = terms.weighted_total(weights)?;
    Ok((total, terms.breakdown(weights)?))
}
