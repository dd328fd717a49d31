//! Differentiable density terms recorded on a tape. Latent batches are
//! `[n, d]`; per-row results are `[n]`.

use super::{BERNOULLI_EPS, LN_2PI};
use crate::autodiff::Var;
use crate::error::Result;

/// Row-wise `log N(z; mean, exp(log_var))` for `[n, d]` inputs. `mean` and
/// `log_var` may be a single `[1, d]` row broadcast over the batch.
pub fn gaussian_log_prob<'t>(z: Var<'t>, mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    let d = *z.shape().last().unwrap_or(&1);
    let diff = z.sub(mean)?;
    let quad = diff.square()?.mul(log_var.neg()?.exp()?)?.sum_axis(1)?;
    quad.add(log_var.sum_axis(1)?)?
        .add_scalar(d as f64 * LN_2PI)?
        .scale(-0.5)
}

/// `mean + exp(log_var / 2) * eps`.
pub fn reparam<'t>(mean: Var<'t>, log_var: Var<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    log_var.scale(0.5)?.exp()?.mul(eps)?.add(mean)
}

/// Row-wise log-density of a Gaussian mixture with `[k, d]` component
/// parameters and `[k]` log-weights, evaluated by explicit pairwise
/// differences and log-sum-exp.
pub fn mixture_log_prob<'t>(
    z: Var<'t>,
    means: Var<'t>,
    log_vars: Var<'t>,
    log_weights: Var<'t>,
) -> Result<Var<'t>> {
    let s = z.shape()[0];
    let k = means.shape()[0];
    let zz = z.repeat_rows(k)?;
    let mm = means.tile_rows(s)?;
    let lv = log_vars.tile_rows(s)?;
    let comp = gaussian_log_prob(zz, mm, lv)?.reshape(vec![s, k])?;
    comp.add(log_weights)?.log_sum_exp(1)
}

/// Row-wise closed-form `KL(p || q)`.
pub fn kl_diag<'t>(
    mean_p: Var<'t>,
    log_var_p: Var<'t>,
    mean_q: Var<'t>,
    log_var_q: Var<'t>,
) -> Result<Var<'t>> {
    let d = *mean_p.shape().last().unwrap_or(&1);
    let inv_q = log_var_q.neg()?.exp()?;
    let ratio = log_var_p.sub(log_var_q)?.exp()?;
    let quad = mean_p.sub(mean_q)?.square()?.mul(inv_q)?;
    log_var_q
        .sub(log_var_p)?
        .add(ratio)?
        .add(quad)?
        .sum_axis(1)?
        .add_scalar(-(d as f64))?
        .scale(0.5)
}

/// Row-wise `(KL(p || q) + KL(q || p)) / 2`.
pub fn sym_kl_diag<'t>(
    mean_p: Var<'t>,
    log_var_p: Var<'t>,
    mean_q: Var<'t>,
    log_var_q: Var<'t>,
) -> Result<Var<'t>> {
    let a = kl_diag(mean_p, log_var_p, mean_q, log_var_q)?;
    let b = kl_diag(mean_q, log_var_q, mean_p, log_var_p)?;
    a.add(b)?.scale(0.5)
}

/// Decoder head: `clamp(sigmoid(logits), eps, 1 - eps)`.
pub fn bernoulli_means<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    logits.sigmoid()?.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
}

/// Row-wise `sum_i x_i log m_i + (1 - x_i) log(1 - m_i)`.
pub fn bernoulli_log_prob<'t>(means: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let log_m = means.log()?;
    let log_1m = means.neg()?.add_scalar(1.0)?.log()?;
    let one_minus_x = x.neg()?.add_scalar(1.0)?;
    x.mul(log_m)?.add(one_minus_x.mul(log_1m)?)?.sum_axis(1)
}

/// Row-wise symmetric Bernoulli KL, `sum_i (a_i - b_i)(logit a_i - logit b_i) / 2`.
pub fn sym_kl_bernoulli<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let logit = |p: Var<'t>| -> Result<Var<'t>> { p.log()?.sub(p.neg()?.add_scalar(1.0)?.log()?) };
    a.sub(b)?.mul(logit(a)?.sub(logit(b)?)?)?.sum_axis(1)?.scale(0.5)
}

/// Log-softmax along the last axis of a `[n, k]` matrix.
pub fn log_softmax<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    let shape = logits.shape();
    let lse = logits.log_sum_exp(1)?.reshape(vec![shape[0], 1])?;
    // subtract per-row normalizer: repeat it across columns via a ones matmul
    let ones = logits.tape().constant_from(vec![1, shape[1]], vec![1.0; shape[1]])?;
    logits.sub(lse.matmul(ones)?)
}
