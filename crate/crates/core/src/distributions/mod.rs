//! Density algebra for diagonal Gaussians, factorized Bernoullis and finite
//! Gaussian mixtures.
//!
//! Plain functions here work on `f64` slices and are used for evaluation and
//! as references in tests; [`ops`] holds the differentiable counterparts that
//! record on a [`Tape`](crate::autodiff::Tape).

pub mod ops;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Bernoulli means are kept inside `[BERNOULLI_EPS, 1 - BERNOULLI_EPS]`.
pub const BERNOULLI_EPS: f64 = 1e-6;

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, found })
    }
}

/// `log(sum(exp(xs)))`, ignoring `-inf` entries; `-inf` when all are.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), log_var.len())?;
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "DiagGaussian" });
        }
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let lv = 2.0 * std.ln();
        let d = mean.len();
        DiagGaussian {
            mean,
            log_var: vec![lv; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        let mut acc = 0.0;
        for ((m, lv), z) in self.mean.iter().zip(&self.log_var).zip(z) {
            let d = z - m;
            acc += LN_2PI + lv + d * d * (-lv).exp();
        }
        Ok(-0.5 * acc)
    }

    /// `mean + exp(log_var / 2) * eps`.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.transform(&eps)
    }

    pub fn entropy(&self) -> f64 {
        0.5 * self.log_var.iter().map(|lv| 1.0 + LN_2PI + lv).sum::<f64>()
    }
}

/// Reparametrized draw `z = mean + exp(log_var / 2) * eps`, `eps ~ N(0, I)`.
pub fn reparam_sample<R: Rng + ?Sized>(g: &DiagGaussian, rng: &mut R) -> Vec<f64> {
    g.sample(rng)
}

pub fn gaussian_log_prob(g: &DiagGaussian, z: &[f64]) -> Result<f64> {
    g.log_prob(z)
}

/// Closed-form `KL(p || q)` for diagonal Gaussians.
pub fn kl_diag_gaussians(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let (mp, lp, mq, lq) = (p.mean[i], p.log_var[i], q.mean[i], q.log_var[i]);
        let d = mp - mq;
        acc += lq - lp + ((lp - lq).exp() + d * d * (-lq).exp()) - 1.0;
    }
    Ok(0.5 * acc)
}

/// `(KL(p || q) + KL(q || p)) / 2`.
pub fn sym_kl_diag_gaussians(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    Ok(0.5 * (kl_diag_gaussians(p, q)? + kl_diag_gaussians(q, p)?))
}

/// Factorized Bernoulli with clamped means.
#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliVec {
    means: Vec<f64>,
}

impl BernoulliVec {
    pub fn new(means: Vec<f64>) -> Result<Self> {
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite { op: "BernoulliVec" });
        }
        Ok(BernoulliVec {
            means: means
                .into_iter()
                .map(|m| m.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS))
                .collect(),
        })
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self
            .means
            .iter()
            .zip(x)
            .map(|(m, x)| x * m.ln() + (1.0 - x) * (1.0 - m).ln())
            .sum())
    }
}

pub fn bernoulli_log_prob(b: &BernoulliVec, x: &[f64]) -> Result<f64> {
    b.log_prob(x)
}

/// Symmetric KL between factorized Bernoullis:
/// `sum_i (a_i - b_i) (logit a_i - logit b_i) / 2`.
pub fn kl_bernoulli_sym(a: &BernoulliVec, b: &BernoulliVec) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let logit = |p: f64| p.ln() - (1.0 - p).ln();
    Ok(0.5
        * a.means
            .iter()
            .zip(&b.means)
            .map(|(p, q)| (p - q) * (logit(*p) - logit(*q)))
            .sum::<f64>())
}

/// Finite mixture of diagonal Gaussians with log-space weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMixture {
    log_weights: Vec<f64>,
    components: Vec<DiagGaussian>,
}

impl FiniteMixture {
    /// `weights` must lie on the simplex (sum to 1 within 1e-9).
    pub fn new(weights: &[f64], components: Vec<DiagGaussian>) -> Result<Self> {
        check_dim(weights.len(), components.len())?;
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "mixture weights must be nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Self::from_log_weights(weights.iter().map(|w| w.ln()).collect(), components)
    }

    /// Builds from log-weights, normalizing them.
    pub fn from_log_weights(log_weights: Vec<f64>, components: Vec<DiagGaussian>) -> Result<Self> {
        check_dim(log_weights.len(), components.len())?;
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture needs at least one component".into()))?;
        let d = first.dim();
        for c in &components {
            check_dim(d, c.dim())?;
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::NonFinite { op: "FiniteMixture" });
        }
        let norm = log_sum_exp(&log_weights);
        if !norm.is_finite() {
            return Err(Error::InvalidArgument("mixture has no mass".into()));
        }
        Ok(FiniteMixture {
            log_weights: log_weights.iter().map(|w| w - norm).collect(),
            components,
        })
    }

    pub fn uniform(components: Vec<DiagGaussian>) -> Result<Self> {
        let n = components.len();
        Self::from_log_weights(vec![-(n as f64).ln(); n], components)
    }

    pub fn single(component: DiagGaussian) -> Self {
        FiniteMixture {
            log_weights: vec![0.0],
            components: vec![component],
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Components with strictly positive weight, as `(log_weight, component)`.
    pub fn active(&self) -> impl Iterator<Item = (f64, &DiagGaussian)> {
        self.log_weights
            .iter()
            .copied()
            .zip(&self.components)
            .filter(|(w, _)| w.is_finite())
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        let terms = self
            .active()
            .map(|(lw, c)| c.log_prob(z).map(|lp| lw + lp))
            .collect::<Result<Vec<f64>>>()?;
        Ok(log_sum_exp(&terms))
    }

    /// Ancestral sample; returns the latent and the component index.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let k = if self.len() == 1 {
            0
        } else {
            let dist = WeightedIndex::new(self.weights()).expect("normalized weights");
            dist.sample(rng)
        };
        (self.components[k].sample(rng), k)
    }

    /// Mixture of `(weight_a * self) + ((1 - weight_a) * other)`; components
    /// with zero total weight are dropped.
    pub fn blend(&self, weight_a: f64, other: &FiniteMixture) -> Result<FiniteMixture> {
        let mut lw = Vec::new();
        let mut comps = Vec::new();
        if weight_a > 0.0 {
            for (w, c) in self.active() {
                lw.push(w + weight_a.ln());
                comps.push(c.clone());
            }
        }
        if weight_a < 1.0 {
            for (w, c) in other.active() {
                lw.push(w + (1.0 - weight_a).ln());
                comps.push(c.clone());
            }
        }
        FiniteMixture::from_log_weights(lw, comps)
    }
}

pub fn mixture_log_prob(m: &FiniteMixture, z: &[f64]) -> Result<f64> {
    m.log_prob(z)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> McEstimate {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        McEstimate {
            mean,
            std_error: (var / n as f64).sqrt(),
            n,
        }
    }

    /// `|a - b| <= k * sqrt(se_a^2 + se_b^2)`.
    pub fn agrees_with(&self, other: &McEstimate, k: f64) -> bool {
        (self.mean - other.mean).abs() <= k * self.std_error.hypot(other.std_error)
    }
}

/// Monte-Carlo `KL(p || q) = E_p[log p - log q]` from `n` draws of `p`.
pub fn kl_mc<R, P, Q, S>(log_p: P, log_q: Q, mut sample_p: S, n: usize, rng: &mut R) -> Result<McEstimate>
where
    R: Rng + ?Sized,
    P: Fn(&[f64]) -> Result<f64>,
    Q: Fn(&[f64]) -> Result<f64>,
    S: FnMut(&mut R) -> Vec<f64>,
{
    if n < 2 {
        return Err(Error::InvalidArgument("kl_mc needs n >= 2".into()));
    }
    let mut ratios = Vec::with_capacity(n);
    for _ in 0..n {
        let z = sample_p(rng);
        let r = log_p(&z)? - log_q(&z)?;
        if !r.is_finite() {
            return Err(Error::NonFiniteSample { value: r, sample: z });
        }
        ratios.push(r);
    }
    Ok(McEstimate::from_samples(&ratios))
}

/// MC estimate of `KL(p || q)` between two mixtures.
pub fn kl_mixtures_mc<R: Rng + ?Sized>(
    p: &FiniteMixture,
    q: &FiniteMixture,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    kl_mc(|z| p.log_prob(z), |z| q.log_prob(z), |r| p.sample(r).0, n, rng)
}
