//! The boosted mixture prior: components are encoder images of pseudo-inputs,
//! added greedily against a target built from past prior mass and encoded
//! current-task data.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::distributions::{log_sum_exp, ops, DiagGaussian, FiniteMixture, McEstimate};
use crate::error::{Error, Result};
use crate::vae::{Encoder, PriorVars};

/// One mixture component: a data-space pseudo-input and the encoder's
/// posterior at it, frozen when the component was last refreshed.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorComponent {
    pub pseudo_input: Vec<f64>,
    pub snapshot: DiagGaussian,
    pub log_weight: f64,
    pub task_id: usize,
}

impl PriorComponent {
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

/// Weighted list of [`PriorComponent`]s. An empty prior stands in for the
/// standard normal used before the first component is accepted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MixturePrior {
    components: Vec<PriorComponent>,
}

impl MixturePrior {
    pub fn new() -> Self {
        MixturePrior::default()
    }

    /// Normalizes the components' log-weights.
    pub fn from_components(mut components: Vec<PriorComponent>) -> Result<Self> {
        if let Some(first) = components.first() {
            let (d, n) = (first.snapshot.dim(), first.pseudo_input.len());
            for c in &components {
                if c.snapshot.dim() != d {
                    return Err(Error::DimMismatch { expected: d, found: c.snapshot.dim() });
                }
                if c.pseudo_input.len() != n {
                    return Err(Error::DimMismatch { expected: n, found: c.pseudo_input.len() });
                }
                if c.log_weight.is_nan() || c.log_weight == f64::INFINITY {
                    return Err(Error::NonFinite { op: "MixturePrior" });
                }
            }
            let lw: Vec<f64> = components.iter().map(|c| c.log_weight).collect();
            let norm = log_sum_exp(&lw);
            if !norm.is_finite() {
                return Err(Error::InvalidArgument("prior has no mass".into()));
            }
            for c in &mut components {
                c.log_weight -= norm;
            }
        }
        Ok(MixturePrior { components })
    }

    /// Like [`MixturePrior::from_components`] but keeps the log-weights as
    /// given; they must already sum to one within 1e-9.
    pub fn from_normalized(components: Vec<PriorComponent>) -> Result<Self> {
        MixturePrior::from_components(components.clone())?;
        let total: f64 = components.iter().map(PriorComponent::weight).sum();
        if !components.is_empty() && (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("prior weights sum to {total}")));
        }
        Ok(MixturePrior { components })
    }

    pub fn components(&self) -> &[PriorComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(PriorComponent::weight).collect()
    }

    pub fn latent_dim(&self) -> Option<usize> {
        self.components.first().map(|c| c.snapshot.dim())
    }

    /// Snapshot densities as a mixture. Errors on an empty prior.
    pub fn mixture(&self) -> Result<FiniteMixture> {
        FiniteMixture::from_log_weights(
            self.components.iter().map(|c| c.log_weight).collect(),
            self.components.iter().map(|c| c.snapshot.clone()).collect(),
        )
    }

    /// Like [`MixturePrior::mixture`], but a standard normal when empty.
    pub fn density(&self, latent_dim: usize) -> Result<FiniteMixture> {
        if self.is_empty() {
            Ok(FiniteMixture::single(DiagGaussian::standard(latent_dim)))
        } else {
            self.mixture()
        }
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        self.density(z.len())?.log_prob(z)
    }

    /// Total weight of the components belonging to `task`.
    pub fn task_mass(&self, task: usize) -> f64 {
        self.components
            .iter()
            .filter(|c| c.task_id == task)
            .map(PriorComponent::weight)
            .sum()
    }

    pub fn count_for_task(&self, task: usize) -> usize {
        self.components.iter().filter(|c| c.task_id == task).count()
    }

    /// Re-encodes the pseudo-inputs of `task`'s components with `encoder`.
    pub fn refresh_snapshots<E: Encoder + ?Sized>(&mut self, encoder: &E, task: usize) -> Result<()> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.components[i].task_id == task).collect();
        if idx.is_empty() {
            return Ok(());
        }
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.components[i].pseudo_input.as_slice()).collect();
        let post = encoder.encode_rows(&Tensor::from_rows(&rows)?)?;
        for (i, g) in idx.into_iter().zip(post) {
            self.components[i].snapshot = g;
        }
        Ok(())
    }
}

/// The density the current task's components are fitted against:
/// `alpha * past + (1 - alpha) * mean_i q(z | anchor_i)`.
#[derive(Clone, Debug)]
pub struct BoostTarget {
    pub alpha: f64,
    pub past: MixturePrior,
    pub anchors: Tensor,
    pub task: usize,
    anchor_posteriors: Vec<DiagGaussian>,
}

impl BoostTarget {
    /// Anchor posteriors are computed with `encoder` now and kept frozen.
    pub fn new<E: Encoder + ?Sized>(
        alpha: f64,
        past: MixturePrior,
        anchors: Tensor,
        task: usize,
        encoder: &E,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1)")));
        }
        if anchors.rows() == 0 {
            return Err(Error::InvalidArgument("empty target: no anchors".into()));
        }
        if alpha > 0.0 && past.is_empty() {
            return Err(Error::InvalidArgument("alpha > 0 needs a past prior".into()));
        }
        let anchor_posteriors = encoder.encode_rows(&anchors)?;
        Ok(BoostTarget {
            alpha,
            past,
            anchors,
            task,
            anchor_posteriors,
        })
    }

    pub fn anchor_posteriors(&self) -> &[DiagGaussian] {
        &self.anchor_posteriors
    }

    fn assemble(&self, anchors: Vec<DiagGaussian>) -> Result<FiniteMixture> {
        let n = anchors.len() as f64;
        let mut lw = Vec::new();
        let mut comps = Vec::new();
        if self.alpha > 0.0 {
            for c in self.past.components() {
                lw.push(self.alpha.ln() + c.log_weight);
                comps.push(c.snapshot.clone());
            }
        }
        let cur = (1.0 - self.alpha).ln() - n.ln();
        lw.extend(std::iter::repeat_n(cur, anchors.len()));
        comps.extend(anchors);
        FiniteMixture::from_log_weights(lw, comps)
    }

    /// Target with frozen anchor posteriors.
    pub fn mixture(&self) -> Result<FiniteMixture> {
        self.assemble(self.anchor_posteriors.clone())
    }

    /// Target with anchors re-encoded by `encoder`.
    pub fn live_mixture<E: Encoder + ?Sized>(&self, encoder: &E) -> Result<FiniteMixture> {
        self.assemble(encoder.encode_rows(&self.anchors)?)
    }
}

/// `log` of the target density at `z`. With `live`, the anchors are pushed
/// through `encoder` again instead of using the frozen posteriors.
pub fn target_log_density<E: Encoder + ?Sized>(
    target: &BoostTarget,
    encoder: &E,
    z: &[f64],
    live: bool,
) -> Result<f64> {
    let m = if live { target.live_mixture(encoder)? } else { target.mixture()? };
    m.log_prob(z)
}

/// Optimization budgets for component, weight and pruning fits.
#[derive(Clone, Debug, PartialEq)]
pub struct BoostConfig {
    pub component_steps: usize,
    pub component_lr: f64,
    pub component_mc: usize,
    pub init_jitter: f64,
    pub max_retries: usize,
    pub weight_steps: usize,
    pub weight_lr: f64,
    pub weight_mc: usize,
    pub prune_steps: usize,
    pub prune_lr: f64,
    pub prune_mc: usize,
    pub prune_tau: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            component_steps: 200,
            component_lr: 1e-2,
            component_mc: 64,
            init_jitter: 0.05,
            max_retries: 3,
            weight_steps: 100,
            weight_lr: 0.1,
            weight_mc: 512,
            prune_steps: 200,
            prune_lr: 0.05,
            prune_mc: 256,
            prune_tau: 1e-3,
        }
    }
}

/// Result of [`fit_component`]: the new component (weight not yet set),
/// per-step objective values of the accepted attempt, and retries used.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub component: PriorComponent,
    pub history: Vec<f64>,
    pub retries: usize,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Monte-Carlo value of the component objective
/// `E_h[log h - log target + log r]` for `h = q(z | sigmoid(raw))`.
pub fn component_objective<'t, E: Encoder + ?Sized>(
    tape: &'t Tape,
    raw: Var<'t>,
    encoder: &E,
    target: &PriorVars<'t>,
    current: &PriorVars<'t>,
    eps: Var<'t>,
) -> Result<Var<'t>> {
    let u = raw.sigmoid()?;
    let (mean, log_var) = encoder.encode_on(tape, u)?;
    let z = ops::reparam(mean, log_var, eps)?;
    let log_h = ops::gaussian_log_prob(z, mean, log_var)?;
    let log_t = target.log_prob(z)?;
    let log_r = current.log_prob(z)?;
    log_h.sub(log_t)?.add(log_r)?.mean()
}

fn fit_once<E: Encoder + ?Sized, R: Rng + ?Sized>(
    target_m: &FiniteMixture,
    r_m: &FiniteMixture,
    encoder: &E,
    init: Vec<f64>,
    cfg: &BoostConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d_in = init.len();
    let d_z = encoder.latent_dim();
    let mut raw = Tensor::param(vec![1, d_in], init)?;
    let mut adam = AdamState::new();
    let acfg = AdamConfig::with_lr(cfg.component_lr);
    let mut history = Vec::with_capacity(cfg.component_steps);
    for _ in 0..cfg.component_steps {
        let tape = Tape::new();
        let rv = tape.leaf(&raw);
        let tv = PriorVars::constant(&tape, target_m)?;
        let cv = PriorVars::constant(&tape, r_m)?;
        let eps = tape.constant_from(vec![cfg.component_mc, d_z], normals(cfg.component_mc * d_z, rng))?;
        let loss = component_objective(&tape, rv, encoder, &tv, &cv, eps)?;
        history.push(loss.item());
        let grads = tape.backward(loss)?;
        grads.write_to(rv, &mut raw)?;
        adam_step(&mut [&mut raw], &mut adam, &acfg)?;
    }
    let u = raw.data().iter().map(|&x| sigmoid(x)).collect();
    Ok((u, history))
}

/// Fits one new component against `target` given the current mixture `r`
/// (standard normal when empty). The pseudo-input starts at a random anchor
/// plus Gaussian jitter and is optimized through a sigmoid reparametrization.
pub fn fit_component<E: Encoder + ?Sized, R: Rng + ?Sized>(
    target: &BoostTarget,
    r: &MixturePrior,
    encoder: &E,
    cfg: &BoostConfig,
    rng: &mut R,
) -> Result<FitReport> {
    if cfg.component_mc == 0 || cfg.component_steps == 0 {
        return Err(Error::InvalidArgument("component fit needs steps and samples".into()));
    }
    let target_m = target.mixture()?;
    let r_m = r.density(encoder.latent_dim())?;
    let mut retries = 0;
    loop {
        let row = target.anchors.row(rng.random_range(0..target.anchors.rows()));
        let init: Vec<f64> = row
            .iter()
            .map(|&x| {
                let j: f64 = rng.sample(StandardNormal);
                logit((x + cfg.init_jitter * j).clamp(1e-3, 1.0 - 1e-3))
            })
            .collect();
        match fit_once(&target_m, &r_m, encoder, init, cfg, rng) {
            Ok((u, history)) => {
                let snapshot = encoder.encode_rows(&Tensor::new(vec![1, u.len()], u.clone())?)?.remove(0);
                return Ok(FitReport {
                    component: PriorComponent {
                        pseudo_input: u,
                        snapshot,
                        log_weight: 0.0,
                        task_id: target.task,
                    },
                    history,
                    retries,
                });
            }
            Err(e) if e.is_numeric() && retries < cfg.max_retries => {
                warn!("component fit diverged ({e}); retrying");
                retries += 1;
            }
            Err(e) if e.is_numeric() => return Err(Error::Diverged(retries)),
            Err(e) => return Err(e),
        }
    }
}

/// Monte-Carlo estimate of `KL[beta h + (1 - beta) r || target]` over fixed
/// samples from `h` and from `r`.
#[derive(Clone, Debug)]
pub struct WeightObjective {
    // per sample: (log h, log r, log target)
    from_h: Vec<(f64, f64, f64)>,
    from_r: Vec<(f64, f64, f64)>,
}

impl WeightObjective {
    pub fn new<R: Rng + ?Sized>(
        h: &DiagGaussian,
        r: &FiniteMixture,
        target: &FiniteMixture,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("weight fit needs samples".into()));
        }
        let eval = |z: &[f64]| -> Result<(f64, f64, f64)> {
            Ok((h.log_prob(z)?, r.log_prob(z)?, target.log_prob(z)?))
        };
        let from_h = (0..n).map(|_| eval(&h.sample(rng))).collect::<Result<_>>()?;
        let from_r = (0..n).map(|_| eval(&r.sample(rng).0)).collect::<Result<_>>()?;
        Ok(WeightObjective { from_h, from_r })
    }

    fn side(samples: &[(f64, f64, f64)], beta: f64) -> (f64, f64) {
        let (lb, l1b) = (beta.ln(), (1.0 - beta).ln());
        let n = samples.len() as f64;
        let (mut val, mut dm) = (0.0, 0.0);
        for &(a, b, p) in samples {
            let m = log_sum_exp(&[lb + a, l1b + b]);
            val += m - p;
            dm += (a - m).exp() - (b - m).exp();
        }
        (val / n, dm / n)
    }

    pub fn value(&self, beta: f64) -> f64 {
        let (vh, _) = Self::side(&self.from_h, beta);
        let (vr, _) = Self::side(&self.from_r, beta);
        beta * vh + (1.0 - beta) * vr
    }

    /// Derivative with respect to `beta`.
    pub fn derivative(&self, beta: f64) -> f64 {
        let (vh, dh) = Self::side(&self.from_h, beta);
        let (vr, dr) = Self::side(&self.from_r, beta);
        vh - vr + beta * dh + (1.0 - beta) * dr
    }
}

pub const BETA_MIN: f64 = 1e-4;
pub const BETA_MAX: f64 = 1.0 - 1e-4;

/// Weight for a new component `h` against the current mixture `r`, by Adam on
/// `logit(beta)` starting from `1 / (len(r) + 1)`. The objective is convex in
/// `beta`, so the Adam iterate is then polished by bisection on the sign of
/// the derivative; Adam alone stalls near the ends of the interval, where the
/// logit-space gradient vanishes.
pub fn fit_weight<R: Rng + ?Sized>(
    h: &PriorComponent,
    r: &MixturePrior,
    target: &BoostTarget,
    cfg: &BoostConfig,
    rng: &mut R,
) -> Result<f64> {
    let r_m = r.density(h.snapshot.dim())?;
    let obj = WeightObjective::new(&h.snapshot, &r_m, &target.mixture()?, cfg.weight_mc, rng)?;
    let beta0 = 1.0 / (r.len() + 1) as f64;
    let mut l = Tensor::param(vec![1], vec![logit(beta0.clamp(BETA_MIN, BETA_MAX))])?;
    let mut adam = AdamState::new();
    let acfg = AdamConfig::with_lr(cfg.weight_lr);
    for _ in 0..cfg.weight_steps {
        let beta = sigmoid(l.item());
        let g = obj.derivative(beta) * beta * (1.0 - beta);
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "fit_weight" });
        }
        l.set_grad(vec![g])?;
        adam_step(&mut [&mut l], &mut adam, &acfg)?;
    }
    let beta = polish_beta(&obj, sigmoid(l.item()).clamp(BETA_MIN, BETA_MAX));
    debug!("fit_weight: beta = {beta:.4}, objective = {:.4}", obj.value(beta));
    Ok(beta)
}

fn polish_beta(obj: &WeightObjective, beta: f64) -> f64 {
    let d = obj.derivative(beta);
    if d == 0.0 || !d.is_finite() {
        return beta;
    }
    let (mut lo, mut hi) = if d > 0.0 { (BETA_MIN, beta) } else { (beta, BETA_MAX) };
    if d > 0.0 && obj.derivative(lo) >= 0.0 {
        return lo;
    }
    if d < 0.0 && obj.derivative(hi) <= 0.0 {
        return hi;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if obj.derivative(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `beta * h + (1 - beta) * r`; into an empty prior `h` enters with weight 1.
pub fn add_component(r: &MixturePrior, h: PriorComponent, beta: f64) -> Result<MixturePrior> {
    if r.is_empty() {
        return MixturePrior::from_components(vec![PriorComponent { log_weight: 0.0, ..h }]);
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} outside (0, 1)")));
    }
    let shift = (1.0 - beta).ln();
    let mut comps: Vec<PriorComponent> = r
        .components()
        .iter()
        .map(|c| PriorComponent { log_weight: c.log_weight + shift, ..c.clone() })
        .collect();
    comps.push(PriorComponent { log_weight: beta.ln(), ..h });
    MixturePrior::from_components(comps)
}

/// Re-optimizes the weights of `target.task`'s components by Monte-Carlo
/// `KL[r || target]` with the past block's mass fixed at `target.alpha`,
/// then drops current components lighter than `cfg.prune_tau`.
pub fn prune<R: Rng + ?Sized>(
    r: &MixturePrior,
    target: &BoostTarget,
    cfg: &BoostConfig,
    rng: &mut R,
) -> Result<MixturePrior> {
    let comps = r.components();
    let cur: Vec<usize> = (0..comps.len()).filter(|&i| comps[i].task_id == target.task).collect();
    if cur.is_empty() {
        return Ok(r.clone());
    }
    let past: Vec<usize> = (0..comps.len()).filter(|&i| comps[i].task_id != target.task).collect();
    let alpha = if past.is_empty() { 0.0 } else { target.alpha };
    if !past.is_empty() && alpha <= 0.0 {
        return Err(Error::InvalidArgument("past components need alpha > 0".into()));
    }
    let k = comps.len();
    let kc = cur.len();
    let s = cfg.prune_mc.max(1);

    // fixed log-weights of the past block, renormalized to alpha
    let mut base = vec![0.0; k];
    if !past.is_empty() {
        let lw: Vec<f64> = past.iter().map(|&i| comps[i].log_weight).collect();
        let norm = log_sum_exp(&lw);
        for &i in &past {
            base[i] = alpha.ln() + comps[i].log_weight - norm;
        }
    }
    for &i in &cur {
        base[i] = (1.0 - alpha).ln();
    }

    // per-component samples; rows of `dens` are log densities of every
    // component at each sample
    let target_m = target.mixture()?;
    let mut dens = Vec::with_capacity(k * s * k);
    let mut log_t = Vec::with_capacity(k * s);
    let mut owners = Vec::with_capacity(k * s);
    for (c, comp) in comps.iter().enumerate() {
        for _ in 0..s {
            let z = comp.snapshot.sample(rng);
            for other in comps {
                dens.push(other.snapshot.log_prob(&z)?);
            }
            log_t.push(target_m.log_prob(&z)?);
            owners.push(c);
        }
    }
    let n = owners.len();
    let mut avg = vec![0.0; k * n];
    for (i, &c) in owners.iter().enumerate() {
        avg[c * n + i] = 1.0 / s as f64;
    }
    let mut sel = vec![0.0; kc * k];
    for (j, &i) in cur.iter().enumerate() {
        sel[j * k + i] = 1.0;
    }

    let cur_lw: Vec<f64> = cur.iter().map(|&i| comps[i].log_weight).collect();
    let mut theta = Tensor::param(vec![1, kc], cur_lw)?;
    let mut adam = AdamState::new();
    let acfg = AdamConfig::with_lr(cfg.prune_lr);
    let mut last = f64::NAN;
    for _ in 0..cfg.prune_steps {
        let tape = Tape::new();
        let th = tape.leaf(&theta);
        let loss = prune_objective(&tape, th, &base, &sel, &dens, &log_t, &avg, k, n)?;
        last = loss.item();
        let grads = tape.backward(loss)?;
        grads.write_to(th, &mut theta)?;
        adam_step(&mut [&mut theta], &mut adam, &acfg)?;
    }
    debug!("prune: final KL estimate {last:.5}");

    // final weights of the current block
    let t = theta.data();
    let norm = log_sum_exp(t);
    let cur_w: Vec<f64> = t.iter().map(|x| (1.0 - alpha).ln() + x - norm).collect();
    let mut keep: Vec<bool> = cur_w.iter().map(|w| w.exp() >= cfg.prune_tau).collect();
    if !keep.iter().any(|&b| b) {
        let best = (0..kc)
            .max_by(|&a, &b| cur_w[a].total_cmp(&cur_w[b]))
            .expect("nonempty block");
        warn!("pruning would remove every component of task {}; keeping one", target.task);
        keep[best] = true;
    }
    let mut out = Vec::new();
    for (i, c) in comps.iter().enumerate() {
        if let Some(j) = cur.iter().position(|&x| x == i) {
            if keep[j] {
                out.push(PriorComponent { log_weight: cur_w[j], ..c.clone() });
            }
        } else {
            out.push(PriorComponent { log_weight: base[i], ..c.clone() });
        }
    }
    // renormalize the current block back to 1 - alpha after drops
    let kept: Vec<f64> = out.iter().filter(|c| c.task_id == target.task).map(|c| c.log_weight).collect();
    let shift = (1.0 - alpha).ln() - log_sum_exp(&kept);
    for c in out.iter_mut().filter(|c| c.task_id == target.task) {
        c.log_weight += shift;
    }
    MixturePrior::from_components(out)
}

#[allow(clippy::too_many_arguments)]
fn prune_objective<'t>(
    tape: &'t Tape,
    theta: Var<'t>,
    base: &[f64],
    sel: &[f64],
    dens: &[f64],
    log_t: &[f64],
    avg: &[f64],
    k: usize,
    n: usize,
) -> Result<Var<'t>> {
    let kc = theta.shape()[1];
    let sel = tape.constant_from(vec![kc, k], sel.to_vec())?;
    let base = tape.constant_from(vec![1, k], base.to_vec())?;
    let log_w = ops::log_softmax(theta)?.matmul(sel)?.add(base)?;
    let dens = tape.constant_from(vec![n, k], dens.to_vec())?;
    let log_r = dens.add(log_w)?.log_sum_exp(1)?;
    let f = log_r.sub(tape.constant_from(vec![n], log_t.to_vec())?)?;
    let per_comp = tape
        .constant_from(vec![k, n], avg.to_vec())?
        .matmul(f.reshape(vec![n, 1])?)?;
    log_w.exp()?.matmul(per_comp)?.sum()
}

/// Ancestral samples from the prior's snapshots, with component indices.
pub fn sample_prior<R: Rng + ?Sized>(r: &MixturePrior, n: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let d = r
        .latent_dim()
        .ok_or_else(|| Error::InvalidArgument("cannot sample an empty prior".into()))?;
    let dist = WeightedIndex::new(r.weights())
        .map_err(|e| Error::InvalidArgument(format!("prior weights: {e}")))?;
    let mut z = Vec::with_capacity(n * d);
    let mut idx = Vec::with_capacity(n);
    for _ in 0..n {
        let k = dist.sample(rng);
        z.extend(r.components()[k].snapshot.sample(rng));
        idx.push(k);
    }
    Ok((Tensor::new(vec![n, d], z)?, idx))
}

/// Monte-Carlo `KL[target || flow prior]` for the affine flow `z = A v + b`
/// over base density `base`, computed once in z-space and once after pulling
/// `target` back to v-space. Both estimates use the same target samples.
pub fn affine_flow_pullback_check<R: Rng + ?Sized>(
    base: &FiniteMixture,
    target: &FiniteMixture,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    n: usize,
    rng: &mut R,
) -> Result<(McEstimate, McEstimate)> {
    let d = base.dim();
    if a.nrows() != d || a.ncols() != d || b.len() != d || target.dim() != d {
        return Err(Error::DimMismatch { expected: d, found: a.nrows() });
    }
    if n < 2 {
        return Err(Error::InvalidArgument("n must be >= 2".into()));
    }
    let sv = a.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin >= 1e6 {
        return Err(Error::InvalidArgument("flow matrix is singular or ill-conditioned".into()));
    }
    let lu = a.clone().lu();
    let a_inv = lu.try_inverse().ok_or_else(|| Error::InvalidArgument("singular flow matrix".into()))?;
    let log_det = a.clone().lu().determinant().abs().ln();

    let mut kz = Vec::with_capacity(n);
    let mut kv = Vec::with_capacity(n);
    for _ in 0..n {
        let (z, _) = target.sample(rng);
        let zv = DVector::from_vec(z.clone());
        let v = &a_inv * (&zv - b);
        let z_back = a * &v + b;
        // z-space: log q(z) - log p_Z(z), p_Z(z) = base(A^-1 (z - b)) / |det A|
        let lz = target.log_prob(&z)? - (base.log_prob(v.as_slice())? - log_det);
        // v-space: log q_V(v) - log base(v), q_V(v) = q(A v + b) |det A|
        let lv = (target.log_prob(z_back.as_slice())? + log_det) - base.log_prob(v.as_slice())?;
        for (val, what) in [(lz, &z), (lv, &z)] {
            if !val.is_finite() {
                return Err(Error::NonFiniteSample { value: val, sample: what.clone() });
            }
        }
        kz.push(lz);
        kv.push(lv);
    }
    Ok((McEstimate::from_samples(&kz), McEstimate::from_samples(&kv)))
}
