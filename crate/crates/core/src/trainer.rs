//! Task-by-task training: prior expansion alternated with regularized ELBO
//! maximization, followed by pruning and a final fit with early stopping.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::distributions::{ops, BernoulliVec, DiagGaussian, FiniteMixture};
use crate::error::{Error, Result};
use crate::prior::{add_component, fit_component, fit_weight, prune, BoostConfig, BoostTarget, MixturePrior};
use crate::vae::{BoundVae, Encoder, PriorVars, VaeModel};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Component budget per task.
    pub components_per_task: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    /// Weight on the encoder and decoder regularizers.
    pub lambda_reg: f64,
    /// Stored latent samples per component for the decoder regularizer.
    pub latent_samples: usize,
    pub anchor_size: usize,
    /// Maximization epochs before the first component is fitted.
    pub warmup_epochs: usize,
    pub val_fraction: f64,
    /// Reparametrized draws per example in the training ELBO.
    pub elbo_mc: usize,
    /// Stop adding components after two consecutive weights below this.
    pub beta_stop: f64,
    /// Evaluate the current task's components through the live encoder
    /// during maximization instead of their snapshots.
    pub live_prior: bool,
    pub boost: BoostConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            components_per_task: 15,
            batch_size: 250,
            lr: 5e-4,
            max_epochs: 500,
            early_stop_patience: 50,
            lr_patience: 30,
            lr_factor: 0.5,
            lambda_reg: 1.0,
            latent_samples: 4,
            anchor_size: 500,
            warmup_epochs: 10,
            val_fraction: 0.1,
            elbo_mc: 1,
            beta_stop: 0.02,
            live_prior: false,
            boost: BoostConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.lr > 0.0) {
            return bad("lr");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs");
        }
        if self.latent_samples == 0 {
            return bad("latent_samples");
        }
        if self.anchor_size == 0 {
            return bad("anchor_size");
        }
        if self.elbo_mc == 0 {
            return bad("elbo_mc");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config("lr_factor must lie in (0, 1)".into()));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::Config("lambda_reg must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Frozen references for one past component.
#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub task_id: usize,
    pub pseudo_input: Vec<f64>,
    pub posterior: DiagGaussian,
    pub latents: Vec<Vec<f64>>,
    pub decoded: Vec<BernoulliVec>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegularizerBank {
    pub entries: Vec<BankEntry>,
}

impl RegularizerBank {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinualState {
    pub model: VaeModel,
    pub prior: MixturePrior,
    pub bank: RegularizerBank,
    /// Training-set size of every finished task.
    pub seen_counts: Vec<usize>,
}

impl ContinualState {
    pub fn new(model: VaeModel) -> Self {
        ContinualState {
            model,
            prior: MixturePrior::new(),
            bank: RegularizerBank::default(),
            seen_counts: Vec::new(),
        }
    }

    /// Index of the task that will be trained next.
    pub fn current_task(&self) -> usize {
        self.seen_counts.len()
    }

    /// Fraction of all data seen so far that belongs to finished tasks, once
    /// a task of `n_new` examples is added.
    pub fn alpha(&self, n_new: usize) -> f64 {
        let past: usize = self.seen_counts.iter().sum();
        if past + n_new == 0 {
            return 0.0;
        }
        past as f64 / (past + n_new) as f64
    }

    /// Snapshot densities of the prior (standard normal when empty).
    pub fn prior_density(&self) -> Result<FiniteMixture> {
        self.prior.density(self.model.spec().latent_dim)
    }
}

/// Adam state plus the current learning rate.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub state: AdamState,
    pub cfg: AdamConfig,
}

impl Optimizer {
    pub fn new(lr: f64) -> Self {
        Optimizer {
            state: AdamState::new(),
            cfg: AdamConfig::with_lr(lr),
        }
    }
}

/// `sum_u KL_sym[q(z | u) || frozen posterior at u]` on the tape.
pub fn reg_encoder_on<'t>(bound: &BoundVae<'t>, bank: &RegularizerBank) -> Result<Var<'t>> {
    let tape = bound.enc_mean.weight.tape();
    if bank.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let rows: Vec<&[f64]> = bank.entries.iter().map(|e| e.pseudo_input.as_slice()).collect();
    let u = tape.constant(&Tensor::from_rows(&rows)?);
    let (mean, log_var) = bound.encode(u)?;
    let fm: Vec<&[f64]> = bank.entries.iter().map(|e| e.posterior.mean.as_slice()).collect();
    let fl: Vec<&[f64]> = bank.entries.iter().map(|e| e.posterior.log_var.as_slice()).collect();
    let fm = tape.constant(&Tensor::from_rows(&fm)?);
    let fl = tape.constant(&Tensor::from_rows(&fl)?);
    ops::sym_kl_diag(mean, log_var, fm, fl)?.sum()
}

/// `sum_j KL_sym[p(x | z_j) || frozen decoded means at z_j]` on the tape.
pub fn reg_decoder_on<'t>(bound: &BoundVae<'t>, bank: &RegularizerBank) -> Result<Var<'t>> {
    let tape = bound.dec_out.weight.tape();
    if bank.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let z: Vec<&[f64]> = bank.entries.iter().flat_map(|e| e.latents.iter().map(Vec::as_slice)).collect();
    let frozen: Vec<&[f64]> = bank.entries.iter().flat_map(|e| e.decoded.iter().map(BernoulliVec::means)).collect();
    let z = tape.constant(&Tensor::from_rows(&z)?);
    let frozen = tape.constant(&Tensor::from_rows(&frozen)?);
    ops::sym_kl_bernoulli(bound.decode(z)?, frozen)?.sum()
}

pub fn reg_encoder(state: &ContinualState) -> Result<f64> {
    let tape = Tape::new();
    let bound = state.model.bind(&tape, false);
    Ok(reg_encoder_on(&bound, &state.bank)?.item())
}

pub fn reg_decoder(state: &ContinualState) -> Result<f64> {
    let tape = Tape::new();
    let bound = state.model.bind(&tape, false);
    Ok(reg_decoder_on(&bound, &state.bank)?.item())
}

/// Prior log-density on the tape. In live mode the current task's components
/// are re-encoded through `bound`; everything else uses snapshots.
struct TapePrior<'t> {
    frozen: Option<PriorVars<'t>>,
    live: Option<PriorVars<'t>>,
}

impl<'t> TapePrior<'t> {
    fn build(tape: &'t Tape, bound: &BoundVae<'t>, state: &ContinualState, live: bool) -> Result<Self> {
        let task = state.current_task();
        let has_live = live && state.prior.components().iter().any(|c| c.task_id == task);
        if !has_live {
            return Ok(TapePrior {
                frozen: Some(PriorVars::constant(tape, &state.prior_density()?)?),
                live: None,
            });
        }
        let (cur, past): (Vec<_>, Vec<_>) = state.prior.components().iter().partition(|c| c.task_id == task);
        let rows: Vec<&[f64]> = cur.iter().map(|c| c.pseudo_input.as_slice()).collect();
        let lw: Vec<f64> = cur.iter().map(|c| c.log_weight).collect();
        let live = PriorVars::live(
            bound,
            tape.constant(&Tensor::from_rows(&rows)?),
            tape.constant_from(vec![lw.len()], lw)?,
        )?;
        let frozen = if past.is_empty() {
            None
        } else {
            let m = FiniteMixture::from_log_weights(
                past.iter().map(|c| c.log_weight).collect(),
                past.iter().map(|c| c.snapshot.clone()).collect(),
            )?;
            // from_log_weights renormalizes; restore the block's mass
            let mass: f64 = past.iter().map(|c| c.weight()).sum();
            let mut pv = PriorVars::constant(tape, &m)?;
            pv.log_weights = pv.log_weights.add_scalar(mass.ln())?;
            Some(pv)
        };
        Ok(TapePrior { frozen, live: Some(live) })
    }

    fn log_prob(&self, z: Var<'t>) -> Result<Var<'t>> {
        match (&self.frozen, &self.live) {
            (Some(f), None) => f.log_prob(z),
            (None, Some(l)) => l.log_prob(z),
            (Some(f), Some(l)) => {
                let (a, b) = (f.log_prob(z)?, l.log_prob(z)?);
                let n = a.len();
                let tape = z.tape();
                let left = tape.constant_from(vec![1, 2], vec![1.0, 0.0])?;
                let right = tape.constant_from(vec![1, 2], vec![0.0, 1.0])?;
                a.reshape(vec![n, 1])?
                    .matmul(left)?
                    .add(b.reshape(vec![n, 1])?.matmul(right)?)?
                    .log_sum_exp(1)
            }
            (None, None) => unreachable!("prior has at least one block"),
        }
    }
}

/// Values from one maximization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub elbo: f64,
    pub r_enc: f64,
    pub r_dec: f64,
}

/// The maximization loss on a tape, with its parts.
pub struct Objective<'t> {
    pub loss: Var<'t>,
    pub stats: StepStats,
}

/// `-ELBO + lambda_reg * (R_enc + R_dec)` for `batch`, with the prior taken
/// from `state` and the model given by `bound`.
pub fn maximization_objective<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    bound: &BoundVae<'t>,
    state: &ContinualState,
    batch: &Tensor,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Objective<'t>> {
    let prior = TapePrior::build(tape, bound, state, cfg.live_prior)?;
    let x = tape.constant(batch);
    let (mean, log_var) = bound.encode(x)?;
    let mc = cfg.elbo_mc;
    let (mean, log_var, xs) = if mc > 1 {
        (mean.tile_rows(mc)?, log_var.tile_rows(mc)?, x.tile_rows(mc)?)
    } else {
        (mean, log_var, x)
    };
    let shape = mean.shape();
    let eps: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| rng.sample(StandardNormal)).collect();
    let z = ops::reparam(mean, log_var, tape.constant_from(shape, eps)?)?;
    let recon = ops::bernoulli_log_prob(bound.decode(z)?, xs)?;
    let kl = ops::gaussian_log_prob(z, mean, log_var)?.sub(prior.log_prob(z)?)?;
    let elbo = recon.sub(kl)?.mean()?;
    let r_enc = reg_encoder_on(bound, &state.bank)?;
    let r_dec = reg_decoder_on(bound, &state.bank)?;
    let loss = elbo
        .neg()?
        .add(r_enc.add(r_dec)?.scale(cfg.lambda_reg)?)?;
    let stats = StepStats {
        loss: loss.item(),
        elbo: elbo.item(),
        r_enc: r_enc.item(),
        r_dec: r_dec.item(),
    };
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite { op: "maximization loss" });
    }
    Ok(Objective { loss, stats })
}

/// One Adam step on the model parameters minimizing
/// `-ELBO + lambda_reg * (R_enc + R_dec)` with the prior held fixed.
pub fn maximization_step<R: Rng + ?Sized>(
    state: &mut ContinualState,
    opt: &mut Optimizer,
    batch: &Tensor,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepStats> {
    let tape = Tape::new();
    let bound = state.model.bind(&tape, true);
    let obj = maximization_objective(&tape, &bound, state, batch, cfg, rng)?;
    let grads = tape.backward(obj.loss)?;
    state.model.store_grads(&bound, &grads)?;
    adam_step(&mut state.model.params_mut(), &mut opt.state, &opt.cfg)?;
    Ok(obj.stats)
}

/// The objective's value without updating anything.
pub fn evaluate_objective<R: Rng + ?Sized>(
    state: &ContinualState,
    data: &Tensor,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepStats> {
    let tape = Tape::new();
    let bound = state.model.bind(&tape, false);
    Ok(maximization_objective(&tape, &bound, state, data, cfg, rng)?.stats)
}

/// One row of the per-epoch training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub task: usize,
    pub loss: f64,
    pub elbo: f64,
    pub r_enc: f64,
    pub r_dec: f64,
    pub component_count: usize,
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,task,loss,elbo,r_enc,r_dec,component_count,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.task, self.loss, self.elbo, self.r_enc, self.r_dec, self.component_count, self.lr
        )
    }
}

struct EpochRunner<'a> {
    train: Tensor,
    val: Tensor,
    cfg: &'a TrainConfig,
    task: usize,
    epoch: usize,
    log: Vec<EpochLog>,
}

impl EpochRunner<'_> {
    fn run<R: Rng + ?Sized>(&mut self, state: &mut ContinualState, opt: &mut Optimizer, rng: &mut R) -> Result<f64> {
        let n = self.train.rows();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = self.train.select_rows(chunk);
            total += maximization_step(state, opt, &batch, self.cfg, rng)?.loss * chunk.len() as f64;
        }
        let train_loss = total / n as f64;
        let eval_on = if self.val.rows() > 0 { &self.val } else { &self.train };
        let v = evaluate_objective(state, eval_on, self.cfg, rng)?;
        self.log.push(EpochLog {
            epoch: self.epoch,
            task: self.task,
            loss: train_loss,
            elbo: v.elbo,
            r_enc: v.r_enc,
            r_dec: v.r_dec,
            component_count: state.prior.len(),
            lr: opt.cfg.lr,
        });
        debug!("task {} epoch {}: loss {train_loss:.4}, val elbo {:.4}", self.task, self.epoch, v.elbo);
        self.epoch += 1;
        Ok(v.loss)
    }
}

/// Seeded shuffle, last `val_fraction` of it held out.
pub fn train_val_split<R: Rng + ?Sized>(data: &Tensor, val_fraction: f64, rng: &mut R) -> (Tensor, Tensor) {
    let n = data.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64) * val_fraction).floor() as usize;
    let n_val = if n - n_val == 0 { 0 } else { n_val };
    let (tr, va) = idx.split_at(n - n_val);
    (data.select_rows(tr), data.select_rows(va))
}

/// Trains the next task on `data` (`[n, input_dim]`) and records it in the
/// state: warm-up, alternating component fits and maximization epochs,
/// pruning, a final fit with early stopping, then snapshotting.
pub fn train_task<R: Rng + ?Sized>(
    state: &mut ContinualState,
    data: &Tensor,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.rows() == 0 {
        return Err(Error::InvalidArgument("empty task".into()));
    }
    if data.row_len() != state.model.spec().input_dim {
        return Err(Error::DimMismatch {
            expected: state.model.spec().input_dim,
            found: data.row_len(),
        });
    }
    let task = state.current_task();
    let n_task = data.rows();
    let alpha = state.alpha(n_task);
    let past = state.prior.clone();
    let (train, val) = train_val_split(data, cfg.val_fraction, rng);
    let anchors = {
        let mut idx: Vec<usize> = (0..train.rows()).collect();
        idx.shuffle(rng);
        idx.truncate(cfg.anchor_size);
        train.select_rows(&idx)
    };
    info!("task {task}: {n_task} examples, alpha {alpha:.4}");

    let mut opt = Optimizer::new(cfg.lr);
    let mut runner = EpochRunner {
        train,
        val,
        cfg,
        task,
        epoch: 0,
        log: Vec::new(),
    };
    for _ in 0..cfg.warmup_epochs {
        runner.run(state, &mut opt, rng)?;
    }

    let mut small = 0;
    for k in 0..cfg.components_per_task {
        state.prior.refresh_snapshots(&state.model, task)?;
        let target = BoostTarget::new(alpha, past.clone(), anchors.clone(), task, &state.model)?;
        let fit = fit_component(&target, &state.prior, &state.model, &cfg.boost, rng)?;
        let beta = if state.prior.is_empty() {
            1.0
        } else {
            fit_weight(&fit.component, &state.prior, &target, &cfg.boost, rng)?
        };
        debug!("task {task}: component {k} accepted with beta {beta:.4}");
        state.prior = add_component(&state.prior, fit.component, beta)?;
        small = if beta < cfg.beta_stop { small + 1 } else { 0 };
        runner.run(state, &mut opt, rng)?;
        if small >= 2 {
            info!("task {task}: stopping after {} components", k + 1);
            break;
        }
    }

    if state.prior.count_for_task(task) > 0 {
        state.prior.refresh_snapshots(&state.model, task)?;
        let target = BoostTarget::new(alpha, past, anchors, task, &state.model)?;
        let before = state.prior.len();
        state.prior = prune(&state.prior, &target, &cfg.boost, rng)?;
        info!("task {task}: pruned {} of {before} components", before - state.prior.len());
    }

    let mut best = (f64::INFINITY, state.model.clone());
    let (mut since_best, mut since_lr) = (0, 0);
    for _ in 0..cfg.max_epochs {
        let v = runner.run(state, &mut opt, rng)?;
        if v < best.0 {
            best = (v, state.model.clone());
            since_best = 0;
            since_lr = 0;
        } else {
            since_best += 1;
            since_lr += 1;
            if since_lr >= cfg.lr_patience {
                opt.cfg.lr *= cfg.lr_factor;
                since_lr = 0;
            }
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    state.model = best.1;

    state.prior.refresh_snapshots(&state.model, task)?;
    let entries = snapshot_task(state, task, cfg.latent_samples, rng)?;
    state.bank.entries.extend(entries);
    state.seen_counts.push(n_task);
    Ok(runner.log)
}

/// Frozen regularizer references for every component of `task`: its
/// pseudo-input, the current posterior there, `s` latent draws from it and
/// the current decoded means at those draws.
pub fn snapshot_task<R: Rng + ?Sized>(
    state: &ContinualState,
    task: usize,
    s: usize,
    rng: &mut R,
) -> Result<Vec<BankEntry>> {
    if s == 0 {
        return Err(Error::InvalidArgument("need at least one latent sample".into()));
    }
    let mut out = Vec::new();
    for c in state.prior.components().iter().filter(|c| c.task_id == task) {
        let u = Tensor::new(vec![1, c.pseudo_input.len()], c.pseudo_input.clone())?;
        let posterior = state.model.encode_rows(&u)?.remove(0);
        let latents: Vec<Vec<f64>> = (0..s).map(|_| posterior.sample(rng)).collect();
        let decoded = state.model.decode(&Tensor::from_rows(&latents)?)?;
        out.push(BankEntry {
            task_id: task,
            pseudo_input: c.pseudo_input.clone(),
            posterior,
            latents,
            decoded,
        });
    }
    Ok(out)
}
