//! Evaluation after each task: importance-sampled NLL, a sample-diversity
//! score from a probe classifier, and sample grids.

use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::data::TaskStream;
use crate::distributions::{ops, DiagGaussian};
use crate::error::{Error, Result};
use crate::prior::{sample_prior, MixturePrior};
use crate::trainer::ContinualState;
use crate::vae::{nll_importance_sampling, BoundLinear, Linear, VaeModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiversityForm {
    /// `sum_t KL[Be(1/T) || Be(p_t)]`
    #[default]
    BernoulliPairs,
    /// `sum_t (1/T) log((1/T) / p_t)`, the KL from uniform to `p`.
    Multinomial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityReport {
    pub counts: Vec<f64>,
    pub total: f64,
    pub score: f64,
    pub per_class: Vec<f64>,
}

pub const DIVERSITY_EPS: f64 = 0.5;

/// Divergence of generated class proportions from uniform, with counts
/// smoothed as `(N_t + eps) / (N + T eps)`.
pub fn diversity_kl(counts: &[f64], eps: f64, form: DiversityForm) -> Result<DiversityReport> {
    let t = counts.len();
    if t < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two classes".into()));
    }
    if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err(Error::InvalidArgument("counts must be nonnegative".into()));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument("smoothing must be nonnegative".into()));
    }
    let total: f64 = counts.iter().sum();
    let denom = total + t as f64 * eps;
    if !(denom > 0.0) {
        return Err(Error::InvalidArgument("no counts and no smoothing".into()));
    }
    let q = 1.0 / t as f64;
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * (x / y).ln() };
    let per_class: Vec<f64> = counts
        .iter()
        .map(|&n| {
            let p = (n + eps) / denom;
            match form {
                DiversityForm::BernoulliPairs => xlogy(q, p) + xlogy(1.0 - q, 1.0 - p),
                DiversityForm::Multinomial => xlogy(q, p),
            }
        })
        .collect();
    Ok(DiversityReport {
        counts: counts.to_vec(),
        total,
        score: per_class.iter().sum(),
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 128,
            epochs: 10,
            batch_size: 100,
            lr: 1e-3,
            val_fraction: 0.1,
        }
    }
}

/// One-hidden-layer MLP predicting the task index of an example.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeClassifier {
    pub hidden: Linear,
    pub out: Linear,
    /// Accuracy on the held-out split.
    pub accuracy: f64,
}

impl ProbeClassifier {
    pub fn n_classes(&self) -> usize {
        self.out.out_dim()
    }

    fn logits<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<(Var<'t>, [BoundLinear<'t>; 2])> {
        let h = BoundLinear::bind(tape, &self.hidden, trainable);
        let o = BoundLinear::bind(tape, &self.out, trainable);
        let logits = o.forward(h.forward(x)?.leaky_relu()?)?;
        Ok((logits, [h, o]))
    }

    /// Argmax over the first `allowed` classes.
    pub fn predict(&self, x: &Tensor, allowed: usize) -> Result<Vec<usize>> {
        let allowed = allowed.clamp(1, self.n_classes());
        let tape = Tape::new();
        let (logits, _) = self.logits(&tape, tape.constant(x), false)?;
        let v = logits.value();
        Ok((0..v.rows())
            .map(|i| {
                let row = &v.row(i)[..allowed];
                (0..allowed).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("nonempty")
            })
            .collect())
    }
}

/// Trains the probe on every task of `stream` with task indices as labels.
pub fn train_probe_classifier<R: Rng + ?Sized>(
    stream: &TaskStream,
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbeClassifier> {
    let (x, y) = stream.concat()?;
    let k = stream.len();
    if k == 0 || x.rows() == 0 {
        return Err(Error::InvalidArgument("probe needs data".into()));
    }
    let d = x.row_len();
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.shuffle(rng);
    let n_val = (x.rows() as f64 * cfg.val_fraction) as usize;
    let (tr, va) = idx.split_at(x.rows() - n_val);
    let mut probe = ProbeClassifier {
        hidden: Linear::he_init(d, cfg.hidden, rng),
        out: Linear::glorot_init(cfg.hidden, k, rng),
        accuracy: 0.0,
    };
    let mut adam = AdamState::new();
    let acfg = AdamConfig::with_lr(cfg.lr);
    let mut order = tr.to_vec();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = x.select_rows(chunk);
            let mut onehot = vec![0.0; chunk.len() * k];
            for (i, &j) in chunk.iter().enumerate() {
                onehot[i * k + y[j]] = 1.0;
            }
            let tape = Tape::new();
            let (logits, [h, o]) = probe.logits(&tape, tape.constant(&xb), true)?;
            let target = tape.constant_from(vec![chunk.len(), k], onehot)?;
            let loss = ops::log_softmax(logits)?.mul(target)?.sum_axis(1)?.mean()?.neg()?;
            let grads = tape.backward(loss)?;
            grads.write_to(h.weight, &mut probe.hidden.weight)?;
            grads.write_to(h.bias, &mut probe.hidden.bias)?;
            grads.write_to(o.weight, &mut probe.out.weight)?;
            grads.write_to(o.bias, &mut probe.out.bias)?;
            adam_step(
                &mut [
                    &mut probe.hidden.weight,
                    &mut probe.hidden.bias,
                    &mut probe.out.weight,
                    &mut probe.out.bias,
                ],
                &mut adam,
                &acfg,
            )?;
        }
    }
    let check = if va.is_empty() { tr } else { va };
    let pred = probe.predict(&x.select_rows(check), k)?;
    let correct = check.iter().zip(&pred).filter(|(&i, &p)| y[i] == p).count();
    probe.accuracy = correct as f64 / check.len() as f64;
    if probe.accuracy < 0.95 {
        warn!("probe classifier held-out accuracy {:.3} is below 0.95", probe.accuracy);
    }
    Ok(probe)
}

/// Binary greyscale image (`P5`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Tile shape for a flat image of `d` pixels: square when possible, else one row.
pub fn image_shape(d: usize) -> (usize, usize) {
    let s = (d as f64).sqrt().round() as usize;
    if s * s == d {
        (s, s)
    } else {
        (1, d)
    }
}

/// Lays out `rows` of images (each `[cols, d]`) with a one-pixel gap.
pub fn image_grid(rows: &[Tensor]) -> Result<Pgm> {
    let cols = rows.iter().map(Tensor::rows).max().unwrap_or(0);
    let d = rows.first().map(Tensor::row_len).unwrap_or(0);
    if cols == 0 || d == 0 {
        return Err(Error::InvalidArgument("empty image grid".into()));
    }
    let (h, w) = image_shape(d);
    let width = cols * (w + 1) - 1;
    let height = rows.len() * (h + 1) - 1;
    let mut pixels = vec![0u8; width * height];
    for (r, imgs) in rows.iter().enumerate() {
        if imgs.row_len() != d {
            return Err(Error::DimMismatch { expected: d, found: imgs.row_len() });
        }
        for c in 0..imgs.rows() {
            let img = imgs.row(c);
            for y in 0..h {
                for x in 0..w {
                    let v = (img[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                    pixels[(r * (h + 1) + y) * width + c * (w + 1) + x] = v;
                }
            }
        }
    }
    Ok(Pgm { width, height, pixels })
}

/// Decoded means of `n` prior draws from each task's components; a single
/// row from the standard normal when the prior is empty.
pub fn prior_sample_grid<R: Rng + ?Sized>(
    model: &VaeModel,
    prior: &MixturePrior,
    tasks: usize,
    n: usize,
    rng: &mut R,
) -> Result<Pgm> {
    let mut rows = Vec::new();
    if prior.is_empty() {
        let g = DiagGaussian::standard(model.spec().latent_dim);
        let z: Vec<Vec<f64>> = (0..n).map(|_| g.sample(rng)).collect();
        rows.push(model.decode_means(&Tensor::from_rows(&z)?)?);
    } else {
        for t in 0..tasks {
            let comps: Vec<_> = prior.components().iter().filter(|c| c.task_id == t).cloned().collect();
            if comps.is_empty() {
                continue;
            }
            let sub = MixturePrior::from_components(comps)?;
            let (z, _) = sample_prior(&sub, n, rng)?;
            rows.push(model.decode_means(&z)?);
        }
    }
    image_grid(&rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub is_samples: usize,
    pub diversity_samples: usize,
    pub diversity_eps: f64,
    pub diversity_form: DiversityForm,
    pub grid_per_task: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            is_samples: 5000,
            diversity_samples: 10_000,
            diversity_eps: DIVERSITY_EPS,
            diversity_form: DiversityForm::BernoulliPairs,
            grid_per_task: 8,
        }
    }
}

/// One report row, describing the model after `after_task` tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub after_task: usize,
    pub cumulative_nll: f64,
    pub diversity: Option<DiversityReport>,
    pub diversity_note: String,
    pub per_task_nll: Vec<f64>,
    pub test_sizes: Vec<usize>,
    pub components_per_task: Vec<usize>,
}

impl ReportRow {
    pub const CSV_HEADER: &'static str =
        "after_task,cumulative_nll,diversity_kl,diversity_note,per_task_nll,test_sizes,component_count,components_per_task";

    pub fn csv_row(&self) -> String {
        let join = |v: Vec<String>| v.join(";");
        let mut s = String::new();
        let div = self.diversity.as_ref().map(|d| d.score.to_string()).unwrap_or_default();
        write!(
            s,
            "{},{},{},{},{},{},{},{}",
            self.after_task,
            self.cumulative_nll,
            div,
            self.diversity_note,
            join(self.per_task_nll.iter().map(f64::to_string).collect()),
            join(self.test_sizes.iter().map(usize::to_string).collect()),
            self.components_per_task.iter().sum::<usize>(),
            join(self.components_per_task.iter().map(usize::to_string).collect()),
        )
        .expect("write to string");
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub row: ReportRow,
    pub grid: Pgm,
}

/// Evaluates `state` on the test sets of every task it has been trained on.
/// `probe` is needed for the diversity score once two or more tasks are seen.
pub fn eval_suite<R: Rng + ?Sized>(
    state: &ContinualState,
    test_stream: &TaskStream,
    probe: Option<&ProbeClassifier>,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<EvalReport> {
    let seen = state.current_task();
    if seen == 0 {
        return Err(Error::InvalidArgument("state has not been trained".into()));
    }
    if test_stream.len() < seen {
        return Err(Error::Data(format!(
            "test stream has {} tasks, state has seen {seen}",
            test_stream.len()
        )));
    }
    let density = state.prior_density()?;
    let mut per_task_nll = Vec::with_capacity(seen);
    let mut test_sizes = Vec::with_capacity(seen);
    for task in &test_stream.tasks[..seen] {
        let nll = nll_importance_sampling(&state.model, &density, &task.examples, cfg.is_samples, rng)?;
        per_task_nll.push(nll.iter().sum::<f64>() / nll.len().max(1) as f64);
        test_sizes.push(nll.len());
    }
    let total: usize = test_sizes.iter().sum();
    let cumulative_nll = per_task_nll
        .iter()
        .zip(&test_sizes)
        .map(|(v, &n)| v * n as f64)
        .sum::<f64>()
        / total.max(1) as f64;

    let (diversity, diversity_note) = if seen < 2 {
        (None, "needs two or more tasks".to_string())
    } else if let Some(probe) = probe {
        let n = cfg.diversity_samples;
        let z = if state.prior.is_empty() {
            let g = DiagGaussian::standard(state.model.spec().latent_dim);
            Tensor::from_rows(&(0..n).map(|_| g.sample(rng)).collect::<Vec<_>>())?
        } else {
            sample_prior(&state.prior, n, rng)?.0
        };
        let x = state.model.decode_means(&z)?;
        let mut counts = vec![0.0; seen];
        for p in probe.predict(&x, seen)? {
            counts[p] += 1.0;
        }
        let note = if probe.accuracy < 0.95 {
            format!("probe accuracy {:.3}", probe.accuracy)
        } else {
            String::new()
        };
        (Some(diversity_kl(&counts, cfg.diversity_eps, cfg.diversity_form)?), note)
    } else {
        (None, "no probe classifier".to_string())
    };

    let grid = prior_sample_grid(&state.model, &state.prior, seen, cfg.grid_per_task.max(1), rng)?;
    Ok(EvalReport {
        row: ReportRow {
            after_task: seen,
            cumulative_nll,
            diversity,
            diversity_note,
            per_task_nll,
            test_sizes,
            components_per_task: (0..seen).map(|t| state.prior.count_for_task(t)).collect(),
        },
        grid,
    })
}
