#![allow(dead_code)]

pub mod fixtures;
pub mod grad_cases;

use boovae::autodiff::{Tape, Tensor, Var};
use boovae::distributions::DiagGaussian;
use boovae::vae::{Encoder, LatentModel};
use boovae::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error between the tape gradient of `f` and central
/// differences, over every entry of every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x)).collect();
        f(&tape, &vars).unwrap().item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(&x.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// Mixture density by direct summation of weighted densities.
pub fn naive_mixture_log_prob(weights: &[f64], comps: &[DiagGaussian], z: &[f64]) -> f64 {
    let terms = weights.iter().zip(comps).map(|(w, c)| {
        let mut lp = 0.0;
        for i in 0..z.len() {
            let var = c.log_var[i].exp();
            lp += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (z[i] - c.mean[i]).powi(2) / var);
        }
        w * lp.exp()
    });
    compensated_sum(terms).ln()
}

/// `mean = u W + b`, constant `log_var`; pseudo-inputs live in `[0, 1]^D`,
/// so the reachable means form a box (a parallelogram in general).
#[derive(Clone, Debug)]
pub struct AffineEncoder {
    pub w: Tensor,
    pub b: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl AffineEncoder {
    /// Diagonal map of `[0,1]^d` onto the box `[lo_i, hi_i]`.
    pub fn boxed(lo: &[f64], hi: &[f64], log_var: f64) -> Self {
        let d = lo.len();
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = hi[i] - lo[i];
        }
        AffineEncoder {
            w: Tensor::new(vec![d, d], w).unwrap(),
            b: lo.to_vec(),
            log_var: vec![log_var; d],
        }
    }

    /// Pseudo-input whose mean is `m`.
    pub fn preimage(&self, m: &[f64]) -> Vec<f64> {
        let d = m.len();
        (0..d).map(|i| (m[i] - self.b[i]) / self.w.row(i)[i]).collect()
    }

    pub fn mean_of(&self, u: &[f64]) -> Vec<f64> {
        let d = self.b.len();
        (0..d)
            .map(|j| self.b[j] + (0..u.len()).map(|i| u[i] * self.w.row(i)[j]).sum::<f64>())
            .collect()
    }
}

impl Encoder for AffineEncoder {
    fn data_dim(&self) -> usize {
        self.w.shape()[0]
    }

    fn latent_dim(&self) -> usize {
        self.w.shape()[1]
    }

    fn encode_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let d = self.latent_dim();
        let mean = x.matmul(tape.constant(&self.w))?.add(tape.constant_from(vec![d], self.b.clone())?)?;
        let lv = mean.scale(0.0)?.add(tape.constant_from(vec![d], self.log_var.clone())?)?;
        Ok((mean, lv))
    }
}

/// `z ~ N(0, 1)`, `x | z ~ N(a z + b, s^2)`, so `x ~ N(b, a^2 + s^2)`. The
/// proposal is a deliberately perturbed exact posterior.
#[derive(Clone, Debug)]
pub struct LinearGaussian {
    pub a: f64,
    pub b: f64,
    pub s: f64,
    pub mean_scale: f64,
    pub var_scale: f64,
}

impl LinearGaussian {
    pub fn exact_log_marginal(&self, x: f64) -> f64 {
        let v = self.a * self.a + self.s * self.s;
        -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - self.b).powi(2) / v)
    }

    pub fn exact_posterior(&self, x: f64) -> (f64, f64) {
        let prec = 1.0 + self.a * self.a / (self.s * self.s);
        let var = 1.0 / prec;
        (var * self.a * (x - self.b) / (self.s * self.s), var)
    }
}

impl LatentModel for LinearGaussian {
    fn posterior(&self, x: &[f64]) -> Result<DiagGaussian> {
        let (m, v) = self.exact_posterior(x[0]);
        DiagGaussian::new(vec![m * self.mean_scale], vec![(v * self.var_scale).ln()])
    }

    fn log_likelihood(&self, x: &[f64], z: &Tensor) -> Result<Vec<f64>> {
        let g = DiagGaussian::new(vec![0.0], vec![(self.s * self.s).ln()])?;
        (0..z.rows())
            .map(|i| g.log_prob(&[x[0] - self.a * z.row(i)[0] - self.b]))
            .collect()
    }
}

/// A small VAE trained for `steps` Adam steps (standard-normal prior) on one
/// synthetic cluster task; returns the model and its data.
pub fn trained_toy_vae(steps: usize, seed: u64) -> (boovae::vae::VaeModel, Tensor) {
    use boovae::data::synthetic_cluster_tasks;
    use boovae::trainer::{maximization_step, ContinualState, Optimizer, TrainConfig};
    use boovae::vae::{MlpSpec, VaeModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (stream, _) = synthetic_cluster_tasks(2, 100, 8, 6.0, &mut rng).unwrap();
    let (x, _) = stream.concat().unwrap();
    let spec = MlpSpec {
        input_dim: 8,
        hidden: vec![16],
        latent_dim: 2,
    };
    let mut state = ContinualState::new(VaeModel::new(spec, &mut rng).unwrap());
    let cfg = TrainConfig {
        lambda_reg: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = Optimizer::new(5e-3);
    for step in 0..steps {
        let idx: Vec<usize> = (0..50).map(|i| (step * 50 + i) % x.rows()).collect();
        maximization_step(&mut state, &mut opt, &x.select_rows(&idx), &cfg, &mut rng).unwrap();
    }
    (state.model, x)
}
