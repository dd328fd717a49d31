//! MLP encoder/decoder, ELBO and importance-sampled likelihood.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::distributions::{ops, log_sum_exp, BernoulliVec, DiagGaussian, FiniteMixture};
use crate::error::{Error, Result};

/// Layer widths of the encoder; the decoder mirrors them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl MlpSpec {
    /// 784 -> 300 -> 300 -> 40.
    pub fn mnist() -> Self {
        MlpSpec {
            input_dim: 784,
            hidden: vec![300, 300],
            latent_dim: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::InvalidArgument("MLP needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("MLP widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, bound: f64, rng: &mut R) -> Linear {
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::param(vec![fan_in, fan_out], w).expect("finite init"),
            bias: Tensor::param(vec![fan_out], vec![0.0; fan_out]).expect("finite init"),
        }
    }

    /// He-uniform, scaled for leaky-relu with slope 0.01.
    pub fn he_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Linear {
        let bound = (6.0 / ((1.0 + 0.01f64.powi(2)) * fan_in as f64)).sqrt();
        Linear::uniform(fan_in, fan_out, bound, rng)
    }

    pub fn glorot_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear::uniform(fan_in, fan_out, bound, rng)
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: Tensor::zeros(vec![fan_in, fan_out]).with_requires_grad(true),
            bias: Tensor::zeros(vec![fan_out]).with_requires_grad(true),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// A linear layer bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn bind(tape: &'t Tape, l: &Linear, trainable: bool) -> Self {
        let b = |t: &Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
        BoundLinear {
            weight: b(&l.weight),
            bias: b(&l.bias),
        }
    }

    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight)?.add(self.bias)
    }
}

/// Runs `x` through `layers` with leaky-relu after each.
fn hidden_stack<'t>(layers: &[BoundLinear<'t>], mut x: Var<'t>) -> Result<Var<'t>> {
    for l in layers {
        x = l.forward(x)?.leaky_relu()?;
    }
    Ok(x)
}

/// Anything that maps data-space rows to diagonal-Gaussian posteriors.
pub trait Encoder {
    fn data_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;

    /// Encodes `[n, data_dim]` into `(mean, log_var)`, each `[n, latent_dim]`,
    /// with the encoder's own parameters held constant.
    fn encode_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)>;

    fn encode_rows(&self, x: &Tensor) -> Result<Vec<DiagGaussian>> {
        let tape = Tape::new();
        let (m, lv) = self.encode_on(&tape, tape.constant(x))?;
        let (m, lv) = (m.value(), lv.value());
        (0..m.rows())
            .map(|i| DiagGaussian::new(m.row(i).to_vec(), lv.row(i).to_vec()))
            .collect()
    }
}

/// A likelihood model with an amortized Gaussian posterior, the interface
/// needed for importance-sampled marginal likelihoods.
pub trait LatentModel {
    fn posterior(&self, x: &[f64]) -> Result<DiagGaussian>;
    /// `log p(x | z_i)` for each row of `z` (`[k, latent_dim]`).
    fn log_likelihood(&self, x: &[f64], z: &Tensor) -> Result<Vec<f64>>;
}

/// Prior log-density used in likelihood evaluation.
pub trait LogDensity {
    fn log_density(&self, z: &[f64]) -> Result<f64>;
}

impl LogDensity for FiniteMixture {
    fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.log_prob(z)
    }
}

impl LogDensity for DiagGaussian {
    fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.log_prob(z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    spec: MlpSpec,
    pub enc_hidden: Vec<Linear>,
    pub enc_mean: Linear,
    pub enc_log_var: Linear,
    pub dec_hidden: Vec<Linear>,
    pub dec_out: Linear,
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden);
        let enc_hidden = widths.windows(2).map(|w| Linear::he_init(w[0], w[1], rng)).collect();
        let last = *widths.last().expect("nonempty");
        let enc_mean = Linear::glorot_init(last, spec.latent_dim, rng);
        let enc_log_var = Linear::zeros(last, spec.latent_dim);

        let mut dec_widths = vec![spec.latent_dim];
        dec_widths.extend(spec.hidden.iter().rev());
        let dec_hidden = dec_widths.windows(2).map(|w| Linear::he_init(w[0], w[1], rng)).collect();
        let dec_last = *dec_widths.last().expect("nonempty");
        let dec_out = Linear::glorot_init(dec_last, spec.input_dim, rng);
        Ok(VaeModel {
            spec,
            enc_hidden,
            enc_mean,
            enc_log_var,
            dec_hidden,
            dec_out,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden);
        let last = *widths.last().expect("nonempty");
        let mut dec_widths = vec![spec.latent_dim];
        dec_widths.extend(spec.hidden.iter().rev());
        let dec_last = *dec_widths.last().expect("nonempty");
        Ok(VaeModel {
            enc_hidden: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
            enc_mean: Linear::zeros(last, spec.latent_dim),
            enc_log_var: Linear::zeros(last, spec.latent_dim),
            dec_hidden: dec_widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
            dec_out: Linear::zeros(dec_last, spec.input_dim),
            spec,
        })
    }

    /// Reassembles a model from parameter tensors in [`VaeModel::params`] order.
    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self> {
        let mut model = VaeModel::zeros(spec)?;
        if params.len() != model.params().len() {
            return Err(Error::DimMismatch {
                expected: model.params().len(),
                found: params.len(),
            });
        }
        for (slot, p) in model.params_mut().into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "from_params",
                    lhs: slot.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            *slot = p.with_requires_grad(true);
        }
        Ok(model)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn encoder_layers(&self) -> impl Iterator<Item = &Linear> {
        self.enc_hidden
            .iter()
            .chain([&self.enc_mean, &self.enc_log_var])
    }

    fn decoder_layers(&self) -> impl Iterator<Item = &Linear> {
        self.dec_hidden.iter().chain([&self.dec_out])
    }

    /// Encoder parameters (weight, bias per layer), then decoder parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        self.encoder_layers()
            .chain(self.decoder_layers())
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self
            .enc_hidden
            .iter_mut()
            .chain([&mut self.enc_mean, &mut self.enc_log_var])
            .chain(self.dec_hidden.iter_mut())
            .chain([&mut self.dec_out])
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn encoder_param_count(&self) -> usize {
        2 * (self.enc_hidden.len() + 2)
    }

    /// Flattened copy of every parameter, in [`VaeModel::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundVae<'t> {
        let b = |l: &Linear| BoundLinear::bind(tape, l, trainable);
        BoundVae {
            enc_hidden: self.enc_hidden.iter().map(b).collect(),
            enc_mean: b(&self.enc_mean),
            enc_log_var: b(&self.enc_log_var),
            dec_hidden: self.dec_hidden.iter().map(b).collect(),
            dec_out: b(&self.dec_out),
        }
    }

    /// Copies gradients for every parameter from `grads` into the model.
    pub fn store_grads(&mut self, bound: &BoundVae<'_>, grads: &Gradients) -> Result<()> {
        for (p, v) in self.params_mut().into_iter().zip(bound.vars()) {
            grads.write_to(v, p)?;
        }
        Ok(())
    }

    fn check_width(&self, x: &Tensor, expected: usize) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != expected {
            return Err(Error::DimMismatch {
                expected,
                found: x.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Vec<DiagGaussian>> {
        self.check_width(x, self.spec.input_dim)?;
        self.encode_rows(x)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Vec<BernoulliVec>> {
        self.check_width(z, self.spec.latent_dim)?;
        let means = self.decode_means(z)?;
        (0..means.rows())
            .map(|i| BernoulliVec::new(means.row(i).to_vec()))
            .collect()
    }

    /// Decoded Bernoulli means as a `[n, input_dim]` tensor.
    pub fn decode_means(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width(z, self.spec.latent_dim)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        Ok(bound.decode(tape.constant(z))?.value())
    }
}

impl Encoder for VaeModel {
    fn data_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn encode_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let bound = BoundEncoder {
            hidden: self.enc_hidden.iter().map(|l| BoundLinear::bind(tape, l, false)).collect(),
            mean: BoundLinear::bind(tape, &self.enc_mean, false),
            log_var: BoundLinear::bind(tape, &self.enc_log_var, false),
        };
        bound.encode(x)
    }
}

struct BoundEncoder<'t> {
    hidden: Vec<BoundLinear<'t>>,
    mean: BoundLinear<'t>,
    log_var: BoundLinear<'t>,
}

impl<'t> BoundEncoder<'t> {
    fn encode(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = hidden_stack(&self.hidden, x)?;
        Ok((self.mean.forward(h)?, self.log_var.forward(h)?))
    }
}

/// A [`VaeModel`] whose parameters are recorded on a tape.
pub struct BoundVae<'t> {
    pub enc_hidden: Vec<BoundLinear<'t>>,
    pub enc_mean: BoundLinear<'t>,
    pub enc_log_var: BoundLinear<'t>,
    pub dec_hidden: Vec<BoundLinear<'t>>,
    pub dec_out: BoundLinear<'t>,
}

impl<'t> BoundVae<'t> {
    pub fn encode(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = hidden_stack(&self.enc_hidden, x)?;
        Ok((self.enc_mean.forward(h)?, self.enc_log_var.forward(h)?))
    }

    /// Clamped Bernoulli means.
    pub fn decode(&self, z: Var<'t>) -> Result<Var<'t>> {
        let h = hidden_stack(&self.dec_hidden, z)?;
        ops::bernoulli_means(self.dec_out.forward(h)?)
    }

    /// Vars in [`VaeModel::params`] order.
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.enc_hidden
            .iter()
            .chain([&self.enc_mean, &self.enc_log_var])
            .chain(self.dec_hidden.iter())
            .chain([&self.dec_out])
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

/// Prior density as it appears on a tape: `[k, d]` component parameters and
/// `[k]` log-weights.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars<'t> {
    pub means: Var<'t>,
    pub log_vars: Var<'t>,
    pub log_weights: Var<'t>,
}

impl<'t> PriorVars<'t> {
    /// Frozen mixture; zero-weight components are dropped.
    pub fn constant(tape: &'t Tape, m: &FiniteMixture) -> Result<Self> {
        let (mut mu, mut lv, mut lw) = (Vec::new(), Vec::new(), Vec::new());
        for (w, c) in m.active() {
            mu.extend_from_slice(&c.mean);
            lv.extend_from_slice(&c.log_var);
            lw.push(w);
        }
        let (k, d) = (lw.len(), m.dim());
        Ok(PriorVars {
            means: tape.constant_from(vec![k, d], mu)?,
            log_vars: tape.constant_from(vec![k, d], lv)?,
            log_weights: tape.constant_from(vec![k], lw)?,
        })
    }

    /// Components computed live by encoding `pseudo_inputs` with `bound`.
    pub fn live(bound: &BoundVae<'t>, pseudo_inputs: Var<'t>, log_weights: Var<'t>) -> Result<Self> {
        let (means, log_vars) = bound.encode(pseudo_inputs)?;
        Ok(PriorVars {
            means,
            log_vars,
            log_weights,
        })
    }

    pub fn log_prob(&self, z: Var<'t>) -> Result<Var<'t>> {
        ops::mixture_log_prob(z, self.means, self.log_vars, self.log_weights)
    }
}

/// Per-draw ELBO pieces, each `[mc * batch]`.
pub struct ElboTerms<'t> {
    pub reconstruction: Var<'t>,
    pub kl: Var<'t>,
}

impl<'t> ElboTerms<'t> {
    /// Mean per-example ELBO.
    pub fn elbo(&self) -> Result<Var<'t>> {
        self.reconstruction.sub(self.kl)?.mean()
    }
}

fn standard_normal_tensor<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).expect("finite normals")
}

/// Reparametrized ELBO terms for a batch `x` (`[b, input_dim]`) with `mc`
/// draws per example. The KL term is always the MC estimate
/// `log q(z | x) - log prior(z)`.
pub fn elbo_terms<'t, R: Rng + ?Sized>(
    bound: &BoundVae<'t>,
    prior: &PriorVars<'t>,
    x: Var<'t>,
    mc: usize,
    rng: &mut R,
) -> Result<ElboTerms<'t>> {
    if mc == 0 {
        return Err(Error::InvalidArgument("mc must be >= 1".into()));
    }
    let tape = x.tape();
    let (mean, log_var) = bound.encode(x)?;
    let (mean, log_var, x) = if mc > 1 {
        (mean.tile_rows(mc)?, log_var.tile_rows(mc)?, x.tile_rows(mc)?)
    } else {
        (mean, log_var, x)
    };
    let eps = tape.constant(&standard_normal_tensor(mean.shape(), rng));
    let z = ops::reparam(mean, log_var, eps)?;
    let recon = ops::bernoulli_log_prob(bound.decode(z)?, x)?;
    let log_q = ops::gaussian_log_prob(z, mean, log_var)?;
    let log_p = prior.log_prob(z)?;
    Ok(ElboTerms {
        reconstruction: recon,
        kl: log_q.sub(log_p)?,
    })
}

/// Mean per-example ELBO of `x` under a frozen mixture prior.
pub fn elbo<R: Rng + ?Sized>(
    model: &VaeModel,
    prior: &FiniteMixture,
    x: &Tensor,
    mc: usize,
    rng: &mut R,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let pv = PriorVars::constant(&tape, prior)?;
    let terms = elbo_terms(&bound, &pv, tape.constant(x), mc, rng)?;
    let v = terms.elbo()?.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "elbo" });
    }
    Ok(v)
}

/// Per-example ELBO (averaged over `mc` draws), evaluated in chunks.
pub fn elbo_per_example<R: Rng + ?Sized>(
    model: &VaeModel,
    prior: &FiniteMixture,
    x: &Tensor,
    mc: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let b = x.rows();
    let mut out = Vec::with_capacity(b);
    let chunk = 256;
    let mut start = 0;
    while start < b {
        let idx: Vec<usize> = (start..(start + chunk).min(b)).collect();
        let xb = x.select_rows(&idx);
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let pv = PriorVars::constant(&tape, prior)?;
        let terms = elbo_terms(&bound, &pv, tape.constant(&xb), mc, rng)?;
        let per = terms.reconstruction.sub(terms.kl)?.to_vec();
        let n = idx.len();
        for i in 0..n {
            out.push((0..mc).map(|m| per[m * n + i]).sum::<f64>() / mc as f64);
        }
        start += chunk;
    }
    Ok(out)
}

impl LatentModel for VaeModel {
    fn posterior(&self, x: &[f64]) -> Result<DiagGaussian> {
        let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.encode(&t)?.remove(0))
    }

    fn log_likelihood(&self, x: &[f64], z: &Tensor) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimMismatch {
                expected: self.spec.input_dim,
                found: x.len(),
            });
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let means = bound.decode(tape.constant(z))?;
        let xs = tape.constant_from(vec![1, x.len()], x.to_vec())?;
        Ok(ops::bernoulli_log_prob(means, xs)?.to_vec())
    }
}

/// `-log (1/k) sum_i p(x|z_i) p(z_i) / q(z_i|x)`, `z_i ~ q(z|x)`, per row of `x`.
pub fn nll_importance_sampling<M, P, R>(
    model: &M,
    prior: &P,
    x: &Tensor,
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    M: LatentModel + ?Sized,
    P: LogDensity + ?Sized,
    R: Rng + ?Sized,
{
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    const CHUNK: usize = 1000;
    let mut out = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let q = model.posterior(xi)?;
        let d = q.dim();
        let mut log_w = Vec::with_capacity(k);
        let mut done = 0;
        while done < k {
            let n = CHUNK.min(k - done);
            let mut zs = Vec::with_capacity(n * d);
            for _ in 0..n {
                zs.extend(q.sample(rng));
            }
            let zt = Tensor::new(vec![n, d], zs)?;
            let ll = model.log_likelihood(xi, &zt)?;
            for (j, l) in ll.iter().enumerate() {
                let z = zt.row(j);
                let w = l + prior.log_density(z)? - q.log_prob(z)?;
                if !w.is_finite() {
                    return Err(Error::NonFiniteSample {
                        value: w,
                        sample: z.to_vec(),
                    });
                }
                log_w.push(w);
            }
            done += n;
        }
        out.push(-(log_sum_exp(&log_w) - (k as f64).ln()));
    }
    Ok(out)
}
