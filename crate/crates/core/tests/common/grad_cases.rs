//! Finite-difference checks for every tape primitive and every training loss.
//! Each case returns the worst relative error over all inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use boovae::autodiff::{Tensor, Var};
use boovae::distributions::{ops, BernoulliVec, DiagGaussian, FiniteMixture};
use boovae::prior::{component_objective, MixturePrior, PriorComponent};
use boovae::trainer::{
    maximization_objective, reg_decoder_on, reg_encoder_on, BankEntry, ContinualState, RegularizerBank, TrainConfig,
};
use boovae::vae::{elbo_terms, BoundLinear, BoundVae, MlpSpec, PriorVars, VaeModel};
use boovae::Result;

use super::gradcheck;

pub fn normal_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn uniform_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Normal entries kept at least `gap` away from zero.
fn away_from_zero(shape: Vec<usize>, gap: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = normal_tensor(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

/// `sum(out * w)` for a fixed random `w`, so every output entry matters.
fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = normal_tensor(out.shape(), &mut rng);
    out.mul(out.tape().constant(&w))?.sum()
}

type Case = (&'static str, f64);

pub fn primitive_errors(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = normal_tensor(vec![3, 4], &mut rng);
    let b = normal_tensor(vec![4, 2], &mut rng);
    let c = normal_tensor(vec![3, 4], &mut rng);
    let row = normal_tensor(vec![4], &mut rng);
    let row1 = normal_tensor(vec![1, 4], &mut rng);
    let pos = uniform_tensor(vec![3, 4], 0.2, 3.0, &mut rng);
    let kinked = away_from_zero(vec![3, 4], 1e-2, &mut rng);
    let mut inside = uniform_tensor(vec![3, 4], -0.9, 0.9, &mut rng);
    for v in inside.data_mut() {
        // keep clear of the clamp bounds at +-0.5
        if (v.abs() - 0.5).abs() < 1e-2 {
            *v *= 0.8;
        }
    }
    let s = seed;
    let mut out: Vec<Case> = vec![
        ("matmul", gradcheck(&[a.clone(), b.clone()], |_, v| project(v[0].matmul(v[1])?, s))),
        ("add", gradcheck(&[a.clone(), c.clone()], |_, v| project(v[0].add(v[1])?, s))),
        ("add_broadcast_row", gradcheck(&[a.clone(), row.clone()], |_, v| project(v[0].add(v[1])?, s))),
        ("add_broadcast_left", gradcheck(&[row1.clone(), a.clone()], |_, v| project(v[0].add(v[1])?, s))),
        ("sub", gradcheck(&[a.clone(), row1.clone()], |_, v| project(v[0].sub(v[1])?, s))),
        ("mul", gradcheck(&[a.clone(), c.clone()], |_, v| project(v[0].mul(v[1])?, s))),
        ("mul_broadcast", gradcheck(&[row.clone(), c.clone()], |_, v| project(v[0].mul(v[1])?, s))),
        ("square", gradcheck(&[a.clone()], |_, v| project(v[0].square()?, s))),
        ("neg", gradcheck(&[a.clone()], |_, v| project(v[0].neg()?, s))),
        ("exp", gradcheck(&[a.clone()], |_, v| project(v[0].exp()?, s))),
        ("log", gradcheck(&[pos.clone()], |_, v| project(v[0].log()?, s))),
        ("sigmoid", gradcheck(&[a.clone()], |_, v| project(v[0].sigmoid()?, s))),
        ("leaky_relu", gradcheck(&[kinked], |_, v| project(v[0].leaky_relu()?, s))),
        ("softplus", gradcheck(&[a.clone()], |_, v| project(v[0].softplus()?, s))),
        ("scale", gradcheck(&[a.clone()], |_, v| project(v[0].scale(-1.7)?, s))),
        ("add_scalar", gradcheck(&[a.clone()], |_, v| project(v[0].add_scalar(0.3)?, s))),
        ("clamp", gradcheck(&[inside], |_, v| project(v[0].clamp(-0.5, 0.5)?, s))),
        ("sum", gradcheck(&[a.clone()], |_, v| v[0].sum()?.scale(1.3))),
        ("mean", gradcheck(&[a.clone()], |_, v| v[0].mean()?.scale(1.3))),
        ("sum_axis0", gradcheck(&[a.clone()], |_, v| project(v[0].sum_axis(0)?, s))),
        ("sum_axis1", gradcheck(&[a.clone()], |_, v| project(v[0].sum_axis(1)?, s))),
        ("mean_axis", gradcheck(&[a.clone()], |_, v| project(v[0].mean_axis(1)?, s))),
        ("log_sum_exp0", gradcheck(&[a.clone()], |_, v| project(v[0].log_sum_exp(0)?, s))),
        ("log_sum_exp1", gradcheck(&[a.clone()], |_, v| project(v[0].log_sum_exp(1)?, s))),
        ("transpose", gradcheck(&[a.clone()], |_, v| project(v[0].transpose()?, s))),
        ("reshape", gradcheck(&[a.clone()], |_, v| project(v[0].reshape(vec![2, 6])?, s))),
        ("repeat_rows", gradcheck(&[a.clone()], |_, v| project(v[0].repeat_rows(3)?, s))),
        ("tile_rows", gradcheck(&[a.clone()], |_, v| project(v[0].tile_rows(2)?, s))),
    ];
    out.extend(density_errors(seed));
    out
}

/// Tape density terms and closed-form divergences.
pub fn density_errors(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    let z = normal_tensor(vec![5, 2], &mut rng);
    let mean = normal_tensor(vec![5, 2], &mut rng);
    let lv = uniform_tensor(vec![5, 2], -1.0, 1.0, &mut rng);
    let mean_q = normal_tensor(vec![5, 2], &mut rng);
    let lv_q = uniform_tensor(vec![5, 2], -1.0, 1.0, &mut rng);
    let eps = normal_tensor(vec![5, 2], &mut rng);
    let means_k = normal_tensor(vec![3, 2], &mut rng);
    let lv_k = uniform_tensor(vec![3, 2], -1.0, 1.0, &mut rng);
    let lw = uniform_tensor(vec![3], -2.0, 0.0, &mut rng);
    let pa = uniform_tensor(vec![4, 6], 0.05, 0.95, &mut rng);
    let pb = uniform_tensor(vec![4, 6], 0.05, 0.95, &mut rng);
    let x = uniform_tensor(vec![4, 6], 0.0, 1.0, &mut rng);
    let logits = normal_tensor(vec![4, 6], &mut rng);
    let s = seed;
    vec![
        (
            "gaussian_log_prob",
            gradcheck(&[z.clone(), mean.clone(), lv.clone()], |_, v| {
                project(ops::gaussian_log_prob(v[0], v[1], v[2])?, s)
            }),
        ),
        (
            "reparam",
            gradcheck(&[mean.clone(), lv.clone()], |t, v| {
                project(ops::reparam(v[0], v[1], t.constant(&eps))?, s)
            }),
        ),
        (
            "mixture_log_prob",
            gradcheck(&[z.clone(), means_k, lv_k, lw], |_, v| {
                project(ops::mixture_log_prob(v[0], v[1], v[2], v[3])?, s)
            }),
        ),
        (
            "kl_diag",
            gradcheck(&[mean.clone(), lv.clone(), mean_q.clone(), lv_q.clone()], |_, v| {
                project(ops::kl_diag(v[0], v[1], v[2], v[3])?, s)
            }),
        ),
        (
            "sym_kl_diag",
            gradcheck(&[mean, lv, mean_q, lv_q], |_, v| {
                project(ops::sym_kl_diag(v[0], v[1], v[2], v[3])?, s)
            }),
        ),
        (
            "bernoulli_means",
            gradcheck(&[logits.clone()], |_, v| project(ops::bernoulli_means(v[0])?, s)),
        ),
        (
            "bernoulli_log_prob",
            gradcheck(&[pa.clone(), x], |_, v| project(ops::bernoulli_log_prob(v[0], v[1])?, s)),
        ),
        (
            "sym_kl_bernoulli",
            gradcheck(&[pa, pb], |_, v| project(ops::sym_kl_bernoulli(v[0], v[1])?, s)),
        ),
        ("log_softmax", gradcheck(&[logits], |_, v| project(ops::log_softmax(v[0])?, s))),
    ]
}

pub fn small_spec() -> MlpSpec {
    MlpSpec {
        input_dim: 5,
        hidden: vec![4],
        latent_dim: 2,
    }
}

/// Rebuilds a bound model from vars in parameter order.
pub fn bound_from_vars<'t>(vars: &[Var<'t>], spec: &MlpSpec) -> BoundVae<'t> {
    let layers: Vec<BoundLinear<'t>> = vars
        .chunks(2)
        .map(|p| BoundLinear {
            weight: p[0],
            bias: p[1],
        })
        .collect();
    let h = spec.hidden.len();
    BoundVae {
        enc_hidden: layers[..h].to_vec(),
        enc_mean: layers[h],
        enc_log_var: layers[h + 1],
        dec_hidden: layers[h + 2..2 * h + 2].to_vec(),
        dec_out: layers[2 * h + 2],
    }
}

/// A model whose log-variance head is not zero, so every parameter matters.
pub fn random_model(spec: MlpSpec, rng: &mut impl Rng) -> VaeModel {
    let mut m = VaeModel::new(spec, rng).unwrap();
    for v in m.enc_log_var.weight.data_mut() {
        *v = rng.random_range(-0.3..0.3);
    }
    for v in m.enc_log_var.bias.data_mut() {
        *v = rng.random_range(-0.3..0.3);
    }
    m
}

fn random_gaussian(d: usize, rng: &mut impl Rng) -> DiagGaussian {
    DiagGaussian::new(
        (0..d).map(|_| rng.sample(StandardNormal)).collect(),
        (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )
    .unwrap()
}

pub fn random_bank(spec: &MlpSpec, entries: usize, s: usize, rng: &mut impl Rng) -> RegularizerBank {
    RegularizerBank {
        entries: (0..entries)
            .map(|i| BankEntry {
                task_id: i % 2,
                pseudo_input: (0..spec.input_dim).map(|_| rng.random_range(0.0..1.0)).collect(),
                posterior: random_gaussian(spec.latent_dim, rng),
                latents: (0..s)
                    .map(|_| (0..spec.latent_dim).map(|_| rng.sample(StandardNormal)).collect())
                    .collect(),
                decoded: (0..s)
                    .map(|_| BernoulliVec::new((0..spec.input_dim).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap())
                    .collect(),
            })
            .collect(),
    }
}

/// Prior with components from task 0 and the current task 1.
pub fn random_prior(spec: &MlpSpec, rng: &mut impl Rng) -> MixturePrior {
    let comps = (0..4)
        .map(|i| PriorComponent {
            pseudo_input: (0..spec.input_dim).map(|_| rng.random_range(0.0..1.0)).collect(),
            snapshot: random_gaussian(spec.latent_dim, rng),
            log_weight: rng.random_range(-1.0..0.0),
            task_id: usize::from(i >= 2),
        })
        .collect();
    MixturePrior::from_components(comps).unwrap()
}

fn random_mixture(k: usize, d: usize, rng: &mut impl Rng) -> FiniteMixture {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|x| x / total).collect();
    FiniteMixture::new(&w, (0..k).map(|_| random_gaussian(d, rng)).collect()).unwrap()
}

pub fn loss_errors(seed: u64) -> Vec<Case> {
    let spec = small_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(5));
    let model = random_model(spec.clone(), &mut rng);
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let n_params = params.len();
    let x = uniform_tensor(vec![4, spec.input_dim], 0.0, 1.0, &mut rng);
    let u = uniform_tensor(vec![3, spec.input_dim], 0.05, 0.95, &mut rng);
    let u_lw = Tensor::new(vec![3], vec![(0.2f64).ln(), (0.3f64).ln(), (0.5f64).ln()]).unwrap();
    let bank = random_bank(&spec, 3, 2, &mut rng);
    let target = random_mixture(3, spec.latent_dim, &mut rng);
    let current = random_mixture(2, spec.latent_dim, &mut rng);
    let raw = normal_tensor(vec![1, spec.input_dim], &mut rng);
    let eps = normal_tensor(vec![8, spec.latent_dim], &mut rng);
    let mut state = ContinualState::new(model.clone());
    state.prior = random_prior(&spec, &mut rng);
    state.bank = bank.clone();
    state.seen_counts = vec![100];
    let draw_seed = rng.random::<u64>();

    let mut with_u = params.clone();
    with_u.push(u);
    let elbo_err = gradcheck(&with_u, |tape, v| {
        let bound = bound_from_vars(&v[..n_params], &spec);
        let prior = PriorVars::live(&bound, v[n_params], tape.constant(&u_lw))?;
        let mut r = ChaCha8Rng::seed_from_u64(draw_seed);
        elbo_terms(&bound, &prior, tape.constant(&x), 2, &mut r)?.elbo()?.neg()
    });
    let comp_err = gradcheck(&[raw], |tape, v| {
        let tv = PriorVars::constant(tape, &target)?;
        let cv = PriorVars::constant(tape, &current)?;
        component_objective(tape, v[0], &model, &tv, &cv, tape.constant(&eps))
    });
    let enc_err = gradcheck(&params, |_, v| reg_encoder_on(&bound_from_vars(v, &spec), &bank));
    let dec_err = gradcheck(&params, |_, v| reg_decoder_on(&bound_from_vars(v, &spec), &bank));
    let mut out = vec![
        ("elbo_live_prior", elbo_err),
        ("component_objective", comp_err),
        ("reg_encoder", enc_err),
        ("reg_decoder", dec_err),
    ];
    for (name, live) in [("maximization_objective", false), ("maximization_objective_live", true)] {
        let cfg = TrainConfig {
            lambda_reg: 0.7,
            elbo_mc: 2,
            live_prior: live,
            ..TrainConfig::default()
        };
        let err = gradcheck(&params, |tape, v| {
            let bound = bound_from_vars(v, &spec);
            let mut r = ChaCha8Rng::seed_from_u64(draw_seed);
            Ok(maximization_objective(tape, &bound, &state, &x, &cfg, &mut r)?.loss)
        });
        out.push((name, err));
    }
    out
}

/// Worst error per case name over `seeds`.
pub fn worst_over(seeds: std::ops::Range<u64>, f: impl Fn(u64) -> Vec<Case>) -> Vec<Case> {
    let mut worst: Vec<Case> = Vec::new();
    for s in seeds {
        for (name, e) in f(s) {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((name, e)),
            }
        }
    }
    worst
}
