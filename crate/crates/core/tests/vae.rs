mod common;

use boovae::autodiff::{Tape, Tensor};
use boovae::distributions::{kl_diag_gaussians, ops, DiagGaussian, FiniteMixture, McEstimate};
use boovae::vae::{
    elbo, elbo_per_example, elbo_terms, nll_importance_sampling, LatentModel, MlpSpec, PriorVars, VaeModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::grad_cases::{random_model, small_spec, uniform_tensor};
use common::{trained_toy_vae, LinearGaussian};

fn toy_linear() -> LinearGaussian {
    LinearGaussian {
        a: 1.5,
        b: 0.3,
        s: 0.8,
        mean_scale: 0.9,
        var_scale: 1.5,
    }
}

#[test]
fn kl_vanishes_when_prior_is_the_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = random_model(small_spec(), &mut rng);
    let x = uniform_tensor(vec![1, 5], 0.0, 1.0, &mut rng);
    let q = model.encode(&x).unwrap().remove(0);
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let pv = PriorVars::constant(&tape, &FiniteMixture::single(q)).unwrap();
    let terms = elbo_terms(&bound, &pv, tape.constant(&x), 50, &mut rng).unwrap();
    assert!(terms.kl.to_vec().iter().all(|k| k.abs() < 1e-12));
    let rec = terms.reconstruction.mean().unwrap().item();
    assert!((terms.elbo().unwrap().item() - rec).abs() < 1e-12);
}

#[test]
fn mc_kl_matches_closed_form_under_standard_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = random_model(small_spec(), &mut rng);
    let x = uniform_tensor(vec![1, 5], 0.0, 1.0, &mut rng);
    let q = model.encode(&x).unwrap().remove(0);
    let exact = kl_diag_gaussians(&q, &DiagGaussian::standard(2)).unwrap();
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let pv = PriorVars::constant(&tape, &FiniteMixture::single(DiagGaussian::standard(2))).unwrap();
    let terms = elbo_terms(&bound, &pv, tape.constant(&x), 10_000, &mut rng).unwrap();
    let est = McEstimate::from_samples(&terms.kl.to_vec());
    assert!((est.mean - exact).abs() <= 3.0 * est.std_error, "{est:?} vs {exact}");
}

#[test]
fn elbo_is_below_importance_sampled_likelihood() {
    let (model, x) = trained_toy_vae(300, 3);
    let prior = FiniteMixture::single(DiagGaussian::standard(2));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let idx: Vec<usize> = (0..40).map(|i| i * 5).collect();
    let xs = x.select_rows(&idx);
    let el = elbo_per_example(&model, &prior, &xs, 200, &mut rng).unwrap();
    let nll = nll_importance_sampling(&model, &prior, &xs, 2000, &mut rng).unwrap();
    let ok = el.iter().zip(&nll).filter(|(e, n)| **e <= -**n).count();
    assert!(ok as f64 >= 0.95 * xs.rows() as f64, "{ok} of {}", xs.rows());
}

#[test]
fn single_sample_is_matches_elbo_in_expectation() {
    let (model, x) = trained_toy_vae(100, 5);
    let prior = FiniteMixture::single(DiagGaussian::standard(2));
    let xs = x.select_rows(&[7]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let is: Vec<f64> = (0..1000)
        .map(|_| -nll_importance_sampling(&model, &prior, &xs, 1, &mut rng).unwrap()[0])
        .collect();
    let el: Vec<f64> = (0..1000)
        .map(|_| elbo_per_example(&model, &prior, &xs, 1, &mut rng).unwrap()[0])
        .collect();
    let (a, b) = (McEstimate::from_samples(&is), McEstimate::from_samples(&el));
    assert!(a.agrees_with(&b, 3.0), "{a:?} vs {b:?}");
}

#[test]
fn importance_sampling_recovers_analytic_marginal() {
    let toy = toy_linear();
    let prior = DiagGaussian::standard(1);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &x in &[-1.0, 0.3, 2.5] {
        let xt = Tensor::new(vec![1, 1], vec![x]).unwrap();
        let nll = nll_importance_sampling(&toy, &prior, &xt, 10_000, &mut rng).unwrap()[0];
        let exact = -toy.exact_log_marginal(x);
        assert!((nll - exact).abs() < 0.01, "x={x}: {nll} vs {exact}");
    }
}

#[test]
fn importance_estimate_decreases_with_k() {
    let toy = toy_linear();
    let prior = DiagGaussian::standard(1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
    let xt = Tensor::new(vec![100, 1], xs).unwrap();
    let small = nll_importance_sampling(&toy, &prior, &xt, 10, &mut rng).unwrap();
    let large = nll_importance_sampling(&toy, &prior, &xt, 1000, &mut rng).unwrap();
    let diff: Vec<f64> = small.iter().zip(&large).map(|(s, l)| s - l).collect();
    let d = McEstimate::from_samples(&diff);
    assert!(d.mean > 0.0, "{d:?}");
}

#[test]
fn pseudo_input_gradient_comes_only_from_prior_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = random_model(small_spec(), &mut rng);
    let x = uniform_tensor(vec![3, 5], 0.0, 1.0, &mut rng);
    let u = uniform_tensor(vec![2, 5], 0.1, 0.9, &mut rng).with_requires_grad(true);
    let grad_u = |with_prior: bool| {
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let uv = tape.leaf(&u);
        let lw = tape.constant_from(vec![2], vec![0.5f64.ln(); 2]).unwrap();
        let pv = PriorVars::live(&bound, uv, lw).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let t = elbo_terms(&bound, &pv, tape.constant(&x), 3, &mut r).unwrap();
        let loss = if with_prior {
            t.elbo().unwrap()
        } else {
            // drop the prior part of the KL term, keep the entropy part
            let (m, lv) = bound.encode(tape.constant(&x)).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(1);
            let eps: Vec<f64> = (0..6).map(|_| r.sample(rand_distr::StandardNormal)).collect();
            let z = ops::reparam(m, lv, tape.constant_from(vec![3, 2], eps).unwrap()).unwrap();
            let log_q = ops::gaussian_log_prob(z, m, lv).unwrap();
            t.reconstruction.mean().unwrap().sub(log_q.mean().unwrap()).unwrap()
        };
        let g = tape.backward(loss).unwrap();
        g.get(uv).map(<[f64]>::to_vec).unwrap_or_default()
    };
    assert!(grad_u(true).iter().any(|g| g.abs() > 1e-8));
    assert!(grad_u(false).iter().all(|g| *g == 0.0));
}

#[test]
fn trained_encoder_and_decoder_respond_to_inputs() {
    let (model, x) = trained_toy_vae(100, 10);
    let a = x.select_rows(&[0]);
    let mut b = a.clone();
    b.data_mut()[3] = 1.0 - b.data()[3];
    let (qa, qb) = (model.encode(&a).unwrap(), model.encode(&b).unwrap());
    assert_ne!(qa[0].mean, qb[0].mean);
    let z1 = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let z2 = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
    assert_ne!(model.decode_means(&z1).unwrap().data(), model.decode_means(&z2).unwrap().data());
}

#[test]
fn zero_model_decodes_to_one_half() {
    let spec = MlpSpec {
        input_dim: 6,
        hidden: vec![3],
        latent_dim: 2,
    };
    let m = VaeModel::zeros(spec).unwrap();
    let z = Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 0.1]).unwrap();
    assert!(m.decode_means(&z).unwrap().data().iter().all(|v| *v == 0.5));
    let q = m.posterior(&[0.2; 6]).unwrap();
    assert_eq!(q.mean, vec![0.0, 0.0]);
    assert_eq!(q.log_var, vec![0.0, 0.0]);
}

#[test]
fn outputs_are_deterministic_given_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = random_model(small_spec(), &mut rng);
        let x = uniform_tensor(vec![4, 5], 0.0, 1.0, &mut rng);
        let prior = FiniteMixture::single(DiagGaussian::standard(2));
        let e = elbo(&model, &prior, &x, 3, &mut rng).unwrap();
        let n = nll_importance_sampling(&model, &prior, &x, 50, &mut rng).unwrap();
        (e.to_bits(), n.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
