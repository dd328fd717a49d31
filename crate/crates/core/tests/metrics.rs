use boovae::data::{synthetic_cluster_tasks, TaskStream};
use boovae::metrics::{
    diversity_kl, eval_suite, image_grid, image_shape, prior_sample_grid, train_probe_classifier, DiversityForm,
    EvalConfig, ProbeConfig, ReportRow, DIVERSITY_EPS,
};
use boovae::prior::BoostConfig;
use boovae::trainer::{train_task, ContinualState, TrainConfig};
use boovae::vae::{MlpSpec, VaeModel};
use boovae::autodiff::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BP: DiversityForm = DiversityForm::BernoulliPairs;

#[test]
fn balanced_counts_score_near_zero() {
    for t in 2..6 {
        let r = diversity_kl(&vec![2500.0; t], DIVERSITY_EPS, BP).unwrap();
        assert!(r.score.abs() <= 1e-4);
        assert_eq!(r.total, 2500.0 * t as f64);
        let m = diversity_kl(&vec![2500.0; t], DIVERSITY_EPS, DiversityForm::Multinomial).unwrap();
        assert!(m.score.abs() <= 1e-4);
    }
    assert_eq!(diversity_kl(&[7.0, 7.0], 0.0, BP).unwrap().score, 0.0);
}

#[test]
fn collapsed_counts_match_scalar_formula() {
    let n = 1e4;
    let eps = 0.5;
    let r = diversity_kl(&[n, 0.0], eps, BP).unwrap();
    let p1 = (n + eps) / (n + 2.0 * eps);
    let p2 = eps / (n + 2.0 * eps);
    let kl = |q: f64, p: f64| q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
    let want = kl(0.5, p1) + kl(0.5, p2);
    assert!((r.score - want).abs() <= 1e-9, "{} vs {want}", r.score);
    assert!((r.per_class[0] - kl(0.5, p1)).abs() <= 1e-12);
    let m = diversity_kl(&[n, 0.0], eps, DiversityForm::Multinomial).unwrap();
    let want_m = 0.5 * (0.5 / p1).ln() + 0.5 * (0.5 / p2).ln();
    assert!((m.score - want_m).abs() <= 1e-9);
}

#[test]
fn diversity_grows_with_imbalance() {
    let n = 1000.0;
    let scores: Vec<f64> = (0..=10)
        .map(|k| {
            let a = n * (0.5 + 0.05 * k as f64);
            diversity_kl(&[a, n - a], DIVERSITY_EPS, BP).unwrap().score
        })
        .collect();
    assert!(scores.windows(2).all(|w| w[1] > w[0]), "{scores:?}");
}

#[test]
fn diversity_rejects_bad_counts() {
    assert!(diversity_kl(&[1.0, -1.0], 0.5, BP).is_err());
    assert!(diversity_kl(&[1.0, f64::NAN], 0.5, BP).is_err());
    assert!(diversity_kl(&[3.0], 0.5, BP).is_err());
    assert!(diversity_kl(&[0.0, 0.0], 0.0, BP).is_err());
    assert!(diversity_kl(&[1.0, 2.0], -0.1, BP).is_err());
}

proptest! {
    #[test]
    fn diversity_is_permutation_invariant_and_nonnegative(
        counts in prop::collection::vec(0u32..5000, 2..8),
        shift in 0usize..8,
    ) {
        let c: Vec<f64> = counts.iter().map(|&v| v as f64).collect();
        let k = c.len();
        let rotated: Vec<f64> = (0..k).map(|i| c[(i + shift) % k]).collect();
        let a = diversity_kl(&c, DIVERSITY_EPS, BP).unwrap();
        let b = diversity_kl(&rotated, DIVERSITY_EPS, BP).unwrap();
        prop_assert!((a.score - b.score).abs() <= 1e-12);
        prop_assert!(a.score >= 0.0);
        prop_assert_eq!(a.total, c.iter().sum::<f64>());
    }
}

fn clusters(n_tasks: usize, n: usize, seed: u64) -> TaskStream {
    synthetic_cluster_tasks(n_tasks, n, 16, 6.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().0
}

/// Rows `[from, to)` of every task.
fn slice(stream: &TaskStream, from: usize, to: usize) -> TaskStream {
    let idx: Vec<usize> = (from..to).collect();
    TaskStream {
        tasks: stream
            .tasks
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.examples = t.examples.select_rows(&idx);
                t.labels = idx.iter().map(|&i| t.labels[i]).collect();
                t
            })
            .collect(),
    }
}

fn probe_cfg() -> ProbeConfig {
    ProbeConfig {
        hidden: 32,
        epochs: 10,
        batch_size: 50,
        lr: 3e-3,
        val_fraction: 0.2,
    }
}

#[test]
fn probe_separates_clusters() {
    let all = clusters(2, 600, 1);
    let stream = slice(&all, 0, 400);
    let probe = train_probe_classifier(&stream, &probe_cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(probe.accuracy >= 0.99, "{}", probe.accuracy);
    assert_eq!(probe.n_classes(), 2);

    let fresh = slice(&all, 400, 600);
    for (t, task) in fresh.tasks.iter().enumerate() {
        let pred = probe.predict(&task.examples, 2).unwrap();
        let hit = pred.iter().filter(|&&p| p == t).count();
        assert!(hit as f64 >= 0.99 * pred.len() as f64);
        assert!(probe.predict(&task.examples, 1).unwrap().iter().all(|&p| p == 0));
    }
}

#[test]
fn probe_is_deterministic() {
    let stream = clusters(3, 100, 4);
    let a = train_probe_classifier(&stream, &probe_cfg(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = train_probe_classifier(&stream, &probe_cfg(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn probe_follows_label_permutation() {
    let all = clusters(3, 400, 6);
    let stream = slice(&all, 0, 300);
    let perm = [2usize, 0, 1];
    let mut permuted = TaskStream::default();
    for &src in &[1usize, 2, 0] {
        permuted.tasks.push(stream.tasks[src].clone());
    }
    // stream task `i` now sits at position perm[i]
    let a = train_probe_classifier(&stream, &probe_cfg(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = train_probe_classifier(&permuted, &probe_cfg(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let test = slice(&all, 300, 400);
    let (x, _) = test.concat().unwrap();
    let (pa, pb) = (a.predict(&x, 3).unwrap(), b.predict(&x, 3).unwrap());
    let agree = pa.iter().zip(&pb).filter(|(p, q)| perm[**p] == **q).count();
    assert!(agree as f64 >= 0.99 * x.rows() as f64, "{agree} of {}", x.rows());
}

#[test]
fn image_helpers() {
    assert_eq!(image_shape(784), (28, 28));
    assert_eq!(image_shape(16), (4, 4));
    assert_eq!(image_shape(10), (1, 10));
    let row = Tensor::new(vec![2, 4], vec![0.0, 1.0, 0.5, 2.0, -1.0, 0.0, 1.0, 1.0]).unwrap();
    let g = image_grid(&[row.clone(), row]).unwrap();
    assert_eq!((g.width, g.height), (5, 5));
    assert_eq!(&g.pixels[..5], &[0, 255, 0, 0, 0]);
    assert_eq!(&g.pixels[5..10], &[128, 255, 0, 255, 255]);
    assert!(g.pixels[10..15].iter().all(|&p| p == 0));
    let bytes = g.to_bytes();
    assert!(bytes.starts_with(b"P5\n5 5\n255\n"));
    assert_eq!(bytes.len(), 11 + 25);
    assert!(image_grid(&[]).is_err());
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        components_per_task: 2,
        batch_size: 50,
        lr: 3e-3,
        max_epochs: 10,
        early_stop_patience: 5,
        warmup_epochs: 2,
        anchor_size: 50,
        boost: BoostConfig {
            component_steps: 40,
            component_lr: 0.05,
            weight_steps: 20,
            weight_mc: 128,
            prune_steps: 20,
            ..BoostConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn eval_cfg() -> EvalConfig {
    EvalConfig {
        is_samples: 50,
        diversity_samples: 500,
        grid_per_task: 3,
        ..EvalConfig::default()
    }
}

#[test]
fn eval_suite_rows_after_each_task() {
    let all = clusters(2, 180, 9);
    let train = slice(&all, 0, 150);
    let mut test = slice(&all, 150, 180);
    test.tasks[1] = slice(&test, 0, 20).tasks[1].clone();
    let probe = train_probe_classifier(&train, &probe_cfg(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let spec = MlpSpec {
        input_dim: 16,
        hidden: vec![16],
        latent_dim: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut st = ContinualState::new(VaeModel::new(spec, &mut rng).unwrap());
    assert!(eval_suite(&st, &test, Some(&probe), &eval_cfg(), &mut rng).is_err());

    let mut rows: Vec<ReportRow> = Vec::new();
    for t in 0..2 {
        train_task(&mut st, &train.tasks[t].examples, &quick_cfg(), &mut rng).unwrap();
        let before = st.model.flat_params();
        let prior_before = st.prior.clone();
        let bank_before = st.bank.clone();
        let report = eval_suite(&st, &test, Some(&probe), &eval_cfg(), &mut rng).unwrap();
        assert_eq!(st.model.flat_params(), before);
        assert_eq!(st.prior, prior_before);
        assert_eq!(st.bank, bank_before);

        let row = report.row;
        assert_eq!(row.after_task, t + 1);
        assert_eq!(row.per_task_nll.len(), t + 1);
        assert_eq!(row.test_sizes, [30, 20][..=t].to_vec());
        let weighted: f64 = row.per_task_nll.iter().zip(&row.test_sizes).map(|(v, &n)| v * n as f64).sum::<f64>()
            / row.test_sizes.iter().sum::<usize>() as f64;
        assert!((row.cumulative_nll - weighted).abs() <= 1e-9);
        assert_eq!(row.components_per_task.len(), t + 1);
        assert!(report.grid.width > 0 && report.grid.height > 0);
        rows.push(row);
    }
    assert!(rows[0].diversity.is_none());
    assert!(!rows[0].diversity_note.is_empty());
    let d = rows[1].diversity.as_ref().unwrap();
    assert_eq!(d.total, 500.0);

    let width = ReportRow::CSV_HEADER.split(',').count();
    for r in &rows {
        assert_eq!(r.csv_row().split(',').count(), width);
    }

    let no_probe = eval_suite(&st, &test, None, &eval_cfg(), &mut rng).unwrap();
    assert!(no_probe.row.diversity.is_none());
    assert!(eval_suite(&st, &test.prefix(1), Some(&probe), &eval_cfg(), &mut rng).is_err());
}

#[test]
fn empty_prior_grid_draws_from_standard_normal() {
    let spec = MlpSpec {
        input_dim: 9,
        hidden: vec![4],
        latent_dim: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = VaeModel::new(spec, &mut rng).unwrap();
    let g = prior_sample_grid(&model, &Default::default(), 2, 4, &mut rng).unwrap();
    assert_eq!((g.width, g.height), (4 * 4 - 1, 3));
}
