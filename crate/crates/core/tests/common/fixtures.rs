//! Small latent-space scenes for the boosting tests: an affine encoder onto
//! a box, components placed by their snapshot means, anchors likewise.

use boovae::autodiff::Tensor;
use boovae::prior::{BoostTarget, MixturePrior, PriorComponent};
use boovae::vae::Encoder;

use super::AffineEncoder;

pub const SIGMA: f64 = 0.5;

pub fn wide_box() -> AffineEncoder {
    AffineEncoder::boxed(&[-3.0, -3.0], &[3.0, 3.0], (SIGMA * SIGMA).ln())
}

pub fn component_at(enc: &AffineEncoder, mean: &[f64], log_weight: f64, task: usize) -> PriorComponent {
    let u = enc.preimage(mean);
    let snapshot = enc.encode_rows(&Tensor::new(vec![1, u.len()], u.clone()).unwrap()).unwrap().remove(0);
    PriorComponent {
        pseudo_input: u,
        snapshot,
        log_weight,
        task_id: task,
    }
}

pub fn anchors_at(enc: &AffineEncoder, means: &[[f64; 2]]) -> Tensor {
    let rows: Vec<Vec<f64>> = means.iter().map(|m| enc.preimage(m)).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn prior_of(comps: Vec<PriorComponent>) -> MixturePrior {
    MixturePrior::from_components(comps).unwrap()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn two_mode_setup() -> (AffineEncoder, BoostTarget, MixturePrior) {
    // tight box: the uncovered mode sits just inside the reachable range
    let enc = AffineEncoder::boxed(&[-2.2, -1.0], &[2.2, 1.0], (SIGMA * SIGMA).ln());
    let t = BoostTarget::new(0.0, MixturePrior::new(), anchors_at(&enc, &[[2.0, 0.0], [-2.0, 0.0]]), 0, &enc).unwrap();
    let r = prior_of(vec![component_at(&enc, &[2.0, 0.0], 0.0, 0)]);
    (enc, t, r)
}
