//! History perturbation with noise that fades toward the current frame.

use std::f64::consts::TAU;

use rand::Rng as _;

use crate::rng::Rng;
use crate::scenario::TrainingSample;

/// Default upper bound of the noise scale, as a fraction of the distance to
/// the oldest history position.
pub const DEFAULT_SIGMA_MAX: f64 = 0.1;

/// Shifts history frame `k` (0 = oldest of `n`) by `sigma * t / T * dir` with
/// `t = n - 1 - k`, so the oldest frame moves by exactly `sigma` and the
/// current frame not at all. Targets are left untouched.
pub fn perturb_history_with(sample: &TrainingSample, sigma: f64, dir: [f64; 2]) -> TrainingSample {
    let mut out = sample.clone();
    let t_max = (out.ego_history.len().max(2) - 1) as f64;
    let n = out.ego_history.len();
    for (k, s) in out.ego_history.iter_mut().enumerate() {
        let w = sigma * (n - 1 - k) as f64 / t_max;
        s.x += w * dir[0];
        s.y += w * dir[1];
    }
    out
}

/// Draws `sigma ~ U[0, sigma_max] * |oldest position|` and a random direction.
/// Returns the perturbed sample and the drawn `sigma`.
pub fn perturb_history(sample: &TrainingSample, sigma_max: f64, rng: &mut Rng) -> (TrainingSample, f64) {
    let oldest = sample.ego_history.first().map_or(0.0, |s| s.x.hypot(s.y));
    let u: f64 = rng.random();
    let sigma = u * sigma_max * oldest;
    let angle = rng.random::<f64>() * TAU;
    (perturb_history_with(sample, sigma, [angle.cos(), angle.sin()]), sigma)
}
