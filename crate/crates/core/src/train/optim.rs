//! AdamW with decoupled weight decay and a warmup/linear-decay schedule.

use stformer_tensor::{GradStore, ParamStore};

use crate::heads::diffusion::STATS_PREFIX;
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Linear ramp from 0 to `peak` over `warmup` steps, then linear decay to 0
/// at `max_steps`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize, max_steps: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= max_steps {
        return 0.0;
    }
    let span = (max_steps - warmup) as f64;
    peak * (max_steps - step) as f64 / span
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Updates every trainable parameter. Decay is applied to the weights
    /// directly, before the moment-based step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in &ids {
            if store.is_trainable(*id) && grads.get(*id).iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: self.t as usize,
                    detail: format!("non-finite gradient in `{}`", store.get(*id).name),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        for id in ids {
            let p = store.get(id);
            if !store.is_trainable(id) || p.name.starts_with(STATS_PREFIX) {
                continue;
            }
            let decay = if p.decay_eligible { 1.0 - lr * self.weight_decay } else { 1.0 };
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.tensor_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] = w[i] * decay - lr * mh / (vh.sqrt() + EPS);
            }
        }
        Ok(())
    }
}
