//! Diffusion over key-point latents.
//!
//! One forward step is `x_t = sqrt(1 - b_t) x_{t-1} + sqrt(b_t) e_t` and its
//! algebraic inverse is `x_{t-1} = (x_t - sqrt(b_t) e) / sqrt(1 - b_t)`. The
//! noise predictor is trained on the closed-form marginal
//! `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) e`, so at sampling time its
//! cumulative estimate is converted to a per-step one before inverting.

use rand::Rng as _;
use rand_distr::StandardNormal;
use stformer_tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

use super::context::COORD_SCALE;
use crate::nn::{fan_in_std, Block, LayerNorm, Linear, TRANSFORMER_INIT_STD};
use crate::rng::Rng;
use crate::{Error, Result};

pub const DIFFUSION_STEPS: usize = 10;
pub const BETA_START: f64 = 0.01;
pub const BETA_END: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    /// `betas[t - 1]` is the variance added at step `t`.
    pub betas: Vec<f64>,
    /// `alphas_cum[t - 1] = prod_{i < t} (1 - betas[i])`.
    pub alphas_cum: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DIFFUSION_STEPS, BETA_START, BETA_END)
    }
}

impl DiffusionSchedule {
    /// Evenly spaced betas with exact endpoints.
    pub fn linear(steps: usize, start: f64, end: f64) -> Self {
        let delta = if steps > 1 { (end - start) / (steps - 1) as f64 } else { 0.0 };
        let mut betas: Vec<f64> = (0..steps).map(|i| start + delta * i as f64).collect();
        if let Some(last) = betas.last_mut() {
            if steps > 1 {
                *last = end;
            }
        }
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas_cum = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Self { betas, alphas_cum }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step { step: t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_cum(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cum[t - 1]
        }
    }
}

/// One noising step `t` with the given noise.
pub fn forward_step(x: &[f64], t: usize, schedule: &DiffusionSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let b = schedule.beta(t);
    let (keep, add) = ((1.0 - b).sqrt(), b.sqrt());
    Ok(x.iter().zip(eps).map(|(x, e)| keep * x + add * e).collect())
}

/// Applies steps `1..=t`, using `noises[i]` at step `i + 1`.
pub fn forward_diffuse(x0: &[f64], t: usize, schedule: &DiffusionSchedule, noises: &[Vec<f64>]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if noises.len() < t || noises.iter().take(t).any(|n| n.len() != x0.len()) {
        return Err(Error::Contract(format!("forward diffusion to step {t} needs {t} noise vectors of width {}", x0.len())));
    }
    let mut x = x0.to_vec();
    for (s, eps) in noises.iter().enumerate().take(t) {
        x = forward_step(&x, s + 1, schedule, eps)?;
    }
    Ok(x)
}

/// [`forward_diffuse`] with unit-normal noise drawn from `rng`.
pub fn forward_diffuse_rng(x0: &[f64], t: usize, schedule: &DiffusionSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let noises: Vec<Vec<f64>> = (0..t).map(|_| normal_vec(rng, x0.len())).collect();
    forward_diffuse(x0, t, schedule, &noises)
}

/// Inverts step `t` given the noise estimate `eps_hat`.
pub fn reverse_step(x: &[f64], eps_hat: &[f64], schedule: &DiffusionSchedule, t: usize) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let b = schedule.beta(t);
    let (keep, add) = ((1.0 - b).sqrt(), b.sqrt());
    Ok(x.iter().zip(eps_hat).map(|(x, e)| (x - add * e) / keep).collect())
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// How the reverse chain handles variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampler {
    /// Posterior-mean inversion plus fresh noise at every step but the last.
    #[default]
    Ancestral,
    /// Posterior-mean inversion only; randomness enters through the start.
    Deterministic,
}

/// Noise predictor over the three tokens `[condition, step, latent]`, read
/// out at the latent token.
#[derive(Clone, Debug)]
pub struct EpsPredictor {
    cond_in: Linear,
    latent_in: Linear,
    step_table: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
    pub d: usize,
    pub steps: usize,
}

impl EpsPredictor {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d: usize, heads: usize, layers: usize, steps: usize) -> Result<Self> {
        let s = TRANSFORMER_INIT_STD;
        let fan = fan_in_std(d, 1.0);
        Ok(Self {
            cond_in: Linear::new(store, rng, "diffusion.eps.cond", d, d, fan)?,
            latent_in: Linear::new(store, rng, "diffusion.eps.latent", d, d, fan)?,
            step_table: store.init("diffusion.eps.step", &[steps, d], Init::Normal(1.0), false, rng)?,
            blocks: (0..layers)
                .map(|i| Block::new(store, rng, &format!("diffusion.eps.h{i}"), d, 4 * d, heads))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(store, rng, "diffusion.eps.ln_f", d)?,
            out: Linear::new(store, rng, "diffusion.eps.out", d, d, s)?,
            d,
            steps,
        })
    }

    /// `latent` and `cond` are `[1, d]`; returns `[1, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent: Var, cond: Var, t: usize) -> Result<Var> {
        if t == 0 || t > self.steps {
            return Err(Error::Step { step: t, max: self.steps });
        }
        for v in [latent, cond] {
            if g.shape(v) != [1, self.d] {
                return Err(stformer_tensor::TensorError::Shape {
                    op: "eps_predictor",
                    left: vec![1, self.d],
                    right: g.shape(v).to_vec(),
                }
                .into());
            }
        }
        let c = self.cond_in.forward(g, store, cond)?;
        let table = g.param(store, self.step_table);
        let s = g.embedding(table, &[t - 1])?;
        let l = self.latent_in.forward(g, store, latent)?;
        let mut x = g.concat_rows(&[c, s, l])?;
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        let x = g.slice_rows(x, 2, 1)?;
        let x = self.ln_f.forward(g, store, x)?;
        self.out.forward(g, store, x)
    }

    /// Evaluates the predictor on plain values.
    pub fn predict(&self, store: &ParamStore, latent: &[f64], cond: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(1, latent.len(), latent.to_vec())?);
        let c = g.constant(Tensor::matrix(1, cond.len(), cond.to_vec())?);
        let e = self.forward(&mut g, store, l, c, t)?;
        Ok(g.value(e).data().to_vec())
    }
}

/// Diffusion key-point decoder: noise predictor, latent-to-point projection
/// and the latent normalization constant.
#[derive(Clone, Debug)]
pub struct DiffusionDecoder {
    pub eps: EpsPredictor,
    pub proj: Linear,
    /// One-value parameter holding the latent standard deviation.
    pub latent_std: ParamId,
    pub schedule: DiffusionSchedule,
    pub sampler: Sampler,
}

pub const STATS_PREFIX: &str = "stats.";

impl DiffusionDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d: usize, heads: usize, layers: usize) -> Result<Self> {
        let schedule = DiffusionSchedule::default();
        Ok(Self {
            eps: EpsPredictor::new(store, rng, d, heads, layers, schedule.steps())?,
            proj: Linear::new(store, rng, "diffusion.proj", d, 2, fan_in_std(d, 1.0))?,
            latent_std: store.init("stats.latent_std", &[1], Init::Ones, false, rng)?,
            schedule,
            sampler: Sampler::default(),
        })
    }

    pub fn std(&self, store: &ParamStore) -> f64 {
        store.tensor(self.latent_std).data()[0]
    }

    /// Latent rows `[n, d]` to points `[n, 2]` in meters.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, latent: Var) -> Result<Var> {
        let p = self.proj.forward(g, store, latent)?;
        Ok(g.scale(p, COORD_SCALE)?)
    }

    /// Squared error of the noise estimate for one standardized latent.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x0: &[f64],
        cond: Var,
        t: usize,
        eps: &[f64],
    ) -> Result<Var> {
        self.schedule.check_step(t)?;
        let ab = self.schedule.alpha_cum(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xt: Vec<f64> = x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect();
        let d = xt.len();
        let xt = g.constant(Tensor::matrix(1, d, xt)?);
        let pred = self.eps.forward(g, store, xt, cond, t)?;
        let target = g.constant(Tensor::matrix(1, d, eps.to_vec())?);
        Ok(g.mse(pred, target)?)
    }

    /// Runs the reverse chain from unit noise and returns the standardized latent.
    pub fn sample_latent(&self, store: &ParamStore, cond: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let sch = &self.schedule;
        let mut x = normal_vec(rng, self.eps.d);
        for t in (1..=sch.steps()).rev() {
            let e = self.eps.predict(store, &x, cond, t)?;
            let per_step = sch.beta(t).sqrt() / (1.0 - sch.alpha_cum(t)).sqrt();
            let e: Vec<f64> = e.iter().map(|v| v * per_step).collect();
            x = reverse_step(&x, &e, sch, t)?;
            if t > 1 && self.sampler == Sampler::Ancestral {
                let var = sch.beta(t) * (1.0 - sch.alpha_cum(t - 1)) / (1.0 - sch.alpha_cum(t));
                let z = normal_vec(rng, x.len());
                x.iter_mut().zip(z).for_each(|(x, z)| *x += var.sqrt() * z);
            }
        }
        Ok(x)
    }

    /// Draws one key point `(x, y)` in meters for condition `cond`.
    pub fn sample_point(&self, store: &ParamStore, cond: &[f64], rng: &mut Rng) -> Result<[f64; 2]> {
        let std = self.std(store);
        let latent: Vec<f64> = self.sample_latent(store, cond, rng)?.iter().map(|v| v * std).collect();
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(1, latent.len(), latent)?);
        let p = self.project(&mut g, store, l)?;
        let v = g.value(p).data();
        Ok([v[0], v[1]])
    }
}
