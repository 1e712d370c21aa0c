//! The two training stages.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stformer_tensor::{GradStore, Graph, ParamStore, Tensor};

use super::augment::{perturb_history, DEFAULT_SIGMA_MAX};
use super::loss::{compute_loss, LossFlags, LossInputs, LossReport};
use super::optim::{lr_schedule, AdamW};
use crate::exec::Execution;
use crate::heads::diffusion::{normal_vec, STATS_PREFIX};
use crate::heads::{prepare_context, rollout, ContextRaster, ModelInput, RolloutFlags, Stage, StrModel, TrajectoryPrediction};
use crate::rng::{self, streams};
use crate::scenario::TrainingSample;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Steps between held-out evaluations.
    pub eval_interval: usize,
    /// Evaluations without enough improvement before stopping.
    pub patience: usize,
    /// Relative improvement that resets the patience counter.
    pub min_improvement: f64,
    /// Stop once the eval loss falls below this fraction of its first value.
    pub target_ratio: Option<f64>,
    pub augment: bool,
    pub sigma_max: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 0.01,
            warmup_steps: 50,
            batch_size: 16,
            max_steps: 2000,
            seed: 0,
            eval_interval: 50,
            patience: 5,
            min_improvement: 0.005,
            target_ratio: None,
            augment: true,
            sigma_max: DEFAULT_SIGMA_MAX,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.max_steps > 0
            && self.eval_interval > 0
            && self.patience > 0
            && self.min_improvement >= 0.0
            && self.sigma_max >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub initial_eval: f64,
    pub best_eval: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,train_loss,eval_loss\n");
        for p in &self.curve {
            s.push_str(&format!("{},{},{},{}\n", p.step, p.lr, p.train_loss, p.eval_loss));
        }
        s
    }
}

/// Samples with their pooled rasters, ready for training.
#[derive(Clone, Debug, Default)]
pub struct PreparedSet {
    pub samples: Vec<TrainingSample>,
    pub rasters: Vec<ContextRaster>,
}

impl PreparedSet {
    pub fn new(samples: Vec<TrainingSample>, resolution: usize, exec: Execution) -> Result<Self> {
        let rasters = exec
            .map(&samples, |s| prepare_context(s, resolution))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, rasters })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input(&self, i: usize) -> ModelInput {
        ModelInput::new(self.rasters[i].clone(), &self.samples[i].ego_history)
    }

    pub fn subset(&self, n: usize) -> Self {
        Self {
            samples: self.samples[..n.min(self.len())].to_vec(),
            rasters: self.rasters[..n.min(self.len())].to_vec(),
        }
    }
}

/// Splits off roughly `fraction` of the samples, chosen by a per-sample draw
/// keyed on `(seed, id)`. Both parts are non-empty when there are two or
/// more samples.
pub fn split_holdout(samples: Vec<TrainingSample>, fraction: f64, seed: u64) -> (Vec<TrainingSample>, Vec<TrainingSample>) {
    let (mut train, mut held): (Vec<_>, Vec<_>) = samples
        .into_iter()
        .partition(|s| rng::substream(seed, streams::SPLIT, s.id).random::<f64>() >= fraction);
    if held.is_empty() && train.len() > 1 {
        held.push(train.pop().expect("non-empty"));
    }
    if train.is_empty() && held.len() > 1 {
        train.push(held.remove(0));
    }
    (train, held)
}

/// SHA-256 over names and values of every frozen parameter.
pub fn frozen_checksum(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (id, p) in store.iter() {
        if store.is_trainable(id) {
            continue;
        }
        h.update(p.name.as_bytes());
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// SHA-256 over every parameter whose name passes `pred`.
pub fn checksum_where(store: &ParamStore, pred: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter().filter(|(_, p)| pred(&p.name)) {
        h.update(p.name.as_bytes());
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct SampleGrad {
    grads: GradStore,
    loss: f64,
}

/// Shared optimization loop. `sample_grad(model, index, key)` returns the
/// gradient of one sample; `eval(model)` the held-out loss.
fn optimize<G, E>(model: &mut StrModel, n_train: usize, cfg: &TrainConfig, sample_grad: G, eval: E) -> Result<TrainOutcome>
where
    G: Fn(&StrModel, usize, u64) -> Result<SampleGrad> + Sync + Send,
    E: Fn(&StrModel) -> Result<f64>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut shuffle = rng::stream(cfg.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = Vec::new();
    let initial = eval(model)?;
    if !initial.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            detail: "initial eval loss is not finite".into(),
        });
    }
    let mut curve = vec![CurvePoint {
        step: 0,
        lr: 0.0,
        train_loss: f64::NAN,
        eval_loss: initial,
    }];
    let (mut best, mut best_step, mut stale) = (initial, 0, 0);
    let mut best_store = model.store.clone();
    let mut stopped_early = false;
    let mut window_loss = (0.0, 0usize);
    let mut steps_run = 0;
    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(n_train) {
            if order.is_empty() {
                order = (0..n_train).collect();
                order.shuffle(&mut shuffle);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let key_base = (step * cfg.batch_size) as u64;
        let m: &StrModel = model;
        let results = cfg.execution.map_range(batch.len(), |b| sample_grad(m, batch[b], key_base + b as u64));
        let mut grads = GradStore::zeros_like(&model.store);
        let mut loss = 0.0;
        for r in results {
            let r = r?;
            grads.add(&r.grads);
            loss += r.loss;
        }
        let scale = 1.0 / batch.len() as f64;
        grads.scale(scale);
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                detail: format!("training loss is {loss}"),
            });
        }
        let lr = lr_schedule(step + 1, cfg.lr, cfg.warmup_steps, cfg.max_steps);
        opt.step(&mut model.store, &grads, lr).map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged { step: step + 1, detail },
            other => other,
        })?;
        steps_run = step + 1;
        window_loss.0 += loss;
        window_loss.1 += 1;
        if steps_run % cfg.eval_interval == 0 || steps_run == cfg.max_steps {
            let e = eval(model)?;
            if !e.is_finite() {
                return Err(Error::Diverged {
                    step: steps_run,
                    detail: format!("eval loss is {e}"),
                });
            }
            curve.push(CurvePoint {
                step: steps_run,
                lr,
                train_loss: window_loss.0 / window_loss.1 as f64,
                eval_loss: e,
            });
            window_loss = (0.0, 0);
            if e < best * (1.0 - cfg.min_improvement) {
                stale = 0;
            } else {
                stale += 1;
            }
            if e < best {
                best = e;
                best_step = steps_run;
                best_store = model.store.clone();
            }
            if cfg.target_ratio.is_some_and(|r| e < r * initial) {
                stopped_early = true;
                break;
            }
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.store = best_store;
    Ok(TrainOutcome {
        curve,
        initial_eval: initial,
        best_eval: best,
        best_step,
        steps_run,
        stopped_early,
    })
}

fn loss_flags(model: &StrModel) -> LossFlags {
    LossFlags {
        keypoints: model.config.components.keypoints,
        proposal: model.config.components.proposal,
    }
}

/// Teacher-forced losses of one sample without augmentation.
pub fn evaluate_sample(model: &StrModel, set: &PreparedSet, i: usize) -> Result<LossReport> {
    let mut g = Graph::new();
    let targets = model.targets(&set.samples[i]);
    let out = model.forward_teacher(&mut g, &set.input(i), &targets)?;
    Ok(compute_loss(&mut g, &LossInputs::from(&out), &targets, loss_flags(model))?.1)
}

/// Mean teacher-forced report over a set.
pub fn evaluate(model: &StrModel, set: &PreparedSet, exec: Execution) -> Result<LossReport> {
    let reports = exec
        .map_range(set.len(), |i| evaluate_sample(model, set, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::mean(&reports))
}

/// Rolls out every sample of a set. Sample `i` draws from its own
/// sampling substream keyed on its id, so the result does not depend on
/// the execution mode.
pub fn predict_set(
    model: &StrModel,
    set: &PreparedSet,
    flags: &RolloutFlags,
    seed: u64,
    exec: Execution,
) -> Result<Vec<TrajectoryPrediction>> {
    exec.map_range(set.len(), |i| {
        let id = set.samples[i].id;
        rollout(model, &set.input(i), id, flags, &mut rng::substream(seed, streams::SAMPLING, id))
    })
    .into_iter()
    .collect()
}

/// First stage: encoders, backbone and MLP heads trained end to end.
pub fn train_stage_backbone(
    model: &mut StrModel,
    train: &PreparedSet,
    eval_set: &PreparedSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || eval_set.is_empty() {
        return Err(Error::InsufficientData("training and eval sets must be non-empty".into()));
    }
    model.store.set_trainable_where(|n| !n.starts_with(STATS_PREFIX) && !n.starts_with("diffusion."));
    let flags = loss_flags(model);
    let grad = |m: &StrModel, i: usize, key: u64| -> Result<SampleGrad> {
        let sample = if cfg.augment {
            let mut r = rng::substream(cfg.seed, streams::AUGMENT, key);
            perturb_history(&train.samples[i], cfg.sigma_max, &mut r).0
        } else {
            train.samples[i].clone()
        };
        let input = ModelInput::new(train.rasters[i].clone(), &sample.ego_history);
        let targets = m.targets(&sample);
        let mut g = Graph::new();
        let out = m.forward_teacher(&mut g, &input, &targets)?;
        let (total, _) = compute_loss(&mut g, &LossInputs::from(&out), &targets, flags)?;
        let loss = g.value(total).data()[0];
        let mut grads = GradStore::zeros_like(&m.store);
        g.backward(total)?.accumulate_params(&g, &mut grads);
        Ok(SampleGrad { grads, loss })
    };
    let exec = cfg.execution;
    let outcome = optimize(model, train.len(), cfg, grad, |m| Ok(evaluate(m, eval_set, exec)?.eval_loss));
    model.store.set_all_trainable();
    let outcome = outcome?;
    model.mark_stage(Stage::Backbone);
    Ok(outcome)
}

/// Names updated in the second stage.
pub fn diffusion_stage_trainable(name: &str) -> bool {
    (name.starts_with("diffusion.") || name.starts_with("heads.state.")) && !name.starts_with(STATS_PREFIX)
}

/// Key-point latents (encoder outputs) of a sample, `[5][d]`.
fn keypoint_latents(model: &StrModel, sample: &TrainingSample) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let targets = model.targets(sample);
    let v = model.kp_enc.forward(&mut g, &model.store, &targets.key_points)?;
    Ok(g.value(v).data().chunks(model.d_model()).map(<[f64]>::to_vec).collect())
}

/// Root mean square of all key-point latent values in `set`.
pub fn latent_scale(model: &StrModel, set: &PreparedSet) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in &set.samples {
        for row in keypoint_latents(model, s)? {
            sum += row.iter().map(|v| v * v).sum::<f64>();
            n += row.len();
        }
    }
    let rms = (sum / n.max(1) as f64).sqrt();
    Ok(if rms > 0.0 { rms } else { 1.0 })
}

/// Diffusion, projection and state losses of one sample. The noise draws
/// come from stream `key`.
fn diffusion_sample_loss(
    model: &StrModel,
    set: &PreparedSet,
    i: usize,
    seed: u64,
    key: u64,
) -> Result<(Graph, stformer_tensor::Var, LossReport)> {
    let dec = model
        .diffusion
        .as_ref()
        .ok_or_else(|| Error::Config("model has no key-point component".into()))?;
    let sample = &set.samples[i];
    let targets = model.targets(sample);
    let mut g = Graph::new();
    let out = model.forward_teacher(&mut g, &set.input(i), &targets)?;
    let kp_hidden = out.kp_hidden.expect("key-point model");
    let std = dec.std(&model.store);
    let mut noise = rng::substream(seed, streams::DIFFUSION_NOISE, key);
    let latents = keypoint_latents(model, sample)?;
    let mut diff = Vec::with_capacity(latents.len());
    for (m, lat) in latents.iter().enumerate() {
        let x0: Vec<f64> = lat.iter().map(|v| v / std).collect();
        let t = noise.random_range(1..=dec.schedule.steps());
        let eps = normal_vec(&mut noise, x0.len());
        let cond = g.slice_rows(kp_hidden, m, 1)?;
        diff.push(dec.loss(&mut g, &model.store, &x0, cond, t, &eps)?);
    }
    let mut dsum = diff[0];
    for d in &diff[1..] {
        dsum = g.add(dsum, *d)?;
    }
    let dmean = g.scale(dsum, 1.0 / diff.len() as f64)?;

    let flat: Vec<f64> = latents.iter().flatten().copied().collect();
    let lat = g.constant(Tensor::new(vec![latents.len(), model.d_model()], flat)?);
    let proj = dec.project(&mut g, &model.store, lat)?;
    let kt: Vec<f64> = targets.key_points.iter().flatten().copied().collect();
    let kt = g.constant(Tensor::new(vec![targets.key_points.len(), 2], kt)?);
    let proj_mse = g.mse(proj, kt)?;

    let st: Vec<f64> = targets.states.iter().flatten().copied().collect();
    let st = g.constant(Tensor::new(vec![targets.states.len(), 3], st)?);
    let state = g.mse(out.states, st)?;

    let total = g.add(dmean, proj_mse)?;
    let total = g.add(total, state)?;
    let report = LossReport {
        kp_mse: g.value(proj_mse).data()[0],
        state_mse: g.value(state).data()[0],
        diffusion_mse: Some(g.value(dmean).data()[0]),
        eval_loss: g.value(proj_mse).data()[0] + g.value(state).data()[0],
        ..Default::default()
    };
    Ok((g, total, report))
}

/// Mean diffusion noise-prediction error over `set` with fixed draws.
pub fn evaluate_diffusion(model: &StrModel, set: &PreparedSet, seed: u64, exec: Execution) -> Result<LossReport> {
    let reports = exec
        .map_range(set.len(), |i| {
            diffusion_sample_loss(model, set, i, seed ^ 0x5eed, set.samples[i].id).map(|(_, _, r)| r)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::mean(&reports))
}

/// Second stage: backbone and encoders frozen; the noise predictor, latent
/// projection and state decoder are trained. Fails with a state error if
/// any frozen parameter changed.
pub fn train_stage_diffusion(
    model: &mut StrModel,
    train: &PreparedSet,
    eval_set: &PreparedSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !model.has_stage(Stage::Backbone) {
        return Err(Error::State("diffusion stage needs a trained backbone checkpoint".into()));
    }
    if model.diffusion.is_none() {
        return Err(Error::Config("diffusion stage needs a model with key points".into()));
    }
    if train.is_empty() || eval_set.is_empty() {
        return Err(Error::InsufficientData("training and eval sets must be non-empty".into()));
    }
    let scale = latent_scale(model, train)?;
    let std_id = model.diffusion.as_ref().expect("checked").latent_std;
    *model.store.tensor_mut(std_id) = Tensor::vector(vec![scale]);
    model.store.set_trainable_where(diffusion_stage_trainable);
    let before = frozen_checksum(&model.store);
    let seed = cfg.seed;
    let grad = |m: &StrModel, i: usize, key: u64| -> Result<SampleGrad> {
        let (g, total, _) = diffusion_sample_loss(m, train, i, seed, key)?;
        let loss = g.value(total).data()[0];
        let mut grads = GradStore::zeros_like(&m.store);
        g.backward(total)?.accumulate_params(&g, &mut grads);
        Ok(SampleGrad { grads, loss })
    };
    let exec = cfg.execution;
    let outcome = optimize(model, train.len(), cfg, grad, |m| {
        let r = evaluate_diffusion(m, eval_set, seed, exec)?;
        Ok(r.diffusion_mse.unwrap_or(f64::NAN))
    });
    let after = frozen_checksum(&model.store);
    model.store.set_all_trainable();
    let outcome = outcome?;
    if before != after {
        return Err(Error::State("frozen parameters changed during the diffusion stage".into()));
    }
    model.mark_stage(Stage::Diffusion);
    Ok(outcome)
}
