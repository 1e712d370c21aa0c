#![allow(dead_code)]

use serde::Deserialize;
use stformer::heads::TrajectoryPrediction;
use stformer::metrics::{aggregate, scenario_metrics, MetricsConfig, MetricsReport, ScenarioMetrics};

#[derive(Deserialize)]
pub struct Fixture {
    pub cases: Vec<Case>,
    pub sets: Vec<SetCase>,
}

#[derive(Deserialize)]
pub struct Case {
    pub name: String,
    #[serde(default)]
    pub mr_threshold: Option<f64>,
    pub modes: Vec<ModeSpec>,
    pub expected: Expected,
}

#[derive(Deserialize)]
pub struct ModeSpec {
    pub lateral: f64,
    pub lateral_rate: f64,
    pub yaw_offset: f64,
    pub score: f64,
}

#[derive(Deserialize)]
pub struct SetCase {
    pub name: String,
    pub cases: Vec<String>,
    pub expected: Expected,
}

#[derive(Deserialize, Debug)]
pub struct Expected {
    pub ade: f64,
    pub fde: f64,
    pub ahe: f64,
    pub fhe: f64,
    pub score_ade: f64,
    pub score_fde: f64,
    pub score_ahe: f64,
    pub score_fhe: f64,
    pub miss_rate: f64,
    pub score_miss: f64,
    pub ols: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mr_pred: f64,
}

pub fn load_fixture() -> Fixture {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/metrics_cases.json");
    serde_json::from_str(&std::fs::read_to_string(path).expect("fixture")).expect("fixture json")
}

pub fn ground_truth() -> Vec<[f64; 3]> {
    (1..=80).map(|k| [k as f64, 0.0, 0.0]).collect()
}

impl Case {
    pub fn config(&self) -> MetricsConfig {
        let mut cfg = MetricsConfig::default();
        if let Some(t) = self.mr_threshold {
            cfg.mr_threshold = t;
        }
        cfg
    }

    pub fn prediction(&self, id: u64) -> TrajectoryPrediction {
        TrajectoryPrediction {
            id,
            modes: self
                .modes
                .iter()
                .map(|m| {
                    (1..=80)
                        .map(|k| [k as f64, m.lateral + m.lateral_rate * k as f64, m.yaw_offset])
                        .collect()
                })
                .collect(),
            scores: self.modes.iter().map(|m| m.score).collect(),
            key_points: Vec::new(),
            key_point_frames: Vec::new(),
            proposals: Vec::new(),
        }
    }

    pub fn metrics(&self) -> ScenarioMetrics {
        scenario_metrics(&self.prediction(0), &ground_truth(), &self.config()).expect("metrics")
    }

    pub fn report(&self) -> MetricsReport {
        aggregate(&[self.metrics()], &self.config()).expect("report")
    }
}

/// Largest absolute difference between a report and its expectation.
pub fn max_deviation(r: &MetricsReport, e: &Expected) -> f64 {
    [
        (r.ade, e.ade),
        (r.fde, e.fde),
        (r.ahe, e.ahe),
        (r.fhe, e.fhe),
        (r.scores.ade, e.score_ade),
        (r.scores.fde, e.score_fde),
        (r.scores.ahe, e.score_ahe),
        (r.scores.fhe, e.score_fhe),
        (r.miss_rate, e.miss_rate),
        (r.score_miss, e.score_miss),
        (r.ols, e.ols),
        (r.min_ade, e.min_ade),
        (r.min_fde, e.min_fde),
        (r.mr_pred, e.mr_pred),
    ]
    .iter()
    .map(|(a, b)| (a - b).abs())
    .fold(0.0, f64::max)
}

/// Deviation of every single case and set in the fixture.
pub fn fixture_deviations(f: &Fixture) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = f
        .cases
        .iter()
        .map(|c| (c.name.clone(), max_deviation(&c.report(), &c.expected)))
        .collect();
    for s in &f.sets {
        let per: Vec<ScenarioMetrics> = s
            .cases
            .iter()
            .map(|n| f.cases.iter().find(|c| &c.name == n).expect("case").metrics())
            .collect();
        let r = aggregate(&per, &MetricsConfig::default()).expect("set report");
        out.push((s.name.clone(), max_deviation(&r, &s.expected)));
    }
    out
}

use stformer::backbone::ModelConfig;
use stformer::heads::{Components, StrConfig, StrModel};
use stformer::scenario::{assign_proposals, cluster_intentions, generate_dataset, ALL_TEMPLATES};
use stformer::train::PreparedSet;
use stformer::Execution;

/// A freshly initialized model and `n` prepared samples at a small raster
/// resolution.
pub fn small_world(preset: &str, components: Components, n: usize, seed: u64) -> (StrModel, PreparedSet) {
    world(preset, components, n, seed, 32)
}

use stformer::heads::diffusion::{forward_diffuse, forward_diffuse_rng, normal_vec, reverse_step, DiffusionSchedule};
use stformer::rng::{stream, streams};

/// Largest deviation over 100 random latents and every step `t` between
/// one reverse step from `x_t` and the forward value `x_{t-1}`, and between
/// the full reverse chain and `x_0`.
pub fn diffusion_round_trip_error(width: usize) -> f64 {
    let sch = DiffusionSchedule::default();
    let mut rng = stream(2, streams::TEST);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x0 = normal_vec(&mut rng, width);
        let noises: Vec<Vec<f64>> = (0..sch.steps()).map(|_| normal_vec(&mut rng, width)).collect();
        let at = |t: usize| if t == 0 { x0.clone() } else { forward_diffuse(&x0, t, &sch, &noises).unwrap() };
        for t in 1..=sch.steps() {
            let back = reverse_step(&at(t), &noises[t - 1], &sch, t).unwrap();
            let prev = at(t - 1);
            worst = worst.max(back.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            let mut x = at(t);
            for s in (1..=t).rev() {
                x = reverse_step(&x, &noises[s - 1], &sch, s).unwrap();
            }
            worst = worst.max(x.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    worst
}

/// Sample variance of `forward_diffuse(0, 10)` over `draws` draws and the
/// closed form `1 - prod(1 - beta)`.
pub fn diffusion_variance(draws: usize) -> (f64, f64) {
    let sch = DiffusionSchedule::default();
    let mut rng = stream(3, streams::TEST);
    let xs: Vec<f64> = (0..draws)
        .map(|_| forward_diffuse_rng(&[0.0], sch.steps(), &sch, &mut rng).unwrap()[0])
        .collect();
    let mean = xs.iter().sum::<f64>() / draws as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let expected = 1.0 - sch.betas.iter().map(|b| 1.0 - b).product::<f64>();
    (var, expected)
}

use stformer::scenario::{build_sample, generate_scenario, Template, TrainingSample, DEFAULT_ANCHOR};

/// `n` copies of one turning sample with ids `0..n`.
pub fn constant_target_samples(n: usize) -> Vec<TrainingSample> {
    let base = build_sample(&generate_scenario(1, Template::IntersectionTurn), DEFAULT_ANCHOR).unwrap();
    (0..n)
        .map(|i| {
            let mut s = base.clone();
            s.id = i as u64;
            s
        })
        .collect()
}

/// Copies of one turning sample where every odd copy has its future
/// mirrored across the x axis; the context is left as is, so the two
/// futures are indistinguishable from the input.
pub fn two_mode_samples(n: usize) -> Vec<TrainingSample> {
    let mut out = constant_target_samples(n);
    for s in out.iter_mut().skip(1).step_by(2) {
        for st in s.ego_future.iter_mut().chain(s.key_points.iter_mut()) {
            st.y = -st.y;
            st.yaw = -st.yaw;
            st.vy = -st.vy;
        }
    }
    out
}

use rand::Rng as _;
use stformer::backbone::{assemble_sequence, Backbone};
use stformer::heads::{rollout, rollout_with, ModelInput, RolloutFlags, Targets};
use stformer::train::{compute_loss, LossFlags, LossInputs};
use stformer_tensor::{gradient_check_params, Graph, ParamStore, Tensor, Var};

/// [`small_world`] at a chosen raster resolution.
pub fn world(preset: &str, components: Components, n: usize, seed: u64, resolution: usize) -> (StrModel, PreparedSet) {
    let mut samples = generate_dataset(n, &ALL_TEMPLATES, seed, Execution::Parallel).unwrap();
    let mut cfg = StrConfig::new(ModelConfig::preset(preset).unwrap());
    cfg.components = components;
    cfg.raster_resolution = resolution;
    cfg.vocab_size = 4.min(n);
    let vocab = if components.proposal {
        let v = cluster_intentions(&samples, cfg.vocab_size, seed).unwrap();
        assign_proposals(&mut samples, &v);
        Some(v)
    } else {
        None
    };
    let model = StrModel::new(cfg, vocab, seed).unwrap();
    let set = PreparedSet::new(samples, resolution, Execution::Parallel).unwrap();
    (model, set)
}

fn to_tensor_err(e: stformer::Error) -> stformer_tensor::TensorError {
    stformer_tensor::TensorError::Contract(e.to_string())
}

fn full_loss(model: &StrModel, store: &ParamStore, g: &mut Graph, input: &ModelInput, targets: &Targets) -> stformer_tensor::Result<Var> {
    let mut m = model.clone();
    m.store = store.clone();
    let out = m.forward_teacher(g, input, targets).map_err(to_tensor_err)?;
    let flags = LossFlags {
        keypoints: true,
        proposal: true,
    };
    Ok(compute_loss(g, &LossInputs::from(&out), targets, flags).map_err(to_tensor_err)?.0)
}

/// Worst relative finite-difference error of the full CPKS loss, two
/// random coordinates per backbone-stage parameter tensor.
pub fn full_model_gradient_error(preset: &str, resolution: usize) -> f64 {
    let (model, set) = world(preset, Components::CPKS, 8, 4, resolution);
    let input = set.input(0);
    let targets = model.targets(&set.samples[0]);
    let mut rng = stream(4, streams::TEST);
    let mut coords = Vec::new();
    for (id, p) in model.store.iter() {
        if !model.store.is_trainable(id) || p.name.starts_with("stats.") || p.name.starts_with("diffusion.") {
            continue;
        }
        for _ in 0..2 {
            coords.push((id, rng.random_range(0..p.tensor.numel())));
        }
    }
    gradient_check_params(&model.store, |g, s| full_loss(&model, s, g, &input, &targets), 1e-5, &coords).unwrap()
}

fn random_rows(rng: &mut stformer::rng::Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Hidden rows of a full CPKS-shaped sequence, with row `perturb` nudged.
fn hidden_with(backbone: &Backbone, store: &ParamStore, parts: &[Tensor; 4], perturb: Option<usize>) -> Vec<f64> {
    let mut parts = parts.clone();
    if let Some(mut row) = perturb {
        for p in parts.iter_mut() {
            if row < p.rows() {
                let d = p.cols();
                p.data_mut()[row * d] += 0.5;
                break;
            }
            row -= p.rows();
        }
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = parts.iter().map(|p| g.constant(p.clone())).collect();
    let seq = assemble_sequence(&mut g, vars[0], Some(vars[1]), Some(vars[2]), Some(vars[3])).unwrap();
    let h = backbone.forward(&mut g, store, &seq).unwrap();
    g.value(h).data().to_vec()
}

/// Perturbs the first row of each sequence component (and the last key
/// point) and reports every row that moved before the perturbation, or
/// a perturbed row that did not move.
pub fn causal_mask_violations() -> Vec<String> {
    let cfg = ModelConfig::preset("desk-50k").unwrap();
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    let mut rng = stream(1, streams::TEST);
    let backbone = Backbone::new(&mut store, &mut rng, &cfg).unwrap();
    let parts = [
        random_rows(&mut rng, 21, d),
        random_rows(&mut rng, 1, d),
        random_rows(&mut rng, 5, d),
        random_rows(&mut rng, 80, d),
    ];
    let base = hidden_with(&backbone, &store, &parts, None);
    let mut bad = Vec::new();
    for pos in [0, 10, 21, 22, 26, 27, 60, 106] {
        let h = hidden_with(&backbone, &store, &parts, Some(pos));
        if h[..pos * d] != base[..pos * d] {
            bad.push(format!("rows before {pos} moved"));
        }
        if h[pos * d..(pos + 1) * d] == base[pos * d..(pos + 1) * d] {
            bad.push(format!("row {pos} did not move"));
        }
    }
    bad
}

/// Pins each key point in turn to a new value and reports any change to
/// earlier key points, or a later key point that ignored the change.
pub fn regeneration_violations() -> Vec<String> {
    let (model, set) = small_world("desk-10k", Components::CKS, 4, 2);
    let flags = RolloutFlags::for_model(&model);
    let input = set.input(1);
    let base = rollout(&model, &input, 1, &flags, &mut stream(0, streams::SAMPLING)).unwrap();
    let kp = &base.key_points[0];
    let mut bad = Vec::new();
    for m in 0..5 {
        let forced = [kp[m][0] + 3.0, kp[m][1] - 2.0];
        let alt = rollout_with(&model, &input, 1, &flags, &mut stream(0, streams::SAMPLING), &[(m, forced)]).unwrap();
        let akp = &alt.key_points[0];
        if akp[..m] != kp[..m] {
            bad.push(format!("prefix before {m} changed"));
        }
        if akp[m] != forced {
            bad.push(format!("key point {m} was not pinned"));
        }
        for later in m + 1..5 {
            if akp[later] == kp[later] {
                bad.push(format!("key point {later} ignored the change at {m}"));
            }
        }
        if alt.modes[0] == base.modes[0] {
            bad.push(format!("states ignored the change at {m}"));
        }
    }
    bad
}

use stformer::heads::KpDecoder;
use stformer::rng::substream;
use stformer::train::{train_stage_backbone, train_stage_diffusion, TrainConfig};

/// Outcome of training both key-point decoders on [`two_mode_samples`].
#[derive(Debug)]
pub struct TwoModeOutcome {
    /// The 8 s key point of the unmirrored and mirrored futures.
    pub modes: [[f64; 2]; 2],
    /// How many diffusion draws landed nearest to each mode.
    pub diffusion_counts: [usize; 2],
    pub draws: usize,
    /// The MLP decoder's 8 s key point.
    pub mlp_point: [f64; 2],
}

impl TwoModeOutcome {
    /// Distance of the MLP point from the midpoint of the modes, relative
    /// to half the mode separation.
    pub fn mlp_offset_ratio(&self) -> f64 {
        let [a, b] = self.modes;
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let half = ((a[0] - b[0]).hypot(a[1] - b[1])) / 2.0;
        (self.mlp_point[0] - mid[0]).hypot(self.mlp_point[1] - mid[1]) / half
    }
}

pub fn two_mode_experiment(draws: usize) -> TwoModeOutcome {
    let samples = two_mode_samples(16);
    let modes = [0, 1].map(|i| {
        let k = &samples[i].key_points[0];
        [k.x, k.y]
    });
    let set = PreparedSet::new(samples, 32, Execution::Parallel).unwrap();
    let mut cfg = StrConfig::new(ModelConfig::preset("desk-10k").unwrap());
    cfg.raster_resolution = 32;
    let mut model = StrModel::new(cfg, None, 11).unwrap();
    let backbone = TrainConfig {
        lr: 1e-3,
        warmup_steps: 10,
        batch_size: 16,
        max_steps: 300,
        eval_interval: 25,
        patience: 1000,
        augment: false,
        seed: 11,
        ..Default::default()
    };
    train_stage_backbone(&mut model, &set, &set, &backbone).unwrap();
    let diffusion = TrainConfig {
        lr: 3e-3,
        max_steps: 800,
        ..backbone
    };
    train_stage_diffusion(&mut model, &set, &set, &diffusion).unwrap();

    let input = set.input(0);
    let mut flags = RolloutFlags::for_model(&model);
    flags.kp_decoder = KpDecoder::Mlp;
    let mlp = rollout(&model, &input, 0, &flags, &mut stream(11, streams::SAMPLING)).unwrap();
    flags.kp_decoder = KpDecoder::Diffusion;
    let mut counts = [0, 0];
    for i in 0..draws {
        let p = rollout(&model, &input, 0, &flags, &mut substream(11, streams::SAMPLING, i as u64)).unwrap();
        let kp = p.key_points[0][0];
        let d = modes.map(|m| (kp[0] - m[0]).hypot(kp[1] - m[1]));
        counts[usize::from(d[1] < d[0])] += 1;
    }
    TwoModeOutcome {
        modes,
        diffusion_counts: counts,
        draws,
        mlp_point: mlp.key_points[0][0],
    }
}
