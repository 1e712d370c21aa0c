use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use stformer::backbone::ModelConfig;
use stformer::heads::{read_predictions, write_predictions, KpDecoder, RolloutFlags, Stage, StrModel};
use stformer::metrics::{evaluate_predictions, scenario_csv, MetricsConfig};
use stformer::scenario::{
    assign_proposals, cluster_intentions, generate_dataset, read_dataset, serialize_samples, Dataset, Template,
    TrainingSample, ALL_TEMPLATES, DEFAULT_VOCAB_SIZE,
};
use stformer::train::{
    predict_set, run_ablation, scaling_sweep, split_holdout, train_stage_backbone, train_stage_diffusion, AblationAxis,
    AblationConfig, PreparedSet, SweepConfig, TrainOutcome,
};
use stformer::Execution;

use crate::config::{parse_order, ConfigLayer, Resolved};
use crate::error::{CliError, Result};
use crate::run::{out_path, OutDir};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

pub struct GenData {
    pub count: usize,
    pub templates: Option<String>,
    pub seed: u64,
    pub vocab_size: usize,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GenDataConfig<'a> {
    count: usize,
    templates: Vec<&'a str>,
    seed: u64,
    vocab_size: usize,
}

pub fn gen_data(args: GenData) -> Result<PathBuf> {
    let templates: Vec<Template> = match &args.templates {
        Some(list) => list.split(',').map(|t| t.trim().parse()).collect::<stformer::Result<_>>()?,
        None => ALL_TEMPLATES.to_vec(),
    };
    let mut out = OutDir::open(out_path(args.out, "gen-data"), "gen-data")?;
    let mut samples = generate_dataset(args.count, &templates, args.seed, Execution::Parallel)?;
    let k = args.vocab_size.min(samples.len());
    let vocab = if k > 0 {
        let v = cluster_intentions(&samples, k, args.seed)?;
        assign_proposals(&mut samples, &v);
        Some(v)
    } else {
        None
    };
    let text = serialize_samples(&Dataset { vocab, samples })?;
    out.write(SAMPLES_FILE, text.as_bytes())?;
    out.seed("data", args.seed);
    let config = GenDataConfig {
        count: args.count,
        templates: templates.iter().map(|t| t.name()).collect(),
        seed: args.seed,
        vocab_size: args.vocab_size,
    };
    out.finish(&config)
}

pub fn default_vocab_size() -> usize {
    DEFAULT_VOCAB_SIZE
}

fn load_data(out: &mut OutDir, path: &Path) -> Result<Dataset> {
    out.dataset(path)?;
    Ok(read_dataset(path)?)
}

/// Training and held-out parts of a dataset under the resolved split.
fn split(data: &Dataset, cfg: &Resolved) -> (Vec<TrainingSample>, Vec<TrainingSample>) {
    split_holdout(data.samples.clone(), cfg.eval_fraction, cfg.train.seed)
}

fn prepare(samples: Vec<TrainingSample>, resolution: usize, exec: Execution) -> Result<PreparedSet> {
    Ok(PreparedSet::new(samples, resolution, exec)?)
}

/// The held-out set, or the training set when nothing is held out.
fn eval_or_train(held: PreparedSet, train: &PreparedSet) -> PreparedSet {
    if held.is_empty() {
        train.clone()
    } else {
        held
    }
}

fn loss_gnuplot(csv: &str, title: &str) -> String {
    format!(
        "set datafile separator ','\nset key autotitle columnhead\nset logscale y\nset xlabel 'step'\nset ylabel 'loss'\nset title '{title}'\nplot '{csv}' using 1:3 with lines title 'train', '' using 1:4 with linespoints title 'eval'\n"
    )
}

pub struct Train {
    pub config: Option<PathBuf>,
    pub layer: ConfigLayer,
    pub stage: Stage,
    pub data: PathBuf,
    pub init: Option<PathBuf>,
    pub gnuplot: bool,
    pub out: Option<PathBuf>,
}

pub fn train(args: Train) -> Result<PathBuf> {
    let cfg = args.layer.clone().resolve_with_file(args.config.as_deref())?;
    let out_dir = out_path(args.out, "train");
    let stage_name = match args.stage {
        Stage::Backbone => "backbone",
        Stage::Diffusion => "diffusion",
    };
    let mut out = OutDir::open(out_dir.clone(), &format!("train-{stage_name}"))?;
    if let Some(c) = &args.config {
        out.input(c)?;
    }
    let data = load_data(&mut out, &args.data)?;
    let exec = cfg.execution();

    let mut model = match args.stage {
        Stage::Backbone => {
            let mut model_cfg = cfg.model.clone();
            let vocab = if model_cfg.components.proposal {
                let v = data.vocab.clone().ok_or_else(|| {
                    CliError::Config(format!(
                        "components {} need an intention vocabulary, but {} has none",
                        model_cfg.components.name(),
                        args.data.display()
                    ))
                })?;
                model_cfg.vocab_size = v.len();
                Some(v)
            } else {
                None
            };
            StrModel::new(model_cfg, vocab, cfg.train.seed)?
        }
        Stage::Diffusion => {
            let init = args.init.clone().unwrap_or_else(|| out_dir.join(CHECKPOINT_FILE));
            if !init.exists() {
                return Err(stformer::Error::State(format!(
                    "the diffusion stage starts from a backbone checkpoint, but {} does not exist",
                    init.display()
                ))
                .into());
            }
            out.input(&init)?;
            let model = StrModel::load(&init)?;
            check_model_flags(&model, &init, &args.layer)?;
            model
        }
    };

    let (train_part, held_part) = split(&data, &cfg);
    let res = model.config.raster_resolution;
    let train_set = prepare(train_part, res, exec)?;
    let eval_set = eval_or_train(prepare(held_part, res, exec)?, &train_set);
    let outcome: TrainOutcome = match args.stage {
        Stage::Backbone => train_stage_backbone(&mut model, &train_set, &eval_set, &cfg.train)?,
        Stage::Diffusion => train_stage_diffusion(&mut model, &train_set, &eval_set, &cfg.train)?,
    };

    out.write_with(CHECKPOINT_FILE, |p| model.save(p))?;
    let csv = format!("loss-{stage_name}.csv");
    out.write(&csv, outcome.to_csv().as_bytes())?;
    if args.gnuplot {
        out.write(&format!("loss-{stage_name}.gp"), loss_gnuplot(&csv, stage_name).as_bytes())?;
    }
    out.seed("init", cfg.train.seed);
    out.seed("split", cfg.train.seed);
    eprintln!(
        "{stage_name}: eval loss {:.5} -> {:.5} (best at step {}, {} steps)",
        outcome.initial_eval, outcome.best_eval, outcome.best_step, outcome.steps_run
    );
    out.finish(&cfg)
}

/// Model-shape flags given next to a checkpoint must agree with it.
fn check_model_flags(model: &StrModel, path: &Path, layer: &ConfigLayer) -> Result<()> {
    let c = &model.config;
    let mut clashes = Vec::new();
    if let Some(p) = &layer.preset {
        if ModelConfig::preset(p)? != c.model {
            clashes.push(format!("--preset {p}"));
        }
    }
    if let Some(comp) = &layer.components {
        if stformer::heads::Components::parse(comp)? != c.components {
            clashes.push(format!("--components {comp}"));
        }
    }
    if let Some(o) = &layer.kp_order {
        if parse_order(o)? != c.kp_order {
            clashes.push(format!("--kp-order {o}"));
        }
    }
    if let Some(r) = layer.resolution {
        if r != c.raster_resolution {
            clashes.push(format!("--resolution {r}"));
        }
    }
    if clashes.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "checkpoint {} ({} {}, {}, resolution {}) is incompatible with {}",
            path.display(),
            c.model.name,
            c.components.name(),
            c.kp_order.name(),
            c.raster_resolution,
            clashes.join(", ")
        )))
    }
}

/// Parses `key=value,...` rollout flags on top of the checkpoint's own and
/// checks them against it.
pub fn rollout_flags(model: &StrModel, path: &Path, spec: Option<&str>) -> Result<RolloutFlags> {
    let mut f = RolloutFlags::for_model(model);
    let spec = spec.unwrap_or("");
    let bad = |msg: String| CliError::Config(format!("--flags `{spec}`: {msg}"));
    let parse_bool = |v: &str| match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(bad(format!("`{v}` is not a boolean"))),
    };
    for kv in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("`{kv}` is not key=value")))?;
        match k {
            "decoder" => {
                f.kp_decoder = match v {
                    "mlp" => KpDecoder::Mlp,
                    "diffusion" => KpDecoder::Diffusion,
                    _ => return Err(bad(format!("unknown decoder `{v}`"))),
                }
            }
            "k" => f.k = v.parse().map_err(|_| bad(format!("`{v}` is not a count")))?,
            "order" => f.kp_order = parse_order(v)?,
            "proposal" => f.use_proposal = parse_bool(v)?,
            "keypoints" => f.use_keypoints = parse_bool(v)?,
            _ => return Err(bad(format!("unknown key `{k}` (expected decoder, k, order, proposal, keypoints)"))),
        }
    }

    let c = &model.config;
    let mut why = Vec::new();
    if f.use_proposal != c.components.proposal || f.use_keypoints != c.components.keypoints {
        why.push(format!(
            "the model carries {} but the flags ask for proposal={} keypoints={}",
            c.components.name(),
            f.use_proposal,
            f.use_keypoints
        ));
    }
    if f.use_keypoints && f.kp_order != c.kp_order {
        why.push(format!("the model was trained with {} key points", c.kp_order.name()));
    }
    if f.kp_decoder == KpDecoder::Diffusion && !model.has_stage(Stage::Diffusion) {
        why.push("the diffusion decoder has not been trained".into());
    }
    if f.use_proposal && !(1..=c.vocab_size).contains(&f.k) {
        why.push(format!("k must be in 1..={}", c.vocab_size));
    }
    if why.is_empty() {
        Ok(f)
    } else {
        Err(CliError::Config(format!(
            "checkpoint {} is incompatible with --flags `{spec}`: {}",
            path.display(),
            why.join("; ")
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Train,
    Holdout,
}

pub struct Eval {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub flags: Option<String>,
    pub split: Split,
    pub config: Option<PathBuf>,
    pub layer: ConfigLayer,
    pub metrics: MetricsConfig,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    flags: &'a str,
    split: Split,
    eval_fraction: f64,
    seed: u64,
    metrics: &'a MetricsConfig,
}

pub fn eval(args: Eval) -> Result<PathBuf> {
    let cfg = args.layer.clone().resolve_with_file(args.config.as_deref())?;
    let mut out = OutDir::open(out_path(args.out, "eval"), "eval")?;
    out.input(&args.checkpoint)?;
    let model = StrModel::load(&args.checkpoint)?;
    let flags = rollout_flags(&model, &args.checkpoint, args.flags.as_deref())?;
    let data = load_data(&mut out, &args.data)?;
    let samples = match args.split {
        Split::All => data.samples.clone(),
        Split::Train => split(&data, &cfg).0,
        Split::Holdout => split(&data, &cfg).1,
    };
    if samples.is_empty() {
        return Err(stformer::Error::InsufficientData(format!("the {:?} split is empty", args.split)).into());
    }
    let exec = cfg.execution();
    let set = prepare(samples, model.config.raster_resolution, exec)?;
    let preds = predict_set(&model, &set, &flags, cfg.train.seed, exec)?;
    out.write_with(PREDICTIONS_FILE, |p| write_predictions(p, &preds))?;
    let (per, report) = evaluate_predictions(&preds, &set.samples, &args.metrics, exec)?;
    write_reports(&mut out, &per, &report)?;
    print!("{}", report.summary());
    out.seed("sampling", cfg.train.seed);
    out.finish(&EvalConfig {
        flags: args.flags.as_deref().unwrap_or(""),
        split: args.split,
        eval_fraction: cfg.eval_fraction,
        seed: cfg.train.seed,
        metrics: &args.metrics,
    })
}

fn write_reports(
    out: &mut OutDir,
    per: &[stformer::metrics::ScenarioMetrics],
    report: &stformer::metrics::MetricsReport,
) -> Result<()> {
    out.write("metrics.csv", report.to_csv().as_bytes())?;
    out.write("scenarios.csv", scenario_csv(per).as_bytes())?;
    out.write("summary.txt", report.summary().as_bytes())
}

pub struct Metrics {
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub metrics: MetricsConfig,
    pub out: Option<PathBuf>,
}

pub fn metrics(args: Metrics) -> Result<PathBuf> {
    let mut out = OutDir::open(out_path(args.out, "metrics"), "metrics")?;
    out.input(&args.pred)?;
    let preds = read_predictions(&args.pred)?;
    let data = load_data(&mut out, &args.gt)?;
    let (per, report) = evaluate_predictions(&preds, &data.samples, &args.metrics, Execution::Parallel)?;
    write_reports(&mut out, &per, &report)?;
    print!("{}", report.summary());
    out.finish(&args.metrics)
}

pub struct Sweep {
    pub presets: String,
    pub sizes: String,
    pub data: PathBuf,
    pub parallel_cells: bool,
    pub gnuplot: bool,
    pub config: Option<PathBuf>,
    pub layer: ConfigLayer,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SweepRecord<'a> {
    presets: Vec<&'a str>,
    sizes: &'a [usize],
    parallel_cells: bool,
    #[serde(flatten)]
    resolved: &'a Resolved,
}

pub fn sweep(args: Sweep) -> Result<PathBuf> {
    let cfg = args.layer.clone().resolve_with_file(args.config.as_deref())?;
    let presets: Vec<&str> = args.presets.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let sizes: Vec<usize> = args
        .sizes
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("--sizes: `{s}` is not a count"))))
        .collect::<Result<_>>()?;
    let preset_cfgs = presets
        .iter()
        .map(|p| Ok((p.to_string(), ModelConfig::preset(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = OutDir::open(out_path(args.out, "sweep"), "sweep")?;
    if let Some(c) = &args.config {
        out.input(c)?;
    }
    let data = load_data(&mut out, &args.data)?;
    let exec = cfg.execution();
    let (pool, held) = split(&data, &cfg);
    let res = cfg.model.raster_resolution;
    let pool = prepare(pool, res, exec)?;
    let held = eval_or_train(prepare(held, res, exec)?, &pool);
    let vocab = if cfg.model.components.proposal { data.vocab.as_ref() } else { None };
    let mut base = cfg.model.clone();
    if let Some(v) = vocab {
        base.vocab_size = v.len();
    }
    let sweep_cfg = SweepConfig {
        presets: preset_cfgs,
        dataset_sizes: sizes.clone(),
        base,
        train: cfg.train.clone(),
        parallel_cells: args.parallel_cells,
    };
    let result = scaling_sweep(&sweep_cfg, &pool, &held, vocab)?;

    out.write("sweep.csv", result.to_csv().as_bytes())?;
    out.write("slopes.csv", result.slopes_csv().as_bytes())?;
    let mut curves = String::from("model_preset,dataset_size,step,lr,train_loss,eval_loss\n");
    for r in &result.rows {
        for p in &r.curve {
            let _ = writeln!(curves, "{},{},{},{},{},{}", r.model_preset, r.dataset_size, p.step, p.lr, p.train_loss, p.eval_loss);
        }
    }
    out.write("curves.csv", curves.as_bytes())?;
    if args.gnuplot {
        let mut gp = String::from(
            "set datafile separator ','\nset logscale xy\nset xlabel 'dataset size'\nset ylabel 'converged eval loss'\nplot ",
        );
        let plots: Vec<String> = presets
            .iter()
            .map(|p| format!("'sweep.csv' using ($1 eq '{p}' ? $3 : 1/0):4 with linespoints title '{p}'"))
            .collect();
        gp.push_str(&plots.join(", \\\n     "));
        gp.push('\n');
        out.write("sweep.gp", gp.as_bytes())?;
    }
    eprint!("{}", result.slopes_csv());
    out.seed("init", cfg.train.seed);
    out.finish(&SweepRecord {
        presets,
        sizes: &sizes,
        parallel_cells: args.parallel_cells,
        resolved: &cfg,
    })
}

pub struct Ablate {
    pub axis: AblationAxis,
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub layer: ConfigLayer,
    pub metrics: MetricsConfig,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct AblateRecord<'a> {
    axis: AblationAxis,
    metrics: &'a MetricsConfig,
    #[serde(flatten)]
    resolved: &'a Resolved,
}

pub fn ablate(args: Ablate) -> Result<PathBuf> {
    let cfg = args.layer.clone().resolve_with_file(args.config.as_deref())?;
    let mut out = OutDir::open(out_path(args.out, "ablate"), "ablate")?;
    if let Some(c) = &args.config {
        out.input(c)?;
    }
    let data = load_data(&mut out, &args.data)?;
    let exec = cfg.execution();
    let (train_part, held) = split(&data, &cfg);
    let res = cfg.model.raster_resolution;
    let train_set = prepare(train_part, res, exec)?;
    let held = eval_or_train(prepare(held, res, exec)?, &train_set);
    let ablation = AblationConfig {
        base: cfg.model.clone(),
        backbone: cfg.train.clone(),
        diffusion: cfg.train.clone(),
        metrics: args.metrics,
    };
    let result = run_ablation(args.axis, &ablation, &train_set, &held)?;
    let csv = result.to_csv();
    out.write("ablation.csv", csv.as_bytes())?;
    print!("{csv}");
    out.seed("init", cfg.train.seed);
    out.finish(&AblateRecord {
        axis: args.axis,
        metrics: &args.metrics,
        resolved: &cfg,
    })
}
