mod common;

use stformer::backbone::ModelConfig;
use stformer::heads::{Components, StrConfig, StrModel};
use stformer::rng::{stream, streams};
use stformer::scenario::{generate_dataset, ALL_TEMPLATES};
use stformer::train::*;
use stformer::{Error, Execution};

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        warmup_steps: 2,
        batch_size: 4,
        max_steps: steps,
        eval_interval: 2,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_identical_curves() {
    let run = || {
        let (mut m, set) = common::small_world("desk-10k", Components::CKS, 8, 1);
        train_stage_backbone(&mut m, &set, &set.subset(3), &quick(6)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn sequential_and_parallel_training_agree() {
    let run = |execution| {
        let (mut m, set) = common::small_world("desk-10k", Components::CPKS, 8, 2);
        let cfg = TrainConfig { execution, ..quick(4) };
        let out = train_stage_backbone(&mut m, &set, &set.subset(3), &cfg).unwrap();
        (serde_json::to_string(&out).unwrap(), m.store.iter().map(|(_, p)| p.tensor.data().to_vec()).collect::<Vec<_>>())
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

#[test]
fn backbone_stage_lowers_the_loss() {
    let (mut m, set) = common::small_world("desk-10k", Components::CKS, 8, 4);
    let out = train_stage_backbone(&mut m, &set, &set, &quick(20)).unwrap();
    assert!(out.best_eval < out.initial_eval);
    assert_eq!(out.curve[0].step, 0);
    let after = evaluate(&m, &set, Execution::Parallel).unwrap();
    assert!((after.eval_loss - out.best_eval).abs() < 1e-12, "best snapshot was not restored");
}

#[test]
fn diffusion_stage_needs_a_trained_backbone() {
    let (mut m, set) = common::small_world("desk-10k", Components::CKS, 4, 5);
    let err = train_stage_diffusion(&mut m, &set, &set, &quick(2));
    assert!(matches!(err, Err(Error::State(_))));
}

#[test]
fn diffusion_stage_only_touches_its_parameters() {
    let (mut m, set) = common::small_world("desk-10k", Components::CKS, 8, 6);
    train_stage_backbone(&mut m, &set, &set, &quick(4)).unwrap();
    let frozen = |n: &str| !diffusion_stage_trainable(n) && !n.starts_with("stats.");
    let before = checksum_where(&m.store, frozen);
    let diff_before = checksum_where(&m.store, |n| n.starts_with("diffusion.eps"));
    train_stage_diffusion(&mut m, &set, &set, &quick(4)).unwrap();
    assert_eq!(checksum_where(&m.store, frozen), before);
    assert_ne!(checksum_where(&m.store, |n| n.starts_with("diffusion.eps")), diff_before);
    assert!(m.has_stage(stformer::heads::Stage::Diffusion));
}

#[test]
fn augmentation_leaves_targets_alone() {
    let samples = generate_dataset(12, &ALL_TEMPLATES, 8, Execution::Sequential).unwrap();
    let mut rng = stream(8, streams::AUGMENT);
    for s in &samples {
        let (p, _) = perturb_history(s, 0.1, &mut rng);
        assert_eq!(p.ego_future, s.ego_future);
        assert_eq!(p.key_points, s.key_points);
        assert_eq!(p.proposal, s.proposal);
        assert_eq!(p.ego_history.last(), s.ego_history.last());
    }
}

#[test]
fn divergence_reports_the_step() {
    let (mut m, set) = common::small_world("desk-10k", Components::CKS, 4, 7);
    let cfg = TrainConfig {
        lr: 1e200,
        warmup_steps: 0,
        ..quick(6)
    };
    match train_stage_backbone(&mut m, &set, &set, &cfg) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let (mut m, set) = common::small_world("desk-10k", Components::CKS, 2, 7);
    let err = train_stage_backbone(&mut m, &PreparedSet::default(), &set, &quick(2));
    assert!(matches!(err, Err(Error::InsufficientData(_))));
}

#[test]
fn holdout_split_is_seeded_and_disjoint() {
    let samples = generate_dataset(200, &ALL_TEMPLATES, 1, Execution::Parallel).unwrap();
    let (a, b) = split_holdout(samples.clone(), 0.1, 4);
    let (c, d) = split_holdout(samples, 0.1, 4);
    assert_eq!((a.len() + b.len()), 200);
    assert_eq!(a, c);
    assert_eq!(b, d);
    assert!((5..=40).contains(&b.len()), "held out {}", b.len());
    assert!(b.iter().all(|s| !a.iter().any(|t| t.id == s.id)));
}

#[test]
fn single_cell_sweep_has_no_slopes() {
    let (_, set) = common::small_world("desk-10k", Components::CKS, 6, 9);
    let mut base = StrConfig::new(ModelConfig::preset("desk-10k").unwrap());
    base.raster_resolution = 32;
    let sweep = SweepConfig {
        presets: vec![("desk-10k".into(), ModelConfig::preset("desk-10k").unwrap())],
        dataset_sizes: vec![4],
        base,
        train: quick(2),
        parallel_cells: false,
    };
    let r = scaling_sweep(&sweep, &set, &set.subset(2), None).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert!(r.rows[0].converged_eval_loss.is_some());
    assert_eq!(r.size_slopes, vec![("desk-10k".to_string(), None)]);
    assert_eq!(r.param_slopes, vec![(4, None)]);
    assert!(r.to_csv().starts_with(SweepResult::CSV_HEADER));

    let bad = SweepConfig {
        dataset_sizes: vec![100],
        ..sweep
    };
    assert!(matches!(scaling_sweep(&bad, &set, &set, None), Err(Error::Config(_))));
}

#[test]
fn failing_cell_is_recorded_and_the_sweep_goes_on() {
    let (_, set) = common::small_world("desk-10k", Components::CKS, 6, 9);
    let mut base = StrConfig::new(ModelConfig::preset("desk-10k").unwrap());
    base.raster_resolution = 32;
    let sweep = SweepConfig {
        presets: vec![("desk-10k".into(), ModelConfig::preset("desk-10k").unwrap())],
        dataset_sizes: vec![2, 4],
        base,
        train: TrainConfig {
            lr: 1e200,
            warmup_steps: 0,
            ..quick(4)
        },
        parallel_cells: true,
    };
    let r = scaling_sweep(&sweep, &set, &set.subset(2), None).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert!(r.rows.iter().all(|row| row.error.is_some() && row.converged_eval_loss.is_none()));
}

#[test]
fn constant_target_diffusion_converges() {
    let samples = common::constant_target_samples(8);
    let set = PreparedSet::new(samples, 32, Execution::Parallel).unwrap();
    let mut cfg = StrConfig::new(ModelConfig::preset("desk-10k").unwrap());
    cfg.raster_resolution = 32;
    let mut m = StrModel::new(cfg, None, 1).unwrap();
    train_stage_backbone(&mut m, &set, &set, &TrainConfig { augment: false, ..quick(40) }).unwrap();
    let dcfg = TrainConfig {
        lr: 3e-3,
        warmup_steps: 10,
        batch_size: 8,
        max_steps: 600,
        eval_interval: 20,
        patience: 1000,
        ..Default::default()
    };
    let out = train_stage_diffusion(&mut m, &set, &set, &dcfg).unwrap();
    let evals: Vec<f64> = out.curve.iter().map(|p| p.eval_loss).collect();
    let smooth: Vec<f64> = evals.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let rises = smooth.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises * 5 <= smooth.len(), "smoothed diffusion loss rose {rises} times: {evals:?}");
    assert!(out.best_eval < 0.2, "held-out noise MSE {}", out.best_eval);
}
