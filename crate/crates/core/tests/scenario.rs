use std::f64::consts::FRAC_PI_2;

use proptest::prelude::*;
use stformer::geometry::wrap_angle;
use stformer::scenario::*;
use stformer::{Error, Execution};

fn stationary_scenario() -> Scenario {
    let ego = vec![AgentState::new(AgentKind::Vehicle, 12.0, -4.0, 0.7, 0.0); SCENARIO_FRAMES];
    Scenario {
        template: Template::StopAndGo,
        tag: "stationary".into(),
        map_elements: Vec::new(),
        route: Vec::new(),
        traffic_lights: Vec::new(),
        agents: Vec::new(),
        ego,
    }
}

#[test]
fn same_seed_same_scenario() {
    let a = serde_json::to_string(&generate_scenario(7, Template::Straight)).unwrap();
    let b = serde_json::to_string(&generate_scenario(7, Template::Straight)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_1_turn_changes_heading_by_a_quarter_turn() {
    let s = build_sample(&generate_scenario(1, Template::IntersectionTurn), DEFAULT_ANCHOR).unwrap();
    let dyaw = wrap_angle(s.ego_future.last().unwrap().yaw - s.ego_history.last().unwrap().yaw).abs();
    assert!((dyaw - FRAC_PI_2).abs() <= 0.3, "yaw change {dyaw}");
}

#[test]
fn seed_3_stop_and_go_comes_to_rest() {
    let s = build_sample(&generate_scenario(3, Template::StopAndGo), DEFAULT_ANCHOR).unwrap();
    assert!(s.ego_future.iter().any(|f| f.speed() < 0.1));
}

#[test]
fn stationary_ego_has_zero_key_points() {
    let s = build_sample(&stationary_scenario(), DEFAULT_ANCHOR).unwrap();
    for kp in &s.key_points {
        assert_eq!((kp.x, kp.y, kp.yaw), (0.0, 0.0, 0.0));
    }
}

#[test]
fn anchor_at_frame_10_is_rejected() {
    let sc = generate_scenario(2, Template::Straight);
    assert!(matches!(build_sample(&sc, 10), Err(Error::Horizon(_))));
    assert!(build_sample(&sc, DEFAULT_ANCHOR).is_ok());
}

#[test]
fn template_determines_tag() {
    let allowed: &[(Template, &[&str])] = &[
        (Template::Straight, &["following_lane", "traversing_intersection"]),
        (Template::IntersectionTurn, &["turning_left", "turning_right"]),
        (Template::LaneChange, &["changing_lane_left", "changing_lane_right"]),
        (
            Template::StopAndGo,
            &["waiting_for_pedestrian_to_cross", "stopping_at_traffic_light"],
        ),
    ];
    for seed in 0..20 {
        for (t, tags) in allowed {
            let s = generate_scenario(seed, *t);
            assert!(tags.contains(&s.tag.as_str()), "{:?} seed {seed}: {}", t, s.tag);
        }
    }
}

#[test]
fn one_shared_endpoint_gives_single_intention() {
    let s = build_sample(&generate_scenario(4, Template::Straight), DEFAULT_ANCHOR).unwrap();
    let samples = vec![s.clone(); 5];
    let v = cluster_intentions(&samples, 1, 0).unwrap();
    assert_eq!(v.points, vec![s.endpoint()]);
}

#[test]
fn two_separated_clusters_recover_their_means() {
    let base = build_sample(&generate_scenario(4, Template::Straight), DEFAULT_ANCHOR).unwrap();
    let ends = [[60.0, 1.0], [61.0, -1.0], [59.5, 0.5], [10.0, 40.0], [11.0, 41.0]];
    let samples: Vec<TrainingSample> = ends
        .iter()
        .map(|e| {
            let mut s = base.clone();
            let last = s.ego_future.last_mut().unwrap();
            last.x = e[0];
            last.y = e[1];
            s
        })
        .collect();
    let v = cluster_intentions(&samples, 2, 3).unwrap();
    let means = [[(60.0 + 61.0 + 59.5) / 3.0, (1.0 - 1.0 + 0.5) / 3.0], [10.5, 40.5]];
    for m in means {
        let d = v.points.iter().map(|p| (p[0] - m[0]).hypot(p[1] - m[1])).fold(f64::INFINITY, f64::min);
        assert!(d < 1e-6, "no vocab point near {m:?}: {:?}", v.points);
    }
}

#[test]
fn too_few_samples_for_k() {
    let s = build_sample(&generate_scenario(4, Template::Straight), DEFAULT_ANCHOR).unwrap();
    assert!(matches!(cluster_intentions(&[s], 2, 0), Err(Error::InsufficientData(_))));
}

#[test]
fn nearest_vocab_distance_is_bounded_by_spread() {
    let samples = generate_dataset(400, &ALL_TEMPLATES, 11, Execution::Parallel).unwrap();
    let v = cluster_intentions(&samples, 64, 11).unwrap();
    let ends: Vec<[f64; 2]> = samples.iter().map(TrainingSample::endpoint).collect();
    let mut spread: f64 = 0.0;
    for a in &ends {
        for b in &ends {
            spread = spread.max((a[0] - b[0]).hypot(a[1] - b[1]));
        }
    }
    for e in &ends {
        let p = v.points[v.nearest(*e)];
        assert!((p[0] - e[0]).hypot(p[1] - e[1]) <= spread);
    }
}

#[test]
fn proposals_point_at_nearest_intention() {
    let mut samples = generate_dataset(80, &ALL_TEMPLATES, 5, Execution::Sequential).unwrap();
    let v = cluster_intentions(&samples, 8, 5).unwrap();
    assign_proposals(&mut samples, &v);
    for s in &samples {
        let p = s.proposal.unwrap();
        assert_eq!(p.index, v.nearest(s.endpoint()));
        assert_eq!(p.endpoint, s.endpoint());
    }
}

#[test]
fn parallel_and_sequential_generation_agree() {
    let a = generate_dataset(24, &ALL_TEMPLATES, 9, Execution::Sequential).unwrap();
    let b = generate_dataset(24, &ALL_TEMPLATES, 9, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dataset_file_round_trip() {
    let samples = generate_dataset(6, &ALL_TEMPLATES, 2, Execution::Sequential).unwrap();
    let ds = Dataset { vocab: None, samples };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &ds).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_round_trip_and_stay_normalized(seed in any::<u64>(), t in 0usize..4) {
        let sc = generate_scenario(seed, ALL_TEMPLATES[t]);
        let s = build_sample(&sc, DEFAULT_ANCHOR).unwrap();
        let cur = s.ego_history.last().unwrap();
        prop_assert_eq!((cur.x, cur.y, cur.yaw), (0.0, 0.0, 0.0));
        for (kp, f) in s.key_points.iter().zip(KEY_POINT_FRAMES) {
            prop_assert_eq!(*kp, s.ego_future[f - 1]);
        }
        let ds = Dataset { vocab: None, samples: vec![s] };
        let back = deserialize_samples(&serialize_samples(&ds).unwrap()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
