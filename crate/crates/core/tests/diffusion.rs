mod common;

use stformer::heads::diffusion::*;
use stformer::heads::{KeyPointMlp, PointEncoder, StateDecoder};
use stformer::rng::{stream, streams};
use stformer_tensor::{gradient_check_params, Graph, ParamStore, Tensor};

#[test]
fn reverse_inverts_forward_at_every_step() {
    let err = common::diffusion_round_trip_error(16);
    assert!(err < 1e-12, "{err:e}");
}

#[test]
fn schedule_endpoints_and_products() {
    let s = DiffusionSchedule::default();
    assert_eq!(s.steps(), 10);
    assert_eq!(s.betas[0], 0.01);
    assert_eq!(s.betas[9], 0.9);
    for t in 1..=10 {
        let direct: f64 = s.betas[..t].iter().map(|b| 1.0 - b).product();
        assert!((s.alpha_cum(t) - direct).abs() < 1e-15);
    }
}

#[test]
fn monte_carlo_variance_matches_closed_form() {
    let (var, expected) = common::diffusion_variance(100_000);
    assert!((var - expected).abs() / expected < 0.02, "{var} vs {expected}");
}

#[test]
fn zero_betas_leave_latents_alone() {
    let s = DiffusionSchedule::from_betas(vec![0.0; 10]);
    let x = [0.3, -1.2, 4.0];
    let mut rng = stream(0, streams::TEST);
    for t in 1..=10 {
        assert_eq!(forward_diffuse_rng(&x, t, &s, &mut rng).unwrap(), x.to_vec());
    }
    assert_eq!(reverse_step(&x, &[0.0; 3], &s, 4).unwrap(), x.to_vec());
}

fn decoder(d: usize) -> (ParamStore, DiffusionDecoder) {
    let mut store = ParamStore::new();
    let mut rng = stream(5, streams::INIT);
    let dec = DiffusionDecoder::new(&mut store, &mut rng, d, 2, 1).unwrap();
    (store, dec)
}

#[test]
fn zero_output_weights_give_the_scaling_chain() {
    let d = 8;
    let (mut store, mut dec) = decoder(d);
    store.set_trainable_where(|_| true);
    for (id, name) in store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        if name.starts_with("diffusion.eps.out") {
            store.tensor_mut(id).data_mut().fill(0.0);
        }
    }
    let cond = vec![0.1; d];
    assert!(dec.eps.predict(&store, &[0.5; 8], &cond, 3).unwrap().iter().all(|v| *v == 0.0));
    dec.sampler = Sampler::Deterministic;
    let mut r1 = stream(9, streams::SAMPLING);
    let z = normal_vec(&mut stream(9, streams::SAMPLING), d);
    let x = dec.sample_latent(&store, &cond, &mut r1).unwrap();
    let scale: f64 = dec.schedule.betas.iter().map(|b| 1.0 / (1.0 - b).sqrt()).product();
    for (a, b) in x.iter().zip(&z) {
        assert!((a - b * scale).abs() < 1e-9 * scale.max(1.0));
    }
}

#[test]
fn fixed_seed_sampling_is_deterministic() {
    let (store, dec) = decoder(8);
    let cond = vec![0.2; 8];
    let a = dec.sample_point(&store, &cond, &mut stream(4, streams::SAMPLING)).unwrap();
    let b = dec.sample_point(&store, &cond, &mut stream(4, streams::SAMPLING)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn noise_predictor_loss_passes_gradient_check() {
    let d = 8;
    let (store, dec) = decoder(d);
    let mut rng = stream(6, streams::TEST);
    let x0 = normal_vec(&mut rng, d);
    let eps = normal_vec(&mut rng, d);
    let cond = Tensor::matrix(1, d, normal_vec(&mut rng, d)).unwrap();
    let coords: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with("diffusion.eps"))
        .flat_map(|(id, p)| [(id, 0), (id, p.tensor.numel() - 1)])
        .collect();
    for t in [1, 5, 10] {
        let err = gradient_check_params(
            &store,
            |g, s| {
                let c = g.constant(cond.clone());
                dec.loss(g, s, &x0, c, t, &eps).map_err(|e| stformer_tensor::TensorError::Contract(e.to_string()))
            },
            // Gradients here are ~1e-6, so a smaller step hits the rounding floor.
            1e-4,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-5, "t={t}: {err:e}");
    }
}

#[test]
fn mlp_decoders_pass_gradient_check() {
    let d = 6;
    let mut store = ParamStore::new();
    let mut rng = stream(7, streams::INIT);
    let kp = KeyPointMlp::new(&mut store, &mut rng, "heads.kp", d).unwrap();
    let st = StateDecoder::new(&mut store, &mut rng, "heads.state", d).unwrap();
    let mut trng = stream(7, streams::TEST);
    let h5 = Tensor::matrix(5, d, normal_vec(&mut trng, 5 * d)).unwrap();
    let h80 = Tensor::matrix(80, d, normal_vec(&mut trng, 80 * d)).unwrap();
    let t5 = Tensor::matrix(5, 2, normal_vec(&mut trng, 10)).unwrap();
    let t80 = Tensor::matrix(80, 3, normal_vec(&mut trng, 240)).unwrap();
    let coords: Vec<_> = store.iter().flat_map(|(id, p)| (0..p.tensor.numel()).map(move |i| (id, i))).collect();
    let err = gradient_check_params(
        &store,
        |g, s| {
            let map = |e: stformer::Error| stformer_tensor::TensorError::Contract(e.to_string());
            let (a, b) = (g.constant(h5.clone()), g.constant(h80.clone()));
            let p = kp.forward(g, s, a).map_err(map)?;
            let q = st.forward(g, s, b).map_err(map)?;
            assert_eq!((g.shape(p), g.shape(q)), (&[5usize, 2][..], &[80usize, 3][..]));
            let (ta, tb) = (g.constant(t5.clone()), g.constant(t80.clone()));
            let l1 = g.mse(p, ta)?;
            let l2 = g.mse(q, tb)?;
            g.add(l1, l2)
        },
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn point_encoder_is_bounded_and_injective() {
    let mut store = ParamStore::new();
    let mut rng = stream(8, streams::INIT);
    let enc = PointEncoder::new(&mut store, &mut rng, "kp_enc", 16).unwrap();
    let mut g = Graph::new();
    let v = enc.forward(&mut g, &store, &[[120.0, -30.0], [0.5, 0.25]]).unwrap();
    let out = g.value(v);
    assert!(out.data().iter().all(|x| x.abs() < 1.0));
    assert_ne!(out.row(0), out.row(1));
    assert!(enc.forward(&mut g, &store, &[[f64::NAN, 0.0]]).is_err());

    for id in store.ids().collect::<Vec<_>>() {
        store.tensor_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let z = enc.forward(&mut g, &store, &[[3.0, 4.0]]).unwrap();
    assert!(g.value(z).data().iter().all(|x| *x == 0.0));
}

#[test]
fn step_out_of_range() {
    let (store, dec) = decoder(4);
    assert!(matches!(
        dec.eps.predict(&store, &[0.0; 4], &[0.0; 4], 11),
        Err(stformer::Error::Step { step: 11, max: 10 })
    ));
}
