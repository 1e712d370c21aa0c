use proptest::prelude::*;
use stformer_tensor::kernels::softmax_in_place;
use stformer_tensor::{Checkpoint, Graph, Init, ParamStore, Tensor};

fn row(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in row(7)) {
        let mut r = v.clone();
        softmax_in_place(&mut r);
        prop_assert!(r.iter().all(|p| *p >= 0.0 && *p <= 1.0));
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_output_is_standardized(v in row(16)) {
        prop_assume!(v.iter().any(|x| (x - v[0]).abs() > 1e-3));
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 16, v).unwrap());
        let ones = g.constant(Tensor::full(&[16], 1.0));
        let zeros = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, ones, zeros, 0.0).unwrap();
        let out = g.value(y).data();
        let mean = out.iter().sum::<f64>() / 16.0;
        let var = out.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / 16.0;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn causal_attention_ignores_the_future(v in row(4 * 6), tail in row(6)) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(4, 6, v.clone()).unwrap());
        let ya = g.causal_attention(a, 1).unwrap();
        let mut changed = v;
        changed[18..].copy_from_slice(&tail);
        let b = g.constant(Tensor::matrix(4, 6, changed).unwrap());
        let yb = g.causal_attention(b, 1).unwrap();
        prop_assert_eq!(&g.value(ya).data()[..6], &g.value(yb).data()[..6]);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.init("a.w", &[3, 4], Init::Normal(1.0), true, &mut rng).unwrap();
        store.init("a.b", &[4], Init::Normal(1e-300), false, &mut rng).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_store(&store, "meta").write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        let mut restored = store.clone();
        for id in restored.ids().collect::<Vec<_>>() {
            restored.tensor_mut(id).data_mut().fill(0.0);
        }
        back.load_into(&mut restored).unwrap();
        for (id, p) in store.iter() {
            prop_assert_eq!(p.tensor.data(), restored.tensor(id).data());
        }
    }
}
