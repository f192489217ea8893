use dsfad_core::autograd::Graph;
use dsfad_core::encoder::{self, Binding, Model, ModelConfig, Variant};
use dsfad_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 8,
        stage_widths: vec![4, 8, 16],
        head_width: 8,
        embed_dim: 6,
        text_width: 8,
        context_length: 12,
        num_classes: 3,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

fn images(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, h, w], |_| rng.random_range(0.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decomposition_identities_are_exact(model_seed in 0u64..1000, data_seed in 0u64..1000, n in 1usize..4) {
        let model = Model::new(small_config(model_seed)).unwrap();
        let mut g = Graph::new();
        let mut b = Binding::new(&model.params, false);
        let x = g.constant(images(n, 16, 8, data_seed));
        let out = model.forward_images(&mut g, &mut b, x, Variant::Full).unwrap();
        let (f3, f_id, f_st) = (g.value(out.f3), g.value(out.f_id.unwrap()), g.value(out.f_st.unwrap()));
        let (stf, stl) = (g.value(out.f_stf.unwrap()), g.value(out.f_stl.unwrap()));
        for i in 0..f3.numel() {
            prop_assert_eq!(f_id.data()[i] + f_st.data()[i], f3.data()[i]);
            prop_assert_eq!(stf.data()[i] + stl.data()[i], f_st.data()[i]);
        }
        let gate = g.value(out.gate.unwrap());
        prop_assert!(gate.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn instance_norm_standardizes_each_channel(seed in 0u64..1000, hw in 8usize..14, shift in -5.0f64..5.0, spread in 0.2f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bsz, c) = (2, 3);
        let x = Tensor::from_fn(&[bsz, c, hw, hw], |_| shift + spread * rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::full(&[c], 1.0));
        let beta = g.constant(Tensor::zeros(&[c]));
        let y = encoder::instance_norm(&mut g, xv, gamma, beta, 1e-5);
        let y = g.value(y);
        for plane in y.data().chunks(hw * hw) {
            let n = plane.len() as f64;
            let m = plane.iter().sum::<f64>() / n;
            let s = (plane.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-4, "mean {}", m);
            prop_assert!((0.999..=1.001).contains(&s), "std {}", s);
        }
    }
}

#[test]
fn reduced_variants_expose_only_their_branches() {
    let model = Model::new(small_config(3)).unwrap();
    let mut g = Graph::new();
    let mut b = Binding::new(&model.params, false);
    let x = g.constant(images(2, 16, 8, 4));
    let base = model.forward_images(&mut g, &mut b, x, Variant::Baseline).unwrap();
    assert!(base.f_id.is_none() && base.style_emb.is_none());
    let smfd = model.forward_images(&mut g, &mut b, x, Variant::DsfaSmfd).unwrap();
    assert!(smfd.f_id.is_some() && smfd.gate.is_none() && smfd.style_emb.is_some());
}

#[test]
fn inference_embedding_ignores_batch_composition() {
    let model = Model::new(small_config(5)).unwrap();
    let batch = images(3, 16, 8, 6);
    let all = model.embed(&batch, Variant::Full).unwrap();
    let single = Tensor::new(vec![1, 3, 16, 8], batch.data()[..3 * 16 * 8].to_vec());
    let one = model.embed(&single, Variant::Full).unwrap();
    assert_eq!(one.row(0), all.row(0));
}
