use matcnn::autograd::Graph;
use matcnn::dataio::{NormalizedImage, ValueRange};
use matcnn::gfem::{gfem_forward, init_gfem, GfemConfig, GfemPass};
use matcnn::msfm::{
    init_msfm, msfm_forward, msfm_forward_traced, trunk_forward, BnPhase, Modality, MsfmConfig, MsfmPass, MsfmWeights,
};
use matcnn::{Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image<T: matcnn::Scalar>(h: usize, w: usize, seed: u64) -> NormalizedImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..h * w).map(|_| T::of(rng.gen_range(-0.9..0.9))).collect();
    NormalizedImage::new(h, w, px, ValueRange::Symmetric).unwrap()
}

fn small_gfem() -> GfemConfig {
    GfemConfig {
        embed_dim: 8,
        num_heads: [2, 2, 4, 4],
        ..GfemConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, .. ProptestConfig::default() })]

    #[test]
    fn fused_output_keeps_resolution_plan_and_open_range(h in 5usize..14, w in 5usize..14, seed in 0u64..1000) {
        let weights = init_msfm::<f32>(&MsfmConfig::with_seed(seed)).unwrap();
        let (f, trace) = msfm_forward_traced(&weights, &image(h, w, seed), &image(h, w, seed + 1)).unwrap();
        prop_assert_eq!(f.dims(), (h, w));
        prop_assert!(trace.check_plan(h, w).is_ok());
        prop_assert!(f.pixels().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn extractor_stages_halve_grid_and_double_width(h in 4usize..40, w in 4usize..40) {
        let weights = init_gfem::<f32>(&small_gfem()).unwrap();
        let p = gfem_forward(&weights, &image(h, w, 3)).unwrap();
        let (mut gh, mut gw) = (h.div_ceil(4), w.div_ceil(4));
        for (s, stage) in p.stages.iter().enumerate() {
            prop_assert_eq!(stage.shape(), &[1, gh, gw, 8 << s][..]);
            gh = gh.div_ceil(2);
            gw = gw.div_ceil(2);
        }
    }

    #[test]
    fn attention_rows_are_normalized(gh in 1usize..10, gw in 1usize..10, shifted in any::<bool>()) {
        let weights = init_gfem::<f64>(&small_gfem()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64((gh * 31 + gw) as u64);
        let x = Tensor::from_fn(&[2, gh, gw, 8], |_| rng.gen_range(-2.0..2.0));
        let mut g = Graph::new();
        let mut pass = GfemPass::new(&mut g, &weights);
        let (_, probs) = pass.attention_block_with_probs(&mut g, &Var::constant(x), 0, 1, shifted).unwrap();
        let t = *probs.shape().last().unwrap();
        for row in probs.value().data().chunks(t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn trunks_share_no_parameters() {
    let base = init_msfm::<f32>(&MsfmConfig::with_seed(8)).unwrap();
    let (ir, vis) = (image::<f32>(12, 12, 1), image::<f32>(12, 12, 2));
    let mut bumped = base.clone();
    for v in bumped.params.get_mut("trunk_ir.conv2.kernel").unwrap().data_mut().iter_mut().take(40) {
        *v += 0.25;
    }
    let before = trunk_forward(&base, &vis, Modality::Vis).unwrap();
    let after = trunk_forward(&bumped, &vis, Modality::Vis).unwrap();
    for (a, b) in [(&before.f1, &after.f1), (&before.f2, &after.f2), (&before.f3, &after.f3), (&before.f4, &after.f4)] {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let ir_before = trunk_forward(&base, &ir, Modality::Ir).unwrap();
    let ir_after = trunk_forward(&bumped, &ir, Modality::Ir).unwrap();
    assert_ne!(ir_before.f2.data(), ir_after.f2.data());
    let shared = base
        .params
        .names()
        .filter(|n| n.starts_with("trunk_ir."))
        .filter(|n| base.params.contains(&n.replacen("trunk_ir.", "trunk_vis.", 1)))
        .count();
    assert_eq!(shared, 4 * 4, "every trunk_ir tensor has a separate trunk_vis twin");
}

#[test]
fn precision_variants_agree() {
    let w32 = init_msfm::<f32>(&MsfmConfig::with_seed(5)).unwrap();
    let w64: MsfmWeights<f64> = w32.cast();
    let f32_out = msfm_forward(&w32, &image::<f32>(10, 9, 4), &image::<f32>(10, 9, 5)).unwrap();
    let f64_out = msfm_forward(&w64, &image::<f64>(10, 9, 4), &image::<f64>(10, 9, 5)).unwrap();
    for (a, b) in f32_out.pixels().iter().zip(f64_out.pixels()) {
        assert!((*a as f64 - b).abs() < 1e-3, "{a} vs {b}");
    }
}

/// Eval-mode fused output against weights: a projected scalar, differentiated
/// by the graph and by central differences on sampled coordinates.
#[test]
fn fused_output_is_differentiable_in_the_weights() {
    let weights = init_msfm::<f64>(&MsfmConfig::with_seed(12)).unwrap();
    let (ir, vis) = (image::<f64>(16, 16, 21).to_tensor(), image::<f64>(16, 16, 22).to_tensor());
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let probe = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.gen_range(-1.0..1.0));
    let objective = |w: &MsfmWeights<f64>, trainable: bool| {
        let mut g = Graph::new();
        let mut pass = MsfmPass::new(&mut g, w, trainable, BnPhase::Eval);
        let y = pass
            .forward(&mut g, &Var::constant(ir.clone()), &Var::constant(vis.clone()))
            .unwrap();
        let s = g.mul(&y, &Var::constant(probe.clone())).unwrap();
        let s = g.sum(&s);
        (g, pass.into_parts().0, s)
    };
    let (g, bound, s) = objective(&weights, true);
    let grads = bound.gradients(&g.backward(&s).unwrap());
    let names = [
        "trunk_ir.conv1.kernel",
        "trunk_vis.conv4.gamma",
        "fuse2.kernel",
        "branch1.conv2.kernel",
        "branch3.conv1.beta",
        "fuse_final.kernel",
    ];
    // Small enough that few ReLU kinks are crossed by the first-layer probes.
    let eps = 1e-7;
    let (mut total, mut passed) = (0, 0);
    for name in names {
        let n = weights.params.get(name).unwrap().len();
        for k in 0..4 {
            let i = (k * 7919) % n;
            let eval = |delta: f64| {
                let mut w = weights.clone();
                w.params.get_mut(name).unwrap().data_mut()[i] += delta;
                objective(&w, false).2.value().item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = grads[name].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            total += 1;
            if rel <= 1e-3 {
                passed += 1;
            }
        }
    }
    assert!(passed as f64 >= 0.95 * total as f64, "{passed}/{total} sampled weight gradients within 1e-3");
}

#[test]
fn shift_is_inert_within_a_single_window() {
    let weights = init_gfem::<f64>(&small_gfem()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for (gh, gw) in [(4, 4), (3, 4), (2, 1)] {
        let x = Var::constant(Tensor::from_fn(&[1, gh, gw, 8], |_| rng.gen_range(-1.0..1.0)));
        let mut g = Graph::new();
        let mut pass = GfemPass::new(&mut g, &weights);
        let plain = pass.attention_block(&mut g, &x, 0, 0, false).unwrap();
        let shifted = pass.attention_block(&mut g, &x, 0, 0, true).unwrap();
        assert_eq!(plain.value().data(), shifted.value().data(), "{gh}x{gw}");
    }
}
