use ndarray::Array2;
use pigment_core::backend::cfg_combine;
use pigment_core::color::Rgb;
use pigment_core::vecmix::{
    compose, direction, interpolate, DirectionalAxis, MixWeights, PromptEmbedding,
};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

fn embedding(s: usize, d: usize, vals: &[f64]) -> PromptEmbedding {
    PromptEmbedding::new(
        Array2::from_shape_vec((s, d), vals.to_vec()).unwrap(),
        "p",
        "test",
    )
    .unwrap()
}

/// 1..=3 embeddings of one shape with values in [-1, 1].
fn embeddings() -> impl Strategy<Value = Vec<PromptEmbedding>> {
    (1usize..=4, 1usize..=128, 1usize..=3).prop_flat_map(|(s, d, n)| {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, s * d), n)
            .prop_map(move |vs| vs.iter().map(|v| embedding(s, d, v)).collect())
    })
}

fn normalized(raw: &[f64]) -> MixWeights {
    let sum: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|r| r / sum).collect();
    let rest: f64 = w[1..].iter().sum();
    w[0] = 1.0 - rest;
    MixWeights::new(w).unwrap()
}

fn weights_for(n: usize) -> impl Strategy<Value = MixWeights> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|raw| normalized(&raw))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn axis(a: PromptEmbedding, b: PromptEmbedding, weight: f64) -> DirectionalAxis {
    DirectionalAxis {
        id: "ax".into(),
        end_a: a,
        end_b: b,
        weight,
        color_a: Rgb([255, 0, 0]),
        color_b: Rgb([0, 0, 255]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn interpolation_is_linear_in_weights(
        (es, w1, w2) in embeddings().prop_flat_map(|es| {
            let n = es.len();
            (Just(es), weights_for(n), weights_for(n))
        }),
        alpha in 0.0f64..=1.0,
    ) {
        let blended: Vec<f64> = w1.as_slice().iter().zip(w2.as_slice())
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let blended = normalized(&blended.iter().map(|v| v.max(1e-300)).collect::<Vec<_>>());
        let lhs = interpolate(&es, &blended).unwrap();
        let r1 = interpolate(&es, &w1).unwrap();
        let r2 = interpolate(&es, &w2).unwrap();
        let rhs = alpha * r1.data() + (1.0 - alpha) * r2.data();
        prop_assert!(max_abs_diff(lhs.data(), &rhs) < TOL);
    }

    #[test]
    fn identity_weight_selects_that_embedding(es in embeddings(), pick in 0usize..3) {
        let pick = pick % es.len();
        let mut w = vec![0.0; es.len()];
        w[pick] = 1.0;
        let out = interpolate(&es, &MixWeights::new(w).unwrap()).unwrap();
        prop_assert_eq!(out.data(), es[pick].data());
    }

    #[test]
    fn interpolation_is_permutation_invariant(
        (es, w) in embeddings().prop_flat_map(|es| { let n = es.len(); (Just(es), weights_for(n)) }),
        rot in 0usize..3,
    ) {
        let n = es.len();
        let rot = rot % n;
        let es2: Vec<_> = (0..n).map(|i| es[(i + rot) % n].clone()).collect();
        let w2 = MixWeights::new((0..n).map(|i| w.as_slice()[(i + rot) % n]).collect()).unwrap();
        let a = interpolate(&es, &w).unwrap();
        let b = interpolate(&es2, &w2).unwrap();
        prop_assert!(max_abs_diff(a.data(), b.data()) < TOL);
    }

    #[test]
    fn full_slider_adds_the_whole_difference(es in embeddings(), sign in prop::bool::ANY) {
        let base = es[0].clone();
        let (a, b) = (es[es.len() - 1].clone(), es[(es.len() - 1) / 2].clone());
        let w = if sign { 1.0 } else { -1.0 };
        let out = compose(&base, None, &[axis(a.clone(), b.clone(), w)]).unwrap();
        let expected = base.data() + &(w * (a.data() - b.data()));
        prop_assert!(max_abs_diff(out.data(), &expected) < TOL);
    }

    #[test]
    fn centered_sliders_return_base_bitwise(es in embeddings(), n_axes in 0usize..4) {
        let axes: Vec<_> = (0..n_axes).map(|i| axis(es[i % es.len()].clone(), es[0].clone(), 0.0)).collect();
        let out = compose(&es[0], None, &axes).unwrap();
        prop_assert_eq!(out.data(), es[0].data());
    }

    #[test]
    fn swapping_ends_negates_direction(es in embeddings()) {
        let (a, b) = (es[0].clone(), es[es.len() - 1].clone());
        let fwd = direction(&axis(a.clone(), b.clone(), 0.0)).unwrap();
        let back = direction(&axis(b, a, 0.0)).unwrap();
        prop_assert_eq!(fwd, -back);
    }

    #[test]
    fn compose_sums_independent_axes(es in embeddings(), w1 in -1.0f64..=1.0, w2 in -1.0f64..=1.0) {
        let base = &es[0];
        let ax = [
            axis(es[es.len() - 1].clone(), base.clone(), w1),
            axis(base.clone(), es[(es.len() - 1) / 2].clone(), w2),
        ];
        let out = compose(base, None, &ax).unwrap();
        let mut expected = base.data().clone();
        for (i, v) in expected.iter_mut().enumerate() {
            let get = |e: &PromptEmbedding| e.data().iter().nth(i).copied().unwrap();
            *v += w1 * (get(&ax[0].end_a) - get(&ax[0].end_b)) + w2 * (get(&ax[1].end_a) - get(&ax[1].end_b));
        }
        prop_assert!(max_abs_diff(out.data(), &expected) < TOL);
    }

    #[test]
    fn cfg_is_affine_in_scale(
        vals in prop::collection::vec((-2.0f32..2.0, -2.0f32..2.0), 1..32),
        s1 in 0.0f64..10.0,
        s2 in 0.0f64..10.0,
        t in 0.0f64..=1.0,
    ) {
        let n = vals.len();
        let u = ndarray::Array3::from_shape_vec((1, 1, n), vals.iter().map(|v| v.0).collect()).unwrap();
        let c = ndarray::Array3::from_shape_vec((1, 1, n), vals.iter().map(|v| v.1).collect()).unwrap();
        let mid = cfg_combine(&u, &c, t * s1 + (1.0 - t) * s2).unwrap();
        let a = cfg_combine(&u, &c, s1).unwrap();
        let b = cfg_combine(&u, &c, s2).unwrap();
        for i in 0..n {
            let expected = t * a[(0, 0, i)] as f64 + (1.0 - t) * b[(0, 0, i)] as f64;
            // outputs are rounded to f32
            prop_assert!((mid[(0, 0, i)] as f64 - expected).abs() < 1e-4);
        }
        prop_assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u.clone());
        prop_assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c.clone());
    }
}
