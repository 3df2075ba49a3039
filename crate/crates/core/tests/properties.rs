mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;

use common::{tiny_adapters, tiny_model};
use quant_unlearn::corpus::{generate_corpus, Split};
use quant_unlearn::lora::{merge, LoraTargets};
use quant_unlearn::masking::{crossing_fraction, masking_margin};
use quant_unlearn::metrics::{auc_roc, min_k_of, rouge_l_f1};
use quant_unlearn::model::forward_logits;
use quant_unlearn::numerics::{seeded_rng, Graph, Tensor};
use quant_unlearn::quantizer::{
    bin_index, dequantize, quantize, quantize_model, quantize_weights, Grouping, QuantSpec,
};

fn spec() -> impl Strategy<Value = QuantSpec> {
    (2u32..=8, prop_oneof![Just(None), Just(Some(1usize)), Just(Some(2)), Just(Some(4)), Just(Some(8))])
        .prop_map(|(bits, g)| QuantSpec::new(bits, g.map_or(Grouping::PerRow, Grouping::Group)))
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..5, prop_oneof![Just(8usize), Just(16)]).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

/// Flip the sign of any group whose largest-magnitude entry is positive, so
/// that every extreme lands exactly on the bottom index.
fn negative_extremes(w: &Tensor, g: usize) -> Tensor {
    let mut d = w.data().to_vec();
    for chunk in d.chunks_mut(g) {
        let ext = chunk.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if ext > 0.0 {
            chunk.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Tensor::new(w.shape().to_vec(), d).unwrap()
}

fn numerical_rank(t: &Tensor) -> usize {
    let m = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    m.singular_values().iter().filter(|&&s| s > 1e-10).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn round_trip_error_is_at_most_half_a_step(w in matrix(), spec in spec()) {
        let q = quantize(&w, &spec).unwrap();
        let back = dequantize(&q);
        let g = q.group_len();
        for (k, (&x, &y)) in w.data().iter().zip(back.data()).enumerate() {
            let s = q.scales[k / g];
            let raw = (x / s).round();
            let clamped = raw < spec.qmin() as f64 || raw > spec.qmax() as f64;
            if !clamped {
                prop_assert!((x - y).abs() <= s / 2.0 * (1.0 + 1e-12), "|{x} - {y}| > {s}/2");
            }
            let i = q.indices[k] as i32;
            prop_assert!(spec.qmin() <= i && i <= spec.qmax());
        }
    }

    #[test]
    fn clamping_only_touches_positive_extremes(w in matrix(), spec in spec()) {
        let q = quantize(&w, &spec).unwrap();
        let g = q.group_len();
        for (k, &x) in w.data().iter().enumerate() {
            let s = q.scales[k / g];
            let raw = (x / s).round();
            if raw > spec.qmax() as f64 {
                prop_assert_eq!(raw, -(spec.qmin() as f64));
            }
            prop_assert!(raw >= spec.qmin() as f64);
        }
    }

    #[test]
    fn bin_index_is_monotone(a in -5.0f64..5.0, b in -5.0f64..5.0, s in 0.01f64..2.0, bits in 2u32..=8) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(bin_index(lo, s, bits) <= bin_index(hi, s, bits));
    }

    #[test]
    fn requantizing_an_unclamped_grid_is_the_identity(w in matrix(), spec in spec()) {
        let g = spec.group_len(w.shape()).unwrap();
        let w = negative_extremes(&w, g);
        let q = quantize(&w, &spec).unwrap();
        let q2 = quantize(&dequantize(&q), &spec).unwrap();
        prop_assert_eq!(&q2.indices, &q.indices);
        prop_assert_eq!(&q2.scales, &q.scales);
    }

    #[test]
    fn sub_margin_updates_keep_their_bin(w in -3.0f64..3.0, s in 0.01f64..1.0, frac in -0.999f64..0.999, bits in 2u32..=8) {
        let m = masking_margin(w, s);
        prop_assert!((0.0..=s / 2.0).contains(&m));
        prop_assert_eq!(bin_index(w + frac * m, s, bits), bin_index(w, s, bits));
    }

    #[test]
    fn crossing_fraction_ignores_in_group_order(
        w0 in matrix(),
        noise in prop::collection::vec(-0.5f64..0.5, 64),
        spec in spec(),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let n = w0.len();
        let wu = Tensor::new(w0.shape().to_vec(), w0.data().iter().zip(noise.iter().cycle()).map(|(a, b)| a + b).collect()).unwrap();
        let g = spec.group_len(w0.shape()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = seeded_rng(seed);
        for chunk in perm.chunks_mut(g) {
            chunk.shuffle(&mut rng);
        }
        let permute = |t: &Tensor| Tensor::new(t.shape().to_vec(), perm.iter().map(|&i| t.data()[i]).collect()).unwrap();
        let a = crossing_fraction(&w0, &wu, &spec).unwrap();
        let b = crossing_fraction(&permute(&w0), &permute(&wu), &spec).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_rows_are_distributions(w in matrix()) {
        let p = w.softmax_rows();
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_and_kl_are_nonnegative(a in matrix(), b in matrix(), t in 0usize..8) {
        let rows = a.rows();
        let mut g = Graph::new();
        let x = g.constant(a.clone());
        let ce = g.cross_entropy(x, &vec![t; rows]).unwrap();
        prop_assert!(g.scalar(ce) >= 0.0);
        if a.shape() == b.shape() {
            let lq = g.log_softmax_rows(x);
            let kl = g.kl_divergence_rows(&b.softmax_rows(), lq).unwrap();
            prop_assert!(g.scalar(kl) >= -1e-12);
            let self_lq = g.constant(b.log_softmax_rows());
            let zero = g.kl_divergence_rows(&b.softmax_rows(), self_lq).unwrap();
            prop_assert!(g.scalar(zero).abs() < 1e-12);
        }
    }

    #[test]
    fn rouge_l_is_bounded_symmetric_and_exact(
        a in prop::collection::vec(0u8..5, 1..12),
        b in prop::collection::vec(0u8..5, 1..12),
    ) {
        let f = rouge_l_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, rouge_l_f1(&b, &a));
        prop_assert_eq!(f == 1.0, a == b);
        prop_assert_eq!(rouge_l_f1(&a, &a), 1.0);
    }

    #[test]
    fn auc_is_complementary_without_ties(
        m in prop::collection::hash_set(-1000i32..1000, 1..20),
        n in prop::collection::hash_set(-1000i32..1000, 1..20),
    ) {
        prop_assume!(m.is_disjoint(&n));
        let m: Vec<f64> = m.into_iter().map(f64::from).collect();
        let n: Vec<f64> = n.into_iter().map(f64::from).collect();
        let fwd = auc_roc(&m, &n).unwrap();
        let back = auc_roc(&n, &m).unwrap();
        prop_assert!((fwd + back - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&fwd));
    }

    #[test]
    fn min_k_lies_between_minimum_and_mean(lp in prop::collection::vec(-20.0f64..0.0, 1..40), k in 1.0f64..100.0) {
        let v = min_k_of(&lp, k).unwrap();
        let min = lp.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = lp.iter().sum::<f64>() / lp.len() as f64;
        prop_assert!(v >= min - 1e-12 && v <= mean + 1e-12);
    }

    #[test]
    fn corpus_splits_are_disjoint_and_answers_appear_in_sentences(
        seed in any::<u64>(),
        nf in 1usize..20,
        nr in 1usize..40,
        nh in 1usize..20,
    ) {
        let c = generate_corpus(seed, nf, nr, nh).unwrap();
        prop_assert_eq!((c.forget.len(), c.retain.len(), c.holdout.len()), (nf, nr, nh));
        let mut seen = std::collections::HashSet::new();
        for (_, r) in c.iter() {
            prop_assert!(seen.insert(r.entity.clone()), "entity {} repeated", r.entity);
            prop_assert!(r.sentence.ends_with(&r.answer));
            prop_assert!(r.question.contains(&r.entity));
        }
        let again = generate_corpus(seed, nf, nr, nh).unwrap();
        prop_assert_eq!(again.records(Split::Forget), c.records(Split::Forget));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_never_see_later_tokens(
        tokens in prop::collection::vec(0usize..9, 2..=8),
        at in 0usize..8,
        replacement in 0usize..9,
        seed in 0u64..50,
    ) {
        let ck = tiny_model(seed);
        let at = at % tokens.len();
        let mut other = tokens.clone();
        other[at] = replacement;
        let a = forward_logits(&ck, &tokens, None).unwrap();
        let b = forward_logits(&ck, &other, None).unwrap();
        for r in 0..at {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merged_adapters_reproduce_adapter_logits(
        tokens in prop::collection::vec(0usize..9, 1..=8),
        targets in prop_oneof![Just(LoraTargets::AllLinear), Just(LoraTargets::MlpOnly), Just(LoraTargets::AttnOnly)],
        seed in 0u64..50,
    ) {
        let ck = tiny_model(seed);
        let set = tiny_adapters(&ck, targets);
        let merged = merge(&ck, &set).unwrap();
        let with = forward_logits(&ck, &tokens, Some(&set)).unwrap();
        let plain = forward_logits(&merged, &tokens, None).unwrap();
        prop_assert!(with.max_abs_diff(&plain) < 1e-9);
        for ad in &set.adapters {
            let delta = ad.effective_delta().unwrap();
            prop_assert!(numerical_rank(&delta) <= ad.rank);
        }
    }

    #[test]
    fn quantized_models_touch_only_linear_weights(seed in 0u64..50, spec in spec()) {
        let ck = tiny_model(seed);
        let q = quantize_model(&ck, &spec).unwrap();
        let linear: Vec<String> = ck.config.linear_layers().iter().map(|l| l.param_name()).collect();
        for (name, t) in &ck.params {
            if !linear.contains(name) {
                prop_assert_eq!(t, &q.params[name]);
            }
        }
    }

    #[test]
    fn sub_margin_model_updates_quantize_identically(seed in 0u64..50, frac in 0.0f64..0.999, spec in spec()) {
        let ck = tiny_model(seed);
        let qw = quantize_weights(&ck, &spec).unwrap();
        let mut updated = ck.clone();
        let mut rng = seeded_rng(seed + 1);
        for (name, q) in &qw.tensors {
            let w = &ck.params[name];
            let g = q.group_len();
            let sign = Tensor::uniform(w.shape(), -1.0, 1.0, &mut rng);
            let d: Vec<f64> = w
                .data()
                .iter()
                .zip(sign.data())
                .enumerate()
                .map(|(k, (&x, &u))| x + u.signum() * frac * masking_margin(x, q.scales[k / g]))
                .collect();
            updated.params.insert(name.clone(), Tensor::new(w.shape().to_vec(), d).unwrap());
        }
        for (name, q) in &qw.tensors {
            prop_assert_eq!(crossing_fraction(&ck.params[name], &updated.params[name], &spec).unwrap(), 0.0);
            let on_grid = quant_unlearn::quantizer::indices_on_grid(&updated.params[name], &q.scales, &spec).unwrap();
            prop_assert_eq!(&on_grid, &q.indices);
        }
    }
}

#[test]
fn requantizing_a_clamped_positive_extreme_shrinks_the_scale() {
    // The positive extreme of [1.0, 0.5] maps to 8 and clamps to 7, so the
    // dequantized group has a smaller max and a smaller step.
    let spec = QuantSpec::new(4, Grouping::PerRow);
    let w = Tensor::from_rows(&[&[1.0, 0.5]]);
    let q = quantize(&w, &spec).unwrap();
    assert_eq!(q.indices, vec![7, 4]);
    let q2 = quantize(&dequantize(&q), &spec).unwrap();
    assert_eq!(q2.scales, vec![0.875 / 8.0]);
    assert_eq!(q2.indices, vec![7, 5]);
}
