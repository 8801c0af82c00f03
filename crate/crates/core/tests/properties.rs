//! Property tests for invariants that hold for every input.

use gta_core::augment::{box_patch_mask, mix_images, sample_cut_box, transmix_coefficient};
use gta_core::data::{generate_synthetic_dataset, subset_per_class, Split, SyntheticSpec};
use gta_core::eval::{jaccard, threshold_mask};
use gta_core::tensor::{Tape, Tensor};
use gta_core::train::{cosine_lr, Checkpoint};
use gta_core::vit::{ViTConfig, ViTModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-50.0..50.0f64, r * c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions((r, c, data) in matrix(6, 9)) {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new([r, c], data).unwrap()).softmax_rows().unwrap().value();
        for i in 0..r {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized((r, c, data) in matrix(5, 8)) {
        prop_assume!(c >= 2);
        let spread = data.chunks(c).all(|row| {
            let m = row.iter().sum::<f64>() / c as f64;
            row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c as f64 > 1e-3
        });
        prop_assume!(spread);
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([r, c], data).unwrap());
        let y = x
            .layer_norm(tape.constant(Tensor::full([c], 1.0)), tape.constant(Tensor::zeros([c])), 1e-6)
            .unwrap()
            .value();
        for i in 0..r {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn jaccard_is_bounded_and_symmetric(a in prop::collection::vec(any::<bool>(), 30), b in prop::collection::vec(any::<bool>(), 30)) {
        let ab = jaccard(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, jaccard(&b, &a).unwrap());
        if a.iter().any(|&x| x) {
            prop_assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn threshold_keeps_the_smallest_sufficient_top_set(values in prop::collection::vec(0.0..1.0f64, 1..60), frac in 0.01..1.0f64) {
        let total: f64 = values.iter().sum();
        prop_assume!(total > 0.0);
        let keep = threshold_mask(&values, frac).unwrap();
        let kept: f64 = values.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| v).sum();
        prop_assert!(kept / total >= frac - 1e-12);
        // Dropping the smallest kept value would fall short.
        let smallest = values.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        prop_assert!((kept - smallest) / total < frac);
        // Every dropped value is no larger than every kept one.
        let largest_dropped = values.iter().zip(&keep).filter(|(_, &k)| !k).map(|(v, _)| *v).fold(0.0, f64::max);
        prop_assert!(largest_dropped <= smallest);
    }

    #[test]
    fn cut_boxes_stay_inside_and_mix_only_inside(seed in any::<u64>(), frac in 0.0..1.2f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cut = sample_cut_box(&mut rng, 16, 16, frac);
        prop_assert!(cut.x0 <= cut.x1 && cut.x1 <= 16 && cut.y0 <= cut.y1 && cut.y1 <= 16);
        let a = Tensor::full([3, 16, 16], 0.25);
        let b = Tensor::full([3, 16, 16], 0.75);
        let m = mix_images(&a, &b, &cut).unwrap();
        let from_b = m.data().iter().filter(|&&v| v == 0.75).count();
        prop_assert_eq!(from_b, 3 * cut.area());
    }

    #[test]
    fn transmix_coefficient_is_a_probability(seed in any::<u64>(), frac in 0.0..1.0f64, weights in prop::collection::vec(0.0..1.0f64, 16)) {
        let total: f64 = weights.iter().sum();
        prop_assume!(total > 1e-6);
        let attn = Tensor::vector(&weights.iter().map(|w| w / total).collect::<Vec<_>>());
        let cfg = ViTConfig::tiny(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cut = sample_cut_box(&mut rng, 16, 16, frac);
        let c = transmix_coefficient(&attn, &box_patch_mask(&cut, &cfg)).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn cosine_schedule_is_monotone_and_bounded(total in 1usize..500, lr in 1e-6..1.0f64) {
        let mut prev = f64::INFINITY;
        for step in 0..=total + 3 {
            let v = cosine_lr(step, total, lr);
            prop_assert!((0.0..=lr).contains(&v));
            prop_assert!(v <= prev + 1e-18);
            prev = v;
        }
    }

    #[test]
    fn subsets_keep_floor_share_per_class(rate in 0.01..1.0f64, per_class in 2usize..9, seed in any::<u64>()) {
        let spec = SyntheticSpec { classes: 3, per_class, image_size: 16, ..SyntheticSpec::default() };
        let d = generate_synthetic_dataset(&spec, 1, Split::Train).unwrap();
        let s = subset_per_class(&d, rate, seed).unwrap();
        let expect = ((rate * per_class as f64).floor() as usize).max(1);
        prop_assert_eq!(s.class_counts(), vec![expect; 3]);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), classes in 2usize..6) {
        let model = ViTModel::init(ViTConfig::tiny(classes), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bytes = Checkpoint::of_model(model.clone()).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.model, &model);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
