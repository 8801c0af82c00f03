//! Training-loop behaviour across modules on the tiny configuration.

use gta_core::data::{generate_synthetic_dataset, Split, SyntheticSpec};
use gta_core::guidance::{FreezePolicy, GuidanceMethod, GuidanceSpec};
use gta_core::train::{finetune, init_target, pretrain_source, TrainConfig};
use gta_core::vit::{ViTConfig, ViTModel};
use gta_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn task() -> (gta_core::data::Dataset, gta_core::data::Dataset) {
    let spec = SyntheticSpec {
        image_size: 16,
        per_class: 4,
        ..SyntheticSpec::default()
    };
    (
        generate_synthetic_dataset(&spec, 0, Split::Train).unwrap(),
        generate_synthetic_dataset(&SyntheticSpec { per_class: 2, ..spec }, 0, Split::Test).unwrap(),
    )
}

fn source() -> ViTModel {
    ViTModel::init(ViTConfig::tiny(8), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn cfg(method: GuidanceMethod, lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 6,
        batch_size: 4,
        seed,
        eval_interval: 3,
        guidance: GuidanceSpec::new(method, lambda, FreezePolicy::None).unwrap(),
        ..TrainConfig::default()
    }
}

#[test]
fn runs_are_deterministic_per_seed() {
    let (train, test) = task();
    let src = source();
    let run = |seed| {
        let target = init_target(&src, 8, seed).unwrap();
        finetune(&src, target, &train, Some(&test), &cfg(GuidanceMethod::Gta, 1.0, seed))
            .unwrap()
            .1
            .to_jsonl()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn every_method_reports_the_same_schedule() {
    let (train, test) = task();
    let src = source();
    let mut steps = Vec::new();
    for method in [
        GuidanceMethod::None,
        GuidanceMethod::Gta,
        GuidanceMethod::MsaGuide,
        GuidanceMethod::BlockGuide,
        GuidanceMethod::L2sp,
    ] {
        let target = init_target(&src, 8, 0).unwrap();
        let (_, report) = finetune(&src, target, &train, Some(&test), &cfg(method, 0.5, 0)).unwrap();
        assert_eq!(report.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![3, 6]);
        for s in &report.steps {
            assert!((s.total - (s.ce + 0.5 * s.reg)).abs() < 1e-9 * s.total.abs().max(1.0), "{method:?} {s:?}");
        }
        // The first step starts from the source, so there is nothing to penalize yet.
        assert_eq!(report.steps[0].reg, 0.0, "{method:?}");
        steps.push(report.steps.iter().map(|s| s.lr).collect::<Vec<_>>());
    }
    assert!(steps.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn exploding_updates_abort_with_the_step() {
    let (train, _) = task();
    let src = source();
    let target = init_target(&src, 8, 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e250,
        weight_decay: 0.0,
        ..cfg(GuidanceMethod::None, 0.0, 0)
    };
    match finetune(&src, target, &train, None, &cfg) {
        Err(e @ Error::NumericalAbort { .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected a numerical abort, got {other:?}"),
    }
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let (train, _) = task();
    let src = source();
    let target = init_target(&src, 5, 0).unwrap();
    let err = finetune(&src, target, &train, None, &cfg(GuidanceMethod::None, 0.0, 0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = pretrain_source(&train, None, ViTConfig::tiny(3), &cfg(GuidanceMethod::None, 0.0, 0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
