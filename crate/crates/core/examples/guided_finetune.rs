//! Pre-train a tiny source model, then fine-tune it on a few shortcut-laden
//! samples per class twice: plainly, and with the attention-logit guidance.
//! Prints test accuracy, attention Jaccard and drift from the source.

use gta_core::data::{generate_synthetic_dataset, subset_per_class, Split, SyntheticSpec};
use gta_core::guidance::{FreezePolicy, GuidanceMethod, GuidanceSpec};
use gta_core::train::{finetune, init_target, pretrain_source, TrainConfig};
use gta_core::vit::ViTConfig;

fn main() -> gta_core::Result<()> {
    let vit = ViTConfig::tiny(8);
    let spec = SyntheticSpec {
        image_size: vit.image_size,
        ..SyntheticSpec::default()
    };
    let upstream = generate_synthetic_dataset(&SyntheticSpec { per_class: 100, correlation: 0.0, ..spec.clone() }, 1, Split::UpstreamTrain)?;
    let held_out = generate_synthetic_dataset(&SyntheticSpec { per_class: 25, correlation: 0.0, ..spec.clone() }, 2, Split::UpstreamTrain)?;
    let pre = TrainConfig {
        iterations: 600,
        seed: 1,
        ..TrainConfig::default()
    };
    let (source, report) = pretrain_source(&upstream, Some(&held_out), vit, &pre)?;
    println!("source: upstream accuracy {:.3}", report.last_eval().map_or(0.0, |e| e.test.accuracy));

    let train = generate_synthetic_dataset(&spec, 3, Split::Train)?;
    let test = generate_synthetic_dataset(&SyntheticSpec { per_class: 25, ..spec.clone() }, 4, Split::Test)?;
    let subset = subset_per_class(&train, 0.15, 0)?;
    for (method, lambda) in [(GuidanceMethod::None, 0.0), (GuidanceMethod::Gta, 10.0)] {
        let cfg = TrainConfig {
            iterations: 150,
            batch_size: 16,
            guidance: GuidanceSpec::new(method, lambda, FreezePolicy::None)?,
            ..TrainConfig::default()
        };
        let target = init_target(&source, train.num_classes, 0)?;
        let (_, report) = finetune(&source, target, &subset, Some(&test), &cfg)?;
        let e = &report.last_eval().expect("final eval").test;
        println!(
            "{:>5} λ={lambda:<4}: test accuracy {:.3}, Jaccard {:.3}, [cls]-logit drift {:.3}",
            method.name(),
            e.accuracy,
            e.jaccard.unwrap_or(f64::NAN),
            e.logit_distance.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
