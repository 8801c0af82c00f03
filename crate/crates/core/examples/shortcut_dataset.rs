//! Generate the synthetic shortcut task, measure how often the background
//! texture gives the label away in each split, and export it to disk.
//!
//! `cargo run --example shortcut_dataset -- /tmp/gta-data`

use gta_core::data::{export_dataset, generate_synthetic_dataset, load_image_dir, Split, SyntheticSpec};

fn main() -> gta_core::Result<()> {
    let out = std::env::args().nth(1);
    let spec = SyntheticSpec::default();
    for (split, per_class) in [(Split::UpstreamTrain, 20), (Split::Train, spec.per_class), (Split::Test, 25)] {
        let d = generate_synthetic_dataset(&SyntheticSpec { per_class, ..spec.clone() }, 0, split)?;
        let agree = d
            .samples
            .iter()
            .filter(|s| s.background == Some(s.label))
            .count() as f64
            / d.len() as f64;
        let mean_fg = d
            .samples
            .iter()
            .filter_map(|s| s.mask.as_ref())
            .map(|m| m.fraction())
            .sum::<f64>()
            / d.len() as f64;
        println!(
            "{:>8}: {} samples, background matches label {:.1}%, mean foreground {:.1}%",
            split.name(),
            d.len(),
            100.0 * agree,
            100.0 * mean_fg
        );
        if let Some(dir) = &out {
            let path = std::path::Path::new(dir).join(split.name());
            export_dataset(&d, &path)?;
            let back = load_image_dir(&path, d.num_classes)?;
            println!("          exported to {} and read back {} samples", path.display(), back.len());
        }
    }
    Ok(())
}
