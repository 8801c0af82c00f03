//! Synthetic glyph-on-texture datasets with a tunable background shortcut,
//! per-class subsetting, and a PPM/PGM directory format.
//!
//! Class identity lives only in the foreground glyph's geometry. Each
//! background texture is tied to one class; with probability `ρ` a sample
//! gets its class's texture, otherwise a uniformly random one. Training
//! data uses a high `ρ`, test data `ρ = 0`, so a model that keys on the
//! background does well in training and poorly at test.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Boolean `H×W` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("Mask::new", &[height, width], &[bits.len()]));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Foreground mask; absent for ingested images without one.
    pub mask: Option<Mask>,
    /// Background texture id; absent for ingested images.
    pub background: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    UpstreamTrain,
    Train,
    Test,
    /// Data read from disk.
    External,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::UpstreamTrain => "upstream-train",
            Split::Train => "train",
            Split::Test => "test",
            Split::External => "external",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::UpstreamTrain => 0x5550_0000,
            Split::Train => 0x5452_0000,
            Split::Test => 0x5445_0000,
            Split::External => 0x4558_0000,
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Probability that a training sample's background is its class's texture.
    pub correlation: f64,
    /// Number of distinct background textures.
    pub textures: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 8,
            per_class: 40,
            image_size: 32,
            correlation: 0.95,
            textures: 8,
            noise: 0.03,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.classes > DOWNSTREAM_GLYPHS.len() {
            return fail(format!(
                "at most {} classes are defined, got {}",
                DOWNSTREAM_GLYPHS.len(),
                self.classes
            ));
        }
        if self.textures < self.classes {
            return fail(format!(
                "need at least as many textures ({}) as classes ({})",
                self.textures, self.classes
            ));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return fail(format!("correlation must lie in [0, 1], got {}", self.correlation));
        }
        if self.per_class == 0 || self.image_size < 8 {
            return fail("per_class must be ≥ 1 and image_size ≥ 8".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return fail(format!("noise must be ≥ 0, got {}", self.noise));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub split: Split,
    pub seed: u64,
    pub spec: Option<SyntheticSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    pub fn has_masks(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.mask.is_some())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Family {
    Disk,
    Ring,
    Cross,
    Bars,
    Triangle,
    Frame,
    Diamond,
    Ellipse,
}

const FAMILIES: [Family; 8] = [
    Family::Disk,
    Family::Ring,
    Family::Cross,
    Family::Bars,
    Family::Triangle,
    Family::Frame,
    Family::Diamond,
    Family::Ellipse,
];

/// A downstream class: a family with fixed rotation (radians) and
/// thickness relative to the radius.
#[derive(Clone, Copy, Debug)]
struct GlyphClass {
    family: Family,
    rotation: f64,
    thickness: f64,
}

const fn glyph(family: Family, rotation: f64, thickness: f64) -> GlyphClass {
    GlyphClass {
        family,
        rotation,
        thickness,
    }
}

/// Downstream classes: the first eight are one per family with fixed
/// parameters, the rest are finer variants of the same families.
const DOWNSTREAM_GLYPHS: [GlyphClass; 16] = [
    glyph(Family::Disk, 0.0, 0.0),
    glyph(Family::Ring, 0.0, 0.45),
    glyph(Family::Cross, 0.0, 0.35),
    glyph(Family::Bars, 0.0, 0.3),
    glyph(Family::Triangle, 0.0, 0.0),
    glyph(Family::Frame, 0.0, 0.3),
    glyph(Family::Diamond, 0.0, 0.0),
    glyph(Family::Ellipse, 0.0, 0.0),
    glyph(Family::Ring, 0.0, 0.25),
    glyph(Family::Cross, PI / 4.0, 0.35),
    glyph(Family::Bars, PI / 2.0, 0.3),
    glyph(Family::Triangle, PI, 0.0),
    glyph(Family::Ellipse, PI / 2.0, 0.0),
    glyph(Family::Frame, PI / 4.0, 0.3),
    glyph(Family::Frame, 0.0, 0.6),
    glyph(Family::Cross, 0.0, 0.6),
];

/// Glyph radius as a fraction of the image side, downstream splits.
const DOWNSTREAM_RADIUS: (f64, f64) = (0.2, 0.3);
/// Upstream radius range; disjoint from the downstream one.
const UPSTREAM_RADIUS: (f64, f64) = (0.3, 0.38);
const MASK_FRACTION: (f64, f64) = (0.05, 0.40);
const SUPERSAMPLE: usize = 4;

/// Whether the point `(u, v)` (glyph frame, radius 1) lies inside the glyph.
fn inside(family: Family, thickness: f64, u: f64, v: f64) -> bool {
    let t = thickness;
    match family {
        Family::Disk => u * u + v * v <= 1.0,
        Family::Ring => {
            let r2 = u * u + v * v;
            r2 <= 1.0 && r2 >= (1.0 - t) * (1.0 - t)
        }
        Family::Cross => {
            (u.abs() <= t / 2.0 && v.abs() <= 1.0) || (v.abs() <= t / 2.0 && u.abs() <= 1.0)
        }
        Family::Bars => u.abs() <= 1.0 && ((v - 0.55).abs() <= t / 2.0 || (v + 0.55).abs() <= t / 2.0),
        Family::Triangle => v >= -0.5 && v <= 1.0 - 3f64.sqrt() * u.abs(),
        Family::Frame => {
            let m = u.abs().max(v.abs());
            m <= 0.9 && m >= 0.9 - t
        }
        Family::Diamond => u.abs() + v.abs() <= 1.0,
        Family::Ellipse => u * u + 4.0 * v * v <= 1.0,
    }
}

/// Background pattern `b` at pixel `(x, y)`: oriented stripes over a
/// texture-specific colour pair.
fn texture_pixel(b: usize, textures: usize, size: usize, phase: f64, x: f64, y: f64) -> [f64; 3] {
    let angle = PI * b as f64 / textures as f64;
    let freq = 2.0 + (b % 3) as f64;
    let s = (2.0 * PI * freq * (x * angle.cos() + y * angle.sin()) / size as f64 + phase).sin();
    let w = 0.5 + 0.5 * s;
    let hue = b as f64 / textures as f64;
    let base = hue_rgb(hue);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let dark = 0.08 + 0.25 * base[c];
        let light = 0.2 + 0.4 * base[c];
        out[c] = dark + (light - dark) * w;
    }
    out
}

fn hue_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn sample_stream(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.salt());
    rng.set_stream(index as u64);
    rng
}

fn render(spec: &SyntheticSpec, split: Split, seed: u64, index: usize) -> Sample {
    let mut rng = sample_stream(seed, split, index);
    let c = spec.classes;
    let label = index % c;
    let upstream = split == Split::UpstreamTrain;
    let rho = match split {
        Split::Train => spec.correlation,
        _ => 0.0,
    };
    let background = if rng.gen::<f64>() < rho {
        label
    } else {
        rng.gen_range(0..spec.textures)
    };
    let phase = rng.gen_range(0.0..2.0 * PI);
    let size = spec.image_size;
    let s = size as f64;

    let (family, base_rot, thickness) = if upstream {
        let fam = FAMILIES[label % FAMILIES.len()];
        (fam, rng.gen_range(-0.3..0.3), rng.gen_range(0.35..0.5))
    } else {
        let g = DOWNSTREAM_GLYPHS[label];
        (g.family, g.rotation, g.thickness)
    };
    let (r_lo, r_hi) = if upstream { UPSTREAM_RADIUS } else { DOWNSTREAM_RADIUS };

    let colour = {
        let v = rng.gen_range(0.8..1.0);
        let tint = hue_rgb(rng.gen::<f64>());
        [
            v * (0.85 + 0.15 * tint[0]),
            v * (0.85 + 0.15 * tint[1]),
            v * (0.85 + 0.15 * tint[2]),
        ]
    };

    let mut coverage;
    loop {
        let radius = rng.gen_range(r_lo..r_hi) * s;
        let rot = base_rot + rng.gen_range(-0.08..0.08);
        let cx = rng.gen_range(radius..s - radius);
        let cy = rng.gen_range(radius..s - radius);
        let (sin, cos) = rot.sin_cos();
        coverage = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - cx;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - cy;
                        // into the glyph frame: rotate by -rot, scale by 1/radius,
                        // v pointing up
                        let u = (cos * px + sin * py) / radius;
                        let v = (sin * px - cos * py) / radius;
                        if inside(family, thickness, u, v) {
                            hits += 1;
                        }
                    }
                }
                coverage[y * size + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            }
        }
        let frac = coverage.iter().filter(|&&c| c >= 0.5).count() as f64 / (size * size) as f64;
        if (MASK_FRACTION.0..=MASK_FRACTION.1).contains(&frac) {
            break;
        }
    }

    let noise = Normal::new(0.0, spec.noise.max(1e-300)).expect("noise");
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let bg = texture_pixel(background, spec.textures, size, phase, x as f64, y as f64);
            let cov = coverage[y * size + x];
            for ch in 0..3 {
                let mut v = bg[ch] * (1.0 - cov) + colour[ch] * cov;
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data[ch * size * size + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let bits = coverage.iter().map(|&c| c >= 0.5).collect();
    Sample {
        image: Tensor::new([3, size, size], data).expect("image shape"),
        label,
        mask: Some(Mask {
            height: size,
            width: size,
            bits,
        }),
        background: Some(background),
    }
}

/// Deterministic function of `(spec, seed, split)`; sample `i` has label
/// `i mod C` and its own RNG stream.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if split == Split::External {
        return Err(Error::Config("cannot generate the external split".into()));
    }
    if split == Split::UpstreamTrain && spec.classes > FAMILIES.len() {
        return Err(Error::Config(format!(
            "upstream data defines at most {} classes",
            FAMILIES.len()
        )));
    }
    let n = spec.classes * spec.per_class;
    let samples = (0..n).map(|i| render(spec, split, seed, i)).collect();
    Ok(Dataset {
        samples,
        num_classes: spec.classes,
        split,
        seed,
        spec: Some(spec.clone()),
    })
}

/// Keeps `max(1, ⌊rate·count⌋)` uniformly chosen samples of every class,
/// preserving the original order.
pub fn subset_per_class(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("rate must lie in (0, 1], got {rate}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::EmptyDataset(format!("class {c} has no samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; dataset.len()];
    for members in &by_class {
        let k = ((rate * members.len() as f64).floor() as usize).max(1);
        for j in index::sample(&mut rng, members.len(), k) {
            keep[members[j]] = true;
        }
    }
    Ok(Dataset {
        samples: dataset
            .samples
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s.clone())
            .collect(),
        ..dataset.clone()
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Writes a binary PPM (P6, maxval 255) from a `3×H×W` tensor in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [3, h, w] = image.shape() else {
        return Err(Error::shape("write_ppm", image.shape(), &[3]));
    };
    let (h, w) = (*h, *w);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(quantize(d[c * h * w + y * w + x]));
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Raw interleaved RGB bytes as a P6 file.
pub fn write_ppm_bytes(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Parses a binary PNM header with the given magic; returns
/// `(width, height, payload)`.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let err = |msg: &str| Error::Ingest {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| err("non-ASCII header"))?);
    }
    // exactly one whitespace byte separates the header from the payload
    if i >= bytes.len() {
        return Err(err("missing payload"));
    }
    i += 1;
    if fields[0] != magic {
        return Err(err(&format!("expected magic {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| err(&format!("bad header field `{s}`")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(err(&format!("maxval must be 255, found {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(err("zero image extent"));
    }
    Ok((w, h, &bytes[i..]))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, payload) = parse_pnm(&bytes, "P6", path)?;
    if payload.len() != 3 * w * h {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            msg: format!("expected {} pixel bytes, found {}", 3 * w * h, payload.len()),
        });
    }
    let mut data = vec![0.0; 3 * w * h];
    for (p, px) in payload.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Reads a P5 mask; bytes above 127 are foreground.
pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path)?;
    let (w, h, payload) = parse_pnm(&bytes, "P5", path)?;
    if payload.len() != w * h {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            msg: format!("expected {} mask bytes, found {}", w * h, payload.len()),
        });
    }
    Mask::new(h, w, payload.iter().map(|&b| b > 127).collect())
}

fn mask_name(file: &str) -> String {
    let stem = file.rsplit_once('.').map_or(file, |(s, _)| s);
    format!("{stem}.pgm")
}

/// Writes `labels.csv`, one P6 image per sample and, where present, P5
/// masks under `masks/` (same stem, `.pgm`).
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let with_masks = dataset.samples.iter().any(|s| s.mask.is_some());
    if with_masks {
        fs::create_dir_all(dir.join("masks"))?;
    }
    let mut csv = csv::Writer::from_path(dir.join("labels.csv")).map_err(csv_io)?;
    csv.write_record(["filename", "label"]).map_err(csv_io)?;
    for (i, s) in dataset.samples.iter().enumerate() {
        let name = format!("{i:05}.ppm");
        write_ppm(&dir.join(&name), &s.image)?;
        if let Some(m) = &s.mask {
            write_pgm_mask(&dir.join("masks").join(mask_name(&name)), m)?;
        }
        csv.write_record([name.as_str(), &s.label.to_string()]).map_err(csv_io)?;
    }
    csv.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Loads a directory written by [`export_dataset`] (or by hand in the
/// same layout). Masks are optional per sample.
pub fn load_image_dir(dir: &Path, num_classes: usize) -> Result<Dataset> {
    let labels = dir.join("labels.csv");
    let file = fs::File::open(&labels)?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| Error::Ingest {
        path: labels.clone(),
        msg: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["filename", "label"] {
        return Err(Error::Ingest {
            path: labels.clone(),
            msg: "header must be `filename,label`".into(),
        });
    }
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Ingest {
            path: labels.clone(),
            msg: e.to_string(),
        })?;
        let (Some(name), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(Error::Ingest {
                path: labels.clone(),
                msg: "row needs two fields".into(),
            });
        };
        let img_path = dir.join(name);
        if !seen.insert(name.to_string()) {
            return Err(Error::Ingest {
                path: img_path,
                msg: "duplicate filename".into(),
            });
        }
        let label: usize = label.trim().parse().map_err(|_| Error::Ingest {
            path: img_path.clone(),
            msg: format!("bad label `{label}`"),
        })?;
        if label >= num_classes {
            return Err(Error::Ingest {
                path: img_path,
                msg: format!("label {label} outside [0, {num_classes})"),
            });
        }
        let image = read_ppm(&img_path)?;
        let mpath = dir.join("masks").join(mask_name(name));
        let mask = if mpath.exists() {
            Some(read_pgm_mask(&mpath)?)
        } else {
            None
        };
        samples.push(Sample {
            image,
            label,
            mask,
            background: None,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("{} lists no samples", labels.display())));
    }
    Ok(Dataset {
        samples,
        num_classes,
        split: Split::External,
        seed: 0,
        spec: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(c: usize, n: usize) -> SyntheticSpec {
        SyntheticSpec {
            classes: c,
            per_class: n,
            image_size: 16,
            correlation: 1.0,
            textures: c,
            noise: 0.02,
        }
    }

    #[test]
    fn counts_and_correlation() {
        let d = generate_synthetic_dataset(&spec(4, 100), 1, Split::Train).unwrap();
        assert_eq!(d.len(), 400);
        assert!(d.samples.iter().all(|s| s.background == Some(s.label)));
        assert_eq!(d.class_counts(), vec![100; 4]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_dataset(&spec(3, 5), 9, Split::Test).unwrap();
        let b = generate_synthetic_dataset(&spec(3, 5), 9, Split::Test).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&spec(3, 5), 10, Split::Test).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn masks_and_pixels_in_range() {
        let mut s = spec(8, 6);
        s.image_size = 32;
        s.textures = 8;
        for split in [Split::UpstreamTrain, Split::Train, Split::Test] {
            let d = generate_synthetic_dataset(&s, 3, split).unwrap();
            for smp in &d.samples {
                let f = smp.mask.as_ref().unwrap().fraction();
                assert!((0.05..=0.40).contains(&f), "{split:?} fraction {f}");
                assert!(smp.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    /// Mutual information between background id and label, in nats.
    fn mutual_information(d: &Dataset, textures: usize) -> f64 {
        let c = d.num_classes;
        let n = d.len() as f64;
        let mut joint = vec![0.0; c * textures];
        for s in &d.samples {
            joint[s.label * textures + s.background.unwrap()] += 1.0;
        }
        let pl: Vec<f64> = (0..c).map(|l| joint[l * textures..(l + 1) * textures].iter().sum::<f64>() / n).collect();
        let pb: Vec<f64> = (0..textures).map(|b| (0..c).map(|l| joint[l * textures + b]).sum::<f64>() / n).collect();
        let mut mi = 0.0;
        for l in 0..c {
            for b in 0..textures {
                let p = joint[l * textures + b] / n;
                if p > 0.0 {
                    mi += p * (p / (pl[l] * pb[b])).ln();
                }
            }
        }
        mi
    }

    #[test]
    fn shortcut_is_maximal_in_train_and_absent_at_test() {
        let s = SyntheticSpec {
            classes: 2,
            per_class: 400,
            image_size: 8,
            correlation: 1.0,
            textures: 2,
            noise: 0.0,
        };
        let train = generate_synthetic_dataset(&s, 4, Split::Train).unwrap();
        // ρ = 1 with balanced labels: I(B; Y) = H(Y) = ln 2.
        assert!((mutual_information(&train, 2) - 2f64.ln()).abs() < 1e-12);
        let test = generate_synthetic_dataset(&s, 4, Split::Test).unwrap();
        let mi = mutual_information(&test, 2);
        // Independent draws: the plug-in estimate is O(1/n).
        assert!(mi < 0.01, "{mi}");
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(4, 1);
        s.textures = 3;
        assert!(s.validate().is_err());
        let mut s = spec(1, 1);
        s.textures = 2;
        assert!(s.validate().is_err());
        let s = spec(17, 1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn subsetting() {
        let d = generate_synthetic_dataset(&spec(3, 10), 1, Split::Train).unwrap();
        let s = subset_per_class(&d, 0.3, 5).unwrap();
        assert_eq!(s.class_counts(), vec![3, 3, 3]);
        assert_eq!(subset_per_class(&d, 1.0, 5).unwrap(), d);
        assert_eq!(subset_per_class(&d, 0.3, 5).unwrap(), s);
        let tiny = subset_per_class(&d, 0.01, 5).unwrap();
        assert_eq!(tiny.class_counts(), vec![1, 1, 1]);
        // order preserved
        let pos: Vec<usize> = s
            .samples
            .iter()
            .map(|x| d.samples.iter().position(|y| y == x).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let mut missing = d.clone();
        missing.samples.retain(|x| x.label != 1);
        assert!(matches!(subset_per_class(&missing, 0.5, 1), Err(Error::EmptyDataset(_))));
        assert!(subset_per_class(&d, 0.0, 1).is_err());
    }

    #[test]
    fn export_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic_dataset(&spec(2, 3), 2, Split::Test).unwrap();
        export_dataset(&d, dir.path()).unwrap();
        let back = load_image_dir(dir.path(), 2).unwrap();
        assert_eq!(back.len(), d.len());
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn ingestion_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        fs::write(p.join("labels.csv"), "filename,label\n").unwrap();
        assert!(matches!(load_image_dir(p, 2), Err(Error::EmptyDataset(_))));

        write_ppm(&p.join("a.ppm"), &Tensor::zeros([3, 2, 2])).unwrap();
        fs::write(p.join("labels.csv"), "filename,label\na.ppm,5\n").unwrap();
        assert!(matches!(load_image_dir(p, 2), Err(Error::Ingest { .. })));

        fs::write(p.join("labels.csv"), "filename,label\na.ppm,1\na.ppm,0\n").unwrap();
        let e = load_image_dir(p, 2).unwrap_err().to_string();
        assert!(e.contains("a.ppm") && e.contains("duplicate"), "{e}");

        fs::write(p.join("b.ppm"), b"P3\n2 2\n255\n0000").unwrap();
        fs::write(p.join("labels.csv"), "filename,label\nb.ppm,1\n").unwrap();
        let e = load_image_dir(p, 2).unwrap_err().to_string();
        assert!(e.contains("b.ppm"), "{e}");
    }

    #[test]
    fn mask_threshold_convention() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, [b"P5\n4 1\n255\n".as_slice(), &[0, 127, 128, 255]].concat()).unwrap();
        let m = read_pgm_mask(&path).unwrap();
        assert_eq!(m.bits, vec![false, false, true, true]);
    }

    #[test]
    fn quantization_rounds_half_to_even() {
        assert_eq!(quantize(0.5 / 255.0), 0);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(1.0), 255);
    }
}
