//! Synthetic long-tailed image classification data with label noise.
//!
//! Every class owns a smooth random prototype built on top of a pattern
//! shared by all classes, so classes are similar but separable. Samples are
//! the prototype plus i.i.d. Gaussian pixel noise, clipped to `[0, 1]`.
//! Train counts follow `n(k) = round(head · ratio^(-k/(K-1)))` (at least 1);
//! val and test are class-balanced and always clean.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::prob::ClassIndex;
use crate::tta::Image;
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 7] = b"BSCEDS1";
const MAGIC_FAMILY: &[u8] = b"BSCEDS";

/// Blobs per smooth pattern.
const BLOBS: usize = 6;
/// Amplitude of the pattern shared by all classes.
const SHARED_AMPLITUDE: f64 = 0.1;
/// Amplitude of the class-specific pattern.
const CLASS_AMPLITUDE: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    /// Flip to a uniformly random other class.
    #[default]
    Symmetric,
    /// Flip `y` to `(y + 1) mod K`.
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    /// Train size of class 0, the largest class.
    pub head_count: usize,
    /// Head-to-tail train size ratio.
    pub imbalance_ratio: f64,
    /// Probability that a train label is corrupted.
    pub noise_rate: f64,
    pub noise_model: NoiseModel,
    pub image_side: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the per-pixel Gaussian perturbation.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            head_count: 500,
            imbalance_ratio: 50.0,
            noise_rate: 0.4,
            noise_model: NoiseModel::Symmetric,
            image_side: 32,
            val_per_class: 20,
            test_per_class: 50,
            pixel_noise: 0.25,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.head_count == 0 {
            return bad("head_count must be >= 1".into());
        }
        if !self.imbalance_ratio.is_finite() || self.imbalance_ratio < 1.0 {
            return bad(format!(
                "imbalance_ratio must be >= 1, got {}",
                self.imbalance_ratio
            ));
        }
        if (self.head_count as f64) / self.imbalance_ratio < 1.0 {
            return bad(format!(
                "tail class would be empty: head_count {} / imbalance_ratio {} < 1",
                self.head_count, self.imbalance_ratio
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!(
                "noise_rate must be in [0, 1), got {}",
                self.noise_rate
            ));
        }
        if self.image_side < 2 {
            return bad(format!("image_side must be >= 2, got {}", self.image_side));
        }
        if self.val_per_class == 0 || self.test_per_class == 0 {
            return bad("val_per_class and test_per_class must be >= 1".into());
        }
        if !self.pixel_noise.is_finite() || self.pixel_noise < 0.0 {
            return bad(format!(
                "pixel_noise must be >= 0, got {}",
                self.pixel_noise
            ));
        }
        if u32::try_from(self.classes).is_err() || u32::try_from(self.image_side).is_err() {
            return bad("classes and image_side must fit in 32 bits".into());
        }
        Ok(())
    }

    /// Train size per class under the exponential long-tail profile.
    pub fn train_counts(&self) -> Vec<usize> {
        let last = (self.classes - 1) as f64;
        (0..self.classes)
            .map(|k| {
                let n = self.head_count as f64 * self.imbalance_ratio.powf(-(k as f64) / last);
                (n.round() as usize).max(1)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub side: usize,
    /// Row-major, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub true_label: ClassIndex,
    pub observed_label: ClassIndex,
}

impl LabeledImage {
    pub fn to_image(&self) -> Image {
        Image::from_f32(self.side, self.side, &self.pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub image_side: usize,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn smooth_pattern(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = side as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..BLOBS)
        .map(|_| {
            let cy = rng.random_range(0.0..s);
            let cx = rng.random_range(0.0..s);
            let width = rng.random_range(s / 8.0..s / 3.0);
            let amp = rng.random_range(-1.0..1.0);
            (cy, cx, width, amp)
        })
        .collect();
    let mut out = vec![0.0; side * side];
    for (i, v) in out.iter_mut().enumerate() {
        let (y, x) = ((i / side) as f64, (i % side) as f64);
        *v = blobs
            .iter()
            .map(|(cy, cx, w, a)| {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                a * (-d2 / (2.0 * w * w)).exp()
            })
            .sum();
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    out
}

fn prototypes_from(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let side = spec.image_side;
    let shared = smooth_pattern(side, rng);
    (0..spec.classes)
        .map(|_| {
            let own = smooth_pattern(side, rng);
            shared
                .iter()
                .zip(&own)
                .map(|(b, c)| (0.5 + SHARED_AMPLITUDE * b + CLASS_AMPLITUDE * c).clamp(0.0, 1.0))
                .collect()
        })
        .collect()
}

/// The noise-free class prototypes that [`synth_dataset`] draws samples around.
pub fn class_prototypes(spec: &DatasetSpec) -> Result<Vec<Image>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(prototypes_from(spec, &mut rng)
        .into_iter()
        .map(|p| Image::new(spec.image_side, spec.image_side, p).expect("prototype shape"))
        .collect())
}

fn draw_sample(
    proto: &[f64],
    side: usize,
    label: ClassIndex,
    pixel_noise: Option<&Normal<f64>>,
    rng: &mut ChaCha8Rng,
) -> LabeledImage {
    let pixels = proto
        .iter()
        .map(|v| {
            let noisy = match pixel_noise {
                Some(n) => v + n.sample(rng),
                None => *v,
            };
            noisy.clamp(0.0, 1.0) as f32
        })
        .collect();
    LabeledImage {
        side,
        pixels,
        true_label: label,
        observed_label: label,
    }
}

/// Generates the dataset described by `spec`, including its label noise.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = prototypes_from(spec, &mut rng);
    let normal = if spec.pixel_noise > 0.0 {
        Some(Normal::new(0.0, spec.pixel_noise).map_err(|e| Error::InvalidSpec(e.to_string()))?)
    } else {
        None
    };
    let side = spec.image_side;
    let mut draw_split = |per_class: &[usize]| -> Vec<LabeledImage> {
        let mut out = Vec::with_capacity(per_class.iter().sum());
        for (label, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                out.push(draw_sample(
                    &protos[label],
                    side,
                    label,
                    normal.as_ref(),
                    &mut rng,
                ));
            }
        }
        out
    };
    let train = draw_split(&spec.train_counts());
    let val = draw_split(&vec![spec.val_per_class; spec.classes]);
    let test = draw_split(&vec![spec.test_per_class; spec.classes]);
    let clean = Dataset {
        classes: spec.classes,
        image_side: side,
        train,
        val,
        test,
    };
    // Separate stream so the noise draw never perturbs the pixels.
    inject_noise_with(
        &clean,
        spec.noise_rate,
        spec.noise_model,
        noise_seed(spec.seed),
    )
}

fn noise_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Symmetric label noise on the train split.
pub fn inject_noise(dataset: &Dataset, eta: f64, seed: u64) -> Result<Dataset> {
    inject_noise_with(dataset, eta, NoiseModel::Symmetric, seed)
}

/// Relabels each train sample independently with probability `eta`.
///
/// Observed labels are re-derived from the true labels, so `eta = 0`
/// restores a clean split. Val and test are copied untouched.
pub fn inject_noise_with(
    dataset: &Dataset,
    eta: f64,
    model: NoiseModel,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::InvalidInput(format!(
            "noise rate must be in [0, 1), got {eta}"
        )));
    }
    let classes = dataset.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for sample in &mut out.train {
        let y = sample.true_label;
        sample.observed_label = y;
        if rng.random::<f64>() < eta {
            sample.observed_label = match model {
                NoiseModel::Symmetric => {
                    let r = rng.random_range(0..classes - 1);
                    if r >= y {
                        r + 1
                    } else {
                        r
                    }
                }
                NoiseModel::Pairwise => (y + 1) % classes,
            };
        }
    }
    Ok(out)
}

/// Train-split tally of observed labels.
pub fn class_counts(dataset: &Dataset) -> Result<Vec<u64>> {
    if dataset.train.is_empty() {
        return Err(Error::InvalidInput("train split is empty".into()));
    }
    let mut counts = vec![0u64; dataset.classes];
    for s in &dataset.train {
        let slot = counts.get_mut(s.observed_label).ok_or(Error::Index {
            index: s.observed_label,
            classes: dataset.classes,
        })?;
        *slot += 1;
    }
    Ok(counts)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} = {v} does not fit in u32")))
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(DATASET_MAGIC)?;
    for v in [
        dataset.classes,
        dataset.image_side,
        dataset.image_side,
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
    ] {
        w.write_all(&to_u32(v, "header field")?.to_le_bytes())?;
    }
    let area = dataset.image_side * dataset.image_side;
    for s in dataset
        .train
        .iter()
        .chain(&dataset.val)
        .chain(&dataset.test)
    {
        if s.pixels.len() != area {
            return Err(Error::Shape {
                expected: area,
                got: s.pixels.len(),
            });
        }
        for p in &s.pixels {
            w.write_all(&p.to_le_bytes())?;
        }
        w.write_all(&to_u32(s.true_label, "true_label")?.to_le_bytes())?;
        w.write_all(&to_u32(s.observed_label, "observed_label")?.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Little-endian cursor over an in-memory file.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "unexpected end of file at byte {} (wanted {n} more)",
                    self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_dataset(&bytes)
}

fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    let magic = r
        .take(DATASET_MAGIC.len())
        .map_err(|_| Error::Corrupt("file shorter than header".into()))?;
    if magic != DATASET_MAGIC {
        return Err(Error::Version(if magic.starts_with(MAGIC_FAMILY) {
            format!(
                "dataset format version {:?} is not supported",
                String::from_utf8_lossy(&magic[MAGIC_FAMILY.len()..])
            )
        } else {
            "not a dataset file (bad magic)".into()
        }));
    }
    let classes = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let sizes = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    if height != width {
        return Err(Error::Corrupt(format!(
            "non-square images {height}x{width}"
        )));
    }
    if classes < 2 {
        return Err(Error::Corrupt(format!("class count {classes} < 2")));
    }
    let area = height
        .checked_mul(width)
        .ok_or_else(|| Error::Corrupt("image size overflow".into()))?;
    let record = area
        .checked_mul(4)
        .and_then(|b| b.checked_add(8))
        .ok_or_else(|| Error::Corrupt("record size overflow".into()))?;
    let total: usize = sizes.iter().sum();
    if total.checked_mul(record) != Some(bytes.len() - r.pos) {
        return Err(Error::Corrupt(format!(
            "payload is {} bytes, header implies {} records of {record} bytes",
            bytes.len() - r.pos,
            total
        )));
    }
    let mut splits = sizes.iter().map(|&n| -> Result<Vec<LabeledImage>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let pixels = (0..area).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let true_label = r.u32()? as usize;
            let observed_label = r.u32()? as usize;
            if true_label >= classes || observed_label >= classes {
                return Err(Error::Corrupt(format!(
                    "label ({true_label}, {observed_label}) out of range for {classes} classes"
                )));
            }
            out.push(LabeledImage {
                side: height,
                pixels,
                true_label,
                observed_label,
            });
        }
        Ok(out)
    });
    let train = splits.next().unwrap()?;
    let val = splits.next().unwrap()?;
    let test = splits.next().unwrap()?;
    drop(splits);
    r.finish()?;
    Ok(Dataset {
        classes,
        image_side: height,
        train,
        val,
        test,
    })
}
