//! Bilinear resize, center crop and multi-scale test-time augmentation.

use serde::{Deserialize, Serialize};

use crate::prob::{softmax_slice, ProbabilityVector};
use crate::trainer::ModelParams;
use crate::{Error, Result};

/// Single-channel row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                expected: height * width,
                got: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_f32(height: usize, width: usize, data: &[f32]) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data: data.iter().map(|v| f64::from(*v)).collect(),
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Source coordinate of output index `i` under corner-aligned sampling:
/// the first and last output samples land exactly on the first and last
/// input samples.
fn source_coord(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Corner-aligned bilinear resize to `target_side × target_side`.
pub fn bilinear_resize(image: &Image, target_side: usize) -> Result<Image> {
    if image.height < 2 || image.width < 2 {
        return Err(Error::InvalidInput(format!(
            "cannot resize a {}x{} image",
            image.height, image.width
        )));
    }
    if target_side < 2 {
        return Err(Error::InvalidInput(format!(
            "resize target must be >= 2, got {target_side}"
        )));
    }
    let cols: Vec<_> = (0..target_side)
        .map(|j| source_coord(j, image.width, target_side))
        .collect();
    let mut data = Vec::with_capacity(target_side * target_side);
    for i in 0..target_side {
        let (y0, y1, fy) = source_coord(i, image.height, target_side);
        for &(x0, x1, fx) in &cols {
            let top = lerp(image.get(y0, x0), image.get(y0, x1), fx);
            let bottom = lerp(image.get(y1, x0), image.get(y1, x1), fx);
            data.push(lerp(top, bottom, fy));
        }
    }
    Ok(Image {
        height: target_side,
        width: target_side,
        data,
    })
}

/// Offset of a centered window of length `crop` inside length `len`.
pub fn center_offset(len: usize, crop: usize) -> usize {
    (len - crop) / 2
}

/// The `crop_side × crop_side` window at offset
/// `(floor((H - c) / 2), floor((W - c) / 2))`.
pub fn center_crop(image: &Image, crop_side: usize) -> Result<Image> {
    if crop_side == 0 || crop_side > image.height.min(image.width) {
        return Err(Error::InvalidInput(format!(
            "crop {crop_side} does not fit a {}x{} image",
            image.height, image.width
        )));
    }
    let top = center_offset(image.height, crop_side);
    let left = center_offset(image.width, crop_side);
    let mut data = Vec::with_capacity(crop_side * crop_side);
    for row in top..top + crop_side {
        let start = row * image.width + left;
        data.extend_from_slice(&image.data[start..start + crop_side]);
    }
    Ok(Image {
        height: crop_side,
        width: crop_side,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMode {
    /// Average pre-head features across views, then apply head and softmax.
    #[default]
    AverageFeatures,
    /// Average per-view softmax outputs.
    AverageProbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub resize_sides: Vec<usize>,
    pub crop_side: usize,
    pub mode: TtaMode,
}

/// Resize sides of the large-image preset.
pub const LARGE_RESIZE_SIDES: [usize; 5] = [384, 412, 424, 436, 464];
/// Crop side of the large-image preset.
pub const LARGE_CROP_SIDE: usize = 331;

impl Default for TtaConfig {
    /// Desk-scale sides for 32-pixel images and a 24-pixel model input.
    fn default() -> Self {
        Self {
            resize_sides: vec![26, 28, 30, 32, 36],
            crop_side: 24,
            mode: TtaMode::AverageFeatures,
        }
    }
}

impl TtaConfig {
    /// 384/412/424/436/464 resized, cropped to 331.
    pub fn large_scales() -> Self {
        Self {
            resize_sides: LARGE_RESIZE_SIDES.to_vec(),
            crop_side: LARGE_CROP_SIDE,
            mode: TtaMode::AverageFeatures,
        }
    }

    pub fn single(side: usize, crop_side: usize, mode: TtaMode) -> Self {
        Self {
            resize_sides: vec![side],
            crop_side,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_sides.is_empty() {
            return Err(Error::Config("tta resize_sides is empty".into()));
        }
        if self.crop_side < 1 {
            return Err(Error::Config("tta crop_side must be >= 1".into()));
        }
        if let Some(s) = self
            .resize_sides
            .iter()
            .find(|s| **s < self.crop_side || **s < 2)
        {
            return Err(Error::Config(format!(
                "resize side {s} is smaller than crop side {}",
                self.crop_side
            )));
        }
        Ok(())
    }
}

/// One augmented view: resize to `side`, then center-crop.
pub fn view(image: &Image, side: usize, crop_side: usize) -> Result<Image> {
    let resized = if side == image.height && side == image.width {
        image.clone()
    } else {
        bilinear_resize(image, side)?
    };
    center_crop(&resized, crop_side)
}

/// Multi-scale center-crop prediction.
pub fn tta_predict(
    params: &ModelParams,
    image: &Image,
    cfg: &TtaConfig,
) -> Result<ProbabilityVector> {
    cfg.validate()?;
    if cfg.crop_side != params.input_side() {
        return Err(Error::Config(format!(
            "tta crop side {} does not match model input side {}",
            cfg.crop_side,
            params.input_side()
        )));
    }
    let views = cfg.resize_sides.len() as f64;
    match cfg.mode {
        TtaMode::AverageFeatures => {
            let mut mean = vec![0.0; params.feature_dim()];
            for &side in &cfg.resize_sides {
                let (features, _) = params.forward(&view(image, side, cfg.crop_side)?)?;
                mean.iter_mut().zip(&features).for_each(|(m, f)| *m += f);
            }
            mean.iter_mut().for_each(|m| *m /= views);
            softmax_slice(&params.head_logits(&mean))
        }
        TtaMode::AverageProbs => {
            let mut mean = vec![0.0; params.classes()];
            for &side in &cfg.resize_sides {
                let (_, logits) = params.forward(&view(image, side, cfg.crop_side)?)?;
                let p = softmax_slice(logits.as_slice())?;
                mean.iter_mut().zip(p.as_slice()).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= views);
            Ok(ProbabilityVector::from_vec_unchecked(mean))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::init_model;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..side * side).map(|_| rng.random::<f64>()).collect();
        Image::new(side, side, data).unwrap()
    }

    #[test]
    fn identity_resize() {
        let img = random_image(7, 1);
        assert_eq!(bilinear_resize(&img, 7).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(5, 5, 0.37);
        for side in [2, 3, 9, 17] {
            let out = bilinear_resize(&img, side).unwrap();
            assert!(out.pixels().iter().all(|v| *v == 0.37));
        }
    }

    #[test]
    fn two_by_two_to_three_by_three() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = bilinear_resize(&img, 3).unwrap();
        for row in 0..3 {
            assert_eq!(out.get(row, 0), 0.0);
            assert_eq!(out.get(row, 1), 0.5);
            assert_eq!(out.get(row, 2), 1.0);
        }
    }

    #[test]
    fn resize_rejects_degenerate_sizes() {
        assert!(bilinear_resize(&Image::filled(1, 1, 0.0), 4).is_err());
        assert!(bilinear_resize(&Image::filled(4, 4, 0.0), 1).is_err());
    }

    #[test]
    fn crop_examples() {
        let img = random_image(6, 2);
        assert_eq!(center_crop(&img, 6).unwrap(), img);
        let c = center_crop(&img, 4).unwrap();
        for r in 0..4 {
            for col in 0..4 {
                assert_eq!(c.get(r, col), img.get(r + 1, col + 1));
            }
        }
        let img5 = random_image(5, 3);
        let c = center_crop(&img5, 4).unwrap();
        assert_eq!(c.get(0, 0), img5.get(0, 0));
        assert!(center_crop(&img5, 6).is_err());
        assert!(center_crop(&img5, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TtaConfig::default().validate().is_ok());
        assert!(TtaConfig::large_scales().validate().is_ok());
        let empty = TtaConfig {
            resize_sides: vec![],
            ..TtaConfig::default()
        };
        assert!(matches!(empty.validate(), Err(Error::Config(_))));
        let small = TtaConfig {
            resize_sides: vec![20],
            ..TtaConfig::default()
        };
        assert!(small.validate().is_err());
    }

    #[test]
    fn tta_checks_model_input_side() {
        let params = init_model(20, 0, 3, 1).unwrap();
        let img = random_image(32, 4);
        assert!(matches!(
            tta_predict(&params, &img, &TtaConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_identity_view_is_plain_inference() {
        let params = init_model(8, 5, 4, 9).unwrap();
        let img = random_image(8, 5);
        let (_, logits) = params.forward(&img).unwrap();
        let plain = softmax_slice(logits.as_slice()).unwrap();
        for mode in [TtaMode::AverageFeatures, TtaMode::AverageProbs] {
            let p = tta_predict(&params, &img, &TtaConfig::single(8, 8, mode)).unwrap();
            assert_eq!(p, plain);
        }
    }

    #[test]
    fn identical_sides_equal_single_view() {
        let params = init_model(6, 4, 3, 2).unwrap();
        let img = random_image(10, 6);
        for mode in [TtaMode::AverageFeatures, TtaMode::AverageProbs] {
            let one = tta_predict(&params, &img, &TtaConfig::single(9, 6, mode)).unwrap();
            let many = TtaConfig {
                resize_sides: vec![9, 9, 9],
                crop_side: 6,
                mode,
            };
            let p = tta_predict(&params, &img, &many).unwrap();
            for (a, b) in p.as_slice().iter().zip(one.as_slice()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn average_probs_matches_per_view_mean() {
        let params = init_model(6, 3, 4, 8).unwrap();
        let img = random_image(9, 7);
        let sides = [7, 9, 12];
        let mut oracle = [0.0; 4];
        for side in sides {
            let v = view(&img, side, 6).unwrap();
            let (_, z) = params.forward(&v).unwrap();
            let p = softmax_slice(z.as_slice()).unwrap();
            for k in 0..4 {
                oracle[k] += p[k] / 3.0;
            }
        }
        let cfg = TtaConfig {
            resize_sides: sides.to_vec(),
            crop_side: 6,
            mode: TtaMode::AverageProbs,
        };
        let p = tta_predict(&params, &img, &cfg).unwrap();
        for k in 0..4 {
            assert!((p[k] - oracle[k]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn resize_stays_within_input_range(
            src in 2usize..9,
            dst in 2usize..20,
            seed in 0u64..1000,
        ) {
            let img = random_image(src, seed);
            let lo = img.pixels().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = img.pixels().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = bilinear_resize(&img, dst).unwrap();
            prop_assert!(out.pixels().iter().all(|v| *v >= lo && *v <= hi));
        }

        #[test]
        fn tta_is_view_order_invariant(seed in 0u64..200, mode_probs in any::<bool>()) {
            let mode = if mode_probs { TtaMode::AverageProbs } else { TtaMode::AverageFeatures };
            let params = init_model(6, 4, 3, seed).unwrap();
            let img = random_image(8, seed + 1);
            let fwd = TtaConfig { resize_sides: vec![6, 7, 8, 11], crop_side: 6, mode };
            let rev = TtaConfig { resize_sides: vec![11, 8, 7, 6], crop_side: 6, mode };
            let a = tta_predict(&params, &img, &fwd).unwrap();
            let b = tta_predict(&params, &img, &rev).unwrap();
            prop_assert!(ProbabilityVector::new(a.as_slice().to_vec()).is_ok());
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
