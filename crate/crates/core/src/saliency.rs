//! Binary salient-object masks for infrared images.
//!
//! The mask gates the content loss: inside it the fused image is pulled
//! towards infrared intensities, outside it towards visible gradients.

use std::path::{Path, PathBuf};

use crate::dataio::{load_gray, NormalizedImage, RawImage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default intensity quantile for [`MaskMethod::Quantile`].
pub const DEFAULT_QUANTILE: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SaliencyMask {
    height: usize,
    width: usize,
    mask: Vec<u8>,
}

impl SaliencyMask {
    pub fn new(height: usize, width: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} mask with {} entries",
                mask.len()
            )));
        }
        if let Some(&bad) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinaryMask(bad as f64));
        }
        Ok(Self { height, width, mask })
    }

    /// Mask from real values that must each be exactly 0 or 1.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let mask = values
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                v => Err(Error::NonBinaryMask(v)),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(height, width, mask)
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            mask: vec![value as u8; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.mask
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.mask.iter().map(|&v| v as usize).sum()
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if y + height > self.height || x + width > self.width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "mask crop {height}x{width}@({y},{x}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mask = (y..y + height)
            .flat_map(|r| self.mask[r * self.width + x..r * self.width + x + width].iter().copied())
            .collect();
        Self::new(height, width, mask)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| T::of(self.mask[i] as f64))
    }

    /// Reads an 8-bit mask image: 0 maps to 0, 255 to 1, anything else is
    /// rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = load_gray(path)?;
        let mask = raw
            .pixels()
            .iter()
            .map(|&p| match p {
                0 => Ok(0),
                255 => Ok(1),
                v => Err(Error::NonBinaryMask(v as f64)),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(raw.height(), raw.width(), mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        RawImage::new(
            self.height,
            self.width,
            self.mask.iter().map(|&v| v * 255).collect(),
        )?
        .save(path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskMethod {
    /// Pixels brighter than the `q`-quantile, cleaned by 3x3 opening then
    /// closing.
    Quantile { q: f64 },
    /// Otsu threshold on the 256-bin histogram, same morphology.
    Otsu,
    /// User-supplied 0/255 mask image.
    External(PathBuf),
}

impl Default for MaskMethod {
    fn default() -> Self {
        MaskMethod::Quantile {
            q: DEFAULT_QUANTILE,
        }
    }
}

pub fn validate_mask<T: Scalar>(mask: &SaliencyMask, ir: &NormalizedImage<T>) -> Result<()> {
    if let Some(&bad) = mask.mask.iter().find(|&&v| v > 1) {
        return Err(Error::NonBinaryMask(bad as f64));
    }
    if mask.dims() != ir.dims() {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs image {:?}",
            mask.dims(),
            ir.dims()
        )));
    }
    Ok(())
}

/// `q`-quantile of the values (lower nearest rank).
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q * (sorted.len() - 1) as f64).floor() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

/// Raw quantile threshold, before morphology. Selects pixels strictly above
/// the quantile; when nothing exceeds it (a flat top, including constant
/// images) the pixels at the maximum are selected instead.
pub fn quantile_threshold<T: Scalar>(ir: &NormalizedImage<T>, q: f64) -> Result<SaliencyMask> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("mask quantile {q} outside [0, 1]")));
    }
    let values: Vec<f64> = ir.pixels().iter().map(|p| p.to_f64_lossy()).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::OutOfRange("non-finite pixel in mask input".into()));
    }
    let t = quantile(&values, q);
    let above: Vec<u8> = values.iter().map(|&v| (v > t) as u8).collect();
    let mask = if above.contains(&1) {
        above
    } else {
        values.iter().map(|&v| (v >= t) as u8).collect()
    };
    SaliencyMask::new(ir.height(), ir.width(), mask)
}

fn morph(mask: &SaliencyMask, dilate: bool) -> SaliencyMask {
    let (h, w) = mask.dims();
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let v = mask.mask[ny * w + nx] == 1;
                    acc = if dilate { acc || v } else { acc && v };
                }
            }
            out[y * w + x] = acc as u8;
        }
    }
    SaliencyMask {
        height: h,
        width: w,
        mask: out,
    }
}

/// 3x3 erosion; out-of-image neighbours are ignored.
pub fn erode(mask: &SaliencyMask) -> SaliencyMask {
    morph(mask, false)
}

/// 3x3 dilation; out-of-image neighbours are ignored.
pub fn dilate(mask: &SaliencyMask) -> SaliencyMask {
    morph(mask, true)
}

/// Opening followed by closing.
pub fn open_close(mask: &SaliencyMask) -> SaliencyMask {
    let opened = dilate(&erode(mask));
    erode(&dilate(&opened))
}

fn histogram256<T: Scalar>(ir: &NormalizedImage<T>) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &u in ir.to_unit().pixels() {
        hist[(u * 255.0).round().clamp(0.0, 255.0) as usize] += 1;
    }
    hist
}

/// Otsu's threshold bin: pixels in bins above it are foreground. `None`
/// when the histogram has a single occupied bin.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t);
        }
    }
    Some(best.1)
}

/// Builds the mask for one infrared image. A constant image under
/// [`MaskMethod::Otsu`] yields [`Error::DegenerateImage`]; see
/// [`generate_mask_or_empty`] for the all-zero fallback.
pub fn generate_mask<T: Scalar>(ir: &NormalizedImage<T>, method: &MaskMethod) -> Result<SaliencyMask> {
    let mask = match method {
        MaskMethod::Quantile { q } => open_close(&quantile_threshold(ir, *q)?),
        MaskMethod::Otsu => {
            let hist = histogram256(ir);
            let t = otsu_threshold(&hist)
                .ok_or_else(|| Error::DegenerateImage("constant image has no Otsu threshold".into()))?;
            let mask = ir
                .to_unit()
                .pixels()
                .iter()
                .map(|&u| ((u * 255.0).round() as usize > t) as u8)
                .collect();
            open_close(&SaliencyMask::new(ir.height(), ir.width(), mask)?)
        }
        MaskMethod::External(path) => SaliencyMask::load(path)?,
    };
    validate_mask(&mask, ir)?;
    Ok(mask)
}

/// Like [`generate_mask`], but a degenerate image produces an all-zero mask
/// and a logged warning instead of an error.
pub fn generate_mask_or_empty<T: Scalar>(ir: &NormalizedImage<T>, method: &MaskMethod) -> Result<SaliencyMask> {
    match generate_mask(ir, method) {
        Err(Error::DegenerateImage(reason)) => {
            log::warn!("saliency mask fallback to empty mask: {reason}");
            Ok(SaliencyMask::filled(ir.height(), ir.width(), false))
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ValueRange;
    use proptest::prelude::*;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> NormalizedImage<f64> {
        let px = (0..h * w).map(|i| f(i / w, i % w)).collect();
        NormalizedImage::new(h, w, px, ValueRange::Symmetric).unwrap()
    }

    #[test]
    fn constant_image_quantile_selects_everything() {
        let m = generate_mask(&image(16, 16, |_, _| 0.2), &MaskMethod::default()).unwrap();
        assert_eq!(m.count(), 256);
    }

    #[test]
    fn bright_square_survives_threshold_and_morphology() {
        let inside = |y: usize, x: usize| (40..50).contains(&y) && (70..80).contains(&x);
        let img = image(128, 128, |y, x| if inside(y, x) { 0.9 } else { 0.0 });
        let m = generate_mask(&img, &MaskMethod::Quantile { q: 0.99 }).unwrap();
        // Reference: hand-applied opening/closing leaves a 10x10 square unchanged.
        for y in 0..128 {
            for x in 0..128 {
                assert_eq!(m.get(y, x), inside(y, x), "({y},{x})");
            }
        }
    }

    #[test]
    fn opening_removes_isolated_pixels_and_closing_fills_holes() {
        let mut raw = vec![0u8; 256];
        raw[0] = 1; // speck
        for y in 3..13 {
            for x in 3..13 {
                raw[y * 16 + x] = 1;
            }
        }
        raw[8 * 16 + 8] = 0; // hole
        let cleaned = open_close(&SaliencyMask::new(16, 16, raw).unwrap());
        assert!(!cleaned.get(0, 0));
        assert!(cleaned.get(8, 8));
        assert_eq!(cleaned.count(), 100);
    }

    #[test]
    fn otsu_splits_bimodal_and_rejects_constant() {
        let img = image(8, 8, |y, _| if y < 4 { -0.8 } else { 0.6 });
        let m = generate_mask(&img, &MaskMethod::Otsu).unwrap();
        assert_eq!(m.count(), 32);
        assert!((4..8).all(|y| m.get(y, 3)));

        let flat = image(8, 8, |_, _| 0.1);
        assert!(matches!(generate_mask(&flat, &MaskMethod::Otsu), Err(Error::DegenerateImage(_))));
        assert_eq!(generate_mask_or_empty(&flat, &MaskMethod::Otsu).unwrap().count(), 0);
    }

    #[test]
    fn validation_errors() {
        let img = image(128, 128, |_, _| 0.0);
        assert!(validate_mask(&SaliencyMask::filled(128, 128, true), &img).is_ok());
        assert!(matches!(
            SaliencyMask::from_values(1, 2, &[0.0, 0.5]),
            Err(Error::NonBinaryMask(v)) if v == 0.5
        ));
        assert!(matches!(
            validate_mask(&SaliencyMask::filled(64, 64, true), &img),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn external_mask_file_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.png");
        let bad = dir.path().join("bad.png");
        RawImage::new(2, 2, vec![0, 255, 255, 0]).unwrap().save(&good).unwrap();
        RawImage::new(2, 2, vec![0, 255, 128, 0]).unwrap().save(&bad).unwrap();
        let img = image(2, 2, |_, _| 0.0);
        let m = generate_mask(&img, &MaskMethod::External(good)).unwrap();
        assert_eq!(m.data(), &[0, 1, 1, 0]);
        assert!(matches!(
            generate_mask(&img, &MaskMethod::External(bad)),
            Err(Error::NonBinaryMask(v)) if v == 128.0
        ));
    }

    proptest! {
        #[test]
        fn output_is_always_binary(px in proptest::collection::vec(-1.0f64..=1.0, 64), q in 0.0f64..=1.0) {
            let img = NormalizedImage::new(8, 8, px, ValueRange::Symmetric).unwrap();
            let m = generate_mask(&img, &MaskMethod::Quantile { q }).unwrap();
            prop_assert!(m.data().iter().all(|&v| v <= 1));
        }

        #[test]
        fn binary_input_at_half_quantile_gives_binary_mask(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let px = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let img = NormalizedImage::new(8, 8, px, ValueRange::Symmetric).unwrap();
            let m = generate_mask(&img, &MaskMethod::Quantile { q: 0.5 }).unwrap();
            prop_assert!(m.data().iter().all(|&v| v <= 1));
        }

        #[test]
        fn raising_quantile_never_adds_pixels(
            px in proptest::collection::vec(-1.0f64..=1.0, 100),
            q1 in 0.0f64..=1.0,
            dq in 0.0f64..=1.0,
        ) {
            let q2 = (q1 + dq).min(1.0);
            let img = NormalizedImage::new(10, 10, px, ValueRange::Symmetric).unwrap();
            let lo = quantile_threshold(&img, q1).unwrap();
            let hi = quantile_threshold(&img, q2).unwrap();
            for (a, b) in lo.data().iter().zip(hi.data()) {
                prop_assert!(b <= a);
            }
        }
    }
}
