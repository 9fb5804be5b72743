//! Image loading, intensity normalization, training patch extraction and
//! test-pair sampling.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::saliency::SaliencyMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default training patch edge.
pub const PATCH_SIZE: usize = 128;
/// Default sliding-window step.
pub const PATCH_STRIDE: usize = 16;

/// File extensions accepted when scanning pair directories.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp", "tif", "tiff"];

/// 8-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::Shape("raw buffer does not match dimensions".into()))?;
        img.save(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ValueRange {
    /// `[0, 1]`, used by the quality metrics.
    Unit,
    /// `[-1, 1]`, the network domain.
    Symmetric,
}

/// Real-valued single-channel image with a declared value range.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedImage<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
    range: ValueRange,
}

impl<T: Scalar> NormalizedImage<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>, range: ValueRange) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image with {} pixels",
                pixels.len()
            )));
        }
        let (lo, hi) = match range {
            ValueRange::Unit => (T::zero(), T::one()),
            ValueRange::Symmetric => (-T::one(), T::one()),
        };
        if let Some(bad) = pixels.iter().find(|&&p| !p.is_finite() || p < lo || p > hi) {
            return Err(Error::OutOfRange(format!("pixel value {bad} for {range:?} image")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            range,
        })
    }

    /// Maps 8-bit intensities affinely onto `[-1, 1]`.
    pub fn from_raw(raw: &RawImage) -> Self {
        Self {
            height: raw.height,
            width: raw.width,
            pixels: raw
                .pixels
                .iter()
                .map(|&p| T::of(p as f64 / 127.5 - 1.0))
                .collect(),
            range: ValueRange::Symmetric,
        }
    }

    /// Image from a `[h, w]`, `[1, h, w]` or `[1, 1, h, w]` tensor; values are
    /// clamped into `range`.
    pub fn from_tensor(t: &Tensor<T>, range: ValueRange) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            s => return Err(Error::Shape(format!("not a single image: {s:?}"))),
        };
        if !t.all_finite() {
            return Err(Error::NonFinite("image tensor".into()));
        }
        let lo = match range {
            ValueRange::Unit => T::zero(),
            ValueRange::Symmetric => -T::one(),
        };
        let pixels = t.data().iter().map(|&v| v.max(lo).min(T::one())).collect();
        Self::new(h, w, pixels, range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    /// Inverse of [`NormalizedImage::from_raw`], rounding to the nearest level.
    pub fn to_raw(&self) -> RawImage {
        let pixels = self
            .to_unit()
            .pixels
            .iter()
            .map(|&u| (u * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RawImage {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    /// `[0, 1]` copy in double precision.
    pub fn to_unit(&self) -> NormalizedImage<f64> {
        let pixels = self
            .pixels
            .iter()
            .map(|&p| {
                let v = p.to_f64_lossy();
                match self.range {
                    ValueRange::Unit => v,
                    ValueRange::Symmetric => ((v + 1.0) * 0.5).clamp(0.0, 1.0),
                }
            })
            .collect();
        NormalizedImage {
            height: self.height,
            width: self.width,
            pixels,
            range: ValueRange::Unit,
        }
    }

    /// `[-1, 1]` copy.
    pub fn to_symmetric(&self) -> Self {
        match self.range {
            ValueRange::Symmetric => self.clone(),
            ValueRange::Unit => Self {
                height: self.height,
                width: self.width,
                pixels: self
                    .pixels
                    .iter()
                    .map(|&p| p * T::of(2.0) - T::one())
                    .collect(),
                range: ValueRange::Symmetric,
            },
        }
    }

    /// `[1, 1, h, w]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_parts(vec![1, 1, self.height, self.width], self.pixels.clone())
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if y + height > self.height || x + width > self.width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({y},{x}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width);
        for row in y..y + height {
            let start = row * self.width + x;
            pixels.extend_from_slice(&self.pixels[start..start + width]);
        }
        Ok(Self {
            height,
            width,
            pixels,
            range: self.range,
        })
    }
}

/// Registered infrared/visible pair sharing one size.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<T> {
    pub infrared: NormalizedImage<T>,
    pub visible: NormalizedImage<T>,
    pub id: String,
}

impl<T: Scalar> ImagePair<T> {
    pub fn new(infrared: NormalizedImage<T>, visible: NormalizedImage<T>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if infrared.dims() != visible.dims() {
            return Err(Error::DimensionMismatch(format!(
                "pair {id}: infrared {:?} vs visible {:?} (unregistered pair?)",
                infrared.dims(),
                visible.dims()
            )));
        }
        Ok(Self {
            infrared,
            visible,
            id,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.infrared.dims()
    }
}

/// Decodes an image file to 8-bit luminance. Colour inputs are reduced with
/// the BT.601 weights.
pub fn load_gray(path: &Path) -> Result<RawImage> {
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| decode_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let pixels = if img.color().has_color() {
        img.to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
                    .round()
                    .clamp(0.0, 255.0) as u8
            })
            .collect()
    } else {
        img.to_luma8().into_raw()
    };
    RawImage::new(height, width, pixels)
}

pub fn load_image_pair<T: Scalar>(ir_path: &Path, vis_path: &Path) -> Result<ImagePair<T>> {
    let ir = load_gray(ir_path)?;
    let vis = load_gray(vis_path)?;
    let id = ir_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImagePair::new(NormalizedImage::from_raw(&ir), NormalizedImage::from_raw(&vis), id)
}

/// Matched files of a directory holding `ir/` and `vis/` subdirectories.
#[derive(Clone, Debug, Default)]
pub struct PairListing {
    /// `(file name, infrared path, visible path)` in file-name order.
    pub pairs: Vec<(String, PathBuf, PathBuf)>,
    /// Infrared files without a visible counterpart.
    pub missing_visible: Vec<String>,
}

fn image_files(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

pub fn list_pairs(ir_dir: &Path, vis_dir: &Path) -> Result<PairListing> {
    let mut listing = PairListing::default();
    for name in image_files(ir_dir)? {
        let vis = vis_dir.join(&name);
        if vis.is_file() {
            listing.pairs.push((name.clone(), ir_dir.join(&name), vis));
        } else {
            listing.missing_visible.push(name);
        }
    }
    Ok(listing)
}

/// Lists `root/ir` against `root/vis`.
pub fn list_pair_dir(root: &Path) -> Result<PairListing> {
    list_pairs(&root.join("ir"), &root.join("vis"))
}

/// Loads every complete pair under `root/ir` and `root/vis`.
pub fn load_pair_dir<T: Scalar>(root: &Path) -> Result<Vec<ImagePair<T>>> {
    list_pair_dir(root)?
        .pairs
        .iter()
        .map(|(_, ir, vis)| load_image_pair(ir, vis))
        .collect()
}

/// Number of top-left anchored windows of one axis.
fn windows_along(extent: usize, patch: usize, stride: usize) -> usize {
    if extent < patch {
        0
    } else {
        (extent - patch) / stride + 1
    }
}

/// Patches produced from an `h x w` source.
pub fn patch_count(height: usize, width: usize, patch: usize, stride: usize) -> usize {
    windows_along(height, patch, stride) * windows_along(width, patch, stride)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchWindow {
    pub source: usize,
    pub y: usize,
    pub x: usize,
}

/// Sliding-window training patches. Windows reference their source pair and
/// are cropped on demand; the order is source order, then row-major window
/// position.
#[derive(Clone, Debug)]
pub struct PatchSet<T> {
    sources: Vec<Arc<ImagePair<T>>>,
    windows: Vec<PatchWindow>,
    patch_size: usize,
    stride: usize,
    masks: Option<Vec<SaliencyMask>>,
}

impl<T: Scalar> PatchSet<T> {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn windows(&self) -> &[PatchWindow] {
        &self.windows
    }

    pub fn source_id(&self, i: usize) -> &str {
        &self.sources[self.windows[i].source].id
    }

    pub fn source_ids(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.source_id(i).to_string()).collect()
    }

    pub fn patch(&self, i: usize) -> Result<ImagePair<T>> {
        let win = self
            .windows
            .get(i)
            .ok_or_else(|| Error::OutOfRange(format!("patch index {i}")))?;
        let src = &self.sources[win.source];
        let p = self.patch_size;
        ImagePair::new(
            src.infrared.crop(win.y, win.x, p, p)?,
            src.visible.crop(win.y, win.x, p, p)?,
            format!("{}@{},{}", src.id, win.y, win.x),
        )
    }

    pub fn patches(&self) -> impl Iterator<Item = ImagePair<T>> + '_ {
        (0..self.len()).map(|i| self.patch(i).expect("window inside source"))
    }

    /// Keeps the first `n` patches (in order).
    pub fn truncate(&mut self, n: usize) {
        self.windows.truncate(n);
        if let Some(m) = self.masks.as_mut() {
            m.truncate(n);
        }
    }

    /// Keeps the listed patches, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::OutOfRange(format!("patch index {bad}")));
        }
        Ok(Self {
            sources: self.sources.clone(),
            windows: indices.iter().map(|&i| self.windows[i]).collect(),
            patch_size: self.patch_size,
            stride: self.stride,
            masks: self
                .masks
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i].clone()).collect()),
        })
    }

    pub fn masks(&self) -> Option<&[SaliencyMask]> {
        self.masks.as_deref()
    }

    pub fn mask(&self, i: usize) -> Option<&SaliencyMask> {
        self.masks.as_ref().and_then(|m| m.get(i))
    }

    /// Caches one mask per patch.
    pub fn attach_masks(&mut self, masks: Vec<SaliencyMask>) -> Result<()> {
        if masks.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} masks for {} patches",
                masks.len(),
                self.len()
            )));
        }
        if let Some(bad) = masks.iter().find(|m| m.dims() != (self.patch_size, self.patch_size)) {
            return Err(Error::DimensionMismatch(format!(
                "mask {:?} for {p}x{p} patches",
                bad.dims(),
                p = self.patch_size
            )));
        }
        self.masks = Some(masks);
        Ok(())
    }
}

pub fn extract_patches<T: Scalar>(pairs: &[ImagePair<T>], patch_size: usize, stride: usize) -> Result<PatchSet<T>> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    let mut windows = Vec::new();
    for (source, pair) in pairs.iter().enumerate() {
        let (h, w) = pair.dims();
        if h < patch_size || w < patch_size {
            return Err(Error::ImageTooSmall {
                id: pair.id.clone(),
                height: h,
                width: w,
                patch: patch_size,
            });
        }
        for wy in 0..windows_along(h, patch_size, stride) {
            for wx in 0..windows_along(w, patch_size, stride) {
                windows.push(PatchWindow {
                    source,
                    y: wy * stride,
                    x: wx * stride,
                });
            }
        }
    }
    Ok(PatchSet {
        sources: pairs.iter().cloned().map(Arc::new).collect(),
        windows,
        patch_size,
        stride,
        masks: None,
    })
}

/// Systematic sampling: a seeded random start in `[0, n_total)`, then every
/// `n_total / n`-th index, wrapping around the end.
pub fn systematic_indices(n_total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n_total < n {
        return Err(Error::InsufficientPairs {
            needed: n.max(1),
            available: n_total,
        });
    }
    let interval = n_total / n;
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..n_total);
    Ok((0..n).map(|i| (start + i * interval) % n_total).collect())
}

pub fn sample_test_pairs<T: Scalar>(dataset: &[ImagePair<T>], n: usize, seed: u64) -> Result<Vec<ImagePair<T>>> {
    Ok(systematic_indices(dataset.len(), n, seed)?
        .into_iter()
        .map(|i| dataset[i].clone())
        .collect())
}
