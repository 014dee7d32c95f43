//! Dataset ingestion, procedural toy datasets, and batching.
//!
//! Images live in memory as (3, H, W) tensors in [-1, 1]; 8-bit sources map
//! linearly (0 -> -1, 255 -> +1) and the map inverts exactly on the 8-bit
//! lattice. Folder datasets are center-cropped square and resized; toy
//! datasets are generated procedurally with strong global structure so that
//! extrapolation from an interior crop is learnable at desk scale.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Linear 8-bit -> [-1, 1] map.
pub fn normalize_u8(v: u8) -> f32 {
    f32::from(v) * (2.0 / 255.0) - 1.0
}

/// Inverse of [`normalize_u8`], rounding to the nearest 8-bit level.
pub fn denormalize_to_u8(v: f32) -> u8 {
    ((v + 1.0) * (255.0 / 2.0)).round().clamp(0.0, 255.0) as u8
}

/// A batch of images plus the ids they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub data: Array4<f32>,
    pub source_ids: Vec<String>,
}

impl ImageBatch {
    /// Checks the type invariants: finite values in [-1,1], 3 channels,
    /// square images at `resolution`, one id per image.
    pub fn validate(&self, resolution: usize) -> Result<()> {
        let (n, c, h, w) = self.data.dim();
        if c != 3 || h != resolution || w != resolution {
            return Err(Error::ShapeMismatch(format!(
                "batch is {c}x{h}x{w}, expected 3x{resolution}x{resolution}"
            )));
        }
        if n != self.source_ids.len() {
            return Err(Error::Data(format!(
                "{n} images but {} source ids",
                self.source_ids.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite() || !(-1.0..=1.0).contains(v)) {
            return Err(Error::Data("batch values must be finite and within [-1, 1]".into()));
        }
        Ok(())
    }
}

/// An immutable, deterministically ordered image collection.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    images: Vec<Array3<f32>>,
    ids: Vec<String>,
    resolution: usize,
}

impl DatasetHandle {
    /// Builds a handle from in-memory images (one id per image).
    pub fn from_images(
        images: Vec<Array3<f32>>,
        ids: Vec<String>,
        resolution: usize,
    ) -> Result<DatasetHandle> {
        if images.is_empty() {
            return Err(Error::Data("dataset needs at least one image".into()));
        }
        if images.len() != ids.len() {
            return Err(Error::Data(format!(
                "{} images but {} ids",
                images.len(),
                ids.len()
            )));
        }
        for (img, id) in images.iter().zip(&ids) {
            if img.dim() != (3, resolution, resolution) {
                return Err(Error::ShapeMismatch(format!(
                    "image '{id}' is {:?}, expected (3, {resolution}, {resolution})",
                    img.dim()
                )));
            }
            if img.iter().any(|v| !v.is_finite() || !(-1.0..=1.0).contains(v)) {
                return Err(Error::Data(format!(
                    "image '{id}' has values outside [-1, 1]"
                )));
            }
        }
        Ok(DatasetHandle { images, ids, resolution })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn image(&self, i: usize) -> &Array3<f32> {
        &self.images[i]
    }

    /// Deterministic index order for one epoch.
    pub fn epoch_order(&self, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(shuffle_seed, "epoch-shuffle", epoch));
        order
    }

    /// Stacks the given indices into one batch.
    pub fn gather(&self, indices: &[usize]) -> ImageBatch {
        assert!(!indices.is_empty(), "gather of zero indices");
        let (c, h, w) = self.images[0].dim();
        let mut data = Array4::<f32>::zeros((indices.len(), c, h, w));
        let mut ids = Vec::with_capacity(indices.len());
        for (slot, &i) in indices.iter().enumerate() {
            data.index_axis_mut(ndarray::Axis(0), slot).assign(&self.images[i]);
            ids.push(self.ids[i].clone());
        }
        ImageBatch { data, source_ids: ids }
    }

    /// Deterministic disjoint split; both halves keep at least one image.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(DatasetHandle, DatasetHandle)> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
        }
        if self.len() < 2 {
            return Err(Error::Data("cannot split a dataset with fewer than 2 images".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, "split", 0));
        let n_train = ((self.len() as f64 * ratio).round() as usize).clamp(1, self.len() - 1);
        let pick = |idx: &[usize]| DatasetHandle {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            resolution: self.resolution,
        };
        Ok((pick(&order[..n_train]), pick(&order[n_train..])))
    }
}

/// Loads every decodable PNG/JPEG under `root` (non-recursive, name-sorted),
/// center-crops square, resizes to `resolution`, normalizes to [-1, 1], and
/// returns a deterministic (train, test) split.
pub fn load_folder(
    root: &Path,
    resolution: usize,
    split_ratio: f64,
    seed: u64,
) -> Result<(DatasetHandle, DatasetHandle)> {
    let full = load_folder_all(root, resolution)?;
    if full.len() < 2 {
        return Err(Error::Data(format!(
            "{} usable images under {}; need at least 2",
            full.len(),
            root.display()
        )));
    }
    full.split(split_ratio, seed)
}

/// Loads a folder without splitting (evaluation and inference runs).
pub fn load_folder_all(root: &Path, resolution: usize) -> Result<DatasetHandle> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    let mut images = Vec::new();
    let mut ids = Vec::new();
    for path in files {
        match image::open(&path) {
            Ok(img) => {
                images.push(decode_to_tensor(img, resolution));
                ids.push(
                    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                );
            }
            Err(e) => log::warn!("skipping unreadable image {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no usable images under {}", root.display())));
    }
    Ok(DatasetHandle { images, ids, resolution })
}

/// Decodes one image file to a normalized (3, R, R) tensor, center-cropped
/// and resized like the folder loader.
pub fn load_image_tensor(path: &Path, resolution: usize) -> Result<Array3<f32>> {
    Ok(decode_to_tensor(image::open(path)?, resolution))
}

/// Writes a (3, H, W) tensor in [-1, 1] as an 8-bit PNG.
pub fn save_image_png(img: &Array3<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("save_image_png: {c} channels, expected 3")));
    }
    let out = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([
            denormalize_to_u8(img[(0, y as usize, x as usize)]),
            denormalize_to_u8(img[(1, y as usize, x as usize)]),
            denormalize_to_u8(img[(2, y as usize, x as usize)]),
        ])
    });
    out.save(path)?;
    Ok(())
}

fn decode_to_tensor(img: image::DynamicImage, resolution: usize) -> Array3<f32> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = cropped.resize_exact(
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Triangle,
    );
    let rgb = resized.to_rgb8();
    Array3::from_shape_fn((3, resolution, resolution), |(c, y, x)| {
        normalize_u8(rgb.get_pixel(x as u32, y as u32)[c])
    })
}

/// Procedural dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    Gradients,
    Checkers,
    Blobs,
}

impl FromStr for ToyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(ToyKind::Gradients),
            "checkers" => Ok(ToyKind::Checkers),
            "blobs" => Ok(ToyKind::Blobs),
            other => Err(Error::Data(format!(
                "unknown toy dataset kind '{other}' (expected gradients|checkers|blobs)"
            ))),
        }
    }
}

impl std::fmt::Display for ToyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ToyKind::Gradients => "gradients",
            ToyKind::Checkers => "checkers",
            ToyKind::Blobs => "blobs",
        };
        f.write_str(s)
    }
}

/// Generates `n` procedural images, deterministic per `(kind, seed)`.
pub fn synth_toy_dataset(
    kind: ToyKind,
    n: usize,
    resolution: usize,
    seed: u64,
) -> Result<DatasetHandle> {
    if n < 2 {
        return Err(Error::Data(format!("toy dataset needs n >= 2, got {n}")));
    }
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let mut images = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let mut stream = rng::stream(seed, &format!("synth-{kind}"), i as u64);
        let img = match kind {
            ToyKind::Gradients => gen_gradient(resolution, &mut stream),
            ToyKind::Checkers => gen_checkers(resolution, &mut stream),
            ToyKind::Blobs => gen_blobs(resolution, &mut stream),
        };
        images.push(img);
        ids.push(format!("{kind}-{seed}-{i:05}"));
    }
    Ok(DatasetHandle { images, ids, resolution })
}

fn rand_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]
}

fn gen_gradient<R: Rng + ?Sized>(res: usize, rng: &mut R) -> Array3<f32> {
    let theta = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let c0 = rand_color(rng);
    let c1 = rand_color(rng);
    // Projection range over the image corners, for exact [0,1] spread.
    let corners = [(0.0, 0.0), (res as f32 - 1.0, 0.0), (0.0, res as f32 - 1.0), (res as f32 - 1.0, res as f32 - 1.0)];
    let proj = |x: f32, y: f32| x * dx + y * dy;
    let tmin = corners.iter().map(|&(x, y)| proj(x, y)).fold(f32::INFINITY, f32::min);
    let tmax = corners.iter().map(|&(x, y)| proj(x, y)).fold(f32::NEG_INFINITY, f32::max);
    let span = (tmax - tmin).max(1e-6);
    Array3::from_shape_fn((3, res, res), |(c, y, x)| {
        let t = (proj(x as f32, y as f32) - tmin) / span;
        (c0[c] + t * (c1[c] - c0[c])).clamp(-1.0, 1.0)
    })
}

fn gen_checkers<R: Rng + ?Sized>(res: usize, rng: &mut R) -> Array3<f32> {
    let p_lo = (res / 8).max(2);
    let p_hi = (res / 3).max(p_lo + 1);
    let period = rng.gen_range(p_lo..=p_hi);
    let phase_x = rng.gen_range(0..period);
    let phase_y = rng.gen_range(0..period);
    let c0 = rand_color(rng);
    let c1 = rand_color(rng);
    Array3::from_shape_fn((3, res, res), |(c, y, x)| {
        let cell = ((x + phase_x) / period + (y + phase_y) / period) % 2;
        if cell == 0 {
            c0[c]
        } else {
            c1[c]
        }
    })
}

fn gen_blobs<R: Rng + ?Sized>(res: usize, rng: &mut R) -> Array3<f32> {
    let bg = rand_color(rng);
    let count = rng.gen_range(2..=4);
    let blobs: Vec<([f32; 3], f32, f32, f32)> = (0..count)
        .map(|_| {
            let color = rand_color(rng);
            let cx = rng.gen_range(0.2..0.8) * res as f32;
            let cy = rng.gen_range(0.2..0.8) * res as f32;
            let sigma = rng.gen_range(0.10..0.25) * res as f32;
            (color, cx, cy, sigma)
        })
        .collect();
    Array3::from_shape_fn((3, res, res), |(c, y, x)| {
        let mut v = bg[c];
        for (color, cx, cy, sigma) in &blobs {
            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
            let w = (-d2 / (2.0 * sigma * sigma)).exp();
            v += w * (color[c] - bg[c]);
        }
        v.clamp(-1.0, 1.0)
    })
}

/// Iterator over one epoch of batches: every image exactly once, the last
/// batch possibly short.
pub struct BatchIter<'a> {
    handle: &'a DatasetHandle,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.handle.gather(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// One shuffled epoch of `handle`. A batch size larger than the dataset
/// degrades to a single short batch, with a warning.
pub fn batches(handle: &DatasetHandle, batch_size: usize, shuffle_seed: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if handle.is_empty() {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    if batch_size > handle.len() {
        log::warn!(
            "batch_size {batch_size} exceeds dataset size {}; yielding one short batch",
            handle.len()
        );
    }
    Ok(BatchIter { handle, order: handle.epoch_order(shuffle_seed, 0), cursor: 0, batch_size })
}
