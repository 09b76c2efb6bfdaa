//! Image/mask corpora: loading, hashing, cross-split deduplication, merging,
//! augmentation and a procedural water-scene generator.
//!
//! On disk a corpus is `<root>/<split>/images/*.{png,jpg,jpeg}` with
//! `<root>/<split>/masks/<stem>.png` partners. Masks are 8-bit gray, `>= 128`
//! meaning water.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::mask::Mask;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub source: String,
    pub split: Split,
    /// SHA-256 of the decoded RGB pixels and dimensions.
    pub content_hash: String,
    /// 8×8 average hash of the grayscale image.
    #[serde(with = "hex_u64")]
    pub phash: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub removed: PathBuf,
    pub source: String,
    pub split: Split,
    pub duplicate_of: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    #[serde(default)]
    pub provenance: Vec<String>,
    #[serde(default)]
    pub dedup_report: Vec<Removal>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    pub fn sources(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.source.clone()).collect()
    }

    /// Content hashes present both in train/val and in test.
    pub fn cross_split_overlap(&self) -> Vec<String> {
        let test: BTreeSet<&str> = self
            .samples
            .iter()
            .filter(|s| s.split == Split::Test)
            .map(|s| s.content_hash.as_str())
            .collect();
        let mut out: Vec<String> = self
            .samples
            .iter()
            .filter(|s| s.split != Split::Test && test.contains(s.content_hash.as_str()))
            .map(|s| s.content_hash.clone())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Keeps the first `ceil(fraction · n)` training samples of a seeded
    /// shuffle. Smaller fractions select subsets of larger ones.
    pub fn with_train_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(config_err!("train fraction must be in (0, 1], got {fraction}"));
        }
        let mut train: Vec<usize> = (0..self.samples.len()).filter(|&i| self.samples[i].split == Split::Train).collect();
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let keep = ((train.len() as f64 * fraction).ceil() as usize).min(train.len());
        let kept: BTreeSet<usize> = train[..keep].iter().copied().collect();
        let mut out = self.clone();
        out.samples = self
            .samples
            .iter()
            .enumerate()
            .filter(|(i, s)| s.split != Split::Train || kept.contains(i))
            .map(|(_, s)| s.clone())
            .collect();
        out.provenance.push(format!("train subset {keep}/{} (fraction {fraction}, seed {seed})", train.len()));
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let gray = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    Mask::from_gray(gray.width() as usize, gray.height() as usize, gray.as_raw())
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.to_gray()).expect("sized buffer");
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Decodes a sample's image and mask and checks that they align.
pub fn load_pair(sample: &Sample) -> Result<(RgbImage, Mask)> {
    let image = read_rgb(&sample.image_path)?;
    let mask = read_mask(&sample.mask_path)?;
    if (image.width() as usize, image.height() as usize) != (mask.width(), mask.height()) {
        return Err(Error::Validation(format!(
            "{} is {}x{} but its mask {} is {}x{}",
            sample.image_path.display(),
            image.width(),
            image.height(),
            sample.mask_path.display(),
            mask.width(),
            mask.height()
        )));
    }
    Ok((image, mask))
}

pub fn content_hash(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(b"rgb8");
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

/// Average hash: bit `i` is set when thumbnail pixel `i` exceeds the mean.
pub fn average_hash(image: &RgbImage) -> u64 {
    let gray = imageops::grayscale(image);
    let thumb = imageops::resize(&gray, 8, 8, FilterType::Triangle);
    let px: Vec<u32> = thumb.pixels().map(|p| u32::from(p.0[0])).collect();
    let mean = px.iter().sum::<u32>() as f64 / 64.0;
    px.iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| if f64::from(v) > mean { acc | (1 << i) } else { acc })
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn stems(dir: &Path, accept: impl Fn(&Path) -> bool) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && accept(&path) {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            if let Some(prev) = out.insert(stem.clone(), path.clone()) {
                return Err(Error::Validation(format!(
                    "{} and {} share the stem {stem:?}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

/// Loads a corpus tagged with the root directory's name as source.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let source = root
        .canonicalize()
        .map_err(|e| Error::io(root, e))?
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    load_manifest_as(root, &source)
}

pub fn load_manifest_as(root: &Path, source: &str) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let mut samples = Vec::new();
    let mut orphans = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        let images = stems(&dir.join("images"), is_image)?;
        let masks = stems(&dir.join("masks"), |p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))?;
        for (stem, path) in &images {
            if !masks.contains_key(stem) {
                orphans.push(format!("image without mask: {}", path.display()));
            }
        }
        for (stem, path) in &masks {
            if !images.contains_key(stem) {
                orphans.push(format!("mask without image: {}", path.display()));
            }
        }
        for (stem, image_path) in images {
            let Some(mask_path) = masks.get(&stem) else { continue };
            let image = read_rgb(&image_path)?;
            let mask = read_mask(mask_path)?;
            if (image.width() as usize, image.height() as usize) != (mask.width(), mask.height()) {
                orphans.push(format!("size mismatch between {} and its mask", image_path.display()));
                continue;
            }
            samples.push(Sample {
                content_hash: content_hash(&image),
                phash: average_hash(&image),
                width: image.width(),
                height: image.height(),
                image_path,
                mask_path: mask_path.clone(),
                source: source.to_string(),
                split,
            });
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Validation(orphans.join("; ")));
    }
    if samples.is_empty() {
        return Err(Error::Validation(format!("no image/mask pairs under {}", root.display())));
    }
    Ok(DatasetManifest {
        samples,
        provenance: vec![format!("{source}: loaded from {}", root.display())],
        dedup_report: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DedupMode {
    /// Same decoded pixels.
    #[default]
    Exact,
    /// Average hashes within `hamming_threshold` bits (also catches exact copies).
    Perceptual { hamming_threshold: u32 },
}

/// Drops train/val samples that duplicate a test sample. Test is untouched.
pub fn dedup_cross_split(manifest: &DatasetManifest, mode: DedupMode) -> DatasetManifest {
    let test: Vec<&Sample> = manifest.samples.iter().filter(|s| s.split == Split::Test).collect();
    let mut out = DatasetManifest {
        samples: Vec::with_capacity(manifest.samples.len()),
        provenance: manifest.provenance.clone(),
        dedup_report: manifest.dedup_report.clone(),
    };
    for s in &manifest.samples {
        let hit = (s.split != Split::Test)
            .then(|| {
                test.iter().find_map(|t| {
                    if t.content_hash == s.content_hash {
                        return Some((t, "identical pixels".to_string()));
                    }
                    match mode {
                        DedupMode::Perceptual { hamming_threshold } => {
                            let d = (t.phash ^ s.phash).count_ones();
                            (d <= hamming_threshold).then(|| (t, format!("average hash within {d} bits")))
                        }
                        DedupMode::Exact => None,
                    }
                })
            })
            .flatten();
        match hit {
            Some((t, reason)) => out.dedup_report.push(Removal {
                removed: s.image_path.clone(),
                source: s.source.clone(),
                split: s.split,
                duplicate_of: t.image_path.clone(),
                reason,
            }),
            None => out.samples.push(s.clone()),
        }
    }
    out
}

/// Pools train/val of every manifest, keeps one test split, then dedups.
///
/// With several test splits present, `eval_source` must name the one to keep.
pub fn merge_datasets(
    manifests: &[DatasetManifest],
    eval_source: Option<&str>,
    mode: DedupMode,
) -> Result<DatasetManifest> {
    if manifests.is_empty() {
        return Err(config_err!("merge needs at least one dataset"));
    }
    let with_test: BTreeSet<String> = manifests
        .iter()
        .flat_map(|m| m.samples.iter().filter(|s| s.split == Split::Test).map(|s| s.source.clone()))
        .collect();
    let keep_test = match eval_source {
        Some(src) if with_test.contains(src) => Some(src.to_string()),
        Some(src) => {
            return Err(config_err!(
                "evaluation dataset {src:?} has no test split (test splits: {with_test:?})"
            ))
        }
        None if with_test.len() > 1 => {
            return Err(config_err!(
                "conflicting test splits from {with_test:?}; choose the evaluation dataset explicitly"
            ))
        }
        None => with_test.into_iter().next(),
    };
    let mut merged = DatasetManifest::default();
    for m in manifests {
        merged.provenance.extend(m.provenance.iter().cloned());
        merged.dedup_report.extend(m.dedup_report.iter().cloned());
        merged.samples.extend(
            m.samples
                .iter()
                .filter(|s| s.split != Split::Test || Some(&s.source) == keep_test.as_ref())
                .cloned(),
        );
    }
    if manifests.len() > 1 {
        let names: Vec<String> = manifests.iter().flat_map(|m| m.sources()).collect();
        merged.provenance.push(format!(
            "merged {} with test split from {}",
            names.join(" + "),
            keep_test.as_deref().unwrap_or("none")
        ));
    }
    Ok(dedup_cross_split(&merged, mode))
}

/// Per-channel normalization applied to `[0, 1]` pixel values.
pub const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `[1, 3, H, W]` normalized network input.
pub fn image_to_tensor<S: Element>(image: &RgbImage) -> Tensor<S> {
    batch_images(std::slice::from_ref(image)).expect("single image")
}

pub fn batch_images<S: Element>(images: &[RgbImage]) -> Result<Tensor<S>> {
    let (w, h) = images.first().map(|i| i.dimensions()).ok_or_else(|| config_err!("empty batch"))?;
    let (w, h) = (w as usize, h as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.dimensions() != (w as u32, h as u32) {
            return Err(Error::Shape(format!("batch mixes {w}x{h} and {:?} images", img.dimensions())));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| S::from_f64((f64::from(p.0[c]) / 255.0 - MEAN[c]) / STD[c])));
        }
    }
    Tensor::new([images.len(), 3, h, w], data)
}

/// `[B, 1, H, W]` float targets.
pub fn batch_masks<S: Element>(masks: &[Mask]) -> Result<Tensor<S>> {
    let first = masks.first().ok_or_else(|| config_err!("empty batch"))?;
    let mut data = Vec::with_capacity(masks.len() * first.data().len());
    for m in masks {
        first.same_shape(m)?;
        data.extend(m.data().iter().map(|&v| S::from_f64(f64::from(v))));
    }
    Tensor::new([masks.len(), 1, first.height(), first.width()], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub min_crop_scale: f64,
    pub max_crop_scale: f64,
    /// Brightness and contrast factors are drawn from `1 ± jitter`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            min_crop_scale: 0.7,
            max_crop_scale: 1.0,
            jitter: 0.2,
        }
    }
}

/// Flip, random resized crop (both inputs) and brightness/contrast (image only).
/// Output keeps the input size; the mask is resampled by nearest neighbour.
pub fn augment(image: &RgbImage, mask: &Mask, seed: u64, cfg: &AugmentConfig) -> Result<(RgbImage, Mask)> {
    let (w, h) = image.dimensions();
    if (w as usize, h as usize) != (mask.width(), mask.height()) {
        return Err(Error::Shape(format!("image {w}x{h} and mask {}x{} differ", mask.width(), mask.height())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.clone();
    let mut gray: GrayImage = ImageBuffer::from_raw(w, h, mask.data().to_vec()).expect("sized buffer");
    if rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        imageops::flip_horizontal_in_place(&mut img);
        imageops::flip_horizontal_in_place(&mut gray);
    }
    let scale = rng.random_range(cfg.min_crop_scale..=cfg.max_crop_scale);
    let side = scale.sqrt();
    let cw = ((f64::from(w) * side).round() as u32).clamp(1, w);
    let ch = ((f64::from(h) * side).round() as u32).clamp(1, h);
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - ch);
    if (cw, ch) != (w, h) {
        let crop = imageops::crop_imm(&img, x0, y0, cw, ch).to_image();
        img = imageops::resize(&crop, w, h, FilterType::Triangle);
        let crop = imageops::crop_imm(&gray, x0, y0, cw, ch).to_image();
        gray = imageops::resize(&crop, w, h, FilterType::Nearest);
    }
    let brightness = rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
    let contrast = rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
    let mean = img.pixels().flat_map(|p| p.0).map(f64::from).sum::<f64>() * brightness / (3.0 * f64::from(w * h));
    for p in img.pixels_mut() {
        for v in p.0.iter_mut() {
            let b = f64::from(*v) * brightness;
            *v = ((b - mean) * contrast + mean).round().clamp(0.0, 255.0) as u8;
        }
    }
    let mask = Mask::new(w as usize, h as usize, gray.into_raw())?;
    Ok((img, mask))
}

/// Bilinearly interpolated lattice noise in `[0, 1]`.
struct ValueNoise {
    cell: f64,
    cols: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, size: usize, cell: f64) -> Self {
        let cols = (size as f64 / cell).ceil() as usize + 2;
        let grid = (0..cols * cols).map(|_| rng.random::<f64>()).collect();
        Self { cell, cols, grid }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let (fx, fy) = (x as f64 / self.cell, y as f64 / self.cell);
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let g = |i: usize, j: usize| self.grid[j * self.cols + i];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Random polyline through `knots` points across `[0, size)`, evaluated per column.
fn polyline(rng: &mut ChaCha8Rng, size: usize, knots: usize, lo: f64, hi: f64) -> Vec<f64> {
    let ys: Vec<f64> = (0..knots).map(|_| rng.random_range(lo..hi)).collect();
    (0..size)
        .map(|x| {
            let t = x as f64 / (size - 1).max(1) as f64 * (knots - 1) as f64;
            let i = (t as usize).min(knots - 2);
            let f = t - i as f64;
            ys[i] * (1.0 - f) + ys[i + 1] * f
        })
        .collect()
}

const WATER_COLORS: [[f64; 3]; 4] = [[30.0, 70.0, 150.0], [40.0, 110.0, 130.0], [70.0, 90.0, 110.0], [50.0, 80.0, 170.0]];
const LAND_COLORS: [[f64; 3]; 4] = [[80.0, 120.0, 50.0], [150.0, 130.0, 90.0], [95.0, 80.0, 60.0], [120.0, 125.0, 115.0]];

/// Renders one scene: the mask is drawn first and the image painted from it.
pub fn synth_scene(size: usize, seed: u64) -> (RgbImage, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut water = vec![0u8; size * size];
    let vertical = rng.random_bool(0.5);
    let mut bridge: Option<(usize, usize)> = None;
    for _ in 0..64 {
        let shore = polyline(&mut rng, size, 5, 0.1 * s, 0.6 * s);
        let width = polyline(&mut rng, size, 4, 0.12 * s, 0.45 * s);
        bridge = rng.random_bool(0.5).then(|| {
            let t = rng.random_range(3..=(size / 10).max(3));
            (rng.random_range(0..size - t), t)
        });
        for a in 0..size {
            for b in 0..size {
                let inside = (b as f64) >= shore[a] && (b as f64) < shore[a] + width[a];
                let on_bridge = bridge.is_some_and(|(p, t)| a >= p && a < p + t);
                let (x, y) = if vertical { (b, a) } else { (a, b) };
                water[y * size + x] = u8::from(inside && !on_bridge);
            }
        }
        let frac = water.iter().map(|&v| v as usize).sum::<usize>() as f64 / (size * size) as f64;
        if (0.1..=0.6).contains(&frac) {
            break;
        }
    }
    let wc = WATER_COLORS[rng.random_range(0..WATER_COLORS.len())];
    let lc = LAND_COLORS[rng.random_range(0..LAND_COLORS.len())];
    let water_noise = ValueNoise::new(&mut rng, size, s / 3.0);
    let land_coarse = ValueNoise::new(&mut rng, size, s / 6.0);
    let land_fine = ValueNoise::new(&mut rng, size, 3.0);
    let blobs: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=4))
        .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.04..0.1) * s))
        .collect();
    let gray_level = rng.random_range(110.0..170.0);
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let jitter = rng.random_range(-6.0..6.0);
            let (a, _) = if vertical { (y, x) } else { (x, y) };
            let rgb = if water[y * size + x] == 1 {
                let n = water_noise.at(x, y) - 0.5;
                [wc[0] + 25.0 * n, wc[1] + 30.0 * n, wc[2] + 35.0 * n].map(|c| c + jitter * 0.5)
            } else if bridge.is_some_and(|(p, t)| a >= p && a < p + t) {
                [gray_level; 3].map(|c| c + jitter)
            } else if blobs.iter().any(|&(bx, by, r)| (x as f64 - bx).hypot(y as f64 - by) < r) {
                [50.0, 140.0 + 40.0 * land_fine.at(x, y), 45.0].map(|c| c + jitter)
            } else {
                let n = 0.6 * land_coarse.at(x, y) + 0.4 * land_fine.at(x, y) - 0.5;
                [lc[0] + 60.0 * n, lc[1] + 60.0 * n, lc[2] + 50.0 * n].map(|c| c + jitter * 2.0)
            };
            img.put_pixel(x as u32, y as u32, Rgb(rgb.map(|c| c.round().clamp(0.0, 255.0) as u8)));
        }
    }
    (img, Mask::new(size, size, water).expect("binary by construction"))
}

/// Writes `n` scenes under `out_dir` split 70/15/15 and returns `out_dir`.
pub fn synth_generate(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    synth_generate_split(n, size, seed, out_dir, [0.7, 0.15, 0.15])
}

pub fn synth_generate_split(n: usize, size: usize, seed: u64, out_dir: &Path, fractions: [f64; 3]) -> Result<PathBuf> {
    if n == 0 {
        return Err(config_err!("need at least one image"));
    }
    if size == 0 || !size.is_multiple_of(32) {
        return Err(config_err!("image size must be a positive multiple of 32, got {size}"));
    }
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f < 0.0) || total <= 0.0 {
        return Err(config_err!("split fractions must be non-negative with a positive sum"));
    }
    let n_val = (n as f64 * fractions[1] / total).round() as usize;
    let n_test = ((n as f64 * fractions[2] / total).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    let mut index = 0;
    for (split, count) in [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)] {
        let dir = out_dir.join(split.dir_name());
        for sub in ["images", "masks"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for _ in 0..count {
            let scene_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64);
            let (img, mask) = synth_scene(size, scene_seed);
            let name = format!("scene_{index:05}.png");
            let ip = dir.join("images").join(&name);
            img.save(&ip).map_err(|e| Error::image(&ip, e))?;
            write_mask(&mask, &dir.join("masks").join(&name))?;
            index += 1;
        }
    }
    Ok(out_dir.to_path_buf())
}

/// Copies a gray mask into an 8-bit image (used by overlays and tests).
pub fn mask_image(mask: &Mask) -> GrayImage {
    ImageBuffer::<Luma<u8>, _>::from_raw(mask.width() as u32, mask.height() as u32, mask.to_gray()).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyline_hits_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = polyline(&mut rng, 9, 3, 0.0, 10.0);
        assert_eq!(p.len(), 9);
        assert!(p.iter().all(|v| (0.0..10.0).contains(v)));
    }

    #[test]
    fn scene_mask_matches_water_fraction_bounds() {
        for seed in 0..40 {
            let (_, m) = synth_scene(64, seed);
            assert!((0.1..=0.6).contains(&m.fraction()), "seed {seed}: {}", m.fraction());
        }
    }

    #[test]
    fn average_hash_ignores_small_noise() {
        let (img, _) = synth_scene(64, 3);
        let mut noisy = img.clone();
        for p in noisy.pixels_mut().step_by(7) {
            p.0[0] = p.0[0].saturating_add(2);
        }
        assert!((average_hash(&img) ^ average_hash(&noisy)).count_ones() <= 5);
        assert_ne!(content_hash(&img), content_hash(&noisy));
    }

    #[test]
    fn flip_only_preserves_area() {
        let (img, mask) = synth_scene(64, 5);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            min_crop_scale: 1.0,
            max_crop_scale: 1.0,
            jitter: 0.0,
        };
        let (_, m) = augment(&img, &mask, 1, &cfg).unwrap();
        assert_eq!(m.count(), mask.count());
        assert_eq!(m.get(0, 10), mask.get(63, 10));
    }

    #[test]
    fn batches_normalize() {
        let img = RgbImage::from_pixel(2, 2, Rgb([255, 0, 128]));
        let t = batch_images::<f64>(&[img.clone(), img]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 2]);
        assert!((t.at(&[1, 0, 1, 1]) - (1.0 - MEAN[0]) / STD[0]).abs() < 1e-12);
        let m = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(batch_masks::<f32>(&[m]).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
