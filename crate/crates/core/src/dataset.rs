//! Image loading, preprocessing, augmentation and the synthetic solder-joint fixture.
//!
//! On-disk layout consumed by [`load_split`]:
//!
//! ```text
//! root/
//!   train/normal/*.png|jpg
//!   val/normal/*.png|jpg
//!   test/normal/*.png|jpg
//!   test/abnormal/*.png|jpg
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every preprocessed sample.
pub const IMAGE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            "unknown" | "" => Ok(Label::Unknown),
            other => Err(Error::Config(format!("unknown label {other:?}"))),
        }
    }
}

/// A decoded 8-bit RGB image before preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub pixels: RgbImage,
    pub source_path: String,
}

/// A preprocessed `64 × 64 × 3` sample with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub label: Label,
    pub tensor: Array3<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub validation: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    /// Training and validation must be normal-only.
    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("train", &self.train), ("validation", &self.validation)] {
            if let Some(s) = set.iter().find(|s| s.label == Label::Abnormal) {
                return Err(Error::Config(format!(
                    "{name} split must be normal-only but contains abnormal sample {}",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

/// Center-crop to the short side, resize to 64×64 (bilinear) and map
/// `v ∈ [0, 255]` to `v / 127.5 − 1`.
pub fn preprocess(image: &RawImage) -> ImageSample {
    let (w, h) = image.pixels.dimensions();
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let cropped = imageops::crop_imm(&image.pixels, x0, y0, side, side).to_image();
    let target = IMAGE_SIZE as u32;
    let resized = if side == target {
        cropped
    } else {
        imageops::resize(&cropped, target, target, FilterType::Triangle)
    };
    let tensor = Array3::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE, 3), |(y, x, c)| {
        resized.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
    });
    ImageSample {
        id: image.source_path.clone(),
        label: Label::Unknown,
        tensor,
    }
}

/// Mirror along the width axis.
pub fn flip_horizontal(sample: &ImageSample) -> ImageSample {
    let mut tensor = sample.tensor.clone();
    tensor.invert_axis(Axis(1));
    ImageSample {
        id: sample.id.clone(),
        label: sample.label,
        tensor: tensor.as_standard_layout().into_owned(),
    }
}

/// Random horizontal flip with probability 0.5.
pub fn augment(sample: &ImageSample, rng: &mut impl Rng) -> ImageSample {
    if rng.random_bool(0.5) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    }
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_image(path: &Path, id: String) -> Result<RawImage> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(RawImage {
        pixels: img.to_rgb8(),
        source_path: id,
    })
}

fn load_dir(root: &Path, rel: &str, label: Label) -> Result<Vec<ImageSample>> {
    list_images(&root.join(rel))?
        .into_iter()
        .map(|path| {
            let name = path.file_name().expect("file").to_string_lossy();
            let raw = load_image(&path, format!("{rel}/{name}"))?;
            let mut sample = preprocess(&raw);
            sample.label = label;
            Ok(sample)
        })
        .collect()
}

/// Load and preprocess a dataset laid out as described in the module docs.
pub fn load_split(root: &Path) -> Result<DatasetSplit> {
    let train = load_dir(root, "train/normal", Label::Normal)?;
    let validation = load_dir(root, "val/normal", Label::Normal)?;
    let mut test = load_dir(root, "test/normal", Label::Normal)?;
    test.extend(load_dir(root, "test/abnormal", Label::Abnormal)?);
    test.sort_by(|a, b| a.id.cmp(&b.id));
    if !test.iter().any(|s| s.label == Label::Abnormal) {
        log::warn!(
            "{}: test/abnormal is empty; recall will be undefined",
            root.display()
        );
    }
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// One pad and its solder blob are absent.
    MissingBlob,
    /// A stray solder ball away from the pads.
    ExtraBlob,
    /// A solder bridge joining the two blobs.
    BridgedBlobs,
    /// One blob displaced off its pad.
    ShiftedBlob,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::MissingBlob,
        AnomalyKind::ExtraBlob,
        AnomalyKind::BridgedBlobs,
        AnomalyKind::ShiftedBlob,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
    pub anomaly_kinds: Vec<AnomalyKind>,
    /// Standard deviation of additive pixel noise, in 8-bit levels.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_count: 200,
            val_count: 50,
            test_normal: 40,
            test_abnormal: 40,
            anomaly_kinds: AnomalyKind::ALL.to_vec(),
            noise: 4.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_abnormal > 0 && self.anomaly_kinds.is_empty() {
            return Err(Error::Config(
                "synth.anomaly_kinds must not be empty when test_abnormal > 0".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "synth.noise must be >= 0, got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

/// Raw synthetic images, grouped the way [`write_synthetic`] lays them out.
#[derive(Clone, Debug)]
pub struct SyntheticImages {
    pub train: Vec<RawImage>,
    pub validation: Vec<RawImage>,
    pub test_normal: Vec<RawImage>,
    pub test_abnormal: Vec<(RawImage, AnomalyKind)>,
}

const BACKGROUND: [f64; 3] = [34.0, 78.0, 46.0];
const BODY: [f64; 3] = [38.0, 36.0, 40.0];
const PAD: [f64; 3] = [150.0, 148.0, 138.0];
const SOLDER: [f64; 3] = [222.0, 220.0, 210.0];

/// Geometry of the joint template in 64×64 pixel coordinates.
pub(crate) mod layout {
    pub const BODY: (i32, i32, i32, i32) = (25, 16, 39, 48);
    pub const LEFT_PAD: (i32, i32, i32, i32) = (7, 21, 22, 43);
    pub const RIGHT_PAD: (i32, i32, i32, i32) = (42, 21, 57, 43);
    pub const LEFT_BLOB: (f64, f64) = (14.5, 32.0);
    pub const RIGHT_BLOB: (f64, f64) = (49.5, 32.0);
}

struct Canvas {
    px: Vec<[f64; 3]>,
    size: i32,
}

impl Canvas {
    fn new(size: i32, color: [f64; 3]) -> Self {
        Self {
            px: vec![color; (size * size) as usize],
            size,
        }
    }

    fn rect(&mut self, (x0, y0, x1, y1): (i32, i32, i32, i32), dx: i32, dy: i32, color: [f64; 3]) {
        for y in (y0 + dy).max(0)..(y1 + dy).min(self.size) {
            for x in (x0 + dx).max(0)..(x1 + dx).min(self.size) {
                self.px[(y * self.size + x) as usize] = color;
            }
        }
    }

    /// Shaded ellipse: brightest at the centre, darker toward the rim.
    fn blob(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, color: [f64; 3], gain: f64) {
        for y in 0..self.size {
            for x in 0..self.size {
                let u = (x as f64 + 0.5 - cx) / rx;
                let v = (y as f64 + 0.5 - cy) / ry;
                let r2 = u * u + v * v;
                if r2 <= 1.0 {
                    let shade = gain * (1.0 - 0.35 * r2);
                    self.px[(y * self.size + x) as usize] = color.map(|c| c * shade);
                }
            }
        }
    }

    fn into_image(self, noise: f64, rng: &mut ChaCha8Rng) -> RgbImage {
        let normal = Normal::new(0.0, noise.max(1e-12)).expect("valid sigma");
        let size = self.size as u32;
        let mut img = RgbImage::new(size, size);
        for (i, p) in self.px.into_iter().enumerate() {
            let px = p.map(|c| {
                let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                (c + n).round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(i as u32 % size, i as u32 / size, Rgb(px));
        }
        img
    }
}

fn render_joint(rng: &mut ChaCha8Rng, noise: f64, anomaly: Option<AnomalyKind>) -> RgbImage {
    let size = IMAGE_SIZE as i32;
    let dx = rng.random_range(-2..=2);
    let dy = rng.random_range(-2..=2);
    let gain = rng.random_range(0.95..1.05);
    let radii = [
        (rng.random_range(5.0..6.5), rng.random_range(7.0..8.5)),
        (rng.random_range(5.0..6.5), rng.random_range(7.0..8.5)),
    ];
    let side = rng.random_range(0..2usize);
    let mut c = Canvas::new(size, BACKGROUND);
    c.rect(layout::BODY, dx, dy, BODY);
    let pads = [layout::LEFT_PAD, layout::RIGHT_PAD];
    let blobs = [layout::LEFT_BLOB, layout::RIGHT_BLOB];
    for i in 0..2 {
        if anomaly == Some(AnomalyKind::MissingBlob) && i == side {
            continue;
        }
        c.rect(pads[i], dx, dy, PAD);
    }
    for i in 0..2 {
        let (mut cx, mut cy) = blobs[i];
        cx += dx as f64;
        cy += dy as f64;
        match anomaly {
            Some(AnomalyKind::MissingBlob) if i == side => continue,
            Some(AnomalyKind::ShiftedBlob) if i == side => {
                cy += if rng.random_bool(0.5) { 14.0 } else { -14.0 };
            }
            _ => {}
        }
        c.blob(cx, cy, radii[i].0, radii[i].1, SOLDER, gain);
    }
    match anomaly {
        Some(AnomalyKind::ExtraBlob) => {
            let cx = 32.0 + rng.random_range(-3.0..3.0);
            let cy = if rng.random_bool(0.5) { 8.0 } else { 56.0 };
            c.blob(cx, cy, 5.0, 5.0, SOLDER, gain);
        }
        Some(AnomalyKind::BridgedBlobs) => {
            let (l, r) = (layout::LEFT_BLOB, layout::RIGHT_BLOB);
            let y = l.1 as i32 + dy;
            c.rect(
                (l.0 as i32, y - 3, r.0 as i32, y + 3),
                dx,
                0,
                SOLDER.map(|v| v * 0.9 * gain),
            );
        }
        _ => {}
    }
    c.into_image(noise, rng)
}

/// Deterministic raw fixture images for `seed`.
pub fn synthesize_images(cfg: &SynthConfig, seed: u64) -> SyntheticImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<RawImage> {
        (0..n)
            .map(|i| RawImage {
                pixels: render_joint(rng, cfg.noise, None),
                source_path: format!("{prefix}/{i:05}.png"),
            })
            .collect()
    };
    let train = normals("train/normal", cfg.train_count, &mut rng);
    let validation = normals("val/normal", cfg.val_count, &mut rng);
    let test_normal = normals("test/normal", cfg.test_normal, &mut rng);
    let test_abnormal = (0..cfg.test_abnormal)
        .map(|i| {
            let kind = cfg.anomaly_kinds[i % cfg.anomaly_kinds.len()];
            (
                RawImage {
                    pixels: render_joint(&mut rng, cfg.noise, Some(kind)),
                    source_path: format!("test/abnormal/{i:05}.png"),
                },
                kind,
            )
        })
        .collect();
    SyntheticImages {
        train,
        validation,
        test_normal,
        test_abnormal,
    }
}

fn labelled(raw: &RawImage, label: Label) -> ImageSample {
    let mut s = preprocess(raw);
    s.label = label;
    s
}

/// Preprocessed synthetic split; identical to writing the fixture with
/// [`write_synthetic`] and reading it back with [`load_split`].
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> DatasetSplit {
    let imgs = synthesize_images(cfg, seed);
    let mut test: Vec<ImageSample> = imgs
        .test_normal
        .iter()
        .map(|r| labelled(r, Label::Normal))
        .chain(
            imgs.test_abnormal
                .iter()
                .map(|(r, _)| labelled(r, Label::Abnormal)),
        )
        .collect();
    test.sort_by(|a, b| a.id.cmp(&b.id));
    DatasetSplit {
        train: imgs
            .train
            .iter()
            .map(|r| labelled(r, Label::Normal))
            .collect(),
        validation: imgs
            .validation
            .iter()
            .map(|r| labelled(r, Label::Normal))
            .collect(),
        test,
    }
}

/// Materialize the synthetic fixture under `root` in the [`load_split`] layout.
pub fn write_synthetic(cfg: &SynthConfig, seed: u64, root: &Path) -> Result<SyntheticImages> {
    let imgs = synthesize_images(cfg, seed);
    for dir in ["train/normal", "val/normal", "test/normal", "test/abnormal"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let all = imgs
        .train
        .iter()
        .chain(&imgs.validation)
        .chain(&imgs.test_normal)
        .chain(imgs.test_abnormal.iter().map(|(r, _)| r));
    for raw in all {
        raw.pixels.save(root.join(&raw.source_path))?;
    }
    Ok(imgs)
}
