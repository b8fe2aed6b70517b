//! Image I/O, the on-disk dataset layout, and the synthetic RGB-D generator.
//!
//! A dataset root holds `RGB/`, `depth/` and `GT/` with matching file stems.
//! RGB is scaled to `[0, 1]`, depth is min-max normalised per image, ground
//! truth is binarised at 0.5. Everything is bilinearly resized to the model's
//! input size.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::{parse_kv, parse_value};
use crate::error::{Error, Result};
use crate::nn::resample_value;
use crate::tensor::{Float, Tensor};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn rgb_dir(&self) -> PathBuf {
        self.root.join("RGB")
    }

    pub fn depth_dir(&self) -> PathBuf {
        self.root.join("depth")
    }

    pub fn gt_dir(&self) -> PathBuf {
        self.root.join("GT")
    }

    /// Sorted stems found under `RGB/`, checked for counterparts in `depth/`
    /// (and `GT/` when `with_gt`).
    pub fn stems(&self, with_gt: bool) -> Result<Vec<String>> {
        let stems = list_stems(&self.rgb_dir())?;
        if stems.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for stem in &stems {
            find_image(&self.depth_dir(), stem)?;
            if with_gt {
                find_image(&self.gt_dir(), stem)?;
            }
        }
        Ok(stems)
    }
}

/// Sorted stems of the image files in `dir`.
pub fn list_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    stems.dedup();
    Ok(stems)
}

/// The image file for `stem` in `dir`, trying each supported extension.
pub fn find_image(dir: &Path, stem: &str) -> Result<PathBuf> {
    EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::MissingFile(dir.join(format!("{stem}.png"))))
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })
}

fn plane_tensor<T: Float>(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<T> {
    Tensor::new([1, c, h, w], data.into_iter().map(T::c).collect()).expect("plane size")
}

/// RGB image as a `1×3×H×W` tensor in `[0, 1]`.
pub fn read_rgb<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(plane_tensor(3, h, w, data))
}

/// Depth map as a `1×1×H×W` tensor, min-max normalised to `[0, 1]`. 8- and
/// 16-bit inputs are both read at 16-bit precision. A constant map becomes
/// all 0.5.
pub fn read_depth<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let img = open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f64> = img.pixels().map(|p| f64::from(p[0])).collect();
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let data = if hi > lo {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        log::warn!("{}: depth has zero range, using 0.5", path.display());
        vec![0.5; raw.len()]
    };
    Ok(plane_tensor(1, h, w, data))
}

/// Single-channel map as a `1×1×H×W` tensor in `[0, 1]` (no thresholding).
pub fn read_gray<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| f64::from(p[0]) / 255.0).collect();
    Ok(plane_tensor(1, h, w, data))
}

/// Binarises a map: values `≥ 0.5` become 1.
pub fn threshold<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v >= T::c(0.5) { T::one() } else { T::zero() })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img(path).map_err(|source| Error::Encode {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the first plane of a `1×1×H×W` map in `[0, 1]` as an 8-bit PNG.
pub fn write_gray<T: Float>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let (_, _, h, w) = map.dims4()?;
    let buf: Vec<u8> = map.data()[..h * w].iter().map(|v| quantize(v.as_f64())).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, buf).expect("gray buffer size");
    save(|p| img.save(p), path)
}

/// Writes a `1×1×H×W` map in `[0, 1]` as a 16-bit PNG.
pub fn write_gray16<T: Float>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let (_, _, h, w) = map.dims4()?;
    let buf: Vec<u16> = map.data()[..h * w]
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("gray buffer size");
    save(|p| img.save(p), path)
}

/// Writes a `1×3×H×W` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb<T: Float>(path: &Path, rgb: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = rgb.dims4()?;
    if c != 3 {
        return Err(Error::invalid("write_rgb", format!("expected 3 channels, got {c}")));
    }
    let d = rgb.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| quantize(d[(ch * h + y as usize) * w + x as usize].as_f64());
        image::Rgb([at(0), at(1), at(2)])
    });
    save(|p| img.save(p), path)
}

/// One loaded triplet, each tensor `1×C×S×S`.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub stem: String,
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub gt: Option<Tensor<T>>,
}

fn resize<T: Float>(x: Tensor<T>, size: usize) -> Result<Tensor<T>> {
    resample_value(&x, size, size)
}

/// Loads `stem` from `layout`, resized to `size × size`.
pub fn load_sample<T: Float>(layout: &DatasetLayout, stem: &str, size: usize, with_gt: bool) -> Result<Sample<T>> {
    let rgb = resize(read_rgb(&find_image(&layout.rgb_dir(), stem)?)?, size)?;
    let depth = resize(read_depth(&find_image(&layout.depth_dir(), stem)?)?, size)?;
    let gt = if with_gt {
        let raw = read_gray(&find_image(&layout.gt_dir(), stem)?)?;
        Some(threshold(&resize(raw, size)?))
    } else {
        None
    };
    Ok(Sample {
        stem: stem.to_string(),
        rgb,
        depth,
        gt,
    })
}

/// Loads every sample of a dataset, ordered by stem.
pub fn load_dataset<T: Float>(layout: &DatasetLayout, size: usize, with_gt: bool) -> Result<Vec<Sample<T>>> {
    layout
        .stems(with_gt)?
        .par_iter()
        .map(|stem| load_sample(layout, stem, size, with_gt))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect" | "rectangle" => Ok(Self::Rectangle),
            "ellipse" => Ok(Self::Ellipse),
            _ => Err(Error::Config(format!("unknown shape kind `{s}`"))),
        }
    }
}

/// Parameters of the synthetic scene generator.
///
/// ```text
/// size = 64              # canvas side in pixels
/// shapes = 1             # salient shapes per image
/// kinds = rect,ellipse
/// depth_noise = 0.02     # Gaussian σ added to depth
/// texture = 0.1          # background texture amplitude
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub size: usize,
    pub shapes: usize,
    pub kinds: Vec<ShapeKind>,
    pub depth_noise: f64,
    pub texture: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 64,
            shapes: 1,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            depth_noise: 0.02,
            texture: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (key, value) in parse_kv(text)? {
            match key.as_str() {
                "size" => spec.size = parse_value(&key, &value)?,
                "shapes" => spec.shapes = parse_value(&key, &value)?,
                "kinds" => {
                    spec.kinds = value.split(',').map(|k| k.trim().parse()).collect::<Result<_>>()?;
                }
                "depth_noise" => spec.depth_noise = parse_value(&key, &value)?,
                "texture" => spec.texture = parse_value(&key, &value)?,
                _ => return Err(Error::Config(format!("unknown synthetic spec key `{key}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!(
                "synthetic size must be at least 8, got {}",
                self.size
            )));
        }
        if self.shapes == 0 || self.kinds.is_empty() {
            return Err(Error::Config("need at least one shape and one shape kind".into()));
        }
        if !(self.depth_noise >= 0.0 && self.texture >= 0.0) {
            return Err(Error::Config("depth_noise and texture must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Shape {
    /// Whether the centre of pixel `(x, y)` lies inside.
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

/// A generated scene as `1×C×S×S` tensors. `depth` is min-max normalised.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub rgb: Tensor<f64>,
    pub depth: Tensor<f64>,
    pub gt: Tensor<f64>,
}

/// Renders sample `index` of the stream defined by `seed`.
pub fn synthesize(spec: &SyntheticSpec, seed: u64, index: u64) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = spec.size;
    let sf = s as f64;

    let shapes: Vec<Shape> = (0..spec.shapes)
        .map(|_| Shape {
            kind: spec.kinds[rng.random_range(0..spec.kinds.len())],
            cx: rng.random_range(0.3..0.7) * sf,
            cy: rng.random_range(0.3..0.7) * sf,
            rx: rng.random_range(0.12..0.28) * sf,
            ry: rng.random_range(0.12..0.28) * sf,
        })
        .collect();
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.45));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..0.95));
    let (fx, fy, phase) = (
        rng.random_range(1.0..4.0),
        rng.random_range(1.0..4.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let far = rng.random_range(0.6..0.9);
    let near = rng.random_range(0.1..0.4);
    let noise = Normal::new(0.0, spec.depth_noise).expect("finite σ");

    let mut gt = vec![0.0; s * s];
    let mut rgb = vec![0.0; 3 * s * s];
    let mut depth = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let inside = shapes.iter().any(|sh| sh.contains(x, y));
            let (u, v) = (x as f64 / sf, y as f64 / sf);
            let tex = spec.texture * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            // Background recedes slightly from top to bottom.
            let base_depth = if inside { near } else { far + 0.1 * v };
            depth[i] = base_depth + noise.sample(&mut rng);
            for c in 0..3 {
                rgb[c * s * s + i] = if inside { fg[c] } else { (bg[c] + tex).clamp(0.0, 1.0) };
            }
            gt[i] = if inside { 1.0 } else { 0.0 };
        }
    }
    let (lo, hi) = depth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
        (lo.min(d), hi.max(d))
    });
    let depth = if hi > lo {
        depth.iter().map(|d| (d - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; s * s]
    };
    SyntheticSample {
        rgb: plane_tensor(3, s, s, rgb),
        depth: plane_tensor(1, s, s, depth),
        gt: plane_tensor(1, s, s, gt),
    }
}

pub fn synthetic_stem(index: usize) -> String {
    format!("synth_{index:04}")
}

/// Writes `n` scenes under `out` in the dataset layout. Returns the stems.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize, seed: u64, out: &Path) -> Result<Vec<String>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("number of samples must be at least 1".into()));
    }
    let layout = DatasetLayout::new(out);
    for dir in [layout.rgb_dir(), layout.depth_dir(), layout.gt_dir()] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let sample = synthesize(spec, seed, i as u64);
            let stem = synthetic_stem(i);
            write_rgb(&layout.rgb_dir().join(format!("{stem}.png")), &sample.rgb)?;
            write_gray16(&layout.depth_dir().join(format!("{stem}.png")), &sample.depth)?;
            write_gray(&layout.gt_dir().join(format!("{stem}.png")), &sample.gt)?;
            Ok(stem)
        })
        .collect()
}
