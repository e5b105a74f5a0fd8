//! Post-processing attacks applied to test images: degradations and
//! inpainting of the spliced region. Masks and labels pass through
//! unchanged.

pub mod inpaint;

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, GrayImage, ImageFormat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{quantize8, rgb_to_tensor, save_dataset, tensor_to_rgb, ImageSample, SplitManifest};
use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};

/// Recapture canvas.
pub const SCREEN: (usize, usize) = (1920, 1080);
/// Dilation of the mask before inpainting, in pixels (Chebyshev).
pub const INPAINT_DILATION: usize = 2;
const NS_ITERATIONS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianBlur,
    GaussianNoise,
    Jpeg,
    Recapture,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Kernel size, noise std on the 0–255 scale, or JPEG quality.
    pub param: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InpaintMethod {
    NavierStokes,
    Telea,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintSpec {
    pub method: InpaintMethod,
    pub radius: usize,
    pub external_dir: Option<PathBuf>,
}

/// Any attack addressable by a slug such as `blur-k7` or `inpaint-telea-r3`.
#[derive(Clone, Debug, PartialEq)]
pub enum AttackSpec {
    Degrade(DegradationSpec),
    Inpaint(InpaintSpec),
}

impl DegradationSpec {
    pub fn none() -> Self {
        Self {
            kind: DegradationKind::None,
            param: 0.0,
            seed: 0,
        }
    }

    pub fn blur(k: usize) -> Self {
        Self {
            kind: DegradationKind::GaussianBlur,
            param: k as f64,
            seed: 0,
        }
    }

    pub fn noise(std: f64, seed: u64) -> Self {
        Self {
            kind: DegradationKind::GaussianNoise,
            param: std,
            seed,
        }
    }

    pub fn jpeg(quality: u8) -> Self {
        Self {
            kind: DegradationKind::Jpeg,
            param: quality as f64,
            seed: 0,
        }
    }

    pub fn recapture() -> Self {
        Self {
            kind: DegradationKind::Recapture,
            param: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.param;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self.kind {
            DegradationKind::GaussianBlur if p.fract() != 0.0 || p < 3.0 || (p as usize).is_multiple_of(2) => {
                bad(format!("blur kernel must be an odd integer ≥ 3, got {p}"))
            }
            DegradationKind::GaussianNoise if !(p >= 0.0 && p.is_finite()) => bad(format!("noise std must be ≥ 0, got {p}")),
            DegradationKind::Jpeg if p.fract() != 0.0 || !(1.0..=100.0).contains(&p) => {
                bad(format!("jpeg quality must be an integer in [1, 100], got {p}"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackSpec::Degrade(d) => match d.kind {
                DegradationKind::GaussianBlur => write!(f, "blur-k{}", d.param),
                DegradationKind::GaussianNoise => write!(f, "noise-s{}", d.param),
                DegradationKind::Jpeg => write!(f, "jpeg-q{}", d.param),
                DegradationKind::Recapture => f.write_str("recapture"),
                DegradationKind::None => f.write_str("none"),
            },
            AttackSpec::Inpaint(i) => match i.method {
                InpaintMethod::Telea => write!(f, "inpaint-telea-r{}", i.radius),
                InpaintMethod::NavierStokes => write!(f, "inpaint-ns-r{}", i.radius),
                InpaintMethod::External => f.write_str("inpaint-external"),
            },
        }
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    /// Parses a slug. Noise seeds default to 0; use [`AttackSpec::with_seed`]
    /// to set one.
    fn from_str(slug: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized attack slug `{slug}`"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let spec = if slug == "none" {
            AttackSpec::Degrade(DegradationSpec::none())
        } else if slug == "recapture" {
            AttackSpec::Degrade(DegradationSpec::recapture())
        } else if let Some(k) = slug.strip_prefix("blur-k") {
            AttackSpec::Degrade(DegradationSpec {
                kind: DegradationKind::GaussianBlur,
                param: num(k)?,
                seed: 0,
            })
        } else if let Some(s) = slug.strip_prefix("noise-s") {
            AttackSpec::Degrade(DegradationSpec::noise(num(s)?, 0))
        } else if let Some(q) = slug.strip_prefix("jpeg-q") {
            AttackSpec::Degrade(DegradationSpec {
                kind: DegradationKind::Jpeg,
                param: num(q)?,
                seed: 0,
            })
        } else if slug == "inpaint-external" {
            AttackSpec::Inpaint(InpaintSpec {
                method: InpaintMethod::External,
                radius: 0,
                external_dir: None,
            })
        } else if let Some(rest) = slug.strip_prefix("inpaint-") {
            let (method, r) = rest.split_once("-r").ok_or_else(bad)?;
            let method = match method {
                "telea" => InpaintMethod::Telea,
                "ns" => InpaintMethod::NavierStokes,
                _ => return Err(bad()),
            };
            AttackSpec::Inpaint(InpaintSpec {
                method,
                radius: r.parse().map_err(|_| bad())?,
                external_dir: None,
            })
        } else {
            return Err(bad());
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl AttackSpec {
    pub fn slug(&self) -> String {
        self.to_string()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        if let AttackSpec::Degrade(d) = &mut self {
            d.seed = seed;
        }
        self
    }

    pub fn with_external_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        if let AttackSpec::Inpaint(i) = &mut self {
            i.external_dir = Some(dir.into());
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackSpec::Degrade(d) => d.validate(),
            AttackSpec::Inpaint(i) if i.method != InpaintMethod::External && i.radius == 0 => Err(
                Error::InvalidArgument("inpainting radius must be positive".into()),
            ),
            AttackSpec::Inpaint(_) => Ok(()),
        }
    }

    /// Applies the attack. Inpainting leaves pristine images untouched since
    /// they have no spliced region.
    pub fn apply(&self, img: &ImageSample) -> Result<ImageSample> {
        match self {
            AttackSpec::Degrade(d) => degrade(img, d),
            AttackSpec::Inpaint(_) if !img.label.is_spliced() => Ok(img.clone()),
            AttackSpec::Inpaint(i) => inpaint_spliced(img, i),
        }
    }
}

/// Gaussian standard deviation used for a blur kernel of size `k`.
pub fn blur_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

fn gaussian_kernel_1d(k: usize) -> Vec<f64> {
    let sigma = blur_sigma(k);
    let c = (k / 2) as f64;
    let raw: Vec<f64> = (0..k).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Normalized `k × k` Gaussian kernel, row-major.
pub fn gaussian_kernel_2d(k: usize) -> Vec<f64> {
    let g = gaussian_kernel_1d(k);
    g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
}

/// Reflect-101 index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect-101 borders.
fn blur(t: &Tensor, k: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let g = gaussian_kernel_1d(k);
    let r = (k / 2) as isize;
    let src = t.data();
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * src[base + y * w + reflect(x as isize + i as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * tmp[base + reflect(y as isize + i as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Per-image seed so noise differs between images but not between runs.
fn add_noise(t: &Tensor, std: f64, seed: u64) -> Tensor {
    if std == 0.0 {
        return t.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std / 255.0).expect("finite std");
    let data = t.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
    Tensor::new(t.shape().to_vec(), data)
}

fn is_gray(t: &Tensor) -> bool {
    let n = t.numel() / 3;
    let d = t.data();
    d[..n] == d[n..2 * n] && d[..n] == d[2 * n..]
}

/// Encodes and decodes through baseline JPEG. Gray images are encoded as a
/// single luma plane.
pub fn jpeg_roundtrip(t: &Tensor, quality: u8) -> Result<Tensor> {
    let rgb = tensor_to_rgb(t);
    let mut buf = Vec::new();
    let mut enc = JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality);
    if is_gray(t) {
        let gray = GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| image::Luma([rgb.get_pixel(x, y)[0]]));
        enc.encode_image(&DynamicImage::ImageLuma8(gray))?;
    } else {
        enc.encode_image(&DynamicImage::ImageRgb8(rgb))?;
    }
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)?;
    Ok(rgb_to_tensor(&decoded.to_rgb8()))
}

/// Upscales into the screen canvas, samples back at the original size and
/// re-encodes at JPEG quality 90.
fn recapture(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let scale = (SCREEN.0 as f64 / w as f64).min(SCREEN.1 as f64 / h as f64);
    let (sw, sh) = (((w as f64 * scale).round() as usize).max(1), ((h as f64 * scale).round() as usize).max(1));
    let up = resize_bilinear(t.data(), c, h, w, sh, sw);
    let on_screen = quantize8(&Tensor::new([c, sh, sw], up));
    let back = resize_bilinear(on_screen.data(), c, sh, sw, h, w);
    jpeg_roundtrip(&quantize8(&Tensor::new([c, h, w], back)), 90)
}

/// Applies one degradation. The result is quantized to 8-bit levels; `none`
/// returns the input unchanged.
pub fn degrade(img: &ImageSample, spec: &DegradationSpec) -> Result<ImageSample> {
    spec.validate()?;
    let image = match spec.kind {
        DegradationKind::None => return Ok(img.clone()),
        DegradationKind::GaussianBlur => quantize8(&blur(&img.image, spec.param as usize)),
        DegradationKind::GaussianNoise => quantize8(&add_noise(&img.image, spec.param, crate::derive_seed(spec.seed, &img.id))),
        DegradationKind::Jpeg => jpeg_roundtrip(&img.image, spec.param as u8)?,
        DegradationKind::Recapture => recapture(&img.image)?,
    };
    Ok(ImageSample { image, ..img.clone() })
}

/// Chebyshev dilation of a binary `[H, W]` mask.
pub fn dilate(mask: &Tensor, r: usize) -> Vec<bool> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let m = mask.data();
    // Separable: max over rows, then over columns.
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (x.saturating_sub(r)..=(x + r).min(w - 1)).any(|xx| m[y * w + xx] > 0.5);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (y.saturating_sub(r)..=(y + r).min(h - 1)).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Replaces the pixels under the dilated mask with inpainted content.
pub fn inpaint_spliced(img: &ImageSample, spec: &InpaintSpec) -> Result<ImageSample> {
    if spec.method == InpaintMethod::External {
        let dir = spec
            .external_dir
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("external inpainting needs a directory".into()))?;
        let path = dir.join(format!("{}.png", img.id));
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let ext = image::open(&path)
            .map_err(|e| Error::Load {
                id: img.id.clone(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let image = rgb_to_tensor(&ext);
        if image.shape() != img.image.shape() {
            return Err(Error::Shape(format!(
                "`{}`: external image {:?} does not match {:?}",
                img.id,
                image.shape(),
                img.image.shape()
            )));
        }
        return Ok(ImageSample { image, ..img.clone() });
    }
    if spec.radius == 0 {
        return Err(Error::InvalidArgument("inpainting radius must be positive".into()));
    }
    let (h, w) = (img.height(), img.width());
    let domain = dilate(&img.mask, INPAINT_DILATION);
    if !domain.iter().any(|&d| d) {
        return Ok(img.clone());
    }
    let mut data = img.image.data().to_vec();
    for plane in data.chunks_mut(h * w) {
        match spec.method {
            InpaintMethod::Telea => inpaint::telea(plane, &domain, h, w, spec.radius),
            InpaintMethod::NavierStokes => inpaint::navier_stokes(plane, &domain, h, w, NS_ITERATIONS),
            InpaintMethod::External => unreachable!(),
        }
    }
    Ok(ImageSample {
        image: quantize8(&Tensor::new([3, h, w], data)),
        ..img.clone()
    })
}

/// One attacked copy of `dataset` per spec, in spec order.
pub fn sweep(dataset: &[ImageSample], specs: &[AttackSpec]) -> Result<Vec<Vec<ImageSample>>> {
    specs
        .iter()
        .map(|spec| dataset.par_iter().map(|s| spec.apply(s)).collect::<Result<Vec<_>>>())
        .collect()
}

/// Blur kernel sizes 3 to 13.
pub fn blur_family() -> Vec<AttackSpec> {
    (3..=13).step_by(2).map(|k| AttackSpec::Degrade(DegradationSpec::blur(k))).collect()
}

/// JPEG qualities 15 to 90.
pub fn jpeg_family() -> Vec<AttackSpec> {
    [15, 30, 50, 70, 90].into_iter().map(|q| AttackSpec::Degrade(DegradationSpec::jpeg(q))).collect()
}

/// Noise std 5 to 30 on the 0–255 scale.
pub fn noise_family(seed: u64) -> Vec<AttackSpec> {
    (5..=30)
        .step_by(5)
        .map(|s| AttackSpec::Degrade(DegradationSpec::noise(s as f64, seed)))
        .collect()
}

/// Degradation families swept for robustness curves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Blur,
    Noise,
    Jpeg,
    Recapture,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Blur, Family::Noise, Family::Jpeg, Family::Recapture];

    pub fn name(self) -> &'static str {
        match self {
            Family::Blur => "blur",
            Family::Noise => "noise",
            Family::Jpeg => "jpeg",
            Family::Recapture => "recapture",
        }
    }

    pub fn specs(self, seed: u64) -> Vec<AttackSpec> {
        match self {
            Family::Blur => blur_family(),
            Family::Noise => noise_family(seed),
            Family::Jpeg => jpeg_family(),
            Family::Recapture => vec![AttackSpec::Degrade(DegradationSpec::recapture())],
        }
    }

    /// Family and x-axis value of `spec`, if it belongs to one.
    pub fn of(spec: &AttackSpec) -> Option<(Family, f64)> {
        let AttackSpec::Degrade(d) = spec else { return None };
        let family = match d.kind {
            DegradationKind::GaussianBlur => Family::Blur,
            DegradationKind::GaussianNoise => Family::Noise,
            DegradationKind::Jpeg => Family::Jpeg,
            DegradationKind::Recapture => Family::Recapture,
            DegradationKind::None => return None,
        };
        Some((family, d.param))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown degradation family `{s}`")))
    }
}

/// Directory of an attacked copy of the dataset at `root`.
pub fn attack_dir(root: &Path, spec: &AttackSpec) -> PathBuf {
    root.join("attacks").join(spec.slug())
}

/// Writes an attacked dataset in the standard layout under
/// `root/attacks/<slug>/`.
pub fn save_attacked(root: &Path, spec: &AttackSpec, samples: &[ImageSample], split: &SplitManifest) -> Result<PathBuf> {
    let dir = attack_dir(root, spec);
    save_dataset(&dir, samples, split)?;
    Ok(dir)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
