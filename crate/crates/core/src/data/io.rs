//! On-disk dataset layout:
//!
//! ```text
//! root/images/<id>.png         8-bit RGB
//! root/masks/<id>.png          8-bit gray, 0/255
//! root/masks_region/<id>.png   optional full-region mask
//! root/manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ImageSample, Label, SplitManifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub ids: Vec<String>,
    pub labels: BTreeMap<String, Label>,
    pub splits: Splits,
    pub ratio: f64,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn split_manifest(&self) -> SplitManifest {
        SplitManifest {
            train_ids: self.splits.train.clone(),
            test_ids: self.splits.test.clone(),
            ratio: self.ratio,
            seed: self.seed,
        }
    }

    pub fn ids_for(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.splits.train,
            SplitName::Test => &self.splits.test,
        }
    }
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

fn region_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks_region").join(format!("{id}.png"))
}

/// `[3, H, W]` tensor from 8-bit RGB.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

/// Rounds a `[3, H, W]` tensor to 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let &[3, h, w] = t.shape() else {
        panic!("expected [3, H, W], got {:?}", t.shape());
    };
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| to_u8(d[c * h * w + p])))
    })
}

/// Rounds an `[H, W]` tensor in `[0, 1]` to an 8-bit gray image.
pub fn tensor_to_gray(t: &Tensor) -> GrayImage {
    let &[h, w] = t.shape() else {
        panic!("expected [H, W], got {:?}", t.shape());
    };
    let d = t.data();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(d[y as usize * w + x as usize])]))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes samples and the manifest under `root`. Samples absent from both
/// split lists are still written and listed in `ids`.
pub fn save_dataset(root: &Path, samples: &[ImageSample], split: &SplitManifest) -> Result<DatasetManifest> {
    for dir in ["images", "masks", "masks_region"] {
        ensure_dir(&root.join(dir))?;
    }
    for s in samples {
        s.validate()?;
        tensor_to_rgb(&s.image).save(image_path(root, &s.id))?;
        tensor_to_gray(&s.mask).save(mask_path(root, &s.id))?;
        if let Some(r) = &s.region_mask {
            tensor_to_gray(r).save(region_path(root, &s.id))?;
        }
    }
    let manifest = DatasetManifest {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        labels: samples.iter().map(|s| (s.id.clone(), s.label)).collect(),
        splits: Splits {
            train: split.train_ids.clone(),
            test: split.test_ids.clone(),
        },
        ratio: split.ratio,
        seed: split.seed,
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_gray(path: &Path, id: &str, (h, w): (usize, usize)) -> Result<Tensor> {
    let m = image::open(path)
        .map_err(|e| Error::Load {
            id: id.to_string(),
            reason: format!("{}: {e}", path.display()),
        })?
        .to_luma8();
    if (m.height() as usize, m.width() as usize) != (h, w) {
        return Err(Error::Shape(format!(
            "`{id}`: mask {}×{} does not match image {h}×{w}",
            m.height(),
            m.width()
        )));
    }
    Ok(Tensor::new([h, w], m.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect()))
}

/// Loads one sample. Labels come from `labels` when known; otherwise an id
/// with a non-empty mask file is treated as spliced.
pub fn load_sample(root: &Path, id: &str, label: Option<Label>) -> Result<ImageSample> {
    let img = image::open(image_path(root, id))
        .map_err(|e| Error::Load {
            id: id.to_string(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let image = rgb_to_tensor(&img);
    let dims = (img.height() as usize, img.width() as usize);
    let mpath = mask_path(root, id);
    let mask = if mpath.exists() {
        Some(load_gray(&mpath, id, dims)?)
    } else {
        None
    };
    let label = label.unwrap_or(match &mask {
        Some(m) if m.sum() > 0.0 => Label::Spliced,
        _ => Label::Pristine,
    });
    let mask = match (mask, label) {
        (Some(m), _) => m,
        (None, Label::Pristine) => Tensor::zeros([dims.0, dims.1]),
        (None, Label::Spliced) => return Err(Error::MissingMask(id.to_string())),
    };
    let mut s = ImageSample::new(id, image, mask, label)?;
    let rpath = region_path(root, id);
    if rpath.exists() {
        s.region_mask = Some(load_gray(&rpath, id, dims)?);
    }
    Ok(s)
}

/// Loads the samples of one split in manifest order.
pub fn load_dataset(root: &Path, manifest: &SplitManifest, split: SplitName) -> Result<Vec<ImageSample>> {
    let labels = match load_manifest(root) {
        Ok(m) => m.labels,
        Err(Error::MissingFile(_)) => BTreeMap::new(),
        Err(e) => return Err(e),
    };
    let ids = match split {
        SplitName::Train => &manifest.train_ids,
        SplitName::Test => &manifest.test_ids,
    };
    ids.iter().map(|id| load_sample(root, id, labels.get(id).copied())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::blot_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pristine(id: &str, seed: u64) -> ImageSample {
        ImageSample::pristine(id, blot_image(8, 10, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
    }

    fn spliced(id: &str, seed: u64) -> ImageSample {
        let mut s = pristine(id, seed);
        s.mask.data_mut()[3] = 1.0;
        s.label = Label::Spliced;
        s
    }

    fn split(train: &[&str], test: &[&str]) -> SplitManifest {
        SplitManifest {
            train_ids: train.iter().map(|s| s.to_string()).collect(),
            test_ids: test.iter().map(|s| s.to_string()).collect(),
            ratio: 0.7,
            seed: 1,
        }
    }

    #[test]
    fn round_trip_in_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![pristine("a", 1), spliced("b", 2), pristine("c", 3), spliced("d", 4)];
        let m = split(&["c", "a", "b"], &["d"]);
        save_dataset(dir.path(), &samples, &m).unwrap();
        let train = load_dataset(dir.path(), &m, SplitName::Train).unwrap();
        assert_eq!(train.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["c", "a", "b"]);
        assert_eq!(train[0], samples[2]);
        assert_eq!(train[2], samples[1]);
        assert_eq!(load_manifest(dir.path()).unwrap().split_manifest(), m);
    }

    #[test]
    fn pristine_without_mask_gets_zero_mask() {
        let dir = tempfile::tempdir().unwrap();
        let m = split(&["a"], &[]);
        save_dataset(dir.path(), &[pristine("a", 1)], &m).unwrap();
        fs::remove_file(mask_path(dir.path(), "a")).unwrap();
        let s = load_dataset(dir.path(), &m, SplitName::Train).unwrap();
        assert_eq!(s[0].mask.sum(), 0.0);
    }

    #[test]
    fn missing_mask_and_corrupt_image_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = split(&["b"], &["c"]);
        save_dataset(dir.path(), &[spliced("b", 1), pristine("c", 2)], &m).unwrap();
        fs::remove_file(mask_path(dir.path(), "b")).unwrap();
        assert!(matches!(load_dataset(dir.path(), &m, SplitName::Train), Err(Error::MissingMask(id)) if id == "b"));
        fs::write(image_path(dir.path(), "c"), b"not a png").unwrap();
        assert!(matches!(load_dataset(dir.path(), &m, SplitName::Test), Err(Error::Load { id, .. }) if id == "c"));
    }

    #[test]
    fn mask_size_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = split(&["b"], &[]);
        save_dataset(dir.path(), &[spliced("b", 1)], &m).unwrap();
        GrayImage::new(3, 3).save(mask_path(dir.path(), "b")).unwrap();
        assert!(matches!(load_dataset(dir.path(), &m, SplitName::Train), Err(Error::Shape(_))));
    }
}
