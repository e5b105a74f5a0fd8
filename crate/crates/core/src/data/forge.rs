//! Building a balanced, split dataset from a pool of pristine sources.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::blot_image;
use super::{balance_pristine, generate_splice, make_split, quantize8, random_recipe, rgb_to_tensor, Approach, ImageSample, SplitManifest};
use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub approaches: Vec<Approach>,
    pub per_approach: usize,
    /// `(H, W)` every source is resampled to.
    pub size: (usize, usize),
    pub band: usize,
    /// Train fraction.
    pub ratio: f64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            approaches: Approach::ALL.to_vec(),
            per_approach: 4,
            size: (64, 64),
            band: 3,
            ratio: 0.7,
        }
    }
}

impl ForgeConfig {
    pub fn num_spliced(&self) -> usize {
        self.approaches.len() * self.per_approach
    }

    /// Donors for every splice plus an equal number of pristine images.
    pub fn sources_needed(&self) -> usize {
        let donors: usize = self.approaches.iter().map(|a| a.num_sources() * self.per_approach).sum();
        donors + self.num_spliced()
    }
}

/// Spliced and pristine samples with their split.
pub struct Forged {
    pub samples: Vec<ImageSample>,
    pub split: SplitManifest,
    /// Splices generated per approach.
    pub counts: Vec<(Approach, usize)>,
}

/// Draws donors from `sources` (in seeded order, each used once), splices
/// `per_approach` images per approach, balances them with pristine images
/// from the remaining sources and splits the result.
pub fn forge(sources: &[ImageSample], cfg: &ForgeConfig, seed: u64) -> Result<Forged> {
    let need = cfg.sources_needed();
    if sources.len() < need {
        return Err(Error::InvalidArgument(format!(
            "insufficient sources: {} splices per approach need {need} pristine images, found {}",
            cfg.per_approach,
            sources.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&ImageSample> = sources.iter().collect();
    order.shuffle(&mut rng);
    let mut next = order.into_iter();
    let mut spliced = Vec::with_capacity(cfg.num_spliced());
    let mut counts = Vec::new();
    for &approach in &cfg.approaches {
        for _ in 0..cfg.per_approach {
            let donors: Vec<&ImageSample> = next.by_ref().take(approach.num_sources()).collect();
            let ids = donors.iter().map(|s| s.id.clone()).collect();
            let dims = (donors[0].height(), donors[0].width());
            let donor_dims = (donors[donors.len() - 1].height(), donors[donors.len() - 1].width());
            let recipe = random_recipe(approach, ids, dims, donor_dims, cfg.band, &mut rng);
            spliced.push(generate_splice(&recipe, &donors, &mut rng)?);
        }
        counts.push((approach, cfg.per_approach));
    }
    let pool: Vec<ImageSample> = next.cloned().collect();
    let samples = balance_pristine(&spliced, &pool, seed)?;
    let split = make_split(&samples, cfg.ratio, seed)?;
    Ok(Forged { samples, split, counts })
}

/// `n` procedural blot images named `src-00000`, `src-00001`, ...
pub fn procedural_sources(n: usize, size: (usize, usize), seed: u64) -> Result<Vec<ImageSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| ImageSample::pristine(format!("src-{i:05}"), blot_image(size.0, size.1, &mut rng)))
        .collect()
}

/// Every PNG or JPEG in `dir`, sorted by file name, resampled to `size` and
/// named by file stem.
pub fn load_sources(dir: &Path, size: (usize, usize)) -> Result<Vec<ImageSample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
            let img = image::open(p).map_err(|e| Error::Load {
                id: id.clone(),
                reason: e.to_string(),
            })?;
            let t = rgb_to_tensor(&img.to_rgb8());
            let (h, w) = (t.shape()[1], t.shape()[2]);
            let t = if (h, w) == size {
                t
            } else {
                quantize8(&Tensor::new([3, size.0, size.1], resize_bilinear(t.data(), 3, h, w, size.0, size.1)))
            };
            ImageSample::pristine(id, t)
        })
        .collect()
}
