//! Procedural grayscale "blot" images: lanes of dark elliptical bands on a
//! textured background, stored as RGB with identical channels.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{generate_splice, quantize8, random_recipe, Approach, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Renders one `[3, h, w]` blot image with 8-bit levels.
pub fn blot_image(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let bg = rng.gen_range(0.7..0.95);
    let tilt_x = rng.gen_range(-0.1..0.1);
    let tilt_y = rng.gen_range(-0.1..0.1);
    let grain = Normal::new(0.0, rng.gen_range(0.01..0.04)).expect("finite std");

    let lanes = rng.gen_range(2..=5usize);
    let lane_w = w as f64 / lanes as f64;
    let mut bands = Vec::new();
    for lane in 0..lanes {
        let cx = (lane as f64 + 0.5) * lane_w + rng.gen_range(-0.1..0.1) * lane_w;
        for _ in 0..rng.gen_range(1..=4) {
            bands.push((
                cx,
                rng.gen_range(0.1..0.9) * h as f64,
                rng.gen_range(0.25..0.45) * lane_w,
                rng.gen_range(0.02..0.06) * h as f64 + 1.0,
                rng.gen_range(0.3..0.8),
            ));
        }
    }

    let mut gray = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
            let mut val = bg + tilt_x * u + tilt_y * v + grain.sample(rng);
            for &(cx, cy, rx, ry, depth) in &bands {
                let d2 = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
                val -= depth * (-d2 * d2).exp();
            }
            gray[y * w + x] = val;
        }
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    quantize8(&Tensor::new([3, h, w], data))
}

/// Procedural corpus of `h × w` blot images: `per_approach` splices for
/// each of `approaches`, then `n_pristine` untouched images. Donor images
/// are drawn fresh and never appear in the corpus. Removal splices come out
/// narrower (or shorter) than `h × w`.
pub fn synth_corpus(
    approaches: &[Approach],
    per_approach: usize,
    n_pristine: usize,
    dims: (usize, usize),
    band: usize,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    let (h, w) = dims;
    if h < 16 || w < 16 || band == 0 {
        return Err(Error::InvalidArgument(format!("images must be at least 16×16 with a positive band, got {h}×{w}, band {band}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(approaches.len() * per_approach + n_pristine);
    let mut donor = 0usize;
    for &approach in approaches {
        for _ in 0..per_approach {
            let sources: Vec<ImageSample> = (0..approach.num_sources())
                .map(|_| {
                    donor += 1;
                    ImageSample::pristine(format!("src{donor:05}"), blot_image(h, w, &mut rng))
                })
                .collect::<Result<_>>()?;
            let ids = sources.iter().map(|s| s.id.clone()).collect();
            let recipe = random_recipe(approach, ids, dims, dims, band, &mut rng);
            let refs: Vec<&ImageSample> = sources.iter().collect();
            out.push(generate_splice(&recipe, &refs, &mut rng)?);
        }
    }
    for i in 0..n_pristine {
        out.push(ImageSample::pristine(format!("pristine-{i:05}"), blot_image(h, w, &mut rng))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blots_are_gray_quantized_and_seeded() {
        let a = blot_image(24, 32, &mut ChaCha8Rng::seed_from_u64(5));
        let b = blot_image(24, 32, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 24, 32]);
        let n = 24 * 32;
        assert_eq!(a.data()[..n], a.data()[n..2 * n]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v) && (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
    }

    #[test]
    fn corpus_counts_and_seeding() {
        let a = synth_corpus(&Approach::ALL, 2, 3, (32, 32), 3, 1).unwrap();
        assert_eq!(a.len(), 13);
        assert_eq!(a.iter().filter(|s| s.label.is_spliced()).count(), 10);
        assert!(a.iter().filter(|s| s.label.is_spliced()).all(|s| s.mask.sum() > 0.0));
        assert_eq!(a, synth_corpus(&Approach::ALL, 2, 3, (32, 32), 3, 1).unwrap());
        let ids: std::collections::BTreeSet<_> = a.iter().map(|s| &s.id).collect();
        assert_eq!(ids.len(), a.len());
    }
}
