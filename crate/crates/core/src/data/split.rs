//! Stratified train/test splitting and pristine balancing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageSample, Label};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ratio: f64,
    pub seed: u64,
}

/// Splits `samples` into train and test sets, stratified by label.
///
/// The overall train count is `round(ratio · n)`. Each class receives its
/// floor share and the remaining slots go to the classes with the largest
/// fractional parts, so both classes keep at least one sample per side.
pub fn make_split(samples: &[ImageSample], ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let classes = [Label::Pristine, Label::Spliced];
    let mut groups: Vec<Vec<&str>> = classes
        .iter()
        .map(|&l| samples.iter().filter(|s| s.label == l).map(|s| s.id.as_str()).collect())
        .collect();
    for (l, g) in classes.iter().zip(&groups) {
        if g.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 samples per class, {l:?} has {}",
                g.len()
            )));
        }
    }
    let n = samples.len();
    let total = ((ratio * n as f64).round() as usize).clamp(2, n - 2);
    let exact: Vec<f64> = groups.iter().map(|g| ratio * g.len() as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    // Stable sort keeps class order as the tie-break.
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = total.saturating_sub(counts.iter().sum());
    for &c in order.iter().cycle().take(2 * groups.len()) {
        if left == 0 {
            break;
        }
        if counts[c] < groups[c].len() - 1 {
            counts[c] += 1;
            left -= 1;
        }
    }
    for (c, g) in counts.iter_mut().zip(&groups) {
        *c = (*c).clamp(1, g.len() - 1);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (g, &k) in groups.iter_mut().zip(&counts) {
        g.shuffle(&mut rng);
        train.extend(g[..k].iter().map(|s| s.to_string()));
        test.extend(g[k..].iter().map(|s| s.to_string()));
    }
    Ok(SplitManifest {
        train_ids: train,
        test_ids: test,
        ratio,
        seed,
    })
}

/// Returns all spliced samples plus an equally sized random subset of the
/// pristine pool, drawn without replacement.
pub fn balance_pristine(spliced: &[ImageSample], pristine_pool: &[ImageSample], seed: u64) -> Result<Vec<ImageSample>> {
    if pristine_pool.len() < spliced.len() {
        return Err(Error::InvalidArgument(format!(
            "pristine pool of {} cannot balance {} spliced samples",
            pristine_pool.len(),
            spliced.len()
        )));
    }
    if let Some(s) = spliced.iter().find(|s| s.label != Label::Spliced) {
        return Err(Error::InvalidArgument(format!("`{}` is not spliced", s.id)));
    }
    if let Some(s) = pristine_pool.iter().find(|s| s.label != Label::Pristine) {
        return Err(Error::InvalidArgument(format!("`{}` is not pristine", s.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, pristine_pool.len(), spliced.len()).into_vec();
    picks.sort_unstable();
    let mut out = spliced.to_vec();
    out.extend(picks.into_iter().map(|i| pristine_pool[i].clone()));
    Ok(out)
}
