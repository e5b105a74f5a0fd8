//! The five splicing approaches: vertical, horizontal, free (rectangle
//! paste), and the two removal variants that cut out a strip and join the
//! remaining parts.
//!
//! Masks follow the junction convention: only pixels within `⌊band / 2⌋`
//! (Chebyshev distance) of a seam are marked.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{quantize8, ImageSample, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Approach {
    Vertical,
    Horizontal,
    Free,
    VerticalRemoval,
    HorizontalRemoval,
}

impl Approach {
    pub const ALL: [Approach; 5] = [
        Approach::Vertical,
        Approach::Horizontal,
        Approach::Free,
        Approach::VerticalRemoval,
        Approach::HorizontalRemoval,
    ];

    pub fn num_sources(self) -> usize {
        match self {
            Approach::Vertical | Approach::Horizontal | Approach::Free => 2,
            Approach::VerticalRemoval | Approach::HorizontalRemoval => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Approach::Vertical => "vertical",
            Approach::Horizontal => "horizontal",
            Approach::Free => "free",
            Approach::VerticalRemoval => "vertical-removal",
            Approach::HorizontalRemoval => "horizontal-removal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// Seam position: a column for vertical splices, a row for horizontal
    /// ones. The second source contributes everything from `at` onwards.
    Cut { at: usize },
    /// Copies the `width × height` block at `(src_x, src_y)` of the second
    /// source onto the first at `(dst_x, dst_y)`.
    Paste {
        src_x: usize,
        src_y: usize,
        width: usize,
        height: usize,
        dst_x: usize,
        dst_y: usize,
    },
    /// Removes columns (or rows) `start..end`.
    Remove { start: usize, end: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpliceRecipe {
    pub approach: Approach,
    pub source_ids: Vec<String>,
    pub geometry: Geometry,
    pub junction_band_width: usize,
    /// Blend the seam with a 3-px linear ramp.
    pub feather: bool,
    pub seed: u64,
}

/// An axis-aligned seam segment in output pixel coordinates. Vertical
/// segments sit at column `pos` and span rows `from..=to`.
#[derive(Clone, Copy, Debug)]
struct Seam {
    vertical: bool,
    pos: usize,
    from: usize,
    to: usize,
}

fn geometry_err(msg: impl Into<String>) -> Error {
    Error::Geometry(msg.into())
}

impl SpliceRecipe {
    /// Output `(height, width)` given the first source's dimensions.
    fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match (self.approach, &self.geometry) {
            (Approach::VerticalRemoval, Geometry::Remove { start, end }) => (h, w - (end - start)),
            (Approach::HorizontalRemoval, Geometry::Remove { start, end }) => (h - (end - start), w),
            _ => (h, w),
        }
    }

    fn validate(&self, sources: &[&ImageSample]) -> Result<()> {
        let need = self.approach.num_sources();
        if self.source_ids.len() != need || sources.len() != need {
            return Err(Error::InvalidArgument(format!(
                "{} splicing needs {need} source(s), recipe names {} and {} were given",
                self.approach.name(),
                self.source_ids.len(),
                sources.len()
            )));
        }
        for (id, s) in self.source_ids.iter().zip(sources) {
            if *id != s.id {
                return Err(Error::InvalidArgument(format!(
                    "source `{}` does not match recipe id `{id}`",
                    s.id
                )));
            }
        }
        if self.junction_band_width == 0 {
            return Err(Error::InvalidArgument("junction band width must be positive".into()));
        }
        let (h, w) = (sources[0].height(), sources[0].width());
        match (self.approach, &self.geometry) {
            (Approach::Vertical | Approach::Horizontal, Geometry::Cut { at }) => {
                if (sources[1].height(), sources[1].width()) != (h, w) {
                    return Err(Error::Shape(format!(
                        "sources differ in size: {h}×{w} vs {}×{}",
                        sources[1].height(),
                        sources[1].width()
                    )));
                }
                let extent = if self.approach == Approach::Vertical { w } else { h };
                if *at == 0 || *at >= extent {
                    return Err(geometry_err(format!("cut at {at} outside 1..{extent}")));
                }
            }
            (
                Approach::Free,
                Geometry::Paste {
                    src_x,
                    src_y,
                    width,
                    height,
                    dst_x,
                    dst_y,
                },
            ) => {
                let (sh, sw) = (sources[1].height(), sources[1].width());
                if *width == 0 || *height == 0 {
                    return Err(geometry_err("empty paste rectangle"));
                }
                if src_x + width > sw || src_y + height > sh {
                    return Err(geometry_err(format!(
                        "donor block {width}×{height} at ({src_x}, {src_y}) exceeds {sw}×{sh} source"
                    )));
                }
                if *dst_x == 0 || *dst_y == 0 || dst_x + width >= w || dst_y + height >= h {
                    return Err(geometry_err(format!(
                        "paste block {width}×{height} at ({dst_x}, {dst_y}) must lie strictly inside {w}×{h}"
                    )));
                }
            }
            (Approach::VerticalRemoval | Approach::HorizontalRemoval, Geometry::Remove { start, end }) => {
                let extent = if self.approach == Approach::VerticalRemoval { w } else { h };
                if *start == 0 || end <= start || *end >= extent {
                    return Err(geometry_err(format!(
                        "removal {start}..{end} must leave both sides of 0..{extent} non-empty"
                    )));
                }
            }
            (a, g) => {
                return Err(geometry_err(format!("{} splicing cannot use {g:?}", a.name())));
            }
        }
        Ok(())
    }

    fn seams(&self, h: usize, w: usize) -> Vec<Seam> {
        match (self.approach, &self.geometry) {
            (Approach::Vertical, Geometry::Cut { at }) | (Approach::VerticalRemoval, Geometry::Remove { start: at, .. }) => {
                vec![Seam {
                    vertical: true,
                    pos: *at,
                    from: 0,
                    to: h - 1,
                }]
            }
            (Approach::Horizontal, Geometry::Cut { at })
            | (Approach::HorizontalRemoval, Geometry::Remove { start: at, .. }) => vec![Seam {
                vertical: false,
                pos: *at,
                from: 0,
                to: w - 1,
            }],
            (
                Approach::Free,
                Geometry::Paste {
                    width,
                    height,
                    dst_x,
                    dst_y,
                    ..
                },
            ) => {
                let (x0, y0, x1, y1) = (*dst_x, *dst_y, dst_x + width, dst_y + height);
                vec![
                    Seam { vertical: true, pos: x0, from: y0, to: y1 },
                    Seam { vertical: true, pos: x1, from: y0, to: y1 },
                    Seam { vertical: false, pos: y0, from: x0, to: x1 },
                    Seam { vertical: false, pos: y1, from: x0, to: x1 },
                ]
            }
            _ => unreachable!("validated geometry"),
        }
    }
}

/// Draws a valid random recipe for `approach` given the source dimensions.
pub fn random_recipe(
    approach: Approach,
    source_ids: Vec<String>,
    dims: (usize, usize),
    donor_dims: (usize, usize),
    band: usize,
    rng: &mut impl Rng,
) -> SpliceRecipe {
    let (h, w) = dims;
    // Keep seams away from the border so the band is never clipped.
    let margin = (band / 2 + 1).max(w.min(h) / 8);
    let geometry = match approach {
        Approach::Vertical => Geometry::Cut {
            at: rng.gen_range(margin..w - margin),
        },
        Approach::Horizontal => Geometry::Cut {
            at: rng.gen_range(margin..h - margin),
        },
        Approach::Free => {
            let (dh, dw) = donor_dims;
            let max_w = (w - 2 * margin).min(dw).max(2);
            let max_h = (h - 2 * margin).min(dh).max(2);
            let (top_w, top_h) = (max_w.min(w / 2).max(2), max_h.min(h / 2).max(2));
            let width = rng.gen_range((top_w / 3).max(2)..=top_w);
            let height = rng.gen_range((top_h / 3).max(2)..=top_h);
            Geometry::Paste {
                src_x: rng.gen_range(0..=dw - width),
                src_y: rng.gen_range(0..=dh - height),
                width,
                height,
                dst_x: rng.gen_range(margin..=w - margin - width),
                dst_y: rng.gen_range(margin..=h - margin - height),
            }
        }
        Approach::VerticalRemoval | Approach::HorizontalRemoval => {
            let extent = if approach == Approach::VerticalRemoval { w } else { h };
            let len = rng.gen_range((extent / 10).max(1)..=(extent / 4).max(1));
            let start = rng.gen_range(margin..extent - margin - len);
            Geometry::Remove {
                start,
                end: start + len,
            }
        }
    };
    SpliceRecipe {
        approach,
        source_ids,
        geometry,
        junction_band_width: band,
        feather: rng.gen_bool(0.5),
        seed: rng.gen(),
    }
}

/// Builds the spliced sample described by `recipe`. The output image is
/// quantized to 8-bit levels. `rng` drives the per-pixel jitter of the
/// feathered seam.
pub fn generate_splice(recipe: &SpliceRecipe, sources: &[&ImageSample], rng: &mut impl Rng) -> Result<ImageSample> {
    recipe.validate(sources)?;
    let a = &sources[0].image;
    let (h, w) = (sources[0].height(), sources[0].width());
    let (oh, ow) = recipe.output_dims(h, w);

    // `base` is the content before the seam, `new` the content after it; the
    // blend weight `alpha` selects `new`.
    let px = |img: &Tensor, c: usize, y: usize, x: usize| img.data()[(c * img.shape()[1] + y) * img.shape()[2] + x];
    let step = |t: isize| -> f64 {
        if recipe.feather {
            ((t as f64 + 2.0) / 4.0).clamp(0.0, 1.0)
        } else if t >= 0 {
            1.0
        } else {
            0.0
        }
    };
    let mut out = vec![0.0; 3 * oh * ow];
    let mut region = vec![0.0; oh * ow];
    // Sub-quantization jitter on blended pixels so feathered seams are not
    // exactly reproducible from the recipe alone.
    let jitter = |rng: &mut dyn rand::RngCore| -> f64 {
        if recipe.feather {
            (rng.next_u32() as f64 / u32::MAX as f64 - 0.5) / 255.0
        } else {
            0.0
        }
    };
    for y in 0..oh {
        for x in 0..ow {
            let (alpha, base, new): (f64, [f64; 3], [f64; 3]) = match (recipe.approach, &recipe.geometry) {
                (Approach::Vertical, Geometry::Cut { at }) => {
                    let b = &sources[1].image;
                    let t = x as isize - *at as isize;
                    (step(t), std::array::from_fn(|c| px(a, c, y, x)), std::array::from_fn(|c| px(b, c, y, x)))
                }
                (Approach::Horizontal, Geometry::Cut { at }) => {
                    let b = &sources[1].image;
                    let t = y as isize - *at as isize;
                    (step(t), std::array::from_fn(|c| px(a, c, y, x)), std::array::from_fn(|c| px(b, c, y, x)))
                }
                (
                    Approach::Free,
                    Geometry::Paste {
                        src_x,
                        src_y,
                        width,
                        height,
                        dst_x,
                        dst_y,
                    },
                ) => {
                    let b = &sources[1].image;
                    let (bh, bw) = (sources[1].height() as isize, sources[1].width() as isize);
                    let (x0, y0) = (*dst_x as isize, *dst_y as isize);
                    let (x1, y1) = (x0 + *width as isize, y0 + *height as isize);
                    let (xi, yi) = (x as isize, y as isize);
                    let depth = (xi - x0).min(x1 - xi).min(yi - y0).min(y1 - yi);
                    let alpha = if recipe.feather {
                        ((depth as f64 + 2.0) / 4.0).clamp(0.0, 1.0)
                    } else if xi >= x0 && xi < x1 && yi >= y0 && yi < y1 {
                        1.0
                    } else {
                        0.0
                    };
                    let sx = (*src_x as isize + xi - x0).clamp(0, bw - 1) as usize;
                    let sy = (*src_y as isize + yi - y0).clamp(0, bh - 1) as usize;
                    (alpha, std::array::from_fn(|c| px(a, c, y, x)), std::array::from_fn(|c| px(b, c, sy, sx)))
                }
                (Approach::VerticalRemoval, Geometry::Remove { start, end }) => {
                    let t = x as isize - *start as isize;
                    let shifted = x + (end - start);
                    (
                        step(t),
                        std::array::from_fn(|c| px(a, c, y, x.min(w - 1))),
                        std::array::from_fn(|c| px(a, c, y, shifted.min(w - 1))),
                    )
                }
                (Approach::HorizontalRemoval, Geometry::Remove { start, end }) => {
                    let t = y as isize - *start as isize;
                    let shifted = y + (end - start);
                    (
                        step(t),
                        std::array::from_fn(|c| px(a, c, y.min(h - 1), x)),
                        std::array::from_fn(|c| px(a, c, shifted.min(h - 1), x)),
                    )
                }
                _ => unreachable!("validated geometry"),
            };
            let blended = alpha > 0.0 && alpha < 1.0;
            for c in 0..3 {
                let mut v = (1.0 - alpha) * base[c] + alpha * new[c];
                if blended {
                    v += jitter(rng);
                }
                out[(c * oh + y) * ow + x] = v;
            }
            region[y * ow + x] = if alpha >= 0.5 { 1.0 } else { 0.0 };
        }
    }

    let mask = junction_mask(&recipe.seams(oh, ow), recipe.junction_band_width / 2, oh, ow);
    let region_mask = match recipe.approach {
        Approach::VerticalRemoval | Approach::HorizontalRemoval => mask.clone(),
        _ => Tensor::new([oh, ow], region),
    };
    let id = format!("{}-{}-{:016x}", recipe.approach.name(), recipe.source_ids.join("+"), recipe.seed);
    let mut sample = ImageSample::new(id, quantize8(&Tensor::new([3, oh, ow], out)), mask, Label::Spliced)?;
    sample.region_mask = Some(region_mask);
    Ok(sample)
}

/// Marks every pixel within Chebyshev distance `half` of a seam by filling
/// one rectangle per seam segment.
fn junction_mask(seams: &[Seam], half: usize, h: usize, w: usize) -> Tensor {
    let mut m = Tensor::zeros([h, w]);
    for s in seams {
        let (x_lo, x_hi, y_lo, y_hi) = if s.vertical {
            (s.pos.saturating_sub(half), s.pos + half, s.from.saturating_sub(half), s.to + half)
        } else {
            (s.from.saturating_sub(half), s.to + half, s.pos.saturating_sub(half), s.pos + half)
        };
        for y in y_lo..=y_hi.min(h - 1) {
            for x in x_lo..=x_hi.min(w - 1) {
                m.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    m
}

/// Independent reference for the junction mask: enumerates every seam
/// pixel and marks all image pixels within Chebyshev distance `half`.
pub fn junction_oracle(recipe: &SpliceRecipe, h: usize, w: usize) -> Tensor {
    let mut seam_pixels = Vec::new();
    for s in recipe.seams(h, w) {
        for t in s.from..=s.to {
            seam_pixels.push(if s.vertical { (s.pos as isize, t as isize) } else { (t as isize, s.pos as isize) });
        }
    }
    let half = (recipe.junction_band_width / 2) as isize;
    Tensor::from_fn([h, w], |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let hit = seam_pixels
            .iter()
            .any(|&(sx, sy)| (sx - x).abs().max((sy - y).abs()) <= half);
        if hit {
            1.0
        } else {
            0.0
        }
    })
}
