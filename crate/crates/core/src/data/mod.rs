//! Dataset model, on-disk layout, splitting, and synthetic splice generation.

mod forge;
mod io;
mod splice;
mod split;
pub mod synth;

pub use synth::synth_corpus;

pub use forge::{forge, load_sources, procedural_sources, ForgeConfig, Forged};
pub use io::{
    load_dataset, load_manifest, load_sample, rgb_to_tensor, save_dataset, tensor_to_gray, tensor_to_rgb, DatasetManifest,
    SplitName, Splits,
};
pub use splice::{generate_splice, junction_oracle, random_recipe, Approach, Geometry, SpliceRecipe};
pub use split::{balance_pristine, make_split, SplitManifest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Pristine,
    Spliced,
}

impl Label {
    pub fn is_spliced(self) -> bool {
        self == Label::Spliced
    }
}

/// One RGB image with its junction mask and image-level label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]`, values in `{0, 1}`.
    pub mask: Tensor,
    pub label: Label,
    /// Full donor-region mask, when the generator knows it.
    pub region_mask: Option<Tensor>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor, label: Label) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image,
            mask,
            label,
            region_mask: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn pristine(id: impl Into<String>, image: Tensor) -> Result<Self> {
        let (h, w) = match image.shape() {
            &[3, h, w] => (h, w),
            s => return Err(Error::Shape(format!("image must be [3, H, W], got {s:?}"))),
        };
        Self::new(id, image, Tensor::zeros([h, w]), Label::Pristine)
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let &[c, h, w] = self.image.shape() else {
            return Err(Error::Shape(format!(
                "`{}`: image must be [3, H, W], got {:?}",
                self.id,
                self.image.shape()
            )));
        };
        if c != 3 {
            return Err(Error::Shape(format!("`{}`: expected 3 channels, got {c}", self.id)));
        }
        if self.mask.shape() != [h, w] {
            return Err(Error::Shape(format!(
                "`{}`: mask {:?} does not match image {h}×{w}",
                self.id,
                self.mask.shape()
            )));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("`{}`: image values outside [0, 1]", self.id)));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("`{}`: mask is not binary", self.id)));
        }
        let any = self.mask.data().contains(&1.0);
        match (self.label, any) {
            (Label::Pristine, true) => Err(Error::InvalidArgument(format!(
                "`{}`: pristine sample with a non-empty mask",
                self.id
            ))),
            (Label::Spliced, false) => Err(Error::InvalidArgument(format!(
                "`{}`: spliced sample with an empty mask",
                self.id
            ))),
            _ => Ok(()),
        }
    }

    /// Rounds the image to 8-bit levels.
    pub fn quantize(&mut self) {
        self.image = quantize8(&self.image);
    }
}

/// Rounds values to the nearest multiple of 1/255 after clamping to `[0, 1]`.
pub fn quantize8(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
