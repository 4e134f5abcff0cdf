//! Samples, synthetic vessel generation, augmentation and on-disk datasets.

mod augment;
mod io;
mod synth;

pub use augment::{add_gaussian_noise, augment, color_jitter, rotate_sample, AugmentConfig};
pub use io::{
    load_dataset, load_image, load_mask, save_dataset, save_image, save_mask, DatasetManifest, ManifestEntry, Split,
};
pub use synth::{generate_synthetic_vessels, SynthParams};

use crate::elastic::Field2D;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// One image with its binary vessel mask and optional field-of-view mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, 3, H, W)`, values in `[0, 1]`.
    pub image: Tensor4,
    pub mask: Field2D,
    pub fov: Option<Field2D>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor4, mask: Field2D, fov: Option<Field2D>) -> Result<Self> {
        let id = id.into();
        let [n, c, h, w] = image.dims();
        if n != 1 || c != 3 {
            return Err(Error::Input(format!("sample '{id}': image must be (1, 3, H, W), got {:?}", image.dims())));
        }
        if mask.dims() != (h, w) {
            return Err(Error::shape(format!("sample '{id}' image {h}x{w}"), format!("mask {:?}", mask.dims())));
        }
        if !mask.is_binary() {
            return Err(Error::Input(format!("sample '{id}': mask is not binary")));
        }
        if let Some(f) = &fov {
            if f.dims() != (h, w) {
                return Err(Error::shape(format!("sample '{id}' image {h}x{w}"), format!("fov {:?}", f.dims())));
            }
            if !f.is_binary() {
                return Err(Error::Input(format!("sample '{id}': fov mask is not binary")));
            }
        }
        Ok(Sample { id, image, mask, fov })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}
