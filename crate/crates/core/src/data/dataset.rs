use std::path::Path;

use rayon::prelude::*;

use crate::data::image::load_image;
use crate::data::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A manifest plus its images, normalized with the manifest's `#norm=` header.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

impl Dataset {
    /// `raw` holds pixels in `[0, 1]`, one image per manifest item.
    pub fn from_raw(manifest: DatasetManifest, raw: Vec<Tensor>) -> Result<Self> {
        manifest.validate()?;
        if raw.len() != manifest.items.len() {
            return Err(Error::InsufficientData(format!(
                "{} images for {} manifest items",
                raw.len(),
                manifest.items.len()
            )));
        }
        let channels = manifest.norm.mean.len();
        let images = raw
            .into_iter()
            .zip(&manifest.items)
            .map(|(mut t, it)| {
                if t.rank() != 3 || t.shape()[0] != channels {
                    return Err(Error::dim(format!(
                        "{}: shape {:?} does not match {channels} norm channels",
                        it.path,
                        t.shape()
                    )));
                }
                manifest.norm.apply(t.data_mut());
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, images })
    }

    /// Loads `<dir>/manifest.csv` and every referenced image.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(dir)?;
        let raw = manifest
            .items
            .par_iter()
            .map(|it| load_image(&dir.join(&it.path)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_raw(manifest, raw)
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn label(&self, i: usize) -> usize {
        self.manifest.items[i].label
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        self.manifest.indices(split)
    }
}
