//! Datasets: manifest ingestion, preprocessing, PNG I/O and the synthetic
//! texture generator.

mod image_io;
mod manifest;
mod preprocess;
mod synth;

pub use image_io::{read_png, write_png};
pub use manifest::{Label, Manifest, ManifestRow, Split, MANIFEST_HEADER};
pub use preprocess::{
    center_crop, crop, equalize_histogram, grayscale, preprocess, resize_bilinear, PreprocessSpec,
};
pub use synth::{generate_synthetic, texture, write_synthetic, AnomalyType, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// One labelled image. `image` holds the decoded pixels before preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub split: Split,
    pub anomaly_type: Option<String>,
    pub image: ImageTensor,
}

impl Sample {
    pub fn is_anomalous(&self) -> bool {
        self.label == Label::Anomalous
    }
}

/// An in-memory labelled dataset spanning all three splits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Copy with every image passed through `spec`.
    pub fn preprocessed(&self, spec: &PreprocessSpec) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    image: preprocess(&s.image, spec)?,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    /// Training-split images; the split must be non-empty.
    pub fn train_images(&self) -> Result<Vec<ImageTensor>> {
        let v: Vec<ImageTensor> = self.split(Split::Train).map(|s| s.image.clone()).collect();
        if v.is_empty() {
            return Err(Error::EmptyDataset("manifest has no train rows".into()));
        }
        Ok(v)
    }
}
