//! Datasets: manifests, the raw image container, few-shot sampling and the
//! synthetic transfer benchmark.

pub mod dataset;
pub mod episode;
pub mod image;
pub mod manifest;
pub mod synth;

pub use dataset::Dataset;
pub use episode::{fraction_subsample, sample_balanced, sample_episode, shot_fraction, Episode};
pub use image::{decode_image, encode_image, load_image, write_image};
pub use manifest::{DatasetManifest, Item, Norm, Split};
pub use synth::{SynthSpec, Style, Task};
