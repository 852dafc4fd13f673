//! Parameter-efficient fine-tuning of a small vision transformer.
//!
//! The crate covers the whole stack: a tape-based autodiff engine
//! ([`graph`]), a pre-norm ViT backbone ([`vit`]), low-rank adapters with
//! merge/unmerge ([`lora`]), a linear classification head ([`head`]),
//! synthetic few-shot data ([`data`]), training loops with learning-rate
//! sweeps and seed aggregation ([`trainer`]), and the invariant checks and
//! reports behind the `lorafit` binary ([`verify`], [`report`]).

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod grad_check;
pub mod graph;
pub mod head;
pub mod kv;
pub mod lora;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod vit;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Precision, Tensor};

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
