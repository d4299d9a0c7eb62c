//! Adversarial self-supervision of visual-question-answering attention.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
pub mod params;
mod binio;
pub mod data;
pub mod maps;
pub mod model;
pub mod explainers;
pub mod adversary;
pub mod matchers;
pub mod metrics;
pub mod trainer;
pub mod report;
pub mod checks;

/// Independent stream seed for item `index` of a run seeded with `seed`.
pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03)
}
