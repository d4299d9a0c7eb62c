//! Procedural shapes-VQA data with exact reference attention.

mod container;
mod synth;

pub use container::{decode, encode, read_container, write_container, CONTAINER_MAGIC};
pub use synth::{
    answer_label, generate, vocabulary, Color, Dataset, DatasetSpec, Shape, Template, VqaSample,
    ANSWER_CLASSES, VOCAB_SIZE,
};
