//! Binary tensor files, dataset manifests, the synthetic texture generator
//! and the two-view augmentation pipeline.

mod augment;
mod manifest;
mod synth;
mod tensor_file;

pub use augment::{augment_twice, AugmentationConfig, View};
pub use manifest::{
    load_dataset, load_split, ClassEntry, DatasetManifest, LabeledImages, Split, MANIFEST_FILE,
};
pub use synth::{grating, split_of, synth_generate, SynthSpec};
pub use tensor_file::{
    decode_tensor, encode_tensor, read_tensor_file, write_tensor_file, TENSOR_MAGIC,
};
