//! Images, PGM files, noise simulators and synthetic datasets.

mod image;
mod manifest;
mod noise;
mod pgm;
mod synth;

pub use image::{Image, LevelSet};
pub use manifest::{read_manifest, write_manifest};
pub use noise::{
    add_gaussian, add_mixed, add_poisson, add_salt_pepper, poisson_levels, NoiseSpec,
    CLAMP_WARN_FRACTION,
};
pub use pgm::{decode_pgm, encode_pgm, load_pgm, save_pgm};
pub use synth::{gen_synthetic_dataset, synth_image};
