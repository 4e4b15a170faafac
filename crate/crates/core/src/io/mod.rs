//! Weight checkpoints and netpbm image files.

mod netpbm;
mod weights;

pub use netpbm::{
    decode_pgm, decode_ppm, encode_label_pgm, encode_palette_ppm, encode_ppm, palette_color,
    read_label_pgm, read_ppm, write_label_pgm, write_palette_ppm, write_ppm, GrayImage,
};
pub use weights::{
    apply_weights, decode_weights, encode_weights, load_weights, read_weights, save_weights,
    WeightEntry, WEIGHT_DTYPE_F32, WEIGHT_MAGIC, WEIGHT_VERSION,
};
