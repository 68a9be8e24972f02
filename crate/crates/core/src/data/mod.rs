pub mod dataset;
pub mod errormap;
pub mod netpbm;
pub mod synth;

pub use dataset::{load_all, load_dataset, manifest_path, write_dataset, Batch, DepthSample, Manifest};
pub use errormap::write_error_map;
pub use synth::{gen_synthetic, synthetic_set, HoleMode, SceneSpec};
pub use netpbm::{read_pgm, read_ppm, write_pgm16, write_pgm8, write_ppm, Gray16, Gray8, Image, Rgb8};
