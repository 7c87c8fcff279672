//! Datasets, cube I/O and preprocessing, cube-level unmixing, rendering and
//! evaluation.

pub mod cube;
pub mod dataset;
pub mod evaluate;
pub mod preprocess;
pub mod render;
pub mod unmix;

pub use cube::{decode_cube, encode_cube, load_cube, save_cube, CubeKind, DataCube};
pub use dataset::{read_dataset, split_dataset, split_indices, write_dataset};
pub use evaluate::{evaluate, EvalReport};
pub use preprocess::{dark_subtract, extract_regions, foreground_mask, sensor_correct, Foreground, Mask, Region};
pub use render::{render_map, Map2d};
pub use unmix::{unmix_cube, AbundanceMaps, Engine, Unmixed};
