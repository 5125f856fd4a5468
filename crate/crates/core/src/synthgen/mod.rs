//! Seeded synthetic vector-map scenes, BEV rasterization and the on-disk
//! dataset format.

mod dataset;
mod raster;
mod scene;

pub use dataset::{
    decode_raster, encode_raster, generate_dataset, read_dataset, read_meta, write_dataset, DatasetMeta, Scene,
    DATASET_FORMAT_VERSION, META_FILE, RASTER_MAGIC, SCENES_FILE,
};
pub use raster::{point_segment_dist, rasterize, BevRaster, RasterDiagnostic, RasterSpec};
pub use scene::{
    generate_indexed_scene, generate_scene, generate_scene_with, scene_rng, CountRange, GeneratedScene, SceneConfig,
};
