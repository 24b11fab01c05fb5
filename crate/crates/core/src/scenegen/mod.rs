//! Occluded stereo digit scenes: IDX loading, scene composition and
//! sharded dataset serialization.

mod dataset;
mod idx;
mod scene;

pub use dataset::{
    encode_record, generate_base, generate_dataset, generate_split, occlusion_deciles, Dataset, DatasetManifest,
    GenerateConfig, InputMode, SceneRecords, ShardInfo, Split, SplitInfo, FORMAT_VERSION, MANIFEST_FILE, RECORD_BYTES,
};
pub use idx::{encode_idx, load_mnist_dir, load_mnist_idx, parse_idx_images, parse_idx_labels, DigitSet};
pub use scene::{
    compose_scene, composite, render_stereo, synthetic_digits, valid_offsets, Disparity, Placement, ScenePool,
    SceneSample, CANVAS, CANVAS_PIXELS, DIGIT, IDENTITY_RESAMPLES, MAX_OCCLUSION, MIN_OCCLUSION, PLACEMENT_ATTEMPTS,
};
