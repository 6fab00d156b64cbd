//! Synthetic bodies, samples of every dataset type, and their serialization.

mod augment;
mod body;
mod io;
mod render;
mod sample;

pub use augment::{
    augment_and_project, project_orthographic, rotate_points, AugmentDraw, ProjectionFrame,
};
pub use body::{Articulation, BodyModel, JOINT_ANCHORS, JOINT_NAMES, SKELETON_JOINTS};
pub use io::{
    load_samples, read_samples, save_samples, write_samples, SAMPLE_MAGIC, SAMPLE_VERSION,
};
pub use render::{background, part_color, render_splats, Splat, BACKGROUND_LEVEL, BLOB_SIGMA};
pub use sample::{
    dataset_plan, mocap_to_sample, DatasetType, PoseSample, SampleGenerator, PSEUDO_LABEL_NOISE,
};
