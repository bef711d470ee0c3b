//! Deterministic world of coloured shapes: classes, scenes, episodes,
//! pre-training proposals and on-disk datasets.

mod classes;
mod dataset;
mod io;
mod proposals;
mod scene;

pub use classes::{ClassSplit, ShapeClass, ShapeKind, COLOR_NAMES, NUM_CLASSES, NUM_COLORS, NUM_KINDS, PALETTE};
pub use dataset::{generate_dataset, Dataset, Episode, EpisodeSampler};
pub use io::{
    generate_world, load_dataset, load_manifest, load_world, save_dataset, save_world, SplitManifest, World,
    WorldConfig, ANNOTATIONS_FILE, MANIFEST_FILE, SPLITS,
};
pub use proposals::{propose_patches, ProposalMode, MAX_AREA, MIN_AREA};
pub use scene::{
    generate_scene, render, sample_layout, Annotation, Scene, MAX_OBJECTS, MAX_SIDE, MIN_OBJECTS, MIN_SIDE,
    SCENE_SIZE,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("contamination: {0}")]
    Contamination(String),
    #[error("io error: {0}")]
    Io(String),
}
