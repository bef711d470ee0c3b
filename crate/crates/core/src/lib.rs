//! Few-shot detection transformer driven by pseudo-class visual prompts.

pub mod ndgrad;
pub mod rng;
pub mod backbone;
pub mod image;
pub mod params;
pub mod matching;
pub mod prompts;
pub mod synthworld;
pub mod model;
pub mod trainpipe;
pub mod evaltool;
