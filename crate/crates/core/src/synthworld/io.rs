use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classes::ClassSplit;
use super::dataset::{generate_dataset, Dataset};
use super::scene::{Annotation, Scene};
use super::SynthError;
use crate::image::Image;
use crate::matching::Box;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "split.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObjectRecord {
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImageRecord {
    image: String,
    objects: Vec<ObjectRecord>,
}

/// Scene counts and class partition of a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub classes: ClassSplit,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 2000,
            val_scenes: 200,
            test_scenes: 500,
            classes: ClassSplit::default(),
        }
    }
}

/// Written next to the split directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    pub scenes: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub classes: ClassSplit,
}

impl World {
    pub fn split(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Training scenes contain base classes only; val/test scenes draw from all classes.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, SynthError> {
    cfg.classes.validate().map_err(SynthError::Input)?;
    let all = cfg.classes.all();
    Ok(World {
        train: generate_dataset(cfg.seed, "train", cfg.train_scenes, &cfg.classes.base)?,
        val: generate_dataset(cfg.seed, "val", cfg.val_scenes, &all)?,
        test: generate_dataset(cfg.seed, "test", cfg.test_scenes, &all)?,
        classes: cfg.classes.clone(),
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io(format!("{}: {e}", path.display()))
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), SynthError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let mut records = Vec::with_capacity(ds.len());
    for (i, s) in ds.scenes.iter().enumerate() {
        let name = format!("images/{i:05}.ppm");
        let path = dir.join(&name);
        s.image.save_pnm(&path).map_err(|e| io_err(&path, e))?;
        records.push(ImageRecord {
            image: name,
            objects: s
                .annotations
                .iter()
                .map(|a| ObjectRecord {
                    class: a.class,
                    bbox: a.bbox.to_array(),
                })
                .collect(),
        });
    }
    let path = dir.join(ANNOTATIONS_FILE);
    let json = serde_json::to_string_pretty(&records).map_err(|e| io_err(&path, e))?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))
}

/// Images come back quantised to 8 bits; the noise seed is not persisted.
pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let records: Vec<ImageRecord> = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    let scenes = records
        .into_iter()
        .map(|r| {
            let image = Image::load_pnm(&dir.join(&r.image)).map_err(SynthError::Io)?;
            Ok(Scene {
                image,
                annotations: r
                    .objects
                    .into_iter()
                    .map(|o| Annotation {
                        class: o.class,
                        bbox: Box::from_array(o.bbox),
                    })
                    .collect(),
                noise_seed: 0,
            })
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(Dataset { scenes })
}

pub fn save_world(root: &Path, world: &World, seed: u64) -> Result<(), SynthError> {
    let mut scenes = BTreeMap::new();
    for name in SPLITS {
        let ds = world.split(name).expect("known split");
        save_dataset(&root.join(name), ds)?;
        scenes.insert(name.to_string(), ds.len());
    }
    let manifest = SplitManifest {
        seed,
        base: world.classes.base.clone(),
        novel: world.classes.novel.clone(),
        scenes,
    };
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))
}

pub fn load_manifest(root: &Path) -> Result<SplitManifest, SynthError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e))
}

pub fn load_world(root: &Path) -> Result<World, SynthError> {
    let m = load_manifest(root)?;
    let classes = ClassSplit {
        base: m.base,
        novel: m.novel,
    };
    classes.validate().map_err(SynthError::Input)?;
    Ok(World {
        train: load_dataset(&root.join("train"))?,
        val: load_dataset(&root.join("val"))?,
        test: load_dataset(&root.join("test"))?,
        classes,
    })
}
