//! Corpus layout in memory and on disk.
//!
//! On disk every scene is `scenes/<id>/frame_<n>.png` plus
//! `scenes/<id>/annotations.json`, and `corpus.json` at the root lists which
//! ids form the training, held-out and sequence splits.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageSize;
use crate::image::Image;
use crate::training::synth::{
    generate_scene, generate_sequence, Background, MotionConfig, SceneConfig, SyntheticObject, SyntheticScene,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    pub sequences: usize,
    pub frames: usize,
    pub scene: SceneConfig,
    pub motion: MotionConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train_scenes: 2000,
            heldout_scenes: 300,
            sequences: 100,
            frames: 60,
            scene: SceneConfig::default(),
            motion: MotionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
    Sequences,
}

impl CorpusConfig {
    /// Scene seed for item `i` of a split; splits never share seeds.
    pub fn scene_seed(&self, split: Split, i: usize) -> u64 {
        let offset = match split {
            Split::Train => 0,
            Split::Heldout => 1 << 40,
            Split::Sequences => 2 << 40,
        };
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (offset + i as u64)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_scenes,
            Split::Heldout => self.heldout_scenes,
            Split::Sequences => self.sequences,
        }
    }

    pub fn source(&self, split: Split) -> SceneSource {
        let seeds = (0..self.count(split)).map(|i| self.scene_seed(split, i)).collect();
        let frames = if split == Split::Sequences { self.frames } else { 1 };
        SceneSource::Generated {
            scene: self.scene.clone(),
            motion: self.motion,
            frames,
            seeds,
        }
    }
}

/// Scenes either rendered on demand from seeds or held in memory.
#[derive(Debug, Clone)]
pub enum SceneSource {
    Generated {
        scene: SceneConfig,
        motion: MotionConfig,
        frames: usize,
        seeds: Vec<u64>,
    },
    Loaded(Vec<SyntheticScene>),
    /// Scenes of a corpus directory, read when requested.
    Stored { root: PathBuf, ids: Vec<String> },
}

impl SceneSource {
    pub fn len(&self) -> usize {
        match self {
            SceneSource::Generated { seeds, .. } => seeds.len(),
            SceneSource::Loaded(v) => v.len(),
            SceneSource::Stored { ids, .. } => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<Cow<'_, SyntheticScene>> {
        match self {
            SceneSource::Generated {
                scene,
                motion,
                frames,
                seeds,
            } => {
                let s = generate_scene(seeds[i], scene)?;
                if *frames > 1 {
                    Ok(Cow::Owned(generate_sequence(&s, *frames, motion)?))
                } else {
                    Ok(Cow::Owned(s))
                }
            }
            SceneSource::Loaded(v) => Ok(Cow::Borrowed(&v[i])),
            SceneSource::Stored { root, ids } => Ok(Cow::Owned(load_scene(&scene_dir(root, &ids[i]))?)),
        }
    }

    pub fn take(self, n: usize) -> SceneSource {
        match self {
            SceneSource::Generated {
                scene,
                motion,
                frames,
                mut seeds,
            } => {
                seeds.truncate(n);
                SceneSource::Generated {
                    scene,
                    motion,
                    frames,
                    seeds,
                }
            }
            SceneSource::Loaded(mut v) => {
                v.truncate(n);
                SceneSource::Loaded(v)
            }
            SceneSource::Stored { root, mut ids } => {
                ids.truncate(n);
                SceneSource::Stored { root, ids }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub objects: Vec<SyntheticObject>,
    pub background: Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub config: CorpusConfig,
    pub train: Vec<String>,
    pub heldout: Vec<String>,
    pub sequences: Vec<String>,
}

pub fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join("scenes").join(id)
}

pub fn save_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (n, f) in scene.frames.iter().enumerate() {
        f.save_png(&dir.join(format!("frame_{n:05}.png")))?;
    }
    let ann = Annotations {
        seed: scene.seed,
        width: scene.size.width,
        height: scene.size.height,
        frames: scene.frames.len(),
        objects: scene.objects.clone(),
        background: scene.background.clone(),
    };
    let path = dir.join("annotations.json");
    fs::write(&path, serde_json::to_string(&ann)?).map_err(|e| Error::io(&path, e))
}

pub fn load_annotations(dir: &Path) -> Result<Annotations> {
    let path = dir.join("annotations.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_scene(dir: &Path) -> Result<SyntheticScene> {
    let ann = load_annotations(dir)?;
    let mut frames = Vec::with_capacity(ann.frames);
    for n in 0..ann.frames {
        let f = Image::load_png(&dir.join(format!("frame_{n:05}.png")))?;
        if f.width() != ann.width || f.height() != ann.height {
            return Err(Error::Input(format!("frame {n} in {} has the wrong size", dir.display())));
        }
        frames.push(f);
    }
    if ann.objects.iter().any(|o| o.boxes.len() != ann.frames) {
        return Err(Error::Input(format!("{}: box count differs from frame count", dir.display())));
    }
    Ok(SyntheticScene {
        seed: ann.seed,
        size: ImageSize::new(ann.width, ann.height),
        background: ann.background,
        objects: ann.objects,
        frames,
    })
}

/// Renders and writes every split; sequence ids come first so that the
/// lowest ids are the multi-frame scenes.
pub fn write_corpus(root: &Path, cfg: &CorpusConfig) -> Result<CorpusIndex> {
    let mut next = 0usize;
    let mut ids = |n: usize| {
        let v: Vec<String> = (next..next + n).map(|i| format!("{i:04}")).collect();
        next += n;
        v
    };
    let index = CorpusIndex {
        config: cfg.clone(),
        sequences: ids(cfg.sequences),
        train: ids(cfg.train_scenes),
        heldout: ids(cfg.heldout_scenes),
    };
    for (split, list) in [
        (Split::Sequences, &index.sequences),
        (Split::Train, &index.train),
        (Split::Heldout, &index.heldout),
    ] {
        let src = cfg.source(split);
        for (i, id) in list.iter().enumerate() {
            save_scene(&scene_dir(root, id), &*src.get(i)?)?;
        }
    }
    let path = root.join("corpus.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(root: &Path) -> Result<CorpusIndex> {
    let path = root.join("corpus.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Split of a corpus directory; scenes are read lazily.
pub fn stored_split(root: &Path, split: Split) -> Result<(SceneSource, Vec<String>)> {
    let index = read_index(root)?;
    let ids = match split {
        Split::Train => index.train,
        Split::Heldout => index.heldout,
        Split::Sequences => index.sequences,
    };
    for id in &ids {
        let dir = scene_dir(root, id);
        if !dir.join("annotations.json").is_file() {
            return Err(Error::Input(format!("corpus lists {id} but {} is missing", dir.display())));
        }
    }
    let source = SceneSource::Stored {
        root: root.to_path_buf(),
        ids: ids.clone(),
    };
    Ok((source, ids))
}
