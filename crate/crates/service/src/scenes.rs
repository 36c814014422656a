//! Scene lookup by id, from a corpus directory or generated on demand.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use clicktrack_core::training::corpus::{load_scene, read_index, scene_dir, CorpusConfig, CorpusIndex, Split};
use clicktrack_core::training::synth::{SyntheticObject, SyntheticScene};
use clicktrack_core::Image;

use crate::error::ApiError;

const CACHE: usize = 8;

pub enum SceneStore {
    Directory { root: PathBuf, index: CorpusIndex },
    /// Ids follow the on-disk numbering: sequences, then training scenes,
    /// then held-out scenes.
    Generated(CorpusConfig),
}

#[derive(Clone)]
pub struct LoadedScene {
    pub frames: Arc<Vec<Image>>,
    pub objects: Arc<Vec<SyntheticObject>>,
}

pub struct SceneProvider {
    store: SceneStore,
    cache: Mutex<HashMap<String, LoadedScene>>,
}

impl SceneProvider {
    pub fn directory(root: PathBuf) -> clicktrack_core::Result<Self> {
        let index = read_index(&root)?;
        Ok(Self::new(SceneStore::Directory { root, index }))
    }

    pub fn generated(cfg: CorpusConfig) -> Self {
        Self::new(SceneStore::Generated(cfg))
    }

    fn new(store: SceneStore) -> Self {
        Self {
            store,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn load(&self, id: &str) -> Result<SyntheticScene, ApiError> {
        let missing = || ApiError::not_found(format!("unknown scene {id:?}"));
        match &self.store {
            SceneStore::Directory { root, index } => {
                let known = [&index.sequences, &index.train, &index.heldout]
                    .iter()
                    .any(|l| l.iter().any(|s| s == id));
                if !known {
                    return Err(missing());
                }
                load_scene(&scene_dir(root, id)).map_err(ApiError::from)
            }
            SceneStore::Generated(cfg) => {
                if id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(missing());
                }
                let mut i: usize = id.parse().map_err(|_| missing())?;
                for split in [Split::Sequences, Split::Train, Split::Heldout] {
                    let n = cfg.count(split);
                    if i < n {
                        let src = cfg.source(split);
                        return Ok(src.get(i)?.into_owned());
                    }
                    i -= n;
                }
                Err(missing())
            }
        }
    }

    pub fn get(&self, id: &str) -> Result<LoadedScene, ApiError> {
        if let Some(s) = self.cache.lock().expect("scene cache").get(id) {
            return Ok(s.clone());
        }
        let s = self.load(id)?;
        let scene = LoadedScene {
            frames: Arc::new(s.frames),
            objects: Arc::new(s.objects),
        };
        let mut cache = self.cache.lock().expect("scene cache");
        if cache.len() >= CACHE {
            if let Some(k) = cache.keys().next().cloned() {
                cache.remove(&k);
            }
        }
        cache.insert(id.to_string(), scene.clone());
        Ok(scene)
    }
}
