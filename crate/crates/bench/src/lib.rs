//! Shared fixtures for the benchmarks: one default-size synthetic scene and
//! freshly initialized models. Weights do not matter for timing.

use clicktrack_core::refiners::{Model, ModelConfig, RefinerKind};
use clicktrack_core::training::corpus::{CorpusConfig, Split};
use clicktrack_core::training::synth::SyntheticScene;
use clicktrack_core::Point;

pub fn scene(frames: usize) -> SyntheticScene {
    let cfg = CorpusConfig {
        frames,
        ..Default::default()
    };
    let split = if frames > 1 { Split::Sequences } else { Split::Heldout };
    cfg.source(split).get(0).expect("scene renders").into_owned()
}

pub fn model(kind: RefinerKind) -> Model<f32> {
    Model::new(ModelConfig::new(kind)).expect("default config is valid")
}

/// Center of the first object's first-frame box.
pub fn click(scene: &SyntheticScene) -> Point {
    scene.objects[0].boxes[0].center()
}
