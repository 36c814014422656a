//! Point-to-box regressors: the guided click refiner and the two
//! edge-distance baselines.

pub mod baselines;
pub mod gcr;
pub mod guidance;
pub mod guided_conv;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{Backbone, BackboneConfig, FeatureMap, Grid};
use crate::geometry::{AnchorConfig, BBox, ImageSize, Point};
use crate::image::Image;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

use baselines::{DistanceHead, DistanceSource, DistanceTrace};
use gcr::{GcrHead, GcrPins, GcrTrace};
use guidance::{GuidanceFeature, GuidanceKind, GuidanceTable, DEFAULT_VOCABULARY};

/// Most refinement stages a model may carry.
pub const MAX_STAGES: usize = 6;

fn default_stage_delta_std() -> [f64; 4] {
    [0.1, 0.1, 0.2, 0.2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinerKind {
    Gcr,
    Pfr,
    Bfr,
}

impl RefinerKind {
    pub const ALL: [RefinerKind; 3] = [RefinerKind::Gcr, RefinerKind::Pfr, RefinerKind::Bfr];

    pub fn name(self) -> &'static str {
        match self {
            RefinerKind::Gcr => "gcr",
            RefinerKind::Pfr => "pfr",
            RefinerKind::Bfr => "bfr",
        }
    }
}

impl fmt::Display for RefinerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RefinerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcr" => Ok(RefinerKind::Gcr),
            "pfr" => Ok(RefinerKind::Pfr),
            "bfr" => Ok(RefinerKind::Bfr),
            other => Err(Error::Config(format!("unknown refiner {other:?}, expected gcr, pfr or bfr"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: RefinerKind,
    pub backbone: BackboneConfig,
    pub roi_size: usize,
    pub mid_channels: usize,
    pub anchors: AnchorConfig,
    /// Refinement stages held by the model.
    pub stages: usize,
    /// Stages run by default at inference; at most `stages`.
    pub inference_stages: usize,
    /// Output scale of the first refinement stage per delta component;
    /// stage `i` uses it divided by `i + 1`.
    #[serde(default = "default_stage_delta_std")]
    pub stage_delta_std: [f64; 4],
    pub vocabulary: Vec<String>,
    /// Pixels per unit of predicted edge distance (BFR and PFR).
    pub distance_scale: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(kind: RefinerKind) -> Self {
        Self {
            kind,
            backbone: BackboneConfig::default(),
            roi_size: 7,
            mid_channels: 16,
            anchors: AnchorConfig::default(),
            stages: 4,
            inference_stages: 2,
            stage_delta_std: default_stage_delta_std(),
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            distance_scale: 32.0,
            init_seed: 0,
        }
    }

    /// S = 3, C = 8, MC = 4, k = 2; for gradient checks and quick tests.
    pub fn tiny(kind: RefinerKind) -> Self {
        Self {
            backbone: BackboneConfig::tiny(8),
            roi_size: 3,
            mid_channels: 4,
            anchors: AnchorConfig {
                scales: vec![24.0 * 24.0, 48.0 * 48.0],
                ratios: vec![1.0],
            },
            stages: 2,
            inference_stages: 2,
            ..Self::new(kind)
        }
    }

    pub fn channels(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.anchors.validate()?;
        if self.backbone.blocks.is_empty() || self.backbone.blocks.iter().any(|b| b.channels == 0 || b.stride == 0 || b.convs == 0 || b.dilation == 0) {
            return bad("backbone blocks need positive channels, stride, convs and dilation".into());
        }
        if self.roi_size == 0 || self.mid_channels == 0 {
            return bad("roi_size and mid_channels must be at least 1".into());
        }
        if self.stage_delta_std.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("stage_delta_std entries must be positive".into());
        }
        if self.stages > MAX_STAGES || self.inference_stages > self.stages {
            return bad(format!(
                "need inference_stages <= stages <= {MAX_STAGES}, got {} and {}",
                self.inference_stages, self.stages
            ));
        }
        if self.vocabulary.is_empty() {
            return bad("empty vocabulary".into());
        }
        for (i, v) in self.vocabulary.iter().enumerate() {
            if self.vocabulary[..i].contains(v) {
                return bad(format!("duplicate vocabulary token {v:?}"));
            }
        }
        if !(self.distance_scale > 0.0 && self.distance_scale.is_finite()) {
            return bad("distance_scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum RefinerHead {
    Gcr { guidance: GuidanceTable, head: GcrHead },
    Distance(DistanceHead),
}

/// Backbone plus one refiner head and all of their parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: RefinerHead,
}

/// What one refinement produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerOutput {
    pub refiner: RefinerKind,
    pub final_box: BBox,
    /// Selected prototype followed by one box per refinement stage. The
    /// baselines report their single box.
    pub stage_boxes: Vec<BBox>,
    /// Predicted IoU per prototype; empty for the baselines.
    pub iou_scores: Vec<f64>,
    pub selected_index: usize,
    pub guidance_kind: GuidanceKind,
}

#[derive(Debug, Clone)]
pub enum Prediction {
    Gcr(GcrTrace),
    Distance(DistanceTrace),
}

/// A feature map paired with the size of the image it came from.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub features: FeatureMap<T>,
    pub size: ImageSize,
}

impl<T: Real> Model<T> {
    /// Randomly initialized model; parameters depend only on the config.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::register(&config.backbone, &mut store, &mut rng);
        let c = config.channels();
        let head = match config.kind {
            RefinerKind::Gcr => RefinerHead::Gcr {
                guidance: GuidanceTable::register(&config.vocabulary, c, &mut store, &mut rng),
                head: GcrHead::register(
                    &config.anchors,
                    c,
                    config.mid_channels,
                    config.roi_size,
                    config.stages,
                    config.stage_delta_std,
                    &mut store,
                    &mut rng,
                ),
            },
            RefinerKind::Pfr => RefinerHead::Distance(DistanceHead::register(
                "pfr",
                DistanceSource::Point,
                c,
                config.distance_scale,
                &mut store,
                &mut rng,
            )),
            RefinerKind::Bfr => RefinerHead::Distance(DistanceHead::register(
                "bfr",
                DistanceSource::Region { roi_size: config.roi_size },
                c,
                config.distance_scale,
                &mut store,
                &mut rng,
            )),
        };
        Ok(Self {
            config,
            store,
            backbone,
            head,
        })
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }

    pub fn kind(&self) -> RefinerKind {
        self.config.kind
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.config.vocabulary
    }

    /// Baselines ignore guidance but still reject unknown tokens.
    pub fn guidance_kind(&self, category: Option<&str>) -> Result<GuidanceKind> {
        match &self.head {
            RefinerHead::Gcr { guidance, .. } => guidance.kind_for(category),
            RefinerHead::Distance(_) => match category {
                Some(c) if !self.config.vocabulary.iter().any(|v| v == c) => Err(Error::Vocabulary(c.to_string())),
                _ => Ok(GuidanceKind::Learnable),
            },
        }
    }

    pub fn make_guidance(&self, category: Option<&str>) -> Result<GuidanceFeature<T>> {
        match &self.head {
            RefinerHead::Gcr { guidance, .. } => guidance.make_guidance(&self.store, category),
            RefinerHead::Distance(_) => Err(Error::Config(format!("{} model takes no guidance", self.kind()))),
        }
    }

    pub fn encode(&self, img: &Image) -> Result<Encoded<T>> {
        Ok(Encoded {
            features: self.backbone.encode_image(&self.store, img)?,
            size: img.size(),
        })
    }

    /// Graph-level forward of the head on an already computed feature node.
    #[allow(clippy::too_many_arguments)]
    pub fn predict(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        fm: Var,
        grid: Grid,
        size: ImageSize,
        p: Point,
        kind: GuidanceKind,
        stages: usize,
        pins: Option<&GcrPins>,
    ) -> Result<Prediction> {
        if !p.is_finite() || !p.within(size) {
            return Err(Error::PointOutside { x: p.x, y: p.y });
        }
        match &self.head {
            RefinerHead::Gcr { guidance, head } => {
                let gv = guidance.lookup(g, bound, kind);
                head.forward(g, bound, fm, grid, size, p, gv, stages, pins)
                    .map(Prediction::Gcr)
            }
            RefinerHead::Distance(head) => head.forward(g, bound, fm, grid, size, p).map(Prediction::Distance),
        }
    }

    /// Full refinement with the configured default stage count.
    pub fn refine(&self, img: &Image, p: Point, category: Option<&str>) -> Result<RefinerOutput> {
        self.refine_with(img, p, category, self.config.inference_stages)
    }

    pub fn refine_with(&self, img: &Image, p: Point, category: Option<&str>, stages: usize) -> Result<RefinerOutput> {
        let kind = self.guidance_kind(category)?;
        if !p.is_finite() || !p.within(img.size()) {
            return Err(Error::PointOutside { x: p.x, y: p.y });
        }
        let enc = self.encode(img)?;
        self.refine_encoded(&enc, p, kind, stages)
    }

    /// Refinement on a cached encoding, so several clicks on one image share
    /// the backbone pass.
    pub fn refine_encoded(&self, enc: &Encoded<T>, p: Point, kind: GuidanceKind, stages: usize) -> Result<RefinerOutput> {
        let fm = &enc.features;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let fmv = g.constant(Tensor::new(vec![fm.height, fm.width, fm.channels], fm.data.clone()));
        let pred = self.predict(&mut g, &bound, fmv, fm.grid(), enc.size, p, kind, stages, None)?;
        Ok(self.output(&g, &pred, kind))
    }

    pub fn output(&self, g: &Graph<T>, pred: &Prediction, kind: GuidanceKind) -> RefinerOutput {
        match pred {
            Prediction::Gcr(t) => RefinerOutput {
                refiner: self.kind(),
                final_box: t.final_box(),
                stage_boxes: t.stage_boxes.clone(),
                iou_scores: g.value(t.scores).to_f64(),
                selected_index: t.selected,
                guidance_kind: kind,
            },
            Prediction::Distance(t) => RefinerOutput {
                refiner: self.kind(),
                final_box: t.output,
                stage_boxes: vec![t.output],
                iou_scores: Vec::new(),
                selected_index: 0,
                guidance_kind: GuidanceKind::Learnable,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> Image {
        let data = (0..w * h * 3)
            .map(|i| ((i * 7919) % 256) as f32 / 255.0)
            .collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn refine_is_deterministic_for_every_kind() {
        let img = textured(64, 48);
        for kind in RefinerKind::ALL {
            let m = Model::<f32>::new(ModelConfig::tiny(kind)).unwrap();
            let a = m.refine(&img, Point::new(30.0, 20.0), None).unwrap();
            let b = m.refine(&img, Point::new(30.0, 20.0), None).unwrap();
            assert_eq!(a, b);
            assert!(!a.stage_boxes.is_empty());
        }
    }

    #[test]
    fn gcr_output_is_consistent() {
        let img = textured(64, 64);
        let m = Model::<f32>::new(ModelConfig::tiny(RefinerKind::Gcr)).unwrap();
        let out = m.refine(&img, Point::new(32.0, 30.0), Some("plate")).unwrap();
        assert_eq!(out.iou_scores.len(), 2);
        assert_eq!(out.stage_boxes.len(), 3);
        assert_eq!(out.final_box, *out.stage_boxes.last().unwrap());
        assert_eq!(
            Some(out.selected_index),
            crate::geometry::argmax_first(&out.iou_scores)
        );
        assert!(out.iou_scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn zero_stages_returns_selected_prototype() {
        let img = textured(64, 64);
        let m = Model::<f64>::new(ModelConfig::tiny(RefinerKind::Gcr)).unwrap();
        let enc = m.encode(&img).unwrap();
        let g = m.make_guidance(None).unwrap();
        let sel = gcr::prototype_select(&m, &enc.features, enc.size, Point::new(20.0, 40.0), &g).unwrap();
        let (b, trace) = gcr::iterative_refine(&m, &enc.features, enc.size, sel.selected, &g, 0).unwrap();
        assert_eq!(b, sel.selected);
        assert_eq!(trace, vec![sel.selected]);
        let (_, trace) = gcr::iterative_refine(&m, &enc.features, enc.size, sel.selected, &g, 2).unwrap();
        assert_eq!(trace.len(), 3);
        let out = m.refine_with(&img, Point::new(20.0, 40.0), None, 2).unwrap();
        assert_eq!(out.stage_boxes, trace);
    }

    #[test]
    fn guidance_lookup() {
        let m = Model::<f32>::new(ModelConfig::new(RefinerKind::Gcr)).unwrap();
        let l = m.make_guidance(None).unwrap();
        assert_eq!(l.vector.len(), 64);
        assert_eq!(l.kind, GuidanceKind::Learnable);
        assert_eq!(m.make_guidance(Some("plate")).unwrap(), m.make_guidance(Some("plate")).unwrap());
        assert_ne!(m.make_guidance(Some("plate")).unwrap().vector, l.vector);
        assert!(matches!(m.make_guidance(Some("zebra")), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn rejects_points_outside_the_image() {
        let img = textured(64, 64);
        let m = Model::<f32>::new(ModelConfig::tiny(RefinerKind::Pfr)).unwrap();
        assert!(matches!(
            m.refine(&img, Point::new(-5.0, 10.0), None),
            Err(Error::PointOutside { .. })
        ));
    }

    #[test]
    fn pfr_with_zero_weights_gives_square_of_bias_extent() {
        let img = textured(128, 128);
        let mut m = Model::<f64>::new(ModelConfig::tiny(RefinerKind::Pfr)).unwrap();
        let RefinerHead::Distance(head) = m.head.clone() else { unreachable!() };
        m.store.get_mut(head.weight()).value.data.iter_mut().for_each(|v| *v = 0.0);
        // Bias z with scale * softplus(z) = 10.
        let beta = 10.0_f64;
        let z = ((beta / m.config.distance_scale).exp() - 1.0).ln();
        m.store.get_mut(head.bias()).value.data = vec![z; 4];
        let out = m.refine(&img, Point::new(60.0, 50.0), None).unwrap();
        let want = [50.0, 40.0, 70.0, 60.0];
        for (a, b) in out.final_box.to_array().iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{:?}", out.final_box);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(RefinerKind::Gcr);
        c.inference_stages = 5;
        assert!(Model::<f32>::new(c.clone()).is_err());
        c.inference_stages = 2;
        c.vocabulary.push("plate".into());
        assert!(c.validate().is_err());
        assert!("xyz".parse::<RefinerKind>().is_err());
        assert_eq!("bfr".parse::<RefinerKind>().unwrap(), RefinerKind::Bfr);
    }
}
