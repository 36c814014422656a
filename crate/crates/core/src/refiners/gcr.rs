//! Prototype selection and iterative refinement built on guided convolution.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{roi_align_var, FeatureMap, Grid};
use crate::geometry::{apply_delta, argmax_first, generate_prototypes, AnchorConfig, BBox, BoxDelta, ImageSize, Point};
use crate::params::{self, Bound, ParamId, ParamStore};
use crate::refiners::guidance::GuidanceFeature;
use crate::refiners::guided_conv::GuidedConv;
use crate::refiners::{Model, RefinerHead};
use crate::tensor::{Real, Tensor};

/// ReLU followed by a linear layer over a guided-conv output.
#[derive(Debug, Clone)]
pub struct Head {
    weight: ParamId,
    bias: ParamId,
}

impl Head {
    pub fn register<T: Real, R: Rng + ?Sized>(
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let weight = store.push(format!("{name}.weight"), params::normal(rng, &[inputs, outputs], std));
        let bias = store.push(format!("{name}.bias"), params::constant(&[outputs], 0.0));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Var {
        let h = g.relu(x);
        g.linear(h, bound.var(self.weight), bound.var(self.bias))
    }

    pub fn linear_only<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Var {
        g.linear(x, bound.var(self.weight), bound.var(self.bias))
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub conv: GuidedConv,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct GcrHead {
    pub anchors: AnchorConfig,
    pub adjust: Stage,
    pub score: Stage,
    pub refine: Vec<Stage>,
    pub stage_delta_std: [f64; 4],
}

/// Boxes that the cascade treats as constants. Supplying them replays a
/// forward pass with the same box path, which is what the analytic gradient
/// differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct GcrPins {
    pub refined: Vec<Option<BBox>>,
    pub selected: usize,
    pub stage_inputs: Vec<BBox>,
}

/// Everything one GCR forward pass produced.
#[derive(Debug, Clone)]
pub struct GcrTrace {
    pub anchors: Vec<BBox>,
    /// `k x 4` anchor-relative deltas from the first guided conv.
    pub anchor_deltas: Var,
    /// Refined anchors; `None` where the delta collapsed the box.
    pub refined: Vec<Option<BBox>>,
    /// `k` predicted IoU scores in `[0, 1]`.
    pub scores: Var,
    pub selected: usize,
    pub stage_inputs: Vec<BBox>,
    /// One `1 x 4` delta per refinement stage.
    pub stage_deltas: Vec<Var>,
    /// Output scale of each stage, for normalizing its regression target.
    pub stage_scales: Vec<[f64; 4]>,
    /// Selected prototype followed by the output of each stage.
    pub stage_boxes: Vec<BBox>,
}

impl GcrTrace {
    pub fn pins(&self) -> GcrPins {
        GcrPins {
            refined: self.refined.clone(),
            selected: self.selected,
            stage_inputs: self.stage_inputs.clone(),
        }
    }

    pub fn final_box(&self) -> BBox {
        *self.stage_boxes.last().expect("trace holds the selected box")
    }
}

pub(crate) fn decode(reference: &BBox, delta: &[f64], size: ImageSize) -> Result<BBox> {
    apply_delta(reference, &BoxDelta::from_slice(delta))?.clip(size)
}

/// Refined anchor with the highest score; ties go to the lowest index and
/// collapsed anchors are never chosen.
pub fn select_prototype(scores: &[f64], refined: &[Option<BBox>]) -> Result<(usize, BBox)> {
    let masked: Vec<f64> = scores
        .iter()
        .zip(refined)
        .map(|(&s, r)| if r.is_some() { s } else { f64::NEG_INFINITY })
        .collect();
    argmax_first(&masked)
        .and_then(|i| refined[i].map(|b| (i, b)))
        .ok_or_else(|| Error::RefinementFailure("every refined anchor collapsed".into()))
}

impl GcrHead {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real, R: Rng + ?Sized>(
        anchors: &AnchorConfig,
        channels: usize,
        mid_channels: usize,
        roi_size: usize,
        stages: usize,
        stage_delta_std: [f64; 4],
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let stage = |name: &str, outputs: usize, store: &mut ParamStore<T>, rng: &mut R| Stage {
            conv: GuidedConv::register(&format!("{name}.gc"), channels, mid_channels, roi_size, store, rng),
            head: Head::register(&format!("{name}.head"), channels, outputs, 0.01, store, rng),
        };
        let adjust = stage("gcr.ps.adjust", 4, store, rng);
        let score = stage("gcr.ps.score", 1, store, rng);
        let refine = (0..stages)
            .map(|i| stage(&format!("gcr.ir.stage{i}"), 4, store, rng))
            .collect();
        Self {
            anchors: anchors.clone(),
            adjust,
            score,
            refine,
            stage_delta_std,
        }
    }

    /// Prototype selection: regress every anchor, score the refined anchors
    /// and keep the best one.
    #[allow(clippy::too_many_arguments)]
    pub fn select<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        fm: Var,
        grid: Grid,
        size: ImageSize,
        p: Point,
        guidance: Var,
        pins: Option<&GcrPins>,
    ) -> Result<Selection> {
        let roi = self.adjust.conv.roi_size;
        let anchors = generate_prototypes(p, &self.anchors, size)?;

        let rois = roi_align_var(g, fm, grid, &anchors, roi);
        let fused = self.adjust.conv.forward(g, bound, rois, guidance);
        let anchor_deltas = self.adjust.head.forward(g, bound, fused);
        if !g.value(anchor_deltas).all_finite() {
            return Err(Error::Numeric("non-finite anchor deltas".into()));
        }

        let refined = match pins {
            Some(p) => p.refined.clone(),
            None => {
                let d = g.value(anchor_deltas).to_f64();
                anchors
                    .iter()
                    .zip(d.chunks(4))
                    .map(|(a, d)| decode(a, d, size).ok())
                    .collect()
            }
        };
        let reextract: Vec<BBox> = refined
            .iter()
            .zip(&anchors)
            .map(|(r, a)| r.unwrap_or(*a))
            .collect();
        let rois = roi_align_var(g, fm, grid, &reextract, roi);
        let fused = self.score.conv.forward(g, bound, rois, guidance);
        let logits = self.score.head.forward(g, bound, fused);
        let logits = g.reshape(logits, &[anchors.len()]);
        let scores = g.sigmoid(logits);
        if !g.value(scores).all_finite() {
            return Err(Error::Numeric("non-finite IoU scores".into()));
        }

        let (selected, selected_box) = match pins {
            Some(p) => (p.selected, reextract[p.selected]),
            None => select_prototype(&g.value(scores).to_f64(), &refined)?,
        };
        Ok(Selection {
            anchors,
            anchor_deltas,
            refined,
            scores,
            selected,
            selected_box,
        })
    }

    /// Per-component output scale of refinement stage `i`.
    pub fn stage_scale(&self, i: usize) -> [f64; 4] {
        self.stage_delta_std.map(|v| v / (i + 1) as f64)
    }

    /// One refinement stage on `input`: a `1 x 4` delta relative to it.
    #[allow(clippy::too_many_arguments)]
    pub fn refine_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        fm: Var,
        grid: Grid,
        i: usize,
        input: &BBox,
        guidance: Var,
    ) -> Var {
        let stage = &self.refine[i];
        let rois = roi_align_var(g, fm, grid, std::slice::from_ref(input), stage.conv.roi_size);
        let fused = stage.conv.forward(g, bound, rois, guidance);
        let raw = stage.head.forward(g, bound, fused);
        let scale = g.constant_f64(&[1, 4], &self.stage_scale(i));
        g.mul(raw, scale)
    }

    /// `stages` refinement steps starting from `start`, each reading the
    /// RoI of the previous box.
    #[allow(clippy::too_many_arguments)]
    pub fn cascade<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        fm: Var,
        grid: Grid,
        size: ImageSize,
        start: BBox,
        guidance: Var,
        stages: usize,
        pins: Option<&[BBox]>,
    ) -> Result<Cascade> {
        if stages > self.refine.len() {
            return Err(Error::Config(format!(
                "{stages} refinement stages requested, model has {}",
                self.refine.len()
            )));
        }
        let mut current = start;
        let mut out = Cascade {
            inputs: Vec::with_capacity(stages),
            deltas: Vec::with_capacity(stages),
            boxes: vec![start],
        };
        for i in 0..stages {
            let input = pins.map_or(current, |p| p[i]);
            let delta = self.refine_step(g, bound, fm, grid, i, &input, guidance);
            let d = g.value(delta).to_f64();
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite delta at stage {i}")));
            }
            current = decode(&input, &d, size)
                .map_err(|e| Error::RefinementFailure(format!("stage {i}: {e}")))?;
            out.inputs.push(input);
            out.deltas.push(delta);
            out.boxes.push(current);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        fm: Var,
        grid: Grid,
        size: ImageSize,
        p: Point,
        guidance: Var,
        stages: usize,
        pins: Option<&GcrPins>,
    ) -> Result<GcrTrace> {
        if stages > self.refine.len() {
            return Err(Error::Config(format!(
                "{stages} refinement stages requested, model has {}",
                self.refine.len()
            )));
        }
        let sel = self.select(g, bound, fm, grid, size, p, guidance, pins)?;
        let cas = self.cascade(
            g,
            bound,
            fm,
            grid,
            size,
            sel.selected_box,
            guidance,
            stages,
            pins.map(|p| p.stage_inputs.as_slice()),
        )?;
        Ok(GcrTrace {
            anchors: sel.anchors,
            anchor_deltas: sel.anchor_deltas,
            refined: sel.refined,
            scores: sel.scores,
            selected: sel.selected,
            stage_inputs: cas.inputs,
            stage_scales: (0..cas.deltas.len()).map(|i| self.stage_scale(i)).collect(),
            stage_deltas: cas.deltas,
            stage_boxes: cas.boxes,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub anchors: Vec<BBox>,
    pub anchor_deltas: Var,
    pub refined: Vec<Option<BBox>>,
    pub scores: Var,
    pub selected: usize,
    pub selected_box: BBox,
}

#[derive(Debug, Clone)]
pub struct Cascade {
    pub inputs: Vec<BBox>,
    pub deltas: Vec<Var>,
    /// Start box followed by one box per stage.
    pub boxes: Vec<BBox>,
}

/// Outcome of prototype selection on a precomputed feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSelection {
    pub selected: BBox,
    pub selected_index: usize,
    pub scores: Vec<f64>,
    pub refined_anchors: Vec<Option<BBox>>,
}

fn gcr_parts<T: Real>(model: &Model<T>) -> Result<&GcrHead> {
    match &model.head {
        RefinerHead::Gcr { head, .. } => Ok(head),
        _ => Err(Error::Config(format!("{} model has no GCR head", model.config.kind))),
    }
}

fn constant_inputs<T: Real>(g: &mut Graph<T>, fm: &FeatureMap<T>, f_g: &GuidanceFeature<T>) -> Result<(Var, Var)> {
    if f_g.vector.len() != fm.channels {
        return Err(Error::Input(format!(
            "guidance has {} entries, feature map {} channels",
            f_g.vector.len(),
            fm.channels
        )));
    }
    let fmv = g.constant(Tensor::new(vec![fm.height, fm.width, fm.channels], fm.data.clone()));
    let gv = g.constant(Tensor::new(vec![1, fm.channels], f_g.vector.clone()));
    Ok((fmv, gv))
}

pub fn prototype_select<T: Real>(
    model: &Model<T>,
    fm: &FeatureMap<T>,
    size: ImageSize,
    p: Point,
    f_g: &GuidanceFeature<T>,
) -> Result<PrototypeSelection> {
    let head = gcr_parts(model)?;
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let (fmv, gv) = constant_inputs(&mut g, fm, f_g)?;
    let sel = head.select(&mut g, &bound, fmv, fm.grid(), size, p, gv, None)?;
    Ok(PrototypeSelection {
        selected: sel.selected_box,
        selected_index: sel.selected,
        scores: g.value(sel.scores).to_f64(),
        refined_anchors: sel.refined,
    })
}

/// Returns the final box and the trace (input box first).
pub fn iterative_refine<T: Real>(
    model: &Model<T>,
    fm: &FeatureMap<T>,
    size: ImageSize,
    b: BBox,
    f_g: &GuidanceFeature<T>,
    stages: usize,
) -> Result<(BBox, Vec<BBox>)> {
    let head = gcr_parts(model)?;
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let (fmv, gv) = constant_inputs(&mut g, fm, f_g)?;
    let cas = head.cascade(&mut g, &bound, fmv, fm.grid(), size, b, gv, stages, None)?;
    Ok((*cas.boxes.last().expect("start box"), cas.boxes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64) -> Option<BBox> {
        Some(BBox::new(x0, 0.0, x0 + 10.0, 10.0).unwrap())
    }

    #[test]
    fn one_hot_scores_pick_that_anchor() {
        let refined: Vec<_> = (0..12).map(|i| b(i as f64)).collect();
        let mut scores = vec![0.0; 12];
        scores[5] = 1.0;
        let (i, bx) = select_prototype(&scores, &refined).unwrap();
        assert_eq!(i, 5);
        assert_eq!(Some(bx), refined[5]);
    }

    #[test]
    fn selection_is_invariant_to_monotone_rescaling() {
        let refined: Vec<_> = (0..6).map(|i| b(i as f64)).collect();
        let scores = [0.2, 0.7, 0.1, 0.69, 0.7, 0.05];
        let base = select_prototype(&scores, &refined).unwrap().0;
        assert_eq!(base, 1);
        for f in [|x: f64| x.exp(), |x: f64| 3.0 * x - 7.0, |x: f64| x.powi(3), |x: f64| (x / (1.0 - x)).ln()] {
            let s: Vec<f64> = scores.iter().map(|&v| f(v)).collect();
            assert_eq!(select_prototype(&s, &refined).unwrap().0, base);
        }
    }

    #[test]
    fn collapsed_anchors_are_skipped() {
        let refined = vec![None, b(1.0), None];
        assert_eq!(select_prototype(&[0.9, 0.1, 0.95], &refined).unwrap().0, 1);
        assert!(matches!(
            select_prototype(&[0.5, 0.5], &[None, None]),
            Err(Error::RefinementFailure(_))
        ));
    }
}
