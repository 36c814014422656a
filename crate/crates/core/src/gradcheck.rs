//! Central finite-difference comparison against analytic gradients.

use crate::params::ParamStore;

/// Entries whose analytic and numeric magnitudes are both below this, times
/// `max(1, |f|)`, are compared absolutely. Rounding in `f` swamps relative
/// error there.
pub const SMALL: f64 = 1e-7;

/// Share of checked entries allowed to straddle a ReLU or clamp kink.
pub const MAX_KINK_SHARE: f64 = 0.01;

/// Only mismatches this large are considered for the kink test. Smooth
/// entries always have one-sided differences further apart than the central
/// error, so small mismatches must count as errors.
const KINK_REL: f64 = 1e-2;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// Entries skipped because the central difference is far off and the two
    /// one-sided differences disagree even more.
    pub kinks: usize,
    pub max_rel: f64,
    pub max_abs_small: f64,
    pub worst: String,
}

/// Mismatches below this at the first step are accepted without trying the
/// others.
const SETTLED: f64 = 1e-6;

impl GradCheck {
    /// Compares `analytic` with central differences of `f` around one entry.
    /// `probe(h)` returns `(f(x - h), f(x + h))`. Steps `eps`, `eps / 10` and
    /// `eps * 10` are tried in turn and the closest agreement kept: a small
    /// step avoids kinks, a large one avoids rounding.
    pub fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, mid: f64, eps: f64, mut probe: impl FnMut(f64) -> (f64, f64)) {
        self.checked += 1;
        let unit = mid.abs().max(1.0);
        let mut best: Option<(f64, f64, f64)> = None;
        for h in [eps, eps / 10.0, eps * 10.0] {
            let (lo, hi) = probe(h);
            let numeric = (hi - lo) / (2.0 * h);
            let diff = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < SMALL * unit { 0.0 } else { diff / scale };
            let one_sided = ((hi - mid) - (mid - lo)).abs() / h;
            if !diff.is_finite() {
                continue;
            }
            if best.is_none_or(|(r, ..)| rel < r) {
                best = Some((rel, numeric, one_sided));
            }
            if rel < SETTLED {
                break;
            }
        }
        let Some((rel, numeric, one_sided)) = best else {
            self.max_rel = f64::INFINITY;
            self.worst = label();
            return;
        };
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if scale < SMALL * unit {
            self.max_abs_small = self.max_abs_small.max(diff / unit);
        } else if rel > self.max_rel {
            if rel > KINK_REL && one_sided > diff {
                self.kinks += 1;
                return;
            }
            self.max_rel = rel;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        self.max_abs_small = self.max_abs_small.max(other.max_abs_small);
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }

    /// Relative error below `tol`, near-zero entries agree to a hundredth of
    /// `SMALL` and few entries sit on kinks.
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0
            && self.max_rel < tol
            && self.max_abs_small < SMALL / 100.0
            && (self.kinks as f64) <= MAX_KINK_SHARE * self.checked as f64
    }
}

/// Checks every `every`-th entry of `x` against `analytic` by perturbing it
/// by `eps` in both directions.
pub fn check_vector(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    every: usize,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    assert_eq!(x.len(), analytic.len());
    let mut out = GradCheck::default();
    let mid = f(x);
    let mut buf = x.to_vec();
    for i in (0..x.len()).step_by(every.max(1)) {
        out.record(|| format!("{name}[{i}]"), analytic[i], mid, eps, |h| {
            buf[i] = x[i] - h;
            let lo = f(&buf);
            buf[i] = x[i] + h;
            let hi = f(&buf);
            buf[i] = x[i];
            (lo, hi)
        });
    }
    out
}

/// Same as [`check_vector`] over every parameter of a store. `analytic` is
/// indexed like the store.
pub fn check_store(
    store: &ParamStore<f64>,
    analytic: &[Vec<f64>],
    eps: f64,
    every: usize,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    let mid = f(store);
    let mut work = store.clone();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let id = crate::params::ParamId(pi);
        let n = store.get(id).value.len();
        for i in (0..n).step_by(every.max(1)) {
            let orig = store.get(id).value.data[i];
            out.record(|| format!("{name}[{i}]"), analytic[pi][i], mid, eps, |h| {
                work.get_mut(id).value.data[i] = orig - h;
                let lo = f(&work);
                work.get_mut(id).value.data[i] = orig + h;
                let hi = f(&work);
                work.get_mut(id).value.data[i] = orig;
                (lo, hi)
            });
        }
    }
    out
}

/// Checks of the model's own gradients in 64-bit precision, on tiny
/// configurations so every forward pass is cheap.
pub mod cases {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{check_store, check_vector, GradCheck};
    use crate::autodiff::{Graph, Var};
    use crate::error::Result;
    use crate::geometry::{BBox, Point};
    use crate::image::Image;
    use crate::params::{Bound, ParamStore};
    use crate::refiners::gcr::GcrPins;
    use crate::refiners::guided_conv::GuidedConv;
    use crate::refiners::guidance::GuidanceKind;
    use crate::refiners::{Model, ModelConfig, Prediction, RefinerKind};
    use crate::tensor::Tensor;
    use crate::training::loss::{compute_loss, LossWeights};

    const EPS: f64 = 1e-6;

    fn analytic(store: &ParamStore<f64>, g: &Graph<f64>, root: Var) -> Vec<Vec<f64>> {
        let grads = g.backward(root);
        let mut out: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        for (id, grad) in grads.params(g) {
            out[id].copy_from_slice(grad);
        }
        out
    }

    /// Fixed random projection of `v` to a scalar.
    fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
        let shape = g.shape(v).to_vec();
        let n = g.value(v).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = g.constant_f64(&shape, &w);
        let m = g.mul(v, w);
        g.sum(m)
    }

    /// Guided conv on two random RoIs: parameters, RoI features and the
    /// guidance vector.
    pub fn guided_conv(seed: u64) -> GradCheck {
        let (s, c, mc, n) = (3, 6, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let gc = GuidedConv::register("gc", c, mc, s, &mut store, &mut rng);
        let rois: Vec<f64> = (0..n * s * s * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let guide: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let build = |store: &ParamStore<f64>, rois: &[f64], guide: &[f64]| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let r = g.leaf(Tensor::new(vec![n * s * s, c], rois.to_vec()));
            let gv = g.leaf(Tensor::new(vec![1, c], guide.to_vec()));
            let out = gc.forward(&mut g, &bound, r, gv);
            let root = project(&mut g, out, seed + 1);
            (g, r, gv, root)
        };
        let (g, r, gv, root) = build(&store, &rois, &guide);
        let grads = g.backward(root);
        let (dr, dg) = (grads.get_or_zeros(&g, r), grads.get_or_zeros(&g, gv));
        let value = |store: &ParamStore<f64>, rois: &[f64], guide: &[f64]| {
            let (g, _, _, root) = build(store, rois, guide);
            g.item(root)
        };
        let mut out = check_store(&store, &analytic(&store, &g, root), EPS, 1, |st| value(st, &rois, &guide));
        out.merge(check_vector("rois", &rois, &dr, EPS, 1, |x| value(&store, x, &guide)));
        out.merge(check_vector("guidance", &guide, &dg, EPS, 1, |x| value(&store, &rois, x)));
        out
    }

    fn image(rng: &mut ChaCha8Rng) -> Image {
        let data = (0..32 * 32 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Image::new(32, 32, data).expect("32x32 image")
    }

    struct Setup {
        model: Model<f64>,
        img: Image,
        click: Point,
        kind: GuidanceKind,
        gt: BBox,
    }

    fn setup(seed: u64) -> Result<Setup> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::tiny(RefinerKind::Gcr);
        cfg.init_seed = seed;
        let mut model = Model::<f64>::new(cfg)?;
        // Fresh heads sit close to zero; spread them so every term matters.
        for p in model.store.iter_mut() {
            if p.name.contains(".head.") {
                p.value.data.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
            }
        }
        let kind = model.guidance_kind(Some(&model.vocabulary()[1]))?;
        Ok(Setup {
            img: image(&mut rng),
            click: Point::new(rng.random_range(12.0..20.0), rng.random_range(12.0..20.0)),
            kind,
            gt: BBox::new(6.0, 8.0, 25.0, 27.0)?,
            model,
        })
    }

    fn predict(
        su: &Setup,
        g: &mut Graph<f64>,
        bound: &Bound,
        pins: Option<&GcrPins>,
    ) -> Result<Prediction> {
        let (fm, grid) = su.model.backbone.forward(g, bound, &su.img)?;
        let stages = su.model.config.stages;
        su.model
            .predict(g, bound, fm, grid, su.img.size(), su.click, su.kind, stages, pins)
    }

    fn gcr_outputs(g: &mut Graph<f64>, pred: &Prediction) -> Var {
        let Prediction::Gcr(t) = pred else {
            unreachable!("gcr model")
        };
        let mut parts = vec![project(g, t.anchor_deltas, 11), project(g, t.scores, 12)];
        for (i, d) in t.stage_deltas.iter().enumerate() {
            parts.push(project(g, *d, 13 + i as u64));
        }
        g.add_n(&parts)
    }

    /// Full GCR forward from image to anchor deltas, scores and stage deltas,
    /// with the box path pinned to the unperturbed pass.
    pub fn gcr_forward(seed: u64, every: usize) -> Result<GradCheck> {
        let su = setup(seed)?;
        scalar_check(&su, every, EPS, |g, pred| Ok(gcr_outputs(g, pred)))
    }

    /// Training loss of the same forward.
    pub fn gcr_loss(seed: u64, every: usize) -> Result<GradCheck> {
        let su = setup(seed)?;
        let gt = su.gt;
        let w = LossWeights::default();
        scalar_check(&su, every, EPS, move |g, pred| Ok(compute_loss(g, pred, &gt, &w, 32.0)?.total))
    }

    fn scalar_check(
        su: &Setup,
        every: usize,
        eps: f64,
        readout: impl Fn(&mut Graph<f64>, &Prediction) -> Result<Var>,
    ) -> Result<GradCheck> {
        let store = &su.model.store;
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let pred = predict(su, &mut g, &bound, None)?;
        let pins = match &pred {
            Prediction::Gcr(t) => t.pins(),
            Prediction::Distance(_) => unreachable!("gcr model"),
        };
        let root = readout(&mut g, &pred)?;
        let grads = analytic(store, &g, root);
        Ok(check_store(store, &grads, eps, every, |st| {
            let mut g = Graph::new();
            let bound = st.bind(&mut g);
            let pred = predict(su, &mut g, &bound, Some(&pins)).expect("pinned forward");
            let root = readout(&mut g, &pred).expect("pinned readout");
            g.item(root)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agrees_on_a_polynomial() {
        let x = [0.3, -1.2, 2.0];
        let f = |v: &[f64]| v[0] * v[0] * v[1] + v[2].powi(3);
        let grad = [2.0 * x[0] * x[1], x[0] * x[0], 3.0 * x[2] * x[2]];
        assert!(check_vector("p", &x, &grad, 1e-5, 1, f).passes(1e-6));
    }

    #[test]
    fn kinks_are_counted_not_failed() {
        let r = check_vector("relu", &[1e-9, 0.5], &[1.0, 1.0], 1e-6, 1, |v| v[0].max(0.0) + v[1]);
        assert_eq!(r.kinks, 1);
        assert!(r.max_rel < 1e-6);
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = [1.0];
        let r = check_vector("p", &x, &[3.0], 1e-5, 1, |v| v[0] * v[0]);
        assert!(!r.passes(1e-4));
        assert!(r.worst.contains("p[0]"));
    }
}
