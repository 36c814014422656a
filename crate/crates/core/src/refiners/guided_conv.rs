//! Guided convolution: mixing matrices generated from a guidance vector and
//! applied to RoI features by matrix multiplication.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::RoIFeature;
use crate::params::{self, Bound, ParamId, ParamStore};
use crate::refiners::guidance::GuidanceFeature;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct GuidedConv {
    pub channels: usize,
    pub mid_channels: usize,
    pub roi_size: usize,
    gen1_w: ParamId,
    gen1_b: ParamId,
    gen2_w: ParamId,
    gen2_b: ParamId,
    post_w: ParamId,
    post_b: ParamId,
}

impl GuidedConv {
    pub fn register<T: Real, R: Rng + ?Sized>(
        name: &str,
        channels: usize,
        mid_channels: usize,
        roi_size: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let (c, mc) = (channels as f64, mid_channels as f64);
        let cells = roi_size * roi_size;
        let mut add = |suffix: &str, t: Tensor<T>| store.push(format!("{name}.{suffix}"), t);
        // The bias terms carry a guidance-independent mixing; the weights add
        // the guidance-dependent part.
        let gen1_w = add("gen1.weight", params::normal(rng, &[channels, channels * mid_channels], 0.5 / c));
        let gen1_b = add("gen1.bias", params::normal(rng, &[channels * mid_channels], 1.0 / c.sqrt()));
        let gen2_w = add("gen2.weight", params::normal(rng, &[channels, mid_channels * channels], 0.5 / (c * mc).sqrt()));
        let gen2_b = add("gen2.bias", params::normal(rng, &[mid_channels * channels], 1.0 / mc.sqrt()));
        let post_w = add("post.weight", params::he_normal(rng, &[cells * channels, channels]));
        let post_b = add("post.bias", params::constant(&[channels], 0.0));
        Self {
            channels,
            mid_channels,
            roi_size,
            gen1_w,
            gen1_b,
            gen2_w,
            gen2_b,
            post_w,
            post_b,
        }
    }

    pub fn post_bias(&self) -> ParamId {
        self.post_b
    }

    pub fn generator_params(&self) -> [ParamId; 4] {
        [self.gen1_w, self.gen1_b, self.gen2_w, self.gen2_b]
    }

    /// `rois` is `(n * S * S) x C`, `guidance` is `1 x C`; returns `n x C`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, rois: Var, guidance: Var) -> Var {
        let (c, mc) = (self.channels, self.mid_channels);
        let cells = self.roi_size * self.roi_size;
        let n = g.value(rois).len() / (cells * c);
        let p1 = g.linear(guidance, bound.var(self.gen1_w), bound.var(self.gen1_b));
        let p1 = g.reshape(p1, &[c, mc]);
        let p2 = g.linear(guidance, bound.var(self.gen2_w), bound.var(self.gen2_b));
        let p2 = g.reshape(p2, &[mc, c]);
        let mixed = g.matmul(rois, p1);
        let fused = g.matmul(mixed, p2);
        let flat = g.reshape(fused, &[n, cells * c]);
        g.linear(flat, bound.var(self.post_w), bound.var(self.post_b))
    }
}

/// Stand-alone evaluation of one guided convolution.
pub fn guided_conv<T: Real>(
    f_roi: &RoIFeature<T>,
    f_g: &GuidanceFeature<T>,
    gc: &GuidedConv,
    store: &ParamStore<T>,
) -> Result<Vec<T>> {
    if f_roi.channels != gc.channels || f_roi.size != gc.roi_size || f_g.vector.len() != gc.channels {
        return Err(Error::Input(format!(
            "guided conv expects {s}x{s}x{c} RoI and {c}-vector guidance",
            s = gc.roi_size,
            c = gc.channels
        )));
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let rois = g.constant(Tensor::new(vec![f_roi.size * f_roi.size, f_roi.channels], f_roi.data.clone()));
    let guide = g.constant(Tensor::new(vec![1, gc.channels], f_g.vector.clone()));
    let out = gc.forward(&mut g, &bound, rois, guide);
    let v = g.value(out);
    if !v.all_finite() {
        return Err(Error::Numeric("non-finite guided conv output".into()));
    }
    Ok(v.data.clone())
}
