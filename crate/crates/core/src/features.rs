//! Image encoder, RoIAlign, point-feature lookup and the BFR coarse region.
//!
//! Feature cell `(i, j)` is centered on image position
//! `((j + 0.5) * stride, (i + 0.5) * stride)`. Bilinear reads follow the
//! usual RoIAlign border rule: positions more than one cell outside the grid
//! read as zero, positions within one cell are clamped to the border.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Tap, Var};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize, Point};
use crate::image::Image;
use crate::params::{self, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Samples per RoIAlign bin along each axis.
pub const ROI_SAMPLES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
    pub convs: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub blocks: Vec<BlockSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let b = |channels, stride, convs, dilation| BlockSpec {
            channels,
            stride,
            convs,
            dilation,
        };
        Self {
            blocks: vec![b(16, 2, 1, 1), b(32, 2, 2, 1), b(64, 2, 2, 1), b(64, 1, 1, 2)],
        }
    }
}

impl BackboneConfig {
    /// Small network for gradient checks and fast tests.
    pub fn tiny(channels: usize) -> Self {
        let b = |channels, stride| BlockSpec {
            channels,
            stride,
            convs: 1,
            dilation: 1,
        };
        Self {
            blocks: vec![b(4, 2), b(6, 2), b(channels, 2), b(channels, 1)],
        }
    }

    pub fn stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(3, |b| b.channels)
    }
}

/// Encoder output: `height x width x channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, stride: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            stride,
            data,
        }
    }

    pub fn grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            stride: self.stride,
        }
    }

    pub fn cell(&self, i: usize, j: usize) -> &[T] {
        let o = (i * self.width + j) * self.channels;
        &self.data[o..o + self.channels]
    }
}

/// `S x S x C` pooled region.
#[derive(Debug, Clone, PartialEq)]
pub struct RoIFeature<T> {
    pub size: usize,
    pub channels: usize,
    pub source: BBox,
    pub data: Vec<T>,
}

/// Spatial layout of a feature map, independent of its values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl Grid {
    fn to_feature(&self, v: f64) -> f64 {
        v / self.stride as f64 - 0.5
    }

    /// Bilinear taps for feature coordinates `(fx, fy)`.
    fn bilinear<T: Real>(&self, fx: f64, fy: f64, out: u32, scale: f64, taps: &mut Vec<Tap<T>>) {
        let (h, w) = (self.height as f64, self.width as f64);
        if fy < -1.0 || fy > h || fx < -1.0 || fx > w {
            return;
        }
        let (y, y_lo, y_hi) = clamp_axis(fy, self.height);
        let (x, x_lo, x_hi) = clamp_axis(fx, self.width);
        let (ly, lx) = (y - y_lo as f64, x - x_lo as f64);
        let (hy, hx) = (1.0 - ly, 1.0 - lx);
        let corners = [
            (y_lo, x_lo, hy * hx),
            (y_lo, x_hi, hy * lx),
            (y_hi, x_lo, ly * hx),
            (y_hi, x_hi, ly * lx),
        ];
        for (yy, xx, wgt) in corners {
            if wgt != 0.0 {
                taps.push(Tap {
                    out,
                    src: (yy * self.width + xx) as u32,
                    weight: T::of(wgt * scale),
                });
            }
        }
    }

    /// Taps producing `S * S` output rows starting at row `first_row`.
    pub fn roi_taps<T: Real>(&self, b: &BBox, size: usize, first_row: usize) -> Vec<Tap<T>> {
        let (x0, y0) = (self.to_feature(b.x0), self.to_feature(b.y0));
        let (x1, y1) = (self.to_feature(b.x1), self.to_feature(b.y1));
        let (bw, bh) = ((x1 - x0) / size as f64, (y1 - y0) / size as f64);
        let n = ROI_SAMPLES as f64;
        let scale = 1.0 / (n * n);
        let mut taps = Vec::with_capacity(size * size * ROI_SAMPLES * ROI_SAMPLES * 4);
        for by in 0..size {
            for bx in 0..size {
                let out = (first_row + by * size + bx) as u32;
                for sy in 0..ROI_SAMPLES {
                    let fy = y0 + by as f64 * bh + (sy as f64 + 0.5) * bh / n;
                    for sx in 0..ROI_SAMPLES {
                        let fx = x0 + bx as f64 * bw + (sx as f64 + 0.5) * bw / n;
                        self.bilinear(fx, fy, out, scale, &mut taps);
                    }
                }
            }
        }
        taps
    }

    pub fn point_taps<T: Real>(&self, p: Point, row: usize) -> Vec<Tap<T>> {
        let mut taps = Vec::with_capacity(4);
        self.bilinear(self.to_feature(p.x), self.to_feature(p.y), row as u32, 1.0, &mut taps);
        taps
    }
}

fn clamp_axis(v: f64, len: usize) -> (f64, usize, usize) {
    let v = v.max(0.0);
    let lo = v.floor() as usize;
    if lo >= len - 1 {
        ((len - 1) as f64, len - 1, len - 1)
    } else {
        (v, lo, lo + 1)
    }
}

fn apply_taps<T: Real>(src: &[T], channels: usize, taps: &[Tap<T>], rows: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * channels];
    for t in taps {
        let (o, i) = (t.out as usize * channels, t.src as usize * channels);
        for (d, &v) in out[o..o + channels].iter_mut().zip(&src[i..i + channels]) {
            *d += t.weight * v;
        }
    }
    out
}

pub fn roi_align<T: Real>(fm: &FeatureMap<T>, b: &BBox, size: usize) -> RoIFeature<T> {
    let taps = fm.grid().roi_taps(b, size, 0);
    RoIFeature {
        size,
        channels: fm.channels,
        source: *b,
        data: apply_taps(&fm.data, fm.channels, &taps, size * size),
    }
}

pub fn point_feature<T: Real>(fm: &FeatureMap<T>, p: Point) -> Vec<T> {
    let taps = fm.grid().point_taps(p, 0);
    apply_taps(&fm.data, fm.channels, &taps, 1)
}

/// RoIAlign of several boxes into one `(n * S * S) x C` node.
pub fn roi_align_var<T: Real>(g: &mut Graph<T>, fm: Var, grid: Grid, boxes: &[BBox], size: usize) -> Var {
    let channels = *g.shape(fm).last().unwrap();
    let cells = size * size;
    let taps = boxes
        .iter()
        .enumerate()
        .flat_map(|(i, b)| grid.roi_taps(b, size, i * cells))
        .collect();
    g.gather(fm, taps, &[boxes.len() * cells, channels])
}

pub fn point_feature_var<T: Real>(g: &mut Graph<T>, fm: Var, grid: Grid, p: Point) -> Var {
    let channels = *g.shape(fm).last().unwrap();
    let taps = grid.point_taps(p, 0);
    g.gather(fm, taps, &[1, channels])
}

/// Square centered on `p` whose half side is the distance to the nearest
/// image border.
pub fn bfr_region(p: Point, size: ImageSize) -> Result<BBox> {
    if !p.within(size) {
        return Err(Error::Input(format!("point ({}, {}) outside image", p.x, p.y)));
    }
    let half = p
        .x
        .min(p.y)
        .min(size.width as f64 - p.x)
        .min(size.height as f64 - p.y);
    if half < 1.0 {
        return Err(Error::DegenerateRegion(format!(
            "point ({}, {}) is within one pixel of the border",
            p.x, p.y
        )));
    }
    BBox::new(p.x - half, p.y - half, p.x + half, p.y + half)
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    dilation: usize,
    relu: bool,
}

/// Convolutional encoder; every conv is 3x3, the last one has no ReLU.
#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Vec<ConvLayer>,
    stride: usize,
    channels: usize,
}

impl Backbone {
    pub fn register<T: Real, R: Rng + ?Sized>(
        cfg: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::new();
        let mut in_ch = 3;
        let total: usize = cfg.blocks.iter().map(|b| b.convs).sum();
        for (bi, block) in cfg.blocks.iter().enumerate() {
            for ci in 0..block.convs {
                let stride = if ci == 0 { block.stride } else { 1 };
                let name = format!("backbone.block{bi}.conv{ci}");
                let weight = store.push(
                    format!("{name}.weight"),
                    params::he_normal(rng, &[9 * in_ch, block.channels]),
                );
                let bias = store.push(format!("{name}.bias"), params::constant(&[block.channels], 0.0));
                layers.push(ConvLayer {
                    weight,
                    bias,
                    in_channels: in_ch,
                    out_channels: block.channels,
                    stride,
                    dilation: block.dilation,
                    relu: layers.len() + 1 < total,
                });
                in_ch = block.channels;
            }
        }
        Self {
            layers,
            stride: cfg.stride(),
            channels: cfg.out_channels(),
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn output_dims(&self, size: ImageSize) -> (usize, usize) {
        let (mut h, mut w) = (size.height, size.width);
        for l in &self.layers {
            h = (h - 1) / l.stride + 1;
            w = (w - 1) / l.stride + 1;
        }
        (h, w)
    }

    /// Returns the feature node and its grid.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, img: &Image) -> Result<(Var, Grid)> {
        img.check_min_size()?;
        let data = img.data().iter().map(|&v| T::of(v as f64 - 0.5)).collect();
        let mut x = g.constant(Tensor::new(vec![img.height(), img.width(), 3], data));
        let (mut h, mut w) = (img.height(), img.width());
        for l in &self.layers {
            let geom = ConvGeom {
                height: h,
                width: w,
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: 3,
                stride: l.stride,
                pad: l.dilation,
                dilation: l.dilation,
            };
            x = g.conv2d(x, bound.var(l.weight), bound.var(l.bias), geom);
            if l.relu {
                x = g.relu(x);
            }
            h = geom.out_height();
            w = geom.out_width();
        }
        let grid = Grid {
            height: h,
            width: w,
            stride: self.stride,
        };
        Ok((x, grid))
    }

    pub fn encode_image<T: Real>(&self, store: &ParamStore<T>, img: &Image) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let (fm, grid) = self.forward(&mut g, &bound, img)?;
        let data = g.value(fm).data.clone();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite feature map".into()));
        }
        Ok(FeatureMap::new(grid.height, grid.width, self.channels, self.stride, data))
    }
}
