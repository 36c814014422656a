//! Edge-distance regressors: one reads the pooled border-bounded region
//! around the click (BFR), the other the feature at the click itself (PFR).

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{bfr_region, point_feature_var, roi_align_var, Grid};
use crate::geometry::{box_from_point_distances, BBox, EdgeDistances, ImageSize, Point};
use crate::params::{self, Bound, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceSource {
    Region { roi_size: usize },
    Point,
}

/// Linear head to four softplus-squashed distances, in units of `scale`.
#[derive(Debug, Clone)]
pub struct DistanceHead {
    pub source: DistanceSource,
    pub scale: f64,
    weight: ParamId,
    bias: ParamId,
}

/// Forward result: `1 x 4` normalized distances `(l, t, r, b) / scale` and
/// the decoded box.
#[derive(Debug, Clone)]
pub struct DistanceTrace {
    pub click: Point,
    pub distances: Var,
    pub output: BBox,
}

impl DistanceHead {
    pub fn register<T: Real, R: Rng + ?Sized>(
        name: &str,
        source: DistanceSource,
        channels: usize,
        scale: f64,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let inputs = match source {
            DistanceSource::Region { roi_size } => roi_size * roi_size * channels,
            DistanceSource::Point => channels,
        };
        let weight = store.push(
            format!("{name}.head.weight"),
            params::normal(rng, &[inputs, 4], 0.1 / (inputs as f64).sqrt()),
        );
        // softplus(0.5) * 32 is roughly a 30 px half-extent, a middling object.
        let bias = store.push(format!("{name}.head.bias"), params::constant(&[4], 0.5));
        Self {
            source,
            scale,
            weight,
            bias,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        fm: Var,
        grid: Grid,
        size: ImageSize,
        p: Point,
    ) -> Result<DistanceTrace> {
        if !p.within(size) {
            return Err(Error::PointOutside { x: p.x, y: p.y });
        }
        let x = match self.source {
            DistanceSource::Region { roi_size } => {
                let region = bfr_region(p, size)?;
                let roi = roi_align_var(g, fm, grid, &[region], roi_size);
                let n = g.value(roi).len();
                g.reshape(roi, &[1, n])
            }
            DistanceSource::Point => point_feature_var(g, fm, grid, p),
        };
        let z = g.linear(x, bound.var(self.weight), bound.var(self.bias));
        let distances = g.softplus(z);
        let d: Vec<f64> = g.value(distances).to_f64().iter().map(|v| v * self.scale).collect();
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite edge distances".into()));
        }
        let output = box_from_point_distances(p, EdgeDistances::new(d[0], d[1], d[2], d[3]))
            .and_then(|b| b.clip(size))
            .map_err(|e| Error::RefinementFailure(e.to_string()))?;
        Ok(DistanceTrace {
            click: p,
            distances,
            output,
        })
    }
}
