//! Template-matching single-object tracker: zero-normalized cross
//! correlation over a search window at three scales, no template update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    /// Search window side relative to the current box.
    pub search_factor: f64,
    pub scales: Vec<f64>,
    /// Template cells along the longer box side.
    pub template_cells: usize,
    /// Response multiplier for scales other than 1.
    pub scale_penalty: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            search_factor: 2.5,
            scales: vec![0.95, 1.0, 1.05],
            template_cells: 24,
            scale_penalty: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    config: TrackerConfig,
    /// Zero-mean, unit-norm template, `rows x cols x 3`.
    template: Vec<f32>,
    cols: usize,
    rows: usize,
    current: BBox,
    score: f64,
    /// The initial box reached outside the frame and was clipped.
    pub clipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Per-channel summed-area table with a zero border row and column.
struct Integral {
    w: usize,
    h: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(img: &Image) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = (w + 1) * 3;
        let mut sums = vec![0.0; (h + 1) * stride];
        let data = img.data();
        for y in 0..h {
            let mut row = [0.0f64; 3];
            for x in 0..w {
                for c in 0..3 {
                    row[c] += data[(y * w + x) * 3 + c] as f64;
                    sums[(y + 1) * stride + (x + 1) * 3 + c] = sums[y * stride + (x + 1) * 3 + c] + row[c];
                }
            }
        }
        Self { w, h, sums }
    }

    /// Integral up to the fractional position `(x, y)`, linearly interpolated.
    fn at(&self, x: f64, y: f64, c: usize) -> f64 {
        let x = x.clamp(0.0, self.w as f64);
        let y = y.clamp(0.0, self.h as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w), (y0 + 1).min(self.h));
        let (ax, ay) = (x - x0 as f64, y - y0 as f64);
        let stride = (self.w + 1) * 3;
        let s = |xi: usize, yi: usize| self.sums[yi * stride + xi * 3 + c];
        let top = s(x0, y0) * (1.0 - ax) + s(x1, y0) * ax;
        let bot = s(x0, y1) * (1.0 - ax) + s(x1, y1) * ax;
        top * (1.0 - ay) + bot * ay
    }

    /// Mean over a rectangle; outside the image the nearest edge pixels
    /// stand in.
    fn mean(&self, x0: f64, y0: f64, x1: f64, y1: f64, c: usize) -> f32 {
        let (w, h) = (self.w as f64, self.h as f64);
        let cx = |v: f64| v.clamp(0.0, w);
        let cy = |v: f64| v.clamp(0.0, h);
        let (mut ax0, mut ax1, mut ay0, mut ay1) = (cx(x0), cx(x1), cy(y0), cy(y1));
        if ax1 - ax0 < 1e-6 {
            let m = ax0.clamp(0.5, w - 0.5);
            ax0 = m - 0.5;
            ax1 = m + 0.5;
        }
        if ay1 - ay0 < 1e-6 {
            let m = ay0.clamp(0.5, h - 0.5);
            ay0 = m - 0.5;
            ay1 = m + 0.5;
        }
        let s = self.at(ax1, ay1, c) - self.at(ax0, ay1, c) - self.at(ax1, ay0, c) + self.at(ax0, ay0, c);
        (s / ((ax1 - ax0) * (ay1 - ay0))) as f32
    }

    /// `rows x cols x 3` grid of cell means, cells of `cw x ch` starting at
    /// `(x0, y0)`.
    fn grid(&self, x0: f64, y0: f64, cw: f64, ch: f64, cols: usize, rows: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(rows * cols * 3);
        for r in 0..rows {
            let ya = y0 + r as f64 * ch;
            for q in 0..cols {
                let xa = x0 + q as f64 * cw;
                for c in 0..3 {
                    out.push(self.mean(xa, ya, xa + cw, ya + ch, c));
                }
            }
        }
        out
    }
}

fn template_dims(b: &BBox, cells: usize) -> (usize, usize) {
    let (w, h) = (b.width(), b.height());
    let long = w.max(h);
    let cols = ((w / long) * cells as f64).round().max(4.0) as usize;
    let rows = ((h / long) * cells as f64).round().max(4.0) as usize;
    (cols, rows)
}

fn normalize(v: &mut [f32]) -> bool {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let norm = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>().sqrt();
    let ok = norm > 1e-9;
    let inv = if ok { 1.0 / norm } else { 0.0 };
    v.iter_mut().for_each(|x| *x = ((*x as f64 - mean) * inv) as f32);
    ok
}

pub fn tracker_init(frame: &Image, b0: &BBox, config: &TrackerConfig) -> Result<TrackerState> {
    if config.scales.is_empty() || config.template_cells < 4 || config.search_factor < 1.0 {
        return Err(Error::Config(format!("invalid tracker config {config:?}")));
    }
    if !(b0.width() > 0.0 && b0.height() > 0.0) {
        return Err(Error::TrackerInit("zero-area initial box".into()));
    }
    let size = frame.size();
    let clipped = b0
        .clip(size)
        .map_err(|_| Error::TrackerInit(format!("initial box {:?} lies outside the frame", b0.to_array())))?;
    if clipped.width() < 1.0 || clipped.height() < 1.0 {
        return Err(Error::TrackerInit("initial box is under one pixel after clipping".into()));
    }
    let (cols, rows) = template_dims(&clipped, config.template_cells);
    let integral = Integral::new(frame);
    let mut template = integral.grid(
        clipped.x0,
        clipped.y0,
        clipped.width() / cols as f64,
        clipped.height() / rows as f64,
        cols,
        rows,
    );
    normalize(&mut template);
    Ok(TrackerState {
        config: config.clone(),
        template,
        cols,
        rows,
        current: clipped,
        score: 1.0,
        clipped: clipped != *b0,
    })
}

/// Offset of a parabola's vertex through three equally spaced samples.
fn parabolic(l: f64, c: f64, r: f64) -> f64 {
    let d = l - 2.0 * c + r;
    if d < 0.0 {
        (0.5 * (l - r) / d).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

struct Best {
    score: f64,
    raw: f64,
    scale: f64,
    cx: f64,
    cy: f64,
}

impl TrackerState {
    pub fn current(&self) -> BBox {
        self.current
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    /// Matches the template in `frame` and moves the current box.
    pub fn step(&mut self, frame: &Image) -> BBox {
        let size = frame.size();
        let integral = Integral::new(frame);
        let (cols, rows) = (self.cols, self.rows);
        let c0 = self.current.center();
        let mut best: Option<Best> = None;
        for &s in &self.config.scales {
            let (w, h) = (self.current.width() * s, self.current.height() * s);
            let (cw, ch) = (w / cols as f64, h / rows as f64);
            let reach = (self.config.search_factor - 1.0) / 2.0;
            let (nx, ny) = ((reach * w / cw).round() as isize, (reach * h / ch).round() as isize);
            let gcols = cols + 2 * nx as usize;
            let grows = rows + 2 * ny as usize;
            let gx0 = c0.x - w / 2.0 - nx as f64 * cw;
            let gy0 = c0.y - h / 2.0 - ny as f64 * ch;
            let grid = integral.grid(gx0, gy0, cw, ch, gcols, grows);
            let resp = self.response(&grid, gcols, grows);
            let (pw, ph) = (gcols - cols + 1, grows - rows + 1);
            let penalty = if (s - 1.0).abs() < 1e-12 { 1.0 } else { self.config.scale_penalty };
            for py in 0..ph {
                for px in 0..pw {
                    let (dx, dy) = (px as isize - nx, py as isize - ny);
                    let cx = c0.x + dx as f64 * cw;
                    let cy = c0.y + dy as f64 * ch;
                    if !(0.0..size.width as f64).contains(&cx) || !(0.0..size.height as f64).contains(&cy) {
                        continue;
                    }
                    let r = resp[py * pw + px];
                    // Slight preference for small displacements breaks ties
                    // on flat responses.
                    let score = r * penalty - 1e-6 * ((dx * dx + dy * dy) as f64);
                    if best.as_ref().is_none_or(|b| score > b.score) {
                        let at = |x: usize, y: usize| resp[y * pw + x];
                        let sx = if px > 0 && px + 1 < pw { parabolic(at(px - 1, py), r, at(px + 1, py)) } else { 0.0 };
                        let sy = if py > 0 && py + 1 < ph { parabolic(at(px, py - 1), r, at(px, py + 1)) } else { 0.0 };
                        best = Some(Best {
                            score,
                            raw: r,
                            scale: s,
                            cx: cx + sx * cw,
                            cy: cy + sy * ch,
                        });
                    }
                }
            }
        }
        if let Some(b) = best {
            let (w, h) = (self.current.width() * b.scale, self.current.height() * b.scale);
            let cand = BBox::from_center(b.cx, b.cy, w, h).and_then(|c| c.clip(size));
            if let Ok(c) = cand {
                if c.width() >= 1.0 && c.height() >= 1.0 {
                    self.current = c;
                }
            }
            self.score = b.raw;
        }
        self.current
    }

    /// ZNCC of the template at every placement inside the grid.
    fn response(&self, grid: &[f32], gcols: usize, grows: usize) -> Vec<f64> {
        let (cols, rows) = (self.cols, self.rows);
        let (pw, ph) = (gcols - cols + 1, grows - rows + 1);
        let n = (cols * rows * 3) as f64;
        // Row-wise prefix sums of values and squares for window statistics.
        let stride = gcols * 3;
        let mut sum = vec![0.0f64; (grows + 1) * (gcols + 1)];
        let mut sq = vec![0.0f64; (grows + 1) * (gcols + 1)];
        for y in 0..grows {
            let (mut rs, mut rq) = (0.0, 0.0);
            for x in 0..gcols {
                for c in 0..3 {
                    let v = grid[y * stride + x * 3 + c] as f64;
                    rs += v;
                    rq += v * v;
                }
                let i = (y + 1) * (gcols + 1) + x + 1;
                sum[i] = sum[i - gcols - 1] + rs;
                sq[i] = sq[i - gcols - 1] + rq;
            }
        }
        let rect = |t: &[f64], x: usize, y: usize| {
            let w = gcols + 1;
            t[(y + rows) * w + x + cols] - t[y * w + x + cols] - t[(y + rows) * w + x] + t[y * w + x]
        };
        let row_len = cols * 3;
        let mut out = vec![0.0; pw * ph];
        for py in 0..ph {
            for px in 0..pw {
                let mut dot = 0.0f32;
                for r in 0..rows {
                    let g = &grid[(py + r) * stride + px * 3..(py + r) * stride + px * 3 + row_len];
                    let t = &self.template[r * row_len..(r + 1) * row_len];
                    dot += g.iter().zip(t).map(|(a, b)| a * b).sum::<f32>();
                }
                let s = rect(&sum, px, py);
                let q = rect(&sq, px, py);
                let var = (q - s * s / n).max(0.0);
                out[py * pw + px] = if var > 1e-12 { dot as f64 / var.sqrt() } else { 0.0 };
            }
        }
        out
    }
}

/// Initializes on the first frame and steps through the rest; returns one
/// record per later frame.
pub fn track_sequence(frames: &[Image], b0: &BBox, config: &TrackerConfig) -> Result<Vec<TrackRecord>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Input("empty frame sequence".into()))?;
    let mut state = tracker_init(first, b0, config)?;
    Ok(frames
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, f)| {
            let bbox = state.step(f);
            TrackRecord {
                frame: i,
                bbox,
                score: state.score(),
            }
        })
        .collect())
}

/// Frames must share one size.
pub fn check_frames(frames: &[Image]) -> Result<ImageSize> {
    let size = frames
        .first()
        .ok_or_else(|| Error::Input("empty frame sequence".into()))?
        .size();
    if frames.iter().any(|f| f.size() != size) {
        return Err(Error::Input("frames differ in size".into()));
    }
    Ok(size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn scene(w: usize, h: usize, obj: &BBox) -> Image {
        let mut img = Image::filled(w, h, [0.2, 0.3, 0.25]);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if px >= obj.x0 && px < obj.x1 && py >= obj.y0 && py < obj.y1 {
                    let u = (px - obj.x0) / obj.width();
                    let v = (py - obj.y0) / obj.height();
                    img.set_pixel(x, y, [u as f32, 0.9 - 0.6 * v as f32, ((u * 7.0).floor() as f32 % 2.0) * 0.5]);
                }
            }
        }
        img
    }

    #[test]
    fn init_returns_the_initial_box() {
        let b = BBox::new(40.0, 50.0, 90.0, 80.0).unwrap();
        let s = tracker_init(&scene(160, 120, &b), &b, &TrackerConfig::default()).unwrap();
        assert_eq!(s.current(), b);
        assert!(!s.clipped);
    }

    #[test]
    fn clipped_initial_box_is_flagged() {
        let b = BBox::new(140.0, 50.0, 190.0, 80.0).unwrap();
        let s = tracker_init(&scene(160, 120, &b), &b, &TrackerConfig::default()).unwrap();
        assert!(s.clipped);
        assert_eq!(s.current().x1, 160.0);
    }

    #[test]
    fn zero_area_box_is_rejected() {
        let img = Image::filled(64, 64, [0.5; 3]);
        let b = BBox { x0: 10.0, y0: 10.0, x1: 10.0, y1: 20.0 };
        assert!(matches!(tracker_init(&img, &b, &TrackerConfig::default()), Err(Error::TrackerInit(_))));
    }

    #[test]
    fn translating_object_is_followed() {
        let b0 = BBox::new(20.0, 30.0, 60.0, 60.0).unwrap();
        let frames: Vec<Image> = (0..30)
            .map(|t| scene(200, 120, &b0.translate(2.0 * t as f64, 0.5 * t as f64)))
            .collect();
        let out = track_sequence(&frames, &b0, &TrackerConfig::default()).unwrap();
        assert_eq!(out.len(), 29);
        for r in &out {
            let gt = b0.translate(2.0 * r.frame as f64, 0.5 * r.frame as f64);
            assert!(iou(&r.bbox, &gt) > 0.8, "frame {}: {:?}", r.frame, r.bbox);
        }
    }

    #[test]
    fn single_frame_gives_no_records() {
        let b = BBox::new(10.0, 10.0, 30.0, 30.0).unwrap();
        assert!(track_sequence(&[scene(64, 64, &b)], &b, &TrackerConfig::default()).unwrap().is_empty());
    }
}
