//! Synthetic scenes: textured objects on cluttered backgrounds, with
//! whole/part pairs nested inside one another, and motion sequences built
//! from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};
use crate::image::Image;

/// Categories that contain a part, paired with that part.
pub const NESTED_PAIRS: [(&str, &str); 3] = [("vehicle", "plate"), ("animal", "head"), ("person", "face")];
/// Categories that never nest.
pub const STANDALONE: [&str; 2] = ["ball", "sign"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Ellipse,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    HorizontalBands,
    VerticalBars,
    Spots,
    Solid,
    SplitVertical,
    Eyes,
    Radial,
    Bordered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub shape: Shape,
    pub pattern: Pattern,
    pub base: [f32; 3],
    pub accent: [f32; 3],
    /// Pattern repeat count across the object.
    pub frequency: f32,
    pub noise: f32,
    pub noise_seed: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticObject {
    pub id: usize,
    pub category: String,
    pub parent: Option<usize>,
    /// One box per frame.
    pub boxes: Vec<BBox>,
    /// Per frame: the rendered box had to be clipped to the frame.
    #[serde(default)]
    pub occluded: Vec<bool>,
    pub texture: Texture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clutter {
    pub shape: Shape,
    pub bounds: BBox,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub top: [f32; 3],
    pub bottom: [f32; 3],
    pub clutter: Vec<Clutter>,
    pub noise: f32,
    pub noise_seed: u32,
}

/// A rendered scene; a motion sequence is the same structure with more
/// than one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub size: ImageSize,
    pub background: Background,
    pub objects: Vec<SyntheticObject>,
    pub frames: Vec<Image>,
}

pub type FrameSequence = SyntheticScene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that the scene holds a whole/part pair.
    pub nested_probability: f64,
    pub clutter: usize,
    /// Side of a whole object, as the square root of its area.
    pub whole_side: (f64, f64),
    pub single_side: (f64, f64),
    /// Part side relative to its parent.
    pub part_fraction: (f64, f64),
    /// Largest part-center offset from the parent center, relative to the
    /// parent size.
    pub part_offset: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            min_objects: 2,
            max_objects: 6,
            nested_probability: 0.6,
            clutter: 14,
            whole_side: (48.0, 140.0),
            single_side: (24.0, 90.0),
            part_fraction: (0.25, 0.4),
            part_offset: 0.2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 64
            && self.height >= 64
            && self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && (0.0..=1.0).contains(&self.nested_probability)
            && self.whole_side.0 > 4.0
            && self.whole_side.0 <= self.whole_side.1
            && self.single_side.0 > 4.0
            && self.single_side.0 <= self.single_side.1
            && self.part_fraction.0 > 0.0
            && self.part_fraction.0 <= self.part_fraction.1
            && self.part_fraction.1 < 0.8
            && (0.0..0.3).contains(&self.part_offset);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    /// Bound on per-axis center speed, pixels per frame.
    pub max_speed: f64,
    /// Bound on the relative size change per frame.
    pub max_scale_rate: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            max_speed: 3.0,
            max_scale_rate: 0.004,
        }
    }
}

fn hash(mut x: u32) -> u32 {
    x ^= x >> 16;
    x = x.wrapping_mul(0x7feb_352d);
    x ^= x >> 15;
    x = x.wrapping_mul(0x846c_a68b);
    x ^ (x >> 16)
}

/// Deterministic per-pixel noise in `[-1, 1]`.
fn noise(seed: u32, x: i64, y: i64) -> f32 {
    let h = hash(seed ^ hash((x as u32).wrapping_mul(73_856_093) ^ (y as u32).wrapping_mul(19_349_663)));
    (h as f32 / u32::MAX as f32) * 2.0 - 1.0
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn contrast(c: [f32; 3]) -> [f32; 3] {
    let l = (c[0] + c[1] + c[2]) / 3.0;
    let shift = if l > 0.5 { -0.45 } else { 0.45 };
    c.map(|v| (v + shift).clamp(0.0, 1.0))
}

fn inside(shape: Shape, b: &BBox, x: f64, y: f64) -> bool {
    let (u, v) = ((x - b.x0) / b.width(), (y - b.y0) / b.height());
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    let (du, dv) = (2.0 * u - 1.0, 2.0 * v - 1.0);
    match shape {
        Shape::Rect => true,
        Shape::Ellipse => du * du + dv * dv <= 1.0,
        Shape::Diamond => du.abs() + dv.abs() <= 1.0,
    }
}

fn texture_color(t: &Texture, b: &BBox, x: f64, y: f64) -> [f32; 3] {
    let (u, v) = ((x - b.x0) / b.width(), (y - b.y0) / b.height());
    let f = t.frequency as f64;
    let accent = match t.pattern {
        Pattern::HorizontalBands => ((v * f).floor() as i64) % 2 == 1,
        Pattern::VerticalBars => {
            let cell = (u * f).fract();
            (0.15..0.75).contains(&v) && (0.2..0.6).contains(&cell)
        }
        Pattern::Spots => {
            let (cu, cv) = ((u * f).fract() - 0.5, (v * f).fract() - 0.5);
            cu * cu + cv * cv < 0.09
        }
        Pattern::Solid => false,
        Pattern::SplitVertical => v > 0.45,
        Pattern::Eyes => {
            let e = |cx: f64| (u - cx).powi(2) + (v - 0.4).powi(2) < 0.012;
            e(0.32) || e(0.68) || ((0.35..0.65).contains(&u) && (0.68..0.76).contains(&v))
        }
        Pattern::Radial => false,
        Pattern::Bordered => {
            let (du, dv) = ((2.0 * u - 1.0).abs(), (2.0 * v - 1.0).abs());
            du + dv > 0.7
        }
    };
    let mut c = if accent { t.accent } else { t.base };
    if t.pattern == Pattern::Radial {
        let r = ((u - 0.35).powi(2) + (v - 0.35).powi(2)).sqrt() as f32;
        let k = (1.15 - r).clamp(0.3, 1.15);
        c = c.map(|v| v * k);
    }
    let n = noise(t.noise_seed, x.floor() as i64, y.floor() as i64) * t.noise;
    c.map(|v| (v + n).clamp(0.0, 1.0))
}

fn category_texture<R: Rng + ?Sized>(category: &str, rng: &mut R) -> Result<(Texture, (f64, f64))> {
    let base = random_color(rng);
    let (shape, pattern, aspect, frequency) = match category {
        "vehicle" => (Shape::Rect, Pattern::HorizontalBands, (1.5, 2.4), rng.random_range(3.0..6.0)),
        "plate" => (Shape::Rect, Pattern::VerticalBars, (2.0, 3.2), rng.random_range(4.0..7.0)),
        "animal" => (Shape::Ellipse, Pattern::Spots, (1.2, 1.8), rng.random_range(3.0..5.0)),
        "head" => (Shape::Ellipse, Pattern::Solid, (0.8, 1.2), 1.0),
        "person" => (Shape::Rect, Pattern::SplitVertical, (0.4, 0.65), 1.0),
        "face" => (Shape::Ellipse, Pattern::Eyes, (0.75, 0.95), 1.0),
        "ball" => (Shape::Ellipse, Pattern::Radial, (1.0, 1.0), 1.0),
        "sign" => (Shape::Diamond, Pattern::Bordered, (0.9, 1.1), 1.0),
        other => return Err(Error::Vocabulary(other.to_string())),
    };
    let base = match category {
        "plate" => [0.85 + 0.15 * base[0], 0.85 + 0.15 * base[1], 0.4 + 0.6 * base[2]],
        "face" => [0.75 + 0.2 * base[0], 0.55 + 0.2 * base[1], 0.4 + 0.2 * base[2]],
        _ => base,
    };
    let texture = Texture {
        shape,
        pattern,
        base,
        accent: contrast(base),
        frequency: frequency as f32,
        noise: rng.random_range(0.02..0.06),
        noise_seed: rng.random(),
    };
    Ok((texture, aspect))
}

fn sized_box<R: Rng + ?Sized>(rng: &mut R, side: (f64, f64), aspect: (f64, f64), size: ImageSize) -> BBox {
    let s = rng.random_range(side.0..=side.1);
    let a = rng.random_range(aspect.0..=aspect.1);
    let (w, h) = ((s * s * a).sqrt(), (s * s / a).sqrt());
    let (w, h) = (w.min(size.width as f64 - 4.0), h.min(size.height as f64 - 4.0));
    let cx = rng.random_range(w / 2.0 + 2.0..=size.width as f64 - w / 2.0 - 2.0);
    let cy = rng.random_range(h / 2.0 + 2.0..=size.height as f64 - h / 2.0 - 2.0);
    BBox::from_center(cx, cy, w, h).expect("positive size")
}

fn part_box<R: Rng + ?Sized>(rng: &mut R, parent: &BBox, cfg: &SceneConfig, aspect: (f64, f64)) -> BBox {
    let f = rng.random_range(cfg.part_fraction.0..=cfg.part_fraction.1);
    let a = rng.random_range(aspect.0..=aspect.1);
    let s = f * (parent.width() * parent.height()).sqrt();
    let w = (s * a.sqrt()).min(0.6 * parent.width());
    let h = (s / a.sqrt()).min(0.6 * parent.height());
    let c = parent.center();
    let max_dx = (cfg.part_offset * parent.width()).min((parent.width() - w) / 2.0 - 1.0).max(0.0);
    let max_dy = (cfg.part_offset * parent.height()).min((parent.height() - h) / 2.0 - 1.0).max(0.0);
    let dx = rng.random_range(-max_dx..=max_dx);
    let dy = rng.random_range(-max_dy..=max_dy);
    BBox::from_center(c.x + dx, c.y + dy, w, h).expect("positive size")
}

fn overlap_fraction(b: &BBox, others: &[BBox]) -> f64 {
    others.iter().map(|o| b.intersection_area(o)).sum::<f64>() / b.area()
}

fn background<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Background {
    let top = random_color(rng).map(|v| 0.2 + 0.6 * v);
    let bottom = random_color(rng).map(|v| 0.2 + 0.6 * v);
    let size = ImageSize::new(cfg.width, cfg.height);
    let clutter = (0..cfg.clutter)
        .map(|_| {
            let shape = [Shape::Rect, Shape::Ellipse, Shape::Diamond][rng.random_range(0..3)];
            let bounds = sized_box(rng, (6.0, 40.0), (0.3, 3.0), size);
            let mid = [0, 1, 2].map(|c| (top[c] + bottom[c]) / 2.0);
            let color = mid.map(|v| (v + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0));
            Clutter { shape, bounds, color }
        })
        .collect();
    Background {
        top,
        bottom,
        clutter,
        noise: rng.random_range(0.02..0.08),
        noise_seed: rng.random(),
    }
}

/// Draws the background and every object at `frame`, parents before parts.
pub fn render(size: ImageSize, bg: &Background, objects: &[SyntheticObject], frame: usize) -> Image {
    let (w, h) = (size.width, size.height);
    let mut img = Image::filled(w, h, [0.0; 3]);
    let mut order: Vec<&SyntheticObject> = objects.iter().collect();
    order.sort_by_key(|o| (o.parent.is_some(), o.id));
    for y in 0..h {
        let t = y as f32 / (h - 1).max(1) as f32;
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = [0, 1, 2].map(|i| bg.top[i] * (1.0 - t) + bg.bottom[i] * t);
            for cl in &bg.clutter {
                if inside(cl.shape, &cl.bounds, px, py) {
                    c = cl.color;
                }
            }
            let n = noise(bg.noise_seed, x as i64, y as i64) * bg.noise;
            c = c.map(|v| (v + n).clamp(0.0, 1.0));
            for o in &order {
                let b = &o.boxes[frame];
                if inside(o.texture.shape, b, px, py) {
                    c = texture_color(&o.texture, b, px, py);
                }
            }
            img.set_pixel(x, y, c);
        }
    }
    img.quantized()
}

/// One-frame scene, fully determined by `seed` and `cfg`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = ImageSize::new(cfg.width, cfg.height);
    let bg = background(&mut rng, cfg);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let nested = rng.random::<f64>() < cfg.nested_probability;

    let mut objects: Vec<SyntheticObject> = Vec::new();
    let mut placed: Vec<BBox> = Vec::new();
    let add = |objects: &mut Vec<SyntheticObject>, category: &str, parent: Option<usize>, b: BBox, texture: Texture| {
        let id = objects.len();
        objects.push(SyntheticObject {
            id,
            category: category.to_string(),
            parent,
            boxes: vec![b],
            occluded: vec![false],
            texture,
        });
        id
    };

    let mut remaining = count;
    if nested {
        let (whole, part) = NESTED_PAIRS[rng.random_range(0..NESTED_PAIRS.len())];
        let (tex, aspect) = category_texture(whole, &mut rng)?;
        let wb = sized_box(&mut rng, cfg.whole_side, aspect, size);
        let wid = add(&mut objects, whole, None, wb, tex);
        let (ptex, paspect) = category_texture(part, &mut rng)?;
        let pb = part_box(&mut rng, &wb, cfg, paspect);
        add(&mut objects, part, Some(wid), pb, ptex);
        placed.push(wb);
        remaining = remaining.saturating_sub(2);
    }
    let singles: Vec<&str> = NESTED_PAIRS
        .iter()
        .flat_map(|(w, p)| [*w, *p])
        .chain(STANDALONE)
        .collect();
    for _ in 0..remaining {
        let category = singles[rng.random_range(0..singles.len())];
        let (tex, aspect) = category_texture(category, &mut rng)?;
        let is_whole = NESTED_PAIRS.iter().any(|(w, _)| *w == category);
        let side = if is_whole { cfg.whole_side } else { cfg.single_side };
        let mut chosen = None;
        for _ in 0..40 {
            let b = sized_box(&mut rng, side, aspect, size);
            let fresh = overlap_fraction(&b, &placed) < 0.1
                && placed.iter().all(|p| b.intersection_area(p) < 0.1 * p.area());
            if fresh {
                chosen = Some(b);
                break;
            }
        }
        if let Some(b) = chosen {
            placed.push(b);
            add(&mut objects, category, None, b, tex);
        }
    }
    let frame = render(size, &bg, &objects, 0);
    Ok(SyntheticScene {
        seed,
        size,
        background: bg,
        objects,
        frames: vec![frame],
    })
}

#[derive(Debug, Clone, Copy)]
struct Motion {
    vx: f64,
    vy: f64,
    rate: f64,
}

/// Moves every top-level object with bounded velocity, bouncing off the
/// frame border; parts ride along with their parent.
pub fn generate_sequence(scene: &SyntheticScene, frames: usize, motion: &MotionConfig) -> Result<FrameSequence> {
    if frames < 2 {
        return Err(Error::Input(format!("a sequence needs at least 2 frames, got {frames}")));
    }
    if !(motion.max_speed >= 0.0 && (0.0..0.2).contains(&motion.max_scale_rate)) {
        return Err(Error::Config(format!("invalid motion config {motion:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5eed_0f_5e9);
    let size = scene.size;
    let (fw, fh) = (size.width as f64, size.height as f64);
    let mut objects: Vec<SyntheticObject> = scene
        .objects
        .iter()
        .map(|o| SyntheticObject {
            boxes: vec![o.boxes[0]],
            occluded: vec![false],
            ..o.clone()
        })
        .collect();
    let mut motions: Vec<Motion> = objects
        .iter()
        .map(|_| Motion {
            vx: rng.random_range(-1.0..=1.0) * motion.max_speed,
            vy: rng.random_range(-1.0..=1.0) * motion.max_speed,
            rate: rng.random_range(-1.0..=1.0) * motion.max_scale_rate,
        })
        .collect();
    let base_area: Vec<f64> = objects.iter().map(|o| o.boxes[0].area()).collect();

    for _ in 1..frames {
        let prev: Vec<BBox> = objects.iter().map(|o| *o.boxes.last().unwrap()).collect();
        let mut next = prev.clone();
        for (i, o) in objects.iter().enumerate() {
            if o.parent.is_some() {
                continue;
            }
            let m = &mut motions[i];
            let b = prev[i];
            let grown = b.area() * (1.0 + m.rate).powi(2) / base_area[i];
            if !(0.6..1.6).contains(&grown) {
                m.rate = -m.rate;
            }
            let s = 1.0 + m.rate;
            let (w, h) = (b.width() * s, b.height() * s);
            let c = b.center();
            let (mut cx, mut cy) = (c.x + m.vx, c.y + m.vy);
            if cx - w / 2.0 < 0.0 || cx + w / 2.0 > fw {
                m.vx = -m.vx;
                cx = c.x + m.vx;
            }
            if cy - h / 2.0 < 0.0 || cy + h / 2.0 > fh {
                m.vy = -m.vy;
                cy = c.y + m.vy;
            }
            next[i] = BBox::from_center(cx, cy, w, h)?;
        }
        for (i, o) in objects.iter().enumerate() {
            if let Some(p) = o.parent {
                let (pb, nb) = (prev[p], next[p]);
                let s = nb.width() / pb.width();
                let (pc, nc) = (pb.center(), nb.center());
                let c = prev[i].center();
                let cx = nc.x + (c.x - pc.x) * s;
                let cy = nc.y + (c.y - pc.y) * s;
                next[i] = BBox::from_center(cx, cy, prev[i].width() * s, prev[i].height() * s)?;
            }
        }
        for (o, b) in objects.iter_mut().zip(next) {
            let clipped = b.clip(size)?;
            o.occluded.push(clipped != b);
            o.boxes.push(clipped);
        }
    }
    let rendered = (0..frames).map(|t| render(size, &scene.background, &objects, t)).collect();
    Ok(SyntheticScene {
        seed: scene.seed,
        size,
        background: scene.background.clone(),
        objects,
        frames: rendered,
    })
}

impl SyntheticScene {
    pub fn object(&self, id: usize) -> Option<&SyntheticObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Part objects with their parent.
    pub fn nested_pairs(&self) -> Vec<(&SyntheticObject, &SyntheticObject)> {
        self.objects
            .iter()
            .filter_map(|o| o.parent.and_then(|p| self.object(p)).map(|w| (w, o)))
            .collect()
    }

    /// Objects that neither contain nor lie inside another object and
    /// overlap nothing else.
    pub fn isolated(&self) -> Vec<&SyntheticObject> {
        self.objects
            .iter()
            .filter(|o| {
                o.parent.is_none()
                    && self.objects.iter().all(|other| {
                        other.id == o.id || other.boxes[0].intersection_area(&o.boxes[0]) == 0.0
                    })
            })
            .collect()
    }

    /// Horizontal mirror of the frames and every annotation.
    pub fn hflip(&self) -> SyntheticScene {
        let w = self.size.width;
        let mut out = self.clone();
        out.frames = self.frames.iter().map(Image::hflip).collect();
        for o in &mut out.objects {
            o.boxes = o.boxes.iter().map(|b| b.hflip(w)).collect();
        }
        out
    }
}
