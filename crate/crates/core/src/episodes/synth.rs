//! Deterministic synthetic shapes dataset.
//!
//! Each class is a (shape, texture) pair. Object colours are random per
//! object, so only geometry and fill pattern identify a class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{derive_seed, split_classes, Record, SegDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
}

const SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Cross];
const TEXTURES: [Texture; 3] = [Texture::Solid, Texture::Stripes, Texture::Checker];

impl Shape {
    fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
        }
    }

    /// Membership of a point given in object coordinates scaled by the
    /// radius; every shape lies inside the unit disk.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.7 && v.abs() <= 0.7,
            Shape::Ring => {
                let d = u * u + v * v;
                (0.3..=1.0).contains(&d)
            }
            Shape::Cross => {
                let (a, b) = (u.abs(), v.abs());
                (a <= 0.95 && b <= 0.3) || (a <= 0.3 && b <= 0.95)
            }
            Shape::Triangle => {
                // equilateral, vertices on the unit circle, apex up
                let h = 3f64.sqrt();
                v >= -0.5 && h * u + v <= 1.0 && -h * u + v <= 1.0
            }
        }
    }
}

impl Texture {
    fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
        }
    }
}

/// Shape and texture of class `id` (1-based).
pub fn class_recipe(id: u8) -> (Shape, Texture) {
    let i = id as usize - 1;
    (SHAPES[i % SHAPES.len()], TEXTURES[i / SHAPES.len()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub images_per_class: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object radius range in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Probability that an additional object belongs to a different class.
    pub mix_prob: f64,
    /// Standard deviation of per-pixel Gaussian noise, in `[0, 1]` units.
    pub noise: f64,
    /// Probability that an image background carries a stripe or checker
    /// pattern of random period, so texture alone does not reveal objects.
    pub background_texture_prob: f64,
    /// Fraction of the radius an object centre must keep from the canvas
    /// edge; below 1 objects may be cut off by the frame.
    pub edge_margin: f64,
    pub novel_classes: Vec<u8>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 14,
            image_size: 32,
            images_per_class: 64,
            objects_min: 1,
            objects_max: 3,
            radius_min: 5.0,
            radius_max: 8.0,
            mix_prob: 0.3,
            noise: 0.05,
            background_texture_prob: 0.0,
            edge_margin: 1.0,
            novel_classes: vec![3, 7, 10, 14],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub const MAX_CLASSES: usize = SHAPES.len() * TEXTURES.len();

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > Self::MAX_CLASSES {
            return err(format!(
                "num_classes must be in 1..={}, got {}",
                Self::MAX_CLASSES,
                self.num_classes
            ));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return err(format!(
                "image_size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            ));
        }
        if self.images_per_class == 0 {
            return err("images_per_class must be positive".into());
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return err(format!(
                "objects per image range {}..={} is empty or starts at 0",
                self.objects_min, self.objects_max
            ));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max)
            || !(0.0..=1.0).contains(&self.edge_margin)
            || 2.0 * self.edge_margin * self.radius_max >= self.image_size as f64
        {
            return err(format!(
                "radius range {}..{} does not fit a {} px canvas",
                self.radius_min, self.radius_max, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.mix_prob)
            || !(0.0..=1.0).contains(&self.background_texture_prob)
            || !(self.noise >= 0.0)
        {
            return err("probabilities must lie in [0, 1] and noise must be non-negative".into());
        }
        if let Some(bad) = self.novel_classes.iter().find(|&&c| c == 0 || c as usize > self.num_classes) {
            return err(format!("novel class {bad} is outside 1..={}", self.num_classes));
        }
        Ok(())
    }
}

/// Geometry of one rendered object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedObject {
    pub class: u8,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
}

impl PlacedObject {
    /// Whether pixel `(row, col)` (sampled at its centre) belongs to the object.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let (x, y) = (col as f64 + 0.5 - self.cx, row as f64 + 0.5 - self.cy);
        if x * x + y * y > self.radius * self.radius {
            return false;
        }
        let (s, c) = self.angle.sin_cos();
        let u = (c * x + s * y) / self.radius;
        let v = (-s * x + c * y) / self.radius;
        class_recipe(self.class).0.contains(u, -v)
    }
}

const PLACEMENT_TRIES: usize = 200;
const LAYOUT_TRIES: usize = 50;

fn place_objects(cfg: &SynthConfig, classes: &[u8], rng: &mut ChaCha8Rng) -> Option<Vec<PlacedObject>> {
    let size = cfg.image_size as f64;
    let mut placed: Vec<PlacedObject> = Vec::with_capacity(classes.len());
    for &class in classes {
        let mut ok = None;
        for _ in 0..PLACEMENT_TRIES {
            let radius = rng.random_range(cfg.radius_min..=cfg.radius_max);
            let m = cfg.edge_margin * radius;
            let cx = rng.random_range(m..=size - m);
            let cy = rng.random_range(m..=size - m);
            let clear = placed.iter().all(|o| {
                let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                d > o.radius + radius + 1.0
            });
            if clear {
                ok = Some(PlacedObject {
                    class,
                    cx,
                    cy,
                    radius,
                    angle: rng.random_range(0.0..std::f64::consts::TAU),
                });
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn render(cfg: &SynthConfig, objects: &[PlacedObject], rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let s = cfg.image_size;
    let mut img = vec![[0.0f64; 3]; s * s];
    let mut mask = vec![0u8; s * s];

    // background: base colour plus a few low-frequency waves per channel
    let base = random_colour(rng);
    let waves: Vec<(usize, f64, f64, f64, f64)> = (0..6)
        .map(|i| {
            let f = rng.random_range(0.5..2.5) * std::f64::consts::TAU / s as f64;
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            (i % 3, f * dir.cos(), f * dir.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.05..0.2))
        })
        .collect();
    let textured = cfg.background_texture_prob > 0.0 && rng.random_bool(cfg.background_texture_prob);
    let pattern = textured.then(|| {
        let second = random_colour(rng);
        let period = rng.random_range(3.0..7.0);
        let dir = rng.random_range(0.0..std::f64::consts::PI);
        let checker = rng.random_bool(0.5);
        (second, period, dir.sin_cos(), checker)
    });
    for r in 0..s {
        for c in 0..s {
            let (x, y) = (c as f64, r as f64);
            let px = &mut img[r * s + c];
            *px = base;
            if let Some((second, period, (ds, dc), checker)) = pattern {
                let u = ((dc * x + ds * y) / (period / 2.0)).floor() as i64;
                let on = if checker {
                    (u + ((-ds * x + dc * y) / (period / 2.0)).floor() as i64).rem_euclid(2) == 1
                } else {
                    u.rem_euclid(2) == 1
                };
                if on {
                    *px = second;
                }
            }
            for &(ch, fx, fy, phase, amp) in &waves {
                px[ch] += amp * (fx * x + fy * y + phase).sin();
            }
        }
    }

    for o in objects {
        let texture = class_recipe(o.class).1;
        let a = random_colour(rng);
        let b = a.map(|v| 0.35 * v);
        let period = 4.0;
        let phase = rng.random_range(0.0..period);
        let dir = rng.random_range(0.0..std::f64::consts::PI);
        let (ds, dc) = dir.sin_cos();
        for r in 0..s {
            for c in 0..s {
                if !o.covers(r, c) {
                    continue;
                }
                let (x, y) = (c as f64, r as f64);
                let second = match texture {
                    Texture::Solid => false,
                    Texture::Stripes => ((dc * x + ds * y + phase) / (period / 2.0)).floor() as i64 % 2 != 0,
                    Texture::Checker => {
                        let i = ((x + phase) / 2.0).floor() as i64 + ((y + phase) / 2.0).floor() as i64;
                        i.rem_euclid(2) == 1
                    }
                };
                img[r * s + c] = if second { b } else { a };
                mask[r * s + c] = o.class;
            }
        }
    }

    let mut planar = vec![0u8; 3 * s * s];
    for (i, px) in img.iter().enumerate() {
        for ch in 0..3 {
            let v = px[ch] + cfg.noise * rng.sample::<f64, _>(StandardNormal);
            planar[ch * s * s + i] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    (planar, mask)
}

/// Generate the dataset and the object geometry behind every record.
pub fn gen_synthetic_with_layout(cfg: &SynthConfig) -> Result<(SegDataset, Vec<Vec<PlacedObject>>)> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut layouts = Vec::new();
    for class in 1..=cfg.num_classes as u8 {
        for i in 0..cfg.images_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[class as u64, i as u64]));
            let mut layout = None;
            for _ in 0..LAYOUT_TRIES {
                let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
                let classes: Vec<u8> = (0..count)
                    .map(|j| {
                        if j > 0 && cfg.num_classes > 1 && rng.random_bool(cfg.mix_prob) {
                            let other = rng.random_range(1..cfg.num_classes as u8);
                            if other >= class {
                                other + 1
                            } else {
                                other
                            }
                        } else {
                            class
                        }
                    })
                    .collect();
                if let Some(objs) = place_objects(cfg, &classes, &mut rng) {
                    layout = Some(objs);
                    break;
                }
            }
            let layout = layout.ok_or_else(|| {
                Error::Config(format!(
                    "could not place {}..={} objects of radius up to {} on a {} px canvas",
                    cfg.objects_min, cfg.objects_max, cfg.radius_max, cfg.image_size
                ))
            })?;
            let (image, mask) = render(cfg, &layout, &mut rng);
            records.push(Record::new(format!("c{class:02}_{i:04}"), image, mask));
            layouts.push(layout);
        }
    }
    let classes = (1..=cfg.num_classes as u8)
        .map(|id| {
            let (s, t) = class_recipe(id);
            (id, format!("{}_{}", s.name(), t.name()))
        })
        .collect();
    let ds = SegDataset {
        height: cfg.image_size,
        width: cfg.image_size,
        classes,
        records,
        train_classes: Vec::new(),
        novel_classes: Vec::new(),
    };
    let ds = split_classes(&ds, &cfg.novel_classes)?;
    Ok((ds, layouts))
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SegDataset> {
    gen_synthetic_with_layout(cfg).map(|(ds, _)| ds)
}
