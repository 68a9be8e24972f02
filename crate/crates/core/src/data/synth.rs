//! Deterministic synthetic tabletop scenes with sensor dropout on
//! transparent objects.
//!
//! A tilted background plane carries boxes, spheres and lying cylinders;
//! the nearest surface wins. Pixels of transparent primitives lose their
//! reading in 2x2 cells, either to zero or to the background behind them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::DepthSample;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HoleMode {
    /// No return: raw depth 0.
    Zero,
    /// The sensor sees through the object to the background.
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub primitives: usize,
    /// Probability that a 2x2 cell of a transparent object loses its reading.
    pub hole_ratio: f64,
    /// Gaussian sensor noise in meters, clipped at three sigma.
    pub noise_sigma: f64,
    pub hole_mode: HoleMode,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            width: 64,
            height: 48,
            primitives: 3,
            hole_ratio: 0.8,
            noise_sigma: 0.002,
            hole_mode: HoleMode::Zero,
        }
    }
}

/// Image sides must be multiples of this.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Box { half_w: f64, half_h: f64 },
    Sphere { r: f64 },
    /// Lying along direction `(cos, sin)`.
    Cylinder { half_len: f64, r: f64, cos: f64, sin: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Primitive {
    cx: f64,
    cy: f64,
    height: f64,
    shape: Shape,
    transparent: bool,
    color: [f64; 3],
}

impl Primitive {
    /// Height above the background at pixel `(x, y)`, if covered.
    fn lift(&self, x: f64, y: f64) -> Option<f64> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let frac = match self.shape {
            Shape::Box { half_w, half_h } => (dx.abs() <= half_w && dy.abs() <= half_h).then_some(1.0),
            Shape::Sphere { r } => {
                let q = (dx * dx + dy * dy) / (r * r);
                (q < 1.0).then(|| (1.0 - q).sqrt())
            }
            Shape::Cylinder { half_len, r, cos, sin } => {
                let along = dx * cos + dy * sin;
                let across = -dx * sin + dy * cos;
                let q = (across / r).powi(2);
                (along.abs() <= half_len && q < 1.0).then(|| (1.0 - q).sqrt())
            }
        };
        frac.map(|f| f * self.height)
    }
}

fn hue(h: f64) -> [f64; 3] {
    let h6 = (h.fract()) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

pub fn gen_synthetic(spec: &SceneSpec) -> Result<DepthSample> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 || w % SIZE_MULTIPLE != 0 || h % SIZE_MULTIPLE != 0 {
        return Err(invalid("gen_synthetic", format!("size {w}x{h} must be a positive multiple of {SIZE_MULTIPLE}")));
    }
    if spec.primitives == 0 && spec.hole_ratio > 0.0 {
        return Err(invalid("gen_synthetic", "holes need at least one primitive"));
    }
    if !(0.0..=1.0).contains(&spec.hole_ratio) || !(spec.noise_sigma >= 0.0) {
        return Err(invalid("gen_synthetic", "hole_ratio must lie in [0, 1] and noise_sigma be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (wf, hf) = (w as f64, h as f64);
    let base = rng.random_range(0.7..0.9);
    let (gx, gy) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let plane = |x: f64, y: f64| base + gx * (x / wf - 0.5) + gy * (y / hf - 0.5);
    let side = wf.min(hf);
    let hue0: f64 = rng.random();
    let prims: Vec<Primitive> = (0..spec.primitives)
        .map(|i| {
            let r = side * rng.random_range(0.12..0.25);
            let shape = match rng.random_range(0..3) {
                0 => Shape::Box {
                    half_w: r * rng.random_range(0.7..1.3),
                    half_h: r * rng.random_range(0.7..1.3),
                },
                1 => Shape::Sphere { r },
                _ => {
                    let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    Shape::Cylinder {
                        half_len: r * rng.random_range(1.0..1.6),
                        r: r * 0.6,
                        cos: a.cos(),
                        sin: a.sin(),
                    }
                }
            };
            Primitive {
                cx: rng.random_range(0.15..0.85) * wf,
                cy: rng.random_range(0.15..0.85) * hf,
                height: rng.random_range(0.02..0.08),
                shape,
                transparent: i == 0 || rng.random_bool(0.5),
                color: hue(hue0 + i as f64 * 0.618_034),
            }
        })
        .collect();

    let n = w * h;
    let mut gt = vec![0f32; n];
    let mut background = vec![0f64; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut rgb = vec![0f32; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let bg = plane(px, py);
            let mut best: Option<(usize, f64)> = None;
            for (i, p) in prims.iter().enumerate() {
                if let Some(l) = p.lift(px, py) {
                    if best.is_none_or(|(_, b)| l > b) {
                        best = Some((i, l));
                    }
                }
            }
            background[k] = bg;
            owner[k] = best.map(|b| b.0);
            gt[k] = (bg - best.map_or(0.0, |b| b.1)) as f32;
            let color = match best {
                Some((i, l)) => {
                    let p = &prims[i];
                    let shade = 0.6 + 0.4 * l / p.height;
                    if p.transparent {
                        p.color.map(|c| 0.75 + 0.2 * c * shade)
                    } else {
                        p.color.map(|c| 0.1 + 0.8 * c * shade)
                    }
                }
                None => {
                    let tex = if (x / 8 + y / 8) % 2 == 0 { 0.45 } else { 0.55 };
                    [tex, tex * 0.95, tex * 0.9]
                }
            };
            for c in 0..3 {
                rgb[c * n + k] = color[c] as f32;
            }
        }
    }
    let transparent: Vec<bool> = owner.iter().map(|o| o.is_some_and(|i| prims[i].transparent)).collect();

    let cols = w.div_ceil(2);
    let cells: Vec<bool> = (0..cols * h.div_ceil(2)).map(|_| rng.random_bool(spec.hole_ratio)).collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let clip = 3.0 * spec.noise_sigma;
    let mut raw = vec![0f32; n];
    for k in 0..n {
        let (x, y) = (k % w, k / w);
        let e = if spec.noise_sigma > 0.0 { noise.sample(&mut rng).clamp(-clip, clip) } else { 0.0 };
        raw[k] = if transparent[k] && cells[(y / 2) * cols + x / 2] {
            match spec.hole_mode {
                HoleMode::Zero => 0.0,
                HoleMode::Background => (background[k] + e) as f32,
            }
        } else {
            (gt[k] as f64 + e) as f32
        };
    }
    let sample = DepthSample {
        id: format!("syn{:06}", spec.seed),
        width: w,
        height: h,
        rgb,
        raw,
        valid: gt.iter().map(|&g| g > 0.0).collect(),
        gt,
        transparent,
    };
    sample.check()?;
    Ok(sample)
}

/// `count` scenes seeded `seed, seed + 1, ...`.
pub fn synthetic_set(base: &SceneSpec, seed: u64, count: usize) -> Result<Vec<DepthSample>> {
    (0..count as u64)
        .map(|i| gen_synthetic(&SceneSpec { seed: seed + i, ..base.clone() }))
        .collect()
}
