use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::Box;
use crate::error::{config_err, contract_err, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Rect, Shape::Ellipse, Shape::Diamond];

    /// Whether normalized coordinates `u, v ∈ [-1, 1]` fall inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

/// How distractors relate to the target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Different shape, random texture.
    #[default]
    Easy,
    /// Same shape and size, different texture.
    Hard,
}

/// Two-color stripe pattern anchored to the object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub a: [f32; 3],
    pub b: [f32; 3],
    pub angle: f64,
    pub period: f64,
}

impl Texture {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let a = color();
        let mut b = color();
        while dist(&a, &b) < 0.5 {
            b = color();
        }
        Self { a, b, angle: rng.random_range(0.0..std::f64::consts::PI), period: rng.random_range(4.0..10.0) }
    }

    fn sample(&self, du: f64, dv: f64) -> [f32; 3] {
        let t = (du * self.angle.cos() + dv * self.angle.sin()) / self.period;
        if t.floor() as i64 % 2 == 0 {
            self.a
        } else {
            self.b
        }
    }
}

fn dist(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Object side range in pixels (per axis, sampled independently).
    pub min_size: f64,
    pub max_size: f64,
    pub distractors: usize,
    pub similarity: Similarity,
    /// Maximum speed in pixels per frame.
    pub speed: f64,
    /// Standard deviation of the per-frame positional jitter.
    pub jitter: f64,
    /// Adds a static bar that hides objects passing behind it.
    pub occlusion: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 192,
            height: 192,
            frames: 30,
            min_size: 20.0,
            max_size: 32.0,
            distractors: 1,
            similarity: Similarity::Hard,
            speed: 3.0,
            jitter: 0.5,
            occlusion: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(config_err!("scene needs at least one frame"));
        }
        if !(self.min_size >= 2.0 && self.min_size <= self.max_size) {
            return Err(config_err!("object size range [{}, {}] is invalid", self.min_size, self.max_size));
        }
        if self.max_size * 2.0 > self.width.min(self.height) as f64 {
            return Err(config_err!("objects up to {} px do not fit a {}x{} frame", self.max_size, self.width, self.height));
        }
        if !(self.speed >= 0.0 && self.jitter >= 0.0) {
            return Err(config_err!("speed and jitter must be non-negative"));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err!("scene config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Object {
    shape: Shape,
    texture: Texture,
    w: f64,
    h: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

impl Object {
    fn bbox(&self) -> Box {
        Box { x1: self.x, y1: self.y, x2: self.x + self.w, y2: self.y + self.h }
    }

    fn step<R: Rng + ?Sized>(&mut self, cfg: &SceneConfig, jitter: &Normal<f64>, rng: &mut R) {
        fn axis(p: &mut f64, v: &mut f64, len: f64, extent: f64, noise: f64) {
            *p += *v + noise;
            let hi = len - extent;
            if *p < 0.0 {
                *p = -*p;
                *v = v.abs();
            }
            if *p > hi {
                *p = 2.0 * hi - *p;
                *v = -v.abs();
            }
            *p = p.clamp(0.0, hi);
        }
        let (nx, ny) = (jitter.sample(rng), jitter.sample(rng));
        axis(&mut self.x, &mut self.vx, cfg.width as f64, self.w, nx);
        axis(&mut self.y, &mut self.vy, cfg.height as f64, self.h, ny);
    }

    fn paint(&self, img: &mut [f32], w: usize, h: usize) {
        let plane = w * h;
        let (x0, y0) = (self.x.floor().max(0.0) as usize, self.y.floor().max(0.0) as usize);
        let x1 = ((self.x + self.w).ceil() as usize).min(w);
        let y1 = ((self.y + self.h).ceil() as usize).min(h);
        let (cx, cy) = (self.x + self.w / 2.0, self.y + self.h / 2.0);
        for py in y0..y1 {
            for px in x0..x1 {
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                let (u, v) = (2.0 * (fx - cx) / self.w, 2.0 * (fy - cy) / self.h);
                if self.shape.contains(u, v) {
                    let c = self.texture.sample(fx - self.x, fy - self.y);
                    for (ch, val) in c.iter().enumerate() {
                        img[ch * plane + py * w + px] = *val;
                    }
                }
            }
        }
    }
}

/// Frames with values in `[0,1]`, target boxes and distractor boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence<F = f32> {
    pub frames: Vec<Tensor<F>>,
    pub gt: Vec<Box>,
    pub distractors: Vec<Vec<Box>>,
    pub seed: u64,
}

impl<F: Float> Sequence<F> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn cast<G: Float>(&self) -> Sequence<G> {
        Sequence {
            frames: self.frames.iter().map(|f| f.cast()).collect(),
            gt: self.gt.clone(),
            distractors: self.distractors.clone(),
            seed: self.seed,
        }
    }

    pub fn frame_size(&self) -> Result<(usize, usize)> {
        match self.frames.first().map(|f| f.shape()) {
            Some(&[_, h, w]) => Ok((w, h)),
            _ => Err(contract_err!("sequence has no frames")),
        }
    }
}

fn background<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Vec<f32> {
    let (w, h) = (cfg.width, cfg.height);
    let base: [f32; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let waves: Vec<(f64, f64, f64, [f32; 3])> = (0..3)
        .map(|_| {
            let k = rng.random_range(0.005..0.03);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)];
            (k * a.cos(), k * a.sin(), rng.random_range(0.0..std::f64::consts::TAU), amp)
        })
        .collect();
    let mut img = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let mut c = base;
            for (kx, ky, phase, amp) in &waves {
                let s = (std::f64::consts::TAU * (kx * x as f64 + ky * y as f64) + phase).sin() as f32;
                for ch in 0..3 {
                    c[ch] += amp[ch] * s;
                }
            }
            for ch in 0..3 {
                img[ch * w * h + y * w + x] = c[ch].clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn random_object<R: Rng + ?Sized>(cfg: &SceneConfig, shape: Shape, size: Option<(f64, f64)>, rng: &mut R) -> Object {
    let (w, h) = size.unwrap_or_else(|| {
        (rng.random_range(cfg.min_size..=cfg.max_size), rng.random_range(cfg.min_size..=cfg.max_size))
    });
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = rng.random_range(0.0..=cfg.speed);
    Object {
        shape,
        texture: Texture::random(rng),
        w,
        h,
        x: rng.random_range(0.0..=cfg.width as f64 - w),
        y: rng.random_range(0.0..=cfg.height as f64 - h),
        vx: speed * angle.cos(),
        vy: speed * angle.sin(),
    }
}

/// Deterministic synthetic sequence: textured target and distractors moving
/// linearly (with bounces and jitter) over a smooth textured background.
pub fn generate_sequence(cfg: &SceneConfig, seed: u64) -> Result<Sequence<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, cfg.jitter).map_err(|e| config_err!("jitter: {e}"))?;
    let bg = background(cfg, &mut rng);
    let shape = Shape::ALL[rng.random_range(0..3)];
    let mut target = random_object(cfg, shape, None, &mut rng);
    let mut distractors: Vec<Object> = (0..cfg.distractors)
        .map(|_| match cfg.similarity {
            Similarity::Hard => {
                let mut d = random_object(cfg, shape, Some((target.w, target.h)), &mut rng);
                while dist(&d.texture.a, &target.texture.a) + dist(&d.texture.b, &target.texture.b) < 0.6 {
                    d.texture = Texture::random(&mut rng);
                }
                d
            }
            Similarity::Easy => {
                let others: Vec<Shape> = Shape::ALL.into_iter().filter(|s| *s != shape).collect();
                random_object(cfg, others[rng.random_range(0..others.len())], None, &mut rng)
            }
        })
        .collect();
    let occluder = cfg.occlusion.then(|| {
        let vertical = rng.random::<bool>();
        let thick = rng.random_range(cfg.min_size * 0.5..=cfg.min_size);
        let color = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let len = if vertical { cfg.width } else { cfg.height };
        let at = rng.random_range(0.0..len as f64 - thick);
        (vertical, at, thick, color)
    });

    let (w, h) = (cfg.width, cfg.height);
    let mut seq = Sequence { frames: Vec::new(), gt: Vec::new(), distractors: Vec::new(), seed };
    for t in 0..cfg.frames {
        if t > 0 {
            target.step(cfg, &jitter, &mut rng);
            for d in &mut distractors {
                d.step(cfg, &jitter, &mut rng);
            }
        }
        let mut img = bg.clone();
        for d in &distractors {
            d.paint(&mut img, w, h);
        }
        target.paint(&mut img, w, h);
        if let Some((vertical, at, thick, color)) = occluder {
            let (a, b) = (at as usize, (at + thick) as usize);
            for y in 0..h {
                for x in 0..w {
                    let p = if vertical { x } else { y };
                    if p >= a && p < b {
                        for ch in 0..3 {
                            img[ch * w * h + y * w + x] = color[ch];
                        }
                    }
                }
            }
        }
        seq.frames.push(Tensor::new(&[3, h, w], img)?);
        seq.gt.push(target.bbox());
        seq.distractors.push(distractors.iter().map(Object::bbox).collect());
    }
    Ok(seq)
}

/// Train/test split of synthetic sequences with disjoint seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub scene: SceneConfig,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { scene: SceneConfig::default(), train: 20, test: 5, seed: 0 }
    }
}

impl SuiteConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err!("suite config: {e}"))?;
        cfg.scene.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("suite config serializes")
    }

    fn seq_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
    }

    pub fn train_sequences(&self) -> Result<Vec<(String, Sequence<f32>)>> {
        (0..self.train)
            .map(|i| Ok((format!("train_{i:03}"), generate_sequence(&self.scene, self.seq_seed(i))?)))
            .collect()
    }

    pub fn test_sequences(&self) -> Result<Vec<(String, Sequence<f32>)>> {
        (0..self.test)
            .map(|i| Ok((format!("test_{i:03}"), generate_sequence(&self.scene, self.seq_seed(self.train + i))?)))
            .collect()
    }

    /// Extra sequences, disjoint from both splits, for monitoring training.
    pub fn probe_sequences(&self, n: usize) -> Result<Vec<Sequence<f32>>> {
        (0..n).map(|i| generate_sequence(&self.scene, self.seq_seed(self.train + self.test + i))).collect()
    }
}
