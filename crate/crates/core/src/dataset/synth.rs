//! Synthetic two-domain crowd scenes.
//!
//! Each scene is a textured background with bright head discs and a
//! rectangular body rendered directly under every head. The generator
//! records every head centre as an annotation and every person pixel in a
//! ground-truth mask. Source and target styles differ in background texture,
//! clutter and crowd size, which is the domain shift the adaptation has to
//! bridge.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CrowdScene, Dataset, Domain, Point};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Appearance and crowd statistics of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    /// Base background intensity.
    pub background: f64,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    pub stripe_amplitude: f64,
    /// Stripe wavelength in pixels.
    pub stripe_period: f64,
    /// Stripe orientation in radians (0 = vertical stripes).
    pub stripe_angle: f64,
    /// Number of non-person clutter blobs.
    pub clutter: usize,
    pub clutter_intensity: f64,
    pub clutter_radius: [f64; 2],
    pub head_intensity: f64,
    pub body_intensity: f64,
    /// Inclusive range of people per scene.
    pub count: [usize; 2],
    /// Standard deviation of head clusters in pixels; 0 places heads
    /// uniformly.
    pub cluster_spread: f64,
}

impl DomainStyle {
    pub fn source_default() -> Self {
        DomainStyle {
            background: 0.15,
            noise: 0.04,
            stripe_amplitude: 0.0,
            stripe_period: 16.0,
            stripe_angle: 0.0,
            clutter: 0,
            clutter_intensity: 0.5,
            clutter_radius: [3.0, 5.0],
            head_intensity: 0.9,
            body_intensity: 0.55,
            count: [5, 30],
            cluster_spread: 10.0,
        }
    }

    pub fn target_default() -> Self {
        DomainStyle {
            background: 0.25,
            noise: 0.08,
            stripe_amplitude: 0.12,
            stripe_period: 10.0,
            stripe_angle: 0.6,
            clutter: 4,
            clutter_intensity: 0.7,
            clutter_radius: [3.0, 5.0],
            head_intensity: 0.95,
            body_intensity: 0.65,
            count: [15, 50],
            cluster_spread: 12.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count[0] > self.count[1] {
            return Err(Error::Config(format!("count range {:?} is empty", self.count)));
        }
        if !(self.stripe_period > 0.0) || self.clutter_radius[0] > self.clutter_radius[1] {
            return Err(Error::Config("invalid texture parameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Head disc radius range in pixels.
    pub head_radius: [f64; 2],
    /// Body rectangle `[width, height]` in pixels.
    pub body_size: [f64; 2],
    pub source: DomainStyle,
    pub target: DomainStyle,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            channels: 1,
            train_scenes: 160,
            test_scenes: 40,
            head_radius: [1.5, 2.2],
            body_size: [4.0, 7.0],
            source: DomainStyle::source_default(),
            target: DomainStyle::target_default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 8 != 0 || self.height % 8 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of 8",
                self.width, self.height
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("at least one channel required".into()));
        }
        if self.head_radius[0] < 1.0 || self.head_radius[0] > self.head_radius[1] {
            return Err(Error::Config(format!("head radius {:?} must be >= 1 px", self.head_radius)));
        }
        if self.train_scenes + self.test_scenes == 0 {
            return Err(Error::Config("no scenes requested".into()));
        }
        self.source.validate()?;
        self.target.validate()
    }

    pub fn style(&self, domain: Domain) -> &DomainStyle {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

/// Generates both domains. Deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, Dataset)> {
    Ok((generate_domain(config, Domain::Source)?, generate_domain(config, Domain::Target)?))
}

pub fn generate_domain(config: &SynthConfig, domain: Domain) -> Result<Dataset> {
    config.validate()?;
    let stream = match domain {
        Domain::Source => Stream::SynthSource,
        Domain::Target => Stream::SynthTarget,
    };
    let base = rng::derive_seed(config.seed, stream as u64);
    let total = config.train_scenes + config.test_scenes;
    let mut scenes: Vec<CrowdScene> = (0..total)
        .map(|i| render_scene(config, domain, i, rng::derive_seed(base, i as u64)))
        .collect();
    let test = scenes.split_off(config.train_scenes);
    Ok(Dataset {
        domain,
        train: scenes,
        test,
    })
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, value: f64, alpha: f64) {
        let p = &mut self.pixels[y * self.width + x];
        *p = *p * (1.0 - alpha) + value * alpha;
    }

    /// Anti-aliased disc; returns covered pixel indices.
    fn disc(&mut self, cx: f64, cy: f64, r: f64, value: f64) -> Vec<usize> {
        let mut covered = Vec::new();
        let (x0, x1) = span(cx, r + 1.0, self.width);
        let (y0, y1) = span(cy, r + 1.0, self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let a = (r + 0.5 - d).clamp(0.0, 1.0);
                if a > 0.0 {
                    self.blend(x, y, value, a);
                    covered.push(y * self.width + x);
                }
            }
        }
        covered
    }

    fn rect(&mut self, x0: f64, y0: f64, w: f64, h: f64, value: f64) -> Vec<usize> {
        let mut covered = Vec::new();
        let xa = x0.round().max(0.0) as usize;
        let xb = ((x0 + w).round().max(0.0) as usize).min(self.width);
        let ya = y0.round().max(0.0) as usize;
        let yb = ((y0 + h).round().max(0.0) as usize).min(self.height);
        for y in ya..yb {
            for x in xa..xb {
                self.blend(x, y, value, 1.0);
                covered.push(y * self.width + x);
            }
        }
        covered
    }
}

fn span(c: f64, r: f64, limit: usize) -> (usize, usize) {
    let lo = (c - r).floor().max(0.0) as usize;
    let hi = ((c + r).ceil().max(0.0) as usize + 1).min(limit);
    (lo.min(limit), hi)
}

fn sample_heads(style: &DomainStyle, w: usize, h: usize, rng: &mut impl Rng) -> Vec<Point> {
    let n = rng.random_range(style.count[0]..=style.count[1]);
    let (wf, hf) = (w as f64, h as f64);
    let clusters: Vec<(f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| (rng.random_range(0.15 * wf..0.85 * wf), rng.random_range(0.1 * hf..0.8 * hf)))
        .collect();
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let p = if style.cluster_spread <= 0.0 {
            Point::new(rng.random_range(0.0..wf), rng.random_range(0.0..hf))
        } else {
            let (cx, cy) = clusters[rng.random_range(0..clusters.len())];
            let (gx, gy) = gaussian_pair(rng);
            Point::new(cx + gx * style.cluster_spread, cy + gy * style.cluster_spread)
        };
        if p.x >= 0.0 && p.y >= 0.0 && p.x < wf && p.y < hf {
            points.push(p);
        }
    }
    points
}

fn gaussian_pair(rng: &mut impl Rng) -> (f64, f64) {
    // Box-Muller.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let t = std::f64::consts::TAU * u2;
    (r * t.cos(), r * t.sin())
}

fn render_scene(config: &SynthConfig, domain: Domain, index: usize, seed: u64) -> CrowdScene {
    let style = config.style(domain);
    let mut rng = rng::sub_stream(seed, 0);
    let (w, h) = (config.width, config.height);

    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin_a, cos_a) = style.stripe_angle.sin_cos();
    let mut canvas = Canvas {
        width: w,
        height: h,
        pixels: (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let s = (std::f64::consts::TAU * (x * cos_a + y * sin_a) / style.stripe_period + phase).sin();
                style.background + style.stripe_amplitude * s
            })
            .collect(),
    };

    for _ in 0..style.clutter {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let r = rng.random_range(style.clutter_radius[0]..=style.clutter_radius[1]);
        canvas.disc(cx, cy, r, style.clutter_intensity);
    }

    let points = sample_heads(style, w, h, &mut rng);
    let radii: Vec<f64> = points
        .iter()
        .map(|_| rng.random_range(config.head_radius[0]..=config.head_radius[1]))
        .collect();
    let mut mask = vec![false; w * h];
    let [bw, bh] = config.body_size;
    for (p, &r) in points.iter().zip(&radii) {
        for i in canvas.rect(p.x - bw / 2.0, p.y + 0.6 * r, bw, bh, style.body_intensity) {
            mask[i] = true;
        }
    }
    for (p, &r) in points.iter().zip(&radii) {
        for i in canvas.disc(p.x, p.y, r, style.head_intensity) {
            mask[i] = true;
        }
    }

    let plane: Vec<f32> = canvas
        .pixels
        .iter()
        .map(|&v| {
            let noisy = v + rng.random_range(-1.0..=1.0) * style.noise;
            noisy.clamp(0.0, 1.0) as f32
        })
        .collect();
    let mut image = Vec::with_capacity(config.channels * w * h);
    for _ in 0..config.channels {
        image.extend_from_slice(&plane);
    }
    CrowdScene {
        id: format!("{index:04}"),
        domain,
        width: w,
        height: h,
        channels: config.channels,
        image,
        points,
        body_mask: Some(mask),
    }
}
