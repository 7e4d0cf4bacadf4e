//! Seeded moving-shapes sequences.
//!
//! Each sequence shows one target shape (disk or rectangle) bouncing off the
//! image borders over a value-noise background. The target's intensity
//! drifts slowly. Optional distractor shapes move the same way with a
//! clearly different intensity and are never part of the mask. With
//! probability `occluder_rate` a sequence gets one interval of
//! `occlusion_len` frames in which the target is not drawn and its mask is
//! empty; the interval never covers the first frame.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;

use super::dataset::{save_dataset, Sequence};
use super::pgm::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "rectangle" => Ok(ShapeKind::Rectangle),
            other => Err(Error::Config(format!("unknown shape kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<ShapeKind>,
    /// Target speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Intensity drift per frame, as a fraction of full scale.
    pub drift: f64,
    /// Probability that a sequence contains an occlusion interval.
    pub occluder_rate: f64,
    pub occlusion_len: usize,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sequences: 20,
            frames: 24,
            width: 64,
            height: 64,
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle],
            speed_min: 0.5,
            speed_max: 2.0,
            drift: 0.01,
            occluder_rate: 0.25,
            occlusion_len: 3,
            distractors: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32
            || self.height < 32
            || !self.width.is_multiple_of(4)
            || !self.height.is_multiple_of(4)
        {
            return Err(Error::Config(format!(
                "image size {}x{} must be at least 32x32 and divisible by 4",
                self.width, self.height
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.occluder_rate) {
            return Err(Error::Config(format!(
                "occluder rate {} outside [0, 1]",
                self.occluder_rate
            )));
        }
        if self.occluder_rate > 0.0 && self.occlusion_len == 0 {
            return Err(Error::Config("occlusion length must be positive".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("at least one shape kind is required".into()));
        }
        if !(self.speed_min >= 0.0
            && self.speed_min <= self.speed_max
            && self.speed_max.is_finite())
        {
            return Err(Error::Config(format!(
                "speed range [{}, {}] is invalid",
                self.speed_min, self.speed_max
            )));
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return Err(Error::Config(format!(
                "drift {} must be non-negative",
                self.drift
            )));
        }
        Ok(())
    }
}

/// What the generator decided for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScript {
    pub name: String,
    pub kind: ShapeKind,
    /// 0-based frame indices with the target hidden.
    pub occlusion: Option<Range<usize>>,
    pub distractors: usize,
}

#[derive(Clone, Debug)]
struct Mover {
    kind: ShapeKind,
    /// Disk radius, or rectangle half extents.
    half_w: f64,
    half_h: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    intensity: f64,
    drift: f64,
}

impl Mover {
    fn spawn(rng: &mut ChaCha8Rng, kind: ShapeKind, cfg: &SynthConfig, intensity: f64) -> Self {
        let (half_w, half_h) = match kind {
            ShapeKind::Disk => {
                let r = rng.gen_range(6.0..11.0);
                (r, r)
            }
            ShapeKind::Rectangle => (rng.gen_range(5.0..11.0), rng.gen_range(5.0..11.0)),
        };
        let x = rng.gen_range(half_w..cfg.width as f64 - 1.0 - half_w);
        let y = rng.gen_range(half_h..cfg.height as f64 - 1.0 - half_h);
        let (dx, dy) = loop {
            let dx: f64 = rng.gen_range(-1.0..1.0);
            let dy: f64 = rng.gen_range(-1.0..1.0);
            let n = (dx * dx + dy * dy).sqrt();
            if n > 0.1 && n <= 1.0 {
                break (dx / n, dy / n);
            }
        };
        let speed = if cfg.speed_max > cfg.speed_min {
            rng.gen_range(cfg.speed_min..cfg.speed_max)
        } else {
            cfg.speed_min
        };
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            kind,
            half_w,
            half_h,
            x,
            y,
            vx: dx * speed,
            vy: dy * speed,
            intensity,
            drift: sign * cfg.drift * 255.0,
        }
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        let (dx, dy) = (c as f64 - self.x, r as f64 - self.y);
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.half_w * self.half_w,
            ShapeKind::Rectangle => dx.abs() <= self.half_w && dy.abs() <= self.half_h,
        }
    }

    fn step(&mut self, width: usize, height: usize) {
        fn bounce(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
            *p += *v;
            if *p < lo {
                *p = (2.0 * lo - *p).min(hi);
                *v = -*v;
            } else if *p > hi {
                *p = (2.0 * hi - *p).max(lo);
                *v = -*v;
            }
        }
        bounce(
            &mut self.x,
            &mut self.vx,
            self.half_w,
            width as f64 - 1.0 - self.half_w,
        );
        bounce(
            &mut self.y,
            &mut self.vy,
            self.half_h,
            height as f64 - 1.0 - self.half_h,
        );
        self.intensity += self.drift;
        if self.intensity < 0.0 || self.intensity > 255.0 {
            self.drift = -self.drift;
            self.intensity = self.intensity.clamp(0.0, 255.0);
        }
    }
}

/// Bilinear interpolation of a coarse random lattice.
fn value_noise(rng: &mut ChaCha8Rng, width: usize, height: usize, cell: usize) -> Vec<f64> {
    let (gw, gh) = (width / cell + 2, height / cell + 2);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(50.0..150.0)).collect();
    let mut out = Vec::with_capacity(width * height);
    for r in 0..height {
        let (gy, ty) = (r / cell, (r % cell) as f64 / cell as f64);
        for c in 0..width {
            let (gx, tx) = (c / cell, (c % cell) as f64 / cell as f64);
            let at = |x: usize, y: usize| lattice[y * gw + x];
            let top = at(gx, gy) * (1.0 - tx) + at(gx + 1, gy) * tx;
            let bottom = at(gx, gy + 1) * (1.0 - tx) + at(gx + 1, gy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn generate_one(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    name: String,
) -> (Sequence, SequenceScript) {
    let (w, h) = (cfg.width, cfg.height);
    let background = value_noise(rng, w, h, 16);

    let kind = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
    let target_intensity = if rng.gen_bool(0.5) {
        rng.gen_range(170.0..240.0)
    } else {
        rng.gen_range(10.0..40.0)
    };
    let mut target = Mover::spawn(rng, kind, cfg, target_intensity);
    let mut distractors: Vec<Mover> = (0..cfg.distractors)
        .map(|_| {
            let kind = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
            let intensity = loop {
                let v: f64 = rng.gen_range(0.0..255.0);
                if (v - target_intensity).abs() >= 60.0 {
                    break v;
                }
            };
            Mover::spawn(rng, kind, cfg, intensity)
        })
        .collect();

    let occluded = rng.gen_bool(cfg.occluder_rate);
    let occlusion = if occluded && cfg.frames > cfg.occlusion_len {
        let start = rng.gen_range(1..=cfg.frames - cfg.occlusion_len);
        Some(start..start + cfg.occlusion_len)
    } else {
        None
    };

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let visible = !occlusion.as_ref().is_some_and(|o| o.contains(&f));
        let mut pixels = Vec::with_capacity(w * h);
        let mut bits = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let mut v = background[r * w + c];
                for d in &distractors {
                    if d.contains(r, c) {
                        v = d.intensity;
                    }
                }
                let on = visible && target.contains(r, c);
                if on {
                    v = target.intensity;
                }
                v += rng.gen_range(-6.0..6.0);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
                bits.push(on);
            }
        }
        frames.push(GrayImage::new(w, h, pixels).expect("frame dims"));
        masks.push(Mask::new(w, h, bits).expect("mask dims"));
        target.step(w, h);
        for d in &mut distractors {
            d.step(w, h);
        }
    }

    let script = SequenceScript {
        name: name.clone(),
        kind,
        occlusion,
        distractors: cfg.distractors,
    };
    (
        Sequence {
            name,
            frames,
            masks,
        },
        script,
    )
}

/// Generates the dataset in memory. A pure function of `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<Sequence>, Vec<SequenceScript>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let digits = cfg.sequences.saturating_sub(1).to_string().len().max(3);
    Ok((0..cfg.sequences)
        .map(|i| generate_one(&mut rng, cfg, format!("seq{i:0digits$}")))
        .unzip())
}

/// Generates the dataset and writes it to `out`, which must not exist or
/// be empty. Nothing is left behind on failure.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<Vec<SequenceScript>> {
    let (seqs, script) = generate(cfg)?;
    super::build_dir_atomic(out, |dir| save_dataset(&seqs, dir))?;
    Ok(script)
}
