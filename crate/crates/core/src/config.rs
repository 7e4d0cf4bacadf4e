//! `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Unknown keys and repeated keys are errors. Every key has a default, see
//! [`KEYS`].

use std::path::Path;

use crate::data::{ShapeKind, SynthConfig};
use crate::error::{Error, Result};
use crate::longmem::GapNorm;
use crate::metrics::BoundaryTolerance;
use crate::segnet::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub boundary_tol: BoundaryTolerance,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            boundary_tol: BoundaryTolerance::Pixels(1),
        }
    }
}

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "0",
        "seed for data generation, initialization and clip sampling",
    ),
    ("d", "32", "feature channels"),
    ("k", "2", "short-term memory frames"),
    ("ws", "3", "spatial window width (odd)"),
    ("hs", "3", "spatial window height (odd)"),
    ("wt", "3", "temporal window width (odd)"),
    ("ht", "3", "temporal window height (odd)"),
    (
        "temporal_mode",
        "bidirectional",
        "bidirectional | directed-next",
    ),
    (
        "gap_norm",
        "total-area",
        "masked pooling denominator: total-area | mask-area",
    ),
    ("lambda", "1.0", "weight of the supervised loss"),
    ("disable_short", "false", "ablation: no short-term memory"),
    ("disable_long", "false", "ablation: no long-term memory"),
    (
        "unweighted_adjacency",
        "false",
        "ablation: edge weights without learned projections",
    ),
    ("lr", "1e-4", "initial learning rate"),
    ("lr_decay", "0.95", "learning-rate multiplier per epoch"),
    ("weight_decay", "1e-5", "decoupled weight decay"),
    ("clip_len", "5", "frames per training clip"),
    ("epochs", "15", "training epochs"),
    ("batch_videos", "1", "clips per optimizer step"),
    ("sequences", "20", "synthetic sequences"),
    ("frames", "24", "frames per synthetic sequence"),
    ("width", "64", "synthetic image width (divisible by 4)"),
    ("height", "64", "synthetic image height (divisible by 4)"),
    ("shapes", "disk,rectangle", "target shape kinds"),
    ("speed_min", "0.5", "minimum speed, pixels per frame"),
    ("speed_max", "2.0", "maximum speed, pixels per frame"),
    (
        "drift",
        "0.01",
        "intensity drift per frame, fraction of full scale",
    ),
    (
        "occluder_rate",
        "0.25",
        "probability of an occlusion interval per sequence",
    ),
    ("occlusion_len", "3", "frames per occlusion interval"),
    ("distractors", "0", "distractor shapes per sequence"),
    (
        "boundary_tol",
        "1",
        "contour tolerance in pixels, or `diagonal`",
    ),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

impl Config {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => {
                let seed = parse(key, value)?;
                t.seed = seed;
                s.seed = seed;
            }
            "d" => m.d = parse(key, value)?,
            "k" => m.k = parse(key, value)?,
            "ws" => m.ws = parse(key, value)?,
            "hs" => m.hs = parse(key, value)?,
            "wt" => m.wt = parse(key, value)?,
            "ht" => m.ht = parse(key, value)?,
            "temporal_mode" => m.temporal_mode = value.parse()?,
            "gap_norm" => {
                m.gap_norm = match value {
                    "total-area" => GapNorm::TotalArea,
                    "mask-area" => GapNorm::MaskArea,
                    _ => return Err(Error::Config(format!("invalid value {value:?} for {key}"))),
                }
            }
            "lambda" => m.lambda = parse(key, value)?,
            "disable_short" => m.ablation.disable_short = parse_bool(key, value)?,
            "disable_long" => m.ablation.disable_long = parse_bool(key, value)?,
            "unweighted_adjacency" => m.ablation.unweighted_adjacency = parse_bool(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "clip_len" => t.clip_len = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_videos" => t.batch_videos = parse(key, value)?,
            "sequences" => s.sequences = parse(key, value)?,
            "frames" => s.frames = parse(key, value)?,
            "width" => s.width = parse(key, value)?,
            "height" => s.height = parse(key, value)?,
            "shapes" => {
                s.shapes = value
                    .split(',')
                    .map(|p| p.trim().parse::<ShapeKind>())
                    .collect::<Result<_>>()?
            }
            "speed_min" => s.speed_min = parse(key, value)?,
            "speed_max" => s.speed_max = parse(key, value)?,
            "drift" => s.drift = parse(key, value)?,
            "occluder_rate" => s.occluder_rate = parse(key, value)?,
            "occlusion_len" => s.occlusion_len = parse(key, value)?,
            "distractors" => s.distractors = parse(key, value)?,
            "boundary_tol" => {
                self.boundary_tol = if value == "diagonal" {
                    BoundaryTolerance::Diagonal
                } else {
                    BoundaryTolerance::Pixels(parse(key, value)?)
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} set twice", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
