//! Region similarity J, contour accuracy F, and per-sequence statistics.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{frame_file_name, read_mask};
use crate::error::{Error, Result};
use crate::mask::Mask;

fn check_dims(a: &Mask, b: &Mask) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "masks {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Intersection over union; two empty masks score 1.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mask pixels with at least one 4-neighbour outside the mask. Pixels past
/// the image border count as outside.
pub fn boundary(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    Mask::from_fn(w, h, |r, c| {
        mask.get(r, c)
            && (r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1))
    })
}

/// Square (Chebyshev) dilation by `radius`.
fn dilate(mask: &Mask, radius: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let rows = Mask::from_fn(w, h, |r, c| {
        (c.saturating_sub(radius)..=(c + radius).min(w - 1)).any(|cc| mask.get(r, cc))
    });
    Mask::from_fn(w, h, |r, c| {
        (r.saturating_sub(radius)..=(r + radius).min(h - 1)).any(|rr| rows.get(rr, c))
    })
}

fn matched_fraction(from: &Mask, to_dilated: &Mask) -> f64 {
    let total = from.count();
    let hit = from
        .bits()
        .iter()
        .zip(to_dilated.bits())
        .filter(|(a, b)| **a && **b)
        .count();
    hit as f64 / total as f64
}

/// Boundary F-measure with a Chebyshev matching tolerance of `tol` pixels.
pub fn boundary_f(pred: &Mask, gt: &Mask, tol: usize) -> Result<f64> {
    check_dims(pred, gt)?;
    if pred.width() == 0 || pred.height() == 0 {
        return Ok(1.0);
    }
    let (pb, gb) = (boundary(pred), boundary(gt));
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_fraction(&pb, &dilate(&gb, tol));
    let recall = matched_fraction(&gb, &dilate(&pb, tol));
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Matching tolerance for [`boundary_f`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryTolerance {
    Pixels(usize),
    /// `ceil(0.008 · image diagonal)`, the DAVIS convention.
    Diagonal,
}

impl BoundaryTolerance {
    pub fn pixels(self, width: usize, height: usize) -> usize {
        match self {
            BoundaryTolerance::Pixels(p) => p,
            BoundaryTolerance::Diagonal => {
                let diag = ((width * width + height * height) as f64).sqrt();
                (0.008 * diag).ceil() as usize
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeqStats {
    pub mean: f64,
    /// Fraction of frames scoring above the threshold.
    pub recall: f64,
    /// Mean of the first quarter of frames minus mean of the last quarter.
    pub decay: f64,
}

/// Arithmetic mean; exact for constant input, so equal chunks cancel.
fn mean(v: &[f64]) -> f64 {
    if v.iter().all(|x| *x == v[0]) {
        return v[0];
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sequence_stats(scores: &[f64], threshold: f64) -> Result<SeqStats> {
    let n = scores.len();
    if n < 4 {
        return Err(Error::Input(format!(
            "statistics need at least 4 frames, got {n}"
        )));
    }
    // four near-equal chunks, the larger ones first
    let (base, extra) = (n / 4, n % 4);
    let first = &scores[..base + (extra > 0) as usize];
    let last = &scores[n - base..];
    Ok(SeqStats {
        mean: mean(scores),
        recall: scores.iter().filter(|&&s| s > threshold).count() as f64 / n as f64,
        decay: mean(first) - mean(last),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReport {
    pub name: String,
    pub j: SeqStats,
    pub f: SeqStats,
}

impl SequenceReport {
    pub fn jf_mean(&self) -> f64 {
        (self.j.mean + self.f.mean) / 2.0
    }

    /// Row values in CSV column order.
    pub fn columns(&self) -> [f64; 7] {
        [
            self.j.mean,
            self.j.recall,
            self.j.decay,
            self.f.mean,
            self.f.recall,
            self.f.decay,
            self.jf_mean(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// In lexicographic name order.
    pub sequences: Vec<SequenceReport>,
}

pub const REPORT_HEADER: &str = "sequence,J_mean,J_recall,J_decay,F_mean,F_recall,F_decay,JF_mean";

fn fmt4(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

impl EvalReport {
    /// Column means over sequences, in CSV column order.
    pub fn global(&self) -> [f64; 7] {
        let mut acc = [0.0; 7];
        for s in &self.sequences {
            for (a, v) in acc.iter_mut().zip(s.columns()) {
                *a += v;
            }
        }
        let n = self.sequences.len().max(1) as f64;
        acc.map(|a| a / n)
    }

    pub fn global_row(&self) -> String {
        row("GLOBAL", &self.global())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{REPORT_HEADER}").unwrap();
        for s in &self.sequences {
            writeln!(out, "{}", row(&s.name, &s.columns())).unwrap();
        }
        writeln!(out, "{}", self.global_row()).unwrap();
        out
    }
}

fn row(name: &str, values: &[f64]) -> String {
    let mut s = name.to_string();
    for v in values {
        s.push(',');
        s.push_str(&fmt4(*v));
    }
    s
}

/// Scores one sequence's frames `2..=n` (frame 1 is given, not predicted).
pub fn score_sequence(
    name: &str,
    preds: &[Mask],
    gts: &[Mask],
    tol: BoundaryTolerance,
) -> Result<SequenceReport> {
    if preds.len() != gts.len() {
        return Err(Error::Input(format!(
            "sequence {name}: {} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut js = Vec::new();
    let mut fs = Vec::new();
    for (p, g) in preds.iter().zip(gts).skip(1) {
        js.push(jaccard(p, g)?);
        fs.push(boundary_f(p, g, tol.pixels(g.width(), g.height()))?);
    }
    Ok(SequenceReport {
        name: name.to_string(),
        j: sequence_stats(&js, 0.5)?,
        f: sequence_stats(&fs, 0.5)?,
    })
}

/// Compares `pred_dir/<seq>/%05d.pgm` with `gt_dir/<seq>/masks/%05d.pgm` for
/// every sequence of `gt_dir`. Missing predictions are reported together.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, tol: BoundaryTolerance) -> Result<EvalReport> {
    let seq_dirs = crate::data::sequence_dirs(gt_dir)?;
    if seq_dirs.is_empty() {
        return Err(Error::Input(format!(
            "no sequences under {}",
            gt_dir.display()
        )));
    }
    let mut missing = Vec::new();
    let mut layouts = Vec::new();
    for dir in &seq_dirs {
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        let gt_files = crate::data::numbered_files(&dir.join("masks"))?;
        let pred_files: Vec<_> = (1..=gt_files.len())
            .map(|i| pred_dir.join(&name).join(frame_file_name(i)))
            .collect();
        // frame 1 is excluded from scoring, so its prediction is optional
        for p in pred_files.iter().skip(1) {
            if !p.is_file() {
                missing.push(p.display().to_string());
            }
        }
        layouts.push((name, gt_files, pred_files));
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let mut sequences = Vec::new();
    for (name, gt_files, pred_files) in layouts {
        let gts = gt_files
            .iter()
            .map(|p| read_mask(p))
            .collect::<Result<Vec<_>>>()?;
        let mut preds = vec![gts[0].clone()];
        for p in pred_files.iter().skip(1) {
            preds.push(read_mask(p)?);
        }
        sequences.push(score_sequence(&name, &preds, &gts, tol)?);
    }
    Ok(EvalReport { sequences })
}
