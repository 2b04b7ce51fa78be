//! Dice scoring, size-bound estimation and expansion diagnostics.

use std::fmt::Write as _;

use thiserror::Error;

use crate::exec::Exec;
use crate::losses::{LossError, SizeBounds};
use crate::mask::Mask;
use crate::nets::{NetError, UNetLite};
use crate::synthdata::SegSample;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Multipliers applied to the smallest and largest observed areas.
pub const BOUND_FACTORS: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask extents differ: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("ground-truth mask {0} is empty")]
    EmptyMask(usize),
    #[error("no masks given")]
    NoMasks,
    #[error("threshold {0} must lie in (0, 1)")]
    Threshold(f64),
    #[error("probability map must be 1×H×W, got {0:?}")]
    ProbShape(Vec<usize>),
    #[error(transparent)]
    Bounds(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Pixel is foreground iff `p >= threshold`.
pub fn binarize(probs: &Tensor, threshold: f64) -> Result<Mask, EvalError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EvalError::Threshold(threshold));
    }
    match probs.chw() {
        Some((1, h, w)) => Ok(Mask::new(
            h,
            w,
            probs.data().iter().map(|&p| p >= threshold).collect(),
        )),
        _ => Err(EvalError::ProbShape(probs.shape().to_vec())),
    }
}

fn check_extent(a: &Mask, b: &Mask) -> Result<(), EvalError> {
    if a.same_extent(b) {
        Ok(())
    } else {
        Err(EvalError::Shape(a.height(), a.width(), b.height(), b.width()))
    }
}

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64, EvalError> {
    check_extent(pred, gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// `(0.9·min area, 1.1·max area)`.
pub fn size_bounds<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<SizeBounds, EvalError> {
    let mut range: Option<(usize, usize)> = None;
    for (i, m) in masks.into_iter().enumerate() {
        let area = m.area();
        if area == 0 {
            return Err(EvalError::EmptyMask(i));
        }
        range = Some(match range {
            None => (area, area),
            Some((lo, hi)) => (lo.min(area), hi.max(area)),
        });
    }
    let (lo, hi) = range.ok_or(EvalError::NoMasks)?;
    Ok(SizeBounds::new(
        BOUND_FACTORS.0 * lo as f64,
        BOUND_FACTORS.1 * hi as f64,
    )?)
}

/// `|pred| / |gt|`.
pub fn expansion_ratio(pred: &Mask, gt: &Mask) -> Result<f64, EvalError> {
    check_extent(pred, gt)?;
    let g = gt.area();
    if g == 0 {
        return Err(EvalError::EmptyMask(0));
    }
    Ok(pred.area() as f64 / g as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub id: usize,
    pub dice: f64,
    pub pred_area: usize,
    pub gt_area: usize,
    pub expansion_ratio: f64,
    /// Sum of predicted probabilities.
    pub soft_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleScore>,
    pub mean_dice: f64,
    pub mean_expansion: f64,
    pub mean_soft_size: f64,
    pub bounds: Option<SizeBounds>,
}

impl EvalReport {
    pub fn from_scores(samples: Vec<SampleScore>, bounds: Option<SizeBounds>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleScore) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Self {
            mean_dice: mean(|s| s.dice),
            mean_expansion: mean(|s| s.expansion_ratio),
            mean_soft_size: mean(|s| s.soft_size),
            samples,
            bounds,
        }
    }

    pub fn per_sample_dice(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.dice).collect()
    }

    /// Per-sample CSV followed by a `# summary` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,dice,pred_area,gt_area,expansion_ratio\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.id, s.dice, s.pred_area, s.gt_area, s.expansion_ratio
            );
        }
        let _ = write!(
            out,
            "# summary mean_dice={} mean_expansion={} mean_soft_size={} samples={}",
            self.mean_dice,
            self.mean_expansion,
            self.mean_soft_size,
            self.samples.len()
        );
        if let Some(b) = &self.bounds {
            let _ = write!(out, " bounds={},{}", b.lower(), b.upper());
        }
        out.push('\n');
        out
    }
}

pub fn score_prediction(id: usize, probs: &Tensor, gt: &Mask) -> Result<SampleScore, EvalError> {
    let pred = binarize(probs, DEFAULT_THRESHOLD)?;
    Ok(SampleScore {
        id,
        dice: dice(&pred, gt)?,
        pred_area: pred.area(),
        gt_area: gt.area(),
        expansion_ratio: expansion_ratio(&pred, gt)?,
        soft_size: probs.data().iter().sum(),
    })
}

/// Scores `model` on every sample at threshold 0.5.
pub fn evaluate(model: &UNetLite, samples: &[SegSample], exec: Exec) -> Result<EvalReport, EvalError> {
    let scores = exec
        .map(samples, |s| {
            let probs = model.predict(&s.image)?;
            score_prediction(s.id, &probs, &s.full)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_scores(scores, None))
}
