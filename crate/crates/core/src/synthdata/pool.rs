//! Reference-mask pools for the discriminator and seeded mask augmentation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, SegSample};
use crate::mask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Partial,
    Unpaired,
    Paired,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Partial => "partial",
            PoolMode::Unpaired => "unpaired",
            PoolMode::Paired => "paired",
        })
    }
}

impl FromStr for PoolMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "partial" => Ok(PoolMode::Partial),
            "unpaired" => Ok(PoolMode::Unpaired),
            "paired" => Ok(PoolMode::Paired),
            other => Err(format!("unknown pool mode `{other}` (partial|unpaired|paired)")),
        }
    }
}

/// Masks the discriminator treats as real, indexed by training-set position.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMaskPool {
    mode: PoolMode,
    masks: Vec<Mask>,
    assignment: Vec<usize>,
    shuffle_seed: u64,
}

impl ReferenceMaskPool {
    pub fn build(
        samples: &[SegSample],
        mode: PoolMode,
        shuffle_seed: u64,
    ) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::InvalidArgument(
                "reference pool needs at least one sample".into(),
            ));
        }
        let n = samples.len();
        let masks = match mode {
            PoolMode::Partial => samples.iter().map(|s| s.weak.to_mask()).collect(),
            PoolMode::Unpaired | PoolMode::Paired => {
                samples.iter().map(|s| s.full.clone()).collect()
            }
        };
        let mut assignment: Vec<usize> = (0..n).collect();
        if mode == PoolMode::Unpaired && n >= 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
            loop {
                assignment.shuffle(&mut rng);
                if assignment.iter().enumerate().any(|(i, &j)| i != j) {
                    break;
                }
            }
        }
        Ok(Self {
            mode,
            masks,
            assignment,
            shuffle_seed,
        })
    }

    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed
    }

    /// Pool index of the mask assigned to training position `i`.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn mask_for(&self, i: usize) -> &Mask {
        &self.masks[self.assignment[i]]
    }
}

const TRANSLATE_FRACTION: f64 = 0.1;
const TRANSLATE_REROLLS: usize = 5;
const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

/// One concrete augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// `(rows, cols)` shift.
    pub shift: (isize, isize),
    pub scale: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip_horizontal: false,
            flip_vertical: false,
            shift: (0, 0),
            scale: 1.0,
        }
    }

    /// Draws flips, a shift that keeps all foreground inside the image
    /// (rerolled a few times before giving up on translation), and a scale.
    pub fn draw<R: Rng + ?Sized>(mask: &Mask, rng: &mut R) -> Self {
        let flip_horizontal = rng.random_bool(0.5);
        let flip_vertical = rng.random_bool(0.5);
        let flipped = flip(mask, flip_horizontal, flip_vertical);
        let reach_r = (mask.height() as f64 * TRANSLATE_FRACTION).floor() as i64;
        let reach_c = (mask.width() as f64 * TRANSLATE_FRACTION).floor() as i64;
        let mut shift = (0, 0);
        for _ in 0..TRANSLATE_REROLLS {
            let candidate = (
                rng.random_range(-reach_r..=reach_r) as isize,
                rng.random_range(-reach_c..=reach_c) as isize,
            );
            if !clips(&flipped, candidate) {
                shift = candidate;
                break;
            }
        }
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        Self {
            flip_horizontal,
            flip_vertical,
            shift,
            scale,
        }
    }

    pub fn apply(&self, mask: &Mask) -> Mask {
        let flipped = flip(mask, self.flip_horizontal, self.flip_vertical);
        let moved = translate(&flipped, self.shift);
        scale_about_centroid(&moved, self.scale)
    }
}

fn flip(mask: &Mask, horizontal: bool, vertical: bool) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |r, c| {
        let r = if vertical { h - 1 - r } else { r };
        let c = if horizontal { w - 1 - c } else { c };
        mask.get(r, c)
    })
}

fn clips(mask: &Mask, (dr, dc): (isize, isize)) -> bool {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    mask.foreground().any(|(r, c)| {
        let (r, c) = (r as isize + dr, c as isize + dc);
        r < 0 || c < 0 || r >= h || c >= w
    })
}

fn translate(mask: &Mask, (dr, dc): (isize, isize)) -> Mask {
    if (dr, dc) == (0, 0) {
        return mask.clone();
    }
    Mask::from_fn(mask.height(), mask.width(), |r, c| {
        mask.get_or_bg(r as isize - dr, c as isize - dc)
    })
}

/// Nearest-neighbour rescaling about the foreground centroid.
fn scale_about_centroid(mask: &Mask, scale: f64) -> Mask {
    if scale == 1.0 {
        return mask.clone();
    }
    let (cy, cx) = mask.centroid();
    Mask::from_fn(mask.height(), mask.width(), |r, c| {
        let sr = (cy + (r as f64 - cy) / scale).round();
        let sc = (cx + (c as f64 - cx) / scale).round();
        mask.get_or_bg(sr as isize, sc as isize)
    })
}

/// Random flip/translate/scale of `mask`, a pure function of `seed`.
pub fn augment_mask(mask: &Mask, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentParams::draw(mask, &mut rng).apply(mask)
}
