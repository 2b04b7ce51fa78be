//! Seeded synthetic segmentation benchmarks and erosion-derived weak labels.

mod io;
mod pool;

pub use io::{load_dir, load_sample, save_sample, PgmError};
pub use pool::{augment_mask, AugmentParams, PoolMode, ReferenceMaskPool};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::Exec;
use crate::mask::{Mask, WeakMask};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid shape spec: {0}")]
    Spec(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("cannot erode an empty mask")]
    EmptyMask,
    #[error(
        "annotation ratio {target} unreachable: floor {floor:.6} after {iterations} erosion iterations"
    )]
    UnreachableRatio {
        target: f64,
        floor: f64,
        iterations: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Pgm(#[from] PgmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    Globular,
    Ringlike,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Globular => "globular",
            Topology::Ringlike => "ringlike",
        })
    }
}

impl FromStr for Topology {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "globular" => Ok(Topology::Globular),
            "ringlike" => Ok(Topology::Ringlike),
            other => Err(format!("unknown topology `{other}` (globular|ringlike)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum StructuringElement {
    #[default]
    Cross3,
    Square3,
}

impl fmt::Display for StructuringElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructuringElement::Cross3 => "cross3",
            StructuringElement::Square3 => "square3",
        })
    }
}

impl FromStr for StructuringElement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross3" => Ok(StructuringElement::Cross3),
            "square3" => Ok(StructuringElement::Square3),
            other => Err(format!("unknown structuring element `{other}` (cross3|square3)")),
        }
    }
}

impl StructuringElement {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            StructuringElement::Cross3 => &[(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)],
            StructuringElement::Square3 => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 0),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Parameters of the synthetic image/target model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub topology: Topology,
    /// Outer radius range `[r_lo, r_hi]` in pixels.
    pub radius: (f64, f64),
    /// Ring thickness range in pixels (ringlike only).
    pub ring_thickness: (f64, f64),
    pub fg_intensity: f64,
    pub bg_intensity: f64,
    pub noise_std: f64,
    /// Peak amplitude of the linear illumination ramp.
    pub illumination: f64,
    /// Width in pixels of the bright band surrounding the target (0 disables it).
    pub halo_width: f64,
    pub halo_intensity: f64,
    pub side: usize,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        Self {
            topology: Topology::Globular,
            radius: (7.0, 14.0),
            ring_thickness: (3.0, 5.0),
            fg_intensity: 0.7,
            bg_intensity: 0.3,
            noise_std: 0.08,
            illumination: 0.2,
            halo_width: 3.0,
            halo_intensity: 0.6,
            side: 64,
        }
    }
}

/// Largest elongation (major/minor axis ratio) of generated ellipses.
const MAX_ASPECT: f64 = 1.3;

impl ShapeSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.radius;
        let half = self.side as f64 / 2.0;
        if !(lo > 0.0 && lo <= hi && hi < half) {
            return Err(DataError::Spec(format!(
                "radius range ({lo}, {hi}) must satisfy 0 < r_lo <= r_hi < side/2 = {half}"
            )));
        }
        for (name, v) in [
            ("fg_intensity", self.fg_intensity),
            ("bg_intensity", self.bg_intensity),
            ("halo_intensity", self.halo_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Spec(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.noise_std >= 0.0 && self.illumination >= 0.0 && self.halo_width >= 0.0) {
            return Err(DataError::Spec(
                "noise_std, illumination and halo_width must be non-negative".into(),
            ));
        }
        if self.topology == Topology::Ringlike {
            let (tlo, thi) = self.ring_thickness;
            if !(tlo >= 2.0 && tlo <= thi && thi <= lo - 2.0) {
                return Err(DataError::Spec(format!(
                    "ring thickness ({tlo}, {thi}) must satisfy 2 <= t_lo <= t_hi <= r_lo - 2"
                )));
            }
        }
        Ok(())
    }

    /// Canonical single-line description used for the spec digest.
    pub fn canonical(&self) -> String {
        format!(
            "topology={};radius={},{};thickness={},{};fg={};bg={};noise={};illumination={};halo={},{};side={}",
            self.topology,
            self.radius.0,
            self.radius.1,
            self.ring_thickness.0,
            self.ring_thickness.1,
            self.fg_intensity,
            self.bg_intensity,
            self.noise_std,
            self.illumination,
            self.halo_width,
            self.halo_intensity,
            self.side
        )
    }

    /// First 16 hex digits of the SHA-256 of [`ShapeSpec::canonical`].
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleInfo {
    pub seed: u64,
    pub topology: Topology,
    pub radius: f64,
    pub spec_digest: String,
}

/// One image with its full mask and weak annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: usize,
    /// `1 × side × side`, values in `[0, 1]`.
    pub image: Tensor,
    pub full: Mask,
    pub weak: WeakMask,
    pub info: SampleInfo,
}

fn sample_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

fn render_target(spec: &ShapeSpec, rng: &mut ChaCha8Rng) -> (Mask, f64) {
    let side = spec.side;
    let half = side as f64 / 2.0;
    let r = if spec.radius.0 < spec.radius.1 {
        rng.random_range(spec.radius.0..=spec.radius.1)
    } else {
        spec.radius.0
    };
    // Area-preserving ellipse, elongation capped so the target fits.
    let max_aspect = MAX_ASPECT.min(((half - 1.0) / r).powi(2)).max(1.0);
    let aspect = if max_aspect > 1.0 {
        rng.random_range(1.0..=max_aspect)
    } else {
        1.0
    };
    let (ra, rb) = (r * aspect.sqrt(), r / aspect.sqrt());
    let theta = rng.random_range(0.0..PI);
    let reach = ra + 1.0;
    let (lo, hi) = (reach, side as f64 - reach);
    let mut centre = || if lo < hi { rng.random_range(lo..hi) } else { half };
    let (cy, cx) = (centre(), centre());
    let inner = match spec.topology {
        Topology::Globular => None,
        Topology::Ringlike => {
            let (tlo, thi) = spec.ring_thickness;
            let t = if tlo < thi { rng.random_range(tlo..=thi) } else { tlo };
            Some(1.0 - t / r)
        }
    };
    let (cos, sin) = (theta.cos(), theta.sin());
    let inside = |row: usize, col: usize, scale: f64| {
        let dy = row as f64 + 0.5 - cy;
        let dx = col as f64 + 0.5 - cx;
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / (ra * scale)).powi(2) + (v / (rb * scale)).powi(2) <= 1.0
    };
    let mask = Mask::from_fn(side, side, |row, col| {
        inside(row, col, 1.0) && inner.is_none_or(|s| !inside(row, col, s))
    });
    (mask, r)
}

/// Background pixels within Euclidean distance `width` of the foreground.
fn halo(mask: &Mask, width: f64) -> Mask {
    let reach = width.floor() as isize;
    let offsets: Vec<(isize, isize)> = (-reach..=reach)
        .flat_map(|dr| (-reach..=reach).map(move |dc| (dr, dc)))
        .filter(|&(dr, dc)| ((dr * dr + dc * dc) as f64) <= width * width)
        .collect();
    Mask::from_fn(mask.height(), mask.width(), |r, c| {
        !mask.get(r, c)
            && offsets
                .iter()
                .any(|&(dr, dc)| mask.get_or_bg(r as isize + dr, c as isize + dc))
    })
}

fn render_image(spec: &ShapeSpec, mask: &Mask, rng: &mut ChaCha8Rng) -> Tensor {
    let side = spec.side;
    let band = halo(mask, spec.halo_width);
    let phi = rng.random_range(0.0..2.0 * PI);
    let (dir_y, dir_x) = (phi.sin(), phi.cos());
    let noise = Normal::new(0.0, spec.noise_std).expect("finite non-negative std");
    let half = side as f64 / 2.0;
    let norm = half * std::f64::consts::SQRT_2;
    let data = (0..side * side)
        .map(|i| {
            let (row, col) = (i / side, i % side);
            let base = if mask.bits()[i] {
                spec.fg_intensity
            } else if band.bits()[i] {
                spec.halo_intensity
            } else {
                spec.bg_intensity
            };
            let ramp = ((row as f64 + 0.5 - half) * dir_y + (col as f64 + 0.5 - half) * dir_x) / norm;
            let n = if spec.noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            (base + spec.illumination * ramp + n).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::image(side, side, data).expect("positive side")
}

/// Generates sample `id` of the stream identified by `seed`; the weak mask
/// is the full mask eroded once with `element` until calibrated.
pub fn gen_sample(spec: &ShapeSpec, id: usize, seed: u64) -> SegSample {
    let mut rng = sample_rng(seed, id);
    let (full, radius) = render_target(spec, &mut rng);
    let image = render_image(spec, &full, &mut rng);
    let weak = erode_to_weak(&full, StructuringElement::default(), 1)
        .expect("generated masks are nonempty");
    SegSample {
        id,
        image,
        full,
        weak,
        info: SampleInfo {
            seed,
            topology: spec.topology,
            radius,
            spec_digest: spec.digest(),
        },
    }
}

/// Samples with ids `ids`; each sample's randomness depends only on `(seed, id)`.
pub fn gen_samples(
    spec: &ShapeSpec,
    ids: std::ops::Range<usize>,
    seed: u64,
    exec: Exec,
) -> Result<Vec<SegSample>, DataError> {
    spec.validate()?;
    Ok(exec.map_range(ids, |id| gen_sample(spec, id, seed)))
}

pub fn gen_dataset(spec: &ShapeSpec, n: usize, seed: u64) -> Result<Vec<SegSample>, DataError> {
    if n == 0 {
        return Err(DataError::InvalidArgument("dataset size must be at least 1".into()));
    }
    gen_samples(spec, 0..n, seed, Exec::default())
}

/// One binary erosion step; pixels outside the image count as background.
pub fn erode(mask: &Mask, element: StructuringElement) -> Mask {
    let offsets = element.offsets();
    Mask::from_fn(mask.height(), mask.width(), |r, c| {
        mask.get(r, c)
            && offsets
                .iter()
                .all(|&(dr, dc)| mask.get_or_bg(r as isize + dr, c as isize + dc))
    })
}

/// Erodes `iterations` times, backing off to the last nonempty iterate.
pub fn erode_to_weak(
    full: &Mask,
    element: StructuringElement,
    iterations: usize,
) -> Result<WeakMask, DataError> {
    if iterations == 0 {
        return Err(DataError::InvalidArgument(
            "erosion needs at least one iteration".into(),
        ));
    }
    if full.area() == 0 {
        return Err(DataError::EmptyMask);
    }
    let mut current = full.clone();
    for _ in 0..iterations {
        let next = erode(&current, element);
        if next.area() == 0 {
            break;
        }
        current = next;
    }
    Ok(WeakMask::new(current))
}

/// `|P| / (H·W)`.
pub fn annotation_ratio(weak: &WeakMask) -> f64 {
    let m = weak.labeled();
    weak.count() as f64 / m.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub iterations: usize,
    pub achieved_ratio: f64,
}

/// Smallest erosion count whose mean annotation ratio is at most `target`.
pub fn calibrate_erosion(
    samples: &[SegSample],
    target: f64,
    element: StructuringElement,
) -> Result<Calibration, DataError> {
    if samples.is_empty() {
        return Err(DataError::InvalidArgument("no samples to calibrate on".into()));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "target ratio {target} must lie in (0, 1)"
        )));
    }
    if samples.iter().any(|s| s.full.area() == 0) {
        return Err(DataError::EmptyMask);
    }
    let mut current: Vec<Mask> = samples.iter().map(|s| s.full.clone()).collect();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        for m in &mut current {
            let next = erode(m, element);
            if next.area() > 0 && next != *m {
                *m = next;
                changed = true;
            }
        }
        let ratio = current
            .iter()
            .map(|m| m.area() as f64 / m.len() as f64)
            .sum::<f64>()
            / current.len() as f64;
        if ratio <= target {
            return Ok(Calibration {
                iterations,
                achieved_ratio: ratio,
            });
        }
        if !changed {
            return Err(DataError::UnreachableRatio {
                target,
                floor: ratio,
                iterations,
            });
        }
    }
}

/// Replaces every sample's weak mask with an `iterations`-fold erosion.
pub fn apply_erosion(
    samples: &mut [SegSample],
    element: StructuringElement,
    iterations: usize,
) -> Result<(), DataError> {
    for s in samples {
        s.weak = erode_to_weak(&s.full, element, iterations)?;
    }
    Ok(())
}

pub fn mean_annotation_ratio(samples: &[SegSample]) -> f64 {
    samples.iter().map(|s| annotation_ratio(&s.weak)).sum::<f64>() / samples.len().max(1) as f64
}

/// Connected-component statistics of a mask under 4-connectivity:
/// `(foreground components, enclosed background components)`.
pub fn topology_counts(mask: &Mask) -> (usize, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![usize::MAX; h * w];
    let mut fg = 0;
    let mut holes = 0;
    for start in 0..h * w {
        if label[start] != usize::MAX {
            continue;
        }
        let value = mask.bits()[start];
        let mut stack = vec![start];
        label[start] = start;
        let mut touches_border = false;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                touches_border = true;
            }
            let mut visit = |j: usize| {
                if label[j] == usize::MAX && mask.bits()[j] == value {
                    label[j] = start;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if value {
            fg += 1;
        } else if !touches_border {
            holes += 1;
        }
    }
    (fg, holes)
}
