//! Training objectives recorded on a [`Tape`].
//!
//! Probabilities are clamped to `[LOG_EPS, 1]` before every log. Partial
//! cross-entropy normalizes by the number of labeled pixels `|P|`.

use thiserror::Error;

use crate::mask::{Mask, WeakMask};
use crate::tensor::{Tape, TensorError, Var, LOG_EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("weak annotation has no labeled pixels")]
    EmptyAnnotation,
    #[error("prediction shape {probs:?} does not match a {height}×{width} mask")]
    MaskExtent {
        probs: Vec<usize>,
        height: usize,
        width: usize,
    },
    #[error("response maps differ in size: {fake} fake vs {real} real elements")]
    ResponseMismatch { fake: usize, real: usize },
    #[error("invalid size bounds ({lower}, {upper}): need 0 <= a < b")]
    Bounds { lower: f64, upper: f64 },
    #[error("loss weight must be non-negative and finite, got {0}")]
    Weight(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Prior interval `[a, b]` on foreground size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeBounds {
    lower: f64,
    upper: f64,
}

impl SizeBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self, LossError> {
        if !(lower >= 0.0 && lower < upper && upper.is_finite()) {
            return Err(LossError::Bounds { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }
}

/// Quadratic penalty for leaving `[a, b]`, evaluated directly on a scalar.
pub fn size_penalty_value(size: f64, bounds: &SizeBounds) -> f64 {
    if size <= bounds.lower {
        (size - bounds.lower).powi(2)
    } else if size >= bounds.upper {
        (size - bounds.upper).powi(2)
    } else {
        0.0
    }
}

fn check_weight(w: f64) -> Result<(), LossError> {
    if w >= 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(LossError::Weight(w))
    }
}

fn check_extent(tape: &Tape, probs: Var, mask: &Mask) -> Result<(), LossError> {
    if tape.shape(probs) != [1, mask.height(), mask.width()] {
        return Err(LossError::MaskExtent {
            probs: tape.shape(probs).to_vec(),
            height: mask.height(),
            width: mask.width(),
        });
    }
    Ok(())
}

fn clamped_log(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let c = tape.clamp(x, LOG_EPS, 1.0)?;
    tape.log(c)
}

/// `(1/|P|) Σ_{i∈P} −log ŷ_i`.
pub fn partial_cross_entropy(
    tape: &mut Tape,
    probs: Var,
    weak: &WeakMask,
) -> Result<Var, LossError> {
    check_extent(tape, probs, weak.labeled())?;
    let n = weak.count();
    if n == 0 {
        return Err(LossError::EmptyAnnotation);
    }
    let log_p = clamped_log(tape, probs)?;
    let selector = tape.constant(weak.labeled().to_tensor());
    let picked = tape.mul(log_p, selector)?;
    let total = tape.sum(picked);
    Ok(tape.mul_scalar(total, -1.0 / n as f64))
}

/// Mean binary cross-entropy over all pixels against a full target mask.
pub fn binary_cross_entropy(
    tape: &mut Tape,
    probs: Var,
    target: &Mask,
) -> Result<Var, LossError> {
    check_extent(tape, probs, target)?;
    let fg = target.to_tensor();
    let mut bg = fg.clone();
    for v in bg.data_mut() {
        *v = 1.0 - *v;
    }
    let log_p = clamped_log(tape, probs)?;
    let neg = tape.mul_scalar(probs, -1.0);
    let comp = tape.add_scalar(neg, 1.0);
    let log_q = clamped_log(tape, comp)?;
    let fg = tape.constant(fg);
    let bg = tape.constant(bg);
    let a = tape.mul(log_p, fg)?;
    let b = tape.mul(log_q, bg)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.mul_scalar(m, -1.0))
}

/// Full-image cross-entropy treating unlabeled pixels as background.
pub fn weak_cross_entropy(tape: &mut Tape, probs: Var, weak: &WeakMask) -> Result<Var, LossError> {
    binary_cross_entropy(tape, probs, weak.labeled())
}

/// Sum of foreground probabilities.
pub fn soft_size(tape: &mut Tape, probs: Var) -> Var {
    tape.sum(probs)
}

/// `relu(a − s)² + relu(s − b)²`, identical to [`size_penalty_value`].
pub fn size_penalty(tape: &mut Tape, size: Var, bounds: &SizeBounds) -> Var {
    let neg = tape.mul_scalar(size, -1.0);
    let below = tape.add_scalar(neg, bounds.lower);
    let below = tape.relu(below);
    let below = tape.square(below);
    let above = tape.add_scalar(size, -bounds.upper);
    let above = tape.relu(above);
    let above = tape.square(above);
    tape.add(below, above).expect("scalar operands")
}

/// Partial cross-entropy plus `λ_s` times the size penalty on the soft size.
pub fn sccl_objective(
    tape: &mut Tape,
    probs: Var,
    weak: &WeakMask,
    bounds: &SizeBounds,
    lambda_s: f64,
) -> Result<Var, LossError> {
    check_weight(lambda_s)?;
    let ce = partial_cross_entropy(tape, probs, weak)?;
    let size = soft_size(tape, probs);
    let penalty = size_penalty(tape, size, bounds);
    let weighted = tape.mul_scalar(penalty, lambda_s);
    Ok(tape.add(ce, weighted)?)
}

/// `(1/M) Σ (d_i − 1)²` over the response map of `(X, G(X))`.
pub fn accl_generator_loss(tape: &mut Tape, response: Var) -> Var {
    let shifted = tape.add_scalar(response, -1.0);
    let sq = tape.square(shifted);
    tape.mean(sq)
}

/// `(1/M) Σ d_fake² + (1/M) Σ (d_real − 1)²`.
pub fn discriminator_objective(
    tape: &mut Tape,
    response_fake: Var,
    response_real: Var,
) -> Result<Var, LossError> {
    let (nf, nr) = (
        tape.value(response_fake).numel(),
        tape.value(response_real).numel(),
    );
    if nf != nr {
        return Err(LossError::ResponseMismatch { fake: nf, real: nr });
    }
    let f = tape.square(response_fake);
    let f = tape.mean(f);
    let r = accl_generator_loss(tape, response_real);
    Ok(tape.add(f, r)?)
}

/// Partial cross-entropy plus `λ_a` times the adversarial term.
pub fn generator_objective(
    tape: &mut Tape,
    probs: Var,
    weak: &WeakMask,
    response: Var,
    lambda_a: f64,
) -> Result<Var, LossError> {
    check_weight(lambda_a)?;
    let ce = partial_cross_entropy(tape, probs, weak)?;
    let adv = accl_generator_loss(tape, response);
    let weighted = tape.mul_scalar(adv, lambda_a);
    Ok(tape.add(ce, weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn probs(tape: &mut Tape, h: usize, w: usize, values: &[f64]) -> Var {
        tape.param(&Tensor::image(h, w, values.to_vec()).unwrap())
    }

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn partial_ce_examples() {
        let mut tape = Tape::new();
        let weak = WeakMask::from_pixels(2, 2, &[(0, 0), (1, 1)]);
        let p = probs(&mut tape, 2, 2, &[1.0 - 1e-9, 0.3, 0.2, 1.0 - 1e-9]);
        let l = partial_cross_entropy(&mut tape, p, &weak).unwrap();
        assert!(value(&tape, l) < 1e-6);

        let single = WeakMask::from_pixels(2, 2, &[(1, 0)]);
        let p = probs(&mut tape, 2, 2, &[0.9, 0.9, 0.5, 0.9]);
        let l = partial_cross_entropy(&mut tape, p, &single).unwrap();
        assert!((value(&tape, l) - LN_2).abs() < 1e-12);

        let two = WeakMask::from_pixels(1, 2, &[(0, 0), (0, 1)]);
        let p = probs(&mut tape, 1, 2, &[0.5, 0.25]);
        let l = partial_cross_entropy(&mut tape, p, &two).unwrap();
        assert!((value(&tape, l) - (LN_2 + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((value(&tape, l) - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn partial_ce_rejects_empty() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, 1, 2, &[0.5, 0.5]);
        let err = partial_cross_entropy(&mut tape, p, &WeakMask::new(Mask::empty(1, 2)));
        assert_eq!(err.unwrap_err(), LossError::EmptyAnnotation);
        let wrong = WeakMask::from_pixels(2, 2, &[(0, 0)]);
        assert!(matches!(
            partial_cross_entropy(&mut tape, p, &wrong),
            Err(LossError::MaskExtent { .. })
        ));
    }

    #[test]
    fn weak_ce_examples() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, 2, 2, &[1e-9; 4]);
        let l = weak_cross_entropy(&mut tape, p, &WeakMask::new(Mask::empty(2, 2))).unwrap();
        assert!(value(&tape, l) < 1e-6);

        let weak = WeakMask::from_pixels(2, 2, &[(0, 0)]);
        let p = probs(&mut tape, 2, 2, &[0.5; 4]);
        let l = weak_cross_entropy(&mut tape, p, &weak).unwrap();
        assert!((value(&tape, l) - LN_2).abs() < 1e-12);

        let p = probs(&mut tape, 2, 2, &[1.0 - 1e-9, 1e-9, 1e-9, 1e-9]);
        let l = weak_cross_entropy(&mut tape, p, &weak).unwrap();
        assert!(value(&tape, l) < 1e-6);
    }

    #[test]
    fn soft_size_examples() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, 2, 2, &[0.0; 4]);
        let s = soft_size(&mut tape, p);
        assert_eq!(value(&tape, s), 0.0);
        let p = probs(&mut tape, 2, 2, &[1.0; 4]);
        let s = soft_size(&mut tape, p);
        assert_eq!(value(&tape, s), 4.0);
        let p = probs(&mut tape, 2, 2, &[0.2, 0.3, 0.5, 1.0]);
        let s = soft_size(&mut tape, p);
        assert!((value(&tape, s) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn size_penalty_examples() {
        let b = SizeBounds::new(10.0, 40.0).unwrap();
        for (s, want) in [(25.0, 0.0), (4.0, 36.0), (50.0, 100.0), (10.0, 0.0), (40.0, 0.0)] {
            assert_eq!(size_penalty_value(s, &b), want);
            let mut tape = Tape::new();
            let v = tape.param(&Tensor::scalar(s));
            let c = size_penalty(&mut tape, v, &b);
            assert_eq!(value(&tape, c), want, "s = {s}");
        }
        assert!(SizeBounds::new(5.0, 5.0).is_err());
        assert!(SizeBounds::new(-1.0, 5.0).is_err());
    }

    #[test]
    fn sccl_examples() {
        let weak = WeakMask::from_pixels(10, 10, &[(0, 0)]);
        let b = SizeBounds::new(10.0, 40.0).unwrap();
        let mut vals = vec![0.5; 100];
        let mut tape = Tape::new();
        let p = probs(&mut tape, 10, 10, &vals);
        let l = sccl_objective(&mut tape, p, &weak, &b, 0.01).unwrap();
        assert!((value(&tape, l) - (LN_2 + 1.0)).abs() < 1e-12);

        let ce = partial_cross_entropy(&mut tape, p, &weak).unwrap();
        let l0 = sccl_objective(&mut tape, p, &weak, &b, 0.0).unwrap();
        assert_eq!(value(&tape, l0), value(&tape, ce));

        vals.iter_mut().for_each(|v| *v = 0.25);
        let p = probs(&mut tape, 10, 10, &vals);
        let ce = partial_cross_entropy(&mut tape, p, &weak).unwrap();
        let l = sccl_objective(&mut tape, p, &weak, &b, 0.01).unwrap();
        assert_eq!(value(&tape, l), value(&tape, ce));
    }

    #[test]
    fn adversarial_examples() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let l = accl_generator_loss(&mut tape, r);
        assert_eq!(value(&tape, l), 0.0);
        let r = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let l = accl_generator_loss(&mut tape, r);
        assert_eq!(value(&tape, l), 1.0);
        let r = tape.constant(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.5]).unwrap());
        let l = accl_generator_loss(&mut tape, r);
        assert!((value(&tape, l) - 1.25 / 3.0).abs() < 1e-15);

        let zero = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let one = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let half = tape.constant(Tensor::full(&[1, 2, 2], 0.5));
        let d = discriminator_objective(&mut tape, zero, one).unwrap();
        assert_eq!(value(&tape, d), 0.0);
        let d = discriminator_objective(&mut tape, one, zero).unwrap();
        assert_eq!(value(&tape, d), 2.0);
        let d = discriminator_objective(&mut tape, half, half).unwrap();
        assert_eq!(value(&tape, d), 0.5);
        let odd = tape.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(matches!(
            discriminator_objective(&mut tape, odd, one),
            Err(LossError::ResponseMismatch { .. })
        ));
    }

    #[test]
    fn generator_objective_examples() {
        let weak = WeakMask::from_pixels(2, 2, &[(0, 1)]);
        let mut tape = Tape::new();
        let p = probs(&mut tape, 2, 2, &[0.1, 0.5, 0.3, 0.7]);
        let zeros = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let l = generator_objective(&mut tape, p, &weak, zeros, 0.05).unwrap();
        assert!((value(&tape, l) - (LN_2 + 0.05)).abs() < 1e-12);
        let ce = partial_cross_entropy(&mut tape, p, &weak).unwrap();
        let l0 = generator_objective(&mut tape, p, &weak, zeros, 0.0).unwrap();
        assert_eq!(value(&tape, l0), value(&tape, ce));

        let p = probs(&mut tape, 2, 2, &[0.1, 1.0 - 1e-12, 0.3, 0.7]);
        let ones = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let l = generator_objective(&mut tape, p, &weak, ones, 0.05).unwrap();
        assert!(value(&tape, l) < 1e-9);
        assert!(generator_objective(&mut tape, p, &weak, ones, -1.0).is_err());
    }

    #[test]
    fn partial_ce_ignores_unlabeled_pixels() {
        let weak = WeakMask::from_pixels(3, 3, &[(1, 1), (0, 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut tape = Tape::new();
        let p = probs(&mut tape, 3, 3, &base);
        let reference = partial_cross_entropy(&mut tape, p, &weak).unwrap();
        let reference = value(&tape, reference);
        for _ in 0..20 {
            let mut v = base.clone();
            for (i, x) in v.iter_mut().enumerate() {
                if i != 4 && i != 2 {
                    *x = rng.random_range(0.0..1.0);
                }
            }
            let p = probs(&mut tape, 3, 3, &v);
            let l = partial_cross_entropy(&mut tape, p, &weak).unwrap();
            assert_eq!(value(&tape, l), reference);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let weak = WeakMask::from_pixels(4, 4, &[(0, 0), (2, 3), (3, 1)]);
        let bounds = SizeBounds::new(2.0, 5.0).unwrap();
        let p = Tensor::image(4, 4, (0..16).map(|_| rng.random_range(0.05..0.95)).collect())
            .unwrap();
        let opts = GradCheckOptions::default();
        let pce = |t: &mut Tape, v: &[Var]| partial_cross_entropy(t, v[0], &weak);
        assert!(grad_check(pce, &[p.clone()], &opts).unwrap() < 1e-4);
        let wce = |t: &mut Tape, v: &[Var]| weak_cross_entropy(t, v[0], &weak);
        assert!(grad_check(wce, &[p.clone()], &opts).unwrap() < 1e-4);
        let sccl = |t: &mut Tape, v: &[Var]| sccl_objective(t, v[0], &weak, &bounds, 0.01);
        assert!(grad_check(sccl, &[p.clone()], &opts).unwrap() < 1e-4);
    }
}
