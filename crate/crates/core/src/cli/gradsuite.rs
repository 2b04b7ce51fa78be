//! Randomized finite-difference checks over every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{self, SizeBounds};
use crate::mask::{Mask, WeakMask};
use crate::nets::{Bound, NetConfig, PatchDiscriminator, UNetLite};
use crate::tensor::{grad_check, GradCheckOptions, Tape, Tensor, Var};
use crate::trainer::TrainError;

pub const DEFAULT_INSTANCES: usize = 20;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64, TrainError>;

const OPS: &[(&str, Check)] = &[
    ("conv2d", check_conv2d),
    ("upsample_nearest2x", check_upsample),
    ("relu", check_relu),
    ("leaky_relu", check_leaky),
    ("sigmoid", check_sigmoid),
    ("concat_channels", check_concat),
    ("sum", check_sum),
    ("mean", check_mean),
    ("add", check_add),
    ("sub", check_sub),
    ("mul", check_mul),
    ("add_scalar", check_add_scalar),
    ("mul_scalar", check_mul_scalar),
    ("square", check_square),
    ("log", check_log),
    ("clamp", check_clamp),
    ("partial_cross_entropy", check_partial_ce),
    ("weak_cross_entropy", check_weak_ce),
    ("binary_cross_entropy", check_bce),
    ("size_penalty", check_size_penalty),
    ("sccl_objective", check_sccl),
    ("discriminator_objective", check_disc_objective),
    ("generator_objective", check_generator_objective),
    ("accl_generator_loss", check_accl_generator),
    ("unet_forward", check_unet),
    ("discriminator_forward", check_disc_forward),
    ("sccl_objective_composed", check_sccl_composed),
    ("generator_objective_composed", check_generator_composed),
    ("discriminator_objective_composed", check_disc_composed),
];

pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|(n, _)| *n).collect()
}

/// Runs `instances` random instances of every op; instance streams are
/// independent of each other and of the op order.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<OpReport>, TrainError> {
    OPS.iter()
        .enumerate()
        .map(|(k, (op, check))| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((k as u64) << 32) | i as u64);
                worst = worst.max(check(&mut rng)?);
            }
            Ok(OpReport {
                op,
                instances,
                max_error: worst,
            })
        })
        .collect()
}

fn opts(rng: &mut ChaCha8Rng) -> GradCheckOptions {
    GradCheckOptions {
        seed: rng.random(),
        ..GradCheckOptions::default()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape matches length")
}

/// Values drawn from `[lo, hi)` but kept `margin` away from each kink.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64]) -> Tensor {
    let margin = 1e-2;
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < margin {
                *v = if *v < k { k - margin } else { k + margin };
            }
        }
    }
    t
}

fn chw(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [rng.random_range(1..4), rng.random_range(2..7), rng.random_range(2..7)]
}

/// `Σ out ⊙ w` with a fixed random `w`, so gradients stay of order one.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var, TrainError> {
    let w = tape.constant(w.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn projection_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

// Same-signed weights keep whole-network gradients clear of cancellation.
fn positive_projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 0.5, 1.0)
}

fn unary(
    rng: &mut ChaCha8Rng,
    input: Tensor,
    op: impl Fn(&mut Tape, Var) -> Result<Var, TrainError>,
) -> Result<f64, TrainError> {
    let mut probe = Tape::new();
    let x = probe.constant(input.clone());
    let out = op(&mut probe, x)?;
    let out_shape = probe.shape(out).to_vec();
    let w = projection_for(rng, &out_shape);
    let o = opts(rng);
    grad_check(
        |tape: &mut Tape, v: &[Var]| {
            let y = op(tape, v[0])?;
            project(tape, y, &w)
        },
        &[input],
        &o,
    )
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Tensor,
    b: Tensor,
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var, TrainError>,
) -> Result<f64, TrainError> {
    let mut probe = Tape::new();
    let (x, y) = (probe.constant(a.clone()), probe.constant(b.clone()));
    let out = op(&mut probe, x, y)?;
    let out_shape = probe.shape(out).to_vec();
    let w = projection_for(rng, &out_shape);
    let o = opts(rng);
    grad_check(
        |tape: &mut Tape, v: &[Var]| {
            let z = op(tape, v[0], v[1])?;
            project(tape, z, &w)
        },
        &[a, b],
        &o,
    )
}

fn check_conv2d(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let c_in = rng.random_range(1..4);
    let c_out = rng.random_range(1..4);
    let k = [1, 3, 4][rng.random_range(0..3)];
    let stride = rng.random_range(1..3);
    let padding = rng.random_range(0..2);
    let side = rng.random_range(k.max(3)..9);
    let input = uniform(rng, &[c_in, side, side], -1.0, 1.0);
    let kernel = uniform(rng, &[c_out, c_in, k, k], -1.0, 1.0);
    let bias = uniform(rng, &[c_out], -1.0, 1.0);
    let mut probe = Tape::new();
    let (x, kv, bv) = (
        probe.constant(input.clone()),
        probe.constant(kernel.clone()),
        probe.constant(bias.clone()),
    );
    let out = probe.conv2d(x, kv, bv, stride, padding)?;
    let w = projection_for(rng, &probe.shape(out).to_vec());
    let o = opts(rng);
    grad_check(
        |tape: &mut Tape, v: &[Var]| {
            let y = tape.conv2d(v[0], v[1], v[2], stride, padding)?;
            project(tape, y, &w)
        },
        &[input, kernel, bias],
        &o,
    )
}

fn check_upsample(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = uniform(rng, &s, -1.0, 1.0);
    unary(rng, x, |t, v| Ok(t.upsample_nearest2x(v)?))
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = away_from(rng, &s, -2.0, 2.0, &[0.0]);
    unary(rng, x, |t, v| Ok(t.relu(v)))
}

fn check_leaky(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = away_from(rng, &s, -2.0, 2.0, &[0.0]);
    let alpha = rng.random_range(0.01..0.5);
    unary(rng, x, move |t, v| Ok(t.leaky_relu(v, alpha)))
}

fn check_sigmoid(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = uniform(rng, &s, -4.0, 4.0);
    unary(rng, x, |t, v| Ok(t.sigmoid(v)))
}

fn check_concat(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let [c, h, w] = chw(rng);
    let a = uniform(rng, &[c, h, w], -1.0, 1.0);
    let c2 = rng.random_range(1..4);
    let b = uniform(rng, &[c2, h, w], -1.0, 1.0);
    binary(rng, a, b, |t, x, y| Ok(t.concat_channels(x, y)?))
}

fn check_sum(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = uniform(rng, &s, -1.0, 1.0);
    unary(rng, x, |t, v| Ok(t.sum(v)))
}

fn check_mean(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = uniform(rng, &s, -1.0, 1.0);
    unary(rng, x, |t, v| Ok(t.mean(v)))
}

fn pair(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let s = chw(rng);
    (uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0))
}

fn check_add(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (a, b) = pair(rng);
    binary(rng, a, b, |t, x, y| Ok(t.add(x, y)?))
}

fn check_sub(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (a, b) = pair(rng);
    binary(rng, a, b, |t, x, y| Ok(t.sub(x, y)?))
}

fn check_mul(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (a, b) = pair(rng);
    binary(rng, a, b, |t, x, y| Ok(t.mul(x, y)?))
}

fn check_add_scalar(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = uniform(rng, &s, -1.0, 1.0);
    let c = rng.random_range(-2.0..2.0);
    unary(rng, x, move |t, v| Ok(t.add_scalar(v, c)))
}

fn check_mul_scalar(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = uniform(rng, &s, -1.0, 1.0);
    let c = rng.random_range(-2.0..2.0);
    unary(rng, x, move |t, v| Ok(t.mul_scalar(v, c)))
}

fn check_square(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = uniform(rng, &s, -2.0, 2.0);
    unary(rng, x, |t, v| Ok(t.square(v)))
}

fn check_log(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = uniform(rng, &s, 0.1, 2.0);
    unary(rng, x, |t, v| Ok(t.log(v)?))
}

fn check_clamp(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = away_from(rng, &s, -0.5, 1.5, &[0.0, 1.0]);
    unary(rng, x, |t, v| Ok(t.clamp(v, 0.0, 1.0)?))
}

/// Probability map strictly inside the clamp range, plus a random mask.
fn probs_and_mask(rng: &mut ChaCha8Rng, density: f64) -> (Tensor, Mask) {
    let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
    let probs = uniform(rng, &[1, h, w], 0.02, 0.98);
    let mut mask = Mask::from_fn(h, w, |_, _| false);
    for r in 0..h {
        for c in 0..w {
            mask.set(r, c, rng.random_bool(density));
        }
    }
    if mask.area() == 0 {
        mask.set(0, 0, true);
    }
    (probs, mask)
}

fn check_partial_ce(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (p, m) = probs_and_mask(rng, 0.3);
    let weak = WeakMask::new(m);
    let o = opts(rng);
    grad_check(
        |t: &mut Tape, v: &[Var]| Ok(losses::partial_cross_entropy(t, v[0], &weak)?),
        &[p],
        &o,
    )
}

fn check_weak_ce(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (p, m) = probs_and_mask(rng, 0.3);
    let weak = WeakMask::new(m);
    let o = opts(rng);
    grad_check(
        |t: &mut Tape, v: &[Var]| Ok(losses::weak_cross_entropy(t, v[0], &weak)?),
        &[p],
        &o,
    )
}

fn check_bce(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (p, m) = probs_and_mask(rng, 0.5);
    let o = opts(rng);
    grad_check(
        |t: &mut Tape, v: &[Var]| Ok(losses::binary_cross_entropy(t, v[0], &m)?),
        &[p],
        &o,
    )
}

/// Bounds placed so the soft size falls below, inside or above them.
fn bounds_around(rng: &mut ChaCha8Rng, size: f64) -> SizeBounds {
    let width = rng.random_range(1.0..5.0);
    let lower = match rng.random_range(0..3) {
        0 => size + rng.random_range(0.5..3.0),
        1 => size - width / 2.0,
        _ => size - width - rng.random_range(0.5..3.0),
    };
    let lower = lower.max(0.0);
    SizeBounds::new(lower, lower + width).expect("ordered bounds")
}

fn check_size_penalty(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (p, _) = probs_and_mask(rng, 0.5);
    let bounds = bounds_around(rng, p.data().iter().sum());
    let o = opts(rng);
    grad_check(
        |t: &mut Tape, v: &[Var]| {
            let s = losses::soft_size(t, v[0]);
            Ok(losses::size_penalty(t, s, &bounds))
        },
        &[p],
        &o,
    )
}

fn check_sccl(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (p, m) = probs_and_mask(rng, 0.3);
    let weak = WeakMask::new(m);
    let bounds = bounds_around(rng, p.data().iter().sum());
    let lambda = rng.random_range(0.01..1.0);
    let o = opts(rng);
    grad_check(
        |t: &mut Tape, v: &[Var]| Ok(losses::sccl_objective(t, v[0], &weak, &bounds, lambda)?),
        &[p],
        &o,
    )
}

fn check_disc_objective(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let fake = uniform(rng, &s, -1.0, 2.0);
    let real = uniform(rng, &s, -1.0, 2.0);
    let o = opts(rng);
    grad_check(
        |t: &mut Tape, v: &[Var]| Ok(losses::discriminator_objective(t, v[0], v[1])?),
        &[fake, real],
        &o,
    )
}

fn tiny_net(rng: &mut ChaCha8Rng) -> NetConfig {
    NetConfig {
        unet_depth: 2,
        base_channels: 4,
        disc_layers: rng.random_range(2..4),
        image_side: 8,
        init_seed: rng.random(),
    }
}

fn check_generator_objective(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let (p, m) = probs_and_mask(rng, 0.3);
    let weak = WeakMask::new(m);
    let s = chw(rng);
    let response = uniform(rng, &s, -1.0, 2.0);
    let lambda = rng.random_range(0.01..1.0);
    let o = opts(rng);
    grad_check(
        |t: &mut Tape, v: &[Var]| Ok(losses::generator_objective(t, v[0], &weak, v[1], lambda)?),
        &[p, response],
        &o,
    )
}

fn check_accl_generator(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let s = chw(rng);
    let x = uniform(rng, &s, -1.0, 2.0);
    unary(rng, x, |t, v| Ok(losses::accl_generator_loss(t, v)))
}

/// Checks `f` over network parameters drawn at a kink-free generic point.
fn net_check(
    rng: &mut ChaCha8Rng,
    names: &[String],
    tensors: &[Tensor],
    extra: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, TrainError>,
) -> Result<f64, TrainError> {
    let mut params = generic_away_from_kinks(rng, names, tensors, |p| {
        let mut t = Tape::new();
        let vars: Vec<Var> = p.iter().chain(&extra).map(|x| t.param(x)).collect();
        f(&mut t, &vars)?;
        Ok(t.kink_margin())
    })?;
    params.extend(extra);
    let o = opts(rng);
    grad_check(f, &params, &o)
}

fn check_unet(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let net = UNetLite::new(tiny_net(rng))?;
    let image = uniform(rng, &[1, 8, 8], 0.0, 1.0);
    let w = positive_projection(rng, &[1, 8, 8]);
    let p = net.params();
    net_check(rng, p.names(), p.tensors(), vec![], |t, v| {
        let x = t.constant(image.clone());
        let y = net.forward(t, &Bound::from_vars(v.to_vec()), x)?;
        project(t, y, &w)
    })
}

fn check_disc_forward(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let disc = PatchDiscriminator::new(tiny_net(rng))?;
    let image = uniform(rng, &[1, 8, 8], 0.0, 1.0);
    let mask = uniform(rng, &[1, 8, 8], 0.0, 1.0);
    let side = disc.response_side();
    let w = positive_projection(rng, &[1, side, side]);
    let p = disc.params();
    net_check(rng, p.names(), p.tensors(), vec![mask], |t, v| {
        let (weights, m) = v.split_at(v.len() - 1);
        let x = t.constant(image.clone());
        let r = disc.forward(t, &Bound::from_vars(weights.to_vec()), x, m[0])?;
        project(t, r, &w)
    })
}

fn weak_8x8(rng: &mut ChaCha8Rng) -> WeakMask {
    let (_, m) = probs_and_mask(rng, 0.3);
    WeakMask::new(Mask::from_fn(8, 8, |r, c| m.get(r % m.height(), c % m.width())))
}

fn check_sccl_composed(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let net = UNetLite::new(tiny_net(rng))?;
    let image = uniform(rng, &[1, 8, 8], 0.0, 1.0);
    let weak = weak_8x8(rng);
    let lambda = rng.random_range(0.01..1.0);
    let forward = |t: &mut Tape, v: &[Var]| -> Result<Var, TrainError> {
        let x = t.constant(image.clone());
        Ok(net.forward(t, &Bound::from_vars(v.to_vec()), x)?)
    };
    let p = net.params();
    let params = generic_away_from_kinks(rng, p.names(), p.tensors(), |p| {
        let mut t = Tape::new();
        let vars: Vec<Var> = p.iter().map(|x| t.param(x)).collect();
        forward(&mut t, &vars)?;
        Ok(t.kink_margin())
    })?;
    let mut t = Tape::new();
    let vars: Vec<Var> = params.iter().map(|x| t.param(x)).collect();
    let y = forward(&mut t, &vars)?;
    let bounds = bounds_around(rng, t.value(y).data().iter().sum());
    let o = opts(rng);
    grad_check(
        |t: &mut Tape, v: &[Var]| {
            let y = forward(t, v)?;
            Ok(losses::sccl_objective(t, y, &weak, &bounds, lambda)?)
        },
        &params,
        &o,
    )
}

fn check_generator_composed(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let cfg = tiny_net(rng);
    let net = UNetLite::new(cfg)?;
    let disc = PatchDiscriminator::new(cfg)?;
    let d_params = disc.params().tensors().to_vec();
    let image = uniform(rng, &[1, 8, 8], 0.0, 1.0);
    let weak = weak_8x8(rng);
    let lambda = rng.random_range(0.01..1.0);
    let p = net.params();
    net_check(rng, p.names(), p.tensors(), vec![], |t, v| {
        let x = t.constant(image.clone());
        let y = net.forward(t, &Bound::from_vars(v.to_vec()), x)?;
        let d = Bound::from_vars(d_params.iter().map(|p| t.constant(p.clone())).collect());
        let r = disc.forward(t, &d, x, y)?;
        Ok(losses::generator_objective(t, y, &weak, r, lambda)?)
    })
}

fn check_disc_composed(rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let disc = PatchDiscriminator::new(tiny_net(rng))?;
    let image = uniform(rng, &[1, 8, 8], 0.0, 1.0);
    let fake = uniform(rng, &[1, 8, 8], 0.02, 0.98);
    let real = Mask::from_fn(8, 8, |r, c| (2..6).contains(&r) && (1..5).contains(&c)).to_tensor();
    let p = disc.params();
    net_check(rng, p.names(), p.tensors(), vec![], |t, v| {
        let b = Bound::from_vars(v.to_vec());
        let x = t.constant(image.clone());
        let f = t.constant(fake.clone());
        let m = t.constant(real.clone());
        let rf = disc.forward(t, &b, x, f)?;
        let rr = disc.forward(t, &b, x, m)?;
        Ok(losses::discriminator_objective(t, rf, rr)?)
    })
}

/// Smallest ReLU input margin accepted for network instances; much larger
/// than any pre-activation change a step of `h` can cause.
const KINK_MARGIN: f64 = 1e-4;

/// Redraws generic parameters until `margin(params)` clears [`KINK_MARGIN`].
fn generic_away_from_kinks(
    rng: &mut ChaCha8Rng,
    names: &[String],
    tensors: &[Tensor],
    margin: impl Fn(&[Tensor]) -> Result<f64, TrainError>,
) -> Result<Vec<Tensor>, TrainError> {
    loop {
        let params = generic(rng, names, tensors);
        if margin(&params)? > KINK_MARGIN {
            return Ok(params);
        }
    }
}

/// Network parameters at a generic point. Nonnegative weights with unit mean
/// gain and positive biases keep every activation positive, so gradients do
/// not cancel down to the finite-difference noise floor (about one ulp of the
/// loss over `h`). The inactive ReLU branch is covered by the per-op checks.
fn generic(rng: &mut ChaCha8Rng, names: &[String], tensors: &[Tensor]) -> Vec<Tensor> {
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| {
            if n.ends_with(".bias") {
                uniform(rng, t.shape(), 0.0, 0.1)
            } else {
                let fan_in: usize = t.shape()[1..].iter().product();
                uniform(rng, t.shape(), 0.0, 2.0 / fan_in as f64)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let reports = run_suite(DEFAULT_INSTANCES, 7).unwrap();
        assert_eq!(reports.len(), OPS.len());
        for r in &reports {
            assert!(r.instances >= DEFAULT_INSTANCES, "{}", r.op);
            assert!(r.passed(), "{} max error {:e}", r.op, r.max_error);
        }
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_suite(2, 3).unwrap();
        let b = run_suite(2, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_error.to_bits(), y.max_error.to_bits());
        }
    }
}
