//! Central finite-difference gradient checker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per tensor; smaller tensors are probed exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 32,
            seed: 0,
        }
    }
}

fn evaluate<F, E>(f: &F, params: &[Tensor]) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Maximum relative error between the tape's gradients of `f` and central
/// differences, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F, E>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut picked = rand::seq::index::sample(&mut rng, n, opts.coords_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        for i in coords {
            let original = probe[t].data()[i];
            probe[t].data_mut()[i] = original + opts.step;
            let plus = evaluate(&f, &probe)?;
            probe[t].data_mut()[i] = original - opts.step;
            let minus = evaluate(&f, &probe)?;
            probe[t].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let exact = grad.data()[i];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
