//! End-to-end training of one model variant.

pub mod checkpoint;

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::{evaluate, EvalError};
use crate::exec::Exec;
use crate::losses::{self, LossError, SizeBounds};
use crate::nets::{NetConfig, NetError, PatchDiscriminator, UNetLite};
use crate::optim::{lr_at_epoch, AdamState, OptimError};
use crate::synthdata::{AugmentParams, PoolMode, ReferenceMaskPool, SegSample};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    WeakCe,
    PartialCe,
    Sccl,
    AcclPartial,
    AcclUnpaired,
    AcclPaired,
    FsCe,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::WeakCe,
        Variant::PartialCe,
        Variant::Sccl,
        Variant::AcclPartial,
        Variant::AcclUnpaired,
        Variant::AcclPaired,
        Variant::FsCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::WeakCe => "weak_ce",
            Variant::PartialCe => "partial_ce",
            Variant::Sccl => "sccl",
            Variant::AcclPartial => "accl_partial",
            Variant::AcclUnpaired => "accl_unpaired",
            Variant::AcclPaired => "accl_paired",
            Variant::FsCe => "fs_ce",
        }
    }

    /// Reference-pool mode of the adversarial variants.
    pub fn pool_mode(self) -> Option<PoolMode> {
        match self {
            Variant::AcclPartial => Some(PoolMode::Partial),
            Variant::AcclUnpaired => Some(PoolMode::Unpaired),
            Variant::AcclPaired => Some(PoolMode::Paired),
            _ => None,
        }
    }

    pub fn is_adversarial(self) -> bool {
        self.pool_mode().is_some()
    }

    pub fn default_lambda_a(self) -> f64 {
        match self {
            Variant::AcclPartial => 1e-3,
            Variant::AcclUnpaired | Variant::AcclPaired => 5e-2,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant `{s}` ({})", names.join("|"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Seeds {
    pub init: u64,
    pub data_order: u64,
    pub pool_shuffle: u64,
    pub augmentation: u64,
}

impl Seeds {
    /// All four seeds derived from one run seed.
    pub fn from_run_seed(seed: u64) -> Self {
        Self {
            init: seed,
            data_order: seed.wrapping_add(1),
            pool_shuffle: seed.wrapping_add(2),
            augmentation: seed.wrapping_add(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub lr0: f64,
    pub lambda_s: f64,
    pub lambda_a: f64,
    pub bounds: Option<SizeBounds>,
    pub net: NetConfig,
    pub seeds: Seeds,
    /// Augment reference masks before they reach the discriminator.
    pub augment: bool,
    /// Test Dice is computed on epochs divisible by this and on the last epoch.
    pub eval_every: usize,
    /// Discriminator updates per generator update.
    pub disc_steps: usize,
    /// Record elapsed seconds per epoch; off keeps metrics byte-reproducible.
    pub wall_clock: bool,
}

impl TrainConfig {
    pub fn new(variant: Variant, net: NetConfig) -> Self {
        Self {
            variant,
            epochs: 60,
            lr0: 2e-4,
            lambda_s: 0.01,
            lambda_a: variant.default_lambda_a(),
            bounds: None,
            net,
            seeds: Seeds::default(),
            augment: variant.pool_mode().is_some_and(|m| m != PoolMode::Paired),
            eval_every: 1,
            disc_steps: 1,
            wall_clock: false,
        }
    }

    pub fn validate(&self, pool: Option<&ReferenceMaskPool>) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad(format!("lr0 = {} must be finite and non-negative", self.lr0));
        }
        for (name, v) in [("lambda_s", self.lambda_s), ("lambda_a", self.lambda_a)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.disc_steps == 0 {
            return bad("disc_steps must be at least 1".into());
        }
        if self.variant == Variant::Sccl && self.bounds.is_none() {
            return bad("sccl requires size bounds".into());
        }
        if let Some(mode) = self.variant.pool_mode() {
            match pool {
                None => return bad(format!("{} requires a {mode} reference pool", self.variant)),
                Some(p) if p.mode() != mode => {
                    return bad(format!(
                        "{} requires a {mode} reference pool, got {}",
                        self.variant,
                        p.mode()
                    ))
                }
                _ => {}
            }
        }
        self.net
            .validate()
            .and_then(|_| {
                if self.variant.is_adversarial() {
                    self.net.validate_disc()
                } else {
                    Ok(())
                }
            })
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, sample {sample}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        sample: usize,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean generator objective over the epoch's samples.
    pub g_loss: f64,
    /// Mean discriminator objective; `None` for non-adversarial variants.
    pub d_loss: Option<f64>,
    /// Mean test Dice, present on evaluation epochs.
    pub dice: Option<f64>,
    /// Mean soft size of the generator's training outputs.
    pub soft_size: f64,
    pub lr: f64,
    pub seconds: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,g_loss,d_loss,dice,soft_size,lr,seconds";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.g_loss,
            opt(r.d_loss),
            opt(r.dice),
            r.soft_size,
            r.lr,
            opt(r.seconds)
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: UNetLite,
    pub discriminator: Option<PatchDiscriminator>,
    pub metrics: Vec<MetricsRecord>,
}

/// What one generator step produced.
struct StepLog {
    g_loss: f64,
    d_loss: Option<f64>,
    soft_size: f64,
}

struct Adversary<'a> {
    net: PatchDiscriminator,
    adam: AdamState,
    pool: &'a ReferenceMaskPool,
    aug_rng: ChaCha8Rng,
}

fn copy_grads(params: &mut [Tensor], vars: &[Var], grads: &Gradients) {
    for (p, &v) in params.iter_mut().zip(vars) {
        p.clear_grad();
        grads.accumulate_into(v, p);
    }
}

fn non_finite(what: &'static str, epoch: usize, sample: usize) -> TrainError {
    TrainError::NonFinite {
        what,
        epoch,
        sample,
    }
}

struct Run<'a> {
    config: &'a TrainConfig,
    model: UNetLite,
    adam: AdamState,
    adversary: Option<Adversary<'a>>,
}

impl Run<'_> {
    fn step(&mut self, position: usize, sample: &SegSample, epoch: usize, lr: f64) -> Result<StepLog, TrainError> {
        let cfg = self.config;
        let mut tape = Tape::new();
        let x = tape.constant(sample.image.clone());
        let g_vars = self.model.bind(&mut tape, true);
        let probs = self.model.forward(&mut tape, &g_vars, x)?;

        let mut d_loss = None;
        let g_loss = match cfg.variant {
            Variant::WeakCe => losses::weak_cross_entropy(&mut tape, probs, &sample.weak)?,
            Variant::PartialCe => losses::partial_cross_entropy(&mut tape, probs, &sample.weak)?,
            Variant::FsCe => losses::binary_cross_entropy(&mut tape, probs, &sample.full)?,
            Variant::Sccl => {
                let bounds = cfg.bounds.as_ref().expect("validated");
                losses::sccl_objective(&mut tape, probs, &sample.weak, bounds, cfg.lambda_s)?
            }
            Variant::AcclPartial | Variant::AcclUnpaired | Variant::AcclPaired => {
                let adv = self.adversary.as_mut().expect("validated");
                // The D step sees a detached copy of G(X), so its loss cannot reach θ_s.
                let fake = tape.value(probs).detached();
                let reference = adv.pool.mask_for(position);
                let reference = if cfg.augment {
                    AugmentParams::draw(reference, &mut adv.aug_rng).apply(reference)
                } else {
                    reference.clone()
                };
                let real = reference.to_tensor();
                let mut total = 0.0;
                for _ in 0..cfg.disc_steps {
                    let mut dtape = Tape::new();
                    let d_vars = adv.net.bind(&mut dtape, true);
                    let xi = dtape.constant(sample.image.clone());
                    let fk = dtape.constant(fake.clone());
                    let rl = dtape.constant(real.clone());
                    let rf = adv.net.forward(&mut dtape, &d_vars, xi, fk)?;
                    let rr = adv.net.forward(&mut dtape, &d_vars, xi, rl)?;
                    let dl = losses::discriminator_objective(&mut dtape, rf, rr)?;
                    let value = dtape.value(dl).item();
                    if !value.is_finite() {
                        return Err(non_finite("discriminator loss", epoch, sample.id));
                    }
                    total += value;
                    let grads = dtape.backward(dl)?;
                    let params = adv.net.params_mut().tensors_mut();
                    copy_grads(params, d_vars.vars(), &grads);
                    adv.adam
                        .step(params, lr)
                        .map_err(|_| non_finite("discriminator gradient", epoch, sample.id))?;
                }
                d_loss = Some(total / cfg.disc_steps as f64);

                let d_consts = adv.net.bind(&mut tape, false);
                let response = adv.net.forward(&mut tape, &d_consts, x, probs)?;
                losses::generator_objective(&mut tape, probs, &sample.weak, response, cfg.lambda_a)?
            }
        };

        let g_value = tape.value(g_loss).item();
        if !g_value.is_finite() {
            return Err(non_finite("generator loss", epoch, sample.id));
        }
        let soft_size = tape.value(probs).data().iter().sum();
        let grads = tape.backward(g_loss)?;
        let params = self.model.params_mut().tensors_mut();
        copy_grads(params, g_vars.vars(), &grads);
        self.adam
            .step(params, lr)
            .map_err(|_| non_finite("generator gradient", epoch, sample.id))?;
        Ok(StepLog {
            g_loss: g_value,
            d_loss,
            soft_size,
        })
    }
}

/// Trains `config.variant` on `train` and reports test Dice on `test`.
pub fn train_variant(
    config: &TrainConfig,
    train: &[SegSample],
    test: &[SegSample],
    pool: Option<&ReferenceMaskPool>,
) -> Result<TrainOutcome, TrainError> {
    config.validate(pool)?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if let Some(p) = pool {
        if p.len() != train.len() && config.variant.is_adversarial() {
            return Err(TrainError::Config(format!(
                "reference pool has {} masks for {} training samples",
                p.len(),
                train.len()
            )));
        }
    }
    let net = NetConfig {
        init_seed: config.seeds.init,
        ..config.net
    };
    let model = UNetLite::new(net)?;
    let adam = AdamState::new(model.params().tensors());
    let adversary = match (config.variant.is_adversarial(), pool) {
        (true, Some(pool)) => {
            let d = PatchDiscriminator::new(net)?;
            let adam = AdamState::new(d.params().tensors());
            Some(Adversary {
                net: d,
                adam,
                pool,
                aug_rng: ChaCha8Rng::seed_from_u64(config.seeds.augmentation),
            })
        }
        _ => None,
    };
    let mut run = Run {
        config,
        model,
        adam,
        adversary,
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seeds.data_order);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(epoch, config.epochs, config.lr0)?;
        order.shuffle(&mut order_rng);
        let (mut g_sum, mut d_sum, mut size_sum) = (0.0, 0.0, 0.0);
        for &position in &order {
            let log = run.step(position, &train[position], epoch, lr)?;
            g_sum += log.g_loss;
            d_sum += log.d_loss.unwrap_or(0.0);
            size_sum += log.soft_size;
        }
        let n = train.len() as f64;
        let evaluate_now = epoch % config.eval_every == 0 || epoch == config.epochs;
        let dice = if evaluate_now && !test.is_empty() {
            Some(evaluate(&run.model, test, Exec::Sequential)?.mean_dice)
        } else {
            None
        };
        metrics.push(MetricsRecord {
            epoch,
            g_loss: g_sum / n,
            d_loss: config.variant.is_adversarial().then_some(d_sum / n),
            dice,
            soft_size: size_sum / n,
            lr,
            seconds: config.wall_clock.then(|| started.elapsed().as_secs_f64()),
        });
    }
    Ok(TrainOutcome {
        model: run.model,
        discriminator: run.adversary.map(|a| a.net),
        metrics,
    })
}
