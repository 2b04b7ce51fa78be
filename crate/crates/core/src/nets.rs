//! Segmentation generator (UNet-lite) and conditional patch discriminator.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("expected input of shape {expected:?}, got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetConfig {
    /// Number of stride-2 encoder stages.
    pub unet_depth: usize,
    pub base_channels: usize,
    pub disc_layers: usize,
    pub image_side: usize,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            unet_depth: 3,
            base_channels: 8,
            disc_layers: 3,
            image_side: 64,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.unet_depth < 2 {
            return Err(NetError::Config(format!(
                "unet depth must be at least 2, got {}",
                self.unet_depth
            )));
        }
        if self.base_channels < 4 {
            return Err(NetError::Config(format!(
                "base channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        if self.disc_layers < 2 {
            return Err(NetError::Config(format!(
                "discriminator needs at least 2 layers, got {}",
                self.disc_layers
            )));
        }
        let stride = 1usize << self.unet_depth;
        if self.image_side == 0 || self.image_side % stride != 0 {
            return Err(NetError::Config(format!(
                "image side {} is not divisible by 2^{} = {stride}",
                self.image_side, self.unet_depth
            )));
        }
        Ok(())
    }

    pub fn validate_disc(&self) -> Result<(), NetError> {
        self.validate()?;
        if self.image_side < (1usize << self.disc_layers) {
            return Err(NetError::Config(format!(
                "{} stride-2 discriminator layers collapse a {}-pixel image",
                self.disc_layers, self.image_side
            )));
        }
        Ok(())
    }

    fn unet_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvSpec {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl ConvSpec {
    fn same3(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            k: 3,
            stride: 1,
            padding: 1,
        }
    }

    fn fan_in(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Named, ordered parameter storage shared by both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn init(layers: &[(String, ConvSpec)], rng: &mut ChaCha8Rng) -> Self {
        let mut names = Vec::with_capacity(layers.len() * 2);
        let mut tensors = Vec::with_capacity(layers.len() * 2);
        for (name, spec) in layers {
            let bound = (1.0 / spec.fan_in() as f64).sqrt();
            let mut uniform = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            let w = uniform(spec.c_out * spec.fan_in());
            let b = uniform(spec.c_out);
            names.push(format!("{name}.weight"));
            tensors.push(
                Tensor::new(vec![spec.c_out, spec.c_in, spec.k, spec.k], w).expect("valid shape"),
            );
            names.push(format!("{name}.bias"));
            tensors.push(Tensor::new(vec![spec.c_out], b).expect("valid shape"));
        }
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        tape.param(t)
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Hash of every parameter bit pattern, for cheap change detection.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in &self.tensors {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Replaces values after checking names and shapes match exactly.
    pub(crate) fn replace(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<(), String> {
        if names != self.names.as_slice() {
            return Err(format!(
                "parameter names differ: expected {:?}, got {:?}",
                self.names, names
            ));
        }
        for ((name, have), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if have.shape() != new.shape() {
                return Err(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    have.shape(),
                    new.shape()
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`], in parameter order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps externally recorded leaves, e.g. the probe leaves of a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    fn conv(
        &self,
        tape: &mut Tape,
        input: Var,
        layer: usize,
        spec: &ConvSpec,
    ) -> Result<Var, TensorError> {
        tape.conv2d(
            input,
            self.0[2 * layer],
            self.0[2 * layer + 1],
            spec.stride,
            spec.padding,
        )
    }
}

fn check_image(tape: &Tape, image: Var, side: usize) -> Result<(), NetError> {
    let want = [1, side, side];
    if tape.shape(image) != want {
        return Err(NetError::InputShape {
            expected: want.to_vec(),
            got: tape.shape(image).to_vec(),
        });
    }
    Ok(())
}

/// Encoder/decoder generator with skip connections and a sigmoid head.
///
/// Per encoder level `i` (channels `base·2^i`): a 3×3 conv whose output is
/// kept as the skip, then a stride-2 3×3 conv. The decoder mirrors this with
/// nearest upsampling, a 3×3 conv, concatenation with the skip, and a fused
/// 3×3 conv. A 1×1 conv maps to one logit channel.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetLite {
    config: NetConfig,
    layers: Vec<(String, ConvSpec)>,
    params: ParamSet,
}

impl UNetLite {
    fn layer_table(config: &NetConfig) -> Vec<(String, ConvSpec)> {
        let depth = config.unet_depth;
        let mut layers = Vec::new();
        let mut c_in = 1;
        for i in 0..depth {
            let c = config.unet_channels(i);
            layers.push((format!("enc{i}"), ConvSpec::same3(c_in, c)));
            layers.push((
                format!("down{i}"),
                ConvSpec {
                    stride: 2,
                    ..ConvSpec::same3(c, c)
                },
            ));
            c_in = c;
        }
        layers.push((
            "bottleneck".into(),
            ConvSpec::same3(c_in, config.unet_channels(depth)),
        ));
        for i in (0..depth).rev() {
            let c = config.unet_channels(i);
            layers.push((
                format!("up{i}"),
                ConvSpec::same3(config.unet_channels(i + 1), c),
            ));
            layers.push((format!("dec{i}"), ConvSpec::same3(2 * c, c)));
        }
        layers.push((
            "head".into(),
            ConvSpec {
                c_in: config.base_channels,
                c_out: 1,
                k: 1,
                stride: 1,
                padding: 0,
            },
        ));
        layers
    }

    pub fn new(config: NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let layers = Self::layer_table(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let params = ParamSet::init(&layers, &mut rng);
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Foreground probability map `1×H×W` for a `1×H×W` image.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var, NetError> {
        check_image(tape, image, self.config.image_side)?;
        let depth = self.config.unet_depth;
        let mut layer = 0;
        let mut next = |tape: &mut Tape, x: Var| -> Result<Var, TensorError> {
            let out = bound.conv(tape, x, layer, &self.layers[layer].1);
            layer += 1;
            out
        };

        let mut skips = Vec::with_capacity(depth);
        let mut x = image;
        for _ in 0..depth {
            let e = next(tape, x)?;
            let e = tape.relu(e);
            skips.push(e);
            let d = next(tape, e)?;
            x = tape.relu(d);
        }
        let b = next(tape, x)?;
        x = tape.relu(b);
        for skip in skips.into_iter().rev() {
            let u = tape.upsample_nearest2x(x)?;
            let u = next(tape, u)?;
            let u = tape.relu(u);
            let cat = tape.concat_channels(u, skip)?;
            let d = next(tape, cat)?;
            x = tape.relu(d);
        }
        let logits = next(tape, x)?;
        Ok(tape.sigmoid(logits))
    }

    /// Binds parameters as trainable leaves and runs [`UNetLite::forward`].
    pub fn forward_seg(&self, tape: &mut Tape, image: Var) -> Result<(Var, Bound), NetError> {
        let bound = self.bind(tape, true);
        let probs = self.forward(tape, &bound, image)?;
        Ok((probs, bound))
    }

    /// Inference-only forward on a raw image tensor.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Strided leaky-relu conv stack over `image ∥ mask` with a linear 3×3 head.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDiscriminator {
    config: NetConfig,
    layers: Vec<(String, ConvSpec)>,
    params: ParamSet,
    receptive_field: usize,
}

/// Single-output receptive field of a stack of `(kernel, stride)` layers.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    let mut field = 1;
    let mut jump = 1;
    for &(k, s) in layers {
        field += (k - 1) * jump;
        jump *= s;
    }
    field
}

impl PatchDiscriminator {
    pub const KERNEL: usize = 4;
    pub const LEAKY_SLOPE: f64 = 0.2;

    fn layer_table(config: &NetConfig) -> Vec<(String, ConvSpec)> {
        let mut layers = Vec::new();
        let mut c_in = 2;
        for l in 0..config.disc_layers {
            let c = config.base_channels << l;
            layers.push((
                format!("disc{l}"),
                ConvSpec {
                    c_in,
                    c_out: c,
                    k: Self::KERNEL,
                    stride: 2,
                    padding: 1,
                },
            ));
            c_in = c;
        }
        layers.push(("disc_head".into(), ConvSpec::same3(c_in, 1)));
        layers
    }

    pub fn new(config: NetConfig) -> Result<Self, NetError> {
        config.validate_disc()?;
        let layers = Self::layer_table(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        rng.set_stream(1);
        let params = ParamSet::init(&layers, &mut rng);
        let geometry: Vec<(usize, usize)> = layers.iter().map(|(_, s)| (s.k, s.stride)).collect();
        Ok(Self {
            config,
            receptive_field: receptive_field(&geometry),
            layers,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Side `N` of the input patch seen by one response element.
    pub fn receptive_field(&self) -> usize {
        self.receptive_field
    }

    /// `(H_r, W_r)` of the response map.
    pub fn response_side(&self) -> usize {
        self.layers.iter().fold(self.config.image_side, |h, (_, s)| {
            (h + 2 * s.padding - s.k) / s.stride + 1
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: Var,
        mask: Var,
    ) -> Result<Var, NetError> {
        check_image(tape, image, self.config.image_side)?;
        check_image(tape, mask, self.config.image_side)?;
        let mut x = tape.concat_channels(image, mask)?;
        let last = self.layers.len() - 1;
        for (i, (_, spec)) in self.layers.iter().enumerate() {
            x = bound.conv(tape, x, i, spec)?;
            if i < last {
                x = tape.activation(x, Activation::LeakyRelu(Self::LEAKY_SLOPE));
            }
        }
        Ok(x)
    }
}
