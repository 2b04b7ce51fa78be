use super::conv::{self, ConvGeometry};
use super::{Tensor, TensorError, LOG_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

    pub fn leaky() -> Self {
        Activation::LeakyRelu(Self::DEFAULT_LEAKY_SLOPE)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

/// Logistic function, kept strictly inside `(0, 1)` for every finite input.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    Upsample2x {
        input: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddScalar {
        input: Var,
    },
    MulScalar {
        input: Var,
        factor: f64,
    },
    Square {
        input: Var,
    },
    Log {
        input: Var,
    },
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed operations. One backward pass per recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints of the tracked leaves of a tape after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` was unreachable.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.adjoints[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("adjoint matches shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Raw adjoint slice, `None` when `var` was unreachable.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.adjoints[var.0].as_deref()
    }

    /// Adds the gradient for `var` into `param`'s buffer (zero-filled if unreachable).
    pub fn accumulate_into(&self, var: Var, param: &mut Tensor) {
        match self.get(var) {
            Some(g) => param.accumulate_grad(g),
            None => {
                if param.grad().is_none() {
                    param.zero_grad();
                }
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the record so the tape can be reused for a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// Records a constant; backward never produces a gradient for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, false)
    }

    /// Records a differentiable leaf holding a copy of `value`.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, true)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (c_in, h, w) = self.value(input).chw().ok_or_else(|| TensorError::Shape {
            op: "conv2d",
            expected: vec![0, 0, 0],
            got: self.shape(input).to_vec(),
        })?;
        let kshape = self.shape(kernel).to_vec();
        let [c_out, kc, k, k2] = kshape[..] else {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!("kernel must be rank 4, got {kshape:?}"),
            });
        };
        if kc != c_in {
            return Err(TensorError::Shape {
                op: "conv2d",
                expected: vec![c_out, c_in, k, k2],
                got: kshape,
            });
        }
        if k != k2 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!("kernel must be square, got {k}×{k2}"),
            });
        }
        if self.shape(bias) != [c_out] {
            return Err(TensorError::Shape {
                op: "conv2d",
                expected: vec![c_out],
                got: self.shape(bias).to_vec(),
            });
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!(
                    "stride {stride}, padding {padding}, kernel {k} do not fit a {h}×{w} input"
                ),
            });
        }
        let geometry = ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
        };
        let cols = conv::im2col(self.value(input).data(), &geometry);
        let out = conv::forward(
            &cols,
            self.value(kernel).data(),
            self.value(bias).data(),
            &geometry,
        );
        let value = Tensor::new(vec![c_out, geometry.out_h(), geometry.out_w()], out)?;
        let tracked = self.tracked(input) || self.tracked(kernel) || self.tracked(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
                cols,
            },
            tracked,
        ))
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.value(input).chw().ok_or_else(|| TensorError::Shape {
            op: "upsample_nearest2x",
            expected: vec![0, 0, 0],
            got: self.shape(input).to_vec(),
        })?;
        let src = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                let src_row = &src[(ci * h + y / 2) * w..(ci * h + y / 2 + 1) * w];
                let dst_row = &mut out[(ci * oh + y) * ow..(ci * oh + y + 1) * ow];
                for (x, d) in dst_row.iter_mut().enumerate() {
                    *d = src_row[x / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        let tracked = self.tracked(input);
        Ok(self.push(value, Op::Upsample2x { input }, tracked))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&x| kind.apply(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(input);
        self.push(value, Op::Activation { input, kind }, tracked)
    }

    /// Smallest `|x|` fed to a ReLU or leaky ReLU so far; finite differences
    /// with a step below this never straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Activation {
                    input,
                    kind: Activation::Relu | Activation::LeakyRelu(_),
                } => Some(input),
                _ => None,
            })
            .flat_map(|input| self.nodes[input.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: f64) -> Var {
        self.activation(input, Activation::LeakyRelu(alpha))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.value(a).chw();
        let sb = self.value(b).chw();
        let (Some((ca, ha, wa)), Some((cb, hb, wb))) = (sa, sb) else {
            return Err(TensorError::InvalidArgument {
                op: "concat_channels",
                detail: "both inputs must be rank 3".into(),
            });
        };
        if (ha, wa) != (hb, wb) {
            return Err(TensorError::Shape {
                op: "concat_channels",
                expected: vec![cb, ha, wa],
                got: vec![cb, hb, wb],
            });
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Concat { a, b }, tracked))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum::<f64>();
        let tracked = self.tracked(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, tracked)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let total = src.data().iter().sum::<f64>() / src.numel() as f64;
        let tracked = self.tracked(input);
        self.push(Tensor::scalar(total), Op::Mean { input }, tracked)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: name,
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add { a, b }, tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub { a, b }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul { a, b }, tracked))
    }

    fn unary(&self, input: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(input);
        let data = src.data().iter().map(|&x| f(x)).collect();
        Tensor::new(src.shape().to_vec(), data).expect("same shape")
    }

    pub fn add_scalar(&mut self, input: Var, value: f64) -> Var {
        let out = self.unary(input, |x| x + value);
        let tracked = self.tracked(input);
        self.push(out, Op::AddScalar { input }, tracked)
    }

    pub fn mul_scalar(&mut self, input: Var, factor: f64) -> Var {
        let out = self.unary(input, |x| x * factor);
        let tracked = self.tracked(input);
        self.push(out, Op::MulScalar { input, factor }, tracked)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let out = self.unary(input, |x| x * x);
        let tracked = self.tracked(input);
        self.push(out, Op::Square { input }, tracked)
    }

    /// Natural log; every input must already be at least [`LOG_EPS`].
    pub fn log(&mut self, input: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self
            .value(input)
            .data()
            .iter()
            .find(|&&x| !(x >= LOG_EPS))
        {
            return Err(TensorError::LogDomain { value: bad });
        }
        let out = self.unary(input, f64::ln);
        let tracked = self.tracked(input);
        Ok(self.push(out, Op::Log { input }, tracked))
    }

    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        if !(lo <= hi) {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                detail: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let out = self.unary(input, |x| x.clamp(lo, hi));
        let tracked = self.tracked(input);
        Ok(self.push(out, Op::Clamp { input, lo, hi }, tracked))
    }

    /// Reverse pass from a scalar `loss`. Consumes the recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].tracked {
            adj[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.tracked {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (slot, node) in adj.iter_mut().zip(&self.nodes) {
            if !(matches!(node.op, Op::Leaf) && node.tracked) {
                *slot = None;
            }
        }
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let tracked = |v: Var| nodes[v.0].tracked;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
                cols,
            } => {
                let need = (tracked(*input), tracked(*kernel), tracked(*bias));
                let (di, dk, db) = conv::backward(g, cols, val(*kernel), geometry, need);
                if let Some(d) = di {
                    add_into(&mut adj[input.0], d);
                }
                if let Some(d) = dk {
                    add_into(&mut adj[kernel.0], d);
                }
                if let Some(d) = db {
                    add_into(&mut adj[bias.0], d);
                }
            }
            Op::Upsample2x { input } => {
                let (c, h, w) = nodes[input.0].value.chw().expect("rank 3");
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..oh {
                        let src = &g[(ci * oh + y) * ow..(ci * oh + y + 1) * ow];
                        let dst = &mut d[(ci * h + y / 2) * w..(ci * h + y / 2 + 1) * w];
                        for (x, gv) in src.iter().enumerate() {
                            dst[x / 2] += gv;
                        }
                    }
                }
                add_into(&mut adj[input.0], d);
            }
            Op::Activation { input, kind } => {
                let x = val(*input);
                let d: Vec<f64> = match kind {
                    Activation::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Activation::LeakyRelu(alpha) => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { alpha * g })
                        .collect(),
                    Activation::Sigmoid => nodes[i]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| g * y * (1.0 - y))
                        .collect(),
                };
                add_into(&mut adj[input.0], d);
            }
            Op::Concat { a, b } => {
                let na = nodes[a.0].value.numel();
                if tracked(*a) {
                    add_into(&mut adj[a.0], g[..na].to_vec());
                }
                if tracked(*b) {
                    add_into(&mut adj[b.0], g[na..].to_vec());
                }
            }
            Op::Sum { input } => {
                let n = nodes[input.0].value.numel();
                add_into(&mut adj[input.0], vec![g[0]; n]);
            }
            Op::Mean { input } => {
                let n = nodes[input.0].value.numel();
                add_into(&mut adj[input.0], vec![g[0] / n as f64; n]);
            }
            Op::Add { a, b } => {
                if tracked(*a) {
                    add_into(&mut adj[a.0], g.to_vec());
                }
                if tracked(*b) {
                    add_into(&mut adj[b.0], g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if tracked(*a) {
                    add_into(&mut adj[a.0], g.to_vec());
                }
                if tracked(*b) {
                    add_into(&mut adj[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                if tracked(*a) {
                    let d = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    add_into(&mut adj[a.0], d);
                }
                if tracked(*b) {
                    let d = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    add_into(&mut adj[b.0], d);
                }
            }
            Op::AddScalar { input } => add_into(&mut adj[input.0], g.to_vec()),
            Op::MulScalar { input, factor } => {
                add_into(&mut adj[input.0], g.iter().map(|v| v * factor).collect());
            }
            Op::Square { input } => {
                let d = g.iter().zip(val(*input)).map(|(g, x)| 2.0 * x * g).collect();
                add_into(&mut adj[input.0], d);
            }
            Op::Log { input } => {
                let d = g.iter().zip(val(*input)).map(|(g, x)| g / x).collect();
                add_into(&mut adj[input.0], d);
            }
            Op::Clamp { input, lo, hi } => {
                let d = g
                    .iter()
                    .zip(val(*input))
                    .map(|(&g, &x)| if x < *lo || x > *hi { 0.0 } else { g })
                    .collect();
                add_into(&mut adj[input.0], d);
            }
        }
    }
}
