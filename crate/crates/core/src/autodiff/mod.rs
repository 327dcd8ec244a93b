//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! enough saved state to run the backward rule. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use metaseg::autodiff::Tape;
//! use metaseg::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```

pub mod gradcheck;
pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use kernels::{BilinearPlan, ConvGeom};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max2x2,
    GlobalAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics produced by a train-mode batch norm, for running-stat updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const L2_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, T),
    Abs(Var),
    Exp(Var),
    LeakyRelu(Var, T),
    Sum(Var),
    ScaleBy(Var, Var),
    ShiftBy(Var, Var),
    AddScaledIdentity(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    NegSqDist(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Replicate(Var),
    Bilinear {
        input: Var,
        plan: BilinearPlan,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    ConcatChannels(Var, Var),
    L2NormChannels {
        input: Var,
        norms: Vec<T>,
    },
    PixelRows(Var),
    RowsToMaps(Var),
    SpdSolve {
        a: Var,
        b: Var,
        chol: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a tracked variable. Leaves not on the loss path get zeros.
    ///
    /// Panics if `v` is a constant or an intermediate that never received a
    /// gradient; use [`try_get`](Self::try_get) for those.
    pub fn get(&self, v: Var) -> &Tensor<T> {
        self.try_get(v)
            .unwrap_or_else(|| panic!("no gradient recorded for {v:?}"))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Real>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn require_rank<T: Real>(what: &str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape(format!(
            "{what} expects rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn require_scalar<T: Real>(what: &str, t: &Tensor<T>) -> Result<()> {
    if t.len() != 1 {
        return Err(Error::Shape(format!(
            "{what} expects a one-element tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor that gradients should flow to.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Register a tensor that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if cfg!(debug_assertions) && !value.all_finite() {
            let finite_inputs = inputs.iter().all(|&v| self.value(v).all_finite());
            assert!(
                !finite_inputs,
                "non-finite output from {} with finite inputs",
                op_name(&op)
            );
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    /// Hash of every data-dependent branch taken so far (leaky-relu signs,
    /// max-pool winners). Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu(x, _) | Op::Abs(x) => {
                    for v in self.value(*x).data() {
                        mix(u64::from(*v < T::zero()));
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    for &i in argmax {
                        mix(i as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("div", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p / q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x), &[x])
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::MulConst(x, c), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x), &[x])
    }

    /// `max(x, slope * x)`; the derivative at exactly 0 is taken as 1.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v >= T::zero() { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// `s * x` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        require_scalar("scale_by", self.value(s))?;
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::ScaleBy(x, s), &[x, s]))
    }

    /// `x + s` broadcast over every element, for a one-element `s`.
    pub fn shift_by(&mut self, x: Var, s: Var) -> Result<Var> {
        require_scalar("shift_by", self.value(s))?;
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v + k);
        Ok(self.push(out, Op::ShiftBy(x, s), &[x, s]))
    }

    /// `a + s * I` for square `a` and one-element `s`.
    pub fn add_scaled_identity(&mut self, a: Var, s: Var) -> Result<Var> {
        require_scalar("add_scaled_identity", self.value(s))?;
        let x = self.value(a);
        require_rank("add_scaled_identity", x, 2)?;
        let m = x.shape()[0];
        if x.shape()[1] != m {
            return Err(Error::Shape(format!(
                "add_scaled_identity needs a square matrix, got {:?}",
                x.shape()
            )));
        }
        let k = self.value(s).item();
        let mut out = x.clone();
        for i in 0..m {
            out.data_mut()[i * m + i] = out.data()[i * m + i] + k;
        }
        Ok(self.push(out, Op::AddScaledIdentity(a, s), &[a, s]))
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        require_rank("matmul", x, 2)?;
        require_rank("matmul", y, 2)?;
        let (m, k) = if trans_a {
            (x.shape()[1], x.shape()[0])
        } else {
            (x.shape()[0], x.shape()[1])
        };
        let (k2, n) = if trans_b {
            (y.shape()[1], y.shape()[0])
        } else {
            (y.shape()[0], y.shape()[1])
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?}{} x {:?}{}",
                x.shape(),
                if trans_a { "^T" } else { "" },
                y.shape(),
                if trans_b { "^T" } else { "" },
            )));
        }
        let mut data = vec![T::zero(); m * n];
        T::gemm(trans_a, trans_b, m, k, n, T::one(), x.data(), y.data(), T::zero(), &mut data);
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Negative squared Euclidean distance between every row of `q` (n x c)
    /// and every row of `p` (m x c), giving n x m.
    pub fn neg_sq_dist(&mut self, q: Var, p: Var) -> Result<Var> {
        let (x, y) = (self.value(q), self.value(p));
        require_rank("neg_sq_dist", x, 2)?;
        require_rank("neg_sq_dist", y, 2)?;
        if x.shape()[1] != y.shape()[1] {
            return Err(Error::Shape(format!(
                "neg_sq_dist feature widths differ: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let (n, m, c) = (x.shape()[0], y.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let qi = &x.data()[i * c..(i + 1) * c];
            for j in 0..m {
                let pj = &y.data()[j * c..(j + 1) * c];
                let d: T = qi.iter().zip(pj).map(|(&a, &b)| (a - b) * (a - b)).sum();
                data.push(-d);
            }
        }
        let out = Tensor::new(&[n, m], data)?;
        Ok(self.push(out, Op::NegSqDist(q, p), &[q, p]))
    }

    /// 2-D cross-correlation with zero padding on NCHW input and OIkk kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(input),
            self.shape(kernel),
            opts.stride,
            opts.padding,
            opts.dilation,
        )?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    geom.cout
                )));
            }
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[geom.n, geom.cout, geom.oh, geom.ow], data)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    pub fn pool2d(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let x = self.value(input);
        require_rank("pool2d", x, 4)?;
        let shape = x.shape().to_vec();
        if shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!("pool2d on empty spatial extent {shape:?}")));
        }
        match mode {
            PoolMode::Max2x2 => {
                let (oshape, data, argmax) = kernels::maxpool2x2_forward(&shape, x.data());
                let out = Tensor::new(&oshape, data)?;
                Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
            }
            PoolMode::GlobalAvg => {
                let hw = shape[2] * shape[3];
                let inv = T::one() / T::from_f64(hw as f64);
                let data = x
                    .data()
                    .chunks_exact(hw)
                    .map(|plane| plane.iter().copied().sum::<T>() * inv)
                    .collect();
                let out = Tensor::new(&[shape[0], shape[1], 1, 1], data)?;
                Ok(self.push(out, Op::GlobalAvgPool(input), &[input]))
            }
        }
    }

    /// Tile an N x C x 1 x 1 tensor to N x C x h x w.
    pub fn replicate_upsample(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.value(input);
        require_rank("replicate_upsample", x, 4)?;
        if x.shape()[2] != 1 || x.shape()[3] != 1 {
            return Err(Error::Shape(format!(
                "replicate_upsample needs 1x1 spatial input, got {:?}",
                x.shape()
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "replicate_upsample target {h}x{w} must be positive"
            )));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in x.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let out = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.push(out, Op::Replicate(input), &[input]))
    }

    /// Bilinear resize of NCHW maps to `h x w` (half-pixel centers).
    pub fn bilinear_upsample(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.value(input);
        require_rank("bilinear_upsample", x, 4)?;
        let s = x.shape();
        if h == 0 || w == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::InvalidArgument(format!(
                "bilinear_upsample from {s:?} to {h}x{w}"
            )));
        }
        let plan = BilinearPlan::new(s[2], s[3], h, w);
        let data = plan.forward(s[0] * s[1], s[2], s[3], x.data());
        let out = Tensor::new(&[s[0], s[1], h, w], data)?;
        Ok(self.push(out, Op::Bilinear { input, plan }, &[input]))
    }

    /// Batch normalization over (N, H, W) per channel.
    ///
    /// In train mode the batch statistics are used and returned so the caller
    /// can fold them into running statistics. In eval mode `running` supplies
    /// the (mean, variance) pair.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: (&[T], &[T]),
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        let x = self.value(input);
        require_rank("batchnorm2d", x, 4)?;
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batchnorm2d over {c} channels got gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let hw = h * w;
        let count = n * hw;
        let eps = T::from_f64(BN_EPS);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::Shape(format!(
                        "batchnorm2d in train mode needs more than one value per channel, got {:?}",
                        x.shape()
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv = T::one() / T::from_f64(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = s + x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mu = s * inv;
                    let mut ss = T::zero();
                    for b in 0..n {
                        for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            ss = ss + (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss * inv;
                }
                let unbiased = T::from_f64(count as f64 / (count as f64 - 1.0));
                let stats = BnBatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbiased).collect(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval => {
                if running.0.len() != c || running.1.len() != c {
                    return Err(Error::Shape(format!(
                        "batchnorm2d running stats have {} / {} entries for {c} channels",
                        running.0.len(),
                        running.1.len()
                    )));
                }
                (running.0.to_vec(), running.1.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            &[input, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Concatenate two NCHW tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        require_rank("concat_channels", x, 4)?;
        require_rank("concat_channels", y, 4)?;
        let (xs, ys) = (x.shape(), y.shape());
        if xs[0] != ys[0] || xs[2] != ys[2] || xs[3] != ys[3] {
            return Err(Error::Shape(format!("concat_channels {xs:?} with {ys:?}")));
        }
        let (n, ca, cb, hw) = (xs[0], xs[1], ys[1], xs[2] * xs[3]);
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&x.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&y.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::new(&[n, ca + cb, xs[2], xs[3]], data)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Divide each (n, c) channel map by `sqrt(sum of squares + eps)`.
    pub fn l2_normalize_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        require_rank("l2_normalize_channels", x, 4)?;
        let hw = x.shape()[2] * x.shape()[3];
        let eps = T::from_f64(L2_EPS);
        let mut norms = Vec::with_capacity(x.len() / hw.max(1));
        let mut data = Vec::with_capacity(x.len());
        for plane in x.data().chunks_exact(hw.max(1)) {
            let s = (plane.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(s);
            data.extend(plane.iter().map(|&v| v / s));
        }
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::L2NormChannels { input, norms }, &[input]))
    }

    /// Flatten NCHW into an (N*H*W) x C pixel matrix (image-major, then
    /// row-major pixels).
    pub fn pixel_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        require_rank("pixel_rows", x, 4)?;
        let s = x.shape().to_vec();
        let data = kernels::nchw_to_rows(&s, x.data());
        let out = Tensor::new(&[s[0] * s[2] * s[3], s[1]], data)?;
        Ok(self.push(out, Op::PixelRows(input), &[input]))
    }

    /// Inverse of [`pixel_rows`](Self::pixel_rows): (N*h*w) x C back to N x C x h x w.
    pub fn rows_to_maps(&mut self, input: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let x = self.value(input);
        require_rank("rows_to_maps", x, 2)?;
        if x.shape()[0] != n * h * w {
            return Err(Error::Shape(format!(
                "rows_to_maps: {} rows cannot form {n} maps of {h}x{w}",
                x.shape()[0]
            )));
        }
        let c = x.shape()[1];
        let data = kernels::rows_to_nchw(&[n, c, h, w], x.data());
        let out = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.push(out, Op::RowsToMaps(input), &[input]))
    }

    /// `A^{-1} B` for symmetric positive definite `A` via Cholesky.
    ///
    /// Only the symmetric part of `A` is read, so the backward rule
    /// `grad_A = -sym(grad_B X^T)` is the exact derivative for any input.
    pub fn spd_solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        require_rank("spd_solve", am, 2)?;
        require_rank("spd_solve", bm, 2)?;
        let m = am.shape()[0];
        if am.shape()[1] != m || bm.shape()[0] != m {
            return Err(Error::Shape(format!(
                "spd_solve A {:?} with B {:?}",
                am.shape(),
                bm.shape()
            )));
        }
        let k = bm.shape()[1];
        let chol = kernels::cholesky(m, am.data())?;
        let mut x = bm.data().to_vec();
        kernels::cholesky_solve(m, k, &chol, &mut x);
        let out = Tensor::new(&[m, k], x)?;
        Ok(self.push(out, Op::SpdSolve { a, b, chol }, &[a, b]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        require_rank("softmax_cross_entropy", x, 2)?;
        let (p, c) = (x.shape()[0], x.shape()[1]);
        if p == 0 || labels.len() != p {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {} labels for {p} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let mut probs = vec![T::zero(); p * c];
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x.data()[r * c..(r + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * c + j] = e;
                z = z + e;
            }
            for pj in &mut probs[r * c..(r + 1) * c] {
                *pj = *pj / z;
            }
            // -log softmax = log z - (x_label - max)
            total += (z.ln() - (row[label] - mx)).as_f64();
        }
        let out = Tensor::scalar(T::from_f64(total / p as f64));
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Softmax probabilities saved by a cross-entropy node, row-major.
    pub fn saved_softmax(&self, loss: Var) -> Option<&[T]> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Every gradient-tracked leaf receives an entry, zeros when it does not
    /// influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, contrib) in self.input_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // keep intermediate gradients for inspection
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape(), data);
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    out.push((*a, like(*a, gd.iter().zip(y).map(|(&g, &y)| g * y).collect())?));
                }
                if wants(*b) {
                    out.push((*b, like(*b, gd.iter().zip(x).map(|(&g, &x)| g * x).collect())?));
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    out.push((*a, like(*a, gd.iter().zip(y).map(|(&g, &y)| g / y).collect())?));
                }
                if wants(*b) {
                    let d = gd
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::AddConst(x) => out.push((*x, g.clone())),
            Op::MulConst(x, c) => out.push((*x, g.map(|v| v * *c))),
            Op::Abs(x) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &x)| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::LeakyRelu(x, slope) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &x)| if x >= T::zero() { g } else { g * *slope })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(val(*x).shape(), g.item())));
            }
            Op::ScaleBy(x, s) => {
                let k = val(*s).item();
                if wants(*x) {
                    out.push((*x, g.map(|v| v * k)));
                }
                if wants(*s) {
                    let d: T = gd.iter().zip(val(*x).data()).map(|(&g, &x)| g * x).sum();
                    out.push((*s, Tensor::full(val(*s).shape(), d)));
                }
            }
            Op::ShiftBy(x, s) => {
                if wants(*x) {
                    out.push((*x, g.clone()));
                }
                if wants(*s) {
                    out.push((*s, Tensor::full(val(*s).shape(), g.sum())));
                }
            }
            Op::AddScaledIdentity(a, s) => {
                if wants(*a) {
                    out.push((*a, g.clone()));
                }
                if wants(*s) {
                    let m = g.shape()[0];
                    let tr: T = (0..m).map(|i| gd[i * m + i]).sum();
                    out.push((*s, Tensor::full(val(*s).shape(), tr)));
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (x, y) = (val(*a), val(*b));
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let k = if *trans_a { x.shape()[0] } else { x.shape()[1] };
                if wants(*a) {
                    let mut d = vec![T::zero(); x.len()];
                    if !*trans_a {
                        // dA (m x k) = dC op(B)^T
                        T::gemm(false, !*trans_b, m, n, k, T::one(), gd, y.data(), T::zero(), &mut d);
                    } else {
                        // dA (k x m) = op(B) dC^T
                        T::gemm(*trans_b, true, k, n, m, T::one(), y.data(), gd, T::zero(), &mut d);
                    }
                    out.push((*a, like(*a, d)?));
                }
                if wants(*b) {
                    let mut d = vec![T::zero(); y.len()];
                    if !*trans_b {
                        // dB (k x n) = op(A)^T dC
                        T::gemm(!*trans_a, false, k, m, n, T::one(), x.data(), gd, T::zero(), &mut d);
                    } else {
                        // dB (n x k) = dC^T op(A)
                        T::gemm(true, *trans_a, n, m, k, T::one(), gd, x.data(), T::zero(), &mut d);
                    }
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::NegSqDist(q, p) => {
                let (x, y) = (val(*q), val(*p));
                let (n, m, c) = (x.shape()[0], y.shape()[0], x.shape()[1]);
                let two = T::from_f64(2.0);
                if wants(*q) {
                    // dQ = -2 (diag(rowsum dY) Q - dY P)
                    let mut d = vec![T::zero(); n * c];
                    T::gemm(false, false, n, m, c, two, gd, y.data(), T::zero(), &mut d);
                    for i in 0..n {
                        let rs: T = gd[i * m..(i + 1) * m].iter().copied().sum();
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] - two * rs * x.data()[i * c + j];
                        }
                    }
                    out.push((*q, like(*q, d)?));
                }
                if wants(*p) {
                    // dP = 2 (dY^T Q - diag(colsum dY) P)
                    let mut d = vec![T::zero(); m * c];
                    T::gemm(true, false, m, n, c, two, gd, x.data(), T::zero(), &mut d);
                    for j in 0..m {
                        let cs: T = (0..n).map(|i| gd[i * m + j]).sum();
                        for k in 0..c {
                            d[j * c + k] = d[j * c + k] - two * cs * y.data()[j * c + k];
                        }
                    }
                    out.push((*p, like(*p, d)?));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want_b = bias.is_some_and(wants);
                let (gi, gk, gb) = kernels::conv2d_backward(
                    geom,
                    val(*input).data(),
                    val(*kernel).data(),
                    gd,
                    [wants(*input), wants(*kernel), want_b],
                );
                if let Some(gi) = gi {
                    out.push((*input, like(*input, gi)?));
                }
                if let Some(gk) = gk {
                    out.push((*kernel, like(*kernel, gk)?));
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    out.push((*b, like(*b, gb)?));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); val(*input).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] = d[src] + gv;
                }
                out.push((*input, like(*input, d)?));
            }
            Op::GlobalAvgPool(input) => {
                let s = val(*input).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_f64(hw as f64);
                let mut d = Vec::with_capacity(val(*input).len());
                for &gv in gd {
                    d.extend(std::iter::repeat_n(gv * inv, hw));
                }
                out.push((*input, like(*input, d)?));
            }
            Op::Replicate(input) => {
                let hw = g.shape()[2] * g.shape()[3];
                let d = gd.chunks_exact(hw).map(|c| c.iter().copied().sum()).collect();
                out.push((*input, like(*input, d)?));
            }
            Op::Bilinear { input, plan } => {
                let s = val(*input).shape();
                let d = plan.backward(s[0] * s[1], s[2], s[3], gd);
                out.push((*input, like(*input, d)?));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = val(*input).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_dy[ch] = sum_dy[ch] + gd[i];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + gd[i] * xhat[i];
                        }
                    }
                }
                if wants(*input) {
                    let gm = val(*gamma).data();
                    let count = T::from_f64((n * hw) as f64);
                    let mut d = vec![T::zero(); val(*input).len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k = gm[ch] * inv_std[ch];
                            for i in base..base + hw {
                                d[i] = if *train {
                                    k * (gd[i] - (sum_dy[ch] + xhat[i] * sum_dy_xhat[ch]) / count)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    out.push((*input, like(*input, d)?));
                }
                if wants(*gamma) {
                    out.push((*gamma, like(*gamma, sum_dy_xhat)?));
                }
                if wants(*beta) {
                    out.push((*beta, like(*beta, sum_dy)?));
                }
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let (mut da, mut db) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    da.extend_from_slice(&gd[base..base + ca * hw]);
                    db.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                }
                out.push((*a, like(*a, da)?));
                out.push((*b, like(*b, db)?));
            }
            Op::L2NormChannels { input, norms } => {
                let s = val(*input).shape();
                let hw = (s[2] * s[3]).max(1);
                let y = node.value.data();
                let mut d = Vec::with_capacity(y.len());
                for (p, &norm) in norms.iter().enumerate() {
                    let (yp, gp) = (&y[p * hw..(p + 1) * hw], &gd[p * hw..(p + 1) * hw]);
                    let dot: T = yp.iter().zip(gp).map(|(&a, &b)| a * b).sum();
                    d.extend(yp.iter().zip(gp).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                }
                out.push((*input, like(*input, d)?));
            }
            Op::PixelRows(input) => {
                let d = kernels::rows_to_nchw(val(*input).shape(), gd);
                out.push((*input, like(*input, d)?));
            }
            Op::RowsToMaps(input) => {
                let d = kernels::nchw_to_rows(g.shape(), gd);
                out.push((*input, like(*input, d)?));
            }
            Op::SpdSolve { a, b, chol } => {
                let m = val(*a).shape()[0];
                let k = val(*b).shape()[1];
                let mut gb = gd.to_vec();
                kernels::cholesky_solve(m, k, chol, &mut gb);
                if wants(*a) {
                    // grad_A = -sym(grad_B X^T)
                    let x = node.value.data();
                    let mut ga = vec![T::zero(); m * m];
                    T::gemm(false, true, m, k, m, -T::one(), &gb, x, T::zero(), &mut ga);
                    let half = T::from_f64(0.5);
                    for i in 0..m {
                        for j in i..m {
                            let s = (ga[i * m + j] + ga[j * m + i]) * half;
                            ga[i * m + j] = s;
                            ga[j * m + i] = s;
                        }
                    }
                    out.push((*a, like(*a, ga)?));
                }
                if wants(*b) {
                    out.push((*b, like(*b, gb)?));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).shape()[1];
                let scale = g.item() / T::from_f64(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] = d[r * c + l] - scale;
                }
                out.push((*logits, like(*logits, d)?));
            }
        }
        Ok(out)
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddConst(..) => "add_const",
        Op::MulConst(..) => "mul_const",
        Op::Abs(..) => "abs",
        Op::Exp(..) => "exp",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Sum(..) => "sum",
        Op::ScaleBy(..) => "scale_by",
        Op::ShiftBy(..) => "shift_by",
        Op::AddScaledIdentity(..) => "add_scaled_identity",
        Op::MatMul { .. } => "matmul",
        Op::NegSqDist(..) => "neg_sq_dist",
        Op::Conv2d { .. } => "conv2d",
        Op::MaxPool { .. } => "max_pool",
        Op::GlobalAvgPool(..) => "global_avg_pool",
        Op::Replicate(..) => "replicate_upsample",
        Op::Bilinear { .. } => "bilinear_upsample",
        Op::BatchNorm { .. } => "batchnorm2d",
        Op::ConcatChannels(..) => "concat_channels",
        Op::L2NormChannels { .. } => "l2_normalize_channels",
        Op::PixelRows(..) => "pixel_rows",
        Op::RowsToMaps(..) => "rows_to_maps",
        Op::SpdSolve { .. } => "spd_solve",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}
