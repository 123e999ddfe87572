//! The autodiff tape: eager forward evaluation with recorded adjoints.

use rand::Rng;

use crate::error::{Error, Result};

use super::tensor::{gemm, Real, Tensor};

/// Batch-norm denominator guard.
pub const BN_EPS: Real = 1e-5;
/// Fraction of the previous running statistic kept per batch-norm update.
pub const BN_MOMENTUM: Real = 0.9;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(u32);

impl Var {
    fn index(self) -> usize {
        self.0 as usize
    }
}

/// Running statistics owned by one batch-norm layer, updated in train mode
/// and read in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormState {
    /// Fresh statistics for `channels` features: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Exp(Var),
    Sum(Var),
    SumRowNorms {
        x: Var,
        norms: Vec<Real>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<Real>,
        var: Vec<Real>,
        train: bool,
    },
    LeakyRelu {
        x: Var,
        slope: Real,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gap(Var),
    Dropout {
        x: Var,
        mask: Vec<Real>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    BceWithLogits {
        z: Var,
        targets: Vec<Real>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.index()).and_then(|g| g.take())
    }
}

/// Linear record of operations. Values are computed eagerly; one reverse
/// sweep over the record yields exact gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    /// Registers an input tensor. Gradients flow into it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        assert!(idx <= u32::MAX as usize, "tape exceeded u32 node capacity");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(idx as u32)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index()].requires_grad)
    }

    fn same_shape(&self, context: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::dim(
                context,
                format!("operand shapes {:?} and {:?} differ", sa, sb),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_tensors(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.requires(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_tensors(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.requires(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_tensors(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.requires(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, x: Var, factor: Real) -> Var {
        let value = self.value(x).clone().map(|v| v * factor);
        let rg = self.requires(&[x]);
        self.push(Op::Scale(x, factor), value, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).clone().map(Real::exp);
        let rg = self.requires(&[x]);
        self.push(Op::Exp(x), value, rg)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: Real = self.value(x).data().iter().sum();
        let rg = self.requires(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(total), rg)
    }

    /// Sum over rows of the Euclidean norm of each row: `Σ_n ‖x[n, :]‖₂`
    /// for a (rows, cols) input. The batch residual reduction of the
    /// estimator loss.
    pub fn sum_row_norms(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim(
                "sum_row_norms",
                format!("expected a (rows, cols) matrix, got shape {:?}", xv.shape()),
            ));
        }
        let (rows, cols) = (xv.dim(0), xv.dim(1));
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            norms.push(row.iter().map(|v| v * v).sum::<Real>().sqrt());
        }
        let total = norms.iter().sum();
        let rg = self.requires(&[x]);
        Ok(self.push(Op::SumRowNorms { x, norms }, Tensor::scalar(total), rg))
    }

    /// Affine map `y = x · wᵀ (+ b)` for `x` of shape (n, in), `w` of shape
    /// (out, in), optional bias of shape (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 2 || wv.rank() != 2 {
            return Err(Error::dim(
                "linear",
                format!(
                    "input shape {:?} and weight shape {:?} must both be rank 2",
                    xv.shape(),
                    wv.shape()
                ),
            ));
        }
        let (n, input) = (xv.dim(0), xv.dim(1));
        let (out, w_in) = (wv.dim(0), wv.dim(1));
        if input != w_in {
            return Err(Error::dim(
                "linear",
                format!("input width {} does not match weight width {}", input, w_in),
            ));
        }
        let mut y = vec![0.0; n * out];
        gemm(
            n,
            input,
            out,
            1.0,
            xv.data(),
            input as isize,
            1,
            wv.data(),
            1,
            input as isize,
            0.0,
            &mut y,
            out as isize,
            1,
        );
        if let Some(bias) = b {
            let bv = self.value(bias);
            if bv.shape() != [out] {
                return Err(Error::dim(
                    "linear",
                    format!("bias shape {:?}, expected [{}]", bv.shape(), out),
                ));
            }
            for row in y.chunks_exact_mut(out) {
                for (v, add) in row.iter_mut().zip(bv.data()) {
                    *v += add;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.requires(&inputs);
        let value = Tensor::new(vec![n, out], y)?;
        Ok(self.push(Op::Linear { x, w, b }, value, rg))
    }

    /// 2-D convolution over NCHW input with an (out, in, kh, kw) kernel and
    /// per-output-channel bias. Output spatial size is
    /// `floor((in + 2·pad − k) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        let xv = self.value(x);
        let kv = self.value(kernel);
        let bv = self.value(bias);
        let [n, cin, h, w] = dims4(xv, "conv2d input")?;
        let [cout, kc, kh, kw] = dims4(kv, "conv2d kernel")?;
        if kc != cin {
            return Err(Error::dim(
                "conv2d",
                format!("kernel expects {} input channels, image has {}", kc, cin),
            ));
        }
        if bv.shape() != [cout] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", bv.shape(), cout),
            ));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {}×{} exceeds padded input {}×{}",
                    kh,
                    kw,
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let ckk = cin * kh * kw;
        let ocols = oh * ow;
        let mut cols = vec![0.0; ckk * ocols];
        let mut out = vec![0.0; n * cout * ocols];
        for s in 0..n {
            im2col(
                &xv.data()[s * cin * h * w..][..cin * h * w],
                cin,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                &mut cols,
            );
            gemm(
                cout,
                ckk,
                ocols,
                1.0,
                kv.data(),
                ckk as isize,
                1,
                &cols,
                ocols as isize,
                1,
                0.0,
                &mut out[s * cout * ocols..][..cout * ocols],
                ocols as isize,
                1,
            );
        }
        for s in 0..n {
            for o in 0..cout {
                let add = bv.data()[o];
                for v in &mut out[(s * cout + o) * ocols..][..ocols] {
                    *v += add;
                }
            }
        }
        let rg = self.requires(&[x, kernel, bias]);
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        Ok(self.push(
            Op::Conv2d {
                x,
                k: kernel,
                b: bias,
                stride,
                pad,
            },
            value,
            rg,
        ))
    }

    /// Per-channel batch normalization over NCHW input. Train mode
    /// normalizes with batch statistics and folds them into `state`; eval
    /// mode normalizes with the stored running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        train: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv, "batch_norm input")?;
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!(
                    "scale shape {:?} and shift shape {:?}, expected [{}]",
                    gv.shape(),
                    bv.shape(),
                    c
                ),
            ));
        }
        if state.running_mean.shape() != [c] || state.running_var.shape() != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!("running statistics sized for {:?} channels, input has {}",
                    state.running_mean.shape(), c),
            ));
        }
        let plane = h * w;
        let m = (n * plane) as Real;
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    sum += xv.data()[base..base + plane].iter().sum::<Real>();
                }
                let mu = sum / m;
                let mut sq = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for v in &xv.data()[base..base + plane] {
                        let d = v - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / m;
            }
            for ch in 0..c {
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean[ch];
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var[ch];
            }
            (mean, var)
        } else {
            let mean = state.running_mean.data().to_vec();
            let var = state.running_var.data().to_vec();
            if let Some(bad) = var.iter().find(|v| **v < 0.0) {
                return Err(Error::param(
                    "running_var",
                    format!("negative variance {}", bad),
                ));
            }
            (mean, var)
        };
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            let istd = 1.0 / (var[ch] + BN_EPS).sqrt();
            let (g, sh, mu) = (gv.data()[ch], bv.data()[ch], mean[ch]);
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    out[i] = g * (xv.data()[i] - mu) * istd + sh;
                }
            }
        }
        let rg = self.requires(&[x, gamma, beta]);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            },
            value,
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: Real) -> Var {
        let value = self
            .value(x)
            .clone()
            .map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.requires(&[x]);
        self.push(Op::LeakyRelu { x, slope }, value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).clone().map(|v| v.max(0.0));
        let rg = self.requires(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).clone().map(sigmoid_scalar);
        let rg = self.requires(&[x]);
        self.push(Op::Sigmoid(x), value, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).clone().map(Real::tanh);
        let rg = self.requires(&[x]);
        self.push(Op::Tanh(x), value, rg)
    }

    /// Global average pooling: (n, c, h, w) → (n, c), the spatial mean per
    /// channel.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv, "global_avg_pool input")?;
        let plane = h * w;
        let mut out = vec![0.0; n * c];
        for (i, chunk) in xv.data().chunks_exact(plane).enumerate() {
            out[i] = chunk.iter().sum::<Real>() / plane as Real;
        }
        let rg = self.requires(&[x]);
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(Op::Gap(x), value, rg))
    }

    /// Inverted dropout: keeps each element with probability `1 − rate`,
    /// scaling survivors by `1/(1 − rate)`. Eval mode (or rate 0) is the
    /// identity and records nothing.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: Real,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param(
                "dropout rate",
                format!("{} outside [0, 1)", rate),
            ));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<Real> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < rate as f64 {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.requires(&[x]);
        Ok(self.push(Op::Dropout { x, mask }, value, rg))
    }

    /// Columns `start..start + len` of a (rows, cols) matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim(
                "slice_cols",
                format!("expected a matrix, got shape {:?}", xv.shape()),
            ));
        }
        let (rows, cols) = (xv.dim(0), xv.dim(1));
        if start + len > cols {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {}..{} out of 0..{}", start, start + len, cols),
            ));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.requires(&[x]);
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(Op::SliceCols { x, start }, value, rg))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0) {
            return Err(Error::dim(
                "concat_cols",
                format!(
                    "operands {:?} and {:?} must be matrices with equal rows",
                    av.shape(),
                    bv.shape()
                ),
            ));
        }
        let (rows, ca, cb) = (av.dim(0), av.dim(1), bv.dim(1));
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let rg = self.requires(&[a, b]);
        let value = Tensor::new(vec![rows, ca + cb], out)?;
        Ok(self.push(Op::ConcatCols(a, b), value, rg))
    }

    /// Mean binary cross-entropy of logits `z` (shape (n, 1)) against 0/1
    /// targets, computed in the numerically stable softplus form.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[Real]) -> Result<Var> {
        let zv = self.value(z);
        if zv.rank() != 2 || zv.dim(1) != 1 || zv.dim(0) != targets.len() {
            return Err(Error::dim(
                "bce_with_logits",
                format!(
                    "logits shape {:?} incompatible with {} targets",
                    zv.shape(),
                    targets.len()
                ),
            ));
        }
        if let Some(bad) = targets.iter().find(|t| **t != 0.0 && **t != 1.0) {
            return Err(Error::param("targets", format!("label {} is not 0 or 1", bad)));
        }
        let n = targets.len() as Real;
        let mut total = 0.0;
        for (zi, yi) in zv.data().iter().zip(targets) {
            total += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let rg = self.requires(&[z]);
        Ok(self.push(
            Op::BceWithLogits {
                z,
                targets: targets.to_vec(),
            },
            Tensor::scalar(total / n),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`: returns gradients for every node
    /// with `requires_grad`. The tape is left intact, so further forward
    /// ops or another sweep on the same record are allowed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss has shape {:?}, expected a scalar", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.index()] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.index()).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.propagate(i, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves hold their gradient"),
            Op::Add(a, b) => {
                add_grad(nodes, grads, *a, gout.clone());
                add_grad(nodes, grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                add_grad(nodes, grads, *a, gout.clone());
                add_grad(nodes, grads, *b, gout.clone().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.index()].value;
                let bv = &nodes[b.index()].value;
                add_grad(nodes, grads, *a, zip_tensors(gout, bv, |g, v| g * v));
                add_grad(nodes, grads, *b, zip_tensors(gout, av, |g, v| g * v));
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                add_grad(nodes, grads, *x, gout.clone().map(|g| g * f));
            }
            Op::Exp(x) => {
                add_grad(nodes, grads, *x, zip_tensors(gout, &nodes[i].value, |g, y| g * y));
            }
            Op::Sum(x) => {
                let g = gout.item();
                let shape = nodes[x.index()].value.shape();
                add_grad(nodes, grads, *x, Tensor::full(shape, g));
            }
            Op::SumRowNorms { x, norms } => {
                let g = gout.item();
                let xv = &nodes[x.index()].value;
                let cols = xv.dim(1);
                let mut dx = Tensor::zeros(xv.shape());
                for (r, &norm) in norms.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let scale = g / norm;
                    let src = &xv.data()[r * cols..(r + 1) * cols];
                    let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = scale * v;
                    }
                }
                add_grad(nodes, grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = &nodes[x.index()].value;
                let wv = &nodes[w.index()].value;
                let (n, input) = (xv.dim(0), xv.dim(1));
                let out = wv.dim(0);
                if nodes[x.index()].requires_grad {
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(
                        n,
                        out,
                        input,
                        1.0,
                        gout.data(),
                        out as isize,
                        1,
                        wv.data(),
                        input as isize,
                        1,
                        0.0,
                        dx.data_mut(),
                        input as isize,
                        1,
                    );
                    add_grad(nodes, grads, *x, dx);
                }
                if nodes[w.index()].requires_grad {
                    let mut dw = Tensor::zeros(wv.shape());
                    gemm(
                        out,
                        n,
                        input,
                        1.0,
                        gout.data(),
                        1,
                        out as isize,
                        xv.data(),
                        input as isize,
                        1,
                        0.0,
                        dw.data_mut(),
                        input as isize,
                        1,
                    );
                    add_grad(nodes, grads, *w, dw);
                }
                if let Some(bias) = b {
                    if nodes[bias.index()].requires_grad {
                        let mut db = Tensor::zeros(&[out]);
                        for row in gout.data().chunks_exact(out) {
                            for (d, g) in db.data_mut().iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        add_grad(nodes, grads, *bias, db);
                    }
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                pad,
            } => {
                self.propagate_conv(*x, *k, *b, *stride, *pad, gout, grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            } => {
                self.propagate_batch_norm(*x, *gamma, *beta, mean, var, *train, gout, grads);
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                let xv = &nodes[x.index()].value;
                add_grad(
                    nodes,
                    grads,
                    *x,
                    zip_tensors(gout, xv, |g, v| if v > 0.0 { g } else { s * g }),
                );
            }
            Op::Relu(x) => {
                let xv = &nodes[x.index()].value;
                add_grad(
                    nodes,
                    grads,
                    *x,
                    zip_tensors(gout, xv, |g, v| if v > 0.0 { g } else { 0.0 }),
                );
            }
            Op::Sigmoid(x) => {
                let yv = &nodes[i].value;
                add_grad(nodes, grads, *x, zip_tensors(gout, yv, |g, y| g * y * (1.0 - y)));
            }
            Op::Tanh(x) => {
                let yv = &nodes[i].value;
                add_grad(nodes, grads, *x, zip_tensors(gout, yv, |g, y| g * (1.0 - y * y)));
            }
            Op::Gap(x) => {
                let xv = &nodes[x.index()].value;
                let plane = xv.dim(2) * xv.dim(3);
                let inv = 1.0 / plane as Real;
                let mut dx = Tensor::zeros(xv.shape());
                for (chunk, g) in dx.data_mut().chunks_exact_mut(plane).zip(gout.data()) {
                    chunk.fill(g * inv);
                }
                add_grad(nodes, grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let data = gout.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                let xv = &nodes[x.index()].value;
                add_grad(
                    nodes,
                    grads,
                    *x,
                    Tensor::new(xv.shape().to_vec(), data).expect("mask matches input"),
                );
            }
            Op::SliceCols { x, start } => {
                let xv = &nodes[x.index()].value;
                let (rows, cols) = (xv.dim(0), xv.dim(1));
                let len = gout.dim(1);
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..rows {
                    let dst = &mut dx.data_mut()[r * cols + start..r * cols + start + len];
                    dst.copy_from_slice(&gout.data()[r * len..(r + 1) * len]);
                }
                add_grad(nodes, grads, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.index()].value.dim(1);
                let cb = nodes[b.index()].value.dim(1);
                let rows = gout.dim(0);
                let total = ca + cb;
                let mut da = Tensor::zeros(nodes[a.index()].value.shape());
                let mut db = Tensor::zeros(nodes[b.index()].value.shape());
                for r in 0..rows {
                    let row = &gout.data()[r * total..(r + 1) * total];
                    da.data_mut()[r * ca..(r + 1) * ca].copy_from_slice(&row[..ca]);
                    db.data_mut()[r * cb..(r + 1) * cb].copy_from_slice(&row[ca..]);
                }
                add_grad(nodes, grads, *a, da);
                add_grad(nodes, grads, *b, db);
            }
            Op::BceWithLogits { z, targets } => {
                let g = gout.item() / targets.len() as Real;
                let zv = &nodes[z.index()].value;
                let data = zv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(zi, yi)| g * (sigmoid_scalar(*zi) - yi))
                    .collect();
                add_grad(
                    nodes,
                    grads,
                    *z,
                    Tensor::new(zv.shape().to_vec(), data).expect("targets match logits"),
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn propagate_conv(
        &self,
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        pad: usize,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let nodes = &self.nodes;
        let xv = &nodes[x.index()].value;
        let kv = &nodes[k.index()].value;
        let (n, cin, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (cout, kh, kw) = (kv.dim(0), kv.dim(2), kv.dim(3));
        let (oh, ow) = (gout.dim(2), gout.dim(3));
        let ckk = cin * kh * kw;
        let ocols = oh * ow;
        let need_dx = nodes[x.index()].requires_grad;
        let need_dk = nodes[k.index()].requires_grad;
        let need_db = nodes[b.index()].requires_grad;
        let mut dk = need_dk.then(|| Tensor::zeros(kv.shape()));
        let mut dx = need_dx.then(|| Tensor::zeros(xv.shape()));
        let mut cols = vec![0.0; ckk * ocols];
        let mut dcols = vec![0.0; ckk * ocols];
        for s in 0..n {
            let gs = &gout.data()[s * cout * ocols..][..cout * ocols];
            if let Some(dk) = dk.as_mut() {
                im2col(
                    &xv.data()[s * cin * h * w..][..cin * h * w],
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut cols,
                );
                gemm(
                    cout,
                    ocols,
                    ckk,
                    1.0,
                    gs,
                    ocols as isize,
                    1,
                    &cols,
                    1,
                    ocols as isize,
                    1.0,
                    dk.data_mut(),
                    ckk as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    ckk,
                    cout,
                    ocols,
                    1.0,
                    kv.data(),
                    1,
                    ckk as isize,
                    gs,
                    ocols as isize,
                    1,
                    0.0,
                    &mut dcols,
                    ocols as isize,
                    1,
                );
                col2im_add(
                    &dcols,
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut dx.data_mut()[s * cin * h * w..][..cin * h * w],
                );
            }
        }
        if let Some(dk) = dk {
            add_grad(nodes, grads, k, dk);
        }
        if let Some(dx) = dx {
            add_grad(nodes, grads, x, dx);
        }
        if need_db {
            let mut db = Tensor::zeros(&[cout]);
            for s in 0..n {
                for o in 0..cout {
                    let sum: Real = gout.data()[(s * cout + o) * ocols..][..ocols]
                        .iter()
                        .sum();
                    db.data_mut()[o] += sum;
                }
            }
            add_grad(nodes, grads, b, db);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn propagate_batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[Real],
        var: &[Real],
        train: bool,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let nodes = &self.nodes;
        let xv = &nodes[x.index()].value;
        let gv = &nodes[gamma.index()].value;
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let plane = h * w;
        let m = (n * plane) as Real;
        let need_dx = nodes[x.index()].requires_grad;
        let need_dg = nodes[gamma.index()].requires_grad;
        let need_db = nodes[beta.index()].requires_grad;
        let mut dx = need_dx.then(|| Tensor::zeros(xv.shape()));
        let mut dg = need_dg.then(|| Tensor::zeros(&[c]));
        let mut db = need_db.then(|| Tensor::zeros(&[c]));
        for ch in 0..c {
            let istd = 1.0 / (var[ch] + BN_EPS).sqrt();
            let mu = mean[ch];
            let g = gv.data()[ch];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let dy = gout.data()[i];
                    sum_dy += dy;
                    sum_dy_xhat += dy * (xv.data()[i] - mu) * istd;
                }
            }
            if let Some(dg) = dg.as_mut() {
                dg.data_mut()[ch] = sum_dy_xhat;
            }
            if let Some(db) = db.as_mut() {
                db.data_mut()[ch] = sum_dy;
            }
            if let Some(dx) = dx.as_mut() {
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        let dy = gout.data()[i];
                        dx.data_mut()[i] = if train {
                            let xhat = (xv.data()[i] - mu) * istd;
                            g * istd * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                        } else {
                            g * istd * dy
                        };
                    }
                }
            }
        }
        if let Some(dx) = dx {
            add_grad(nodes, grads, x, dx);
        }
        if let Some(dg) = dg {
            add_grad(nodes, grads, gamma, dg);
        }
        if let Some(db) = db {
            add_grad(nodes, grads, beta, db);
        }
    }
}

/// Gradient of a scalar built on top of `image` with respect to the image
/// itself. `build` receives a fresh tape and the image leaf and returns the
/// loss node; any weights it binds as constants stay untouched.
pub fn input_gradient<F>(image: &Tensor, build: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone(), true);
    let loss = build(&mut tape, x)?;
    let mut grads = tape.backward(loss)?;
    grads
        .take(x)
        .ok_or_else(|| Error::dim("input_gradient", "loss does not depend on the image"))
}

fn add_grad(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
    if !nodes[v.index()].requires_grad {
        return;
    }
    debug_assert_eq!(nodes[v.index()].value.shape(), contrib.shape());
    match &mut grads[v.index()] {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(contrib.data()) {
                *a += *d;
            }
        }
        slot => *slot = Some(contrib),
    }
}

fn zip_tensors(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes verified by caller")
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    if t.rank() != 4 {
        return Err(Error::dim(
            "rank-4 tensor expected",
            format!("{} has shape {:?}", what, t.shape()),
        ));
    }
    Ok([t.dim(0), t.dim(1), t.dim(2), t.dim(3)])
}

fn sigmoid_scalar(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unpacks one sample's channels into convolution columns: row
/// `(c, ki, kj)`, column `(oy, ox)`; out-of-bounds taps read zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[Real],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [Real],
) {
    let plane = h * w;
    let ocols = oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * plane..(c + 1) * plane];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * ocols..(row + 1) * ocols];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let base = oy * ow;
                    if iy < 0 || iy >= h as isize {
                        dst[base..base + ow].fill(0.0);
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[base + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the
/// input plane.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[Real],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [Real],
) {
    let plane = h * w;
    let ocols = oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let xc = &mut x[c * plane..(c + 1) * plane];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * ocols..(row + 1) * ocols];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        xc[iy as usize * w + ix as usize] += src[base + ox];
                    }
                }
            }
        }
    }
}
