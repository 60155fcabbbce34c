//! Define-by-run reverse-mode differentiation tape.
//!
//! Every forward operation appends a node holding its output tensor and the
//! references needed to run its gradient rule. [`Tape::backward`] walks the
//! nodes in reverse construction order, which is a valid topological order
//! because an operation can only consume tensors that already exist.
//!
//! The tape is rebuilt for every forward pass. Gradients accumulate in
//! parallel buffers during the sweep and are written into each node's
//! tensor afterwards, so callers read them with [`Tape::grad`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Conv1dGrouped {
        input: TensorId,
        kernel: TensorId,
        groups: usize,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        /// (mean, 1/sqrt(var + eps)) per normalized vector.
        stats: Vec<(f64, f64)>,
    },
    SoftmaxLastDim {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Dropout {
        x: TensorId,
        /// 0.0 for dropped entries, 1/keep for kept ones.
        mask: Vec<f64>,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    AddRowVector {
        x: TensorId,
        v: TensorId,
    },
    MeanLastDim {
        x: TensorId,
    },
    Scale {
        x: TensorId,
        factor: f64,
    },
    Transpose2d {
        x: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    Sum {
        x: TensorId,
    },
    DownsampleStride {
        x: TensorId,
        stride: usize,
    },
    UpsampleTo {
        x: TensorId,
        stride: usize,
    },
    MseLoss {
        pred: TensorId,
        target: TensorId,
    },
    CrossEntropyLogits {
        logits: TensorId,
        label: usize,
        /// Softmax of the logits, saved at forward time.
        probs: Vec<f64>,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// [`Tape::backward`] will populate a gradient for it.
    pub fn leaf(&mut self, tensor: &Tensor) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor.clone(), Op::Leaf, needs)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the last `backward` loss w.r.t. this tensor, if one was
    /// propagated to it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// 2-D matrix product `[n×d] · [d×k] -> [n×k]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, d, k) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), n, d, k);
        let needs = self.needs(a) || self.needs(b);
        let tensor = Tensor::new(vec![n, k], out).expect("matmul output shape");
        Ok(self.push(tensor, Op::Matmul { a, b }, needs))
    }

    /// Grouped 1-D convolution (cross-correlation). `input` is `[M × L]`,
    /// `kernel` is `[N × M/groups × K]`; output channel block `g` sees only
    /// input channel block `g`, so `groups == M == N` filters every channel
    /// independently.
    pub fn conv1d_grouped(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, NumericsError> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 2 || sk.len() != 3 {
            return Err(NumericsError::DimensionMismatch {
                op: "conv1d_grouped",
                lhs: si,
                rhs: sk,
            });
        }
        let (m, l) = (si[0], si[1]);
        let (n, per_group, k) = (sk[0], sk[1], sk[2]);
        if groups == 0 || m % groups != 0 || n % groups != 0 {
            return Err(NumericsError::InvalidConfig(format!(
                "conv1d_grouped: channel counts {m} in / {n} out not divisible by groups {groups}"
            )));
        }
        if per_group != m / groups {
            return Err(NumericsError::InvalidConfig(format!(
                "conv1d_grouped: kernel expects {per_group} channels per group, input provides {}",
                m / groups
            )));
        }
        if stride == 0 {
            return Err(NumericsError::InvalidConfig(
                "conv1d_grouped: stride must be >= 1".into(),
            ));
        }
        let padded = l + 2 * padding;
        if padded < k {
            return Err(NumericsError::DimensionMismatch {
                op: "conv1d_grouped (output length < 1)",
                lhs: si,
                rhs: sk,
            });
        }
        let l_out = (padded - k) / stride + 1;
        let out = conv1d_grouped_raw(
            self.data(input),
            self.data(kernel),
            m,
            l,
            n,
            k,
            groups,
            stride,
            padding,
        );
        let needs = self.needs(input) || self.needs(kernel);
        let tensor = Tensor::new(vec![n, l_out], out).expect("conv output shape");
        Ok(self.push(
            tensor,
            Op::Conv1dGrouped {
                input,
                kernel,
                groups,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Normalizes each innermost vector to zero mean / unit variance, then
    /// applies the elementwise affine `gain`/`bias`. Statistics never cross
    /// the leading axes.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, NumericsError> {
        let sx = self.shape(x).to_vec();
        let l = *sx.last().ok_or_else(|| {
            NumericsError::InvalidConfig("layer_norm: input must have at least one axis".into())
        })?;
        if self.shape(gain) != [l] || self.shape(bias) != [l] {
            return Err(NumericsError::DimensionMismatch {
                op: "layer_norm (gain/bias vs last axis)",
                lhs: sx,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let vectors = xd.len() / l;
        let mut out = vec![0.0; xd.len()];
        let mut stats = Vec::with_capacity(vectors);
        for v in 0..vectors {
            let row = &xd[v * l..(v + 1) * l];
            let mean = row.iter().sum::<f64>() / l as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / l as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv_std));
            let out_row = &mut out[v * l..(v + 1) * l];
            for i in 0..l {
                out_row[i] = (row[i] - mean) * inv_std * gd[i] + bd[i];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let tensor = Tensor::new(sx, out).expect("layer_norm output shape");
        Ok(self.push(
            tensor,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            needs,
        ))
    }

    /// Softmax over the innermost axis, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> TensorId {
        let sx = self.shape(x).to_vec();
        let l = *sx.last().expect("softmax input must have an axis");
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for v in 0..xd.len() / l {
            let row = &xd[v * l..(v + 1) * l];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out_row = &mut out[v * l..(v + 1) * l];
            let mut sum = 0.0;
            for i in 0..l {
                out_row[i] = (row[i] - max).exp();
                sum += out_row[i];
            }
            for o in out_row.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(x);
        let tensor = Tensor::new(sx, out).expect("softmax output shape");
        self.push(tensor, Op::SoftmaxLastDim { x }, needs)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let needs = self.needs(x);
        let tensor = Tensor::new(self.shape(x).to_vec(), out).expect("relu output shape");
        self.push(tensor, Op::Relu { x }, needs)
    }

    /// Inverted-scaling dropout: kept activations are divided by the keep
    /// probability so evaluation mode is the identity. With `training`
    /// false or `rate` zero the input id is returned unchanged.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidConfig(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let needs = self.needs(x);
        let tensor = Tensor::new(self.shape(x).to_vec(), out).expect("dropout output shape");
        Ok(self.push(tensor, Op::Dropout { x, mask }, needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::DimensionMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let tensor = Tensor::new(self.shape(a).to_vec(), out).expect("add output shape");
        Ok(self.push(tensor, Op::Add { a, b }, needs))
    }

    /// Adds a length-`m` vector to every row of an `[n × m]` tensor.
    pub fn add_row_vector(&mut self, x: TensorId, v: TensorId) -> Result<TensorId, NumericsError> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        if sx.len() != 2 || sv != [sx[1]] {
            return Err(NumericsError::DimensionMismatch {
                op: "add_row_vector",
                lhs: sx,
                rhs: sv,
            });
        }
        let m = sx[1];
        let vd = self.data(v).to_vec();
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &val)| val + vd[i % m])
            .collect();
        let needs = self.needs(x) || self.needs(v);
        let tensor = Tensor::new(sx, out).expect("add_row_vector output shape");
        Ok(self.push(tensor, Op::AddRowVector { x, v }, needs))
    }

    /// Mean over the innermost axis; the output drops that axis
    /// (a 1-D input reduces to shape `[1]`).
    pub fn mean_lastdim(&mut self, x: TensorId) -> TensorId {
        let sx = self.shape(x).to_vec();
        let l = *sx.last().expect("mean_lastdim input must have an axis");
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let xd = self.data(x);
        let out: Vec<f64> = (0..xd.len() / l)
            .map(|v| xd[v * l..(v + 1) * l].iter().sum::<f64>() / l as f64)
            .collect();
        let needs = self.needs(x);
        let tensor = Tensor::new(out_shape, out).expect("mean_lastdim output shape");
        self.push(tensor, Op::MeanLastDim { x }, needs)
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * factor).collect();
        let needs = self.needs(x);
        let tensor = Tensor::new(self.shape(x).to_vec(), out).expect("scale output shape");
        self.push(tensor, Op::Scale { x, factor }, needs)
    }

    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId, NumericsError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(NumericsError::DimensionMismatch {
                op: "transpose2d",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (n, m) = (sx[0], sx[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = xd[i * m + j];
            }
        }
        let needs = self.needs(x);
        let tensor = Tensor::new(vec![m, n], out).expect("transpose output shape");
        Ok(self.push(tensor, Op::Transpose2d { x }, needs))
    }

    /// Shape change by copy; element count must be preserved.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(NumericsError::DimensionMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.data(x).to_vec();
        let needs = self.needs(x);
        let tensor = Tensor::new(shape, out).expect("reshape output shape");
        Ok(self.push(tensor, Op::Reshape { x }, needs))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    /// Keeps every `stride`-th column of an `[C × L]` tensor starting at 0.
    pub fn downsample_stride(
        &mut self,
        x: TensorId,
        stride: usize,
    ) -> Result<TensorId, NumericsError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || stride == 0 {
            return Err(NumericsError::InvalidConfig(format!(
                "downsample_stride: need 2-D input and stride >= 1, got shape {sx:?} stride {stride}"
            )));
        }
        let (c, l) = (sx[0], sx[1]);
        let l_out = l.div_ceil(stride);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(c * l_out);
        for ch in 0..c {
            for j in 0..l_out {
                out.push(xd[ch * l + j * stride]);
            }
        }
        let needs = self.needs(x);
        let tensor = Tensor::new(vec![c, l_out], out).expect("downsample output shape");
        Ok(self.push(tensor, Op::DownsampleStride { x, stride }, needs))
    }

    /// Adjoint of [`Tape::downsample_stride`]: places column `i` of the
    /// input at column `i·stride` of a zero-initialized `[C × target_len]`
    /// output.
    pub fn upsample_to(
        &mut self,
        x: TensorId,
        stride: usize,
        target_len: usize,
    ) -> Result<TensorId, NumericsError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || stride == 0 {
            return Err(NumericsError::InvalidConfig(format!(
                "upsample_to: need 2-D input and stride >= 1, got shape {sx:?} stride {stride}"
            )));
        }
        let (c, l) = (sx[0], sx[1]);
        if l == 0 || (l - 1) * stride >= target_len || target_len > l * stride {
            return Err(NumericsError::InvalidConfig(format!(
                "upsample_to: {l} samples at stride {stride} do not tile target length {target_len}"
            )));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; c * target_len];
        for ch in 0..c {
            for i in 0..l {
                out[ch * target_len + i * stride] = xd[ch * l + i];
            }
        }
        let needs = self.needs(x);
        let tensor = Tensor::new(vec![c, target_len], out).expect("upsample output shape");
        Ok(self.push(tensor, Op::UpsampleTo { x, stride }, needs))
    }

    /// Mean squared error between two same-shape tensors, as a scalar.
    pub fn mse_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId, NumericsError> {
        if self.shape(pred) != self.shape(target) {
            return Err(NumericsError::DimensionMismatch {
                op: "mse_loss",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let n = self.data(pred).len() as f64;
        let loss = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(loss), Op::MseLoss { pred, target }, needs))
    }

    /// Cross-entropy of a 1-D logit vector against an integer class label,
    /// computed through a max-shifted log-sum-exp.
    pub fn cross_entropy_logits(
        &mut self,
        logits: TensorId,
        label: usize,
    ) -> Result<TensorId, NumericsError> {
        let sx = self.shape(logits).to_vec();
        if sx.len() != 1 {
            return Err(NumericsError::DimensionMismatch {
                op: "cross_entropy_logits",
                lhs: sx,
                rhs: vec![],
            });
        }
        let k = sx[0];
        if label >= k {
            return Err(NumericsError::InvalidInput(format!(
                "cross_entropy_logits: label {label} out of range for {k} classes"
            )));
        }
        let xd = self.data(logits);
        let max = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = xd.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let loss = max + sum.ln() - xd[label];
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits {
                logits,
                label,
                probs,
            },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Propagates `∂loss/∂node` to every reachable node recorded with
    /// `requires_grad`. `loss` must be scalar, and a tape can only run one
    /// backward sweep.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::Usage(
                "backward already ran on this tape; rebuild the tape for a new pass".into(),
            ));
        }
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(NumericsError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            backprop(&self.nodes, i, &gout, &mut grads);
            self.nodes[i].tensor.grad = Some(gout);
        }
        Ok(())
    }
}

fn acc<'a>(slot: &'a mut Option<Vec<f64>>, len: usize) -> &'a mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Applies node `i`'s gradient rule, accumulating into its inputs' buffers.
fn backprop(nodes: &[Node], i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let data = |id: TensorId| nodes[id.0].tensor.data();
    let shape = |id: TensorId| nodes[id.0].tensor.shape();
    let needs = |id: TensorId| nodes[id.0].needs_grad;
    let numel = |id: TensorId| nodes[id.0].tensor.numel();

    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (n, d) = (shape(*a)[0], shape(*a)[1]);
            let k = shape(*b)[1];
            if needs(*a) {
                // dA = dC · Bᵀ
                let ga = acc(&mut grads[a.0], n * d);
                let bd = data(*b);
                for r in 0..n {
                    for c in 0..d {
                        let mut s = 0.0;
                        for j in 0..k {
                            s += gout[r * k + j] * bd[c * k + j];
                        }
                        ga[r * d + c] += s;
                    }
                }
            }
            if needs(*b) {
                // dB = Aᵀ · dC
                let gb = acc(&mut grads[b.0], d * k);
                let ad = data(*a);
                for c in 0..d {
                    for j in 0..k {
                        let mut s = 0.0;
                        for r in 0..n {
                            s += ad[r * d + c] * gout[r * k + j];
                        }
                        gb[c * k + j] += s;
                    }
                }
            }
        }
        Op::Conv1dGrouped {
            input,
            kernel,
            groups,
            stride,
            padding,
        } => {
            let (m, l) = (shape(*input)[0], shape(*input)[1]);
            let (n, per_group, k) = (shape(*kernel)[0], shape(*kernel)[1], shape(*kernel)[2]);
            let l_out = (l + 2 * padding - k) / stride + 1;
            let n_per_group = n / groups;
            if needs(*input) {
                let kd = data(*kernel);
                let gi = acc(&mut grads[input.0], m * l);
                for oc in 0..n {
                    let g = oc / n_per_group;
                    for mc in 0..per_group {
                        let ic = g * per_group + mc;
                        for kk in 0..k {
                            let w = kd[(oc * per_group + mc) * k + kk];
                            if w == 0.0 {
                                continue;
                            }
                            for t in 0..l_out {
                                let u = t * stride + kk;
                                if u >= *padding && u - padding < l {
                                    gi[ic * l + (u - padding)] += w * gout[oc * l_out + t];
                                }
                            }
                        }
                    }
                }
            }
            if needs(*kernel) {
                let id = data(*input);
                let gk = acc(&mut grads[kernel.0], n * per_group * k);
                for oc in 0..n {
                    let g = oc / n_per_group;
                    for mc in 0..per_group {
                        let ic = g * per_group + mc;
                        for kk in 0..k {
                            let mut s = 0.0;
                            for t in 0..l_out {
                                let u = t * stride + kk;
                                if u >= *padding && u - padding < l {
                                    s += gout[oc * l_out + t] * id[ic * l + (u - padding)];
                                }
                            }
                            gk[(oc * per_group + mc) * k + kk] += s;
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let l = *shape(*x).last().unwrap();
            let xd = data(*x);
            let gd = data(*gain);
            let vectors = xd.len() / l;
            if needs(*x) {
                let gx = acc(&mut grads[x.0], xd.len());
                for v in 0..vectors {
                    let (mean, inv_std) = stats[v];
                    let row = &xd[v * l..(v + 1) * l];
                    let grow = &gout[v * l..(v + 1) * l];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for idx in 0..l {
                        let xhat = (row[idx] - mean) * inv_std;
                        let gi = grow[idx] * gd[idx];
                        sum_g += gi;
                        sum_gx += gi * xhat;
                    }
                    let mean_g = sum_g / l as f64;
                    let mean_gx = sum_gx / l as f64;
                    let gx_row = &mut gx[v * l..(v + 1) * l];
                    for idx in 0..l {
                        let xhat = (row[idx] - mean) * inv_std;
                        let gi = grow[idx] * gd[idx];
                        gx_row[idx] += inv_std * (gi - mean_g - xhat * mean_gx);
                    }
                }
            }
            if needs(*gain) {
                let gg = acc(&mut grads[gain.0], l);
                for v in 0..vectors {
                    let (mean, inv_std) = stats[v];
                    for idx in 0..l {
                        let xhat = (xd[v * l + idx] - mean) * inv_std;
                        gg[idx] += gout[v * l + idx] * xhat;
                    }
                }
            }
            if needs(*bias) {
                let gb = acc(&mut grads[bias.0], l);
                for v in 0..vectors {
                    for idx in 0..l {
                        gb[idx] += gout[v * l + idx];
                    }
                }
            }
        }
        Op::SoftmaxLastDim { x } => {
            if needs(*x) {
                let l = *shape(*x).last().unwrap();
                let yd = nodes[i].tensor.data();
                let gx = acc(&mut grads[x.0], yd.len());
                for v in 0..yd.len() / l {
                    let yrow = &yd[v * l..(v + 1) * l];
                    let grow = &gout[v * l..(v + 1) * l];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                    let gx_row = &mut gx[v * l..(v + 1) * l];
                    for idx in 0..l {
                        gx_row[idx] += yrow[idx] * (grow[idx] - dot);
                    }
                }
            }
        }
        Op::Relu { x } => {
            if needs(*x) {
                let xd = data(*x);
                let gx = acc(&mut grads[x.0], xd.len());
                for (idx, &v) in xd.iter().enumerate() {
                    if v > 0.0 {
                        gx[idx] += gout[idx];
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if needs(*x) {
                let gx = acc(&mut grads[x.0], mask.len());
                for idx in 0..mask.len() {
                    gx[idx] += gout[idx] * mask[idx];
                }
            }
        }
        Op::Add { a, b } => {
            for id in [a, b] {
                if needs(*id) {
                    let g = acc(&mut grads[id.0], gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
        }
        Op::AddRowVector { x, v } => {
            let m = shape(*v)[0];
            if needs(*x) {
                let gx = acc(&mut grads[x.0], gout.len());
                for (gi, &go) in gx.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
            if needs(*v) {
                let gv = acc(&mut grads[v.0], m);
                for (idx, &go) in gout.iter().enumerate() {
                    gv[idx % m] += go;
                }
            }
        }
        Op::MeanLastDim { x } => {
            if needs(*x) {
                let l = *shape(*x).last().unwrap();
                let gx = acc(&mut grads[x.0], numel(*x));
                for v in 0..gout.len() {
                    let g = gout[v] / l as f64;
                    for idx in 0..l {
                        gx[v * l + idx] += g;
                    }
                }
            }
        }
        Op::Scale { x, factor } => {
            if needs(*x) {
                let gx = acc(&mut grads[x.0], gout.len());
                for (gi, &go) in gx.iter_mut().zip(gout) {
                    *gi += factor * go;
                }
            }
        }
        Op::Transpose2d { x } => {
            if needs(*x) {
                let (n, m) = (shape(*x)[0], shape(*x)[1]);
                let gx = acc(&mut grads[x.0], n * m);
                // gout has shape [m, n]
                for j in 0..m {
                    for r in 0..n {
                        gx[r * m + j] += gout[j * n + r];
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if needs(*x) {
                let gx = acc(&mut grads[x.0], gout.len());
                for (gi, &go) in gx.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
        }
        Op::Sum { x } => {
            if needs(*x) {
                let gx = acc(&mut grads[x.0], numel(*x));
                for gi in gx.iter_mut() {
                    *gi += gout[0];
                }
            }
        }
        Op::DownsampleStride { x, stride } => {
            if needs(*x) {
                let (c, l) = (shape(*x)[0], shape(*x)[1]);
                let l_out = l.div_ceil(*stride);
                let gx = acc(&mut grads[x.0], c * l);
                for ch in 0..c {
                    for j in 0..l_out {
                        gx[ch * l + j * stride] += gout[ch * l_out + j];
                    }
                }
            }
        }
        Op::UpsampleTo { x, stride } => {
            if needs(*x) {
                let (c, l) = (shape(*x)[0], shape(*x)[1]);
                let target_len = nodes[i].tensor.shape()[1];
                let gx = acc(&mut grads[x.0], c * l);
                for ch in 0..c {
                    for idx in 0..l {
                        gx[ch * l + idx] += gout[ch * target_len + idx * stride];
                    }
                }
            }
        }
        Op::MseLoss { pred, target } => {
            let n = numel(*pred) as f64;
            let pd = data(*pred);
            let td = data(*target);
            if needs(*pred) {
                let gp = acc(&mut grads[pred.0], pd.len());
                for idx in 0..pd.len() {
                    gp[idx] += gout[0] * 2.0 * (pd[idx] - td[idx]) / n;
                }
            }
            if needs(*target) {
                let gt = acc(&mut grads[target.0], td.len());
                for idx in 0..td.len() {
                    gt[idx] -= gout[0] * 2.0 * (pd[idx] - td[idx]) / n;
                }
            }
        }
        Op::CrossEntropyLogits {
            logits,
            label,
            probs,
        } => {
            if needs(*logits) {
                let gl = acc(&mut grads[logits.0], probs.len());
                for (idx, &p) in probs.iter().enumerate() {
                    let indicator = if idx == *label { 1.0 } else { 0.0 };
                    gl[idx] += gout[0] * (p - indicator);
                }
            }
        }
    }
}

// ── Raw kernels shared by forward paths ─────────────────────────────────

fn matmul_raw(a: &[f64], b: &[f64], n: usize, d: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        for c in 0..d {
            let av = a[r * d + c];
            if av == 0.0 {
                continue;
            }
            let brow = &b[c * k..(c + 1) * k];
            let orow = &mut out[r * k..(r + 1) * k];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Per output element, taps accumulate in ascending (channel-in-group, tap)
/// order; the per-channel oracle in the tests relies on that order to match
/// bitwise.
#[allow(clippy::too_many_arguments)]
fn conv1d_grouped_raw(
    input: &[f64],
    kernel: &[f64],
    m: usize,
    l: usize,
    n: usize,
    k: usize,
    groups: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let per_group = m / groups;
    let n_per_group = n / groups;
    let l_out = (l + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; n * l_out];
    for oc in 0..n {
        let g = oc / n_per_group;
        let orow = &mut out[oc * l_out..(oc + 1) * l_out];
        for mc in 0..per_group {
            let ic = g * per_group + mc;
            let irow = &input[ic * l..(ic + 1) * l];
            for kk in 0..k {
                let w = kernel[(oc * per_group + mc) * k + kk];
                if stride == 1 {
                    // t + kk - padding must land in [0, l)
                    let t_lo = padding.saturating_sub(kk);
                    let t_hi = (l + padding - kk).min(l_out);
                    for t in t_lo..t_hi {
                        orow[t] += w * irow[t + kk - padding];
                    }
                } else {
                    for (t, o) in orow.iter_mut().enumerate() {
                        let u = t * stride + kk;
                        if u >= padding && u - padding < l {
                            *o += w * irow[u - padding];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.leaf(&t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[vec![1.0, 2.0]]));
        let b = tape.leaf(&t2(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv_one_tap_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, 2.0, 3.0]]));
        let k = tape.leaf(&Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv1d_grouped(x, k, 1, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_grouped_adjacent_pair_sums() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]]));
        let k = tape.leaf(&Tensor::new(vec![2, 1, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let y = tape.conv1d_grouped(x, k, 2, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2]);
        assert_eq!(tape.value(y).data(), &[2.0, 2.0, 4.0, 4.0]);
    }

    #[test]
    fn conv_rejects_indivisible_groups() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3, 8]));
        let k = tape.leaf(&Tensor::zeros(vec![3, 1, 3]));
        assert!(matches!(
            tape.conv1d_grouped(x, k, 2, 1, 0),
            Err(NumericsError::InvalidConfig(_))
        ));
    }

    #[test]
    fn conv_rejects_empty_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 2]));
        let k = tape.leaf(&Tensor::zeros(vec![1, 1, 5]));
        assert!(tape.conv1d_grouped(x, k, 1, 1, 0).is_err());
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![5.0, 5.0, 5.0, 5.0]]));
        let g = tape.leaf(&Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_unit_variance_pair() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, -1.0]]));
        let g = tape.leaf(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let out = tape.value(y).data();
        assert!((out[0] - expect).abs() < 1e-12);
        assert!((out[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_independent() {
        let base = t2(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let mut perturbed = base.clone();
        perturbed.data_mut()[4] += 10.0; // row 1 only

        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(input);
            let g = tape.leaf(&Tensor::new(vec![3], vec![1.0; 3]).unwrap());
            let b = tape.leaf(&Tensor::new(vec![3], vec![0.0; 3]).unwrap());
            let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
            tape.value(y).data().to_vec()
        };
        let ya = run(&base);
        let yb = run(&perturbed);
        assert_eq!(&ya[0..3], &yb[0..3]);
        assert_ne!(&ya[3..6], &yb[3..6]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_lastdim(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.leaf(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let yb = tape.softmax_lastdim(big);
        let out = tape.value(yb).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0] > 1.0 - 1e-12 && out[1] < 1e-12);
    }

    #[test]
    fn relu_clamps_negative() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(x, y);
        let z = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = tape.leaf(&Tensor::new(vec![1000], vec![1.0; 1000]).unwrap());
        let y = tape.dropout(x, 0.25, true, &mut rng).unwrap();
        let out = tape.value(y).data();
        let kept = out.iter().filter(|&&v| v != 0.0).count();
        assert!(out
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        // Loose binomial bound around 750.
        assert!((600..900).contains(&kept), "kept {kept}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let loss = tape.cross_entropy_logits(x, 0).unwrap();
        assert!((tape.value(loss).data()[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        assert!(matches!(
            tape.cross_entropy_logits(x, 2),
            Err(NumericsError::InvalidInput(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::Usage(_))
        ));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(NumericsError::Usage(_))));
    }

    #[test]
    fn downsample_then_upsample_round_trip_positions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]));
        let d = tape.downsample_stride(x, 2).unwrap();
        assert_eq!(tape.value(d).data(), &[1.0, 3.0, 5.0]);
        let u = tape.upsample_to(d, 2, 5).unwrap();
        assert_eq!(tape.value(u).data(), &[1.0, 0.0, 3.0, 0.0, 5.0]);
    }

    #[test]
    fn forward_backward_deterministic_across_runs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut tape = Tape::new();
            let x = tape.leaf(
                &Tensor::uniform(vec![4, 6], 1.0, &mut rng).with_grad(),
            );
            let w = tape.leaf(
                &Tensor::uniform(vec![6, 3], 1.0, &mut rng).with_grad(),
            );
            let h = tape.matmul(x, w).unwrap();
            let r = tape.relu(h);
            let dr = tape.dropout(r, 0.3, true, &mut rng).unwrap();
            let s = tape.sum(dr);
            tape.backward(s).unwrap();
            (
                tape.value(s).data().to_vec(),
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (s1, gx1, gw1) = run();
        let (s2, gx2, gw2) = run();
        assert_eq!(s1, s2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
