use super::kernels::{self, ConvGeom, MatRef};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    BatchMatMul {
        trans_a: bool,
        trans_b: bool,
    },
    Reshape,
    Transpose2d,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MulScalar,
    Relu6,
    Sigmoid,
    Ln,
    Sum,
    SumSquares,
    SliceLast {
        start: usize,
        end: usize,
    },
    SpatialSubsample {
        stride: usize,
    },
    Dense {
        has_bias: bool,
    },
    Depthwise(ConvGeom),
    Conv2d {
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool,
    SoftmaxCrossEntropy {
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Surrogate {
        jacobian: Vec<f64>,
    },
    WeightedSum,
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch-norm normalization source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-3;

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    madds: u64,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds executed by forward ops so far.
    pub fn madds(&self) -> u64 {
        self.madds
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, vec![], requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<NodeId>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            grad: None,
        });
        id
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(value, op, inputs, rg)
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// 2-d matrix product `(n, m) x (m, k) -> (n, k)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3, false, false)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Batched product of rank-3 tensors, `op(a[i]) x op(b[i])` for every batch entry.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TensorError::Shape {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (m, ka) = if trans_a {
            (sa[2], sa[1])
        } else {
            (sa[1], sa[2])
        };
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if ka != kb {
            return Err(bad());
        }
        let batch = sa[0];
        let mut out = vec![0.0; batch * m * n];
        let (ea, eb) = (sa[1] * sa[2], sb[1] * sb[2]);
        for i in 0..batch {
            let av = MatRef::new(&self.data(a)[i * ea..(i + 1) * ea], sa[1], sa[2]).t_if(trans_a);
            let bv = MatRef::new(&self.data(b)[i * eb..(i + 1) * eb], sb[1], sb[2]).t_if(trans_b);
            kernels::gemm(av, bv, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
        }
        self.madds += (batch * m * ka * n) as u64;
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push_op(value, Op::BatchMatMul { trans_a, trans_b }, vec![a, b]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(value, Op::Reshape, vec![x]))
    }

    pub fn transpose_2d(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose_2d expects a matrix, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let out = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push_op(value, Op::Transpose2d, vec![x]))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_op(v, Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_op(v, Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_op(v, Op::Mul, vec![a, b]))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.map(x, |v| v * factor);
        self.push_op(v, Op::Scale(factor), vec![x])
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::Shape {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let f = self.value(s).item();
        let v = self.map(x, |v| v * f);
        Ok(self.push_op(v, Op::MulScalar, vec![x, s]))
    }

    /// `min(max(x, 0), 6)`.
    pub fn relu6(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, |v| v.clamp(0.0, 6.0));
        self.push_op(v, Op::Relu6, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, kernels::sigmoid);
        self.push_op(v, Op::Sigmoid, vec![x])
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if self.data(x).iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(TensorError::NonFinite("ln"));
        }
        let v = self.map(x, f64::ln);
        Ok(self.push_op(v, Op::Ln, vec![x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.data(x).iter().sum());
        self.push_op(v, Op::Sum, vec![x])
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum_squares());
        self.push_op(v, Op::SumSquares, vec![x])
    }

    // ------------------------------------------------------------------
    // Feature-map plumbing
    // ------------------------------------------------------------------

    /// Keeps channels `[start, end)` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let c = *s.last().expect("rank >= 1");
        if start >= end || end > c {
            return Err(TensorError::Invalid(format!(
                "channel range {start}..{end} invalid for {c} channels"
            )));
        }
        let width = end - start;
        let rows = self.value(x).numel() / c;
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&d[r * c + start..r * c + end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = width;
        let v = Tensor::new(shape, out)?;
        Ok(self.push_op(v, Op::SliceLast { start, end }, vec![x]))
    }

    /// First `floor(ratio * C)` channels.
    pub fn slice_channels_prefix(&mut self, x: NodeId, ratio: f64) -> Result<NodeId> {
        let c = *self.shape(x).last().expect("rank >= 1");
        let keep = prefix_channels(ratio, c)?;
        self.slice_last(x, 0, keep)
    }

    /// Keeps positions `(i, j)` with `i % stride == 0 && j % stride == 0`.
    pub fn spatial_subsample(&mut self, x: NodeId, stride: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || stride == 0 {
            return Err(TensorError::Invalid(format!(
                "spatial_subsample expects (N,H,W,C) and stride >= 1, got {s:?}, stride {stride}"
            )));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let d = self.data(x);
        let mut out = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ((b * h + i * stride) * w + j * stride) * c;
                    out.extend_from_slice(&d[base..base + c]);
                }
            }
        }
        let v = Tensor::new(vec![n, ho, wo, c], out)?;
        Ok(self.push_op(v, Op::SpatialSubsample { stride }, vec![x]))
    }

    /// Per-position linear map over the last axis: `(.., C_in) x (C_in, C_out) [+ b]`.
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        self.dense("conv1x1", x, w, bias)
    }

    /// `(N, D) x (D, K) + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::Invalid(format!(
                "linear expects (N, D), got {:?}",
                self.shape(x)
            )));
        }
        self.dense("linear", x, w, Some(b))
    }

    fn dense(
        &mut self,
        op: &'static str,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let cin = *sx.last().expect("rank >= 1");
        if sw.len() != 2 || sw[0] != cin {
            return Err(TensorError::Shape {
                op,
                lhs: sx,
                rhs: sw,
            });
        }
        let cout = sw[1];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::Shape {
                    op,
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let rows = self.value(x).numel() / cin;
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = bias {
            let bd = self.data(b);
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(bd);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(
            MatRef::new(self.data(x), rows, cin),
            MatRef::new(self.data(w), cin, cout),
            beta,
            &mut out,
        );
        self.madds += (rows * cin * cout) as u64;
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        let v = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push_op(
            v,
            Op::Dense {
                has_bias: bias.is_some(),
            },
            inputs,
        ))
    }

    fn feature_dims(&self, op: &'static str, x: NodeId) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(TensorError::Invalid(format!(
                "{op} expects an (N,H,W,C) feature map, got {s:?}"
            )));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// 3x3 depthwise convolution, padding 1, stride 1; kernel `(3, 3, C)`.
    pub fn depthwise_conv3x3(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.depthwise_conv(x, w, 1)
    }

    /// Depthwise `k x k` convolution with "same" padding; kernel `(k, k, C)`.
    pub fn depthwise_conv(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (n, h, wd, c) = self.feature_dims("depthwise_conv", x)?;
        let sw = self.shape(w).to_vec();
        if sw.len() != 3 || sw[0] != sw[1] || sw[0] % 2 == 0 || sw[2] != c || stride == 0 {
            return Err(TensorError::Shape {
                op: "depthwise_conv",
                lhs: self.shape(x).to_vec(),
                rhs: sw,
            });
        }
        let g = ConvGeom::new(n, h, wd, c, sw[0], stride);
        let out = kernels::depthwise_forward(self.data(x), self.data(w), &g);
        self.madds += (n * g.ho * g.wo * g.k * g.k * c) as u64;
        let v = Tensor::new(vec![n, g.ho, g.wo, c], out)?;
        Ok(self.push_op(v, Op::Depthwise(g), vec![x, w]))
    }

    /// Dense `k x k` convolution with "same" padding; kernel `(k, k, C_in, C_out)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (n, h, wd, c) = self.feature_dims("conv2d", x)?;
        let sw = self.shape(w).to_vec();
        if sw.len() != 4 || sw[0] != sw[1] || sw[0] % 2 == 0 || sw[2] != c || stride == 0 {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: sw,
            });
        }
        let (k, cout) = (sw[0], sw[3]);
        let g = ConvGeom::new(n, h, wd, c, k, stride);
        let cols = kernels::im2col(self.data(x), &g);
        let rows = n * g.ho * g.wo;
        let mut out = vec![0.0; rows * cout];
        kernels::gemm(
            MatRef::new(&cols, rows, k * k * c),
            MatRef::new(self.data(w), k * k * c, cout),
            0.0,
            &mut out,
        );
        self.madds += (rows * k * k * c * cout) as u64;
        let v = Tensor::new(vec![n, g.ho, g.wo, cout], out)?;
        Ok(self.push_op(v, Op::Conv2d { geom: g, cols }, vec![x, w]))
    }

    /// Per-channel normalization over `N*H*W` (or `N` for rank-2 inputs).
    ///
    /// In [`BnMode::Train`] the batch statistics are returned so the caller can
    /// fold them into its running averages.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<'_>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let c = *self.shape(x).last().expect("rank >= 1");
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::Shape {
                    op: "batch_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let d = self.data(x);
        let rows = d.len() / c;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(&d[r * c..(r + 1) * c]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let dv = d[r * c + ch] - mean[ch];
                        var[ch] += dv * dv;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::Invalid(format!(
                        "running statistics have {} / {} entries, expected {c}",
                        mean.len(),
                        var.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            for ch in 0..c {
                let i = r * c + ch;
                xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let train = matches!(mode, BnMode::Train);
        let id = self.push_op(
            v,
            Op::BatchNorm {
                xhat,
                inv_std,
                train,
            },
            vec![x, gamma, beta],
        );
        Ok((id, stats))
    }

    /// `(N, H, W, C) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, h, w, c) = self.feature_dims("global_avg_pool", x)?;
        let d = self.data(x);
        let mut out = vec![0.0; n * c];
        let hw = h * w;
        for b in 0..n {
            let o = &mut out[b * c..(b + 1) * c];
            for p in 0..hw {
                let base = (b * hw + p) * c;
                for ch in 0..c {
                    o[ch] += d[base + ch];
                }
            }
            o.iter_mut().for_each(|v| *v /= hw as f64);
        }
        let v = Tensor::new(vec![n, c], out)?;
        Ok(self.push_op(v, Op::GlobalAvgPool, vec![x]))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let d = self.data(logits);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax_cross_entropy logits"));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for b in 0..n {
            let row = &d[b * k..(b + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[b * k..(b + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            probs[b * k..(b + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + max - row[labels[b]];
        }
        let v = Tensor::scalar(loss / n as f64);
        Ok(self.push_op(
            v,
            Op::SoftmaxCrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            vec![logits],
        ))
    }

    // ------------------------------------------------------------------
    // Straight-through plumbing
    // ------------------------------------------------------------------

    /// Vector node whose forward value is `value` and whose backward pass uses
    /// `jacobian` (row-major, `value.len() x inputs.len()`) against the scalar
    /// `inputs`. Used for indicator functions that are evaluated hard in the
    /// forward pass but differentiated through a smooth relaxation.
    pub fn surrogate(
        &mut self,
        inputs: &[NodeId],
        value: Vec<f64>,
        jacobian: Vec<f64>,
    ) -> Result<NodeId> {
        if inputs.iter().any(|&i| self.value(i).numel() != 1) {
            return Err(TensorError::Invalid(
                "surrogate inputs must be scalars".into(),
            ));
        }
        if jacobian.len() != value.len() * inputs.len() || value.is_empty() {
            return Err(TensorError::Invalid(format!(
                "surrogate jacobian has {} entries, expected {} x {}",
                jacobian.len(),
                value.len(),
                inputs.len()
            )));
        }
        let v = Tensor::new(vec![value.len()], value)?;
        Ok(self.push_op(v, Op::Surrogate { jacobian }, inputs.to_vec()))
    }

    /// `sum_i w[i] * x_i` for a weight vector node `w` and same-shaped candidates.
    /// Candidates with weight exactly zero are skipped in the forward sum.
    pub fn weighted_sum(&mut self, weights: NodeId, candidates: &[NodeId]) -> Result<NodeId> {
        let n = candidates.len();
        if n == 0 || self.shape(weights) != [n] {
            return Err(TensorError::Invalid(format!(
                "weighted_sum: {} candidates, weights of shape {:?}",
                n,
                self.shape(weights)
            )));
        }
        for &c in &candidates[1..] {
            self.same_shape("weighted_sum", candidates[0], c)?;
        }
        let w = self.data(weights).to_vec();
        let mut out = vec![0.0; self.value(candidates[0]).numel()];
        for (&wi, &c) in w.iter().zip(candidates) {
            if wi == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.data(c)) {
                *o += wi * v;
            }
        }
        let v = Tensor::new(self.shape(candidates[0]).to_vec(), out)?;
        let mut inputs = vec![weights];
        inputs.extend_from_slice(candidates);
        Ok(self.push_op(v, Op::WeightedSum, inputs))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Populates the gradient of every leaf that requires one. Leaves the loss
    /// does not depend on receive zeros. A graph can be differentiated once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::StaleGraph);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                self.nodes[i].grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (input, d) in self.backward_node(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, v)| *a += v),
                    slot => *slot = Some(d),
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let want = |k: usize| self.nodes[ins[k].0].requires_grad;
        let mut out = Vec::with_capacity(ins.len());
        match &node.op {
            Op::Leaf => {}
            Op::BatchMatMul { trans_a, trans_b } => {
                let (a, b) = (ins[0], ins[1]);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let sc = node.value.shape();
                let (batch, m, n) = (sc[0], sc[1], sc[2]);
                let (ea, eb) = (sa[1] * sa[2], sb[1] * sb[2]);
                let (ad, bd) = (self.data(a), self.data(b));
                if want(0) {
                    let mut da = vec![0.0; ad.len()];
                    for k in 0..batch {
                        let gv = MatRef::new(&g[k * m * n..(k + 1) * m * n], m, n);
                        let bv =
                            MatRef::new(&bd[k * eb..(k + 1) * eb], sb[1], sb[2]).t_if(*trans_b);
                        let dst = &mut da[k * ea..(k + 1) * ea];
                        // d op(A) = G op(B)^T; transpose back when A was transposed.
                        if *trans_a {
                            kernels::gemm(bv, gv.t(), 0.0, dst);
                        } else {
                            kernels::gemm(gv, bv.t(), 0.0, dst);
                        }
                    }
                    out.push((a, da));
                }
                if want(1) {
                    let mut db = vec![0.0; bd.len()];
                    for k in 0..batch {
                        let gv = MatRef::new(&g[k * m * n..(k + 1) * m * n], m, n);
                        let av =
                            MatRef::new(&ad[k * ea..(k + 1) * ea], sa[1], sa[2]).t_if(*trans_a);
                        let dst = &mut db[k * eb..(k + 1) * eb];
                        // d op(B) = op(A)^T G
                        if *trans_b {
                            kernels::gemm(gv.t(), av, 0.0, dst);
                        } else {
                            kernels::gemm(av.t(), gv, 0.0, dst);
                        }
                    }
                    out.push((b, db));
                }
            }
            Op::Reshape => out.push((ins[0], g.to_vec())),
            Op::Transpose2d => {
                let s = self.shape(ins[0]);
                let (r, c) = (s[0], s[1]);
                // g has shape (c, r)
                let d = (0..r * c).map(|idx| g[(idx % c) * r + idx / c]).collect();
                out.push((ins[0], d));
            }
            Op::Add => {
                out.push((ins[0], g.to_vec()));
                out.push((ins[1], g.to_vec()));
            }
            Op::Sub => {
                out.push((ins[0], g.to_vec()));
                out.push((ins[1], g.iter().map(|v| -v).collect()));
            }
            Op::Mul => {
                let (a, b) = (self.data(ins[0]), self.data(ins[1]));
                if want(0) {
                    out.push((ins[0], g.iter().zip(b).map(|(g, b)| g * b).collect()));
                }
                if want(1) {
                    out.push((ins[1], g.iter().zip(a).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Scale(f) => out.push((ins[0], g.iter().map(|v| v * f).collect())),
            Op::MulScalar => {
                let s = self.value(ins[1]).item();
                if want(0) {
                    out.push((ins[0], g.iter().map(|v| v * s).collect()));
                }
                if want(1) {
                    let ds = g.iter().zip(self.data(ins[0])).map(|(g, x)| g * x).sum();
                    out.push((ins[1], vec![ds]));
                }
            }
            Op::Relu6 => {
                let x = self.data(ins[0]);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > 0.0 && x < 6.0 { g } else { 0.0 })
                    .collect();
                out.push((ins[0], d));
            }
            Op::Sigmoid => {
                let y = node.value.data();
                out.push((
                    ins[0],
                    g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                ));
            }
            Op::Ln => {
                let x = self.data(ins[0]);
                out.push((ins[0], g.iter().zip(x).map(|(g, x)| g / x).collect()));
            }
            Op::Sum => out.push((ins[0], vec![g[0]; self.value(ins[0]).numel()])),
            Op::SumSquares => {
                let x = self.data(ins[0]);
                out.push((ins[0], x.iter().map(|x| 2.0 * x * g[0]).collect()));
            }
            Op::SliceLast { start, end } => {
                let c = *self.shape(ins[0]).last().unwrap();
                let width = end - start;
                let rows = g.len() / width;
                let mut d = vec![0.0; rows * c];
                for r in 0..rows {
                    d[r * c + start..r * c + end].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                out.push((ins[0], d));
            }
            Op::SpatialSubsample { stride } => {
                let s = self.shape(ins[0]);
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h.div_ceil(*stride), w.div_ceil(*stride));
                let mut d = vec![0.0; n * h * w * c];
                for b in 0..n {
                    for i in 0..ho {
                        for j in 0..wo {
                            let src = ((b * ho + i) * wo + j) * c;
                            let dst = ((b * h + i * stride) * w + j * stride) * c;
                            d[dst..dst + c].copy_from_slice(&g[src..src + c]);
                        }
                    }
                }
                out.push((ins[0], d));
            }
            Op::Dense { has_bias } => {
                let (x, w) = (self.data(ins[0]), self.data(ins[1]));
                let sw = self.shape(ins[1]);
                let (cin, cout) = (sw[0], sw[1]);
                let rows = x.len() / cin;
                let gv = MatRef::new(g, rows, cout);
                if want(0) {
                    let mut dx = vec![0.0; x.len()];
                    kernels::gemm(gv, MatRef::new(w, cin, cout).t(), 0.0, &mut dx);
                    out.push((ins[0], dx));
                }
                if want(1) {
                    let mut dw = vec![0.0; w.len()];
                    kernels::gemm(MatRef::new(x, rows, cin).t(), gv, 0.0, &mut dw);
                    out.push((ins[1], dw));
                }
                if *has_bias && want(2) {
                    let mut db = vec![0.0; cout];
                    for r in 0..rows {
                        for (d, v) in db.iter_mut().zip(&g[r * cout..(r + 1) * cout]) {
                            *d += v;
                        }
                    }
                    out.push((ins[2], db));
                }
            }
            Op::Depthwise(geom) => {
                let (dx, dw) = kernels::depthwise_backward(
                    self.data(ins[0]),
                    self.data(ins[1]),
                    g,
                    geom,
                    want(0),
                    want(1),
                );
                out.extend(dx.map(|d| (ins[0], d)));
                out.extend(dw.map(|d| (ins[1], d)));
            }
            Op::Conv2d { geom, cols } => {
                let w = self.data(ins[1]);
                let sw = self.shape(ins[1]);
                let kkc = sw[0] * sw[1] * sw[2];
                let cout = sw[3];
                let rows = geom.n * geom.ho * geom.wo;
                let gv = MatRef::new(g, rows, cout);
                if want(0) {
                    let mut dcols = vec![0.0; rows * kkc];
                    kernels::gemm(gv, MatRef::new(w, kkc, cout).t(), 0.0, &mut dcols);
                    out.push((ins[0], kernels::col2im(&dcols, geom)));
                }
                if want(1) {
                    let mut dw = vec![0.0; w.len()];
                    kernels::gemm(MatRef::new(cols, rows, kkc).t(), gv, 0.0, &mut dw);
                    out.push((ins[1], dw));
                }
            }
            Op::BatchNorm {
                xhat,
                inv_std,
                train,
            } => {
                let gamma = self.data(ins[1]);
                let c = gamma.len();
                let rows = g.len() / c;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
                if want(0) {
                    let mut dx = vec![0.0; g.len()];
                    let m = rows as f64;
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            let scale = gamma[ch] * inv_std[ch];
                            dx[i] = if *train {
                                scale * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                    out.push((ins[0], dx));
                }
                if want(1) {
                    out.push((ins[1], sum_gx));
                }
                if want(2) {
                    out.push((ins[2], sum_g));
                }
            }
            Op::GlobalAvgPool => {
                let s = self.shape(ins[0]);
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let mut d = vec![0.0; n * hw * c];
                for b in 0..n {
                    for p in 0..hw {
                        for ch in 0..c {
                            d[(b * hw + p) * c + ch] = g[b * c + ch] / hw as f64;
                        }
                    }
                }
                out.push((ins[0], d));
            }
            Op::SoftmaxCrossEntropy { probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / n as f64).collect();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * k + l] -= g[0] / n as f64;
                }
                out.push((ins[0], d));
            }
            Op::Surrogate { jacobian } => {
                let k = ins.len();
                for (j, &input) in ins.iter().enumerate() {
                    if want(j) {
                        let d = g
                            .iter()
                            .enumerate()
                            .map(|(r, gv)| gv * jacobian[r * k + j])
                            .sum();
                        out.push((input, vec![d]));
                    }
                }
            }
            Op::WeightedSum => {
                let w = self.data(ins[0]);
                if want(0) {
                    let dw = ins[1..]
                        .iter()
                        .map(|&c| self.data(c).iter().zip(g).map(|(x, g)| x * g).sum())
                        .collect();
                    out.push((ins[0], dw));
                }
                for (k, &c) in ins[1..].iter().enumerate() {
                    if want(k + 1) {
                        out.push((c, g.iter().map(|v| v * w[k]).collect()));
                    }
                }
            }
        }
        out
    }
}

/// Number of channels kept by a prefix slice at `ratio`.
pub fn prefix_channels(ratio: f64, channels: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(TensorError::Invalid(format!(
            "channel ratio {ratio} outside (0, 1]"
        )));
    }
    let keep = (ratio * channels as f64 + 1e-9).floor() as usize;
    if keep == 0 {
        return Err(TensorError::DegenerateSlice { ratio, channels });
    }
    Ok(keep.min(channels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, m, k) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[n, k]);
        for i in 0..n {
            for j in 0..k {
                let mut acc = 0.0;
                for l in 0..m {
                    acc += a.data()[i * m + l] * b.data()[l * k + j];
                }
                out.data_mut()[i * k + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::eye(2));
        let b = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
        let a = g.constant(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[5, 4]);
        let b = rand_tensor(&mut rng, &[4, 3]);
        let mut g = Graph::new();
        let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(an, bn).unwrap();
        assert!(g.value(c).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        assert_eq!(g.madds(), 5 * 4 * 3);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn relu6_clamps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![7.0, -1.0, 2.5]).unwrap());
        let y = g.relu6(x);
        assert_eq!(g.value(y).data(), &[6.0, 0.0, 2.5]);
    }

    #[test]
    fn transpose_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 5]);
        let mut g = Graph::new();
        let x = g.constant(a.clone());
        let t = g.transpose_2d(x).unwrap();
        assert_eq!(g.shape(t), &[5, 3]);
        let tt = g.transpose_2d(t).unwrap();
        assert_eq!(g.value(tt), &a);
    }

    #[test]
    fn reshape_rejects_count_change() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.reshape(x, &[4]),
            Err(TensorError::Reshape { .. })
        ));
        assert!(g.reshape(x, &[3, 2]).is_ok());
    }

    #[test]
    fn channel_prefix_slices() {
        let x = Tensor::from_fn(&[1, 1, 1, 8], |i| i as f64);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let quarter = g.slice_channels_prefix(xn, 0.25).unwrap();
        assert_eq!(g.value(quarter).data(), &[0.0, 1.0]);
        let eighth = g.slice_channels_prefix(xn, 0.125).unwrap();
        assert_eq!(g.value(eighth).data(), &[0.0]);
        let full = g.slice_channels_prefix(xn, 1.0).unwrap();
        assert_eq!(g.value(full), &x);
        assert!(matches!(
            g.slice_channels_prefix(xn, 0.1),
            Err(TensorError::DegenerateSlice { .. })
        ));
    }

    #[test]
    fn slice_backward_scatters_into_prefix() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 2, 2, 4], 1.0));
        let s = g.slice_channels_prefix(x, 0.5).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap().data();
        for (i, v) in grad.iter().enumerate() {
            assert_eq!(*v, if i % 4 < 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn spatial_subsample_positions() {
        let x = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let s = g.spatial_subsample(xn, 2).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 2.0, 8.0, 10.0]);
        let same = g.spatial_subsample(xn, 1).unwrap();
        assert_eq!(g.value(same), &x);
        let odd = g.constant(Tensor::zeros(&[1, 5, 3, 2]));
        let s = g.spatial_subsample(odd, 2).unwrap();
        assert_eq!(g.shape(s), &[1, 3, 2, 2]);
    }

    #[test]
    fn conv1x1_identity_and_flattened_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 4]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let id = g.constant(Tensor::eye(4));
        let y = g.conv1x1(xn, id, None).unwrap();
        assert_eq!(g.value(y), &x);

        let wn = g.constant(w.clone());
        let y = g.conv1x1(xn, wn, None).unwrap();
        let flat = g.reshape(xn, &[18, 4]).unwrap();
        let mm = g.matmul(flat, wn).unwrap();
        assert_eq!(g.value(y).data(), g.value(mm).data());

        // direct per-position loop
        let mut expect = vec![0.0; 18 * 5];
        for p in 0..18 {
            for o in 0..5 {
                for i in 0..4 {
                    expect[p * 5 + o] += x.data()[p * 4 + i] * w.data()[i * 5 + o];
                }
            }
        }
        let got = g.value(y).data();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1x1_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 4]));
        assert!(matches!(
            g.conv1x1(x, w, None),
            Err(TensorError::Shape { .. })
        ));
    }

    fn naive_depthwise(x: &Tensor, w: &Tensor) -> Tensor {
        let s = x.shape();
        let (n, h, wd, c) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(s);
        for b in 0..n {
            for i in 0..h {
                for j in 0..wd {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (ii, jj) =
                                    (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * h + ii as usize) * wd + jj as usize) * c + ch;
                                acc += x.data()[xi] * w.data()[(di * 3 + dj) * c + ch];
                            }
                        }
                        out.data_mut()[((b * h + i) * wd + j) * c + ch] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn depthwise_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 5, 4, 3]);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let center = Tensor::from_fn(&[3, 3, 3], |i| if i / 3 == 4 { 1.0 } else { 0.0 });
        let wc = g.constant(center);
        let y = g.depthwise_conv3x3(xn, wc).unwrap();
        assert_eq!(g.value(y), &x);

        let zero = g.constant(Tensor::zeros(&[3, 3, 3]));
        let y = g.depthwise_conv3x3(xn, zero).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let w = rand_tensor(&mut rng, &[3, 3, 3]);
        let wn = g.constant(w.clone());
        let y = g.depthwise_conv3x3(xn, wn).unwrap();
        assert!(g.value(y).max_abs_diff(&naive_depthwise(&x, &w)) < 1e-12);

        let bad = g.constant(Tensor::zeros(&[3, 3, 4]));
        assert!(g.depthwise_conv3x3(xn, bad).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_gradient() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[2, 4]));
        let l = g.softmax_cross_entropy(logits, &[1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        g.backward(l).unwrap();
        let grad = g.grad(logits).unwrap().data();
        // (softmax - onehot) / N
        assert!((grad[0] - 0.125).abs() < 1e-15);
        assert!((grad[1] - (0.25 - 1.0) / 2.0).abs() < 1e-15);

        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[3]),
            Err(TensorError::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
        let nan = g.param(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(
            g.softmax_cross_entropy(nan, &[0]),
            Err(TensorError::NonFinite(_))
        ));
    }

    #[test]
    fn global_avg_pool_of_constant_map() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 3, 4], 2.5));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.shape(p), &[2, 4]);
        assert!(g.value(p).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn scalar_product_rule_and_unused_param() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(-2.0));
        let unused = g.param(Tensor::zeros(&[2, 2]));
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), -2.0);
        assert_eq!(g.grad(y).unwrap().item(), 3.0);
        assert_eq!(g.grad(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn second_backward_is_stale() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let s = g.sum_squares(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::StaleGraph)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut g = Graph::new();
            let x = g.param(rand_tensor(&mut rng, &[2, 4, 4, 3]));
            let w = g.param(rand_tensor(&mut rng, &[3, 3, 3]));
            let y = g.depthwise_conv3x3(x, w).unwrap();
            let y = g.relu6(y);
            let l = g.sum_squares(y);
            g.backward(l).unwrap();
            (g.grad(x).unwrap().clone(), g.grad(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_norm_train_statistics() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.5]);
        assert_eq!(stats.var, vec![1.25]);
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_one_hot_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, &[3, 3]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        let mut g = Graph::new();
        let (an, bn) = (g.constant(a), g.constant(b.clone()));
        let w = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let s = g.weighted_sum(w, &[an, bn]).unwrap();
        assert_eq!(g.value(s), &b);
    }
}
