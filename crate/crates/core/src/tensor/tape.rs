use std::sync::Arc;

use super::kernels;
use super::{Result, Scalar, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor(pub(crate) usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Multiply by a compile-time constant scalar.
    ScalarMul(f64, usize),
    AddScalar(usize),
    /// Multiply a tensor by a scalar *tensor* (shape []); the scalar is a
    /// differentiable operand, which is how learnable step sizes enter the
    /// graph.
    SMulT(usize, usize),
    MatMulNN(usize, usize),
    MatMulNT(usize, usize),
    MatMulTN(usize, usize),
    Conv2d(usize, usize),
    ConvInputGrad(usize, usize),
    ConvWeightGrad(usize, usize),
    Relu(usize),
    Step,
    MaxPool(usize, Arc<Vec<u32>>),
    PoolScatter(usize, Arc<Vec<u32>>),
    PoolGather(usize, Arc<Vec<u32>>),
    Reshape(usize),
    Exp(usize),
    Powf(f64, usize),
    RowSum(usize),
    BroadcastRow(usize),
    ChannelSum(usize),
    BroadcastChannel(usize),
    SumAll(usize),
    BroadcastScalar(usize),
    LogSoftmax(usize),
}

struct Node<S> {
    op: Op,
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
}

/// Single-owner differentiation tape. Appended to by every operation,
/// never mutated in place, so saved forward values stay valid for any
/// number of backward passes.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grad_mode: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_mode: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: Tensor) -> &[S] {
        &self.nodes[t.0].values
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn leaf(&mut self, values: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        assert_eq!(values.len(), numel(&shape), "leaf value count must match shape");
        self.push(Op::Leaf, shape, values, requires_grad && self.grad_mode)
    }

    pub fn scalar(&mut self, v: S) -> Tensor {
        self.leaf(vec![v], vec![], false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        self.leaf(vec![S::zero(); n], shape, false)
    }

    pub fn ones(&mut self, shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        self.leaf(vec![S::one(); n], shape, false)
    }

    /// Re-enters a tensor's current values as a fresh leaf, cutting the
    /// gradient path to its history (stop-gradient).
    pub fn detach(&mut self, t: Tensor, requires_grad: bool) -> Tensor {
        let values = self.nodes[t.0].values.clone();
        let shape = self.nodes[t.0].shape.clone();
        self.leaf(values, shape, requires_grad)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<S>, requires_grad: bool) -> Tensor {
        self.nodes.push(Node { op, shape, values, requires_grad });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        self.grad_mode && ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Add(a.0, b.0), shape, values, rg))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Sub(a.0, b.0), shape, values, rg))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Mul(a.0, b.0), shape, values, rg))
    }

    pub fn scalar_mul(&mut self, c: f64, a: Tensor) -> Tensor {
        let cs = S::from_f64(c);
        let values = self.values(a).iter().map(|&x| cs * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0]);
        self.push(Op::ScalarMul(c, a.0), shape, values, rg)
    }

    pub fn add_scalar(&mut self, c: f64, a: Tensor) -> Tensor {
        let cs = S::from_f64(c);
        let values = self.values(a).iter().map(|&x| x + cs).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0]);
        self.push(Op::AddScalar(a.0), shape, values, rg)
    }

    /// `s` must be a scalar tensor (shape []); scales `t` elementwise.
    pub fn smul_t(&mut self, s: Tensor, t: Tensor) -> Result<Tensor> {
        if !self.shape(s).is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "smul_t",
                detail: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.values(s)[0];
        let values = self.values(t).iter().map(|&x| sv * x).collect();
        let shape = self.nodes[t.0].shape.clone();
        let rg = self.rg(&[s.0, t.0]);
        Ok(self.push(Op::SMulT(s.0, t.0), shape, values, rg))
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let z = S::zero();
        let values = self.values(a).iter().map(|&x| if x > z { x } else { z }).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0]);
        self.push(Op::Relu(a.0), shape, values, rg)
    }

    /// Heaviside step with step(0) = 0; its own derivative is defined as 0.
    pub fn step(&mut self, a: Tensor) -> Tensor {
        let z = S::zero();
        let o = S::one();
        let values = self.values(a).iter().map(|&x| if x > z { o } else { z }).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Step, shape, values, false)
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let values = self.values(a).iter().map(|&x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0]);
        self.push(Op::Exp(a.0), shape, values, rg)
    }

    /// Elementwise power with constant exponent; defined for positive bases.
    pub fn powf(&mut self, a: Tensor, p: f64) -> Tensor {
        let ps = S::from_f64(p);
        let values = self.values(a).iter().map(|&x| x.powf(ps)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0]);
        self.push(Op::Powf(p, a.0), shape, values, rg)
    }

    // ── matrix products ──────────────────────────────────────────

    fn mat_dims(&self, op: &'static str, t: Tensor) -> Result<(usize, usize)> {
        match self.shape(t) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank-2 operand, got {:?}", s),
            }),
        }
    }

    /// a[m,k] @ b[k,n]
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, ka) = self.mat_dims("matmul", a)?;
        let (kb, n) = self.mat_dims("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("cannot contract [{m},{ka}] with [{kb},{n}]"),
            });
        }
        let values = kernels::matmul_nn(self.values(a), self.values(b), m, ka, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::MatMulNN(a.0, b.0), vec![m, n], values, rg))
    }

    /// a[m,k] @ b[n,k]^T
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, ka) = self.mat_dims("matmul_nt", a)?;
        let (n, kb) = self.mat_dims("matmul_nt", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("cannot contract [{m},{ka}] with [{n},{kb}]^T"),
            });
        }
        let values = kernels::matmul_nt(self.values(a), self.values(b), m, ka, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::MatMulNT(a.0, b.0), vec![m, n], values, rg))
    }

    /// a[k,m]^T @ b[k,n]
    pub fn matmul_tn(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ka, m) = self.mat_dims("matmul_tn", a)?;
        let (kb, n) = self.mat_dims("matmul_tn", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                detail: format!("cannot contract [{ka},{m}]^T with [{kb},{n}]"),
            });
        }
        let values = kernels::matmul_tn(self.values(a), self.values(b), m, ka, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::MatMulTN(a.0, b.0), vec![m, n], values, rg))
    }

    // ── convolution / pooling ────────────────────────────────────

    fn conv_dims(
        &self,
        op: &'static str,
        x: Tensor,
        w: Tensor,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        let (b, c, h, wd) = match self.shape(x) {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    detail: format!("expected [B,C,H,W] input, got {:?}", s),
                })
            }
        };
        let (k, cw) = match self.shape(w) {
            [k, c, 3, 3] => (*k, *c),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    detail: format!("expected [K,C,3,3] kernel, got {:?}", s),
                })
            }
        };
        if c != cw {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("input has {c} channels, kernel expects {cw}"),
            });
        }
        Ok((b, c, h, wd, k))
    }

    /// 3x3 convolution, stride 1, zero same-padding. x: [B,C,H,W], w: [K,C,3,3].
    pub fn conv2d(&mut self, x: Tensor, w: Tensor) -> Result<Tensor> {
        let (b, c, h, wd, k) = self.conv_dims("conv2d", x, w)?;
        let values = kernels::conv2d(self.values(x), self.values(w), b, c, h, wd, k);
        let rg = self.rg(&[x.0, w.0]);
        Ok(self.push(Op::Conv2d(x.0, w.0), vec![b, k, h, wd], values, rg))
    }

    /// Adjoint of conv2d in its input: gy: [B,K,H,W], w: [K,C,3,3] -> [B,C,H,W].
    pub fn conv2d_input_grad(&mut self, gy: Tensor, w: Tensor) -> Result<Tensor> {
        let (b, k, h, wd) = match self.shape(gy) {
            [b, k, h, w] => (*b, *k, *h, *w),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_input_grad",
                    detail: format!("expected [B,K,H,W] cotangent, got {:?}", s),
                })
            }
        };
        let (kw, c) = match self.shape(w) {
            [k, c, 3, 3] => (*k, *c),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_input_grad",
                    detail: format!("expected [K,C,3,3] kernel, got {:?}", s),
                })
            }
        };
        if k != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_input_grad",
                detail: format!("cotangent has {k} channels, kernel produces {kw}"),
            });
        }
        let values = kernels::conv2d_input_grad(self.values(gy), self.values(w), b, c, h, wd, k);
        let rg = self.rg(&[gy.0, w.0]);
        Ok(self.push(Op::ConvInputGrad(gy.0, w.0), vec![b, c, h, wd], values, rg))
    }

    /// Adjoint of conv2d in its kernel: x: [B,C,H,W], gy: [B,K,H,W] -> [K,C,3,3].
    pub fn conv2d_weight_grad(&mut self, x: Tensor, gy: Tensor) -> Result<Tensor> {
        let (b, c, h, wd) = match self.shape(x) {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_weight_grad",
                    detail: format!("expected [B,C,H,W] input, got {:?}", s),
                })
            }
        };
        let (bg, k, hg, wg) = match self.shape(gy) {
            [b, k, h, w] => (*b, *k, *h, *w),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_weight_grad",
                    detail: format!("expected [B,K,H,W] cotangent, got {:?}", s),
                })
            }
        };
        if b != bg || h != hg || wd != wg {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_weight_grad",
                detail: format!("input {:?} vs cotangent {:?}", self.shape(x), self.shape(gy)),
            });
        }
        let values = kernels::conv2d_weight_grad(self.values(x), self.values(gy), b, c, h, wd, k);
        let rg = self.rg(&[x.0, gy.0]);
        Ok(self.push(Op::ConvWeightGrad(x.0, gy.0), vec![k, c, 3, 3], values, rg))
    }

    /// 2x2 max pooling with stride 2; ties go to the first maximum in scan
    /// order so backward routing is deterministic.
    pub fn max_pool2d(&mut self, x: Tensor) -> Result<Tensor> {
        let (b, c, h, w) = match self.shape(x) {
            [b, c, h, w] if h % 2 == 0 && w % 2 == 0 => (*b, *c, *h, *w),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "max_pool2d",
                    detail: format!("expected [B,C,H,W] with even H,W, got {:?}", s),
                })
            }
        };
        let (values, idx) = kernels::max_pool2x2(self.values(x), b, c, h, w);
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::MaxPool(x.0, Arc::new(idx)), vec![b, c, h / 2, w / 2], values, rg))
    }

    fn pool_scatter(&mut self, g: Tensor, idx: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Tensor {
        let mut values = vec![S::zero(); numel(&out_shape)];
        for (&i, &v) in idx.iter().zip(self.values(g)) {
            values[i as usize] = v;
        }
        let rg = self.rg(&[g.0]);
        self.push(Op::PoolScatter(g.0, idx), out_shape, values, rg)
    }

    fn pool_gather(&mut self, v: Tensor, idx: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Tensor {
        let src = self.values(v);
        let values = idx.iter().map(|&i| src[i as usize]).collect();
        let rg = self.rg(&[v.0]);
        self.push(Op::PoolGather(v.0, idx), out_shape, values, rg)
    }

    // ── shape / reductions ───────────────────────────────────────

    pub fn reshape(&mut self, a: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.values(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape(a), shape),
            });
        }
        let values = self.nodes[a.0].values.clone();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::Reshape(a.0), shape, values, rg))
    }

    /// [rows, cols] -> [rows]
    pub fn row_sum(&mut self, a: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.mat_dims("row_sum", a)?;
        let src = self.values(a);
        let values = (0..rows)
            .map(|r| {
                let mut acc = S::zero();
                for &v in &src[r * cols..(r + 1) * cols] {
                    acc += v;
                }
                acc
            })
            .collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::RowSum(a.0), vec![rows], values, rg))
    }

    /// [rows] -> [rows, cols], repeating each entry along its row.
    pub fn broadcast_row(&mut self, a: Tensor, cols: usize) -> Result<Tensor> {
        let rows = match self.shape(a) {
            [r] => *r,
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_row",
                    detail: format!("expected rank-1 operand, got {:?}", s),
                })
            }
        };
        let src = self.values(a);
        let mut values = Vec::with_capacity(rows * cols);
        for &v in src {
            values.extend(std::iter::repeat(v).take(cols));
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::BroadcastRow(a.0), vec![rows, cols], values, rg))
    }

    /// [B,C,H,W] -> [C]
    pub fn channel_sum(&mut self, a: Tensor) -> Result<Tensor> {
        let (b, c, h, w) = match self.shape(a) {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_sum",
                    detail: format!("expected [B,C,H,W], got {:?}", s),
                })
            }
        };
        let hw = h * w;
        let src = self.values(a);
        let mut values = vec![S::zero(); c];
        for img in 0..b {
            for (ci, acc) in values.iter_mut().enumerate() {
                let plane = &src[(img * c + ci) * hw..(img * c + ci + 1) * hw];
                for &v in plane {
                    *acc += v;
                }
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::ChannelSum(a.0), vec![c], values, rg))
    }

    /// [C] -> [B,C,H,W], repeating each entry over batch and space.
    pub fn broadcast_channel(&mut self, a: Tensor, like: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = match like {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_channel",
                    detail: format!("target shape must be [B,C,H,W], got {:?}", s),
                })
            }
        };
        if self.shape(a) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_channel",
                detail: format!("operand {:?} does not match {c} channels", self.shape(a)),
            });
        }
        let hw = h * w;
        let src = self.values(a).to_vec();
        let mut values = Vec::with_capacity(b * c * hw);
        for _ in 0..b {
            for &v in &src {
                values.extend(std::iter::repeat(v).take(hw));
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::BroadcastChannel(a.0), vec![b, c, h, w], values, rg))
    }

    /// Any shape -> scalar.
    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let mut acc = S::zero();
        for &v in self.values(a) {
            acc += v;
        }
        let rg = self.rg(&[a.0]);
        self.push(Op::SumAll(a.0), vec![], vec![acc], rg)
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.values(a).len().max(1);
        let s = self.sum_all(a);
        self.scalar_mul(1.0 / n as f64, s)
    }

    /// Scalar -> any shape.
    pub fn broadcast_scalar(&mut self, a: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if !self.shape(a).is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_scalar",
                detail: format!("operand has shape {:?}", self.shape(a)),
            });
        }
        let v = self.values(a)[0];
        let values = vec![v; numel(&shape)];
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::BroadcastScalar(a.0), shape, values, rg))
    }

    /// Row-wise log-softmax over a [rows, cols] matrix.
    pub fn log_softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.mat_dims("log_softmax", a)?;
        let values = kernels::log_softmax(self.values(a), rows, cols);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::LogSoftmax(a.0), vec![rows, cols], values, rg))
    }

    // ── composites ───────────────────────────────────────────────

    /// Batch normalization over current-batch statistics, per channel.
    /// Built from primitives, so second-order gradients come for free.
    pub fn batch_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let (b, h, w) = match shape.as_slice() {
            [b, _, h, w] => (*b, *h, *w),
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    detail: format!("expected [B,C,H,W], got {:?}", s),
                })
            }
        };
        let count = (b * h * w) as f64;
        let sum = self.channel_sum(x)?;
        let mean = self.scalar_mul(1.0 / count, sum);
        let mean_b = self.broadcast_channel(mean, &shape)?;
        let centered = self.sub(x, mean_b)?;
        let sq = self.mul(centered, centered)?;
        let var_sum = self.channel_sum(sq)?;
        let var = self.scalar_mul(1.0 / count, var_sum);
        let var_eps = self.add_scalar(eps, var);
        let inv_std = self.powf(var_eps, -0.5);
        let inv_std_b = self.broadcast_channel(inv_std, &shape)?;
        let normed = self.mul(centered, inv_std_b)?;
        let gamma_b = self.broadcast_channel(gamma, &shape)?;
        let beta_b = self.broadcast_channel(beta, &shape)?;
        let scaled = self.mul(normed, gamma_b)?;
        self.add(scaled, beta_b)
    }

    /// Mean negative log-likelihood of `labels` under row-wise
    /// log-probabilities. Together with [`Tape::log_softmax`] this forms
    /// the cross-entropy loss.
    pub fn nll_loss(&mut self, log_probs: Tensor, labels: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.mat_dims("nll_loss", log_probs)?;
        if labels.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "nll_loss",
                detail: format!("{} labels for {} rows", labels.len(), rows),
            });
        }
        let mut pick = vec![S::zero(); rows * cols];
        let w = S::from_f64(-1.0 / rows as f64);
        for (r, &y) in labels.iter().enumerate() {
            if y >= cols {
                return Err(TensorError::LabelOutOfRange { label: y, classes: cols });
            }
            pick[r * cols + y] = w;
        }
        let weights = self.leaf(pick, vec![rows, cols], false);
        let prod = self.mul(log_probs, weights)?;
        Ok(self.sum_all(prod))
    }

    pub fn cross_entropy(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        let lp = self.log_softmax(logits)?;
        self.nll_loss(lp, labels)
    }

    // ── reverse pass ─────────────────────────────────────────────

    /// Reverse-mode sweep from scalar `loss` to every tensor in `wrt`.
    ///
    /// With `create_graph = true` the emitted gradient computations are
    /// themselves differentiable, enabling a second backward pass through
    /// the result. With `allow_unused = true`, parameters that did not
    /// participate in the graph receive zero gradients instead of an error.
    pub fn backward(
        &mut self,
        loss: Tensor,
        wrt: &[Tensor],
        create_graph: bool,
        allow_unused: bool,
    ) -> Result<Vec<Tensor>> {
        if !self.shape(loss).is_empty() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let frontier = loss.0 + 1;
        let saved_mode = self.grad_mode;
        self.grad_mode = create_graph;
        let result = self.backward_inner(loss, frontier, wrt, allow_unused);
        self.grad_mode = saved_mode;
        result
    }

    fn backward_inner(
        &mut self,
        loss: Tensor,
        frontier: usize,
        wrt: &[Tensor],
        allow_unused: bool,
    ) -> Result<Vec<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; frontier];
        grads[loss.0] = Some(self.leaf(vec![S::one()], vec![], false));

        for id in (0..frontier).rev() {
            let Some(g) = grads[id] else { continue };
            if !self.nodes[id].requires_grad && id != loss.0 {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::Step => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g)?;
                    self.accumulate(&mut grads, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, g)?;
                    let ng = self.scalar_mul(-1.0, g);
                    self.accumulate(&mut grads, b, ng)?;
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, Tensor(b))?;
                    self.accumulate(&mut grads, a, ga)?;
                    let gb = self.mul(g, Tensor(a))?;
                    self.accumulate(&mut grads, b, gb)?;
                }
                Op::ScalarMul(c, a) => {
                    let ga = self.scalar_mul(c, g);
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::AddScalar(a) => {
                    self.accumulate(&mut grads, a, g)?;
                }
                Op::SMulT(s, t) => {
                    let gt_full = self.mul(g, Tensor(t))?;
                    let gs = self.sum_all(gt_full);
                    self.accumulate(&mut grads, s, gs)?;
                    let gt = self.smul_t(Tensor(s), g)?;
                    self.accumulate(&mut grads, t, gt)?;
                }
                Op::MatMulNN(a, b) => {
                    let ga = self.matmul_nt(g, Tensor(b))?;
                    self.accumulate(&mut grads, a, ga)?;
                    let gb = self.matmul_tn(Tensor(a), g)?;
                    self.accumulate(&mut grads, b, gb)?;
                }
                Op::MatMulNT(a, b) => {
                    let ga = self.matmul(g, Tensor(b))?;
                    self.accumulate(&mut grads, a, ga)?;
                    let gb = self.matmul_tn(g, Tensor(a))?;
                    self.accumulate(&mut grads, b, gb)?;
                }
                Op::MatMulTN(a, b) => {
                    let ga = self.matmul_nt(Tensor(b), g)?;
                    self.accumulate(&mut grads, a, ga)?;
                    let gb = self.matmul(Tensor(a), g)?;
                    self.accumulate(&mut grads, b, gb)?;
                }
                Op::Conv2d(x, w) => {
                    let gx = self.conv2d_input_grad(g, Tensor(w))?;
                    self.accumulate(&mut grads, x, gx)?;
                    let gw = self.conv2d_weight_grad(Tensor(x), g)?;
                    self.accumulate(&mut grads, w, gw)?;
                }
                Op::ConvInputGrad(gy, w) => {
                    let ggy = self.conv2d(g, Tensor(w))?;
                    self.accumulate(&mut grads, gy, ggy)?;
                    let gw = self.conv2d_weight_grad(g, Tensor(gy))?;
                    self.accumulate(&mut grads, w, gw)?;
                }
                Op::ConvWeightGrad(x, gy) => {
                    let gx = self.conv2d_input_grad(Tensor(gy), g)?;
                    self.accumulate(&mut grads, x, gx)?;
                    let ggy = self.conv2d(Tensor(x), g)?;
                    self.accumulate(&mut grads, gy, ggy)?;
                }
                Op::Relu(a) => {
                    let mask = self.step(Tensor(a));
                    let ga = self.mul(mask, g)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::MaxPool(a, idx) => {
                    let shape = self.nodes[a].shape.clone();
                    let ga = self.pool_scatter(g, idx, shape);
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::PoolScatter(src, idx) => {
                    let shape = self.nodes[src].shape.clone();
                    let gs = self.pool_gather(g, idx, shape);
                    self.accumulate(&mut grads, src, gs)?;
                }
                Op::PoolGather(src, idx) => {
                    let shape = self.nodes[src].shape.clone();
                    let gs = self.pool_scatter(g, idx, shape);
                    self.accumulate(&mut grads, src, gs)?;
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a].shape.clone();
                    let ga = self.reshape(g, shape)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul(Tensor(id), g)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Powf(p, a) => {
                    let lower = self.powf(Tensor(a), p - 1.0);
                    let prod = self.mul(lower, g)?;
                    let ga = self.scalar_mul(p, prod);
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::RowSum(a) => {
                    let cols = self.nodes[a].shape[1];
                    let ga = self.broadcast_row(g, cols)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::BroadcastRow(a) => {
                    let ga = self.row_sum(g)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::ChannelSum(a) => {
                    let shape = self.nodes[a].shape.clone();
                    let ga = self.broadcast_channel(g, &shape)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::BroadcastChannel(a) => {
                    let ga = self.channel_sum(g)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a].shape.clone();
                    let ga = self.broadcast_scalar(g, shape)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::BroadcastScalar(a) => {
                    let ga = self.sum_all(g);
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::LogSoftmax(a) => {
                    let cols = self.nodes[id].shape[1];
                    let soft = self.exp(Tensor(id));
                    let gsum = self.row_sum(g)?;
                    let gsum_b = self.broadcast_row(gsum, cols)?;
                    let corr = self.mul(soft, gsum_b)?;
                    let ga = self.sub(g, corr)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for (index, t) in wrt.iter().enumerate() {
            match grads.get(t.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    if allow_unused {
                        let shape = self.nodes[t.0].shape.clone();
                        out.push(self.zeros(shape));
                    } else {
                        return Err(TensorError::UnusedParameter { index });
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&mut self, grads: &mut [Option<Tensor>], target: usize, g: Tensor) -> Result<()> {
        if target >= grads.len() || !self.nodes[target].requires_grad {
            return Ok(());
        }
        grads[target] = match grads[target] {
            Some(prev) => Some(self.add(prev, g)?),
            None => Some(g),
        };
        Ok(())
    }
}
