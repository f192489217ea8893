//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every node that requires one. Nodes created
//! with [`Graph::constant`] (and everything computed only from constants) are
//! skipped during the backward sweep.

use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    /// `b`'s shape is a suffix of `a`'s shape.
    AddSuffix(Var, Var),
    /// `x: [B, C, h, w]` times `g: [B, C]` broadcast over space.
    ChannelScale(Var, Var),
    OneMinus(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    PrefixMean(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
    LogSoftmaxRows(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    SumRows(Var),
    Sum(Var),
    PairwiseDist(Var),
    /// Rounds to a fixed grid; the gradient passes straight through.
    Snap(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// An evaluation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `x` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn binary_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(&[a]);
        self.push(v, Op::Abs(a), ng)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x);
        let ng = self.ng(&[a]);
        self.push(v, Op::OneMinus(a), ng)
    }

    /// Broadcast add where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "cannot broadcast {sb:?} onto {sa:?}"
        );
        let inner = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % inner])
            .collect();
        let v = Tensor::new(sa.to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::AddSuffix(a, b), ng)
    }

    /// Scales every channel of a `[B, C, h, w]` map by the matching entry of `g: [B, C]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Var {
        let (tx, tg) = (self.value(x), self.value(g));
        let s = tx.shape();
        assert_eq!(s.len(), 4, "channel_scale expects a rank-4 map");
        assert_eq!(tg.shape(), &s[..2], "gate shape must be [B, C]");
        let hw = s[2] * s[3];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * tg.data()[i / hw])
            .collect();
        let v = Tensor::new(s.to_vec(), data);
        let ng = self.ng(&[x, g]);
        self.push(v, Op::ChannelScale(x, g), ng)
    }

    /// 2-D convolution. `x: [B, Ci, H, W]`, `w: [Co, Ci, kh, kw]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let (xs, ws) = (tx.shape(), tw.shape());
        assert_eq!(xs.len(), 4, "conv2d input must be rank 4");
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (bsz, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad));
        let kdim = ci * kh * kw;
        let p = ho * wo;
        let mut cols = vec![0.0; bsz * kdim * p];
        for n in 0..bsz {
            let xin = &tx.data()[n * ci * h * wd..(n + 1) * ci * h * wd];
            let col = &mut cols[n * kdim * p..(n + 1) * kdim * p];
            im2col(xin, ci, h, wd, kh, kw, stride, pad, ho, wo, col);
        }
        let mut out = vec![0.0; bsz * co * p];
        for n in 0..bsz {
            gemm(
                co,
                kdim,
                p,
                1.0,
                tw.data(),
                (kdim as isize, 1),
                &cols[n * kdim * p..],
                (p as isize, 1),
                0.0,
                &mut out[n * co * p..],
                (p as isize, 1),
            );
        }
        if let Some(b) = b {
            let tb = self.value(b);
            assert_eq!(tb.shape(), &[co], "conv2d bias shape");
            for n in 0..bsz {
                for c in 0..co {
                    let bias = tb.data()[c];
                    for o in &mut out[(n * co + c) * p..(n * co + c + 1) * p] {
                        *o += bias;
                    }
                }
            }
        }
        let v = Tensor::new(vec![bsz, co, ho, wo], out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            ng,
        )
    }

    /// Per-sample, per-channel normalization over spatial positions with a
    /// learned per-channel affine map. `eps` is added to the variance.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        assert_eq!(s.len(), 4, "instance_norm expects a rank-4 map");
        let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        assert_eq!(tg.shape(), &[c]);
        assert_eq!(tb.shape(), &[c]);
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; bsz * c];
        let mut out = vec![0.0; tx.numel()];
        for n in 0..bsz {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                let slice = &tx.data()[base..base + hw];
                let mean = slice.iter().sum::<f64>() / hw as f64;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[n * c + ch] = inv;
                let (g, b) = (tg.data()[ch], tb.data()[ch]);
                for i in 0..hw {
                    let xh = (slice[i] - mean) * inv;
                    xhat[base + i] = xh;
                    out[base + i] = g * xh + b;
                }
            }
        }
        let v = Tensor::new(s, out);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            v,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Mean over spatial positions: `[B, C, h, w] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert_eq!(s.len(), 4, "global_avg_pool expects a rank-4 map");
        let hw = s[2] * s[3];
        let data = tx
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let v = Tensor::new(vec![s[0], s[1]], data);
        let ng = self.ng(&[x]);
        self.push(v, Op::GlobalAvgPool(x), ng)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 2, "matmul lhs must be rank 2");
        assert_eq!(tb.rank(), 2, "matmul rhs must be rank 2");
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, m) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            1.0,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (m as isize, 1),
            0.0,
            &mut out,
            (m as isize, 1),
        );
        let v = Tensor::new(vec![n, m], out);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rank(), 2);
        let (n, m) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = ta.data()[i * m + j];
            }
        }
        let v = Tensor::new(vec![m, n], out);
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        let ng = self.ng(&[a]);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Row lookup in `table: [V, w]`; ids must be `< V`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = self.value(table);
        assert_eq!(tt.rank(), 2);
        let w = tt.shape()[1];
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            out.extend_from_slice(tt.row(id));
        }
        let v = Tensor::new(vec![ids.len(), w], out);
        let ng = self.ng(&[table]);
        self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Running mean along axis 1 of `[B, T, w]`: `y[t] = mean(x[0..=t])`.
    pub fn prefix_mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        assert_eq!(s.len(), 3, "prefix_mean expects [B, T, w]");
        let (bsz, t, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; tx.numel()];
        let mut acc = vec![0.0; w];
        for n in 0..bsz {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ti in 0..t {
                let base = (n * t + ti) * w;
                let inv = 1.0 / (ti + 1) as f64;
                for j in 0..w {
                    acc[j] += tx.data()[base + j];
                    out[base + j] = acc[j] * inv;
                }
            }
        }
        let v = Tensor::new(s, out);
        let ng = self.ng(&[x]);
        self.push(v, Op::PrefixMean(x), ng)
    }

    /// Selects rows of `x: [n, w]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let w = tx.shape()[1];
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(tx.row(i));
        }
        let v = Tensor::new(vec![idx.len(), w], out);
        let ng = self.ng(&[x]);
        self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// L2-normalizes every row of `x: [n, d]`. Rows with zero norm stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let r = tx.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            if norm > 0.0 {
                for j in 0..d {
                    out[i * d + j] = r[j] / norm;
                }
            }
        }
        let v = Tensor::new(vec![n, d], out);
        let ng = self.ng(&[x]);
        self.push(v, Op::NormalizeRows { x, norms }, ng)
    }

    /// Row-wise dot product: `[n, d] . [n, d] -> [n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        assert_eq!(ta.rank(), 2);
        let n = ta.shape()[0];
        let data = (0..n)
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let v = Tensor::new(vec![n], data);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::RowDot(a, b), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let (n, m) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let r = tx.row(i);
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..m {
                out[i * m + j] = r[j] - lse;
            }
        }
        let v = Tensor::new(vec![n, m], out);
        let ng = self.ng(&[x]);
        self.push(v, Op::LogSoftmaxRows(x), ng)
    }

    /// `y[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        assert_eq!(tx.shape()[0], idx.len());
        let data = idx.iter().enumerate().map(|(i, &j)| tx.row(i)[j]).collect();
        let v = Tensor::new(vec![idx.len()], data);
        let ng = self.ng(&[x]);
        self.push(
            v,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let n = tx.shape()[0];
        let data = (0..n).map(|i| tx.row(i).iter().sum()).collect();
        let v = Tensor::new(vec![n], data);
        let ng = self.ng(&[x]);
        self.push(v, Op::SumRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        let ng = self.ng(&[x]);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Euclidean distance matrix between the rows of `x: [n, d]`.
    pub fn pairwise_dist(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let n = tx.shape()[0];
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = tx
                    .row(i)
                    .iter()
                    .zip(tx.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let v = Tensor::new(vec![n, n], out);
        let ng = self.ng(&[x]);
        self.push(v, Op::PairwiseDist(x), ng)
    }

    /// Rounds every entry to the nearest multiple of `step` (a power of two).
    /// The backward pass treats the rounding as the identity.
    pub fn snap(&mut self, a: Var, step: f64) -> Var {
        let inv = 1.0 / step;
        let v = self.value(a).map(|x| (x * inv).round() * step);
        let ng = self.ng(&[a]);
        self.push(v, Op::Snap(a), ng)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], gy.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], gy.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], gy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gy.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], Tensor::new(ta.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = gy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], Tensor::new(tb.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], gy.map(|g| g * c));
                }
            }
            Op::AddScalar(a) | Op::Snap(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], gy.clone());
                }
            }
            Op::OneMinus(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], gy.map(|g| -g));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let d = gy
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(ta.shape().to_vec(), d));
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let d = gy
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(y.shape().to_vec(), d));
                }
            }
            Op::Abs(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let d = gy
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -*g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(ta.shape().to_vec(), d));
                }
            }
            Op::AddSuffix(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], gy.clone());
                }
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let inner = tb.numel();
                    let mut d = vec![0.0; inner];
                    for (i, g) in gy.data().iter().enumerate() {
                        d[i % inner] += g;
                    }
                    accumulate(&mut grads[b.0], Tensor::new(tb.shape().to_vec(), d));
                }
            }
            Op::ChannelScale(x, g) => {
                let (tx, tg) = (self.value(*x), self.value(*g));
                let s = tx.shape();
                let hw = s[2] * s[3];
                if self.wants(*x) {
                    let d = gy
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * tg.data()[i / hw])
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::new(s.to_vec(), d));
                }
                if self.wants(*g) {
                    let d = gy
                        .data()
                        .chunks(hw)
                        .zip(tx.data().chunks(hw))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads[g.0], Tensor::new(tg.shape().to_vec(), d));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (xs, ws) = (tx.shape(), tw.shape());
                let (bsz, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (y.shape()[2], y.shape()[3]);
                let kdim = ci * kh * kw;
                let p = ho * wo;
                if self.wants(*w) {
                    let mut dw = vec![0.0; co * kdim];
                    for n in 0..bsz {
                        // dW += dY_n (co x p) * cols_n^T (p x kdim)
                        gemm(
                            co,
                            p,
                            kdim,
                            1.0,
                            &gy.data()[n * co * p..],
                            (p as isize, 1),
                            &cols[n * kdim * p..],
                            (1, p as isize),
                            1.0,
                            &mut dw,
                            (kdim as isize, 1),
                        );
                    }
                    accumulate(&mut grads[w.0], Tensor::new(ws.to_vec(), dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; co];
                        for n in 0..bsz {
                            for (c, slot) in db.iter_mut().enumerate() {
                                *slot += gy.data()[(n * co + c) * p..(n * co + c + 1) * p]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                        accumulate(&mut grads[b.0], Tensor::new(vec![co], db));
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; tx.numel()];
                    let mut dcol = vec![0.0; kdim * p];
                    for n in 0..bsz {
                        // dcols = W^T (kdim x co) * dY_n (co x p)
                        gemm(
                            kdim,
                            co,
                            p,
                            1.0,
                            tw.data(),
                            (1, kdim as isize),
                            &gy.data()[n * co * p..],
                            (p as isize, 1),
                            0.0,
                            &mut dcol,
                            (p as isize, 1),
                        );
                        let dxn = &mut dx[n * ci * h * wd..(n + 1) * ci * h * wd];
                        col2im(&dcol, ci, h, wd, kh, kw, *stride, *pad, ho, wo, dxn);
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xs.to_vec(), dx));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = y.shape();
                let (bsz, c, hw) = (s[0], s[1], s[2] * s[3]);
                let tg = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; y.numel()];
                let want_x = self.wants(*x);
                for n in 0..bsz {
                    for ch in 0..c {
                        let base = (n * c + ch) * hw;
                        let g = &gy.data()[base..base + hw];
                        let xh = &xhat[base..base + hw];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for i in 0..hw {
                            sum_g += g[i];
                            sum_gx += g[i] * xh[i];
                        }
                        dgamma[ch] += sum_gx;
                        dbeta[ch] += sum_g;
                        if want_x {
                            let gam = tg.data()[ch];
                            let inv = inv_std[n * c + ch];
                            let m = hw as f64;
                            for i in 0..hw {
                                dx[base + i] =
                                    gam * inv * (g[i] - sum_g / m - xh[i] * sum_gx / m);
                            }
                        }
                    }
                }
                if want_x {
                    accumulate(&mut grads[x.0], Tensor::new(s.to_vec(), dx));
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], Tensor::new(vec![c], dgamma));
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], Tensor::new(vec![c], dbeta));
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let s = tx.shape();
                    let hw = s[2] * s[3];
                    let d = (0..tx.numel())
                        .map(|i| gy.data()[i / hw] / hw as f64)
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::new(s.to_vec(), d));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                if self.wants(*a) {
                    // dA = dY (n x m) * B^T (m x k)
                    let mut d = vec![0.0; n * k];
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        gy.data(),
                        (m as isize, 1),
                        tb.data(),
                        (1, m as isize),
                        0.0,
                        &mut d,
                        (k as isize, 1),
                    );
                    accumulate(&mut grads[a.0], Tensor::new(vec![n, k], d));
                }
                if self.wants(*b) {
                    // dB = A^T (k x n) * dY (n x m)
                    let mut d = vec![0.0; k * m];
                    gemm(
                        k,
                        n,
                        m,
                        1.0,
                        ta.data(),
                        (1, k as isize),
                        gy.data(),
                        (m as isize, 1),
                        0.0,
                        &mut d,
                        (m as isize, 1),
                    );
                    accumulate(&mut grads[b.0], Tensor::new(vec![k, m], d));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (m, n) = (y.shape()[0], y.shape()[1]);
                    let mut d = vec![0.0; n * m];
                    for i in 0..m {
                        for j in 0..n {
                            d[j * m + i] = gy.data()[i * n + j];
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(vec![n, m], d));
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads[a.0], gy.clone().reshape(&shape));
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tt = self.value(*table);
                    let w = tt.shape()[1];
                    let mut d = vec![0.0; tt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..w {
                            d[id * w + j] += gy.data()[r * w + j];
                        }
                    }
                    accumulate(&mut grads[table.0], Tensor::new(tt.shape().to_vec(), d));
                }
            }
            Op::PrefixMean(x) => {
                if self.wants(*x) {
                    let s = y.shape();
                    let (bsz, t, w) = (s[0], s[1], s[2]);
                    let mut d = vec![0.0; y.numel()];
                    let mut acc = vec![0.0; w];
                    for n in 0..bsz {
                        acc.iter_mut().for_each(|a| *a = 0.0);
                        for ti in (0..t).rev() {
                            let base = (n * t + ti) * w;
                            let inv = 1.0 / (ti + 1) as f64;
                            for j in 0..w {
                                acc[j] += gy.data()[base + j] * inv;
                                d[base + j] = acc[j];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(s.to_vec(), d));
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let w = tx.shape()[1];
                    let mut d = vec![0.0; tx.numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..w {
                            d[i * w + j] += gy.data()[r * w + j];
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(tx.shape().to_vec(), d));
                }
            }
            Op::NormalizeRows { x, norms } => {
                if self.wants(*x) {
                    let (n, dim) = (y.shape()[0], y.shape()[1]);
                    let mut d = vec![0.0; n * dim];
                    for i in 0..n {
                        if norms[i] == 0.0 {
                            continue;
                        }
                        let yr = y.row(i);
                        let gr = &gy.data()[i * dim..(i + 1) * dim];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..dim {
                            d[i * dim + j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vec![n, dim], d));
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dim = ta.shape()[1];
                if self.wants(*a) {
                    let d = (0..ta.numel())
                        .map(|i| gy.data()[i / dim] * tb.data()[i])
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(ta.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = (0..tb.numel())
                        .map(|i| gy.data()[i / dim] * ta.data()[i])
                        .collect();
                    accumulate(&mut grads[b.0], Tensor::new(tb.shape().to_vec(), d));
                }
            }
            Op::LogSoftmaxRows(x) => {
                if self.wants(*x) {
                    let (n, m) = (y.shape()[0], y.shape()[1]);
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        let gr = &gy.data()[i * m..(i + 1) * m];
                        let total: f64 = gr.iter().sum();
                        for j in 0..m {
                            d[i * m + j] = gr[j] - y.row(i)[j].exp() * total;
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vec![n, m], d));
                }
            }
            Op::Pick { x, idx } => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let m = tx.shape()[1];
                    let mut d = vec![0.0; tx.numel()];
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * m + j] += gy.data()[i];
                    }
                    accumulate(&mut grads[x.0], Tensor::new(tx.shape().to_vec(), d));
                }
            }
            Op::SumRows(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let m = tx.shape()[1];
                    let d = (0..tx.numel()).map(|i| gy.data()[i / m]).collect();
                    accumulate(&mut grads[x.0], Tensor::new(tx.shape().to_vec(), d));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    accumulate(&mut grads[x.0], Tensor::full(tx.shape(), gy.item()));
                }
            }
            Op::PairwiseDist(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let (n, dim) = (tx.shape()[0], tx.shape()[1]);
                    let mut d = vec![0.0; n * dim];
                    for i in 0..n {
                        for j in 0..n {
                            let dist = y.data()[i * n + j];
                            if i == j || dist == 0.0 {
                                continue;
                            }
                            // both D[i,j] and D[j,i] depend on x_i
                            let coef = (gy.data()[i * n + j] + gy.data()[j * n + i]) / dist;
                            for k in 0..dim {
                                d[i * dim + k] += coef * (tx.row(i)[k] - tx.row(j)[k]);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vec![n, dim], d));
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let p = ho * wo;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * wo + ox] =
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                x[(c * h + iy as usize) * w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let p = ho * wo;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at every entry of `inputs[which]`.
    fn numeric_grad(
        inputs: &[Tensor],
        which: usize,
        f: &dyn Fn(&mut Graph, &[Var]) -> Var,
        h: f64,
    ) -> Tensor {
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let mut grad = Tensor::zeros(inputs[which].shape());
        for i in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            grad.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        grad
    }

    fn check(inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v)));
            let numeric = numeric_grad(&inputs, k, f, 1e-5);
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {k}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 4], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(vx, vw, Some(vb), 2, 1);
        let ty = g.value(y);
        assert_eq!(ty.shape(), &[2, 4, 3, 2]);
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut acc = b.data()[co];
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy < 0 || iy >= 5 || ix < 0 || ix >= 4 {
                                        continue;
                                    }
                                    acc += w.data()[((co * 3 + ci) * 3 + ki) * 3 + kj]
                                        * x.data()[((n * 3 + ci) * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                        let got = ty.data()[((n * 4 + co) * 3 + oy) * 2 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![
            random(&[2, 2, 6, 4], &mut rng),
            random(&[3, 2, 3, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[2, 3, 3, 2], &mut rng),
        ];
        check(ins, &|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
            let p = g.mul(y, v[3]);
            g.sum(p)
        });
    }

    #[test]
    fn grad_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![
            random(&[2, 3, 4, 2], &mut rng),
            random(&[3], &mut rng),
            random(&[3], &mut rng),
            random(&[2, 3, 4, 2], &mut rng),
        ];
        check(ins, &|g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], 1e-5);
            let p = g.mul(y, v[3]);
            g.sum(p)
        });
    }

    #[test]
    fn grad_channel_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = vec![random(&[2, 3, 2, 2], &mut rng), random(&[2, 3], &mut rng)];
        check(ins, &|g, v| {
            let s = g.sigmoid(v[1]);
            let a = g.channel_scale(v[0], s);
            let om = g.one_minus(s);
            let b = g.channel_scale(v[0], om);
            let pa = g.global_avg_pool(a);
            let pb = g.global_avg_pool(b);
            let sq = g.mul(pa, pb);
            let ab = g.abs(sq);
            g.sum(ab)
        });
    }

    #[test]
    fn grad_matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ins = vec![
            random(&[4, 3], &mut rng),
            random(&[3, 5], &mut rng),
            random(&[5], &mut rng),
        ];
        check(ins, &|g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.add_suffix(m, v[2]);
            let r = g.relu(m);
            let t = g.transpose(r);
            let t = g.reshape(t, &[4, 5]);
            let n = g.normalize_rows(t);
            let ls = g.log_softmax_rows(n);
            let p = g.pick(ls, &[0, 2, 4, 1]);
            g.mean(p)
        });
    }

    #[test]
    fn grad_sequence_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ins = vec![random(&[5, 3], &mut rng), random(&[4, 3], &mut rng)];
        check(ins, &|g, v| {
            let e = g.embedding(v[0], &[1, 4, 2, 2, 0, 3, 1, 1]);
            let e = g.reshape(e, &[2, 4, 3]);
            let pos = v[1];
            let x = g.add_suffix(e, pos);
            let pm = g.prefix_mean(x);
            let flat = g.reshape(pm, &[8, 3]);
            let sel = g.gather_rows(flat, &[3, 7, 3]);
            let s = g.sum_rows(sel);
            let s2 = g.mul(s, s);
            g.sum(s2)
        });
    }

    #[test]
    fn grad_distance_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ins = vec![random(&[4, 3], &mut rng), random(&[4, 3], &mut rng)];
        check(ins, &|g, v| {
            let d = g.pairwise_dist(v[0]);
            let rd = g.row_dot(v[0], v[1]);
            let sq = g.mul(d, d);
            let a = g.sum(sq);
            let b = g.sum(rd);
            let c = g.add_scalar(b, 0.3);
            let ab = g.sub(a, c);
            g.scale(ab, 0.5)
        });
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum(y);
        let grads = g.backward(s);
        // d(x * const)/dx = const
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }
}
