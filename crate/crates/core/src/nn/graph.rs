use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ChannelBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    ConvTime {
        x: Var,
        k: Var,
    },
    MaxPoolTime {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    SelectAxis1 {
        x: Var,
        index: usize,
    },
    StackAxis1(Vec<Var>),
    MeanAxis1(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a train-mode batch norm, for updating the
/// running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

/// Tape of forward operations. Nodes are appended in evaluation order, so the
/// tape is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    /// Gradient per parameter of `store`; parameters that did not take part
    /// in the graph get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = store
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        for &(id, v) in &self.params {
            if let Some(g) = &self.nodes[v.0] {
                out[id].copy_from_slice(g);
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter `id` of `store`. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.last_dim();
        if bv.len() != d {
            return Err(Error::shape(
                "add_bias",
                format!("bias of {} for last axis {}", bv.len(), d),
            ));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(d) {
            add_into(row, &bv.data);
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x, b), rg))
    }

    /// `x + b` for `x: [B, C, ...]` with one bias per channel.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.ndim() < 2 || bv.len() != xv.shape[1] {
            return Err(Error::shape(
                "channel_bias",
                format!("bias of {} for input {:?}", bv.len(), xv.shape),
            ));
        }
        let c = xv.shape[1];
        let inner = xv.len() / (xv.shape[0] * c).max(1);
        let mut data = xv.data.clone();
        for (blk, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv.data[blk % c]);
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::ChannelBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * c).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant, e.g. a dropout mask.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if c.len() != xv.len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} factors for {} values", c.len(), xv.len()),
            ));
        }
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().zip(&c).map(|(v, m)| v * m).collect(),
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, c), rg))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape[1] != bv.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape, bv.shape),
            ));
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &av.data, false, &bv.data, false, &mut c, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: c,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `x·wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k = xv.last_dim();
        if wv.ndim() != 2 || wv.shape[1] != k || xv.ndim() == 0 {
            return Err(Error::shape(
                "linear",
                format!("input {:?} with weight {:?}", xv.shape, wv.shape),
            ));
        }
        let p = wv.shape[0];
        let rows = xv.len() / k.max(1);
        let mut out = vec![0.0; rows * p];
        gemm(rows, k, p, &xv.data, false, &wv.data, true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != p {
                return Err(Error::shape(
                    "linear",
                    format!("bias of {} for {} outputs", bv.len(), p),
                ));
            }
            for row in out.chunks_mut(p) {
                add_into(row, &bv.data);
            }
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = p;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }, rg))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || Error::shape("bmm", format!("{:?} x {:?}", av.shape, bv.shape));
        if av.ndim() != 3 || bv.ndim() != 3 || av.shape[0] != bv.shape[0] {
            return Err(bad());
        }
        let (batch, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
        let (bk, n) = if trans_b {
            (bv.shape[2], bv.shape[1])
        } else {
            (bv.shape[1], bv.shape[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data[i * m * k..(i + 1) * m * k],
                false,
                &bv.data[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![batch, m, n],
                data: out,
            },
            Op::Bmm { a, b, trans_b },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data.clone();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::SoftmaxLast(x), rg)
    }

    /// Layer norm over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gain/bias must have {d} entries", xv.shape),
            ));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv = vec![0.0; rows];
        for (r, (src, dst)) in xv.data.chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
            inv[r] = is;
        }
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut data = xhat.clone();
        for row in data.chunks_mut(d) {
            for ((o, gj), bj) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gj + bj;
            }
        }
        let shape = xv.shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
            rg,
        ))
    }

    fn check_bn(&self, x: Var, gain: Var, bias: Var) -> Result<(usize, usize, usize)> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected [batch, channels, time, width], got {:?}", xv.shape),
            ));
        }
        let (b, c) = (xv.shape[0], xv.shape[1]);
        let inner = xv.shape[2] * xv.shape[3];
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("gain/bias must have {c} entries"),
            ));
        }
        Ok((b, c, inner))
    }

    fn bn_apply(&self, x: Var, gain: Var, bias: Var, mean: &[f64], inv: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (c, inner) = (xv.shape[1], xv.shape[2] * xv.shape[3]);
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (blk, src) in xv.data.chunks(inner).enumerate() {
            let ch = blk % c;
            let base = blk * inner;
            for (j, v) in src.iter().enumerate() {
                let h = (v - mean[ch]) * inv[ch];
                xhat[base + j] = h;
                out[base + j] = h * g[ch] + b[ch];
            }
        }
        (xhat, out)
    }

    /// Train-mode batch norm on `[B, C, T, W]`, normalising each channel over
    /// batch, time and width.
    pub fn batch_norm_train(&mut self, x: Var, gain: Var, bias: Var) -> Result<(Var, BatchStats)> {
        let (batch, c, inner) = self.check_bn(x, gain, bias)?;
        if batch < 2 {
            return Err(Error::BatchTooSmall(batch));
        }
        let xv = self.value(x);
        let count = (batch * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (blk, src) in xv.data.chunks(inner).enumerate() {
            mean[blk % c] += src.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (blk, src) in xv.data.chunks(inner).enumerate() {
            let m = mean[blk % c];
            var[blk % c] += src.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (xhat, data) = self.bn_apply(x, gain, bias, &mean, &inv);
        let shape = xv.shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let v = self.push(
            Tensor { shape, data },
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Eval-mode batch norm using fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let (_, c, _) = self.check_bn(x, gain, bias)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running statistics must have {c} entries"),
            ));
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (xhat, data) = self.bn_apply(x, gain, bias, mean, &inv);
        let shape = self.value(x).shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data },
            Op::BatchNormEval {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
            rg,
        ))
    }

    /// Cross-correlation along time of `x: [B, Cin, T, W]` with
    /// `k: [Cout, Cin, K, 1]`, stride 1, zero "same" padding. The width axis is
    /// never mixed.
    pub fn conv_time(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        if xv.ndim() != 4 || kv.ndim() != 4 || kv.shape[3] != 1 || kv.shape[1] != xv.shape[1] {
            return Err(Error::shape(
                "conv_time",
                format!("input {:?} with kernel {:?}", xv.shape, kv.shape),
            ));
        }
        let (batch, cin, t, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (cout, kn) = (kv.shape[0], kv.shape[2]);
        let mut out = vec![0.0; batch * cout * t * w];
        for b in 0..batch {
            for o in 0..cout {
                let dst = &mut out[(b * cout + o) * t * w..][..t * w];
                for c in 0..cin {
                    let src = &xv.data[(b * cin + c) * t * w..][..t * w];
                    for j in 0..kn {
                        let kval = kv.data[(o * cin + c) * kn + j];
                        if let Some((d0, s0, len)) = conv_range(t, kn, j) {
                            let d = &mut dst[d0 * w..(d0 + len) * w];
                            let s = &src[s0 * w..(s0 + len) * w];
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += kval * sv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            Tensor {
                shape: vec![batch, cout, t, w],
                data: out,
            },
            Op::ConvTime { x, k },
            rg,
        ))
    }

    /// Non-overlapping max pooling along time of `[B, C, T, W]`; trailing
    /// frames that do not fill a window are dropped. The first maximum wins
    /// ties.
    pub fn max_pool_time(&mut self, x: Var, p: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 || p == 0 {
            return Err(Error::shape(
                "max_pool_time",
                format!("input {:?}, window {p}", xv.shape),
            ));
        }
        let (batch, c, t, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let to = t / p;
        let mut out = Vec::with_capacity(batch * c * to * w);
        let mut argmax = Vec::with_capacity(batch * c * to * w);
        for bc in 0..batch * c {
            let base = bc * t * w;
            for i in 0..to {
                for col in 0..w {
                    let mut best = base + i * p * w + col;
                    for s in 1..p {
                        let idx = base + (i * p + s) * w + col;
                        if xv.data[idx] > xv.data[best] {
                            best = idx;
                        }
                    }
                    out.push(xv.data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![batch, c, to, w],
                data: out,
            },
            Op::MaxPoolTime { x, argmax },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if start + len > d {
            return Err(Error::shape(
                "slice_last",
                format!("{start}..{} of last axis {d}", start + len),
            ));
        }
        let data: Vec<f64> = xv
            .data
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::SliceLast { x, start }, rg))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let lead = &self.value(*first).shape[..self.value(*first).ndim() - 1];
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for &p in parts {
            let s = &self.value(p).shape;
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat_last",
                    format!("{:?} vs {:?}", self.value(*first).shape, s),
                ));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                let d = pv.last_dim();
                data.extend_from_slice(&pv.data[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// `x[:, index]` for `x: [B, T, ...]`.
    pub fn select_axis1(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2 || index >= xv.shape[1] {
            return Err(Error::shape(
                "select_axis1",
                format!("index {index} of {:?}", xv.shape),
            ));
        }
        let (batch, t) = (xv.shape[0], xv.shape[1]);
        let inner = xv.len() / (batch * t).max(1);
        let mut data = Vec::with_capacity(batch * inner);
        for b in 0..batch {
            data.extend_from_slice(&xv.data[(b * t + index) * inner..][..inner]);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&xv.shape[2..]);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::SelectAxis1 { x, index }, rg))
    }

    /// Stacks `[B, ...]` tensors into `[B, len, ...]`.
    pub fn stack_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack_axis1", "no inputs"))?;
        let s0 = self.value(*first).shape.clone();
        if parts.iter().any(|&p| self.value(p).shape != s0) {
            return Err(Error::shape("stack_axis1", "inputs differ in shape"));
        }
        let batch = s0[0];
        let inner = self.value(*first).len() / batch.max(1);
        let mut data = Vec::with_capacity(batch * parts.len() * inner);
        for b in 0..batch {
            for &p in parts {
                data.extend_from_slice(&self.value(p).data[b * inner..][..inner]);
            }
        }
        let mut shape = vec![batch, parts.len()];
        shape.extend_from_slice(&s0[1..]);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::StackAxis1(parts.to_vec()), rg))
    }

    /// Mean over axis 1 of `[B, T, ...]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2 || xv.shape[1] == 0 {
            return Err(Error::shape("mean_axis1", format!("{:?}", xv.shape)));
        }
        let (batch, t) = (xv.shape[0], xv.shape[1]);
        let inner = xv.len() / (batch * t);
        let mut data = vec![0.0; batch * inner];
        for b in 0..batch {
            let dst = &mut data[b * inner..(b + 1) * inner];
            for s in 0..t {
                add_into(dst, &xv.data[(b * t + s) * inner..][..inner]);
            }
            dst.iter_mut().for_each(|v| *v /= t as f64);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&xv.shape[2..]);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::MeanAxis1(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} labels", lv.shape, labels.len()),
            ));
        }
        let c = lv.shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::BadLabel(bad));
        }
        let mut probs = lv.data.clone();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / labels.len() as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::GraphNotScalar(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_vars: Vec<(usize, Var)> = self.params.iter().map(|(&i, &v)| (i, v)).collect();
        param_vars.sort_unstable();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            nodes: grads,
            params: param_vars,
        })
    }

    fn backprop(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |g| {
                    for ((gv, d), o) in g.iter_mut().zip(gy).zip(bv) {
                        *gv += d * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gv, d), o) in g.iter_mut().zip(gy).zip(av) {
                        *gv += d * o;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |g| add_into(g, gy));
                let d = y.last_dim();
                acc(*b, &mut |g| {
                    for row in gy.chunks(d) {
                        add_into(g, row);
                    }
                });
            }
            Op::ChannelBias(x, b) => {
                acc(*x, &mut |g| add_into(g, gy));
                let c = y.shape[1];
                let inner = y.len() / (y.shape[0] * c).max(1);
                acc(*b, &mut |g| {
                    for (blk, chunk) in gy.chunks(inner.max(1)).enumerate() {
                        g[blk % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                for (gv, d) in g.iter_mut().zip(gy) {
                    *gv += c * d;
                }
            }),
            Op::MulConst(x, m) => acc(*x, &mut |g| {
                for ((gv, d), mv) in g.iter_mut().zip(gy).zip(m) {
                    *gv += d * mv;
                }
            }),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                acc(*a, &mut |g| gemm(m, n, k, gy, false, &bv.data, true, g, true));
                acc(*b, &mut |g| gemm(k, m, n, &av.data, true, gy, false, g, true));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (p, k) = (wv.shape[0], wv.shape[1]);
                let rows = xv.len() / k.max(1);
                acc(*x, &mut |g| gemm(rows, p, k, gy, false, &wv.data, false, g, true));
                acc(*w, &mut |g| gemm(p, rows, k, gy, true, &xv.data, false, g, true));
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for row in gy.chunks(p) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
                let n = y.shape[2];
                acc(*a, &mut |g| {
                    for i in 0..batch {
                        // dA = dC·Bᵀ, or dC·B when B was used transposed.
                        gemm(
                            m,
                            n,
                            k,
                            &gy[i * m * n..][..m * n],
                            false,
                            &bv.data[i * k * n..][..k * n],
                            !trans_b,
                            &mut g[i * m * k..][..m * k],
                            true,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..batch {
                        let ga = &av.data[i * m * k..][..m * k];
                        let gc = &gy[i * m * n..][..m * n];
                        let gb = &mut g[i * k * n..][..k * n];
                        if *trans_b {
                            // dB = dCᵀ·A, shape [n, k].
                            gemm(n, m, k, gc, true, ga, false, gb, true);
                        } else {
                            // dB = Aᵀ·dC, shape [k, n].
                            gemm(k, m, n, ga, true, gc, false, gb, true);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((gv, d), s) in g.iter_mut().zip(gy).zip(&y.data) {
                    *gv += d * s * (1.0 - s);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |g| {
                for ((gv, d), t) in g.iter_mut().zip(gy).zip(&y.data) {
                    *gv += d * (1.0 - t * t);
                }
            }),
            Op::Relu(x) => acc(*x, &mut |g| {
                for ((gv, d), o) in g.iter_mut().zip(gy).zip(&y.data) {
                    if *o > 0.0 {
                        *gv += d;
                    }
                }
            }),
            Op::SoftmaxLast(x) => {
                let d = y.last_dim();
                acc(*x, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(d).zip(gy.chunks(d)).zip(y.data.chunks(d)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((gv, dv), yv) in gr.iter_mut().zip(dr).zip(yr) {
                            *gv += yv * (dv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let d = y.last_dim();
                let gv = &self.value(*gain).data;
                acc(*x, &mut |g| {
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, dr)) in g.chunks_mut(d).zip(gy.chunks(d)).enumerate() {
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = dr[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv[r] / d as f64;
                        for j in 0..d {
                            gr[j] += k * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (dr, hr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for dr in gy.chunks(d) {
                        add_into(g, dr);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let (c, inner) = (y.shape[1], y.shape[2] * y.shape[3]);
                let count = (y.shape[0] * inner) as f64;
                let gv = &self.value(*gain).data;
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for (blk, (dr, hr)) in gy.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let ch = blk % c;
                    for (dv, hv) in dr.iter().zip(hr) {
                        s1[ch] += dv;
                        s2[ch] += dv * hv;
                    }
                }
                acc(*x, &mut |g| {
                    for (blk, ((gr, dr), hr)) in g
                        .chunks_mut(inner)
                        .zip(gy.chunks(inner))
                        .zip(xhat.chunks(inner))
                        .enumerate()
                    {
                        let ch = blk % c;
                        // In terms of dxhat = dy·γ the sums pick up a factor γ.
                        let k = gv[ch] * inv[ch] / count;
                        for ((gv_, dv), hv) in gr.iter_mut().zip(dr).zip(hr) {
                            *gv_ += k * (count * dv - s1[ch] - hv * s2[ch]);
                        }
                    }
                });
                acc(*gain, &mut |g| add_into(g, &s2));
                acc(*bias, &mut |g| add_into(g, &s1));
            }
            Op::BatchNormEval {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let (c, inner) = (y.shape[1], y.shape[2] * y.shape[3]);
                let gv = &self.value(*gain).data;
                acc(*x, &mut |g| {
                    for (blk, (gr, dr)) in g.chunks_mut(inner).zip(gy.chunks(inner)).enumerate() {
                        let k = gv[blk % c] * inv[blk % c];
                        for (a, d) in gr.iter_mut().zip(dr) {
                            *a += k * d;
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (blk, (dr, hr)) in gy.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                        g[blk % c] += dr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                acc(*bias, &mut |g| {
                    for (blk, dr) in gy.chunks(inner).enumerate() {
                        g[blk % c] += dr.iter().sum::<f64>();
                    }
                });
            }
            Op::ConvTime { x, k } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (batch, cin, t, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
                let (cout, kn) = (kv.shape[0], kv.shape[2]);
                acc(*x, &mut |g| {
                    for b in 0..batch {
                        for o in 0..cout {
                            let dy = &gy[(b * cout + o) * t * w..][..t * w];
                            for c in 0..cin {
                                let dx = &mut g[(b * cin + c) * t * w..][..t * w];
                                for j in 0..kn {
                                    let kval = kv.data[(o * cin + c) * kn + j];
                                    if let Some((d0, s0, len)) = conv_range(t, kn, j) {
                                        let dst = &mut dx[s0 * w..(s0 + len) * w];
                                        for (a, d) in dst.iter_mut().zip(&dy[d0 * w..(d0 + len) * w]) {
                                            *a += kval * d;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*k, &mut |g| {
                    for b in 0..batch {
                        for o in 0..cout {
                            let dy = &gy[(b * cout + o) * t * w..][..t * w];
                            for c in 0..cin {
                                let src = &xv.data[(b * cin + c) * t * w..][..t * w];
                                for j in 0..kn {
                                    if let Some((d0, s0, len)) = conv_range(t, kn, j) {
                                        let dot: f64 = dy[d0 * w..(d0 + len) * w]
                                            .iter()
                                            .zip(&src[s0 * w..(s0 + len) * w])
                                            .map(|(a, b)| a * b)
                                            .sum();
                                        g[(o * cin + c) * kn + j] += dot;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPoolTime { x, argmax } => acc(*x, &mut |g| {
                for (d, &src) in gy.iter().zip(argmax) {
                    g[src] += d;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::SliceLast { x, start } => {
                let d_in = self.value(*x).last_dim();
                let d = y.last_dim();
                acc(*x, &mut |g| {
                    for (gr, dr) in g.chunks_mut(d_in).zip(gy.chunks(d)) {
                        add_into(&mut gr[*start..start + d], dr);
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total = y.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let d = self.value(p).last_dim();
                    acc(p, &mut |g| {
                        for (gr, dr) in g.chunks_mut(d).zip(gy.chunks(total)) {
                            add_into(gr, &dr[offset..offset + d]);
                        }
                    });
                    offset += d;
                }
            }
            Op::SelectAxis1 { x, index } => {
                let xs = &self.value(*x).shape;
                let (batch, t) = (xs[0], xs[1]);
                let inner = y.len() / batch.max(1);
                acc(*x, &mut |g| {
                    for b in 0..batch {
                        add_into(
                            &mut g[(b * t + index) * inner..][..inner],
                            &gy[b * inner..][..inner],
                        );
                    }
                });
            }
            Op::StackAxis1(parts) => {
                let (batch, t) = (y.shape[0], y.shape[1]);
                let inner = y.len() / (batch * t).max(1);
                for (s, &p) in parts.iter().enumerate() {
                    acc(p, &mut |g| {
                        for b in 0..batch {
                            add_into(
                                &mut g[b * inner..][..inner],
                                &gy[(b * t + s) * inner..][..inner],
                            );
                        }
                    });
                }
            }
            Op::MeanAxis1(x) => {
                let xs = &self.value(*x).shape;
                let (batch, t) = (xs[0], xs[1]);
                let inner = y.len() / batch.max(1);
                acc(*x, &mut |g| {
                    for b in 0..batch {
                        for s in 0..t {
                            let dst = &mut g[(b * t + s) * inner..][..inner];
                            for (a, d) in dst.iter_mut().zip(&gy[b * inner..][..inner]) {
                                *a += d / t as f64;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = gy[0] / labels.len() as f64;
                acc(*logits, &mut |g| {
                    for ((gr, pr), &l) in g.chunks_mut(c).zip(probs.chunks(c)).zip(labels) {
                        for (j, (a, p)) in gr.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            *a += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Output rows `d0..d0+len` of a same-padded convolution read input rows
/// `s0..s0+len` through kernel tap `j`.
fn conv_range(t: usize, kn: usize, j: usize) -> Option<(usize, usize, usize)> {
    let pad = (kn - 1) / 2;
    // Input row = output row + j - pad.
    let (d0, s0) = if j >= pad { (0, j - pad) } else { (pad - j, 0) };
    let len = t.checked_sub(d0.max(s0))?;
    (len > 0).then_some((d0, s0, len))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
