use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamHyper, Graph, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// Gate order used for every per-gate array: forget, input, candidate, output.
pub const GATES: [&str; 4] = ["f", "i", "c", "o"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmNetConfig {
    /// Hidden size per stacked layer; the last layer is single-output.
    pub layer_dims: Vec<usize>,
    pub optimizer: AdamHyper,
}

/// Weights of one LSTM cell, gate order [`GATES`].
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    /// `[d_h, d_in]` each.
    pub wx: [Tensor; 4],
    /// `[d_h, d_h]` each.
    pub wh: [Tensor; 4],
    /// `[d_h]` each.
    pub b: [Tensor; 4],
}

impl LstmCellParams {
    pub fn zeros(d_in: usize, d_h: usize) -> LstmCellParams {
        LstmCellParams {
            wx: std::array::from_fn(|_| Tensor::zeros(&[d_h, d_in])),
            wh: std::array::from_fn(|_| Tensor::zeros(&[d_h, d_h])),
            b: std::array::from_fn(|_| Tensor::zeros(&[d_h])),
        }
    }

    pub fn d_h(&self) -> usize {
        self.b[0].len()
    }

    pub fn d_in(&self) -> usize {
        self.wx[0].last_dim()
    }

    fn check(&self) -> Result<()> {
        let (d_h, d_in) = (self.d_h(), self.d_in());
        for (g, gate) in GATES.iter().enumerate() {
            if self.wx[g].shape != [d_h, d_in] || self.wh[g].shape != [d_h, d_h] || self.b[g].len() != d_h {
                return Err(Error::shape(
                    "lstm",
                    format!("gate {gate} weights do not match d_h={d_h}, d_in={d_in}"),
                ));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One cell update on plain vectors: returns `(h_t, s_t)`.
pub fn lstm_cell_step(x: &[f64], h_prev: &[f64], s_prev: &[f64], p: &LstmCellParams) -> Result<(Vec<f64>, Vec<f64>)> {
    p.check()?;
    let (d_h, d_in) = (p.d_h(), p.d_in());
    if x.len() != d_in || h_prev.len() != d_h || s_prev.len() != d_h {
        return Err(Error::shape(
            "lstm_cell_step",
            format!("x {} / h {} / s {} for d_in={d_in}, d_h={d_h}", x.len(), h_prev.len(), s_prev.len()),
        ));
    }
    let pre = |g: usize, r: usize| -> f64 {
        let wx = &p.wx[g].data[r * d_in..(r + 1) * d_in];
        let wh = &p.wh[g].data[r * d_h..(r + 1) * d_h];
        wx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            + wh.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>()
            + p.b[g].data[r]
    };
    let mut h = vec![0.0; d_h];
    let mut s = vec![0.0; d_h];
    for r in 0..d_h {
        let f = sigmoid(pre(0, r));
        let i = sigmoid(pre(1, r));
        let c = pre(2, r).tanh();
        let o = sigmoid(pre(3, r));
        s[r] = s_prev[r] * f + i * c;
        h[r] = o * s[r].tanh();
    }
    Ok((h, s))
}

/// Graph handles of one cell's weights.
pub(crate) struct CellVars {
    wx: [Var; 4],
    wh: [Var; 4],
    b: [Var; 4],
    d_h: usize,
}

/// Runs a layer over `inputs` (one `[B, d_in]` node per time step) from zero
/// state and returns every `h_t`.
pub(crate) fn layer_graph(g: &mut Graph, inputs: &[Var], cell: &CellVars) -> Result<Vec<Var>> {
    let batch = g.value(inputs[0]).shape[0];
    let mut h = g.input(Tensor::zeros(&[batch, cell.d_h]));
    let mut s = g.input(Tensor::zeros(&[batch, cell.d_h]));
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let mut gates = [x; 4];
        for (k, gate) in gates.iter_mut().enumerate() {
            let a = g.linear(x, cell.wx[k], Some(cell.b[k]))?;
            let r = g.linear(h, cell.wh[k], None)?;
            let z = g.add(a, r)?;
            *gate = if k == 2 { g.tanh(z) } else { g.sigmoid(z) };
        }
        let [f, i, c, o] = gates;
        let keep = g.mul(s, f)?;
        let write = g.mul(i, c)?;
        s = g.add(keep, write)?;
        let ts = g.tanh(s);
        h = g.mul(o, ts)?;
        out.push(h);
    }
    Ok(out)
}

/// Layer output for `x: [n, d_in]` from `h_0 = s_0 = 0`: all `h_t` as
/// `[n, d_h]`, or only `h_n` as `[d_h]` when `single_output`.
pub fn lstm_layer_forward(x: &Tensor, p: &LstmCellParams, single_output: bool) -> Result<Tensor> {
    p.check()?;
    if x.ndim() != 2 || x.shape[1] != p.d_in() || x.shape[0] == 0 {
        return Err(Error::shape(
            "lstm_layer_forward",
            format!("input {:?} for d_in={}", x.shape, p.d_in()),
        ));
    }
    let n = x.shape[0];
    let mut g = Graph::new();
    let xv = g.input(x.clone().reshaped(vec![1, n, p.d_in()])?);
    let cell = CellVars {
        wx: p.wx.clone().map(|t| g.input(t)),
        wh: p.wh.clone().map(|t| g.input(t)),
        b: p.b.clone().map(|t| g.input(t)),
        d_h: p.d_h(),
    };
    let inputs = (0..n)
        .map(|t| g.select_axis1(xv, t))
        .collect::<Result<Vec<_>>>()?;
    let hs = layer_graph(&mut g, &inputs, &cell)?;
    if single_output {
        Ok(Tensor::new(vec![p.d_h()], g.value(hs[n - 1]).data.clone())?)
    } else {
        let data = hs.iter().flat_map(|&h| g.value(h).data.clone()).collect();
        Tensor::new(vec![n, p.d_h()], data)
    }
}

struct CellIds {
    wx: [usize; 4],
    wh: [usize; 4],
    b: [usize; 4],
    d_h: usize,
}

pub(crate) struct LstmNet {
    layers: Vec<CellIds>,
    out_w: usize,
    out_b: usize,
}

impl LstmNet {
    pub(crate) fn build(cfg: &LstmNetConfig, d_in: usize, params: &mut ParamStore, rng: &mut Rng) -> Result<LstmNet> {
        if cfg.layer_dims.is_empty() || cfg.layer_dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "LSTM layer sizes must be non-empty and positive, got {:?}",
                cfg.layer_dims
            )));
        }
        let mut layers = Vec::new();
        let mut prev = d_in;
        for (l, &d_h) in cfg.layer_dims.iter().enumerate() {
            let wx = std::array::from_fn(|k| params.add_uniform(format!("lstm{l}.wx_{}", GATES[k]), &[d_h, prev], prev, rng));
            let wh = std::array::from_fn(|k| params.add_uniform(format!("lstm{l}.wh_{}", GATES[k]), &[d_h, d_h], d_h, rng));
            let b = std::array::from_fn(|k| params.add_uniform(format!("lstm{l}.b_{}", GATES[k]), &[d_h], d_h, rng));
            layers.push(CellIds { wx, wh, b, d_h });
            prev = d_h;
        }
        let out_w = params.add_uniform("dense.w", &[3, prev], prev, rng);
        let out_b = params.add_uniform("dense.b", &[3], prev, rng);
        Ok(LstmNet { layers, out_w, out_b })
    }

    /// Weights of layer `l` as plain tensors.
    pub(crate) fn cell_params(&self, params: &ParamStore, l: usize) -> LstmCellParams {
        let c = &self.layers[l];
        LstmCellParams {
            wx: c.wx.map(|i| params.get(i).clone()),
            wh: c.wh.map(|i| params.get(i).clone()),
            b: c.b.map(|i| params.get(i).clone()),
        }
    }

    /// `x: [B, n, d_in]` to logits `[B, 3]`.
    pub(crate) fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let n = g.value(x).shape[1];
        let mut seq = (0..n)
            .map(|t| g.select_axis1(x, t))
            .collect::<Result<Vec<_>>>()?;
        for c in &self.layers {
            let cell = CellVars {
                wx: c.wx.map(|i| g.param(params, i)),
                wh: c.wh.map(|i| g.param(params, i)),
                b: c.b.map(|i| g.param(params, i)),
                d_h: c.d_h,
            };
            seq = layer_graph(g, &seq, &cell)?;
        }
        let h_n = *seq.last().expect("non-empty sequence");
        let w = g.param(params, self.out_w);
        let b = g.param(params, self.out_b);
        g.linear(h_n, w, Some(b))
    }
}
