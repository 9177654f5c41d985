use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout_mask, AdamHyper, Graph, Mode, ParamStore, Tensor, Var};
use crate::rng::Rng;

pub const PE_BASE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TnConfig {
    pub encoder_layers: usize,
    pub n_h: usize,
    pub d_emb: usize,
    pub w_ff: usize,
    pub pe_dropout: f64,
    /// Adds the positional encoding to the embedded input. Only switched off
    /// to probe order sensitivity.
    #[serde(default = "yes")]
    pub positional_encoding: bool,
    pub optimizer: AdamHyper,
}

fn yes() -> bool {
    true
}

/// Sinusoidal encoding, 1-indexed as `pe[i][j] = sin((i−1)/1000^((j−1)/d))`
/// for odd `j` and `cos((i−1)/1000^((j−2)/d))` for even `j`. Returned
/// 0-indexed as `[n, d_emb]`.
pub fn positional_encoding(n: usize, d_emb: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d_emb);
    for i in 0..n {
        for j in 0..d_emb {
            // 0-indexed j: even j is the paper's odd column j+1.
            let pair = (j - j % 2) as f64;
            let angle = i as f64 / PE_BASE.powf(pair / d_emb as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor {
        shape: vec![n, d_emb],
        data,
    }
}

/// Per-head projection sizes: `n_h − 1` heads of `⌊d_emb/n_h⌋` and a last
/// head with the remainder, so the sizes sum to `d_emb`.
pub fn head_dims(d_emb: usize, n_h: usize) -> Result<Vec<usize>> {
    if n_h == 0 || d_emb < n_h {
        return Err(Error::TooManyHeads { d_emb, heads: n_h });
    }
    let d_h = d_emb / n_h;
    let mut dims = vec![d_h; n_h];
    dims[n_h - 1] = d_emb - (n_h - 1) * d_h;
    Ok(dims)
}

/// Attention weights of one encoder layer. The per-head matrices
/// `W_{q,i}` (each `[d_i, d_emb]`) are stacked row-wise into `w_qh`, and
/// likewise for keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_qh: Tensor,
    pub w_kh: Tensor,
    pub w_vh: Tensor,
    pub w_a: Tensor,
}

impl AttentionParams {
    fn all(&self) -> [&Tensor; 7] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_qh, &self.w_kh, &self.w_vh, &self.w_a]
    }
}

/// Graph handles in [`AttentionParams`] field order.
pub(crate) type AttentionVars = [Var; 7];

/// Multi-head self-attention of `x: [B, n, d_emb]`. Returns the combined
/// output and each head's `[B, n, n]` weight matrix.
pub(crate) fn attention_graph(g: &mut Graph, x: Var, w: &AttentionVars, dims: &[usize]) -> Result<(Var, Vec<Var>)> {
    let [wq, wk, wv, wqh, wkh, wvh, wa] = *w;
    let q = g.linear(x, wq, None)?;
    let k = g.linear(x, wk, None)?;
    let v = g.linear(x, wv, None)?;
    let qh = g.linear(q, wqh, None)?;
    let kh = g.linear(k, wkh, None)?;
    let vh = g.linear(v, wvh, None)?;
    let mut heads = Vec::with_capacity(dims.len());
    let mut weights = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &d in dims {
        let qi = g.slice_last(qh, offset, d)?;
        let ki = g.slice_last(kh, offset, d)?;
        let vi = g.slice_last(vh, offset, d)?;
        let scores = g.bmm(qi, ki, true)?;
        let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
        let att = g.softmax_last(scaled);
        heads.push(g.bmm(att, vi, false)?);
        weights.push(att);
        offset += d;
    }
    let cat = g.concat_last(&heads)?;
    Ok((g.linear(cat, wa, None)?, weights))
}

/// Self-attention of a single sequence `x: [n, d_emb]`; returns the output
/// `[n, d_emb]` and per-head weights `[n, n]`.
pub fn multi_head_attention(x: &Tensor, p: &AttentionParams, dims: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
    let d = dims.iter().sum::<usize>();
    if x.ndim() != 2 || x.shape[1] != d || p.all().iter().any(|w| w.shape != [d, d]) {
        return Err(Error::shape(
            "multi_head_attention",
            format!("input {:?} with head sizes {dims:?}", x.shape),
        ));
    }
    let n = x.shape[0];
    let mut g = Graph::new();
    let xv = g.input(x.clone().reshaped(vec![1, n, d])?);
    let w = p.all().map(|t| g.input(t.clone()));
    let (out, weights) = attention_graph(&mut g, xv, &w, dims)?;
    let out = g.value(out).clone().reshaped(vec![n, d])?;
    let weights = weights
        .into_iter()
        .map(|a| g.value(a).clone().reshaped(vec![n, n]))
        .collect::<Result<_>>()?;
    Ok((out, weights))
}

struct EncoderIds {
    attn: [usize; 7],
    ln1: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
    ln2: (usize, usize),
}

pub(crate) struct TnNet {
    emb: (usize, usize),
    layers: Vec<EncoderIds>,
    out: (usize, usize),
    dims: Vec<usize>,
    d_emb: usize,
    pe_dropout: f64,
    use_pe: bool,
}

const ATTN_NAMES: [&str; 7] = ["w_q", "w_k", "w_v", "w_qh", "w_kh", "w_vh", "w_a"];

fn affine(params: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, out: usize) -> (usize, usize) {
    (
        params.add_uniform(format!("{name}.w"), &[out, fan_in], fan_in, rng),
        params.add_uniform(format!("{name}.b"), &[out], fan_in, rng),
    )
}

fn norm(params: &mut ParamStore, name: &str, d: usize) -> (usize, usize) {
    (
        params.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
        params.add(format!("{name}.bias"), Tensor::zeros(&[d])),
    )
}

impl TnNet {
    pub(crate) fn build(cfg: &TnConfig, d_in: usize, params: &mut ParamStore, rng: &mut Rng) -> Result<TnNet> {
        let dims = head_dims(cfg.d_emb, cfg.n_h)?;
        if cfg.encoder_layers == 0 || cfg.w_ff == 0 || !(0.0..1.0).contains(&cfg.pe_dropout) {
            return Err(Error::InvalidConfig(
                "transformer needs at least one encoder layer and a positive feed-forward width".into(),
            ));
        }
        let d = cfg.d_emb;
        let emb = affine(params, rng, "emb", d_in, d);
        let mut layers = Vec::with_capacity(cfg.encoder_layers);
        for l in 0..cfg.encoder_layers {
            let attn = ATTN_NAMES.map(|name| params.add_uniform(format!("enc{l}.{name}"), &[d, d], d, rng));
            let ln1 = norm(params, &format!("enc{l}.ln1"), d);
            let ff1 = affine(params, rng, &format!("enc{l}.ff1"), d, cfg.w_ff);
            let ff2 = affine(params, rng, &format!("enc{l}.ff2"), cfg.w_ff, d);
            let ln2 = norm(params, &format!("enc{l}.ln2"), d);
            layers.push(EncoderIds { attn, ln1, ff1, ff2, ln2 });
        }
        let out = affine(params, rng, "out", d, 3);
        Ok(TnNet {
            emb,
            layers,
            out,
            dims,
            d_emb: d,
            pe_dropout: cfg.pe_dropout,
            use_pe: cfg.positional_encoding,
        })
    }

    /// One encoder layer: `N1 = Norm(A + X)`, `out = Norm(N1 + FF(N1))`.
    fn encoder(&self, g: &mut Graph, params: &ParamStore, x: Var, ids: &EncoderIds) -> Result<(Var, Vec<Var>)> {
        let w = ids.attn.map(|i| g.param(params, i));
        let (a, weights) = attention_graph(g, x, &w, &self.dims)?;
        let r1 = g.add(a, x)?;
        let (g1, b1) = (g.param(params, ids.ln1.0), g.param(params, ids.ln1.1));
        let n1 = g.layer_norm(r1, g1, b1)?;
        let (w1, c1) = (g.param(params, ids.ff1.0), g.param(params, ids.ff1.1));
        let hidden = g.linear(n1, w1, Some(c1))?;
        let hidden = g.relu(hidden);
        let (w2, c2) = (g.param(params, ids.ff2.0), g.param(params, ids.ff2.1));
        let ff = g.linear(hidden, w2, Some(c2))?;
        let r2 = g.add(n1, ff)?;
        let (g2, b2) = (g.param(params, ids.ln2.0), g.param(params, ids.ln2.1));
        Ok((g.layer_norm(r2, g2, b2)?, weights))
    }

    /// `x: [B, n, d_in]` to raw scores `[B, 3]`, plus every attention weight
    /// matrix in layer order.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let (batch, n) = (g.value(x).shape[0], g.value(x).shape[1]);
        let (we, be) = (g.param(params, self.emb.0), g.param(params, self.emb.1));
        let mut h = g.linear(x, we, Some(be))?;
        if self.use_pe {
            let pe = positional_encoding(n, self.d_emb);
            let mut tiled = Vec::with_capacity(batch * pe.len());
            for _ in 0..batch {
                tiled.extend_from_slice(&pe.data);
            }
            if mode == Mode::Train && self.pe_dropout > 0.0 {
                let mask = dropout_mask(tiled.len(), self.pe_dropout, rng);
                tiled.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            }
            let pe = g.input(Tensor::new(vec![batch, n, self.d_emb], tiled)?);
            h = g.add(h, pe)?;
        }
        let mut weights = Vec::new();
        for ids in &self.layers {
            let (out, w) = self.encoder(g, params, h, ids)?;
            h = out;
            weights.extend(w);
        }
        let pooled = g.mean_axis1(h)?;
        let (wo, bo) = (g.param(params, self.out.0), g.param(params, self.out.1));
        Ok((g.linear(pooled, wo, Some(bo))?, weights))
    }
}
