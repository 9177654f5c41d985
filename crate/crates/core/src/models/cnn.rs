use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout, AdamHyper, BatchStats, Graph, Mode, ParamStore, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Input channels of the first convolution (1 or 9).
    pub n_ic1: usize,
    pub n_oc1: usize,
    pub n_oc2: usize,
    /// Pooling factor along time.
    pub p_n: usize,
    /// Kernel length along time.
    pub k_n: usize,
    pub batch_norm: bool,
    pub n_ff1: usize,
    pub n_ff2: usize,
    pub ff_dropout: f64,
    pub optimizer: AdamHyper,
}

impl CnnConfig {
    /// Time steps left after both pooling stages.
    pub fn pooled_len(&self, n: usize) -> usize {
        n / self.p_n / self.p_n
    }
}

/// Splits the feature axis of `data: [n, d]` into `n_ic` channels of
/// `d / n_ic` contiguous columns, written as `[n_ic, n, d / n_ic]`.
fn split_channels(data: &[f64], n: usize, d: usize, n_ic: usize, out: &mut Vec<f64>) {
    let w = d / n_ic;
    for c in 0..n_ic {
        for t in 0..n {
            out.extend_from_slice(&data[t * d + c * w..t * d + (c + 1) * w]);
        }
    }
}

fn check_channels(d: usize, n_ic: usize) -> Result<()> {
    if n_ic == 0 || !d.is_multiple_of(n_ic) {
        return Err(Error::IndivisibleChannels {
            features: d,
            channels: n_ic,
        });
    }
    Ok(())
}

/// `[n, d]` feature matrix to `[n_ic, n, d / n_ic]`. With nine channels on
/// the 36 features, channel 0 is the ego block and channels 1..9 the
/// neighbour blocks.
pub fn cnn_reshape_input(x: &Tensor, n_ic: usize) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::shape("cnn_reshape_input", format!("{:?}", x.shape)));
    }
    let (n, d) = (x.shape[0], x.shape[1]);
    check_channels(d, n_ic)?;
    let mut out = Vec::with_capacity(x.len());
    split_channels(&x.data, n, d, n_ic, &mut out);
    Tensor::new(vec![n_ic, n, d / n_ic], out)
}

enum Norm {
    Batch { gain: usize, bias: usize, slot: usize },
    Bias(usize),
}

struct ConvBlock {
    kernel: usize,
    norm: Norm,
}

pub(crate) struct CnnNet {
    n_ic: usize,
    blocks: [ConvBlock; 2],
    ff1: (usize, usize),
    ff2: (usize, usize),
    out: (usize, usize),
    p_n: usize,
    dropout: f64,
}

impl CnnNet {
    /// Number of batch-norm layers, i.e. running-statistics slots.
    pub(crate) fn norm_slots(cfg: &CnnConfig) -> usize {
        if cfg.batch_norm {
            2
        } else {
            0
        }
    }

    pub(crate) fn channel_counts(cfg: &CnnConfig) -> Vec<usize> {
        if cfg.batch_norm {
            vec![cfg.n_oc1, cfg.n_oc2]
        } else {
            Vec::new()
        }
    }

    pub(crate) fn build(cfg: &CnnConfig, n: usize, d: usize, params: &mut ParamStore, rng: &mut Rng) -> Result<CnnNet> {
        check_channels(d, cfg.n_ic1)?;
        if cfg.p_n == 0 || cfg.k_n == 0 || !(0.0..1.0).contains(&cfg.ff_dropout) {
            return Err(Error::InvalidConfig("CNN pooling and kernel sizes must be positive".into()));
        }
        let t2 = cfg.pooled_len(n);
        if t2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "{n} time steps do not survive two poolings by {}",
                cfg.p_n
            )));
        }
        let width = d / cfg.n_ic1;
        let mut slot = 0;
        let mut block = |i: usize, cin: usize, cout: usize, params: &mut ParamStore, rng: &mut Rng| {
            let kernel = params.add_uniform(format!("conv{i}.k"), &[cout, cin, cfg.k_n, 1], cin * cfg.k_n, rng);
            let norm = if cfg.batch_norm {
                let gain = params.add(format!("bn{i}.gain"), Tensor::full(&[cout], 1.0));
                let bias = params.add(format!("bn{i}.bias"), Tensor::zeros(&[cout]));
                slot += 1;
                Norm::Batch {
                    gain,
                    bias,
                    slot: slot - 1,
                }
            } else {
                Norm::Bias(params.add_uniform(format!("conv{i}.b"), &[cout], cin * cfg.k_n, rng))
            };
            ConvBlock { kernel, norm }
        };
        let b1 = block(1, cfg.n_ic1, cfg.n_oc1, params, rng);
        let b2 = block(2, cfg.n_oc1, cfg.n_oc2, params, rng);
        let flat = cfg.n_oc2 * t2 * width;
        let mut affine = |name: &str, fan_in: usize, out: usize| {
            (
                params.add_uniform(format!("{name}.w"), &[out, fan_in], fan_in, rng),
                params.add_uniform(format!("{name}.b"), &[out], fan_in, rng),
            )
        };
        let ff1 = affine("ff1", flat, cfg.n_ff1);
        let ff2 = affine("ff2", cfg.n_ff1, cfg.n_ff2);
        let out = affine("out", cfg.n_ff2, 3);
        Ok(CnnNet {
            n_ic: cfg.n_ic1,
            blocks: [b1, b2],
            ff1,
            ff2,
            out,
            p_n: cfg.p_n,
            dropout: cfg.ff_dropout,
        })
    }

    /// `x: [B, n, d]` to logits `[B, 3]`. In train mode also returns the batch
    /// statistics of each batch-norm layer.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: &Tensor,
        running: &[BatchStats],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let (batch, n, d) = (x.shape[0], x.shape[1], x.shape[2]);
        let mut data = Vec::with_capacity(x.len());
        for b in 0..batch {
            split_channels(&x.data[b * n * d..(b + 1) * n * d], n, d, self.n_ic, &mut data);
        }
        let mut h = g.input(Tensor::new(vec![batch, self.n_ic, n, d / self.n_ic], data)?);
        let mut stats = Vec::new();
        for blk in &self.blocks {
            let k = g.param(params, blk.kernel);
            h = g.conv_time(h, k)?;
            h = match blk.norm {
                Norm::Batch { gain, bias, slot } => {
                    let (gv, bv) = (g.param(params, gain), g.param(params, bias));
                    match mode {
                        Mode::Train => {
                            let (y, s) = g.batch_norm_train(h, gv, bv)?;
                            stats.push(s);
                            y
                        }
                        Mode::Eval => {
                            let r = &running[slot];
                            g.batch_norm_eval(h, gv, bv, &r.mean, &r.var)?
                        }
                    }
                }
                Norm::Bias(b) => {
                    let bv = g.param(params, b);
                    g.channel_bias(h, bv)?
                }
            };
            h = g.relu(h);
            h = g.max_pool_time(h, self.p_n)?;
        }
        let flat = g.value(h).len() / batch;
        h = g.reshape(h, vec![batch, flat])?;
        let affine = |g: &mut Graph, h: Var, (w, b): (usize, usize)| {
            let (w, b) = (g.param(params, w), g.param(params, b));
            g.linear(h, w, Some(b))
        };
        h = affine(g, h, self.ff1)?;
        h = g.relu(h);
        h = dropout(g, h, self.dropout, mode, rng)?;
        h = affine(g, h, self.ff2)?;
        h = g.relu(h);
        let logits = affine(g, h, self.out)?;
        Ok((logits, stats))
    }
}
