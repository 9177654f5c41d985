//! The LSTM, CNN and transformer classifiers and their nine named
//! configurations.

mod checkpoint;
mod cnn;
mod lstm;
mod transformer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use cnn::{cnn_reshape_input, CnnConfig};
pub use lstm::{lstm_cell_step, lstm_layer_forward, LstmCellParams, LstmNetConfig, GATES};
pub use transformer::{head_dims, multi_head_attention, positional_encoding, AttentionParams, TnConfig, PE_BASE};

use cnn::CnnNet;
use lstm::LstmNet;
use transformer::TnNet;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{softmax_in_place, AdamHyper, BatchStats, Graph, Mode, ParamStore, Tensor, Var, BATCH_NORM_MOMENTUM};
use crate::rng::{self, tag, Rng};
use crate::segmentation::Label;

pub const CONFIG_NAMES: [&str; 9] = ["lstm1", "lstm2", "lstm3", "cnn1", "cnn2", "cnn3", "tn1", "tn2", "tn3"];

/// The paper gives no learning rate for the LSTMs.
pub const LSTM_LR: f64 = 1e-3;
pub const CNN_LR: f64 = 1e-4;
pub const TN_LR: f64 = 7e-4;
pub const TN_WEIGHT_DECAY: f64 = 0.004;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Lstm,
    Cnn,
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelConfig {
    Lstm(LstmNetConfig),
    Cnn(CnnConfig),
    Transformer(TnConfig),
}

impl ModelConfig {
    /// Resolves `lstm1` … `tn3` to its table row.
    pub fn by_name(name: &str) -> Result<ModelConfig> {
        let lstm = |dims: &[usize]| {
            ModelConfig::Lstm(LstmNetConfig {
                layer_dims: dims.to_vec(),
                optimizer: AdamHyper::new(LSTM_LR, 0.0),
            })
        };
        #[allow(clippy::too_many_arguments)]
        let cnn = |n_ic1, n_oc1, n_oc2, k_n, batch_norm, n_ff1, n_ff2| {
            ModelConfig::Cnn(CnnConfig {
                n_ic1,
                n_oc1,
                n_oc2,
                p_n: 2,
                k_n,
                batch_norm,
                n_ff1,
                n_ff2,
                ff_dropout: 0.5,
                optimizer: AdamHyper::new(CNN_LR, 0.0),
            })
        };
        let tn = |encoder_layers, d_emb, w_ff| {
            ModelConfig::Transformer(TnConfig {
                encoder_layers,
                n_h: 16,
                d_emb,
                w_ff,
                pe_dropout: 0.1,
                positional_encoding: true,
                optimizer: AdamHyper::new(TN_LR, TN_WEIGHT_DECAY),
            })
        };
        Ok(match name.to_ascii_lowercase().as_str() {
            "lstm1" => lstm(&[2, 2, 1]),
            "lstm2" => lstm(&[2, 2]),
            "lstm3" => lstm(&[2, 1]),
            "cnn1" => cnn(9, 12, 18, 5, true, 64, 32),
            "cnn2" => cnn(1, 12, 18, 3, false, 256, 128),
            "cnn3" => cnn(1, 18, 6, 5, true, 64, 32),
            "tn1" => tn(1, 16, 16),
            "tn2" => tn(1, 128, 64),
            "tn3" => tn(4, 128, 64),
            _ => return Err(Error::UnknownConfig(name.to_string())),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            ModelConfig::Lstm(_) => Arch::Lstm,
            ModelConfig::Cnn(_) => Arch::Cnn,
            ModelConfig::Transformer(_) => Arch::Transformer,
        }
    }

    pub fn optimizer(&self) -> AdamHyper {
        match self {
            ModelConfig::Lstm(c) => c.optimizer,
            ModelConfig::Cnn(c) => c.optimizer,
            ModelConfig::Transformer(c) => c.optimizer,
        }
    }

    pub fn uses_batch_norm(&self) -> bool {
        matches!(self, ModelConfig::Cnn(c) if c.batch_norm)
    }
}

enum Net {
    Lstm(LstmNet),
    Cnn(CnnNet),
    Transformer(TnNet),
}

/// Result of one forward pass on a graph.
pub struct Forward {
    /// `[B, 3]` pre-softmax scores.
    pub logits: Var,
    /// Batch statistics of every batch-norm layer (train mode only).
    pub batch_stats: Vec<BatchStats>,
    /// Attention weight matrices (transformer only), `[B, n, n]` each.
    pub attention: Vec<Var>,
}

/// A classifier with its parameters and batch-norm running statistics.
pub struct Model {
    pub name: String,
    pub config: ModelConfig,
    /// Time steps per input window.
    pub n: usize,
    /// Features per time step.
    pub d: usize,
    pub seed: u64,
    pub params: ParamStore,
    pub running: Vec<BatchStats>,
    net: Net,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("params", &self.params.numel())
            .finish()
    }
}

impl Model {
    /// Named configuration with seeded random weights.
    pub fn from_name(name: &str, n: usize, d: usize, seed: u64) -> Result<Model> {
        Model::new(name, ModelConfig::by_name(name)?, n, d, seed)
    }

    pub fn new(name: &str, config: ModelConfig, n: usize, d: usize, seed: u64) -> Result<Model> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidConfig(format!("input window {n}x{d} is empty")));
        }
        let mut params = ParamStore::new();
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let (net, running) = match &config {
            ModelConfig::Lstm(c) => (Net::Lstm(LstmNet::build(c, d, &mut params, &mut rng)?), Vec::new()),
            ModelConfig::Cnn(c) => {
                let running = CnnNet::channel_counts(c)
                    .into_iter()
                    .map(|ch| BatchStats {
                        mean: vec![0.0; ch],
                        var: vec![1.0; ch],
                    })
                    .collect();
                debug_assert_eq!(CnnNet::norm_slots(c), CnnNet::channel_counts(c).len());
                (Net::Cnn(CnnNet::build(c, n, d, &mut params, &mut rng)?), running)
            }
            ModelConfig::Transformer(c) => (Net::Transformer(TnNet::build(c, d, &mut params, &mut rng)?), Vec::new()),
        };
        Ok(Model {
            name: name.to_string(),
            config,
            n,
            d,
            seed,
            params,
            running,
            net,
        })
    }

    pub fn arch(&self) -> Arch {
        self.config.arch()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 3 || x.shape[1] != self.n || x.shape[2] != self.d || x.shape[0] == 0 {
            return Err(Error::shape(
                "model input",
                format!("expected [batch, {}, {}], got {:?}", self.n, self.d, x.shape),
            ));
        }
        Ok(())
    }

    /// Builds the forward graph for `x: [B, n, d]` using `params` in place of
    /// the model's own parameters (same layout).
    pub fn forward_with(&self, g: &mut Graph, params: &ParamStore, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Forward> {
        self.check_input(x)?;
        match &self.net {
            Net::Lstm(net) => {
                let xv = g.input(x.clone());
                Ok(Forward {
                    logits: net.forward(g, params, xv)?,
                    batch_stats: Vec::new(),
                    attention: Vec::new(),
                })
            }
            Net::Cnn(net) => {
                let (logits, batch_stats) = net.forward(g, params, x, &self.running, mode, rng)?;
                Ok(Forward {
                    logits,
                    batch_stats,
                    attention: Vec::new(),
                })
            }
            Net::Transformer(net) => {
                let xv = g.input(x.clone());
                let (logits, attention) = net.forward(g, params, xv, mode, rng)?;
                Ok(Forward {
                    logits,
                    batch_stats: Vec::new(),
                    attention,
                })
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Forward> {
        self.forward_with(g, &self.params, x, mode, rng)
    }

    /// Eval-mode scores `[B, 3]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        // Eval mode never draws from the stream.
        let mut rng = rng::stream(self.seed, &[tag::DROPOUT]);
        let f = self.forward(&mut g, x, Mode::Eval, &mut rng)?;
        Ok(g.value(f.logits).clone())
    }

    /// Eval-mode outputs `[B, 3]`: class probabilities for the LSTM and CNN,
    /// raw scores for the transformer.
    pub fn outputs(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = self.logits(x)?;
        if self.arch() != Arch::Transformer {
            for row in t.data.chunks_mut(3) {
                softmax_in_place(row);
            }
        }
        Ok(t)
    }

    /// Predicted class per sample (argmax, first maximum on ties).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Label>> {
        let scores = self.logits(x)?;
        Ok(scores.data.chunks(3).map(argmax_label).collect())
    }

    /// Moves the running statistics towards `batch` with momentum 0.1.
    pub fn update_running_stats(&mut self, batch: &[BatchStats]) {
        for (r, b) in self.running.iter_mut().zip(batch) {
            for (rm, bm) in r.mean.iter_mut().zip(&b.mean) {
                *rm = (1.0 - BATCH_NORM_MOMENTUM) * *rm + BATCH_NORM_MOMENTUM * bm;
            }
            for (rv, bv) in r.var.iter_mut().zip(&b.var) {
                *rv = (1.0 - BATCH_NORM_MOMENTUM) * *rv + BATCH_NORM_MOMENTUM * bv;
            }
        }
    }

    /// Weights of LSTM layer `l`.
    pub fn lstm_cell_params(&self, l: usize) -> Option<LstmCellParams> {
        match &self.net {
            Net::Lstm(net) => Some(net.cell_params(&self.params, l)),
            _ => None,
        }
    }
}

/// Cross-entropy of `model` on `(x, labels)` in train mode with dropout
/// masks drawn from a stream re-seeded by `mask_seed`, so repeated calls see
/// the same masks.
pub fn train_loss_with(model: &Model, params: &ParamStore, x: &Tensor, labels: &[usize], mask_seed: u64) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let mut rng = rng::stream(mask_seed, &[tag::DROPOUT]);
    let f = model.forward_with(&mut g, params, x, Mode::Train, &mut rng)?;
    let loss = g.cross_entropy(f.logits, labels)?;
    Ok((g, loss))
}

/// Largest relative error between backprop and central differences of the
/// train-mode loss over `coords` randomly chosen parameter entries.
pub fn model_grad_check(model: &Model, x: &Tensor, labels: &[usize], coords: usize, seed: u64) -> Result<f64> {
    let (g, loss) = train_loss_with(model, &model.params, x, labels, seed)?;
    let analytic = g.backward(loss)?.for_params(&model.params);
    let mut rng = rng::stream(seed, &[tag::INIT, 1]);
    let picks = crate::nn::gradcheck::sample_coords(&model.params, coords, &mut rng);
    let mut params = model.params.clone();
    crate::nn::gradcheck::grad_check(
        |p| {
            let (g, loss) = train_loss_with(model, p, x, labels, seed)?;
            Ok(g.value(loss).data[0])
        },
        &mut params,
        &analytic,
        &picks,
        crate::nn::gradcheck::DEFAULT_EPS,
    )
}

pub fn argmax_label(scores: &[f64]) -> Label {
    let mut best = 0;
    for (i, v) in scores.iter().enumerate() {
        if *v > scores[best] {
            best = i;
        }
    }
    Label::from_index(best).unwrap_or(Label::Lk)
}

/// Stacks feature matrices into a `[B, n, d]` batch.
pub fn batch_tensor(items: &[&FeatureMatrix]) -> Result<Tensor> {
    let first = items.first().ok_or(Error::EmptyData)?;
    let (n, d) = (first.rows, first.values.len() / first.rows.max(1));
    let mut data = Vec::with_capacity(items.len() * n * d);
    for fm in items {
        if fm.rows != n || fm.values.len() != n * d {
            return Err(Error::shape(
                "batch",
                format!("matrix of {} rows among {n}-row matrices", fm.rows),
            ));
        }
        data.extend_from_slice(&fm.values);
    }
    Tensor::new(vec![items.len(), n, d], data)
}
