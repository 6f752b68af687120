//! Matrix-factorisation and MLP recommenders trained under arbitrary loss
//! expressions.
//!
//! Training composes the expression's scalar derivative `d loss / d ŷ` with
//! the model's tape at `ŷ`: the per-example derivatives (scaled by the batch
//! reduction) seed the reverse sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Blob, CheckpointError};
use crate::data::Example;
use crate::expr::{LossExpr, SafeMathConfig};
use crate::metrics::{EvalReport, MetricError};
use crate::tensor::{
    BatchStats, Mode, Optimizer, ParamId, ParamStore, Tape, Tensor, TensorError, Var,
};
use crate::Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("user {user} / item {item} outside model vocabulary ({n_users} users, {n_items} items)")]
    Lookup {
        user: usize,
        item: usize,
        n_users: usize,
        n_items: usize,
    },
    #[error("non-finite loss {value} (gradient {grad}) at prediction {yhat}, label {label}")]
    NonFinite {
        value: f64,
        grad: f64,
        yhat: f64,
        label: f64,
    },
    #[error("training-mode forward needs a random generator for dropout")]
    MissingRng,
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Mf,
    Mlp,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mf" => Ok(ModelKind::Mf),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(format!("unknown model `{other}` (expected mf or mlp)")),
        }
    }
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mf => "mf",
            ModelKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_users: usize,
    pub n_items: usize,
    pub embed_dim: usize,
    /// Dropout rate of the MLP hidden layers.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, n_users: usize, n_items: usize) -> Self {
        Self {
            kind,
            n_users,
            n_items,
            embed_dim: 64,
            dropout: 0.2,
        }
    }
}

/// Half-width of the uniform weight initialisation.
pub const INIT_RANGE: f64 = 0.01;
/// Hidden widths after the `2 * embed_dim` input of the MLP.
pub const MLP_HIDDEN: [usize; 2] = [64, 16];
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub reduction: Reduction,
    pub lr: f64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            reduction: Reduction::Sum,
            lr: 0.01,
            l2: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> Optimizer {
        Optimizer::sgd(self.lr, self.l2)
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Arch {
    Mf {
        user_bias: ParamId,
        item_bias: ParamId,
        global_bias: ParamId,
    },
    Mlp {
        hidden: Vec<(Dense, Norm)>,
        out: Dense,
    },
}

/// A recommender: user/item embeddings plus either an MF or MLP interaction layer.
#[derive(Debug, Clone)]
pub struct RecModel {
    cfg: ModelConfig,
    store: ParamStore,
    user_emb: ParamId,
    item_emb: ParamId,
    arch: Arch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
}

impl RecModel {
    /// Fresh model with every weight drawn from `uniform(-0.01, 0.01)`;
    /// batchnorm scales start at 1 and shifts at 0.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut uni = |shape| Tensor::uniform(shape, -INIT_RANGE, INIT_RANGE, &mut rng);
        let d = cfg.embed_dim;
        let user_emb = store.add("user_emb", uni([cfg.n_users, d]), true);
        let item_emb = store.add("item_emb", uni([cfg.n_items, d]), true);
        let arch = match cfg.kind {
            ModelKind::Mf => Arch::Mf {
                user_bias: store.add("user_bias", uni([cfg.n_users, 1]), false),
                item_bias: store.add("item_bias", uni([cfg.n_items, 1]), false),
                global_bias: store.add("global_bias", uni([1, 1]), false),
            },
            ModelKind::Mlp => {
                let mut width = 2 * d;
                let mut hidden = Vec::new();
                for (k, &h) in MLP_HIDDEN.iter().enumerate() {
                    let dense = Dense {
                        w: store.add(format!("fc{k}.w"), uni([width, h]), true),
                        b: store.add(format!("fc{k}.b"), uni([1, h]), false),
                    };
                    let norm = Norm {
                        gamma: store.add(format!("bn{k}.gamma"), Tensor::filled([1, h], 1.0), false),
                        beta: store.add(format!("bn{k}.beta"), Tensor::zeros([1, h]), false),
                        running_mean: vec![0.0; h],
                        running_var: vec![1.0; h],
                    };
                    hidden.push((dense, norm));
                    width = h;
                }
                let out = Dense {
                    w: store.add("out.w", uni([width, 1]), true),
                    b: store.add("out.b", uni([1, 1]), false),
                };
                Arch::Mlp { hidden, out }
            }
        };
        Self {
            cfg,
            store,
            user_emb,
            item_emb,
            arch,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn kind(&self) -> ModelKind {
        self.cfg.kind
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Every parameter value concatenated in store order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.store
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().copied())
            .collect()
    }

    fn check_ids(&self, users: &[usize], items: &[usize]) -> Result<()> {
        for (&u, &i) in users.iter().zip(items) {
            if u >= self.cfg.n_users || i >= self.cfg.n_items {
                return Err(ModelError::Lookup {
                    user: u,
                    item: i,
                    n_users: self.cfg.n_users,
                    n_items: self.cfg.n_items,
                });
            }
        }
        Ok(())
    }

    /// Builds `ŷ` (shape `[batch, 1]`) on the tape. In training mode the
    /// returned batch statistics belong to the hidden batchnorm layers.
    pub fn forward(
        &self,
        tape: &mut Tape,
        users: &[usize],
        items: &[usize],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<(Var, Vec<BatchStats>)> {
        self.check_ids(users, items)?;
        let s = &self.store;
        let eu = tape.embedding(s, self.user_emb, users)?;
        let ei = tape.embedding(s, self.item_emb, items)?;
        let mut stats = Vec::new();
        let h_out = match &self.arch {
            Arch::Mf {
                user_bias,
                item_bias,
                global_bias,
            } => {
                let prod = tape.mul(eu, ei)?;
                let dot = tape.row_sum(prod);
                let bu = tape.embedding(s, *user_bias, users)?;
                let bi = tape.embedding(s, *item_bias, items)?;
                let bg = tape.param(s, *global_bias);
                let h = tape.add(dot, bu)?;
                let h = tape.add(h, bi)?;
                tape.add(h, bg)?
            }
            Arch::Mlp { hidden, out } => {
                let mut rng = rng;
                let mut x = tape.concat(eu, ei)?;
                for (dense, norm) in hidden {
                    let w = tape.param(s, dense.w);
                    let b = tape.param(s, dense.b);
                    let z = tape.matmul(x, w)?;
                    let z = tape.add(z, b)?;
                    let gamma = tape.param(s, norm.gamma);
                    let beta = tape.param(s, norm.beta);
                    let (z, st) = tape.batchnorm(
                        z,
                        gamma,
                        beta,
                        mode,
                        (&norm.running_mean, &norm.running_var),
                    )?;
                    stats.extend(st);
                    let z = tape.relu(z);
                    x = match mode {
                        Mode::Eval => z,
                        Mode::Train => {
                            let r = rng.as_deref_mut().ok_or(ModelError::MissingRng)?;
                            tape.dropout(z, self.cfg.dropout, mode, r)
                        }
                    };
                }
                let w = tape.param(s, out.w);
                let b = tape.param(s, out.b);
                let z = tape.matmul(x, w)?;
                tape.add(z, b)?
            }
        };
        Ok((tape.sigmoid(h_out), stats))
    }

    /// Eval-mode prediction for one pair.
    pub fn predict(&self, user: usize, item: usize) -> Result<f64> {
        Ok(self.predict_batch(&[user], &[item])?[0])
    }

    /// Eval-mode predictions, computed in chunks without gradient tracking.
    pub fn predict_batch(&self, users: &[usize], items: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(users.len());
        for (u, i) in users.chunks(4096).zip(items.chunks(4096)) {
            let mut tape = Tape::no_grad();
            let (yhat, _) = self.forward(&mut tape, u, i, Mode::Eval, None)?;
            out.extend_from_slice(tape.value(yhat).data());
        }
        Ok(out)
    }

    pub fn scores(&self, examples: &[Example]) -> Result<Vec<f64>> {
        let users: Vec<usize> = examples.iter().map(|e| e.user).collect();
        let items: Vec<usize> = examples.iter().map(|e| e.item).collect();
        self.predict_batch(&users, &items)
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<EvalReport> {
        let scores = self.scores(examples)?;
        let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
        Ok(EvalReport::compute(&labels, &scores)?)
    }

    fn update_running(&mut self, stats: &[BatchStats]) {
        if let Arch::Mlp { hidden, .. } = &mut self.arch {
            for ((_, norm), st) in hidden.iter_mut().zip(stats) {
                for (r, m) in norm.running_mean.iter_mut().zip(&st.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, v) in norm.running_var.iter_mut().zip(&st.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    /// Accumulates the gradient of the reduced batch loss into the store and
    /// returns the mean per-example loss.
    fn accumulate_loss_grad(
        &mut self,
        batch: &[Example],
        loss: &LossExpr,
        cfg: &SafeMathConfig,
        reduction: Reduction,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<f64> {
        let users: Vec<usize> = batch.iter().map(|e| e.user).collect();
        let items: Vec<usize> = batch.iter().map(|e| e.item).collect();
        let mut tape = Tape::new();
        let (yhat, stats) = self.forward(&mut tape, &users, &items, mode, rng)?;
        let scale = match reduction {
            Reduction::Mean => 1.0 / batch.len() as f64,
            Reduction::Sum => 1.0,
        };
        let mut seed = Vec::with_capacity(batch.len());
        let mut total = 0.0;
        for (&p, e) in tape.value(yhat).data().iter().zip(batch) {
            let (value, grad) = loss.eval_with_grad(p, e.label, cfg);
            if !value.is_finite() || !grad.is_finite() {
                return Err(ModelError::NonFinite {
                    value,
                    grad,
                    yhat: p,
                    label: e.label,
                });
            }
            total += value;
            seed.push(grad * scale);
        }
        tape.backward_with_seed(yhat, Tensor::column(seed), &mut self.store)?;
        if mode == Mode::Train {
            self.update_running(&stats);
        }
        Ok(total / batch.len() as f64)
    }

    /// One pass over `train` in shuffled minibatches.
    pub fn train_epoch(
        &mut self,
        train: &[Example],
        loss: &LossExpr,
        cfg: &SafeMathConfig,
        opt: &mut Optimizer,
        rng: &mut Rng,
        tc: &TrainConfig,
    ) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut batch = Vec::with_capacity(tc.batch_size);
        for chunk in order.chunks(tc.batch_size.max(1)) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| train[k]));
            let mean = self.accumulate_loss_grad(&batch, loss, cfg, tc.reduction, Mode::Train, Some(rng))?;
            opt.step(&mut self.store)?;
            loss_sum += mean * chunk.len() as f64;
            batches += 1;
        }
        Ok(EpochStats {
            mean_loss: if train.is_empty() { 0.0 } else { loss_sum / train.len() as f64 },
            batches,
        })
    }

    /// Gradient of the mean loss over `batch` with respect to every parameter,
    /// flattened in store order, computed in eval mode. Leaves the stored
    /// gradients cleared.
    pub fn loss_gradient(&mut self, batch: &[Example], loss: &LossExpr, cfg: &SafeMathConfig) -> Result<Vec<f64>> {
        self.store.zero_grad();
        self.accumulate_loss_grad(batch, loss, cfg, Reduction::Mean, Mode::Eval, None)?;
        let g = self.store.flat_grad();
        self.store.zero_grad();
        Ok(g)
    }

    pub fn to_blob(&self) -> Blob {
        let mut blob = Blob::new(self.cfg.kind.name());
        blob.meta = vec![
            ("n_users".into(), self.cfg.n_users as f64),
            ("n_items".into(), self.cfg.n_items as f64),
            ("embed_dim".into(), self.cfg.embed_dim as f64),
            ("dropout".into(), self.cfg.dropout),
        ];
        for (_, p) in self.store.iter() {
            blob.tensors.push((p.name.clone(), p.value.clone()));
        }
        if let Arch::Mlp { hidden, .. } = &self.arch {
            for (k, (_, norm)) in hidden.iter().enumerate() {
                let w = norm.running_mean.len();
                blob.tensors.push((
                    format!("bn{k}.running_mean"),
                    Tensor::from_vec([1, w], norm.running_mean.clone()).expect("width"),
                ));
                blob.tensors.push((
                    format!("bn{k}.running_var"),
                    Tensor::from_vec([1, w], norm.running_var.clone()).expect("width"),
                ));
            }
        }
        blob
    }

    pub fn from_blob(blob: &Blob) -> Result<Self> {
        let kind = match blob.kind.as_str() {
            "mf" => ModelKind::Mf,
            "mlp" => ModelKind::Mlp,
            other => {
                return Err(CheckpointError::Kind {
                    expected: "mf or mlp".into(),
                    found: other.into(),
                }
                .into())
            }
        };
        let cfg = ModelConfig {
            kind,
            n_users: blob.meta("n_users")? as usize,
            n_items: blob.meta("n_items")? as usize,
            embed_dim: blob.meta("embed_dim")? as usize,
            dropout: blob.meta("dropout")?,
        };
        let mut model = RecModel::init(cfg, 0);
        let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = model.store.param(id).name.clone();
            let t = blob.tensor(&name)?;
            let expected = model.store.value(id).shape();
            if t.shape() != expected {
                return Err(CheckpointError::Shape {
                    name,
                    expected,
                    found: t.shape(),
                }
                .into());
            }
            *model.store.value_mut(id) = t.clone();
        }
        if let Arch::Mlp { hidden, .. } = &mut model.arch {
            for (k, (_, norm)) in hidden.iter_mut().enumerate() {
                norm.running_mean = blob.tensor(&format!("bn{k}.running_mean"))?.data().to_vec();
                norm.running_var = blob.tensor(&format!("bn{k}.running_var"))?.data().to_vec();
            }
        }
        Ok(model)
    }
}
