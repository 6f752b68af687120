//! Recurrent policy that writes loss programs one token at a time.
//!
//! Each round samples an operator, then one slot per operand. The slot head
//! is masked to slots that already exist, and the second operand of a binary
//! operator may not repeat the first. Logits of both heads are squashed to
//! `1.5 * tanh(z)` before the softmax, so no available token ever becomes
//! unreachable.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Blob, CheckpointError};
use crate::expr::{ExprError, LossExpr, Node, Operator, N_INPUTS};
use crate::search::{LossSource, SearchError};
use crate::tensor::{Optimizer, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::Rng;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid controller config: {0}")]
    Config(String),
    #[error("{episodes} episodes but {rewards} rewards")]
    Length { episodes: usize, rewards: usize },
    #[error("decision {index} is not available at step {step}")]
    Replay { step: usize, index: usize },
    #[error("trajectory ended after {0} decisions")]
    Truncated(usize),
}

pub type Result<T> = std::result::Result<T, ControllerError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Number of rounds `m`; every sample has exactly this many nodes.
    pub rounds: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub init_range: f64,
    pub logit_scale: f64,
    pub lr: f64,
    pub l2: f64,
    pub entropy_weight: f64,
    pub baseline_decay: f64,
    /// Rewards averaged per policy update.
    pub episodes_per_update: usize,
    /// Operator vocabulary, in head order.
    pub operators: Vec<Operator>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            hidden: 32,
            embed_dim: 32,
            layers: 2,
            init_range: 0.1,
            logit_scale: 1.5,
            lr: 1e-3,
            l2: 1e-5,
            entropy_weight: 1e-4,
            baseline_decay: 0.95,
            episodes_per_update: 10,
            operators: Operator::ALL.to_vec(),
        }
    }
}

impl ControllerConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ControllerError::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.operators.is_empty() {
            return bad("operator set is empty");
        }
        for (k, op) in self.operators.iter().enumerate() {
            if self.operators[..k].contains(op) {
                return bad("operator set has duplicates");
            }
        }
        if self.hidden == 0 || self.embed_dim == 0 || self.layers == 0 {
            return bad("network sizes must be positive");
        }
        if self.episodes_per_update == 0 {
            return bad("episodes_per_update must be positive");
        }
        Ok(())
    }

    fn n_slots(&self) -> usize {
        N_INPUTS + self.rounds
    }

    fn n_tokens(&self) -> usize {
        1 + self.operators.len() + self.n_slots()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Operator(Operator),
    Operand(usize),
}

/// One sampled program with the statistics REINFORCE needs.
#[derive(Debug, Clone)]
pub struct Episode {
    pub decisions: Vec<Decision>,
    pub log_prob: f64,
    /// Sum of the per-decision entropies.
    pub entropy: f64,
    pub expr: LossExpr,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub mean_reward: f64,
    pub baseline_before: f64,
    pub baseline_after: f64,
}

#[derive(Debug, Clone)]
struct Lstm {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Head {
    w: ParamId,
    b: ParamId,
}

struct Rollout {
    decisions: Vec<Decision>,
    nodes: Vec<Node>,
    log_prob: Var,
    entropy: f64,
    probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    store: ParamStore,
    tokens: ParamId,
    lstm: Vec<Lstm>,
    op_head: Head,
    slot_head: Head,
    opt: Optimizer,
    baseline: f64,
    updates: u64,
    pending: Vec<Episode>,
    rewards: Vec<f64>,
}

impl Controller {
    pub fn new(cfg: ControllerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let r = cfg.init_range;
        let mut uni = |shape| Tensor::uniform(shape, -r, r, &mut rng);
        let mut store = ParamStore::new();
        let (h, e) = (cfg.hidden, cfg.embed_dim);
        let tokens = store.add("tokens", uni([cfg.n_tokens(), e]), true);
        let mut lstm = Vec::new();
        for l in 0..cfg.layers {
            let input = if l == 0 { e } else { h };
            lstm.push(Lstm {
                wx: store.add(format!("lstm{l}.wx"), uni([input, 4 * h]), true),
                wh: store.add(format!("lstm{l}.wh"), uni([h, 4 * h]), true),
                b: store.add(format!("lstm{l}.b"), uni([1, 4 * h]), false),
            });
        }
        let op_head = Head {
            w: store.add("op_head.w", uni([h, cfg.operators.len()]), true),
            b: store.add("op_head.b", uni([1, cfg.operators.len()]), false),
        };
        let slot_head = Head {
            w: store.add("slot_head.w", uni([h, cfg.n_slots()]), true),
            b: store.add("slot_head.b", uni([1, cfg.n_slots()]), false),
        };
        let opt = Optimizer::adam(cfg.lr, cfg.l2);
        Ok(Self {
            cfg,
            store,
            tokens,
            lstm,
            op_head,
            slot_head,
            opt,
            baseline: 0.0,
            updates: 0,
            pending: Vec::new(),
            rewards: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.store
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().copied())
            .collect()
    }

    fn op_token(&self, k: usize) -> usize {
        1 + k
    }

    fn slot_token(&self, s: usize) -> usize {
        1 + self.cfg.operators.len() + s
    }

    fn step(&self, tape: &mut Tape, token: usize, state: &mut [(Var, Var)]) -> Result<Var> {
        let h = self.cfg.hidden;
        let mut x = tape.embedding(&self.store, self.tokens, &[token])?;
        for (layer, (hs, cs)) in self.lstm.iter().zip(state.iter_mut()) {
            let wx = tape.param(&self.store, layer.wx);
            let wh = tape.param(&self.store, layer.wh);
            let b = tape.param(&self.store, layer.b);
            let zx = tape.matmul(x, wx)?;
            let zh = tape.matmul(*hs, wh)?;
            let z = tape.add(zx, zh)?;
            let z = tape.add(z, b)?;
            let i = tape.slice_cols(z, 0, h)?;
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(z, h, h)?;
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(z, 2 * h, h)?;
            let g = tape.tanh(g);
            let o = tape.slice_cols(z, 3 * h, h)?;
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, *cs)?;
            let ig = tape.mul(i, g)?;
            let c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            let hn = tape.mul(o, tc)?;
            *hs = hn;
            *cs = c;
            x = hn;
        }
        Ok(x)
    }

    fn head(&self, tape: &mut Tape, h: Var, head: &Head, mask: &[bool]) -> Result<Var> {
        let w = tape.param(&self.store, head.w);
        let b = tape.param(&self.store, head.b);
        let z = tape.matmul(h, w)?;
        let z = tape.add(z, b)?;
        let z = tape.tanh(z);
        let z = tape.scale(z, self.cfg.logit_scale);
        Ok(tape.log_softmax_masked(z, mask)?)
    }

    /// Runs the policy for `rounds` rounds; `choose` picks an index given the
    /// step number and the probability vector of that step.
    fn rollout(&self, tape: &mut Tape, mut choose: impl FnMut(usize, &[f64]) -> Result<usize>) -> Result<Rollout> {
        let zero = Tensor::zeros([1, self.cfg.hidden]);
        let mut state: Vec<(Var, Var)> = (0..self.cfg.layers)
            .map(|_| (tape.constant(zero.clone()), tape.constant(zero.clone())))
            .collect();
        let mut token = 0;
        let mut decisions = Vec::new();
        let mut nodes = Vec::new();
        let mut log_prob: Option<Var> = None;
        let mut entropy = 0.0;
        let mut all_probs = Vec::new();
        let op_mask = vec![true; self.cfg.operators.len()];

        let mut decide = |tape: &mut Tape, lp: Var, step: usize, log_prob: &mut Option<Var>| -> Result<usize> {
            let probs: Vec<f64> = tape.value(lp).data().iter().map(|v| v.exp()).collect();
            let idx = choose(step, &probs)?;
            if idx >= probs.len() || probs[idx] == 0.0 {
                return Err(ControllerError::Replay { step, index: idx });
            }
            entropy -= probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            let term = tape.pick(lp, idx)?;
            *log_prob = Some(match *log_prob {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
            all_probs.push(probs);
            Ok(idx)
        };

        for round in 0..self.cfg.rounds {
            let h = self.step(tape, token, &mut state)?;
            let lp = self.head(tape, h, &self.op_head, &op_mask)?;
            let k = decide(tape, lp, decisions.len(), &mut log_prob)?;
            let op = self.cfg.operators[k];
            decisions.push(Decision::Operator(op));
            token = self.op_token(k);

            let existing = N_INPUTS + round;
            let mut operands = Vec::with_capacity(2);
            for _ in 0..op.arity() {
                let mask: Vec<bool> = (0..self.cfg.n_slots())
                    .map(|s| s < existing && !operands.contains(&s))
                    .collect();
                let h = self.step(tape, token, &mut state)?;
                let lp = self.head(tape, h, &self.slot_head, &mask)?;
                let s = decide(tape, lp, decisions.len(), &mut log_prob)?;
                decisions.push(Decision::Operand(s));
                operands.push(s);
                token = self.slot_token(s);
            }
            nodes.push(match operands[..] {
                [a] => Node::unary(op, a),
                [a, b] => Node::binary(op, a, b),
                _ => unreachable!("operators are unary or binary"),
            });
        }
        Ok(Rollout {
            decisions,
            nodes,
            log_prob: log_prob.expect("at least one decision"),
            entropy,
            probs: all_probs,
        })
    }

    fn replay(&self, tape: &mut Tape, decisions: &[Decision]) -> Result<Rollout> {
        let r = self.rollout(tape, |step, probs| {
            let d = *decisions.get(step).ok_or(ControllerError::Truncated(step))?;
            let idx = match d {
                Decision::Operator(op) => self
                    .cfg
                    .operators
                    .iter()
                    .position(|&o| o == op)
                    .ok_or(ControllerError::Replay { step, index: usize::MAX })?,
                Decision::Operand(s) => s,
            };
            if idx >= probs.len() {
                return Err(ControllerError::Replay { step, index: idx });
            }
            Ok(idx)
        })?;
        if r.decisions != decisions {
            return Err(ControllerError::Replay {
                step: r.decisions.len(),
                index: usize::MAX,
            });
        }
        Ok(r)
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Episode> {
        let mut tape = Tape::no_grad();
        let r = self.rollout(&mut tape, |_, probs| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0;
            for (k, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    acc += p;
                    last = k;
                    if u < acc {
                        return Ok(k);
                    }
                }
            }
            Ok(last)
        })?;
        Ok(Episode {
            log_prob: tape.value(r.log_prob).item(),
            entropy: r.entropy,
            expr: LossExpr::new(r.nodes)?,
            decisions: r.decisions,
        })
    }

    /// Log-probability of a full decision sequence under the current policy.
    pub fn log_prob(&self, decisions: &[Decision]) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let r = self.replay(&mut tape, decisions)?;
        Ok(tape.value(r.log_prob).item())
    }

    /// Gradient of [`Self::log_prob`] with respect to every policy parameter,
    /// flattened in store order.
    pub fn log_prob_grad(&mut self, decisions: &[Decision]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let r = self.replay(&mut tape, decisions)?;
        self.store.zero_grad();
        tape.backward(r.log_prob, &mut self.store)?;
        let g = self.store.flat_grad();
        self.store.zero_grad();
        Ok(g)
    }

    /// Probability vector seen at each decision of a trajectory.
    pub fn step_distributions(&self, decisions: &[Decision]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::no_grad();
        Ok(self.replay(&mut tape, decisions)?.probs)
    }

    /// One Adam step on `-mean_k (r_k + w H_k - b) log p_k`, then moves the
    /// baseline toward the mean reward.
    pub fn reinforce_update(&mut self, episodes: &[Episode], rewards: &[f64]) -> Result<UpdateStats> {
        if episodes.len() != rewards.len() || episodes.is_empty() {
            return Err(ControllerError::Length {
                episodes: episodes.len(),
                rewards: rewards.len(),
            });
        }
        let n = episodes.len() as f64;
        let b = self.baseline;
        let mut tape = Tape::new();
        let mut objective: Option<Var> = None;
        for (ep, &r) in episodes.iter().zip(rewards) {
            let roll = self.replay(&mut tape, &ep.decisions)?;
            let adv = r + self.cfg.entropy_weight * ep.entropy - b;
            let term = tape.scale(roll.log_prob, -adv / n);
            objective = Some(match objective {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        self.store.zero_grad();
        tape.backward(objective.expect("non-empty"), &mut self.store)?;
        self.opt.step(&mut self.store)?;
        let mean_reward = rewards.iter().sum::<f64>() / n;
        self.baseline = self.cfg.baseline_decay * b + (1.0 - self.cfg.baseline_decay) * mean_reward;
        self.updates += 1;
        Ok(UpdateStats {
            mean_reward,
            baseline_before: b,
            baseline_after: self.baseline,
        })
    }

    pub fn to_blob(&self) -> Blob {
        let mut blob = Blob::new("controller");
        let c = &self.cfg;
        blob.meta = vec![
            ("rounds".into(), c.rounds as f64),
            ("hidden".into(), c.hidden as f64),
            ("embed_dim".into(), c.embed_dim as f64),
            ("layers".into(), c.layers as f64),
            ("baseline".into(), self.baseline),
            ("updates".into(), self.updates as f64),
            ("n_operators".into(), c.operators.len() as f64),
        ];
        for (k, op) in c.operators.iter().enumerate() {
            let idx = Operator::ALL.iter().position(|o| o == op).expect("known operator");
            blob.meta.push((format!("operator{k}"), idx as f64));
        }
        for (_, p) in self.store.iter() {
            blob.tensors.push((p.name.clone(), p.value.clone()));
        }
        blob
    }

    /// Restores weights and baseline; optimizer moments start fresh.
    pub fn from_blob(blob: &Blob, base: ControllerConfig) -> Result<Self> {
        blob.expect_kind("controller")?;
        let n_ops = blob.meta("n_operators")? as usize;
        let mut operators = Vec::with_capacity(n_ops);
        for k in 0..n_ops {
            let idx = blob.meta(&format!("operator{k}"))? as usize;
            let op = *Operator::ALL
                .get(idx)
                .ok_or_else(|| CheckpointError::Corrupt(format!("operator index {idx}")))?;
            operators.push(op);
        }
        let cfg = ControllerConfig {
            rounds: blob.meta("rounds")? as usize,
            hidden: blob.meta("hidden")? as usize,
            embed_dim: blob.meta("embed_dim")? as usize,
            layers: blob.meta("layers")? as usize,
            operators,
            ..base
        };
        let mut c = Controller::new(cfg, 0)?;
        let ids: Vec<ParamId> = c.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = c.store.param(id).name.clone();
            let t = blob.tensor(&name)?;
            let expected = c.store.value(id).shape();
            if t.shape() != expected {
                return Err(CheckpointError::Shape {
                    name,
                    expected,
                    found: t.shape(),
                }
                .into());
            }
            *c.store.value_mut(id) = t.clone();
        }
        c.baseline = blob.meta("baseline")?;
        c.updates = blob.meta("updates")? as u64;
        Ok(c)
    }
}

impl LossSource for Controller {
    fn next_loss(&mut self, rng: &mut Rng) -> std::result::Result<LossExpr, SearchError> {
        let ep = self.sample(rng)?;
        let expr = ep.expr.clone();
        self.pending.push(ep);
        Ok(expr)
    }

    fn feedback(&mut self, reward: f64) -> std::result::Result<bool, SearchError> {
        self.rewards.push(reward);
        if self.rewards.len() < self.cfg.episodes_per_update {
            return Ok(false);
        }
        let episodes = std::mem::take(&mut self.pending);
        let rewards = std::mem::take(&mut self.rewards);
        self.reinforce_update(&episodes, &rewards)?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rounds: usize) -> Controller {
        Controller::new(
            ControllerConfig {
                rounds,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn samples_have_m_nodes_and_parse_back() {
        let c = small(2);
        let mut rng = Rng::seed_from_u64(9);
        for _ in 0..50 {
            let ep = c.sample(&mut rng).unwrap();
            assert_eq!(ep.expr.len(), 2);
            let max_slot = ep
                .expr
                .nodes()
                .iter()
                .flat_map(|n| [Some(n.lhs), n.rhs])
                .flatten()
                .max()
                .unwrap();
            assert!(max_slot < 5);
            let back = LossExpr::parse(&ep.expr.to_string()).unwrap();
            assert!(back.structurally_eq(&ep.expr));
            assert!((c.log_prob(&ep.decisions).unwrap() - ep.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let c = small(4);
        let a = c.sample(&mut Rng::seed_from_u64(5)).unwrap();
        let b = c.sample(&mut Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.decisions, b.decisions);
    }

    #[test]
    fn unavailable_operand_is_rejected() {
        let c = small(1);
        let d = [Decision::Operator(Operator::Neg), Decision::Operand(3)];
        assert!(matches!(c.log_prob(&d), Err(ControllerError::Replay { step: 1, index: 3 })));
        let d = [Decision::Operator(Operator::Add), Decision::Operand(1), Decision::Operand(1)];
        assert!(matches!(c.log_prob(&d), Err(ControllerError::Replay { step: 2, index: 1 })));
    }

    #[test]
    fn config_validation() {
        let cfg = ControllerConfig {
            operators: vec![],
            ..Default::default()
        };
        assert!(matches!(Controller::new(cfg, 0), Err(ControllerError::Config(_))));
        let c = small(1);
        let mut c2 = c.clone();
        assert!(matches!(c2.reinforce_update(&[], &[1.0]), Err(ControllerError::Length { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut c = small(3);
        let mut rng = Rng::seed_from_u64(1);
        let eps: Vec<_> = (0..10).map(|_| c.sample(&mut rng).unwrap()).collect();
        c.reinforce_update(&eps, &[0.1; 10]).unwrap();
        let bytes = c.to_blob().to_bytes();
        let back = Controller::from_blob(&Blob::read(&mut bytes.as_slice()).unwrap(), ControllerConfig::default()).unwrap();
        assert_eq!(back.flat_params(), c.flat_params());
        assert_eq!(back.baseline(), c.baseline());
        assert_eq!(back.config(), c.config());
    }
}
