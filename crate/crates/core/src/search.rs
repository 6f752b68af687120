//! The three search phases: alternating loss search with a gradient proxy
//! test and a reward filter, a sign-based validation check, and an
//! effectiveness test that trains fresh models to convergence.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerError;
use crate::data::{labels, Example, SplitDataset};
use crate::expr::{LossExpr, SafeMathConfig};
use crate::metrics::{EvalReport, Metric, MetricError};
use crate::models::{ModelConfig, ModelError, RecModel, TrainConfig};
use crate::Rng;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("ledger line {line}: {source}")]
    Ledger {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0} has no training examples")]
    NoData(&'static str),
}

pub type Result<T> = std::result::Result<T, SearchError>;

/// Anything that proposes candidate losses and learns from their rewards.
pub trait LossSource {
    fn next_loss(&mut self, rng: &mut Rng) -> Result<LossExpr>;

    /// Reward of the most recent candidate. Returns `true` when this reward
    /// closes an update cycle of the source.
    fn feedback(&mut self, reward: f64) -> Result<bool>;
}

/// Replays a fixed list of losses forever; every `cycle` rewards form one
/// update cycle.
#[derive(Debug, Clone)]
pub struct ScriptedSource {
    losses: Vec<LossExpr>,
    cycle: usize,
    next: usize,
    seen: usize,
    pub rewards: Vec<f64>,
}

impl ScriptedSource {
    pub fn new(losses: Vec<LossExpr>, cycle: usize) -> Self {
        assert!(!losses.is_empty() && cycle > 0, "scripted source needs losses and a cycle");
        Self {
            losses,
            cycle,
            next: 0,
            seen: 0,
            rewards: Vec::new(),
        }
    }
}

impl LossSource for ScriptedSource {
    fn next_loss(&mut self, _rng: &mut Rng) -> Result<LossExpr> {
        let f = self.losses[self.next % self.losses.len()].clone();
        self.next += 1;
        Ok(f)
    }

    fn feedback(&mut self, reward: f64) -> Result<bool> {
        self.rewards.push(reward);
        self.seen += 1;
        Ok(self.seen % self.cycle == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub delta: f64,
    /// Reward-filter tolerance; `f64::INFINITY` disables the filter.
    pub eta: f64,
    pub probe_size: usize,
    pub metric: Metric,
    pub default_negative_reward: f64,
    /// Outer iterations without a promoted loss before stopping.
    pub stall_budget: usize,
    pub max_iters: usize,
    pub max_samples: usize,
    /// When false every sample is trained, as if all passed the proxy test.
    pub proxy: bool,
    pub safe_math: SafeMathConfig,
    pub train: TrainConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            delta: 1e-4,
            eta: 0.01,
            probe_size: 5,
            metric: Metric::Auc,
            default_negative_reward: -0.05,
            stall_budget: 500,
            max_iters: 10_000,
            max_samples: usize::MAX,
            proxy: true,
            safe_math: SafeMathConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SearchError::Config(m.to_string()));
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if !(self.eta >= 0.0) {
            return bad("eta must be non-negative");
        }
        if !(5..=20).contains(&self.probe_size) {
            return bad("probe_size must lie in 5..=20");
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProxyOutcome {
    ZeroGrad,
    /// Index into the fingerprint store of the loss with a matching gradient.
    DuplicateOf(usize),
    Pass,
    /// The probe gradient was not finite.
    Invalid,
}

#[derive(Debug, Clone)]
pub struct Fingerprint {
    pub expr: LossExpr,
    pub grad: Vec<f64>,
    pub reward: Option<f64>,
}

/// Gradients of the losses tested since the last reset.
#[derive(Debug, Clone, Default)]
pub struct FingerprintStore {
    entries: Vec<Fingerprint>,
}

impl FingerprintStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Fingerprint {
        &self.entries[idx]
    }

    pub fn set_reward(&mut self, idx: usize, reward: f64) {
        self.entries[idx].reward = Some(reward);
    }

    fn nearest_within(&self, g: &[f64], delta: f64) -> Option<usize> {
        self.entries.iter().position(|e| l2_dist(&e.grad, g) < delta)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Classifies `f` by its parameter gradient on the probe batch. A passing
/// loss is added to `store`.
pub fn proxy_test(
    f: &LossExpr,
    snapshot: &mut RecModel,
    probe: &[Example],
    store: &mut FingerprintStore,
    delta: f64,
    safe_math: &SafeMathConfig,
) -> Result<ProxyOutcome> {
    let g = match snapshot.loss_gradient(probe, f, safe_math) {
        Ok(g) => g,
        Err(ModelError::NonFinite { .. }) => return Ok(ProxyOutcome::Invalid),
        Err(e) => return Err(e.into()),
    };
    if g.iter().any(|v| !v.is_finite()) {
        return Ok(ProxyOutcome::Invalid);
    }
    if l2_norm(&g) < delta {
        return Ok(ProxyOutcome::ZeroGrad);
    }
    if let Some(idx) = store.nearest_within(&g, delta) {
        return Ok(ProxyOutcome::DuplicateOf(idx));
    }
    store.entries.push(Fingerprint {
        expr: f.clone(),
        grad: g,
        reward: None,
    });
    Ok(ProxyOutcome::Pass)
}

/// One record of the candidate ledger. Later-phase fields stay `None` until
/// that phase has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub expr: String,
    pub reward: f64,
    pub iteration: usize,
    pub positive_rate: Option<f64>,
    pub best_epsilon: Option<f64>,
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub iterations: usize,
    pub samples: usize,
    pub zero_grad: usize,
    pub duplicates: usize,
    pub invalid: usize,
    pub clone_trainings: usize,
    pub promotions: usize,
    pub source_cycles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub samples: usize,
    pub expr: String,
    pub init_metric: f64,
    pub updated_metric: f64,
    pub reward: f64,
    pub promoted: bool,
}

#[derive(Debug, Clone)]
pub struct PhaseOne {
    pub candidates: Vec<CandidateRecord>,
    pub stats: SearchStats,
    pub log: Vec<IterationLog>,
    pub model: RecModel,
}

fn metric_on(model: &RecModel, examples: &[Example], metric: Metric) -> Result<f64> {
    let scores = model.scores(examples)?;
    Ok(metric.evaluate(&labels(examples), &scores)?)
}

/// Fixed probe batch drawn from the training split.
pub fn probe_batch(train: &[Example], size: usize, rng: &mut Rng) -> Vec<Example> {
    train.choose_multiple(rng, size.min(train.len())).copied().collect()
}

/// Alternating search. Each outer iteration samples losses until one passes
/// the proxy test, trains a clone of the current model for one epoch under
/// it, and promotes the clone when the validation reward is at least
/// `-eta`. Fingerprints are compared against a model snapshot taken at the
/// start of each source update cycle and forgotten when the cycle closes.
pub fn search_phase<S: LossSource + ?Sized>(
    cfg: &SearchConfig,
    data: &SplitDataset,
    model: RecModel,
    source: &mut S,
    rng: &mut Rng,
) -> Result<PhaseOne> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(SearchError::NoData("training split"));
    }
    if data.validation.is_empty() {
        return Err(SearchError::NoData("validation split"));
    }
    let mut model = model;
    let probe = probe_batch(&data.train, cfg.probe_size, rng);
    let mut snapshot = model.clone();
    let mut store = FingerprintStore::new();
    let mut opt = cfg.train.optimizer();
    let mut stats = SearchStats::default();
    let mut candidates = Vec::new();
    let mut log = Vec::new();
    let mut stalled = 0;

    let close_cycle = |cycle: bool, store: &mut FingerprintStore, snapshot: &mut RecModel, model: &RecModel, stats: &mut SearchStats| {
        if cycle {
            store.clear();
            *snapshot = model.clone();
            stats.source_cycles += 1;
        }
    };

    'outer: while stats.iterations < cfg.max_iters && stalled < cfg.stall_budget {
        let init = metric_on(&model, &data.validation, cfg.metric)?;
        let (f, slot) = loop {
            if stats.samples >= cfg.max_samples {
                break 'outer;
            }
            let f = source.next_loss(rng)?;
            stats.samples += 1;
            if !cfg.proxy {
                break (f, None);
            }
            let reward = match proxy_test(&f, &mut snapshot, &probe, &mut store, cfg.delta, &cfg.safe_math)? {
                ProxyOutcome::Pass => break (f, Some(store.len() - 1)),
                ProxyOutcome::ZeroGrad => {
                    stats.zero_grad += 1;
                    cfg.default_negative_reward
                }
                ProxyOutcome::Invalid => {
                    stats.invalid += 1;
                    cfg.default_negative_reward
                }
                ProxyOutcome::DuplicateOf(idx) => {
                    stats.duplicates += 1;
                    store.get(idx).reward.unwrap_or(cfg.default_negative_reward)
                }
            };
            let cycle = source.feedback(reward)?;
            close_cycle(cycle, &mut store, &mut snapshot, &model, &mut stats);
        };

        let mut clone = model.clone();
        stats.clone_trainings += 1;
        let trained = clone.train_epoch(&data.train, &f, &cfg.safe_math, &mut opt, rng, &cfg.train);
        let updated = match trained {
            Ok(_) => metric_on(&clone, &data.validation, cfg.metric).ok().filter(|v| v.is_finite()),
            Err(ModelError::NonFinite { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        let reward = match updated {
            Some(u) => cfg.metric.gain(init, u),
            None => cfg.default_negative_reward,
        };
        if let Some(idx) = slot {
            store.set_reward(idx, reward);
        }
        let promoted = updated.is_some() && reward >= -cfg.eta;
        log.push(IterationLog {
            iteration: stats.iterations,
            samples: stats.samples,
            expr: f.to_string(),
            init_metric: init,
            updated_metric: updated.unwrap_or(f64::NAN),
            reward,
            promoted,
        });
        if promoted {
            model = clone;
            stats.promotions += 1;
            candidates.push(CandidateRecord {
                expr: f.to_string(),
                reward,
                iteration: stats.iterations,
                positive_rate: None,
                best_epsilon: None,
                val_metric: None,
                test_metric: None,
            });
            stalled = 0;
        } else {
            stalled += 1;
        }
        stats.iterations += 1;
        let cycle = source.feedback(reward)?;
        close_cycle(cycle, &mut store, &mut snapshot, &model, &mut stats);
    }
    Ok(PhaseOne {
        candidates,
        stats,
        log,
        model,
    })
}

/// Fraction of random `(ŷ, y)` pairs where a descent step moves `ŷ` toward
/// `y`: strictly positive gradient for `y = 0`, strictly negative for `y = 1`.
pub fn validation_check(f: &LossExpr, n_pairs: usize, safe_math: &SafeMathConfig, rng: &mut Rng) -> f64 {
    if n_pairs == 0 {
        return 0.0;
    }
    let mut good = 0usize;
    for _ in 0..n_pairs {
        let yhat: f64 = rng.gen();
        let y = if rng.gen::<bool>() { 1.0 } else { 0.0 };
        let g = f.grad_yhat(yhat, y, safe_math);
        if (y == 0.0 && g > 0.0) || (y == 1.0 && g < 0.0) {
            good += 1;
        }
    }
    good as f64 / n_pairs as f64
}

pub const VALIDATION_PAIRS: usize = 2000;
pub const VALIDATION_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessConfig {
    pub epsilon_grid: Vec<f64>,
    /// Stop after this many consecutive epochs of declining validation metric.
    pub decline_patience: usize,
    /// Stop once the best epoch is more than this many epochs old.
    pub stale_patience: usize,
    pub max_epochs: usize,
    pub train: TrainConfig,
    pub xi: f64,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for EffectivenessConfig {
    fn default() -> Self {
        Self {
            epsilon_grid: vec![1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            decline_patience: 10,
            stale_patience: 50,
            max_epochs: 1000,
            train: TrainConfig::default(),
            xi: 1e-6,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val: f64,
    pub val_report: EvalReport,
    /// Test measures at the best validation epoch.
    pub test_report: Option<EvalReport>,
    pub model: RecModel,
}

/// Trains a freshly initialised model under `loss` until the early-stopping
/// rules fire, keeping the epoch with the best validation metric.
pub fn train_to_convergence(
    model_cfg: ModelConfig,
    data: &SplitDataset,
    loss: &LossExpr,
    safe_math: &SafeMathConfig,
    metric: Metric,
    cfg: &EffectivenessConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(SearchError::NoData("training split"));
    }
    if data.validation.is_empty() {
        return Err(SearchError::NoData("validation split"));
    }
    let mut model = RecModel::init(model_cfg, seed);
    let mut rng = Rng::seed_from_u64(seed ^ 0x5eed);
    let mut opt = cfg.train.optimizer();
    let val_labels = labels(&data.validation);
    let mut best: Option<(usize, f64, EvalReport, Option<EvalReport>, RecModel)> = None;
    let mut prev = f64::NAN;
    let mut declining = 0;
    let mut epoch = 0;
    while epoch < cfg.max_epochs {
        model.train_epoch(&data.train, loss, safe_math, &mut opt, &mut rng, &cfg.train)?;
        let val_report = EvalReport::compute(&val_labels, &model.scores(&data.validation)?)?;
        let v = val_report.get(metric).ok_or(MetricError::SingleClass)?;
        if !v.is_finite() {
            return Err(ModelError::NonFinite {
                value: v,
                grad: f64::NAN,
                yhat: f64::NAN,
                label: f64::NAN,
            }
            .into());
        }
        if best.as_ref().map_or(true, |b| metric.better(v, b.1)) {
            let test_report = if data.test.is_empty() {
                None
            } else {
                Some(model.evaluate(&data.test)?)
            };
            best = Some((epoch, v, val_report, test_report, model.clone()));
        }
        declining = if prev.is_finite() && metric.better(prev, v) { declining + 1 } else { 0 };
        prev = v;
        epoch += 1;
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if declining >= cfg.decline_patience || epoch - 1 - best_epoch > cfg.stale_patience {
            break;
        }
    }
    let (best_epoch, best_val, val_report, test_report, model) = best.expect("max_epochs must be positive");
    Ok(TrainOutcome {
        best_epoch,
        epochs_run: epoch,
        best_val,
        val_report,
        test_report,
        model,
    })
}

/// Smoothing values a loss is tried at: the full grid when it has
/// smoothing sites, otherwise only the finest grid point.
pub fn epsilon_points(loss: &LossExpr, grid: &[f64]) -> Vec<f64> {
    if loss.smoothing_sites() == 0 {
        grid.last().copied().into_iter().collect()
    } else {
        grid.to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct GridPoint {
    pub epsilon: f64,
    pub outcome: std::result::Result<TrainOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct CandidateResult {
    pub expr: LossExpr,
    pub points: Vec<GridPoint>,
}

impl CandidateResult {
    /// Grid point with the best validation metric.
    pub fn best(&self, metric: Metric) -> Option<(f64, &TrainOutcome)> {
        let mut best: Option<(f64, &TrainOutcome)> = None;
        for p in &self.points {
            if let Ok(o) = &p.outcome {
                if best.map_or(true, |(_, b)| metric.better(o.best_val, b.best_val)) {
                    best = Some((p.epsilon, o));
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct Effectiveness {
    pub results: Vec<CandidateResult>,
    /// Index into `results` of the selected loss.
    pub winner: Option<usize>,
}

/// Trains every candidate at every grid point (in parallel across `jobs`
/// threads) and selects the candidate with the best validation metric.
pub fn effectiveness_test(
    candidates: &[LossExpr],
    data: &SplitDataset,
    model_cfg: ModelConfig,
    metric: Metric,
    cfg: &EffectivenessConfig,
) -> Result<Effectiveness> {
    let work: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .flat_map(|(c, f)| epsilon_points(f, &cfg.epsilon_grid).into_iter().map(move |e| (c, e)))
        .collect();
    let slots: Vec<Mutex<Option<GridPoint>>> = work.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let run = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(c, eps)) = work.get(k) else { break };
        let safe = SafeMathConfig {
            xi: cfg.xi.min(eps),
            epsilon: eps,
        };
        let outcome = train_to_convergence(model_cfg, data, &candidates[c], &safe, metric, cfg, cfg.seed)
            .map_err(|e| e.to_string());
        *slots[k].lock().expect("poisoned") = Some(GridPoint { epsilon: eps, outcome });
    };
    std::thread::scope(|s| {
        for _ in 1..cfg.jobs.max(1).min(work.len().max(1)) {
            s.spawn(run);
        }
        run();
    });
    let mut results: Vec<CandidateResult> = candidates
        .iter()
        .map(|f| CandidateResult {
            expr: f.clone(),
            points: Vec::new(),
        })
        .collect();
    for ((c, _), slot) in work.iter().zip(slots) {
        let point = slot.into_inner().expect("poisoned").expect("every work item runs");
        results[*c].points.push(point);
    }
    let mut winner: Option<(usize, f64)> = None;
    for (k, r) in results.iter().enumerate() {
        if let Some((_, o)) = r.best(metric) {
            if winner.map_or(true, |(_, v)| metric.better(o.best_val, v)) {
                winner = Some((k, o.best_val));
            }
        }
    }
    Ok(Effectiveness {
        results,
        winner: winner.map(|w| w.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub search: SearchConfig,
    pub effectiveness: EffectivenessConfig,
    pub validation_pairs: usize,
    pub validation_threshold: f64,
    /// Metric for the effectiveness test; the search reward may differ.
    pub selection_metric: Metric,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            effectiveness: EffectivenessConfig::default(),
            validation_pairs: VALIDATION_PAIRS,
            validation_threshold: VALIDATION_THRESHOLD,
            selection_metric: Metric::Auc,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub phase_one: PhaseOne,
    /// Distinct promoted losses with their positive rates.
    pub checked: Vec<(LossExpr, f64)>,
    pub survivors: Vec<LossExpr>,
    pub effectiveness: Effectiveness,
    /// Every promoted loss, with later-phase fields filled where reached.
    pub ledger: Vec<CandidateRecord>,
    pub selected: Option<LossExpr>,
}

/// Runs search, validation check and effectiveness test back to back.
pub fn run_pipeline<S: LossSource + ?Sized>(
    cfg: &PipelineConfig,
    data: &SplitDataset,
    model_cfg: ModelConfig,
    source: &mut S,
) -> Result<PipelineOutcome> {
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let model = RecModel::init(model_cfg, cfg.seed);
    let phase_one = search_phase(&cfg.search, data, model, source, &mut rng)?;

    let promoted = phase_one
        .candidates
        .iter()
        .map(|c| LossExpr::parse(&c.expr).map_err(|e| SearchError::Config(format!("ledger expression: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut check_rng = Rng::seed_from_u64(cfg.seed ^ 0xc4ec);
    let checked: Vec<(LossExpr, f64)> = dedupe(promoted)
        .into_iter()
        .map(|f| {
            let rate = validation_check(&f, cfg.validation_pairs, &cfg.search.safe_math, &mut check_rng);
            (f, rate)
        })
        .collect();
    let survivors: Vec<LossExpr> = checked
        .iter()
        .filter(|(_, r)| *r >= cfg.validation_threshold)
        .map(|(f, _)| f.clone())
        .collect();
    let effectiveness = effectiveness_test(&survivors, data, model_cfg, cfg.selection_metric, &cfg.effectiveness)?;

    let key = |text: &str| LossExpr::parse(text).map(|f| f.canonical().to_string()).unwrap_or_default();
    let mut ledger = phase_one.candidates.clone();
    for rec in &mut ledger {
        let k = key(&rec.expr);
        if let Some((_, rate)) = checked.iter().find(|(f, _)| f.canonical().to_string() == k) {
            rec.positive_rate = Some(*rate);
        }
        if let Some(res) = effectiveness.results.iter().find(|r| r.expr.canonical().to_string() == k) {
            if let Some((eps, o)) = res.best(cfg.selection_metric) {
                rec.best_epsilon = Some(eps);
                rec.val_metric = Some(o.best_val);
                rec.test_metric = o.test_report.and_then(|t| t.get(cfg.selection_metric));
            }
        }
    }
    let selected = effectiveness.winner.map(|w| effectiveness.results[w].expr.clone());
    Ok(PipelineOutcome {
        phase_one,
        checked,
        survivors,
        effectiveness,
        ledger,
        selected,
    })
}

/// Distinct candidates by canonical form, in first-seen order.
pub fn dedupe(exprs: impl IntoIterator<Item = LossExpr>) -> Vec<LossExpr> {
    let mut seen = HashSet::new();
    exprs
        .into_iter()
        .filter(|f| seen.insert(f.canonical().to_string()))
        .collect()
}

pub fn write_ledger(path: impl AsRef<Path>, records: &[CandidateRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ledger(path: impl AsRef<Path>) -> Result<Vec<CandidateRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| SearchError::Ledger { line: k + 1, source })?);
    }
    Ok(out)
}
