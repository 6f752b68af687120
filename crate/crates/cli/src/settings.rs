//! Run settings: defaults, then a flat `key=value` file, then flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lossforge::data::Format;
use lossforge::metrics::Metric;
use lossforge::models::ModelKind;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Regression,
}

impl Task {
    pub fn metric(self) -> Metric {
        match self {
            Task::Classification => Metric::Auc,
            Task::Regression => Metric::Rmse,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classification" | "cls" => Ok(Task::Classification),
            "regression" | "reg" => Ok(Task::Regression),
            other => Err(format!("unknown task `{other}` (expected classification or regression)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub model: ModelKind,
    pub dataset: Option<String>,
    pub format: Format,
    pub task: Task,
    pub loss: Option<String>,
    pub epsilon: Option<f64>,
    pub eta: f64,
    pub delta: f64,
    pub rounds: usize,
    pub seed: u64,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub max_iters: usize,
    pub stall: usize,
    pub max_samples: Option<usize>,
    /// Search reward metric; defaults to the task metric.
    pub reward_metric: Option<Metric>,
    pub negative_reward: f64,
    /// Smoothing coefficient used while searching.
    pub search_epsilon: f64,
    pub probe_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub controller_lr: f64,
    pub pairs: usize,
    pub threshold: f64,
    pub max_epochs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: ModelKind::Mf,
            dataset: None,
            format: Format::Ml100k,
            task: Task::Classification,
            loss: None,
            epsilon: None,
            eta: 0.01,
            delta: 1e-4,
            rounds: 10,
            seed: 0,
            jobs: 1,
            out: None,
            max_iters: 10_000,
            stall: 500,
            max_samples: None,
            reward_metric: None,
            negative_reward: -0.05,
            search_epsilon: 1e-6,
            probe_size: 5,
            lr: 0.01,
            l2: 1e-5,
            batch_size: 128,
            controller_lr: 1e-3,
            pairs: 2000,
            threshold: 0.9,
            max_epochs: 1000,
        }
    }
}

pub const KEYS: [&str; 26] = [
    "model",
    "dataset",
    "format",
    "task",
    "loss",
    "epsilon",
    "eta",
    "delta",
    "rounds",
    "seed",
    "jobs",
    "out",
    "max_iters",
    "stall",
    "max_samples",
    "reward_metric",
    "negative_reward",
    "search_epsilon",
    "probe_size",
    "lr",
    "l2",
    "batch_size",
    "controller_lr",
    "pairs",
    "threshold",
    "max_epochs",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| CliError::Usage(format!("{key}: {e}")))
}

fn parse_metric(key: &str, value: &str) -> Result<Metric, CliError> {
    match value {
        "auc" => Ok(Metric::Auc),
        "rmse" => Ok(Metric::Rmse),
        other => Err(CliError::Usage(format!("{key}: unknown metric `{other}` (expected auc or rmse)"))),
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "model" => self.model = parse(key, v)?,
            "dataset" => self.dataset = Some(v.to_string()),
            "format" => self.format = parse(key, v)?,
            "task" => self.task = parse(key, v)?,
            "loss" => self.loss = Some(v.to_string()),
            "epsilon" => self.epsilon = Some(parse(key, v)?),
            "eta" => self.eta = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "max_iters" => self.max_iters = parse(key, v)?,
            "stall" => self.stall = parse(key, v)?,
            "max_samples" => self.max_samples = Some(parse(key, v)?),
            "reward_metric" => self.reward_metric = Some(parse_metric(key, v)?),
            "negative_reward" => self.negative_reward = parse(key, v)?,
            "search_epsilon" => self.search_epsilon = parse(key, v)?,
            "probe_size" => self.probe_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "l2" => self.l2 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "controller_lr" => self.controller_lr = parse(key, v)?,
            "pairs" => self.pairs = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown config key `{other}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a flat config file: `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("--config {} line {}: expected key=value", path.display(), k + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn reward_metric(&self) -> Metric {
        self.reward_metric.unwrap_or(self.task.metric())
    }

    /// Output directory: flag or config, then `LOSSFORGE_OUT`, then `runs`.
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("LOSSFORGE_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Config echo that reproduces the run when passed back via `--config`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("model", self.model.name().into());
        if let Some(d) = &self.dataset {
            kv("dataset", d.clone());
        }
        kv(
            "format",
            match self.format {
                Format::Ml100k => "ml100k",
                Format::Csv => "csv",
            }
            .into(),
        );
        kv("task", self.task.name().into());
        if let Some(l) = &self.loss {
            kv("loss", l.clone());
        }
        if let Some(e) = self.epsilon {
            kv("epsilon", e.to_string());
        }
        kv("eta", self.eta.to_string());
        kv("delta", self.delta.to_string());
        kv("rounds", self.rounds.to_string());
        kv("seed", self.seed.to_string());
        kv("jobs", self.jobs.to_string());
        kv("out", self.out_dir().display().to_string());
        kv("max_iters", self.max_iters.to_string());
        kv("stall", self.stall.to_string());
        if let Some(m) = self.max_samples {
            kv("max_samples", m.to_string());
        }
        kv("reward_metric", self.reward_metric().name().into());
        kv("negative_reward", self.negative_reward.to_string());
        kv("search_epsilon", self.search_epsilon.to_string());
        kv("probe_size", self.probe_size.to_string());
        kv("lr", self.lr.to_string());
        kv("l2", self.l2.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("controller_lr", self.controller_lr.to_string());
        kv("pairs", self.pairs.to_string());
        kv("threshold", self.threshold.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        s
    }
}
