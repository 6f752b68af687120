use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use lossforge::checkpoint::Blob;
use lossforge::controller::{Controller, ControllerConfig};
use lossforge::data::{load_split, synth_dataset, SplitDataset};
use lossforge::expr::{LossExpr, SafeMathConfig};
use lossforge::metrics::EvalReport;
use lossforge::models::{ModelConfig, TrainConfig};
use lossforge::search::{
    effectiveness_test, run_pipeline, validation_check, write_ledger, EffectivenessConfig, PipelineConfig,
    SearchConfig,
};
use lossforge::zoo;
use rand::SeedableRng;

use crate::settings::Settings;
use crate::CliError;

const DEFAULT_ML100K: &str = "data/ml-100k/u.data";

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

/// Resolves `--dataset`: a path, `ml100k`, or `synth[:users,items,rank,noise]`.
pub fn load_dataset(s: &Settings) -> Result<SplitDataset, CliError> {
    let spec = s
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::Usage("--dataset is required".into()))?;
    if let Some(rest) = spec.strip_prefix("synth") {
        let dims = rest.strip_prefix(':').unwrap_or("200,100,2,0.05");
        let parts: Vec<&str> = dims.split(',').map(str::trim).collect();
        let bad = || CliError::Usage(format!("--dataset `{spec}`: expected synth:users,items,rank,noise"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let users = parts[0].parse().map_err(|_| bad())?;
        let items = parts[1].parse().map_err(|_| bad())?;
        let rank = parts[2].parse().map_err(|_| bad())?;
        let noise = parts[3].parse().map_err(|_| bad())?;
        return synth_dataset(users, items, rank, noise, s.seed).map_err(|e| CliError::Usage(format!("--dataset: {e}")));
    }
    let mut path = PathBuf::from(spec);
    if spec == "ml100k" && !path.exists() {
        path = PathBuf::from(DEFAULT_ML100K);
    }
    if !path.exists() {
        return Err(CliError::Usage(format!("--dataset: no such file `{}`", path.display())));
    }
    load_split(&path, s.format).map_err(|e| CliError::Usage(format!("--dataset {}: {e}", path.display())))
}

fn train_config(s: &Settings) -> TrainConfig {
    TrainConfig {
        batch_size: s.batch_size,
        lr: s.lr,
        l2: s.l2,
        ..TrainConfig::default()
    }
}

fn effectiveness_config(s: &Settings) -> EffectivenessConfig {
    let mut cfg = EffectivenessConfig {
        train: train_config(s),
        max_epochs: s.max_epochs,
        seed: s.seed,
        jobs: s.jobs.max(1),
        ..EffectivenessConfig::default()
    };
    if let Some(e) = s.epsilon {
        cfg.epsilon_grid = vec![e];
    }
    cfg
}

fn prepare_out(s: &Settings) -> Result<PathBuf, CliError> {
    let dir = s.out_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("--out {}: {e}", dir.display())))?;
    fs::write(dir.join("config.txt"), s.echo()).map_err(run_err)?;
    Ok(dir)
}

fn save_blob(path: &Path, blob: &Blob) -> Result<(), CliError> {
    fs::write(path, blob.to_bytes()).map_err(run_err)
}

fn report_lines(out: &mut String, prefix: &str, r: &EvalReport) {
    if let Some(auc) = r.auc {
        let _ = writeln!(out, "{prefix}_auc={auc:.6}");
    }
    let _ = writeln!(out, "{prefix}_f1={:.6}", r.f1);
    let _ = writeln!(out, "{prefix}_accuracy={:.6}", r.accuracy);
    let _ = writeln!(out, "{prefix}_rmse={:.6}", r.rmse);
    let _ = writeln!(out, "{prefix}_mae={:.6}", r.mae);
}

pub fn search(s: &Settings) -> Result<(), CliError> {
    let data = load_dataset(s)?;
    let model_cfg = ModelConfig::new(s.model, data.n_users, data.n_items);
    let cfg = PipelineConfig {
        search: SearchConfig {
            delta: s.delta,
            eta: s.eta,
            probe_size: s.probe_size,
            metric: s.reward_metric(),
            default_negative_reward: s.negative_reward,
            stall_budget: s.stall,
            max_iters: s.max_iters,
            max_samples: s.max_samples.unwrap_or(usize::MAX),
            proxy: true,
            safe_math: SafeMathConfig::default().with_epsilon(s.search_epsilon),
            train: train_config(s),
        },
        effectiveness: effectiveness_config(s),
        validation_pairs: s.pairs,
        validation_threshold: s.threshold,
        selection_metric: s.task.metric(),
        seed: s.seed,
    };
    cfg.search.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ctrl_cfg = ControllerConfig {
        rounds: s.rounds,
        lr: s.controller_lr,
        ..ControllerConfig::default()
    };
    let mut controller = Controller::new(ctrl_cfg, s.seed).map_err(|e| CliError::Usage(format!("--rounds: {e}")))?;
    let dir = prepare_out(s)?;

    let outcome = run_pipeline(&cfg, &data, model_cfg, &mut controller).map_err(run_err)?;

    write_ledger(dir.join("ledger.jsonl"), &outcome.ledger).map_err(run_err)?;
    let mut log = fs::File::create(dir.join("run_log.jsonl")).map_err(run_err)?;
    for entry in &outcome.phase_one.log {
        serde_json::to_writer(&mut log, entry).map_err(run_err)?;
        log.write_all(b"\n").map_err(run_err)?;
    }
    save_blob(&dir.join("controller.ckpt"), &controller.to_blob())?;
    save_blob(&dir.join("search_model.ckpt"), &outcome.phase_one.model.to_blob())?;

    let stats = &outcome.phase_one.stats;
    let mut out = String::new();
    let _ = writeln!(out, "samples={}", stats.samples);
    let _ = writeln!(out, "iterations={}", stats.iterations);
    let _ = writeln!(out, "zero_grad={}", stats.zero_grad);
    let _ = writeln!(out, "duplicates={}", stats.duplicates);
    let _ = writeln!(out, "clone_trainings={}", stats.clone_trainings);
    let _ = writeln!(out, "promotions={}", stats.promotions);
    let _ = writeln!(out, "candidates={}", outcome.checked.len());
    let _ = writeln!(out, "survivors={}", outcome.survivors.len());
    let _ = writeln!(out, "out={}", dir.display());

    let Some(w) = outcome.effectiveness.winner else {
        let _ = writeln!(out, "status=no_candidate");
        print!("{out}");
        return Err(CliError::NoCandidate);
    };
    let result = &outcome.effectiveness.results[w];
    let (eps, best) = result.best(cfg.selection_metric).expect("winner has a finished grid point");
    fs::write(dir.join("selected_loss.txt"), format!("{}\n", result.expr)).map_err(run_err)?;
    save_blob(&dir.join("model.ckpt"), &best.model.to_blob())?;
    let _ = writeln!(out, "selected={}", result.expr);
    let _ = writeln!(out, "epsilon={eps}");
    let _ = writeln!(out, "best_epoch={}", best.best_epoch);
    report_lines(&mut out, "val", &best.val_report);
    if let Some(t) = &best.test_report {
        report_lines(&mut out, "test", t);
    }
    let _ = writeln!(out, "status=ok");
    print!("{out}");
    Ok(())
}

pub fn train(s: &Settings) -> Result<(), CliError> {
    let spec = s
        .loss
        .as_deref()
        .ok_or_else(|| CliError::Usage("--loss is required".into()))?;
    let loss = zoo::resolve(spec).map_err(|e| CliError::Usage(format!("--loss: {e}")))?;
    let data = load_dataset(s)?;
    let model_cfg = ModelConfig::new(s.model, data.n_users, data.n_items);
    let cfg = effectiveness_config(s);
    let dir = prepare_out(s)?;
    let metric = s.task.metric();
    let eff = effectiveness_test(std::slice::from_ref(&loss), &data, model_cfg, metric, &cfg).map_err(run_err)?;
    let result = &eff.results[0];
    let Some((eps, best)) = result.best(metric) else {
        let why = result
            .points
            .iter()
            .find_map(|p| p.outcome.as_ref().err().cloned())
            .unwrap_or_default();
        return Err(CliError::Run(format!("training diverged at every epsilon: {why}")));
    };
    save_blob(&dir.join("model.ckpt"), &best.model.to_blob())?;
    let mut out = String::new();
    let _ = writeln!(out, "loss={loss}");
    let _ = writeln!(out, "epsilon={eps}");
    let _ = writeln!(out, "best_epoch={}", best.best_epoch);
    let _ = writeln!(out, "epochs_run={}", best.epochs_run);
    report_lines(&mut out, "val", &best.val_report);
    if let Some(t) = &best.test_report {
        report_lines(&mut out, "test", t);
    }
    let _ = writeln!(out, "out={}", dir.display());
    print!("{out}");
    Ok(())
}

pub fn check(s: &Settings, file: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(file).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
    let mut losses: Vec<LossExpr> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f = zoo::resolve(line).map_err(|e| CliError::Usage(format!("{} line {}: {e}", file.display(), k + 1)))?;
        losses.push(f);
    }
    let safe = SafeMathConfig::default().with_epsilon(s.epsilon.unwrap_or(1e-6));
    let mut rng = lossforge::Rng::seed_from_u64(s.seed);
    let mut out = String::new();
    let mut passed = 0;
    for f in &losses {
        let rate = validation_check(f, s.pairs, &safe, &mut rng);
        let ok = rate >= s.threshold;
        passed += ok as usize;
        let _ = writeln!(out, "loss={f} rate={rate:.4} pass={ok}");
    }
    let _ = writeln!(out, "checked={} passed={passed}", losses.len());
    print!("{out}");
    Ok(())
}
