//! Browser bindings for the loss playground page in `www/`.
//!
//! Every export takes plain values and returns a JSON string, so the page
//! needs no generated TypeScript types.

use lossforge::controller::{Controller, ControllerConfig};
use lossforge::expr::{LossExpr, SafeMathConfig};
use lossforge::search::{validation_check, VALIDATION_THRESHOLD};
use lossforge::zoo;
use rand::SeedableRng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn parse(spec: &str) -> Result<LossExpr, String> {
    zoo::resolve(spec)
}

fn safe_math(epsilon: f64) -> Result<SafeMathConfig, String> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(format!("epsilon must lie in (0, 1], got {epsilon}"));
    }
    Ok(SafeMathConfig::default().with_epsilon(epsilon))
}

/// Loss value and `d/dŷ` on a grid of `points` predictions in (0, 1), for
/// both labels.
pub fn curves(spec: &str, epsilon: f64, points: usize) -> Result<Value, String> {
    let f = parse(spec)?;
    let safe = safe_math(epsilon)?;
    let n = points.clamp(2, 2000);
    let yhat: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
    let series = |y: f64| {
        let (value, grad): (Vec<f64>, Vec<f64>) = yhat.iter().map(|&p| f.eval_with_grad(p, y, &safe)).unzip();
        json!({ "value": value, "grad": grad })
    };
    Ok(json!({
        "expr": f.canonical().to_string(),
        "nodes": f.len(),
        "yhat": yhat,
        "y0": series(0.0),
        "y1": series(1.0),
    }))
}

/// Positive rate of a loss over `pairs` random `(ŷ, y)` pairs.
pub fn positive_rate(spec: &str, epsilon: f64, pairs: usize, seed: u64) -> Result<Value, String> {
    let f = parse(spec)?;
    let safe = safe_math(epsilon)?;
    let pairs = pairs.clamp(1, 100_000);
    let rate = validation_check(&f, pairs, &safe, &mut lossforge::Rng::seed_from_u64(seed));
    Ok(json!({
        "expr": f.canonical().to_string(),
        "pairs": pairs,
        "rate": rate,
        "pass": rate >= VALIDATION_THRESHOLD,
    }))
}

/// Draws `count` expressions from a freshly initialised controller.
pub fn samples(seed: u64, count: usize, rounds: usize) -> Result<Value, String> {
    let cfg = ControllerConfig {
        rounds,
        ..ControllerConfig::default()
    };
    let controller = Controller::new(cfg, seed).map_err(|e| e.to_string())?;
    let mut rng = lossforge::Rng::seed_from_u64(seed);
    let mut check_rng = lossforge::Rng::seed_from_u64(seed ^ 0xc4ec);
    let safe = SafeMathConfig::default();
    let mut out = Vec::new();
    for _ in 0..count.clamp(1, 200) {
        let ep = controller.sample(&mut rng).map_err(|e| e.to_string())?;
        let rate = validation_check(&ep.expr, 500, &safe, &mut check_rng);
        out.push(json!({
            "expr": ep.expr.to_string(),
            "canonical": ep.expr.canonical().to_string(),
            "log_prob": ep.log_prob,
            "uses_yhat": ep.expr.depends_on_yhat(),
            "rate": rate,
        }));
    }
    Ok(Value::Array(out))
}

fn respond(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => json!({ "ok": true, "data": v }).to_string(),
        Err(e) => json!({ "ok": false, "error": e }).to_string(),
    }
}

#[wasm_bindgen]
pub fn loss_curves(spec: &str, epsilon: f64, points: usize) -> String {
    respond(curves(spec, epsilon, points))
}

#[wasm_bindgen(js_name = validationCheck)]
pub fn validation_check_js(spec: &str, epsilon: f64, pairs: usize, seed: u32) -> String {
    respond(positive_rate(spec, epsilon, pairs, seed as u64))
}

#[wasm_bindgen]
pub fn sample_losses(seed: u32, count: usize, rounds: usize) -> String {
    respond(samples(seed as u64, count, rounds))
}

#[wasm_bindgen]
pub fn zoo_names() -> String {
    json!(zoo::NAMES
        .iter()
        .map(|n| json!({ "name": n, "expr": zoo::text(n) }))
        .collect::<Vec<_>>())
    .to_string()
}
