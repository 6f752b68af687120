use serde_json::Value;

fn data(s: String) -> Value {
    let v: Value = serde_json::from_str(&s).unwrap();
    assert_eq!(v["ok"], true, "{v}");
    v["data"].clone()
}

#[test]
fn mse_curves_cross_zero_at_the_label() {
    let d = data(lossforge_wasm::loss_curves("mse", 1e-6, 101));
    let grad0 = d["y0"]["grad"].as_array().unwrap();
    let grad1 = d["y1"]["grad"].as_array().unwrap();
    assert_eq!(grad0.len(), 101);
    assert!(grad0.iter().all(|g| g.as_f64().unwrap() > 0.0));
    assert!(grad1.iter().all(|g| g.as_f64().unwrap() < 0.0));
}

#[test]
fn validation_check_flags_negated_mse() {
    let good = data(lossforge_wasm::validation_check_js("maxr", 1e-6, 2000, 1));
    assert_eq!(good["pass"], true);
    let bad = data(lossforge_wasm::validation_check_js("(neg (sq (add yhat (neg y))))", 1e-6, 2000, 1));
    assert_eq!(bad["pass"], false);
    assert_eq!(bad["rate"].as_f64(), Some(0.0));
}

#[test]
fn samples_are_reproducible_and_parse() {
    let a = lossforge_wasm::sample_losses(4, 8, 10);
    assert_eq!(a, lossforge_wasm::sample_losses(4, 8, 10));
    for s in data(a).as_array().unwrap() {
        lossforge::expr::LossExpr::parse(s["expr"].as_str().unwrap()).unwrap();
    }
}

#[test]
fn errors_come_back_as_json() {
    let v: Value = serde_json::from_str(&lossforge_wasm::loss_curves("(add yhat", 0.1, 10)).unwrap();
    assert_eq!(v["ok"], false);
    let v: Value = serde_json::from_str(&lossforge_wasm::loss_curves("mse", 0.0, 10)).unwrap();
    assert!(v["error"].as_str().unwrap().contains("epsilon"));
    let v: Value = serde_json::from_str(&lossforge_wasm::sample_losses(1, 3, 0)).unwrap();
    assert_eq!(v["ok"], false);
}
