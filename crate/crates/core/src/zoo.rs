//! Named losses written with the primitive operators.
//!
//! Generated losses are stored in their raw form: every `+ epsilon` of the
//! published formula lives inside a Log or Reciprocal site, so the smoothing
//! coefficient is whatever [`SafeMathConfig::epsilon`](crate::expr::SafeMathConfig)
//! says at evaluation time.

use crate::expr::LossExpr;

/// `(ŷ - y)^2`
pub const MSE: &str = "(sq (add yhat (neg y)))";

/// `-[y log ŷ + (1 - y) log(1 - ŷ)]`
pub const BCE: &str =
    "(neg (add (mul y (log yhat)) (mul (add one (neg y)) (log (add one (neg yhat))))))";

/// `max(0, 1 - (2y - 1)(2ŷ - 1))`, with `0` written as `1 + (-1)`.
pub const HINGE: &str = "(max (add one (neg one)) (add one (neg (mul \
     (add y (neg (add one (neg y)))) \
     (add yhat (neg (add one (neg yhat))))))))";

/// `-(1 - p_t)^2 log p_t` with `p_t = y ŷ + (1 - y)(1 - ŷ)`.
pub const FOCAL: &str = "(neg (mul \
     (sq (add one (neg (add (mul y yhat) (mul (add one (neg y)) (add one (neg yhat))))))) \
     (log (add (mul y yhat) (mul (add one (neg y)) (add one (neg yhat)))))))";

/// `max(ŷ / y, y / ŷ)`
pub const MAXR: &str = "(max (mul yhat (rec y)) (mul y (rec yhat)))";

/// `(ŷ + y) / (ŷ y)`
pub const SUMR: &str = "(mul (add yhat y) (rec (mul yhat y)))";

/// `log(1 / min(ŷ, y)) * (ŷ + y + min(ŷ, y))`
pub const LOGMIN: &str = "(mul (log (rec (min yhat y))) (add (add yhat y) (min yhat y)))";

pub const NAMES: [&str; 7] = ["mse", "bce", "hinge", "focal", "maxr", "sumr", "logmin"];

/// Text form of a named loss.
pub fn text(name: &str) -> Option<&'static str> {
    Some(match name.to_ascii_lowercase().as_str() {
        "mse" => MSE,
        "bce" => BCE,
        "hinge" => HINGE,
        "focal" => FOCAL,
        "maxr" => MAXR,
        "sumr" => SUMR,
        "logmin" => LOGMIN,
        _ => return None,
    })
}

/// Parsed named loss, or `None` for an unknown name.
pub fn get(name: &str) -> Option<LossExpr> {
    text(name).map(|t| LossExpr::parse(t).expect("zoo entries are well-formed"))
}

/// Resolves either a zoo name or a text expression.
pub fn resolve(spec: &str) -> Result<LossExpr, String> {
    let trimmed = spec.trim();
    if trimmed.starts_with('(') {
        return LossExpr::parse(trimmed).map_err(|e| e.to_string());
    }
    get(trimmed).ok_or_else(|| {
        format!(
            "unknown loss `{trimmed}`; valid names: {}",
            NAMES.join(", ")
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::SafeMathConfig;

    #[test]
    fn every_entry_parses() {
        for name in NAMES {
            let e = get(name).unwrap();
            assert!(e.depends_on_yhat(), "{name}");
        }
        assert!(get("nope").is_none());
        let err = resolve("nope").unwrap_err();
        assert!(err.contains("maxr") && err.contains("hinge"));
    }

    #[test]
    fn baselines_match_closed_forms() {
        let cfg = SafeMathConfig::default();
        let xi = cfg.xi;
        let bce = get("bce").unwrap();
        let hinge = get("hinge").unwrap();
        let focal = get("focal").unwrap();
        for &p in &[0.1, 0.35, 0.8] {
            for &y in &[0.0, 1.0] {
                let want = -(y * (p + xi).ln() + (1.0 - y) * (1.0 - p + xi).ln());
                assert!((bce.eval(p, y, &cfg) - want).abs() < 1e-4, "bce {p} {y}");
                let want = (1.0 - (2.0 * y - 1.0) * (2.0 * p - 1.0)).max(0.0);
                assert!((hinge.eval(p, y, &cfg) - want).abs() < 1e-4, "hinge {p} {y}");
                let pt = y * p + (1.0 - y) * (1.0 - p);
                let want = -(1.0 - pt).powi(2) * (pt + xi).ln();
                assert!((focal.eval(p, y, &cfg) - want).abs() < 1e-4, "focal {p} {y}");
            }
        }
    }

    #[test]
    fn generated_losses_track_published_formulas() {
        // Raw forms differ from the published ones by the placement of the
        // smoothing constant only; at eps = 1e-6 values agree closely away from 0.
        let cfg = SafeMathConfig::default();
        let e = cfg.epsilon;
        let maxr = get("maxr").unwrap();
        let sumr = get("sumr").unwrap();
        let logmin = get("logmin").unwrap();
        for &p in &[0.2, 0.5, 0.9] {
            let y = 1.0;
            let want = ((p + e) / (y + e)).max((y + e) / (p + e));
            assert!((maxr.eval(p, y, &cfg) - want).abs() < 1e-4);
            let want = (p + y + e) / (p * y + e);
            assert!((sumr.eval(p, y, &cfg) - want).abs() < 1e-4);
            let m = f64::min(p, y);
            let want = ((1.0 + e) / (m + e)).ln() * (p + y + m);
            assert!((logmin.eval(p, y, &cfg) - want).abs() < 1e-4);
        }
    }
}
