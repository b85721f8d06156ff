//! `summary.json` assembly.
//!
//! Every numeric field `x` gets an `x_err` sibling. Explicit errors are
//! collected from the report structs (`err` sub-objects, `*_ci95`
//! half-widths, `abs_error`); everything else is exact and gets `0`.
//! Non-finite numbers are written as `null` with an `x_nonfinite` flag.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::CliError;

pub const SCHEMA: u64 = 1;

const EXEMPT: &[&str] = &["schema"];

/// Serializes a report struct. Non-finite fields become null; callers flag
/// the ones that can legitimately be infinite.
pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

pub fn number(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

pub fn finite_or_flag(map: &mut Map<String, Value>, key: &str, x: f64) {
    map.insert(key.into(), number(x));
    if !x.is_finite() {
        map.insert(format!("{key}_nonfinite"), Value::String(format!("{x}")));
    }
}

fn is_numeric(v: &Value) -> bool {
    match v {
        Value::Number(_) => true,
        Value::Array(a) => !a.is_empty() && a.iter().all(|x| x.is_number()),
        _ => false,
    }
}

fn zeros_like(v: &Value) -> Value {
    match v {
        Value::Array(a) => Value::Array(vec![json!(0); a.len()]),
        _ => json!(0),
    }
}

/// Applies the sibling rule recursively.
pub fn attach_errors(v: &mut Value) {
    match v {
        Value::Array(items) => items.iter_mut().for_each(attach_errors),
        Value::Object(map) => {
            if matches!(map.get("err"), Some(Value::Object(_))) {
                let Some(Value::Object(errs)) = map.remove("err") else { unreachable!() };
                for (k, e) in errs {
                    map.insert(format!("{k}_err"), e);
                }
            }
            if let Some(e) = map.remove("abs_error") {
                map.insert("value_err".into(), e);
            }
            let ci: Vec<(String, Value)> = map
                .iter()
                .filter_map(|(k, e)| k.strip_suffix("_ci95").map(|base| (format!("{base}_err"), e.clone())))
                .collect();
            for (k, e) in ci {
                map.entry(k).or_insert(e);
            }
            let missing: Vec<(String, Value)> = map
                .iter()
                .filter(|(k, v)| is_numeric(v) && !k.ends_with("_err") && !EXEMPT.contains(&k.as_str()))
                .filter(|(k, _)| !map.contains_key(&format!("{k}_err")))
                .map(|(k, v)| (format!("{k}_err"), zeros_like(v)))
                .collect();
            map.extend(missing);
            for (k, child) in map.iter_mut() {
                if !k.ends_with("_err") {
                    attach_errors(child);
                }
            }
        }
        _ => {}
    }
}

/// Missing numeric siblings, for self-checks.
#[cfg(test)]
pub fn missing_errors(v: &Value, path: &str, out: &mut Vec<String>) {
    match v {
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                missing_errors(x, &format!("{path}[{i}]"), out);
            }
        }
        Value::Object(map) => {
            for (k, x) in map {
                if k.ends_with("_err") || EXEMPT.contains(&k.as_str()) {
                    continue;
                }
                if is_numeric(x) && !map.contains_key(&format!("{k}_err")) {
                    out.push(format!("{path}.{k}"));
                }
                missing_errors(x, &format!("{path}.{k}"), out);
            }
        }
        _ => {}
    }
}

pub fn write(dir: &Path, mut summary: Value) -> Result<(), CliError> {
    attach_errors(&mut summary);
    let text = serde_json::to_string_pretty(&summary).expect("json value serializes");
    let path = dir.join("summary.json");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn siblings() {
        let mut v = json!({
            "schema": 1,
            "u0": 0.5,
            "err": {"u0": 1e-12},
            "fit": {"slope": -0.5, "slope_ci95": 0.01, "points": 16},
            "series": {"value": 2.0, "abs_error": 1e-15},
            "s": [0.1, 0.2],
            "rows": [{"k": 3, "ok": true}],
            "label": "x",
            "gap": null
        });
        attach_errors(&mut v);
        assert_eq!(v["u0_err"], json!(1e-12));
        assert!(v.get("err").is_none());
        assert!(v.get("schema_err").is_none());
        assert_eq!(v["fit"]["slope_err"], json!(0.01));
        assert_eq!(v["fit"]["points_err"], json!(0));
        assert_eq!(v["series"]["value_err"], json!(1e-15));
        assert_eq!(v["s_err"], json!([0, 0]));
        assert_eq!(v["rows"][0]["k_err"], json!(0));
        let mut missing = Vec::new();
        missing_errors(&v, "$", &mut missing);
        assert!(missing.is_empty(), "{missing:?}");
    }

    #[test]
    fn nonfinite_flag() {
        let mut m = Map::new();
        finite_or_flag(&mut m, "sigma2", f64::INFINITY);
        assert_eq!(m["sigma2"], Value::Null);
        assert_eq!(m["sigma2_nonfinite"], json!("inf"));
    }
}
