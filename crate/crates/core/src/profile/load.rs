use serde_json::Value;

use super::validate::{validate_profile, Issue};
use super::Profile;

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation failed: {}", join(.0))]
    Validation(Vec<Issue>),
}

fn join(issues: &[Issue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Reads and validates a profile document.
///
/// With `strict`, keys the format does not define are rejected.
pub fn load_profile(source: &[u8], strict: bool) -> Result<Profile, ProfileError> {
    let value: Value = serde_json::from_slice(source).map_err(|e| ProfileError::Parse(e.to_string()))?;
    let profile: Profile = serde_json::from_value(value.clone()).map_err(|e| ProfileError::Parse(e.to_string()))?;
    let mut issues = Vec::new();
    if strict {
        unknown_keys(&value, &mut issues);
    }
    issues.extend(validate_profile(&profile));
    if issues.is_empty() {
        Ok(profile)
    } else {
        Err(ProfileError::Validation(issues))
    }
}

/// Canonical pretty JSON for a profile.
pub fn to_json(profile: &Profile) -> String {
    serde_json::to_string_pretty(profile).expect("profile serializes")
}

const TOP: &[&str] = &["model", "hardware", "pipeline"];
const MODEL: &[&str] = &["name", "n_layers", "static_bytes", "layer", "embed_ops", "head_ops"];
const LAYER: &[&str] = &["ops", "fwd_comm_ids", "bwd_comm_ids", "checkpoint_id"];
const OP: &[&str] = &["id", "name", "kind", "time_us", "out_bytes", "deps", "schedulable"];
const HARDWARE: &[&str] = &["mem_budget_bytes", "comm_scale"];
const PIPELINE: &[&str] = &["n_stages", "n_microbatches", "schedule_kind"];

fn unknown_keys(doc: &Value, issues: &mut Vec<Issue>) {
    check(doc, TOP, "", issues);
    check(&doc["hardware"], HARDWARE, "hardware", issues);
    check(&doc["pipeline"], PIPELINE, "pipeline", issues);
    let model = &doc["model"];
    check(model, MODEL, "model", issues);
    check(&model["layer"], LAYER, "model.layer", issues);
    for (list, path) in [
        (&model["layer"]["ops"], "model.layer.ops"),
        (&model["embed_ops"], "model.embed_ops"),
        (&model["head_ops"], "model.head_ops"),
    ] {
        if let Some(ops) = list.as_array() {
            for (i, op) in ops.iter().enumerate() {
                check(op, OP, &format!("{path}[{i}]"), issues);
            }
        }
    }
}

fn check(v: &Value, allowed: &[&str], path: &str, issues: &mut Vec<Issue>) {
    if let Some(map) = v.as_object() {
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                issues.push(Issue::UnknownKey { path: full });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
      "model": {"name": "m", "n_layers": 1, "static_bytes": 0,
        "layer": {"ops": [{"id": 0, "name": "x", "kind": "compute", "time_us": 1, "out_bytes": 4, "deps": []}],
                  "fwd_comm_ids": [], "bwd_comm_ids": [], "checkpoint_id": 0}},
      "hardware": {"mem_budget_bytes": 100, "comm_scale": 1},
      "pipeline": {"n_stages": 1, "n_microbatches": 1}
    }"#;

    #[test]
    fn minimal_loads() {
        let p = load_profile(MINIMAL.as_bytes(), true).unwrap();
        assert_eq!(p.model.n_layers, 1);
        assert_eq!(p.model.layer.ops.len(), 1);
    }

    #[test]
    fn unknown_key_is_strict_only() {
        let doc = MINIMAL.replace("\"comm_scale\": 1", "\"comm_scale\": 1, \"nvlink\": true");
        match load_profile(doc.as_bytes(), true) {
            Err(ProfileError::Validation(issues)) => {
                assert_eq!(issues, vec![Issue::UnknownKey { path: "hardware.nvlink".into() }])
            }
            other => panic!("{other:?}"),
        }
        assert!(load_profile(doc.as_bytes(), false).is_ok());
    }

    #[test]
    fn truncated_is_parse_error() {
        let doc = &MINIMAL[..MINIMAL.len() / 2];
        assert!(matches!(load_profile(doc.as_bytes(), true), Err(ProfileError::Parse(_))));
    }

    #[test]
    fn fractional_times_round_trip() {
        let doc = MINIMAL.replace("\"time_us\": 1", "\"time_us\": \"1/3\"");
        let p = load_profile(doc.as_bytes(), true).unwrap();
        let again = load_profile(to_json(&p).as_bytes(), true).unwrap();
        assert_eq!(p, again);
    }
}
