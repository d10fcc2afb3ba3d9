//! Emitted JSON against the schema files in `docs/schema`, checked by a
//! small validator for the keyword subset those files use.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use recurx::engine::{evaluate_properties, run_recursion, Outcome, Property, PropertyContext, PropertySuite, TraceExport};
use recurx::explain_feature::{FeatureExplainer, FeatureMask, Scorer, SelectionRule};
use recurx::explain_proto::{random_system, ProtoExplainer, ProtoState};
use recurx::explain_sae::{DynamicsTolerances, LinearSae, Nonlinearity, SaeExplainer};
use recurx::models::{Architecture, Classifier};
use recurx::report::{aggregate, class_census, to_json_bytes, GroupKey, TraceRecord};

fn schema(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schema").join(name);
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn type_matches(t: &str, v: &Value) -> bool {
    match t {
        "null" => v.is_null(),
        "boolean" => v.is_boolean(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        "array" => v.is_array(),
        "object" => v.is_object(),
        other => panic!("unsupported type {other}"),
    }
}

/// `Err(path)` at the first violation.
fn validate(s: &Value, v: &Value, path: &str) -> Result<(), String> {
    let fail = |why: &str| Err(format!("{path}: {why}"));
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_matches(t, v),
            Value::Array(ts) => ts.iter().any(|t| type_matches(t.as_str().unwrap(), v)),
            _ => panic!("bad type keyword"),
        };
        if !ok {
            return fail(&format!("expected type {t}, got {v}"));
        }
    }
    if let Some(options) = s.get("enum").and_then(Value::as_array) {
        if !options.contains(v) {
            return fail(&format!("{v} not in enum"));
        }
    }
    if let Some(x) = v.as_f64() {
        if s.get("minimum").and_then(Value::as_f64).is_some_and(|m| x < m) {
            return fail("below minimum");
        }
        if s.get("maximum").and_then(Value::as_f64).is_some_and(|m| x > m) {
            return fail("above maximum");
        }
    }
    if let Some(branches) = s.get("oneOf").and_then(Value::as_array) {
        let matched = branches.iter().filter(|b| validate(b, v, path).is_ok()).count();
        if matched != 1 {
            return fail(&format!("{matched} oneOf branches match"));
        }
    }
    if let Value::Object(obj) = v {
        let props = s.get("properties").and_then(Value::as_object);
        for key in s.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(key.as_str().unwrap()) {
                return fail(&format!("missing {key}"));
            }
        }
        for (k, child) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(cs) => validate(cs, child, &format!("{path}.{k}"))?,
                None if s.get("additionalProperties") == Some(&Value::Bool(false)) => return fail(&format!("unexpected {k}")),
                None => {}
            }
        }
    }
    if let (Value::Array(items), Some(is)) = (v, s.get("items")) {
        for (i, item) in items.iter().enumerate() {
            validate(is, item, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

fn json<T: serde::Serialize + ?Sized>(value: &T) -> Value {
    serde_json::from_slice(&to_json_bytes(value).unwrap()).unwrap()
}

fn random_records(rng: &mut ChaCha8Rng) -> Vec<TraceRecord> {
    let n = rng.random_range(1..30);
    (0..n)
        .map(|i| {
            let d = rng.random_range(1..40);
            let outcome = match rng.random_range(0..4) {
                0 => Outcome::FixedPoint { k: rng.random_range(0..10) },
                1 => Outcome::Cycle {
                    entry: rng.random_range(0..5),
                    period: rng.random_range(1..5),
                },
                2 => Outcome::Diverged { k: rng.random_range(0..10) },
                _ => Outcome::BudgetExhausted,
            };
            let certified = outcome.is_fixed_point() && rng.random_bool(0.6);
            TraceRecord {
                dataset: ["a", "b"][rng.random_range(0..2)].into(),
                explainer: ["occlusion", "sae", "proto_s010_loop"][rng.random_range(0..3)].into(),
                input_index: i,
                true_label: Some(rng.random_range(0..4)),
                total_features: d,
                outcome,
                certified,
                terminal_satisfied: certified || rng.random_bool(0.3),
                fixed_point_features: outcome.is_fixed_point().then(|| rng.random_range(0..=d)),
                iterate_labels: (0..rng.random_range(1..6)).map(|_| rng.random_range(0..4)).collect(),
                jaccard_start_step1: rng.random_bool(0.5).then(|| rng.random::<f64>()),
                jaccard_start_fixed: rng.random_bool(0.5).then(|| rng.random::<f64>()),
                prototype_self_consistency: rng.random_bool(0.5).then(|| rng.random::<f64>()),
            }
        })
        .collect()
}

fn random_trace(rng: &mut ChaCha8Rng, seed: u64) -> Value {
    let suite = PropertySuite {
        properties: vec![Property::LabelPreserved, Property::TopKAgreement { k: 2, label: None }],
    };
    let ctx = PropertyContext {
        ground_truth: Some(0),
        seed,
    };
    let model = Classifier::random(Architecture::Mlp1, 9, 6, 3, seed);
    let x: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let with_report = rng.random_bool(0.8);
    macro_rules! export {
        ($step:expr, $start:expr) => {{
            let step = $step;
            let trace = run_recursion(&step, $start, 200).unwrap();
            let report = evaluate_properties(&step, &trace, &suite, &ctx).unwrap();
            json(&TraceExport::new(&step, &trace, with_report.then_some(&report)))
        }};
    }
    match seed % 3 {
        0 => export!(
            FeatureExplainer::for_prediction(&model, x, Scorer::Occlusion, SelectionRule::TopK(3), 0.5).unwrap(),
            FeatureMask::full(9)
        ),
        1 => {
            let sys = random_system(12, 4, 9, 3, seed).unwrap();
            export!(
                ProtoExplainer {
                    system: &sys,
                    input: Some(x),
                    exclude_self: rng.random_bool(0.5),
                },
                ProtoState::Input
            )
        }
        _ => {
            let sae = LinearSae::random(6, 10, 3, Nonlinearity::TopK, seed).unwrap();
            let tol = DynamicsTolerances::default();
            let step = SaeExplainer::new(&sae, &model, x, &tol);
            let start = step.start().unwrap();
            export!(step, start)
        }
    }
}

#[test]
fn fifty_random_reports_match_schemas() {
    let (summary, census, trace) = (schema("summary.schema.json"), schema("census.schema.json"), schema("trace.schema.json"));
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for i in 0..50u64 {
        let records = random_records(&mut rng);
        for keys in [&[GroupKey::Dataset, GroupKey::Explainer][..], &[GroupKey::Dataset, GroupKey::Explainer, GroupKey::TrueLabel]] {
            validate(&summary, &json(&aggregate(&records, keys).unwrap()), "$").unwrap();
        }
        validate(&census, &json(&class_census(&records, 4).unwrap()), "$").unwrap();
        validate(&trace, &random_trace(&mut rng, i), "$").unwrap_or_else(|e| panic!("trace {i}: {e}"));
    }
}

#[test]
fn validator_rejects_broken_documents() {
    let census = schema("census.schema.json");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let good = json(&class_census(&random_records(&mut rng), 4).unwrap());
    validate(&census, &good, "$").unwrap();
    let mut extra = good.clone();
    extra["classes"][0]["surprise"] = Value::Bool(true);
    assert!(validate(&census, &extra, "$").is_err());
    let mut missing = good.clone();
    missing["classes"][0].as_object_mut().unwrap().remove("traces");
    assert!(validate(&census, &missing, "$").is_err());
    let mut wrong = good;
    wrong["classes"][0]["fixed_point_exists"] = Value::from(1);
    assert!(validate(&census, &wrong, "$").is_err());
    let trace = schema("trace.schema.json");
    let mut t = random_trace(&mut rng, 3);
    t["outcome"] = serde_json::json!({"type": "cycle", "entry": 0, "period": 0});
    assert!(validate(&trace, &t, "$").is_err());
}
