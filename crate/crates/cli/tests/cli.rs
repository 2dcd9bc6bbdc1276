use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use remat_core::optsched::{build_opt_model, check_schedule, solve_opt, stage_phase_graph};
use remat_core::oracle::opt::solve_opt_oracle;
use remat_core::profile::{expand_stage_graph, load_profile};
use remat_core::rational::parse;

fn remat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remat")).args(args).output().expect("run remat")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(format!("{name}.json")).display().to_string()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn tmp(name: &str) -> String {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn assert_schema(schema: &str, doc: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{schema}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

/// A fixture with a modified budget, written to the target tmp dir.
fn with_budget(name: &str, budget: u64) -> String {
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap();
    doc["hardware"]["mem_budget_bytes"] = budget.into();
    let path = tmp(&format!("{name}-{budget}.json"));
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

#[test]
fn validate_exit_codes() {
    let ok = remat(&["validate", &fixture("gpt-tiny")]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(ok.stderr.is_empty());

    let cyclic = remat(&["validate", &fixture("cyclic")]);
    assert_eq!(cyclic.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&cyclic.stderr).contains("cycle"));

    assert_eq!(remat(&["validate", &fixture("truncated")]).status.code(), Some(2));
    assert_eq!(remat(&["validate", &tmp("does-not-exist.json")]).status.code(), Some(2));
}

#[test]
fn lenient_accepts_unknown_keys() {
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(fixture("minimal")).unwrap()).unwrap();
    doc["model"]["comment"] = "profiled on a test rig".into();
    let path = tmp("minimal-extra-key.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    assert_eq!(remat(&["validate", &path]).status.code(), Some(1));
    assert_eq!(remat(&["validate", &path, "--lenient"]).status.code(), Some(0));
}

#[test]
fn heu_schedule_without_memory_pressure_costs_nothing() {
    let o = remat(&["schedule", &fixture("gpt-tiny"), "--mode", "heu"]);
    assert_eq!(o.status.code(), Some(0));
    let doc = json(&o);
    assert_schema("plan", &doc);
    assert_eq!(num(&doc["objective_us"]), 0.0);
    assert_eq!(doc["status"], "optimal");
    assert_eq!(doc["role"], "interior");

    let last = json(&remat(&["schedule", &fixture("gpt-tiny"), "--mode", "heu", "--stage", "1"]));
    assert_eq!(last["role"], "last");
    assert_eq!(last["stage"], 1);
}

#[test]
fn tight_opt_schedule_matches_golden_and_oracle() {
    let o = remat(&["schedule", &fixture("tight-opt"), "--mode", "opt"]);
    assert_eq!(o.status.code(), Some(0));
    let doc = json(&o);
    assert_schema("schedule", &doc);
    assert_eq!(stdout(&o), std::fs::read_to_string(golden("tight-opt.schedule.json")).unwrap());

    let p = load_profile(&std::fs::read(fixture("tight-opt")).unwrap(), true).unwrap();
    let sg = expand_stage_graph(&p.model, 1, true, true);
    let phase = stage_phase_graph(&sg, 1, 0, 1);
    let inst = build_opt_model(&phase.graph, &p.hardware, p.model.static_bytes).unwrap();
    let oracle = solve_opt_oracle(&inst.problem).expect("feasible");
    assert_eq!(parse(&doc["objective_us"].to_string()).unwrap(), oracle.cost);
    let sched = solve_opt(&inst, 10_000, 0).unwrap();
    assert!(check_schedule(&sched, &inst.problem).is_empty());
    assert_eq!(sched.to_json() + "\n", stdout(&o));
}

/// Rows, declared variables and referenced variables of LP text.
fn parse_lp(text: &str) -> (usize, BTreeSet<String>, BTreeSet<String>) {
    let mut section = "";
    let mut rows: Vec<String> = Vec::new();
    let mut declared = BTreeSet::new();
    for line in text.lines() {
        if line.starts_with('\\') {
            continue;
        }
        if let s @ ("Minimize" | "Subject To" | "Bounds" | "Binaries" | "End") = line.trim() {
            section = s;
            continue;
        }
        assert!(line.starts_with(' '), "unexpected line {line:?}");
        match section {
            "Minimize" | "Subject To" => {
                if line.contains(':') {
                    rows.push(line.to_string());
                } else {
                    rows.last_mut().expect("continuation follows a row").push_str(line);
                }
            }
            "Bounds" => {
                let parts: Vec<&str> = line.split_whitespace().collect();
                assert_eq!(parts.len(), 5, "{line}");
                assert_eq!((parts[1], parts[3]), ("<=", "<="));
                declared.insert(parts[2].to_string());
            }
            "Binaries" => declared.extend(line.split_whitespace().map(String::from)),
            other => panic!("text outside a section: {other:?} {line:?}"),
        }
    }
    assert_eq!(section, "End");
    let mut used = BTreeSet::new();
    for (k, row) in rows.iter().enumerate() {
        let (name, body) = row.split_once(':').unwrap();
        assert!(!name.trim().is_empty() && !name.trim().contains(' '));
        let mut tokens: Vec<&str> = body.split_whitespace().collect();
        if k > 0 {
            let rhs = tokens.pop().unwrap();
            assert!(rhs.parse::<f64>().is_ok(), "rhs {rhs}");
            let rel = tokens.pop().unwrap();
            assert!(["<=", ">=", "="].contains(&rel), "rel {rel}");
        }
        let mut expect_sign = false;
        for t in tokens {
            if t == "+" || t == "-" {
                expect_sign = false;
                continue;
            }
            assert!(!expect_sign, "missing operator before {t} in {row}");
            if t.parse::<f64>().is_ok() {
                continue;
            }
            assert!(t.chars().next().unwrap().is_ascii_alphabetic(), "{t}");
            used.insert(t.to_string());
            expect_sign = true;
        }
    }
    (rows.len() - 1, declared, used)
}

#[test]
fn emitted_lp_is_parseable() {
    for args in [
        vec!["schedule", "layer5", "--mode", "heu", "--emit-lp"],
        vec!["schedule", "layer8", "--mode", "heu", "--stage", "1", "--emit-lp"],
        vec!["schedule", "tight-opt", "--mode", "opt", "--emit-lp"],
    ] {
        let path = fixture(args[1]);
        let mut a = args.clone();
        a[1] = &path;
        let o = remat(&a);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        let text = stdout(&o);
        let (rows, declared, used) = parse_lp(&text);
        assert!(rows > 0);
        assert!(used.is_subset(&declared), "undeclared {:?}", used.difference(&declared).collect::<Vec<_>>());

        let last = a.len() - 1;
        a[last] = "--format";
        a.push("lp");
        assert_eq!(stdout(&remat(&a)), text);
    }
}

#[test]
fn exhausted_budget_writes_best_schedule() {
    let o = remat(&["schedule", &fixture("gpt-tiny"), "--mode", "opt", "--time-limit-ms", "1000"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&o);
    assert_schema("schedule", &doc);
    assert_eq!(doc["status"], "feasible");
    assert!(num(&doc["gap_us"]) >= 0.0);

    let none = remat(&["schedule", &fixture("gpt-tiny"), "--mode", "opt", "--time-limit-ms", "1"]);
    assert_eq!(none.status.code(), Some(3));
    assert!(none.stdout.is_empty());
}

#[test]
fn infeasible_budget_exits_4() {
    let path = with_budget("layer5", 15);
    let split = tmp("layer5-split.json");
    std::fs::write(&split, r#"{"layers_per_stage": [2, 2]}"#).unwrap();
    assert_eq!(remat(&["schedule", &path, "--mode", "heu", "--partition", &split]).status.code(), Some(4));
    // Without a split the initial partition already rejects the budget.
    assert_eq!(remat(&["schedule", &path, "--mode", "heu"]).status.code(), Some(5));
    let path = with_budget("tight-opt", 5);
    assert_eq!(remat(&["schedule", &path, "--mode", "opt"]).status.code(), Some(4));
}

#[test]
fn bad_arguments() {
    assert_eq!(remat(&["schedule", &fixture("layer5"), "--stage", "7"]).status.code(), Some(2));
    assert_eq!(remat(&["schedule", &fixture("layer5"), "--mode", "full"]).status.code(), Some(2));
    assert_eq!(remat(&["simulate", &fixture("layer5"), "--p2p-us", "-1"]).status.code(), Some(2));
    assert_eq!(remat(&["simulate", &fixture("layer5"), "--format", "lp"]).status.code(), Some(2));
    assert_eq!(remat(&["schedule"]).status.code(), Some(2));
}

#[test]
fn partition_balanced_and_skewed() {
    let o = remat(&["partition", &fixture("uniform-4x5"), "--mode", "heu"]);
    assert_eq!(o.status.code(), Some(0));
    let doc = json(&o);
    assert_schema("partition", &doc);
    assert_eq!(doc["moves"], serde_json::json!([]));
    assert_eq!(doc["layers_per_stage"], serde_json::json!([1, 1, 1, 1]));

    let o = remat(&["partition", &fixture("skewed-8x4"), "--mode", "heu"]);
    let doc = json(&o);
    assert_schema("partition", &doc);
    assert_eq!(doc["layers_per_stage"], serde_json::json!([1, 2, 2, 3]));
    let parallel = remat(&["partition", &fixture("skewed-8x4"), "--mode", "heu", "--jobs", "4"]);
    assert_eq!(parallel.stdout, o.stdout);
    let full = json(&remat(&["partition", &fixture("skewed-8x4"), "--mode", "heu", "--full-scan"]));
    assert_schema("partition", &full);
}

#[test]
fn partition_without_valid_split_exits_5() {
    let path = with_budget("skewed-8x4", 10);
    let o = remat(&["partition", &path, "--mode", "heu"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(o.stdout.is_empty());
}

#[test]
fn simulate_uniform_grid() {
    let o = remat(&["simulate", &fixture("uniform-4x5")]);
    assert_eq!(o.status.code(), Some(0));
    let doc = json(&o);
    assert_schema("report", &doc);
    assert!(stdout(&o).contains("\"iteration_us\": 16.000"));

    let csv = stdout(&remat(&["simulate", &fixture("uniform-4x5"), "--format", "csv"]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("stage,microbatch,kind,op_id,start_us,end_us,overlapped"));
    assert_eq!(lines.count(), doc["timeline"].as_array().unwrap().len());

    let trace = json(&remat(&["simulate", &fixture("uniform-4x5"), "--format", "chrome-trace"]));
    assert_schema("chrome-trace", &trace);
}

#[test]
fn simulate_takes_a_partition_file() {
    let part = tmp("skewed-partition.json");
    assert_eq!(remat(&["partition", &fixture("skewed-8x4"), "--mode", "heu", "--out", &part]).status.code(), Some(0));
    let o = remat(&["simulate", &fixture("skewed-8x4"), "--partition", &part]);
    assert_eq!(o.status.code(), Some(0));
    let doc = json(&o);
    assert_schema("report", &doc);
    assert_eq!(doc["stages"].as_array().unwrap().len(), 4);

    let wrong = tmp("wrong-partition.json");
    std::fs::write(&wrong, r#"{"layers_per_stage": [4, 4]}"#).unwrap();
    assert_eq!(remat(&["simulate", &fixture("skewed-8x4"), "--partition", &wrong]).status.code(), Some(1));
}

#[test]
fn trace_matches_golden_with_recompute_inside_comm() {
    let o = remat(&["simulate", &fixture("trace-small"), "--format", "chrome-trace"]);
    assert_eq!(stdout(&o), std::fs::read_to_string(golden("trace-small.trace.json")).unwrap());
    let events = json(&o);
    assert_schema("chrome-trace", &events);
    let events = events.as_array().unwrap();
    let hidden: Vec<&Value> =
        events.iter().filter(|e| e["cat"] == "recompute" && e["args"]["overlapped"] == true).collect();
    assert!(!hidden.is_empty());
    for e in hidden {
        assert_eq!(e["tid"], "comm");
        let (s, d) = (num(&e["ts"]), num(&e["dur"]));
        assert!(
            events.iter().any(|c| c["pid"] == e["pid"]
                && (c["cat"] == "comm_fwd" || c["cat"] == "comm_bwd")
                && num(&c["ts"]) <= s
                && s + d <= num(&c["ts"]) + num(&c["dur"])),
            "{e}"
        );
    }
}

#[test]
fn report_without_recomputation_has_no_on_demand_share() {
    let o = remat(&["report", &fixture("uniform-4x5")]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration_us 16.000");
    let header: Vec<&str> = lines[1].split_whitespace().collect();
    let col = header.iter().position(|h| *h == "ondemand").unwrap();
    assert_eq!(lines.len(), 2 + 4);
    for row in &lines[2..] {
        assert_eq!(row.split_whitespace().nth(col), Some("0.000"), "{row}");
    }
}

#[test]
fn full_recomputation_baseline_is_slower() {
    let heu = json(&remat(&["simulate", &fixture("pcie")]));
    let full = json(&remat(&["simulate", &fixture("pcie"), "--mode", "full"]));
    assert!(num(&full["iteration_us"]) > num(&heu["iteration_us"]));
    for st in full["stages"].as_array().unwrap() {
        assert_eq!(num(&st["breakdown"]["overlapped"]), 0.0);
    }
}

#[test]
fn out_flag_matches_stdout() {
    let path = tmp("uniform-report.json");
    let o = remat(&["simulate", &fixture("uniform-4x5"), "--out", &path]);
    assert!(o.stdout.is_empty());
    assert_eq!(std::fs::read(&path).unwrap(), remat(&["simulate", &fixture("uniform-4x5")]).stdout);
}

#[test]
fn p2p_latency_lengthens_the_iteration() {
    let base = json(&remat(&["simulate", &fixture("uniform-4x5")]));
    let slow = json(&remat(&["simulate", &fixture("uniform-4x5"), "--p2p-us", "1/2"]));
    assert!(num(&slow["iteration_us"]) > num(&base["iteration_us"]));
}
