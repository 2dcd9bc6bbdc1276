use std::fmt::Write as _;

use serde::Serialize;

use super::{EventKind, SimReport};
use crate::rational::{fixed3, Fixed3, Rational};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceFormat {
    ChromeTrace,
    Csv,
}

/// Step function of resident bytes on one stage.
pub fn memory_trace(report: &SimReport, stage: usize) -> Vec<(Rational, u64)> {
    report.memory[stage].clone()
}

#[derive(Serialize)]
struct Fractions {
    no_recompute: Fixed3,
    overlapped: Fixed3,
    on_demand: Fixed3,
}

#[derive(Serialize)]
struct Counts {
    no_recompute: u64,
    overlapped: u64,
    on_demand: u64,
}

#[derive(Serialize)]
struct StageJson {
    stage: usize,
    busy_us: Fixed3,
    comm_us: Fixed3,
    stall_us: Fixed3,
    recompute_on_demand_us: Fixed3,
    recompute_overlapped_us: Fixed3,
    peak_bytes: u64,
    static_bytes: u64,
    activation_peak_bytes: u64,
    breakdown: Fractions,
    breakdown_counts: Counts,
}

#[derive(Serialize)]
struct EventJson {
    stage: usize,
    microbatch: u32,
    kind: EventKind,
    op_id: Option<u32>,
    start_us: Fixed3,
    end_us: Fixed3,
    overlapped: bool,
}

#[derive(Serialize)]
struct ReportJson {
    iteration_us: Fixed3,
    stages: Vec<StageJson>,
    memory: Vec<Vec<(Fixed3, u64)>>,
    timeline: Vec<EventJson>,
}

/// Pretty JSON for a report; times are rendered with three decimals.
pub fn report_json(report: &SimReport) -> String {
    let stages = report
        .per_stage
        .iter()
        .enumerate()
        .map(|(s, st)| {
            let b = report.breakdown[s];
            let (n, o, d) = b.fractions();
            StageJson {
                stage: s,
                busy_us: Fixed3(st.busy_us.clone()),
                comm_us: Fixed3(st.comm_us.clone()),
                stall_us: Fixed3(st.stall_us.clone()),
                recompute_on_demand_us: Fixed3(st.recompute_on_demand_us.clone()),
                recompute_overlapped_us: Fixed3(st.recompute_overlapped_us.clone()),
                peak_bytes: report.memory_peaks[s],
                static_bytes: report.static_bytes[s],
                activation_peak_bytes: report.memory_peaks[s] - report.static_bytes[s],
                breakdown: Fractions { no_recompute: Fixed3(n), overlapped: Fixed3(o), on_demand: Fixed3(d) },
                breakdown_counts: Counts {
                    no_recompute: b.no_recompute,
                    overlapped: b.overlapped,
                    on_demand: b.on_demand,
                },
            }
        })
        .collect();
    let doc = ReportJson {
        iteration_us: Fixed3(report.iteration_us.clone()),
        stages,
        memory: report.memory.iter().map(|m| m.iter().map(|(t, b)| (Fixed3(t.clone()), *b)).collect()).collect(),
        timeline: report
            .timeline
            .iter()
            .map(|e| EventJson {
                stage: e.stage,
                microbatch: e.microbatch,
                kind: e.kind,
                op_id: e.op_id,
                start_us: Fixed3(e.start_us.clone()),
                end_us: Fixed3(e.end_us.clone()),
                overlapped: e.overlapped,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("report serializes")
}

#[derive(Serialize)]
struct ChromeArgs {
    microbatch: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    op_id: Option<u32>,
    overlapped: bool,
}

#[derive(Serialize)]
struct ChromeEvent {
    name: String,
    cat: &'static str,
    ph: &'static str,
    ts: Fixed3,
    dur: Fixed3,
    pid: usize,
    tid: &'static str,
    args: ChromeArgs,
}

/// Renders the timeline. Chrome traces put comm events, and recomputation
/// hidden inside them, on the `comm` thread so the nesting is visible.
pub fn emit_trace(report: &SimReport, format: TraceFormat) -> String {
    match format {
        TraceFormat::Csv => {
            let mut out = String::from("stage,microbatch,kind,op_id,start_us,end_us,overlapped\n");
            for e in &report.timeline {
                let op = e.op_id.map(|o| o.to_string()).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    e.stage,
                    e.microbatch,
                    e.kind.name(),
                    op,
                    fixed3(&e.start_us),
                    fixed3(&e.end_us),
                    e.overlapped
                );
            }
            out
        }
        TraceFormat::ChromeTrace => {
            let events: Vec<ChromeEvent> = report
                .timeline
                .iter()
                .map(|e| {
                    let on_comm = e.kind.on_comm() || (e.kind == EventKind::Recompute && e.overlapped);
                    ChromeEvent {
                        name: match e.op_id {
                            Some(op) => format!("{} mb{} op{}", e.kind.name(), e.microbatch, op),
                            None => format!("{} mb{}", e.kind.name(), e.microbatch),
                        },
                        cat: e.kind.name(),
                        ph: "X",
                        ts: Fixed3(e.start_us.clone()),
                        dur: Fixed3(&e.end_us - &e.start_us),
                        pid: e.stage,
                        tid: if on_comm { "comm" } else { "compute" },
                        args: ChromeArgs { microbatch: e.microbatch, op_id: e.op_id, overlapped: e.overlapped },
                    }
                })
                .collect();
            serde_json::to_string_pretty(&events).expect("trace serializes")
        }
    }
}
