//! Regenerates the golden fixtures that snapshot-stable tests compare
//! against: the topology table rendered from the bundled reference
//! fingerprints, and the constant-loss scheduler trace.
//!
//!     cargo run -p segplan --example regen_goldens
//!
//! Run this only when an intentional behavior change shifts the goldens,
//! and review the diff before committing it.

use std::fs;
use std::path::Path;

use segplan::fingerprint::DatasetFingerprint;
use segplan::losskit::{SchedulerAction, SchedulerConfig, SchedulerState};
use segplan::planner::make_plan;
use segplan::report::render_topology_table;

const FINGERPRINTS: [&str; 7] = [
    "brain_tumour",
    "heart",
    "liver",
    "hippocampus",
    "prostate",
    "lung",
    "pancreas",
];

fn main() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");

    let plans: Vec<_> = FINGERPRINTS
        .iter()
        .map(|name| {
            let path = fixtures.join("fingerprints").join(format!("{name}.json"));
            let fp = DatasetFingerprint::read_json(&path).expect("fixture parses");
            make_plan(&fp).expect("fixture plans")
        })
        .collect();
    let table = render_topology_table(&plans);
    let table_path = fixtures.join("topology_reference.txt");
    fs::write(&table_path, &table).expect("write table golden");
    println!("wrote {}", table_path.display());

    let mut state = SchedulerState::new(SchedulerConfig::default());
    let mut trace = String::new();
    for _ in 0..10_000 {
        let log = state.step(1.0, 1.0).expect("finite losses");
        let stop = log.action == SchedulerAction::Stop;
        trace.push_str(&log.to_json_line());
        trace.push('\n');
        if stop {
            break;
        }
    }
    let trace_path = fixtures.join("scheduler_constant_trace.jsonl");
    fs::write(&trace_path, &trace).expect("write trace golden");
    println!("wrote {} ({} epochs)", trace_path.display(), trace.lines().count());
}
