//! Diff-friendly reports: a topology table (one row group per dataset with
//! median shape, patch, batch, and pooling for the 2D, 3D, and coarse-stage
//! models) and a dice matrix (candidates as rows, per-class columns, the
//! selected candidate marked with `*`). Plain text and CSV only; rendering
//! is a pure function of its inputs so outputs are golden-snapshot stable.

use std::collections::BTreeSet;

use crate::cv::Metrics;
use crate::planner::PipelinePlan;

const ABSENT: &str = "-";

fn dims_x(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn pools_text(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn pools_csv(v: &[usize]) -> String {
    dims_x(v)
}

/// Left-aligned fixed-width columns, two-space gutters, a dash rule under
/// the header, no trailing whitespace.
fn render_text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let push_row = |cells: &[String], out: &mut String| {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(cell);
            if i + 1 < cells.len() {
                for _ in cell.len()..widths[i] {
                    line.push(' ');
                }
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    };
    let header_cells: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    push_row(&header_cells, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    push_row(&rule, &mut out);
    for row in rows {
        push_row(row, &mut out);
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|c| csv_field(c)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn plan_display_name(plan: &PipelinePlan) -> String {
    plan.dataset_name.clone().unwrap_or_else(|| "(unnamed)".to_string())
}

/// In-plane median shape: the full median shape without the slice axis.
fn plane_shape(plan: &PipelinePlan) -> Vec<usize> {
    plan.median_shape
        .iter()
        .enumerate()
        .filter(|(a, _)| *a != plan.slice_axis)
        .map(|(_, &d)| d)
        .collect()
}

/// Rows for one plan: the 2D model, the 3D model, and the coarse stage of
/// the two-stage model (all `-` when that model is absent). `repeat_name`
/// controls whether the dataset column repeats on every row (CSV) or only
/// leads the group (text).
fn topology_rows(plan: &PipelinePlan, repeat_name: bool, csv_pools: bool) -> Vec<Vec<String>> {
    let name = plan_display_name(plan);
    let pools = |v: &[usize]| if csv_pools { pools_csv(v) } else { pools_text(v) };
    let group_name = |first: bool| {
        if first || repeat_name {
            name.clone()
        } else {
            String::new()
        }
    };
    let mut rows = Vec::with_capacity(3);
    rows.push(vec![
        group_name(true),
        "U2D".to_string(),
        dims_x(&plane_shape(plan)),
        dims_x(&plan.topology_2d.patch_size),
        plan.topology_2d.batch_size.to_string(),
        pools(&plan.topology_2d.pools_per_axis),
    ]);
    rows.push(vec![
        group_name(false),
        "U3D".to_string(),
        dims_x(&plan.median_shape),
        dims_x(&plan.topology_3d.patch_size),
        plan.topology_3d.batch_size.to_string(),
        pools(&plan.topology_3d.pools_per_axis),
    ]);
    match &plan.cascade {
        Some(c) => rows.push(vec![
            group_name(false),
            "CASCADE".to_string(),
            dims_x(&c.lowres_median_shape),
            dims_x(&c.topology_lowres.patch_size),
            c.topology_lowres.batch_size.to_string(),
            pools(&c.topology_lowres.pools_per_axis),
        ]),
        None => rows.push(vec![
            group_name(false),
            "CASCADE".to_string(),
            ABSENT.to_string(),
            ABSENT.to_string(),
            ABSENT.to_string(),
            ABSENT.to_string(),
        ]),
    }
    rows
}

const TOPOLOGY_HEADER: [&str; 6] =
    ["dataset", "model", "median shape", "patch size", "batch", "pools"];
const TOPOLOGY_CSV_HEADER: [&str; 6] =
    ["dataset", "model", "median_shape", "patch_size", "batch_size", "pools_per_axis"];

pub fn render_topology_table(plans: &[PipelinePlan]) -> String {
    let rows: Vec<Vec<String>> =
        plans.iter().flat_map(|p| topology_rows(p, false, false)).collect();
    render_text_table(&TOPOLOGY_HEADER, &rows)
}

pub fn render_topology_csv(plans: &[PipelinePlan]) -> String {
    let rows: Vec<Vec<String>> =
        plans.iter().flat_map(|p| topology_rows(p, true, true)).collect();
    render_csv(&TOPOLOGY_CSV_HEADER, &rows)
}

/// Foreground classes present in any run, numerically sorted.
fn dice_classes(runs: &[Metrics]) -> Vec<String> {
    let mut keys: BTreeSet<u64> = BTreeSet::new();
    for m in runs {
        for cand in &m.candidates {
            for key in cand.mean_per_class.keys() {
                if let Ok(k) = key.parse::<u64>() {
                    keys.insert(k);
                }
            }
        }
    }
    keys.into_iter().map(|k| k.to_string()).collect()
}

fn dice_rows(runs: &[Metrics], classes: &[String], repeat_name: bool) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for m in runs {
        for (i, cand) in m.candidates.iter().enumerate() {
            let mut row = Vec::with_capacity(classes.len() + 3);
            row.push(if i == 0 || repeat_name { m.dataset.clone() } else { String::new() });
            let marker = if cand.name == m.selected { " *" } else { "" };
            row.push(format!("{}{marker}", cand.name));
            for class in classes {
                row.push(match cand.mean_per_class.get(class) {
                    Some(d) => format!("{d:.4}"),
                    None => ABSENT.to_string(),
                });
            }
            row.push(format!("{:.4}", cand.mean_foreground_dice));
            rows.push(row);
        }
    }
    rows
}

fn dice_header(classes: &[String], csv: bool) -> Vec<String> {
    let mut header = vec!["dataset".to_string(), "model".to_string()];
    for class in classes {
        header.push(if csv { format!("class_{class}") } else { format!("class {class}") });
    }
    header.push("mean".to_string());
    header
}

pub fn render_dice_table(runs: &[Metrics]) -> String {
    let classes = dice_classes(runs);
    let header = dice_header(&classes, false);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    render_text_table(&header_refs, &dice_rows(runs, &classes, false))
}

pub fn render_dice_csv(runs: &[Metrics]) -> String {
    let classes = dice_classes(runs);
    let header = dice_header(&classes, true);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    render_csv(&header_refs, &dice_rows(runs, &classes, true))
}
