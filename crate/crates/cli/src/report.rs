//! Report tables: CSV rows and their Markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write;

use parsim_core::trainer::EvalResult;
use serde::{Deserialize, Serialize};

use crate::commands::SimRow;

/// One simulated configuration. The first seven columns follow the
/// throughput table (quality columns stay empty for simulated runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub throughput_samples_per_s: f64,
    pub speedup: f64,
    pub gpu_util_pct: f64,
    pub comm_overhead_ms_per_iter: f64,
    pub hr_at_10: Option<f64>,
    pub ndcg_at_10: Option<f64>,
    pub scheme: String,
    pub nodes: usize,
    pub devices: usize,
    pub global_batch: usize,
    pub compute_share_pct: f64,
    pub comm_share_pct: f64,
    pub idle_share_pct: f64,
    pub memory_util_pct: f64,
    pub bubble_fraction: f64,
    pub iteration_time_s: f64,
}

impl ReportRow {
    pub fn from_sim(row: &SimRow) -> Self {
        let r = &row.report;
        let compute = row.profile.compute_time / row.profile.wall_time;
        Self {
            method: row.run.name.clone(),
            throughput_samples_per_s: r.throughput,
            speedup: r.speedup,
            gpu_util_pct: 100.0 * r.device_utilization,
            comm_overhead_ms_per_iter: r.comm_overhead_ms,
            hr_at_10: None,
            ndcg_at_10: None,
            scheme: row.run.scheme().to_string(),
            nodes: row.run.nodes,
            devices: r.devices,
            global_batch: row.run.global_batch,
            compute_share_pct: 100.0 * compute,
            comm_share_pct: 100.0 * r.comm_share,
            idle_share_pct: 100.0 * (1.0 - compute - r.comm_share).max(0.0),
            memory_util_pct: 100.0 * r.memory_utilization,
            bubble_fraction: r.bubble_fraction,
            iteration_time_s: r.iteration_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLine {
    pub variant: String,
    pub k: usize,
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    /// Difference to the first variant.
    pub hr_delta: f64,
    pub ndcg_delta: f64,
    pub num_evaluated: usize,
    pub skipped: usize,
}

pub fn eval_lines(evals: &[(String, EvalResult)], k: usize) -> Vec<EvalLine> {
    let Some((_, reference)) = evals.first() else {
        return Vec::new();
    };
    evals
        .iter()
        .map(|(name, e)| EvalLine {
            variant: name.clone(),
            k,
            hr_at_k: e.hr_at_k,
            ndcg_at_k: e.ndcg_at_k,
            hr_delta: e.hr_at_k - reference.hr_at_k,
            ndcg_delta: e.ndcg_at_k - reference.ndcg_at_k,
            num_evaluated: e.num_evaluated,
            skipped: e.skipped,
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn scheme_title(scheme: &str) -> String {
    match scheme.to_ascii_lowercase().as_str() {
        "baseline" => "Baseline (1 GPU)".into(),
        "data" => "Data Parallel".into(),
        "model" => "Model Parallel".into(),
        "hybrid" => "Hybrid Parallel".into(),
        _ => scheme.to_string(),
    }
}

fn throughput_table(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "| Scheme | Throughput (samples/s) | Speedup | GPU Util% | Comm. Overhead (ms/iter) | HR@10 | NDCG@10 |\n\
         |---|---:|---:|---:|---:|---:|---:|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.0} | {:.2}x | {:.1} | {:.2} | {} | {} |",
            r.method,
            r.throughput_samples_per_s,
            r.speedup,
            r.gpu_util_pct,
            r.comm_overhead_ms_per_iter,
            opt(r.hr_at_10),
            opt(r.ndcg_at_10)
        );
    }
    s
}

fn composition_table(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "| Scheme | Nodes | Devices | Compute % | Communication % | Idle % | Memory Util% | Bubble |\n\
         |---|---:|---:|---:|---:|---:|---:|---:|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.3} |",
            r.method,
            r.nodes,
            r.devices,
            r.compute_share_pct,
            r.comm_share_pct,
            r.idle_share_pct,
            r.memory_util_pct,
            r.bubble_fraction
        );
    }
    s
}

pub fn simulation_markdown(rows: &[ReportRow]) -> String {
    format!(
        "# Simulation report\n\n{}\n## Time composition\n\n{}",
        throughput_table(rows),
        composition_table(rows)
    )
}

pub fn quality_markdown(lines: &[EvalLine]) -> String {
    let k = lines.first().map_or(10, |l| l.k);
    let mut s = format!(
        "| Variant | HR@{k} | NDCG@{k} | HR delta | NDCG delta | Evaluated | Skipped |\n\
         |---|---:|---:|---:|---:|---:|---:|\n"
    );
    for l in lines {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:+.4} | {:+.4} | {} | {} |",
            l.variant, l.hr_at_k, l.ndcg_at_k, l.hr_delta, l.ndcg_delta, l.num_evaluated, l.skipped
        );
    }
    s
}

/// Checks that communication share falls model > data > hybrid at every
/// node count where all three schemes were simulated.
pub fn comm_ordering(rows: &[ReportRow]) -> Vec<(usize, bool)> {
    let mut by_nodes: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    for r in rows {
        by_nodes
            .entry(r.nodes)
            .or_default()
            .insert(r.scheme.to_ascii_lowercase(), r.comm_share_pct);
    }
    by_nodes
        .into_iter()
        .filter_map(|(n, m)| {
            let (d, mo, h) = (m.get("data")?, m.get("model")?, m.get("hybrid")?);
            Some((n, mo > d && d > h))
        })
        .collect()
}

fn scalability_table(rows: &[ReportRow]) -> String {
    let mut schemes: Vec<String> = Vec::new();
    for r in rows {
        if !schemes.contains(&r.scheme) {
            schemes.push(r.scheme.clone());
        }
    }
    let mut cells: BTreeMap<usize, BTreeMap<&str, &ReportRow>> = BTreeMap::new();
    for r in rows {
        cells.entry(r.nodes).or_default().insert(&r.scheme, r);
    }
    let mut s = String::from("| Nodes |");
    for sc in &schemes {
        let title = scheme_title(sc);
        if sc.eq_ignore_ascii_case("baseline") {
            let _ = write!(s, " {title} |");
        } else {
            let _ = write!(s, " {title} Throughput/Speedup |");
        }
    }
    s.push_str("\n|---:|");
    s.push_str(&"---:|".repeat(schemes.len()));
    s.push('\n');
    for (nodes, row) in &cells {
        let _ = write!(s, "| {nodes} |");
        for sc in &schemes {
            match row.get(sc.as_str()) {
                Some(r) if sc.eq_ignore_ascii_case("baseline") => {
                    let _ = write!(s, " {:.0} |", r.throughput_samples_per_s);
                }
                Some(r) => {
                    let _ = write!(s, " {:.0} / {:.2}x |", r.throughput_samples_per_s, r.speedup);
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn combined_markdown(sims: &[ReportRow], evals: &[EvalLine]) -> String {
    let mut s = String::from("# Combined report\n");
    if !sims.is_empty() {
        let _ = write!(s, "\n## Throughput\n\n{}", throughput_table(sims));
        let _ = write!(s, "\n## Communication share\n\n{}", composition_table(sims));
        for (nodes, holds) in comm_ordering(sims) {
            let _ = writeln!(
                s,
                "\nCommunication share ordering model > data > hybrid at {nodes} node(s): {}.",
                if holds { "holds" } else { "does not hold" }
            );
        }
        s.push_str("\n## Resource utilization\n\n| Scheme | Nodes | GPU Util% | Memory Util% |\n|---|---:|---:|---:|\n");
        for r in sims {
            let _ = writeln!(
                s,
                "| {} | {} | {:.1} | {:.1} |",
                r.method, r.nodes, r.gpu_util_pct, r.memory_util_pct
            );
        }
        let _ = write!(s, "\n## Scalability\n\n{}", scalability_table(sims));
    }
    if !evals.is_empty() {
        let _ = write!(s, "\n## Recommendation quality\n\n{}", quality_markdown(evals));
    }
    s
}
