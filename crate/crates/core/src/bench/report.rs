//! Markdown summary of a bench report directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::bench::suite::{read_csv, BenchRow, Skip, TimingRow, REPORT_NOTE};
use crate::bench::DraftCostRow;
use crate::error::{Error, Result};

/// Renders `taus.csv`, `timings.csv`, `draft_cost.csv` and the skip list of
/// `report.json` (whichever exist) into markdown tables.
pub fn render_markdown(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let taus = dir.join("taus.csv");
    if !taus.exists() {
        return Err(Error::config(format!(
            "{} holds no taus.csv",
            dir.display()
        )));
    }
    let rows: Vec<BenchRow> = read_csv(&taus)?;
    let mut md = String::new();
    let _ = writeln!(md, "# Bench report\n\n{REPORT_NOTE}\n");

    md.push_str("## Acceptance\n\n| config | layers | n_feat | conditioned | train B | test B | T | mean tau | full-block share | lossless |\n|---|---|---|---|---|---|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {:.3} | {:.3} | {} |",
            r.config_id,
            r.layers,
            r.n_feat,
            r.conditioning,
            r.train_block,
            r.test_block,
            r.temperature,
            r.mean_tau,
            r.full_block_fraction,
            if r.lossless.is_empty() {
                "n/a"
            } else {
                &r.lossless
            }
        );
    }

    // Mean tau by (train B, test B) over seeds, greedy rows only.
    let mut grid: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in rows
        .iter()
        .filter(|r| r.temperature == 0.0 && r.conditioning)
    {
        let e = grid.entry((r.train_block, r.test_block)).or_default();
        e.0 += r.mean_tau;
        e.1 += 1;
    }
    if !grid.is_empty() {
        let tests: Vec<usize> = {
            let mut t: Vec<usize> = grid.keys().map(|k| k.1).collect();
            t.sort_unstable();
            t.dedup();
            t
        };
        md.push_str(
            "\n## Block-size grid (greedy, conditioned; mean tau)\n\n| train B \\ test B |",
        );
        for t in &tests {
            let _ = write!(md, " {t} |");
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(tests.len()));
        md.push('\n');
        let mut trains: Vec<usize> = grid.keys().map(|k| k.0).collect();
        trains.dedup();
        for tr in trains {
            let _ = write!(md, "| {tr} |");
            for t in &tests {
                match grid.get(&(tr, *t)) {
                    Some((s, n)) => {
                        let _ = write!(md, " {:.3} |", s / *n as f64);
                    }
                    None => md.push_str(" - |"),
                }
            }
            md.push('\n');
        }
    }

    let timings = dir.join("timings.csv");
    if timings.exists() {
        let rows: Vec<TimingRow> = read_csv(&timings)?;
        md.push_str("\n## Speed\n\n| config | sessions | L_target ms | T_draft ms | T_verify ms | measured speedup | analytic speedup | tokens/s |\n|---|---|---|---|---|---|---|---|\n");
        for r in rows {
            let _ = writeln!(
                md,
                "| {} | {} | {:.3} | {:.3} | {:.3} | {:.2} | {:.2} | {:.1} |",
                r.config_id,
                r.concurrency,
                r.l_target_ms,
                r.t_draft_ms,
                r.t_verify_ms,
                r.measured_speedup,
                r.analytic_speedup,
                r.throughput_tok_s
            );
        }
    }

    let cost = dir.join("draft_cost.csv");
    if cost.exists() {
        let rows: Vec<DraftCostRow> = read_csv(&cost)?;
        md.push_str("\n## Drafting cost\n\n| B | block forward ms | sequential ms | target step ms |\n|---|---|---|---|\n");
        for r in rows {
            let _ = writeln!(
                md,
                "| {} | {:.3} | {:.3} | {:.3} |",
                r.block_size, r.t_parallel_ms, r.sequential_ms, r.t_step_ms
            );
        }
    }

    let json = dir.join("report.json");
    if json.exists() {
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let skips: Vec<Skip> =
            serde_json::from_value(v.get("skips").cloned().unwrap_or_default()).unwrap_or_default();
        if !skips.is_empty() {
            md.push_str("\n## Skipped\n\n");
            for s in skips {
                let _ = writeln!(md, "- {}: {}", s.id, s.reason);
            }
        }
    }
    Ok(md)
}
