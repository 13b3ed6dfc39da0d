//! Sweeps over drafters, inference block sizes, temperatures and concurrency.
//!
//! Outputs in the report directory:
//! - `taus.csv`: acceptance rows, a pure function of checkpoints, prompts
//!   and seeds (byte-identical on re-runs);
//! - `timings.csv`: wall-clock rows;
//! - `draft_cost.csv`: drafting cost against block size (when requested);
//! - `report.json`: all of the above plus skipped cells.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{
    draft_cost_curve, measure_speedup, timed_ar_decode, ArRun, DraftCostRow, Timer,
};
use crate::checkpoint::Checkpoint;
use crate::corpus::Sample;
use crate::engine::{spec_decode, DecodeConfig, Drafter, ModelDrafter};
use crate::error::{Error, Result};
use crate::model::{DraftModel, TargetModel};

pub const REPORT_NOTE: &str = "Speedups cover model compute only: prefill is excluded on both sides and context fusion is counted as drafting.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrafterEntry {
    pub id: String,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchMatrix {
    pub target: PathBuf,
    pub drafters: Vec<DrafterEntry>,
    /// Inference block sizes; empty means each drafter's training block size.
    #[serde(default)]
    pub test_block_sizes: Vec<usize>,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default = "default_concurrency")]
    pub concurrency: Vec<usize>,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    /// Block sizes for the drafting-cost curve of the first drafter.
    #[serde(default)]
    pub draft_cost_blocks: Vec<usize>,
    /// When set, only drafters with this conditioning mode are run.
    #[serde(default)]
    pub conditioning: Option<bool>,
}

fn default_temperatures() -> Vec<f64> {
    vec![0.0]
}

fn default_concurrency() -> Vec<usize> {
    vec![1]
}

fn default_max_new() -> usize {
    64
}

impl BenchMatrix {
    /// Reads a matrix file; relative checkpoint paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: BenchMatrix = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.target = base.join(&m.target);
        for d in &mut m.drafters {
            d.checkpoint = base.join(&d.checkpoint);
        }
        Ok(m)
    }
}

/// Deterministic acceptance statistics of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config_id: String,
    pub drafter: String,
    pub layers: usize,
    pub n_feat: usize,
    pub conditioning: bool,
    pub train_block: usize,
    pub test_block: usize,
    pub temperature: f64,
    pub seed: u64,
    pub prompts: usize,
    pub cycles: usize,
    pub tokens: usize,
    pub mean_tau: f64,
    pub full_block_fraction: f64,
    /// Fractions of cycles by tau (index 0 first), `;`-separated.
    pub tau_histogram: String,
    /// Empty when sampling.
    pub lossless: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub config_id: String,
    pub concurrency: usize,
    pub l_target_ms: f64,
    pub t_draft_ms: f64,
    pub t_verify_ms: f64,
    pub measured_speedup: f64,
    pub analytic_speedup: f64,
    pub throughput_tok_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub note: String,
    pub rows: Vec<BenchRow>,
    pub timings: Vec<TimingRow>,
    pub draft_cost: Vec<DraftCostRow>,
    pub skips: Vec<Skip>,
}

fn fraction_string(hist: &[u64]) -> (String, f64) {
    let total: u64 = hist.iter().sum();
    let f = |c: u64| {
        if total == 0 {
            0.0
        } else {
            c as f64 / total as f64
        }
    };
    let s = hist
        .iter()
        .map(|&c| format!("{:.6}", f(c)))
        .collect::<Vec<_>>()
        .join(";");
    (s, f(*hist.last().unwrap_or(&0)))
}

/// Tokens per second of `n` concurrent sessions decoding every prompt.
fn concurrent_throughput(
    target: &TargetModel<f32>,
    drafter: &DraftModel<f32>,
    prompts: &[Sample],
    cfg: &DecodeConfig,
    n: usize,
) -> Result<f64> {
    let start = Instant::now();
    let counts: Vec<Result<usize>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|_| {
                s.spawn(|| -> Result<usize> {
                    let mut d = ModelDrafter::new(drafter, target)?;
                    let mut tokens = 0;
                    for p in prompts {
                        d.reset();
                        tokens += spec_decode(&p.prompt, target, &mut d, cfg)?.0.len();
                    }
                    Ok(tokens)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::contract("decode session panicked")))
            })
            .collect()
    });
    let mut total = 0;
    for c in counts {
        total += c?;
    }
    Ok(total as f64 / start.elapsed().as_secs_f64())
}

/// Runs every cell of `matrix` over `prompts` for seeds `0..seeds`.
pub fn run_suite(matrix: &BenchMatrix, prompts: &[Sample], seeds: u64) -> Result<BenchReport> {
    if prompts.is_empty() || seeds == 0 {
        return Err(Error::config(
            "the suite needs at least one prompt and one seed",
        ));
    }
    let (ckpt, _) = Checkpoint::load(&matrix.target)?;
    let target = TargetModel::<f32>::from_checkpoint(&ckpt)?;
    let mut report = BenchReport {
        note: REPORT_NOTE.into(),
        rows: Vec::new(),
        timings: Vec::new(),
        draft_cost: Vec::new(),
        skips: Vec::new(),
    };

    let mut drafters = Vec::new();
    for e in &matrix.drafters {
        if !e.checkpoint.exists() {
            report.skips.push(Skip {
                id: e.id.clone(),
                reason: format!("missing checkpoint {}", e.checkpoint.display()),
            });
            continue;
        }
        let (c, _) = Checkpoint::load(&e.checkpoint)?;
        let model = DraftModel::from_checkpoint(&c, &target)?;
        if matrix
            .conditioning
            .is_some_and(|want| want != model.config.conditioning)
        {
            report.skips.push(Skip {
                id: e.id.clone(),
                reason: "filtered by conditioning mode".into(),
            });
            continue;
        }
        drafters.push((e.id.clone(), model));
    }

    let mut baselines: Vec<((u64, u64), Vec<ArRun>)> = Vec::new();
    for &temperature in &matrix.temperatures {
        for seed in 0..seeds {
            let runs = prompts
                .iter()
                .map(|p| timed_ar_decode(&target, &p.prompt, matrix.max_new, temperature, seed))
                .collect::<Result<_>>()?;
            baselines.push(((temperature.to_bits(), seed), runs));
        }
    }

    for (id, model) in &drafters {
        let c = &model.config;
        let blocks = if matrix.test_block_sizes.is_empty() {
            vec![c.block_size]
        } else {
            matrix.test_block_sizes.clone()
        };
        for &b in &blocks {
            for &temperature in &matrix.temperatures {
                for seed in 0..seeds {
                    let config_id = format!("{id}/B{b}/T{temperature}/s{seed}");
                    let cfg = DecodeConfig {
                        block_size: b,
                        temperature,
                        seed,
                        max_new: matrix.max_new,
                        ..DecodeConfig::default()
                    };
                    let ar = &baselines
                        .iter()
                        .find(|(k, _)| *k == (temperature.to_bits(), seed))
                        .expect("baseline per temperature and seed")
                        .1;
                    let mut d = ModelDrafter::new(model, &target)?;
                    let m = measure_speedup(
                        &target,
                        &mut d as &mut dyn Drafter<f32>,
                        prompts,
                        ar,
                        &cfg,
                    )?;
                    let (hist, full) = fraction_string(&m.tau_histogram);
                    report.rows.push(BenchRow {
                        config_id: config_id.clone(),
                        drafter: id.clone(),
                        layers: c.n_layers,
                        n_feat: c.n_feat(),
                        conditioning: c.conditioning,
                        train_block: c.block_size,
                        test_block: b,
                        temperature,
                        seed,
                        prompts: prompts.len(),
                        cycles: m.cycles,
                        tokens: m.tokens,
                        mean_tau: m.mean_tau,
                        full_block_fraction: full,
                        tau_histogram: hist,
                        lossless: m.lossless.map(|l| l.to_string()).unwrap_or_default(),
                    });
                    for &n in &matrix.concurrency {
                        let throughput = concurrent_throughput(&target, model, prompts, &cfg, n)?;
                        report.timings.push(TimingRow {
                            config_id: config_id.clone(),
                            concurrency: n,
                            l_target_ms: m.l_target_ms,
                            t_draft_ms: m.t_draft_ms,
                            t_verify_ms: m.t_verify_ms,
                            measured_speedup: m.measured_speedup,
                            analytic_speedup: m.analytic_speedup,
                            throughput_tok_s: throughput,
                        });
                    }
                }
            }
        }
    }

    if let (Some((_, model)), false) = (drafters.first(), matrix.draft_cost_blocks.is_empty()) {
        report.draft_cost = draft_cost_curve(
            &target,
            model,
            &prompts[0].prompt,
            &matrix.draft_cost_blocks,
            &Timer::default(),
        )?;
    }
    Ok(report)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        what: "csv",
        detail: format!("{}: {e}", path.display()),
    }
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

impl BenchReport {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("taus.csv"), &self.rows)?;
        write_csv(&dir.join("timings.csv"), &self.timings)?;
        if !self.draft_cost.is_empty() {
            write_csv(&dir.join("draft_cost.csv"), &self.draft_cost)?;
        }
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}
