//! Command-line front end. Configuration precedence: built-in defaults, then
//! a `--config` JSON file (a plain object or a run manifest), then flags.
//! Logs are JSON lines on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::bench::report::render_markdown;
use crate::bench::{run_suite, BenchMatrix};
use crate::checkpoint::Checkpoint;
use crate::corpus::{
    distill_responses, gen_task, read_jsonl, write_jsonl, Sample, TaskKind, Vocab,
};
use crate::engine::{spec_decode, DecodeConfig, DecodeMetrics, Drafter, ModelDrafter};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::model::{
    train_target, DraftConfig, DraftModel, TargetConfig, TargetModel, TargetTrainConfig,
};
use crate::numkernel::AdamWConfig;
use crate::trainer::{
    loss_decay_ablation, train_drafter, FeatureCache, FeatureMode, FeatureSource, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "blockspec",
    version,
    about = "Block-diffusion speculative decoding toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task corpus (JSONL).
    GenData(GenDataArgs),
    /// Replace corpus responses with the target's greedy continuations.
    Distill(DistillArgs),
    /// Train the target model.
    TrainTarget(TrainTargetArgs),
    /// Train a block drafter against a frozen target.
    TrainDraft(TrainDraftArgs),
    /// Decode prompts speculatively.
    Decode(DecodeArgs),
    /// Run a benchmark matrix.
    Bench(BenchArgs),
    /// Render a bench report directory as markdown.
    Report(ReportArgs),
    /// Train tiny models and check losslessness and the training mask end to end.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    /// JSON config file or run manifest.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// copy_repeat, modular_chain, pattern_grammar or mixture.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenDataConfig {
    task: Option<String>,
    seed: u64,
    count: Option<usize>,
    out: Option<PathBuf>,
    vocab_size: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            task: None,
            seed: 0,
            count: None,
            out: None,
            vocab_size: Vocab::default().size,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct DistillArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(rename = "input")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_new: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DistillConfig {
    target: Option<PathBuf>,
    #[serde(alias = "in")]
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    max_new: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            target: None,
            input: None,
            out: None,
            max_new: 64,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainTargetArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-epoch JSONL log (default: OUT.log.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainTargetConfig {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    layers: usize,
    d_model: usize,
    heads: usize,
    d_ff: usize,
    max_seq: usize,
    vocab_size: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    warmup_ratio: f64,
    seed: u64,
    log: Option<PathBuf>,
}

impl Default for TrainTargetConfig {
    fn default() -> Self {
        let m = TargetConfig::default();
        let t = TargetTrainConfig::default();
        TrainTargetConfig {
            corpus: None,
            out: None,
            layers: m.n_layers,
            d_model: m.d_model,
            heads: m.n_heads,
            d_ff: m.d_ff,
            max_seq: m.max_seq,
            vocab_size: m.vocab.size,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.optimizer.lr,
            warmup_ratio: t.warmup_ratio,
            seed: t.seed,
            log: None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainDraftArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    n_feat: Option<usize>,
    /// Anchors sampled per sequence and epoch.
    #[arg(long)]
    anchors: Option<usize>,
    /// Slot-weight decay rate (defaults: 7 for B=16, 5 for B=10, 4 for B=8).
    #[arg(long)]
    decay_gamma: Option<f64>,
    #[arg(long, value_parser = ["online", "offline"])]
    feature_mode: Option<String>,
    /// Feature cache file for offline mode (default: OUT.features).
    #[arg(long)]
    feature_cache: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out tail of the corpus used for the per-epoch acceptance probe.
    #[arg(long)]
    val_count: Option<usize>,
    /// Train without target context features.
    #[arg(long)]
    no_conditioning: bool,
    /// Fuse raw tap features, skipping per-tap RMS normalisation.
    #[arg(long)]
    raw_taps: bool,
    /// Per-epoch JSONL log (default: OUT.log.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write paired decayed/uniform-weight training curves here (CSV).
    #[arg(long)]
    decay_ablation: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainDraftConfig {
    corpus: Option<PathBuf>,
    target: Option<PathBuf>,
    out: Option<PathBuf>,
    block_size: usize,
    layers: usize,
    n_feat: usize,
    anchors: usize,
    decay_gamma: Option<f64>,
    feature_mode: FeatureMode,
    feature_cache: Option<PathBuf>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    val_count: usize,
    no_conditioning: bool,
    #[serde(default)]
    raw_taps: bool,
    log: Option<PathBuf>,
    decay_ablation: Option<PathBuf>,
}

impl Default for TrainDraftConfig {
    fn default() -> Self {
        let t = TrainConfig::for_block_size(16).expect("block size 16 has a decay default");
        TrainDraftConfig {
            corpus: None,
            target: None,
            out: None,
            block_size: 16,
            layers: 5,
            n_feat: 5,
            anchors: t.anchors_per_seq,
            decay_gamma: None,
            feature_mode: FeatureMode::Online,
            feature_cache: None,
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            seed: 0,
            val_count: t.val_count,
            no_conditioning: false,
            raw_taps: false,
            log: None,
            decay_ablation: None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    draft: Option<PathBuf>,
    /// JSONL corpus whose prompts are decoded.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// Inference block size (default: the drafter's training block size).
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Drafter sampling temperature (default: --temperature).
    #[arg(long)]
    draft_temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Decoded outputs as JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Require an unconditioned drafter.
    #[arg(long)]
    no_conditioning: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct DecodeCliConfig {
    target: Option<PathBuf>,
    draft: Option<PathBuf>,
    prompt_file: Option<PathBuf>,
    block_size: Option<usize>,
    temperature: f64,
    draft_temperature: Option<f64>,
    seed: u64,
    max_new: Option<usize>,
    metrics_out: Option<PathBuf>,
    out: Option<PathBuf>,
    no_conditioning: bool,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<u64>,
    /// JSONL prompts (default: held-out copy_repeat and modular_chain prompts).
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    prompt_count: Option<usize>,
    /// Only benchmark unconditioned drafters.
    #[arg(long)]
    no_conditioning: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchCliConfig {
    matrix: Option<PathBuf>,
    out: Option<PathBuf>,
    seeds: u64,
    prompts: Option<PathBuf>,
    prompt_count: usize,
    no_conditioning: bool,
}

impl Default for BenchCliConfig {
    fn default() -> Self {
        BenchCliConfig {
            matrix: None,
            out: None,
            seeds: 3,
            prompts: None,
            prompt_count: 20,
            no_conditioning: false,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Bench report directory.
    #[arg(long = "in")]
    #[serde(rename = "input")]
    input: Option<PathBuf>,
    /// Markdown output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ReportConfig {
    #[serde(alias = "in")]
    input: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SelftestArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Directory for the self-test artifacts (default: a fresh temp dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct SelftestConfig {
    out: Option<PathBuf>,
}

/// Failure of a subcommand, carrying its exit status.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn log(event: &str, fields: Value) {
    let mut obj = Map::new();
    obj.insert("event".into(), event.into());
    if let Value::Object(m) = fields {
        obj.extend(m);
    }
    eprintln!("{}", Value::Object(obj));
}

fn strip_unset(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, x)| !x.is_null() && *x != Value::Bool(false))
                .collect(),
        ),
        other => other,
    }
}

/// Defaults, overlaid by the config file (or a manifest's `config`), then by flags.
fn resolve<C: Default + Serialize + DeserializeOwned>(
    file: Option<&Path>,
    flags: &impl Serialize,
) -> CliResult<C> {
    let mut merged = match serde_json::to_value(C::default()).map_err(Error::from)? {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v: Value = serde_json::from_str(&text).map_err(Error::from)?;
        if v.get("subcommand").is_some() {
            v = v.get("config").cloned().unwrap_or(Value::Null);
        }
        match v {
            Value::Object(m) => merged.extend(m),
            _ => {
                return Err(Failure::Usage(format!(
                    "{} does not hold a config object",
                    path.display()
                )))
            }
        }
    }
    if let Value::Object(m) = strip_unset(serde_json::to_value(flags).map_err(Error::from)?) {
        merged.extend(m);
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Failure::Usage(format!("invalid configuration: {e}")))
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone()
        .ok_or_else(|| Failure::Usage(format!("missing required --{flag}")))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_target(path: &Path) -> Result<TargetModel<f32>> {
    TargetModel::from_checkpoint(&Checkpoint::load(path)?.0)
}

fn write_manifest(m: &RunManifest, artifact: &Path) -> Result<()> {
    let p = m.write_for(artifact)?;
    log("manifest", json!({ "path": p }));
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let c: GenDataConfig = resolve(a.config.as_deref(), &a)?;
    let task: TaskKind = required(&c.task, "task")?
        .parse()
        .map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let out = required(&c.out, "out")?;
    let count = required(&c.count, "count")?;
    let vocab = Vocab::new(c.vocab_size)?;
    let samples = gen_task(&vocab, task, c.seed, count)?;
    write_jsonl(&out, &samples)?;
    log(
        "gen_data",
        json!({ "task": task.as_str(), "count": samples.len(), "out": out }),
    );
    let mut m = RunManifest::new(
        "gen-data",
        serde_json::to_value(&c).map_err(Error::from)?,
        Some(c.seed),
    );
    m.corpus("out", &out)?.output(&out)?;
    write_manifest(&m, &out)?;
    Ok(())
}

fn distill(a: DistillArgs) -> CliResult<()> {
    let c: DistillConfig = resolve(a.config.as_deref(), &a)?;
    let (tp, input, out) = (
        required(&c.target, "target")?,
        required(&c.input, "in")?,
        required(&c.out, "out")?,
    );
    let target = load_target(&tp)?;
    let samples = read_jsonl(&input, &target.config.vocab)?;
    let distilled = distill_responses(&samples, &target, c.max_new)?;
    write_jsonl(&out, &distilled)?;
    log(
        "distill",
        json!({ "read": samples.len(), "kept": distilled.len(), "out": out }),
    );
    let mut m = RunManifest::new(
        "distill",
        serde_json::to_value(&c).map_err(Error::from)?,
        None,
    );
    m.checkpoint("target", &tp)?
        .corpus("in", &input)?
        .corpus("out", &out)?
        .output(&out)?;
    write_manifest(&m, &out)?;
    Ok(())
}

fn train_target_cmd(a: TrainTargetArgs) -> CliResult<()> {
    let c: TrainTargetConfig = resolve(a.config.as_deref(), &a)?;
    let (corpus_path, out) = (required(&c.corpus, "corpus")?, required(&c.out, "out")?);
    let vocab = Vocab::new(c.vocab_size)?;
    let corpus = read_jsonl(&corpus_path, &vocab)?;
    let cfg = TargetConfig {
        n_layers: c.layers,
        d_model: c.d_model,
        n_heads: c.heads,
        d_ff: c.d_ff,
        vocab,
        max_seq: c.max_seq,
        ..TargetConfig::default()
    };
    let mut model = TargetModel::<f32>::new(cfg, c.seed)?;
    let tc = TargetTrainConfig {
        epochs: c.epochs,
        batch_size: c.batch_size,
        warmup_ratio: c.warmup_ratio,
        optimizer: AdamWConfig {
            lr: c.lr,
            ..TargetTrainConfig::default().optimizer
        },
        seed: c.seed,
    };
    let log_path = c
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&out, ".log.jsonl"));
    let mut lines = Vec::new();
    let report = train_target(&mut model, &corpus, &tc, |e| {
        log("target_epoch", serde_json::to_value(e).unwrap_or_default());
        lines.push(serde_json::to_string(e).unwrap_or_default());
    })?;
    log(
        "target_trained",
        json!({ "initial_loss": report.initial_loss }),
    );
    model.to_checkpoint()?.save(&out)?;
    std::fs::write(&log_path, lines.join("\n") + "\n").map_err(|e| Error::io(&log_path, e))?;
    let mut m = RunManifest::new(
        "train-target",
        serde_json::to_value(&c).map_err(Error::from)?,
        Some(c.seed),
    );
    m.corpus("corpus", &corpus_path)?
        .checkpoint("out", &out)?
        .output(&out)?
        .output(&log_path)?;
    write_manifest(&m, &out)?;
    Ok(())
}

fn train_draft(a: TrainDraftArgs) -> CliResult<()> {
    let c: TrainDraftConfig = resolve(a.config.as_deref(), &a)?;
    let (corpus_path, tp, out) = (
        required(&c.corpus, "corpus")?,
        required(&c.target, "target")?,
        required(&c.out, "out")?,
    );
    let target = load_target(&tp)?;
    let corpus = read_jsonl(&corpus_path, &target.config.vocab)?;
    let mut dcfg = DraftConfig::for_target(
        &target.config,
        c.layers,
        c.block_size,
        c.n_feat,
        !c.no_conditioning,
    )?;
    dcfg.tap_norm &= !c.raw_taps;
    let mut tc = match c.decay_gamma {
        Some(g) => TrainConfig {
            decay_gamma: g,
            ..TrainConfig::for_block_size(16)?
        },
        None => TrainConfig::for_block_size(c.block_size)?,
    };
    tc.block_size = c.block_size;
    tc.anchors_per_seq = c.anchors;
    tc.feature_mode = c.feature_mode;
    tc.epochs = c.epochs;
    tc.lr = c.lr;
    tc.batch_size = c.batch_size;
    tc.seed = c.seed;
    tc.val_count = c.val_count;
    let initial = DraftModel::new(dcfg, &target, c.seed)?;

    let cache_path = c
        .feature_cache
        .clone()
        .unwrap_or_else(|| with_suffix(&out, ".features"));
    let cache = if c.feature_mode == FeatureMode::Offline && !c.no_conditioning {
        if cache_path.exists() {
            let fc = FeatureCache::load(&cache_path)?;
            fc.check(&target, &initial.config.taps(), &corpus)?;
            log(
                "feature_cache",
                json!({ "path": cache_path, "reused": true }),
            );
            Some(fc)
        } else {
            let fc = FeatureCache::build(&target, &corpus, &initial.config.taps())?;
            fc.save(&cache_path)?;
            log(
                "feature_cache",
                json!({ "path": cache_path, "reused": false }),
            );
            Some(fc)
        }
    } else {
        None
    };
    let source = cache
        .as_ref()
        .map_or(FeatureSource::Online, FeatureSource::Offline);

    let mut drafter = initial.clone();
    let log_path = c
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&out, ".log.jsonl"));
    let mut lines = Vec::new();
    let report = train_drafter(&mut drafter, &target, &corpus, &tc, source, |e| {
        log("draft_epoch", serde_json::to_value(e).unwrap_or_default());
        lines.push(json!({ "epoch": e.epoch, "loss": e.loss, "val_tau": e.val_tau }).to_string());
    })?;
    log(
        "draft_trained",
        json!({ "train_sequences": report.train_sequences, "val_sequences": report.val_sequences }),
    );
    drafter.to_checkpoint()?.save(&out)?;
    std::fs::write(&log_path, lines.join("\n") + "\n").map_err(|e| Error::io(&log_path, e))?;

    let mut m = RunManifest::new(
        "train-draft",
        serde_json::to_value(&c).map_err(Error::from)?,
        Some(c.seed),
    );
    m.corpus("corpus", &corpus_path)?
        .checkpoint("target", &tp)?
        .checkpoint("out", &out)?
        .output(&out)?
        .output(&log_path)?;
    if let Some(path) = &c.decay_ablation {
        let curves = loss_decay_ablation(&initial, &target, &corpus, &tc, source)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
            what: "csv",
            detail: e.to_string(),
        })?;
        w.write_record(["weighting", "epoch", "loss", "val_tau"])
            .map_err(|e| Error::Format {
                what: "csv",
                detail: e.to_string(),
            })?;
        for (name, run) in [("decayed", &curves.decayed), ("uniform", &curves.uniform)] {
            for e in run {
                w.write_record([
                    name.to_string(),
                    e.epoch.to_string(),
                    e.loss.to_string(),
                    e.val_tau.to_string(),
                ])
                .map_err(|e| Error::Format {
                    what: "csv",
                    detail: e.to_string(),
                })?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        m.output(path)?;
    }
    write_manifest(&m, &out)?;
    Ok(())
}

/// Sums per-prompt metrics into one record with the documented schema.
fn aggregate(per_prompt: &[DecodeMetrics]) -> Value {
    let cycles: usize = per_prompt.iter().map(|m| m.cycles).sum();
    let cycle_tokens: usize = per_prompt.iter().map(|m| m.cycle_tokens).sum();
    let width = per_prompt
        .iter()
        .map(|m| m.tau_histogram.len())
        .max()
        .unwrap_or(0);
    let mut hist = vec![0u64; width];
    for m in per_prompt {
        for (h, c) in hist.iter_mut().zip(&m.tau_histogram) {
            *h += c;
        }
    }
    let sum = |f: fn(&DecodeMetrics) -> f64| per_prompt.iter().map(f).sum::<f64>();
    json!({
        "cycles": cycles,
        "mean_tau": if cycles == 0 { 0.0 } else { cycle_tokens as f64 / cycles as f64 },
        "tau_histogram": hist,
        "phase_ms": { "draft": sum(|m| m.phase_ms.draft), "verify": sum(|m| m.phase_ms.verify), "fuse": sum(|m| m.phase_ms.fuse) },
        "tokens_emitted": per_prompt.iter().map(|m| m.tokens_emitted).sum::<usize>(),
        "draft_forward_count": per_prompt.iter().map(|m| m.draft_forward_count).sum::<u64>(),
        "verify_forward_count": per_prompt.iter().map(|m| m.verify_forward_count).sum::<u64>(),
        "per_prompt": per_prompt,
    })
}

fn decode(a: DecodeArgs) -> CliResult<()> {
    let c: DecodeCliConfig = resolve(a.config.as_deref(), &a)?;
    let (tp, dp, pp) = (
        required(&c.target, "target")?,
        required(&c.draft, "draft")?,
        required(&c.prompt_file, "prompt-file")?,
    );
    let target = load_target(&tp)?;
    let model = DraftModel::from_checkpoint(&Checkpoint::load(&dp)?.0, &target)?;
    if c.no_conditioning && model.config.conditioning {
        return Err(Failure::Usage(
            "--no-conditioning given but the drafter is conditioned".into(),
        ));
    }
    let prompts = read_jsonl(&pp, &target.config.vocab)?;
    let cfg = DecodeConfig {
        block_size: c.block_size.unwrap_or(model.config.block_size),
        temperature: c.temperature,
        draft_temperature: c.draft_temperature,
        seed: c.seed,
        max_new: c.max_new.unwrap_or(DecodeConfig::default().max_new),
        ..DecodeConfig::default()
    };
    let mut d = ModelDrafter::new(&model, &target)?;
    let mut outputs = Vec::with_capacity(prompts.len());
    let mut metrics = Vec::with_capacity(prompts.len());
    for p in &prompts {
        d.reset();
        let (toks, m) = spec_decode(&p.prompt, &target, &mut d, &cfg)?;
        outputs.push(Sample {
            prompt: p.prompt.clone(),
            response: toks,
            task: p.task.clone(),
        });
        metrics.push(m);
    }
    let summary = aggregate(&metrics);
    log(
        "decode",
        json!({ "prompts": prompts.len(), "cycles": summary["cycles"], "mean_tau": summary["mean_tau"] }),
    );
    let mut m = RunManifest::new(
        "decode",
        serde_json::to_value(&c).map_err(Error::from)?,
        Some(c.seed),
    );
    m.checkpoint("target", &tp)?
        .checkpoint("draft", &dp)?
        .corpus("prompts", &pp)?;
    if let Some(path) = &c.metrics_out {
        std::fs::write(
            path,
            serde_json::to_vec_pretty(&summary).map_err(Error::from)?,
        )
        .map_err(|e| Error::io(path, e))?;
    }
    match &c.out {
        Some(out) => {
            write_jsonl(out, &outputs)?;
            m.output(out)?;
            write_manifest(&m, out)?;
        }
        None => {
            for o in &outputs {
                println!("{}", serde_json::to_string(o).map_err(Error::from)?);
            }
            if let Some(path) = &c.metrics_out {
                write_manifest(&m, path)?;
            }
        }
    }
    Ok(())
}

/// Held-out prompts for benchmarking: the two tasks with fully determined
/// continuations, from a seed no training command uses by default.
pub fn default_bench_prompts(vocab: &Vocab, count: usize) -> Result<Vec<Sample>> {
    let half = count.div_ceil(2).max(1);
    let mut p = gen_task(vocab, TaskKind::CopyRepeat, 1_000_003, half)?;
    p.extend(gen_task(vocab, TaskKind::ModularChain, 1_000_003, half)?);
    p.truncate(count.max(1));
    Ok(p)
}

fn bench(a: BenchArgs) -> CliResult<()> {
    let c: BenchCliConfig = resolve(a.config.as_deref(), &a)?;
    let (mp, out) = (required(&c.matrix, "matrix")?, required(&c.out, "out")?);
    let mut matrix = BenchMatrix::load(&mp)?;
    if c.no_conditioning {
        matrix.conditioning = Some(false);
    }
    let target = load_target(&matrix.target)?;
    let prompts = match &c.prompts {
        Some(p) => read_jsonl(p, &target.config.vocab)?,
        None => default_bench_prompts(&target.config.vocab, c.prompt_count)?,
    };
    let report = run_suite(&matrix, &prompts, c.seeds)?;
    report.write(&out)?;
    log(
        "bench",
        json!({ "rows": report.rows.len(), "skips": report.skips.len(), "out": out }),
    );
    let mut m = RunManifest::new(
        "bench",
        serde_json::to_value(&c).map_err(Error::from)?,
        None,
    );
    m.checkpoint("target", &matrix.target)?;
    for d in &matrix.drafters {
        if d.checkpoint.exists() {
            m.checkpoint(&d.id, &d.checkpoint)?;
        }
    }
    if let Some(p) = &c.prompts {
        m.corpus("prompts", p)?;
    }
    m.output(out.join("taus.csv"))?;
    write_manifest(&m, &out)?;
    Ok(())
}

fn report(a: ReportArgs) -> CliResult<()> {
    let c: ReportConfig = resolve(a.config.as_deref(), &a)?;
    let md = render_markdown(required(&c.input, "in")?)?;
    match &c.out {
        Some(p) => std::fs::write(p, md).map_err(|e| Error::io(p, e))?,
        None => print!("{md}"),
    }
    Ok(())
}

fn selftest(a: SelftestArgs) -> CliResult<()> {
    let c: SelftestConfig = resolve(a.config.as_deref(), &a)?;
    let out = c.out.clone().unwrap_or_else(|| {
        std::env::temp_dir().join(format!("blockspec-selftest-{}", std::process::id()))
    });
    let r = crate::selftest::run(&out)?;
    println!("{}", serde_json::to_string_pretty(&r).map_err(Error::from)?);
    if !r.passed() {
        return Err(Failure::Run(Error::contract(format!(
            "self-test failed: {} lossless mismatches, {} mask violations",
            r.lossless_failures.len(),
            r.mask_violations
        ))));
    }
    log("selftest", json!({ "passed": true, "out": out }));
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit status: 0 on success, 1 on usage or configuration errors, 2 on
/// contract, numeric, hash or I/O failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Distill(a) => distill(a),
        Command::TrainTarget(a) => train_target_cmd(a),
        Command::TrainDraft(a) => train_draft(a),
        Command::Decode(a) => decode(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report(a),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            log("error", json!({ "kind": "usage", "message": msg }));
            1
        }
        Err(Failure::Run(Error::Config(msg))) => {
            log("error", json!({ "kind": "config", "message": msg }));
            1
        }
        Err(Failure::Run(e)) => {
            log(
                "error",
                json!({ "kind": "runtime", "message": e.to_string() }),
            );
            2
        }
    }
}
