//! End-to-end self check on tiny models: train, distill, decode losslessly,
//! and verify the training mask cell by cell. Every artifact it writes is a
//! pure function of the fixed seeds.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{distill_responses, gen_task, write_jsonl, Sample, TaskKind, Vocab};
use crate::engine::{spec_decode, DecodeConfig, Drafter, ModelDrafter};
use crate::error::{Error, Result};
use crate::manifest::file_hash;
use crate::model::{
    train_target, DraftConfig, DraftModel, TargetConfig, TargetModel, TargetTrainConfig,
};
use crate::rng::{keyed_rng, Domain};
use crate::trainer::{build_block_mask, train_drafter, FeatureSource, TrainConfig};

const SEED: u64 = 20_240_601;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub lossless_prompts: usize,
    pub lossless_failures: Vec<String>,
    pub mask_plans: usize,
    pub mask_violations: usize,
    pub sampled_runs: usize,
    pub trained_mean_tau: f64,
    pub artifacts: Vec<(String, String)>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.lossless_failures.is_empty() && self.mask_violations == 0
    }
}

/// Counts cells of the block mask that disagree with the visibility rule:
/// block `j` sees context columns before its anchor and its own block.
pub fn mask_rule_violations(anchors: &[usize], block_size: usize, context_len: usize) -> usize {
    let m = build_block_mask(anchors, block_size, context_len);
    let mut bad = 0;
    for q in 0..anchors.len() * block_size {
        let j = q / block_size;
        for k in 0..m.n_keys() {
            let expected = if k < context_len {
                k < anchors[j]
            } else {
                (k - context_len) / block_size == j
            };
            bad += usize::from(m.allows(q, k) != expected);
        }
    }
    bad
}

/// Tiny target and drafters trained on a fixed mixture corpus. Small enough
/// to build in seconds, trained enough that the drafter accepts multi-token
/// blocks.
pub struct TinySetup {
    pub corpus: Vec<Sample>,
    pub distilled: Vec<Sample>,
    pub target: TargetModel<f32>,
    pub untrained: DraftModel<f32>,
    pub trained: DraftModel<f32>,
    pub unconditioned: DraftModel<f32>,
    /// Prompts from a seed the corpus does not use.
    pub held_out: Vec<Sample>,
}

pub fn tiny_setup() -> Result<TinySetup> {
    let vocab = Vocab::default();
    let corpus = gen_task(&vocab, TaskKind::Mixture, SEED, 400)?;
    let tcfg = TargetConfig {
        n_layers: 5,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab,
        max_seq: 128,
        rope_theta: 10_000.0,
    };
    let mut target = TargetModel::<f32>::new(tcfg, SEED)?;
    train_target(
        &mut target,
        &corpus,
        &TargetTrainConfig {
            epochs: 6,
            batch_size: 8,
            seed: SEED,
            ..TargetTrainConfig::default()
        },
        |_| {},
    )?;
    let distilled = distill_responses(&corpus, &target, 40)?;

    let mut train_cfg = TrainConfig::for_block_size(8)?;
    train_cfg.epochs = 4;
    train_cfg.anchors_per_seq = 8;
    train_cfg.seed = SEED;
    train_cfg.val_count = 4;
    let untrained = DraftModel::new(
        DraftConfig::for_target(&target.config, 1, 8, 2, true)?,
        &target,
        SEED,
    )?;
    let mut trained = untrained.clone();
    train_drafter(
        &mut trained,
        &target,
        &distilled,
        &train_cfg,
        FeatureSource::Online,
        |_| {},
    )?;
    let mut unconditioned = DraftModel::new(
        DraftConfig::for_target(&target.config, 1, 8, 2, false)?,
        &target,
        SEED,
    )?;
    train_drafter(
        &mut unconditioned,
        &target,
        &distilled,
        &train_cfg,
        FeatureSource::Online,
        |_| {},
    )?;
    let held_out = gen_task(&vocab, TaskKind::Mixture, SEED + 1, 24)?;
    Ok(TinySetup {
        corpus,
        distilled,
        target,
        untrained,
        trained,
        unconditioned,
        held_out,
    })
}

/// Runs the self check, writing artifacts into `out`.
pub fn run(out: &Path) -> Result<SelftestReport> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let TinySetup {
        corpus,
        distilled,
        target,
        untrained,
        trained,
        unconditioned: nocond,
        held_out: prompts,
    } = tiny_setup()?;
    let cfg = DecodeConfig {
        block_size: 8,
        max_new: 40,
        ..DecodeConfig::default()
    };
    let mut failures = Vec::new();
    let mut outputs = Vec::new();
    let (mut cycles, mut cycle_tokens) = (0, 0);
    for (name, model) in [
        ("trained", &trained),
        ("untrained", &untrained),
        ("unconditioned", &nocond),
    ] {
        let mut d = ModelDrafter::new(model, &target)?;
        for (i, p) in prompts.iter().enumerate() {
            d.reset();
            let (spec, m) = spec_decode(&p.prompt, &target, &mut d as &mut dyn Drafter<f32>, &cfg)?;
            let ar = target.ar_decode(&p.prompt, cfg.max_new, 0.0, 0)?;
            if spec != ar {
                failures.push(format!("{name} drafter, prompt {i}"));
            }
            if name == "trained" {
                cycles += m.cycles;
                cycle_tokens += m.cycle_tokens;
            }
            outputs.push(Sample {
                prompt: p.prompt.clone(),
                response: spec,
                task: name.into(),
            });
        }
    }
    // Sampled decoding must run cleanly; its outputs are keyed by seed.
    let mut d = ModelDrafter::new(&trained, &target)?;
    for (i, p) in prompts.iter().enumerate() {
        d.reset();
        let scfg = DecodeConfig {
            temperature: 1.0,
            seed: i as u64,
            ..cfg.clone()
        };
        let (spec, _) = spec_decode(&p.prompt, &target, &mut d, &scfg)?;
        outputs.push(Sample {
            prompt: p.prompt.clone(),
            response: spec,
            task: "sampled".into(),
        });
    }

    let mut rng = keyed_rng(SEED, Domain::Anchors, &[u64::MAX]);
    let plans = 1000;
    let mut violations = 0;
    for _ in 0..plans {
        let b = rng.gen_range(2..=8usize);
        let ctx = rng.gen_range(1..=64usize);
        let k = rng.gen_range(1..=4usize);
        let anchors: Vec<usize> = (0..k).map(|_| rng.gen_range(0..ctx)).collect();
        violations += mask_rule_violations(&anchors, b, ctx);
    }

    write_jsonl(out.join("corpus.jsonl"), &corpus)?;
    write_jsonl(out.join("distilled.jsonl"), &distilled)?;
    target.to_checkpoint()?.save(out.join("target.ckpt"))?;
    trained.to_checkpoint()?.save(out.join("draft.ckpt"))?;
    nocond
        .to_checkpoint()?
        .save(out.join("draft_nocond.ckpt"))?;
    write_jsonl(out.join("outputs.jsonl"), &outputs)?;
    let files = [
        "corpus.jsonl",
        "distilled.jsonl",
        "target.ckpt",
        "draft.ckpt",
        "draft_nocond.ckpt",
        "outputs.jsonl",
    ];
    let artifacts = files
        .iter()
        .map(|f| Ok((f.to_string(), file_hash(out.join(f))?)))
        .collect::<Result<_>>()?;

    Ok(SelftestReport {
        lossless_prompts: prompts.len() * 3,
        lossless_failures: failures,
        mask_plans: plans,
        mask_violations: violations,
        sampled_runs: prompts.len(),
        trained_mean_tau: if cycles == 0 {
            0.0
        } else {
            cycle_tokens as f64 / cycles as f64
        },
        artifacts,
    })
}
