//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1, 4, 5 and 6 use the reference models (12-layer d128 target,
//! 5-layer B=8 drafters, 5k mixture samples). Training them takes most of an
//! hour on one core, so they are cached under the cargo target directory
//! together with the recipe that produced them; a changed recipe retrains.
//! `BLOCKSPEC_ACCEPTANCE_DIR` overrides the cache location.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use blockspec::bench::{draft_cost_curve, measure_speedup, timed_ar_decode, Timer};
use blockspec::checkpoint::Checkpoint;
use blockspec::corpus::{distill_responses, gen_task, Sample, TaskKind, TokenId, Vocab};
use blockspec::engine::{spec_decode, DecodeConfig, Drafter, ModelDrafter, OracleDrafter};
use blockspec::model::{
    train_target, DraftConfig, DraftModel, TargetConfig, TargetModel, TargetTrainConfig,
};
use blockspec::selftest::{tiny_setup, TinySetup};
use blockspec::trainer::{
    build_block_mask, default_decay_gamma, loss_weights, probe_tau, train_drafter, FeatureSource,
    TrainConfig,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use support::gradients::{drafter_report_f32, drafter_report_f64, mlp_reports, op_errors};

type Check = std::result::Result<String, String>;

fn pass_if(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- reference models ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Recipe {
    version: String,
    corpus_task: String,
    corpus_seed: u64,
    corpus_count: usize,
    target: TargetConfig,
    target_seed: u64,
    target_train: TargetTrainConfig,
    distill_max_new: usize,
    /// Drafter layers, block size, tap count, init seed.
    drafter: (usize, usize, usize, u64),
    tap_norm: bool,
    draft_train: TrainConfig,
}

fn recipe() -> Recipe {
    Recipe {
        version: env!("CARGO_PKG_VERSION").into(),
        corpus_task: "mixture".into(),
        corpus_seed: 0,
        corpus_count: 5000,
        target: TargetConfig::default(),
        target_seed: 0,
        target_train: TargetTrainConfig::default(),
        distill_max_new: 64,
        drafter: (5, 8, 5, 1),
        tap_norm: true,
        draft_train: TrainConfig::for_block_size(8).unwrap(),
    }
}

struct Reference {
    target: TargetModel<f32>,
    untrained: DraftModel<f32>,
    trained: DraftModel<f32>,
    unconditioned: DraftModel<f32>,
    /// Wall-clock seconds of the two drafter training runs, when trained here.
    train_secs: Option<(f64, f64)>,
}

fn cache_dir() -> PathBuf {
    std::env::var_os("BLOCKSPEC_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn untrained_drafter(r: &Recipe, target: &TargetModel<f32>, conditioning: bool) -> DraftModel<f32> {
    let (layers, b, n_feat, seed) = r.drafter;
    let mut cfg = DraftConfig::for_target(&target.config, layers, b, n_feat, conditioning).unwrap();
    cfg.tap_norm = r.tap_norm && conditioning;
    DraftModel::new(cfg, target, seed).unwrap()
}

fn reference() -> Reference {
    let r = recipe();
    let dir = cache_dir();
    let paths = [
        "target.ckpt",
        "draft_conditioned.ckpt",
        "draft_unconditioned.ckpt",
    ]
    .map(|f| dir.join(f));
    let recipe_path = dir.join("recipe.json");
    let cached = std::fs::read_to_string(&recipe_path)
        .ok()
        .and_then(|s| serde_json::from_str::<Recipe>(&s).ok())
        .is_some_and(|c| c == r)
        && paths.iter().all(|p| p.exists());
    if cached {
        eprintln!("reference models: cached in {}", dir.display());
        let target = TargetModel::from_checkpoint(&Checkpoint::load(&paths[0]).unwrap().0).unwrap();
        let load = |p: &Path| {
            DraftModel::from_checkpoint(&Checkpoint::load(p).unwrap().0, &target).unwrap()
        };
        let (trained, unconditioned) = (load(&paths[1]), load(&paths[2]));
        let untrained = untrained_drafter(&r, &target, true);
        return Reference {
            target,
            untrained,
            trained,
            unconditioned,
            train_secs: None,
        };
    }

    eprintln!(
        "reference models: training into {} (about an hour on one core)",
        dir.display()
    );
    std::fs::create_dir_all(&dir).unwrap();
    let _ = std::fs::remove_file(&recipe_path);
    let t0 = Instant::now();
    let corpus = gen_task(
        &Vocab::default(),
        TaskKind::Mixture,
        r.corpus_seed,
        r.corpus_count,
    )
    .unwrap();
    let mut target = TargetModel::<f32>::new(r.target.clone(), r.target_seed).unwrap();
    train_target(&mut target, &corpus, &r.target_train, |e| {
        eprintln!(
            "  target epoch {} loss {:.4} [{:.0?}]",
            e.epoch,
            e.loss,
            t0.elapsed()
        )
    })
    .unwrap();
    target.to_checkpoint().unwrap().save(&paths[0]).unwrap();
    let distilled = distill_responses(&corpus, &target, r.distill_max_new).unwrap();
    eprintln!(
        "  distilled {} samples [{:.0?}]",
        distilled.len(),
        t0.elapsed()
    );

    let mut secs = [0.0; 2];
    let mut models = Vec::new();
    for (i, conditioning) in [true, false].into_iter().enumerate() {
        let mut d = untrained_drafter(&r, &target, conditioning);
        let t = Instant::now();
        train_drafter(&mut d, &target, &distilled, &r.draft_train, FeatureSource::Online, |e| {
            eprintln!(
                "  drafter (conditioning {conditioning}) epoch {} loss {:.4} val_tau {:.3} [{:.0?}]",
                e.epoch,
                e.loss,
                e.val_tau,
                t0.elapsed()
            )
        })
        .unwrap();
        secs[i] = t.elapsed().as_secs_f64();
        d.to_checkpoint().unwrap().save(&paths[1 + i]).unwrap();
        models.push(d);
    }
    std::fs::write(&recipe_path, serde_json::to_string_pretty(&r).unwrap()).unwrap();
    let unconditioned = models.pop().unwrap();
    let trained = models.pop().unwrap();
    let untrained = untrained_drafter(&r, &target, true);
    Reference {
        target,
        untrained,
        trained,
        unconditioned,
        train_secs: Some((secs[0], secs[1])),
    }
}

/// Held-out copy_repeat and modular_chain prompts from seeds the training
/// corpus does not use.
fn held_out() -> Vec<Sample> {
    let v = Vocab::default();
    let mut s = gen_task(&v, TaskKind::CopyRepeat, 777, 30).unwrap();
    s.extend(gen_task(&v, TaskKind::ModularChain, 777, 30).unwrap());
    s
}

// ---- criteria ----

fn greedy_lossless(r: &Reference) -> Check {
    let prompts = gen_task(&Vocab::default(), TaskKind::Mixture, 4242, 100).unwrap();
    let cfg = DecodeConfig {
        block_size: 8,
        max_new: 64,
        ..DecodeConfig::default()
    };
    let reference: Vec<Vec<TokenId>> = prompts
        .iter()
        .map(|s| r.target.ar_decode(&s.prompt, cfg.max_new, 0.0, 0).unwrap())
        .collect();
    let mut mismatches = Vec::new();
    for (name, model) in [
        ("trained", &r.trained),
        ("untrained", &r.untrained),
        ("unconditioned", &r.unconditioned),
    ] {
        let mut d = ModelDrafter::new(model, &r.target).unwrap();
        let bad = prompts
            .iter()
            .zip(&reference)
            .filter(|(s, ar)| {
                d.reset();
                spec_decode(&s.prompt, &r.target, &mut d, &cfg).unwrap().0 != **ar
            })
            .count();
        if bad > 0 {
            mismatches.push(format!("{name}: {bad}"));
        }
    }
    pass_if(
        mismatches.is_empty(),
        format!(
            "{} prompts x 3 drafters, mismatches: {}",
            prompts.len(),
            if mismatches.is_empty() {
                "none".into()
            } else {
                mismatches.join(", ")
            }
        ),
    )
}

/// Softmax at temperature 1 with the banned ids removed.
fn softmax_allowed(row: &[f32], banned: &[usize]) -> Vec<f64> {
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| !banned.contains(i))
        .map(|(_, &v)| f64::from(v))
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if banned.contains(&i) {
                0.0
            } else {
                (f64::from(v) - max).exp()
            }
        })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Exact law of the second emitted token: the prefill samples `x0` from the
/// target, then the first cycle emits `x1` given `x0`. Index `vocab` stands
/// for "stopped at x0 = EOS".
fn second_token_law(t: &TargetModel<f32>, prompt: &[TokenId]) -> Vec<f64> {
    let banned = t.banned();
    let v = t.config.vocab.size;
    let eos = t.config.vocab.eos();
    let mut cache = t.new_cache();
    let first = softmax_allowed(
        t.forward(prompt, &mut cache).unwrap().row(prompt.len() - 1),
        &banned,
    );
    let mut law = vec![0.0; v + 1];
    for (x0, &p0) in first.iter().enumerate() {
        if p0 == 0.0 {
            continue;
        }
        if x0 as TokenId == eos {
            law[v] += p0;
            continue;
        }
        let mut c = cache.clone();
        let next = softmax_allowed(t.forward(&[x0 as TokenId], &mut c).unwrap().row(0), &banned);
        for (x1, p1) in next.iter().enumerate() {
            law[x1] += p0 * p1;
        }
    }
    law
}

fn sampled_lossless(tiny: &TinySetup) -> Check {
    let t = &tiny.target;
    let v = t.config.vocab.size;
    if v > 64 {
        return Err(format!("vocab {v} exceeds 64"));
    }
    // The held-out prompt whose second-token law is most spread out, among
    // those whose sampling noise stays well below the threshold.
    let (prompt, law) = tiny.held_out[..8]
        .iter()
        .map(|s| (s.prompt.clone(), second_token_law(t, &s.prompt)))
        .filter(|(_, law)| law.iter().map(|p| p.sqrt()).sum::<f64>() <= 4.0)
        .max_by(|a, b| entropy(&a.1).total_cmp(&entropy(&b.1)))
        .ok_or("no usable prompt")?;
    let runs = 20_000u64;
    let mut counts = vec![0u64; v + 1];
    let mut first_cycle_rejections = 0;
    let mut d = ModelDrafter::new(&tiny.trained, t).unwrap();
    for seed in 0..runs {
        d.reset();
        // Budget 3 leaves one draft token in the first cycle, so the emitted
        // second token is either that draft accepted or a residual sample.
        let cfg = DecodeConfig {
            block_size: 8,
            temperature: 1.0,
            seed,
            max_new: 3,
            ..DecodeConfig::default()
        };
        let (out, m) = spec_decode(&prompt, t, &mut d, &cfg).unwrap();
        match out.get(1) {
            Some(&x1) => counts[x1 as usize] += 1,
            None => counts[v] += 1,
        }
        first_cycle_rejections += usize::from(m.cycle_taus.first() == Some(&1));
    }
    let tv = 0.5
        * counts
            .iter()
            .zip(&law)
            .map(|(&c, &p)| (c as f64 / runs as f64 - p).abs())
            .sum::<f64>();
    pass_if(
        tv < 0.02,
        format!(
            "TV {tv:.4} over {runs} runs, vocab {v}, T=1, law entropy {:.2} nats, first-cycle rejections {first_cycle_rejections}",
            entropy(&law)
        ),
    )
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

fn tau_accounting(tiny: &TinySetup) -> Check {
    let t = &tiny.target;
    let mut problems = Vec::new();
    let (mut oracle_cycles, mut model_cycles) = (0, 0);
    for (i, s) in tiny.held_out.iter().enumerate() {
        let reference = t.ar_decode(&s.prompt, 48, 0.0, 0).unwrap();
        for b in [4, 8, 16] {
            let cfg = DecodeConfig {
                block_size: b,
                max_new: 48,
                ..DecodeConfig::default()
            };
            let mut oracle = OracleDrafter::new(&s.prompt, &reference, t.config.vocab.eos());
            let (out, m) = spec_decode(&s.prompt, t, &mut oracle, &cfg).unwrap();
            let (last, full) = m.cycle_taus.split_last().ok_or("no cycles")?;
            // Only the final cycle may be cut short, by the budget or EOS.
            let remaining = out.len() - 1 - full.len() * b;
            if out != reference || full.iter().any(|&x| x != b) || *last != remaining {
                problems.push(format!("oracle prompt {i} B={b}"));
            }
            if m.draft_forward_count != m.cycles as u64 || m.verify_forward_count != m.cycles as u64
            {
                problems.push(format!("oracle forward counts prompt {i} B={b}"));
            }
            oracle_cycles += m.cycles;

            let mut d = ModelDrafter::new(&tiny.trained, t).unwrap();
            let (_, m) = spec_decode(&s.prompt, t, &mut d, &cfg).unwrap();
            if m.cycle_taus.iter().any(|&x| !(1..=b).contains(&x)) {
                problems.push(format!("tau out of range prompt {i} B={b}"));
            }
            if m.draft_forward_count != m.cycles as u64
                || m.verify_forward_count != m.cycles as u64
                || d.forward_count() != m.cycles as u64
            {
                problems.push(format!("drafter forward counts prompt {i} B={b}"));
            }
            model_cycles += m.cycles;
        }
    }
    pass_if(
        problems.is_empty(),
        format!(
            "{oracle_cycles} oracle cycles at tau = B, {model_cycles} drafter cycles in [1, B]; {}",
            if problems.is_empty() {
                "no violations".into()
            } else {
                problems.join(", ")
            }
        ),
    )
}

fn conditioning_gain(r: &Reference, taus: &Taus) -> Check {
    let gain = taus.trained / taus.unconditioned;
    let over_untrained = taus.trained / taus.untrained;
    let time = match r.train_secs {
        Some((a, b)) => format!(", training {:.1} min", (a + b) / 60.0),
        None => ", cached models".into(),
    };
    pass_if(
        gain >= 1.25 && over_untrained >= 2.0,
        format!(
            "tau conditioned {:.3}, unconditioned {:.3} (x{gain:.2}, need 1.25), untrained {:.3} (x{over_untrained:.2}, need 2), ceiling {:.3}{time}",
            taus.trained, taus.unconditioned, taus.untrained, taus.ceiling
        ),
    )
}

struct Taus {
    trained: f64,
    untrained: f64,
    unconditioned: f64,
    /// Largest mean tau any drafter can reach on the same prompts: every
    /// cycle full except the last of each response.
    ceiling: f64,
}

fn tau_ceiling(target: &TargetModel<f32>, prompts: &[Sample], b: usize, max_new: usize) -> f64 {
    let (mut tokens, mut cycles) = (0, 0);
    for s in prompts {
        let n = target.ar_decode(&s.prompt, max_new, 0.0, 0).unwrap().len() - 1;
        tokens += n;
        cycles += n.div_ceil(b);
    }
    tokens as f64 / cycles as f64
}

fn baseline_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("baseline.json")
}

/// Half the largest mean acceptance length a B=8 drafter can reach.
const DESK_TAU: f64 = 4.0;

fn desk_target(taus: &Taus) -> Check {
    let recorded = std::fs::read_to_string(baseline_path())
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|b| b["reference_mean_tau"].as_f64())
        .map_or("no baseline recorded".into(), |t| {
            format!("baseline.json records {t:.3}")
        });
    pass_if(
        taus.trained >= DESK_TAU,
        format!(
            "tau {:.3} on held-out copy_repeat/modular_chain (need {DESK_TAU}); {recorded}",
            taus.trained
        ),
    )
}

fn draft_cost(r: &Reference, held: &[Sample]) -> Check {
    // Millisecond calls on a shared core: 5 samples leave the median ratio
    // swinging by 50% between runs.
    let timer = Timer {
        kept: 51,
        ..Timer::default()
    };
    let rows = draft_cost_curve(&r.target, &r.trained, &held[0].prompt, &[8, 32], &timer)
        .map_err(|e| e.to_string())?;
    let par = rows[1].t_parallel_ms / rows[0].t_parallel_ms;
    let seq = rows[1].sequential_ms / rows[0].sequential_ms;

    let prompts = &held[..20];
    let cfg = DecodeConfig {
        block_size: 8,
        max_new: 64,
        ..DecodeConfig::default()
    };
    let ar: Vec<_> = prompts
        .iter()
        .map(|s| timed_ar_decode(&r.target, &s.prompt, cfg.max_new, 0.0, 0).unwrap())
        .collect();
    let mut d = ModelDrafter::new(&r.trained, &r.target).unwrap();
    let m = measure_speedup(
        &r.target,
        &mut d as &mut dyn Drafter<f32>,
        prompts,
        &ar,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    let gap = (m.analytic_speedup - m.measured_speedup).abs() / m.measured_speedup;
    pass_if(
        par < 2.5 && seq >= 3.5 && gap <= 0.15,
        format!(
            "t_par(32)/t_par(8) {par:.2} ({:.2}/{:.2} ms, < 2.5), sequential {seq:.2} (>= 3.5), speedup measured {:.2} vs analytic {:.2} (gap {:.1}%, <= 15%)",
            rows[1].t_parallel_ms,
            rows[0].t_parallel_ms,
            m.measured_speedup,
            m.analytic_speedup,
            gap * 100.0
        ),
    )
}

fn weights() -> Check {
    let mut problems = Vec::new();
    for (b, gamma) in [(16, 7.0), (10, 5.0), (8, 4.0)] {
        if default_decay_gamma(b) != Some(gamma)
            || TrainConfig::for_block_size(b).map(|c| c.decay_gamma).ok() != Some(gamma)
        {
            problems.push(format!("decay for B={b}"));
        }
        let w = loss_weights(b, gamma);
        if w[0] != 1.0 || w.len() != b - 1 {
            problems.push(format!("w1 or length for B={b}"));
        }
        let ratio = (-1.0 / gamma).exp();
        if w.windows(2).any(|p| (p[1] / p[0] - ratio).abs() > 1e-9) {
            problems.push(format!("ratio for B={b}"));
        }
    }
    pass_if(
        problems.is_empty(),
        if problems.is_empty() {
            "w1 = 1, ratio exp(-1/gamma), gammas 7/5/4 for B 16/10/8".into()
        } else {
            problems.join(", ")
        },
    )
}

fn mask_plans() -> Check {
    let mut rng = blockspec::rng::keyed_rng(8, blockspec::rng::Domain::Anchors, &[8]);
    let plans = 2000;
    let (mut cells, mut violations) = (0u64, 0u64);
    for _ in 0..plans {
        let b = rng.gen_range(2..=16usize);
        let ctx = rng.gen_range(2..=64usize);
        let n = rng.gen_range(1..=(ctx / 2).max(1));
        let anchors: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ctx)).collect();
        let m = build_block_mask(&anchors, b, ctx);
        for q in 0..anchors.len() * b {
            let j = q / b;
            for k in 0..ctx + anchors.len() * b {
                // Context strictly before the anchor; own block only.
                let expected = if k < ctx {
                    k < anchors[j]
                } else {
                    (k - ctx) / b == j
                };
                cells += 1;
                violations += u64::from(m.allows(q, k) != expected);
            }
        }
    }
    pass_if(
        violations == 0,
        format!("{plans} plans, {cells} cells, {violations} violations"),
    )
}

fn gradients() -> Check {
    let ops = op_errors();
    let op64 = ops.iter().map(|o| o.1).fold(0.0, f64::max);
    let op32 = ops.iter().map(|o| o.2).fold(0.0, f64::max);
    let (mlp64, mlp32) = mlp_reports();
    let (d64, n) = drafter_report_f64(true);
    let (u64_, _) = drafter_report_f64(false);
    let (d32, _) = drafter_report_f32();
    let worst64 = [
        op64,
        mlp64.max_rel_error,
        d64.max_rel_error,
        u64_.max_rel_error,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let worst32 = [op32, mlp32.max_rel_error, d32.max_rel_error]
        .into_iter()
        .fold(0.0, f64::max);
    pass_if(
        worst64 < 1e-6 && worst32 < 1e-3 && n <= 200 && d64.checked == n,
        format!("drafter loss ({n} params) f64 {:.1e}, f32 {:.1e}; all ops and MLP: f64 {worst64:.1e}, f32 {worst32:.1e}", d64.max_rel_error, d32.max_rel_error),
    )
}

fn block_size_grid(tiny: &TinySetup) -> Check {
    let t = &tiny.target;
    let mut lines = Vec::new();
    let mut lossless = true;
    for train_b in [8, 16] {
        let mut cfg = TrainConfig::for_block_size(train_b).unwrap();
        cfg.epochs = 4;
        cfg.anchors_per_seq = 8;
        cfg.val_count = 4;
        let mut d = DraftModel::new(
            DraftConfig::for_target(&t.config, 1, train_b, 2, true).unwrap(),
            t,
            5,
        )
        .unwrap();
        train_drafter(
            &mut d,
            t,
            &tiny.distilled,
            &cfg,
            FeatureSource::Online,
            |_| {},
        )
        .unwrap();
        let mut drafter = ModelDrafter::new(&d, t).unwrap();
        for test_b in [8, 16] {
            let dc = DecodeConfig {
                block_size: test_b,
                max_new: 40,
                ..DecodeConfig::default()
            };
            let (mut tokens, mut cycles) = (0, 0);
            for s in &tiny.held_out {
                drafter.reset();
                let (out, m) = spec_decode(&s.prompt, t, &mut drafter, &dc).unwrap();
                lossless &= out == t.ar_decode(&s.prompt, dc.max_new, 0.0, 0).unwrap();
                tokens += m.cycle_tokens;
                cycles += m.cycles;
            }
            lines.push(format!(
                "train {train_b}/test {test_b}: tau {:.2}",
                tokens as f64 / cycles as f64
            ));
        }
    }
    pass_if(
        lossless,
        format!("{}; lossless {lossless}", lines.join(", ")),
    )
}

fn run_bin(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_blockspec"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn same_files(a: &Path, b: &Path) -> std::result::Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in &names {
        if std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok() {
            return Err(format!("{} differs", n.to_string_lossy()));
        }
    }
    Ok(names.len())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    let s = |q: &Path| q.to_str().unwrap().to_string();
    let (a, b) = (p.join("selftest-a"), p.join("selftest-b"));
    run_bin(&["selftest", "--out", &s(&a)])?;
    run_bin(&["selftest", "--out", &s(&b)])?;
    let files = same_files(&a, &b)?;

    let run = p.join("run");
    std::fs::create_dir_all(&run).unwrap();
    let f = |n: &str| s(&run.join(n));
    run_bin(&[
        "gen-data",
        "--task",
        "mixture",
        "--seed",
        "5",
        "--count",
        "80",
        "--out",
        &f("c.jsonl"),
    ])?;
    run_bin(&[
        "train-target",
        "--corpus",
        &f("c.jsonl"),
        "--out",
        &f("t.ckpt"),
        "--layers",
        "5",
        "--d-model",
        "16",
        "--heads",
        "2",
        "--d-ff",
        "32",
        "--epochs",
        "1",
    ])?;
    run_bin(&[
        "distill",
        "--target",
        &f("t.ckpt"),
        "--in",
        &f("c.jsonl"),
        "--out",
        &f("d.jsonl"),
        "--max-new",
        "24",
    ])?;
    run_bin(&[
        "train-draft",
        "--corpus",
        &f("d.jsonl"),
        "--target",
        &f("t.ckpt"),
        "--out",
        &f("q.ckpt"),
        "--block-size",
        "8",
        "--layers",
        "1",
        "--n-feat",
        "2",
        "--epochs",
        "1",
        "--val-count",
        "4",
    ])?;
    run_bin(&[
        "decode",
        "--target",
        &f("t.ckpt"),
        "--draft",
        &f("q.ckpt"),
        "--prompt-file",
        &f("c.jsonl"),
        "--temperature",
        "1",
        "--seed",
        "3",
        "--max-new",
        "24",
        "--out",
        &f("o.jsonl"),
    ])?;
    let mut replayed = 0;
    for name in ["c.jsonl", "t.ckpt", "d.jsonl", "q.ckpt", "o.jsonl"] {
        let manifest = run.join(format!("{name}.manifest.json"));
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&manifest).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let sub = m["subcommand"]
            .as_str()
            .ok_or("manifest lacks subcommand")?
            .to_string();
        let replay = f(&format!("replay-{name}"));
        let log = f(&format!("replay-{name}.log.jsonl"));
        let mut args = vec![
            sub.as_str(),
            "--config",
            manifest.to_str().unwrap(),
            "--out",
            replay.as_str(),
        ];
        if sub.starts_with("train") {
            args.extend(["--log", log.as_str()]);
        }
        run_bin(&args)?;
        if std::fs::read(run.join(name)).ok() != std::fs::read(&replay).ok() {
            return Err(format!("replay of {name} differs"));
        }
        replayed += 1;
    }
    Ok(format!(
        "selftest twice: {files} files identical; {replayed} manifests replayed byte-identically"
    ))
}

fn copy_repeat_accuracy(r: &Reference) -> Check {
    let samples = gen_task(&Vocab::default(), TaskKind::CopyRepeat, 555, 100).unwrap();
    let (mut hit, mut total) = (0, 0);
    for s in &samples {
        let out = r
            .target
            .ar_decode(&s.prompt, s.response.len(), 0.0, 0)
            .unwrap();
        total += s.response.len();
        hit += out.iter().zip(&s.response).filter(|(a, b)| a == b).count();
    }
    let acc = hit as f64 / total as f64;
    pass_if(
        acc >= 0.9,
        format!(
            "{:.1}% of {total} copy_repeat tokens match the ground truth (need 90%)",
            acc * 100.0
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(String, bool, String)> = Vec::new();
    let mut record = |id: &str, title: &str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ))
        });
        let (ok, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!(
            "criterion {id:>2} {} {title}: {detail} [{:.1?}]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed()
        );
        results.push((id.to_string(), ok, detail));
    };

    record("7", "loss weights", &mut weights);
    record("8", "training mask", &mut mask_plans);
    record("9", "gradient oracle", &mut gradients);
    let tiny = tiny_setup().expect("tiny setup");
    record("2", "sampled losslessness", &mut || sampled_lossless(&tiny));
    record("3", "tau bounds and accounting", &mut || {
        tau_accounting(&tiny)
    });
    record("10", "block-size grid", &mut || block_size_grid(&tiny));
    record("11", "determinism", &mut determinism);

    let reference = reference();
    let held = held_out();
    let taus = Taus {
        trained: probe_tau(&reference.target, &reference.trained, &held, 8, 64).unwrap(),
        untrained: probe_tau(&reference.target, &reference.untrained, &held, 8, 64).unwrap(),
        unconditioned: probe_tau(&reference.target, &reference.unconditioned, &held, 8, 64)
            .unwrap(),
        ceiling: tau_ceiling(&reference.target, &held, 8, 64),
    };
    std::fs::write(
        cache_dir().join("measured.json"),
        serde_json::to_string_pretty(&json!({ "mean_tau": { "trained": taus.trained, "untrained": taus.untrained, "unconditioned": taus.unconditioned, "ceiling": taus.ceiling } })).unwrap(),
    )
    .unwrap();
    record("1", "greedy losslessness", &mut || {
        greedy_lossless(&reference)
    });
    record("4", "conditioning gain", &mut || {
        conditioning_gain(&reference, &taus)
    });
    record("5", "desk tau target", &mut || desk_target(&taus));
    record("6", "draft-cost flatness", &mut || {
        draft_cost(&reference, &held)
    });
    record("--", "target copy_repeat accuracy", &mut || {
        copy_repeat_accuracy(&reference)
    });

    results.sort_by_key(|r| r.0.parse::<u32>().unwrap_or(u32::MAX));
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.1)
        .map(|r| r.0.as_str())
        .collect();
    println!(
        "acceptance: {} of {} checks passed in {:.1?}",
        results.len() - failed.len(),
        results.len(),
        start.elapsed()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
