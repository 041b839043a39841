//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 8 train 6 seeds x 2 variants x 1500 episodes (about two
//! hours on one core). Environment:
//! - `ACCEPTANCE_RUN_DIR`: where training runs go (default: cargo's target tmp dir).
//! - `ACCEPTANCE_REUSE=1`: keep finished runs in that directory and resume them
//!   instead of starting over.
//! - `ACCEPTANCE_SKIP_TRAINING=1`: report 7 and 8 as failed without training.
//! - `ACCEPTANCE_STRICT=1`: exit nonzero when any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spformer_cli::commands::{self, EvalOptions, PolicyKind, TrainOptions};
use spformer_cli::config::Experiment;
use spformer_cli::logs::{read_csv, trace_rows, TrainRow};
use spformer_cli::oracle::run_oracle;
use spformer_core::agent::{compute_reward, gradient_check, madqn_loss, random_policy, RewardWeights, Transition};
use spformer_core::encoder::build_token_sequence;
use spformer_core::metrics::{evaluate, play_episode, EpisodeMetrics, Policy};
use spformer_core::net::{compute_ppe, forward, init_parameters, NetConfig};
use spformer_core::sim::{reset, ScenarioConfig, StepOutcome};

type Outcome = Result<(bool, String), String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let r = gradient_check(200, 0).map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    let names: Vec<&str> = r.coords.iter().map(|c| c.param.as_str()).collect();
    let covers = r.groups_checked == r.groups_total && names.contains(&"policy_token") && names.contains(&"embedding");
    Ok((
        r.passed && covers && secs < 60.0,
        format!(
            "{} coords, {}/{} arrays, max rel err {:.2e}, {secs:.2}s",
            r.coords.len(),
            r.groups_checked,
            r.groups_total,
            r.max_rel_err
        ),
    ))
}

fn attention() -> Outcome {
    let r = run_oracle(100, 0, 7, 192, 6).map_err(err)?;
    Ok((r.passed, format!("100 inputs, max |diff| {:.2e}", r.max_abs_diff)))
}

fn permutation() -> Outcome {
    let sc = ScenarioConfig::default();
    let params = init_parameters(&NetConfig::default(), &mut ChaCha8Rng::seed_from_u64(11)).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut scene = reset(&sc, 3).map_err(err)?;
    for _ in 0..4 {
        let a = random_policy(&scene, &mut rng);
        scene.step(&a).map_err(err)?;
    }
    let seq = build_token_sequence(&scene, &sc.grid, &sc.encoder).map_err(err)?;
    let base = forward(&seq, &params, &mut rng, false).map_err(err)?;
    let mut same = 0;
    for _ in 0..50 {
        let mut perm: Vec<usize> = (0..seq.len()).collect();
        perm.shuffle(&mut rng);
        let q = forward(&seq.permuted(&perm).map_err(err)?, &params, &mut rng, false).map_err(err)?;
        same += usize::from(q.values.data() == base.values.data());
    }
    Ok((same == 50, format!("{same}/50 permutations bit-identical")))
}

fn single_agent_identity() -> Result<bool, String> {
    let mut sc = ScenarioConfig::default();
    sc.roster.n_hdv = 5;
    sc.roster.n_cav = 1;
    sc.roster.is_cav = vec![false, false, false, false, false, true];
    let cfg = NetConfig {
        n_cav: 1,
        ..NetConfig::desk()
    };
    let params = init_parameters(&cfg, &mut ChaCha8Rng::seed_from_u64(21)).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut scene = reset(&sc, 9).map_err(err)?;
    let mut batch = Vec::new();
    while !scene.done {
        let state = Arc::new(build_token_sequence(&scene, &sc.grid, &sc.encoder).map_err(err)?);
        let joint = random_policy(&scene, &mut rng);
        let out = scene.step(&joint).map_err(err)?;
        let reward = compute_reward(&out, &sc.reward, 6, 20.0);
        let next_state = Arc::new(build_token_sequence(&scene, &sc.grid, &sc.encoder).map_err(err)?);
        batch.push(Transition {
            state,
            actions: vec![joint[0].index()],
            reward,
            next_state,
            done: out.done,
        });
    }
    for t in &batch {
        let loss = madqn_loss(&[t], &params, 1.0, None, &mut rng, false).map_err(err)?;
        let q = forward(&t.state, &params, &mut rng, false).map_err(err)?;
        let next = forward(&t.next_state, &params, &mut rng, false).map_err(err)?;
        let best = next.row(0).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y = if t.done { t.reward } else { t.reward + best };
        let e = y - q.row(0)[t.actions[0]];
        if loss != e * e {
            return Ok(false);
        }
    }
    Ok(!batch.is_empty())
}

fn trace_identity() -> Result<f64, String> {
    let sc = ScenarioConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let rec = play_episode(Policy::Random, &sc, seed).map_err(err)?;
        let logged = EpisodeMetrics::from_record(&rec).map_err(err)?.ats;
        let rows = trace_rows(&rec);
        let mut rewards: Vec<(usize, f64)> = rows.iter().filter_map(|r| r.reward.map(|x| (r.t, x))).collect();
        rewards.dedup_by_key(|(t, _)| *t);
        let ats = rewards.iter().map(|(_, x)| x).sum::<f64>() / rewards.len() as f64;
        worst = worst.max((ats - logged).abs());
    }
    Ok(worst)
}

fn formulas() -> Outcome {
    let single = single_agent_identity()?;
    let trace = trace_identity()?;
    let w = RewardWeights::default();
    let step = |speeds: Vec<f64>, onramp, coll| StepOutcome {
        n_onramp: onramp,
        n_collision: coll,
        n_lc: 0,
        speeds,
        moving_speeds: vec![],
        actions: vec![],
        collisions: vec![],
        done: false,
    };
    let rewards = compute_reward(&step(vec![20.0; 6], 0, 0), &w, 6, 20.0) == 20.0
        && compute_reward(&step(vec![0.0; 6], 0, 1), &w, 6, 20.0) == -0.05 / 6.0
        && compute_reward(&step(vec![0.0; 6], 1, 0), &w, 6, 20.0) == 1.0;
    Ok((
        single && trace <= 1e-12 && rewards,
        format!("single-agent loss exact: {single}; trace ATS max diff {trace:.1e}; reward examples exact: {rewards}"),
    ))
}

fn ppe() -> Outcome {
    let cfg = NetConfig::default();
    let rows: Vec<Vec<f64>> = (0..cfg.n_pos).map(|p| compute_ppe(p, &cfg)).collect::<Result<_, _>>().map_err(err)?;
    let mut unit: f64 = 0.0;
    for r in &rows {
        for k in 0..cfg.d_model / 2 {
            unit = unit.max((r[2 * k] * r[2 * k] + r[2 * k + 1] * r[2 * k + 1] - 1.0).abs());
        }
    }
    let zero = rows[0].iter().enumerate().all(|(i, &x)| x == if i % 2 == 0 { 0.0 } else { 1.0 });
    let mut gap = f64::INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            gap = gap.min(d);
        }
    }
    Ok((
        unit <= 1e-12 && zero && gap > 1e-6,
        format!("max |sin²+cos²-1| {unit:.1e}; position 0 pattern: {zero}; min pairwise L∞ gap {gap:.3e}"),
    ))
}

fn baseline() -> Outcome {
    let seeds: Vec<u64> = (0..1000).collect();
    let r = evaluate(Policy::RuleBased, &ScenarioConfig::default(), &seeds).map_err(err)?;
    Ok((
        r.coll == 0.0 && r.succ_pct == 100.0,
        format!("1000 episodes: Succ {:.1}%, Coll {}, ATS {:.3}, Velo {:.3}", r.succ_pct, r.coll, r.ats, r.velo),
    ))
}

struct Runs {
    ppe: Vec<Vec<TrainRow>>,
    nonppe: Vec<Vec<TrainRow>>,
    random_ats: f64,
}

fn train_variant(root: &Path, name: &str, ablations: Vec<String>) -> Result<Vec<Vec<TrainRow>>, String> {
    let dir = root.join(name);
    let t0 = Instant::now();
    let opts = TrainOptions {
        ablations,
        resume: true,
        out: Some(dir.clone()),
        quiet: true,
        ..TrainOptions::default()
    };
    let summaries = commands::train(&configs().join("desk.cfg"), &opts).map_err(err)?;
    println!("  trained {name}: {} seeds in {:.0}s", summaries.len(), t0.elapsed().as_secs_f64());
    commands::find_logs(&dir)
        .map_err(err)?
        .iter()
        .map(|p| read_csv::<TrainRow>(p).map_err(err))
        .collect()
}

fn training_runs() -> Result<Runs, String> {
    if std::env::var_os("ACCEPTANCE_SKIP_TRAINING").is_some() {
        return Err("training skipped".into());
    }
    let root = std::env::var_os("ACCEPTANCE_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs"));
    if std::env::var_os("ACCEPTANCE_REUSE").is_none() && root.exists() {
        fs::remove_dir_all(&root).map_err(err)?;
    }
    fs::create_dir_all(&root).map_err(err)?;
    let exp = Experiment::load(&configs().join("desk.cfg")).map_err(err)?;
    let seeds: Vec<u64> = (0..1000).map(|s| 1_000_000 + s).collect();
    let random_ats = evaluate(Policy::Random, &exp.scenario, &seeds).map_err(err)?.ats;
    Ok(Runs {
        ppe: train_variant(&root, "ppe", vec![])?,
        nonppe: train_variant(&root, "nonppe", vec!["ppe=off".into()])?,
        random_ats,
    })
}

fn mean(rows: &[TrainRow], f: impl Fn(&TrainRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn learning(runs: &Runs) -> Outcome {
    let mut ok = 0;
    let mut lines = Vec::new();
    for (seed, rows) in runs.ppe.iter().enumerate() {
        if rows.len() < 600 {
            return Err(format!("seed {seed}: only {} episodes", rows.len()));
        }
        let (first, last) = (&rows[..300], &rows[rows.len() - 300..]);
        let (a0, a1) = (mean(first, |r| r.ats), mean(last, |r| r.ats));
        let (c0, c1) = (mean(first, |r| r.n_collisions as f64), mean(last, |r| r.n_collisions as f64));
        let pass = a1 > runs.random_ats && a1 > a0 && c1 <= 0.5 * c0;
        ok += usize::from(pass);
        lines.push(format!(
            "    seed {seed}: ATS {a0:.3} -> {a1:.3}, collisions {c0:.3} -> {c1:.3} [{}]",
            if pass { "ok" } else { "miss" }
        ));
    }
    Ok((
        ok >= 4,
        format!("{ok}/6 seeds (random ATS {:.3})\n{}", runs.random_ats, lines.join("\n")),
    ))
}

fn ablation(runs: &Runs) -> Outcome {
    let mut ok = 0;
    let mut lines = Vec::new();
    for (seed, (a, b)) in runs.ppe.iter().zip(&runs.nonppe).enumerate() {
        let n = a.len().min(b.len());
        let (auc_a, auc_b) = (a[..n].iter().map(|r| r.ats).sum::<f64>(), b[..n].iter().map(|r| r.ats).sum::<f64>());
        ok += usize::from(auc_a > auc_b);
        lines.push(format!("    seed {seed}: area PPE {auc_a:.1} vs nonPPE {auc_b:.1}"));
    }
    Ok((ok >= 4, format!("{ok}/6 seeds\n{}", lines.join("\n"))))
}

fn spformer(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_spformer")).args(args).output().map_err(err)?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("spformer {}: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)))
    }
}

/// Runs train, eval (every policy, with traces) and export-curves into
/// `dir`; returns every CSV produced, by relative path.
fn command_outputs(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
    let cfg = configs().join("desk.cfg").to_string_lossy().into_owned();
    for seed in ["0", "1"] {
        spformer(&["train", "--config", &cfg, "--seed", seed, "--episodes", "6", "--checkpoint-every", "3", "--out", &d("run")])?;
    }
    spformer(&["export-curves", "--run-dir", &d("run")])?;
    for policy in ["net", "rule", "random"] {
        spformer(&[
            "eval", "--policy", policy, "--checkpoint", &d("run/seed_1/final.spf"), "--episodes", "25", "--trace", "--out",
            &d(&format!("eval_{policy}")),
        ])?;
    }
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).map_err(err)? {
            let path = e.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "csv") {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).map_err(err)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-determinism");
    let _ = fs::remove_dir_all(&root);
    let a = command_outputs(&root.join("a"))?;
    let b = command_outputs(&root.join("b"))?;
    let eval = commands::eval(
        PolicyKind::Random,
        &EvalOptions {
            episodes: 3,
            out: Some(root.join("lib")),
            ..EvalOptions::default()
        },
    );
    let same = !a.is_empty() && a == b && eval.is_ok();
    Ok((same, format!("{} CSV files compared across two runs", a.len())))
}

fn main() {
    let mut results: Vec<(usize, bool)> = Vec::new();
    let mut report = |id: usize, name: &str, t0: Instant, r: Outcome| {
        let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!(
            "criterion {id} {name}: {} ({:.1}s) {detail}",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
        results.push((id, pass));
    };
    let t = Instant::now();
    report(1, "gradient check", t, gradients());
    let t = Instant::now();
    report(2, "attention oracle", t, attention());
    let t = Instant::now();
    report(3, "permutation invariance", t, permutation());
    let t = Instant::now();
    report(4, "formula identities", t, formulas());
    let t = Instant::now();
    report(5, "positional encoding", t, ppe());
    let t = Instant::now();
    report(6, "rule baseline", t, baseline());
    let t = Instant::now();
    match training_runs() {
        Ok(runs) => {
            report(7, "learning signal", t, learning(&runs));
            report(8, "PPE ablation", t, ablation(&runs));
        }
        Err(e) => {
            report(7, "learning signal", t, Err(e.clone()));
            report(8, "PPE ablation", t, Err(e));
        }
    }
    let t = Instant::now();
    report(9, "determinism", t, determinism());

    let failed: Vec<usize> = results.iter().filter(|(_, p)| !p).map(|(id, _)| *id).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
