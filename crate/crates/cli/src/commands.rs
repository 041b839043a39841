//! Command bodies, callable from the binary and from tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spformer_core::agent::{gradient_check, EpisodeLog, GradCheckReport, TrainConfig, Trainer};
use spformer_core::metrics::{aggregate, play_episode, EpisodeMetrics, MetricsReport, Policy};
use spformer_core::net::init_parameters;
use spformer_core::sim::ScenarioConfig;

use crate::checkpoint::Checkpoint;
use crate::config::{load_scenario, Experiment};
use crate::error::{CliError, CliResult};
use crate::logs::{read_csv, trace_rows, write_csv, CurveRow, RowWriter, TrainRow};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.spf";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub seeds: Option<Vec<u64>>,
    pub episodes: Option<usize>,
    pub ablations: Vec<String>,
    pub resume: bool,
    /// Run directory; defaults to `<output_dir>/<run_id>` from the config.
    pub out: Option<PathBuf>,
    pub record_wall_time: bool,
    pub checkpoint_every: Option<usize>,
    pub quiet: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct WindowStats {
    pub episodes: usize,
    pub ats_mean: f64,
    pub collisions_mean: f64,
    pub success_mean: f64,
}

impl WindowStats {
    pub fn of(rows: &[TrainRow]) -> Self {
        let n = rows.len().max(1) as f64;
        WindowStats {
            episodes: rows.len(),
            ats_mean: rows.iter().map(|r| r.ats).sum::<f64>() / n,
            collisions_mean: rows.iter().map(|r| r.n_collisions as f64).sum::<f64>() / n,
            success_mean: rows.iter().map(|r| r.n_success as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub episodes: usize,
    pub updates: u64,
    pub epsilon: f64,
    pub parameters: usize,
    pub first_300: WindowStats,
    pub last_300: WindowStats,
    /// Mean ATS over every logged episode.
    pub ats_mean: f64,
}

fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

fn checkpoint_name(episode: usize) -> String {
    format!("ckpt_{episode:06}.spf")
}

/// Checkpoint with the most completed episodes in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> CliResult<Option<(PathBuf, Checkpoint)>> {
    let mut best: Option<(PathBuf, Checkpoint)> = None;
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(None);
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "spf"))
        .collect();
    paths.sort();
    for p in paths {
        let c = Checkpoint::load(&p)?;
        if best.as_ref().is_none_or(|(_, b)| c.meta.episode > b.meta.episode) {
            best = Some((p, c));
        }
    }
    Ok(best)
}

fn say(quiet: bool, msg: impl std::fmt::Display) {
    if !quiet {
        println!("{msg}");
    }
}

/// Trains one network per seed. Returns the per-seed summaries.
pub fn train(config_path: &Path, opts: &TrainOptions) -> CliResult<Vec<SeedSummary>> {
    let mut exp = Experiment::load(config_path)?;
    for a in &opts.ablations {
        exp.apply_ablation(a)?;
    }
    if let Some(n) = opts.episodes {
        exp.config.train.episodes = n;
    }
    if let Some(k) = opts.checkpoint_every {
        exp.config.checkpoint_every = k;
    }
    if let Some(s) = &opts.seeds {
        exp.config.seeds = s.clone();
    }
    exp.validate()?;
    let run_dir = opts.out.clone().unwrap_or_else(|| exp.run_dir());
    fs::create_dir_all(&run_dir).map_err(CliError::io(&run_dir))?;
    let resolved = run_dir.join("experiment.toml");
    fs::write(&resolved, exp.config.to_toml()).map_err(CliError::io(&resolved))?;
    let sc_path = run_dir.join("scenario.toml");
    fs::write(&sc_path, toml::to_string(&exp.scenario).expect("scenario serializes")).map_err(CliError::io(&sc_path))?;

    let mut summaries = Vec::new();
    for &seed in &exp.config.seeds {
        let s = train_seed(&exp, seed, &run_dir, opts)?;
        say(
            opts.quiet,
            format!(
                "seed {seed}: {} episodes, ATS first300 {:.3} last300 {:.3}, collisions first300 {:.3} last300 {:.3}",
                s.episodes, s.first_300.ats_mean, s.last_300.ats_mean, s.first_300.collisions_mean, s.last_300.collisions_mean
            ),
        );
        summaries.push(s);
    }
    let p = run_dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summaries).expect("summary serializes")).map_err(CliError::io(&p))?;
    Ok(summaries)
}

fn train_seed(exp: &Experiment, seed: u64, run_dir: &Path, opts: &TrainOptions) -> CliResult<SeedSummary> {
    let dir = seed_dir(run_dir, seed);
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let log_path = dir.join(LOG_FILE);
    let train = TrainConfig {
        seed,
        ..exp.config.train.clone()
    };
    let every = exp.config.checkpoint_every;

    let mut kept: Vec<TrainRow> = Vec::new();
    let mut trainer = match opts.resume.then(|| latest_checkpoint(&dir)).transpose()?.flatten() {
        Some((path, c)) => {
            let same = c.meta.net == exp.config.net
                && c.meta.scenario == exp.scenario
                && TrainConfig { episodes: 0, ..c.meta.train.clone() } == TrainConfig { episodes: 0, ..train.clone() };
            if !same {
                return Err(CliError::Version {
                    path,
                    msg: "checkpoint was written for a different configuration".into(),
                });
            }
            if log_path.is_file() {
                kept = read_csv::<TrainRow>(&log_path)?;
                kept.retain(|r| r.episode < c.meta.episode);
            }
            if kept.len() != c.meta.episode {
                return Err(CliError::data(&log_path, format!("log has {} rows before episode {}", kept.len(), c.meta.episode)));
            }
            say(opts.quiet, format!("seed {seed}: resuming at episode {} from {}", c.meta.episode, path.display()));
            Trainer::resume(train, exp.scenario.clone(), c.params, c.adam, c.meta.epsilon, c.meta.episode, c.meta.updates)?
        }
        None => {
            let params = init_parameters(&exp.config.net, &mut ChaCha8Rng::seed_from_u64(seed))?;
            Trainer::new(train, exp.scenario.clone(), params)?
        }
    };

    let mut writer = RowWriter::create(&log_path, &kept)?;
    let mut rows = kept;
    let start = Instant::now();
    let record = opts.record_wall_time;
    let mut observer = |log: &EpisodeLog, t: &Trainer| -> spformer_core::Result<()> {
        let wall = if record { start.elapsed().as_secs_f64() } else { 0.0 };
        let row = TrainRow::new(log, wall);
        writer.push(&row).map_err(|e| spformer_core::Error::Config(e.to_string()))?;
        rows.push(row);
        if t.episode.is_multiple_of(every) {
            Checkpoint::from_trainer(t)
                .save(&dir.join(checkpoint_name(t.episode)))
                .map_err(|e| spformer_core::Error::Config(e.to_string()))?;
        }
        Ok(())
    };
    trainer.run(&mut observer)?;
    Checkpoint::from_trainer(&trainer).save(&dir.join(FINAL_CHECKPOINT))?;

    let window = 300.min(rows.len());
    let summary = SeedSummary {
        seed,
        episodes: rows.len(),
        updates: trainer.updates,
        epsilon: trainer.epsilon,
        parameters: trainer.params.count(),
        first_300: WindowStats::of(&rows[..window]),
        last_300: WindowStats::of(&rows[rows.len() - window..]),
        ats_mean: WindowStats::of(&rows).ats_mean,
    };
    let p = dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(CliError::io(&p))?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Net,
    Rule,
    Random,
}

impl std::str::FromStr for PolicyKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "net" => Ok(PolicyKind::Net),
            "rule" => Ok(PolicyKind::Rule),
            "random" => Ok(PolicyKind::Random),
            _ => Err(CliError::Usage(format!("unknown policy {s} (net, rule, random)"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub config: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub episodes: usize,
    pub first_seed: u64,
    pub out: Option<PathBuf>,
    pub trace: bool,
}

/// Plays `episodes` test episodes with seeds `first_seed..` and writes
/// `report.json`, `episodes.csv` and optionally `trace.csv`.
pub fn eval(policy: PolicyKind, opts: &EvalOptions) -> CliResult<(MetricsReport, PathBuf)> {
    if opts.episodes == 0 {
        return Err(CliError::Usage("--episodes must be positive".into()));
    }
    let checkpoint = match (&opts.checkpoint, policy) {
        (Some(p), _) => Some((p.clone(), Checkpoint::load(p)?)),
        (None, PolicyKind::Net) => return Err(CliError::Usage("--policy net needs --checkpoint".into())),
        (None, _) => None,
    };
    let scenario: ScenarioConfig = if let Some(p) = &opts.scenario {
        load_scenario(p)?
    } else if let Some(p) = &opts.config {
        Experiment::load(p)?.scenario
    } else if let Some((_, c)) = &checkpoint {
        c.meta.scenario.clone()
    } else {
        ScenarioConfig::default()
    };
    if let (PolicyKind::Net, Some((path, c))) = (policy, &checkpoint) {
        c.check_scenario(&scenario, path)?;
    }
    let out = match (&opts.out, &checkpoint) {
        (Some(o), _) => o.clone(),
        (None, Some((p, _))) => p.parent().unwrap_or(Path::new(".")).join(format!("eval_{}", policy_name(policy))),
        (None, None) => PathBuf::from(format!("eval_{}", policy_name(policy))),
    };
    fs::create_dir_all(&out).map_err(CliError::io(&out))?;

    let pol = match (policy, &checkpoint) {
        (PolicyKind::Net, Some((_, c))) => Policy::Network(&c.params),
        (PolicyKind::Rule, _) => Policy::RuleBased,
        _ => Policy::Random,
    };
    let mut episodes = Vec::with_capacity(opts.episodes);
    let mut trace = Vec::new();
    for i in 0..opts.episodes as u64 {
        let record = play_episode(pol, &scenario, opts.first_seed + i)?;
        episodes.push(EpisodeMetrics::from_record(&record)?);
        if opts.trace {
            trace.extend(trace_rows(&record));
        }
    }
    let report = aggregate(pol.name(), episodes, scenario.roster.n_cav)?;
    write_csv(&out.join("episodes.csv"), &report.episodes)?;
    if opts.trace {
        write_csv(&out.join("trace.csv"), &trace)?;
    }
    let p = out.join("report.json");
    fs::write(&p, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(CliError::io(&p))?;
    Ok((report, out))
}

fn policy_name(p: PolicyKind) -> &'static str {
    match p {
        PolicyKind::Net => "net",
        PolicyKind::Rule => "rule",
        PolicyKind::Random => "random",
    }
}

pub fn format_report(r: &MetricsReport) -> String {
    format!(
        "{:<8} {:>10} {:>9} {:>8} {:>8} {:>9}\n{:<8} {:>10.3} {:>9.3} {:>8.1} {:>8.3} {:>9.3}\n",
        "policy", "ATS", "ATS std", "Succ%", "Coll", "Velo", r.policy, r.ats, r.ats_std, r.succ_pct, r.coll, r.velo
    )
}

pub fn gradcheck(samples: usize, seed: u64) -> CliResult<GradCheckReport> {
    if samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    Ok(gradient_check(samples, seed)?)
}

/// Per-episode mean/min/max of ATS and collisions across the
/// `seed_*/train_log.csv` files under `run_dir`. Logs of different length
/// are cut to the shortest.
pub fn export_curves(run_dir: &Path, out: Option<&Path>) -> CliResult<(Vec<CurveRow>, PathBuf)> {
    let logs = find_logs(run_dir)?;
    if logs.is_empty() {
        return Err(CliError::data(run_dir, "no seed_*/train_log.csv found"));
    }
    let tables = logs.iter().map(|p| read_csv::<TrainRow>(p)).collect::<CliResult<Vec<_>>>()?;
    let len = tables.iter().map(Vec::len).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(len);
    for e in 0..len {
        let ats: Vec<f64> = tables.iter().map(|t| t[e].ats).collect();
        let coll: Vec<f64> = tables.iter().map(|t| t[e].n_collisions as f64).collect();
        let n = tables.len() as f64;
        rows.push(CurveRow {
            episode: tables[0][e].episode,
            ats_mean: ats.iter().sum::<f64>() / n,
            ats_min: ats.iter().cloned().fold(f64::INFINITY, f64::min),
            ats_max: ats.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            coll_mean: coll.iter().sum::<f64>() / n,
            coll_min: coll.iter().cloned().fold(f64::INFINITY, f64::min),
            coll_max: coll.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("curves.csv"));
    write_csv(&path, &rows)?;
    Ok((rows, path))
}

/// Training logs under `run_dir`, ordered by seed.
pub fn find_logs(run_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(run_dir).map_err(CliError::io(run_dir))?;
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for e in entries {
        let e = e.map_err(CliError::io(run_dir))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(seed) = name.strip_prefix("seed_").and_then(|s| s.parse().ok()) {
            let p = e.path().join(LOG_FILE);
            if p.is_file() {
                found.push((seed, p));
            }
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}
