use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use spformer_cli::commands::{export_curves, latest_checkpoint};
use spformer_cli::config::{load_scenario, Experiment, ExperimentConfig};
use spformer_cli::logs::{read_csv, write_csv, CurveRow, TraceRow, TrainRow};
use spformer_core::metrics::{EpisodeMetrics, MetricsReport};
use spformer_core::sim::ScenarioConfig;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn spformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spformer")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_configs_load_and_round_trip() {
    for name in ["full.cfg", "desk.cfg"] {
        let path = configs().join(name);
        let exp = Experiment::load(&path).unwrap();
        let again = ExperimentConfig::parse(&exp.config.to_toml(), &path).unwrap();
        assert_eq!(again, exp.config);
        assert_eq!(Experiment::from_config(again, &path).unwrap(), exp);
        assert_eq!(exp.config.seeds.len(), 6);
    }
    assert_eq!(load_scenario(&configs().join("ramp.cfg")).unwrap(), ScenarioConfig::default());
}

#[test]
fn missing_scenario_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("x.cfg");
    fs::write(&cfg, "scenario = \"nowhere/road.cfg\"\noutput_dir = \"out\"\nrun_id = \"r\"\nseeds = [1]\n").unwrap();
    let o = spformer(&["train", "--config", s(&cfg), "--episodes", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere/road.cfg"), "{}", stderr(&o));
}

#[test]
fn bad_field_and_bad_ablation_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("x.cfg");
    let text = fs::read_to_string(configs().join("desk.cfg")).unwrap().replace("batch_size", "batch");
    fs::write(&cfg, text.replace("\"ramp.cfg\"", &format!("{:?}", s(&configs().join("ramp.cfg"))))).unwrap();
    let o = spformer(&["train", "--config", s(&cfg), "--episodes", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch"), "{}", stderr(&o));
    let o = spformer(&["train", "--config", s(&configs().join("desk.cfg")), "--ablation", "wings=on"]);
    assert_eq!(o.status.code(), Some(1));
}

fn smoke_run(dir: &Path, seed: &str, episodes: &str) -> Output {
    spformer(&[
        "train",
        "--config",
        s(&configs().join("desk.cfg")),
        "--seed",
        seed,
        "--episodes",
        episodes,
        "--checkpoint-every",
        "5",
        "--out",
        s(dir),
    ])
}

#[test]
fn smoke_training_is_fast_reproducible_and_resumable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let o = smoke_run(a.path(), "1", "10");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(t0.elapsed().as_secs() < 120);
    let log = a.path().join("seed_1/train_log.csv");
    let rows: Vec<TrainRow> = read_csv(&log).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.iter().map(|r| r.episode).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
    assert!((rows[9].epsilon - 0.996f64.powi(10)).abs() < 1e-12);
    assert!(rows.iter().all(|r| r.wall_time == 0.0));
    for f in ["ckpt_000005.spf", "ckpt_000010.spf", "final.spf", "summary.json"] {
        assert!(a.path().join("seed_1").join(f).is_file(), "{f}");
    }

    let o = smoke_run(b.path(), "1", "10");
    assert!(o.status.success());
    assert_eq!(fs::read(&log).unwrap(), fs::read(b.path().join("seed_1/train_log.csv")).unwrap());
    assert_eq!(
        fs::read(a.path().join("seed_1/final.spf")).unwrap(),
        fs::read(b.path().join("seed_1/final.spf")).unwrap()
    );

    // resume from episode 5 after losing the later checkpoints
    fs::remove_file(a.path().join("seed_1/ckpt_000010.spf")).unwrap();
    fs::remove_file(a.path().join("seed_1/final.spf")).unwrap();
    let (_, c) = latest_checkpoint(&a.path().join("seed_1")).unwrap().unwrap();
    assert_eq!(c.meta.episode, 5);
    let o = spformer(&[
        "train",
        "--config",
        s(&configs().join("desk.cfg")),
        "--seed",
        "1",
        "--episodes",
        "8",
        "--out",
        s(a.path()),
        "--resume",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed: Vec<TrainRow> = read_csv(&log).unwrap();
    assert_eq!(resumed.len(), 8);
    assert_eq!(resumed[..5], rows[..5]);
    assert_eq!(resumed[5].epsilon, rows[5].epsilon);
}

#[test]
fn corrupted_or_mismatched_checkpoint_is_a_version_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke_run(dir.path(), "2", "1").status.success());
    let ckpt = dir.path().join("seed_2/final.spf");
    let good = fs::read(&ckpt).unwrap();

    let mut bad = good.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    let broken = dir.path().join("broken.spf");
    fs::write(&broken, &bad).unwrap();
    let o = spformer(&["eval", "--checkpoint", s(&broken), "--episodes", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint version error"), "{}", stderr(&o));

    // a shorter road changes the token length
    let mut sc = ScenarioConfig::default();
    sc.grid.l_main = 200;
    sc.grid.x_int = 150;
    let road = dir.path().join("short.cfg");
    fs::write(&road, toml::to_string(&sc).unwrap()).unwrap();
    let o = spformer(&["eval", "--checkpoint", s(&ckpt), "--scenario", s(&road), "--episodes", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint version error"), "{}", stderr(&o));

    let o = spformer(&["eval", "--checkpoint", s(&ckpt), "--episodes", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn random_eval_fills_every_field_and_traces_recompute_ats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ev");
    let o = spformer(&["eval", "--policy", "random", "--episodes", "40", "--trace", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in ["policy", "ats", "ats_std", "succ_pct", "coll", "velo", "n_episodes", "seeds", "episodes"] {
        assert!(!v[key].is_null(), "{key}");
    }
    let report: MetricsReport = serde_json::from_value(v).unwrap();
    assert_eq!(report.n_episodes, 40);
    assert!(report.ats.is_finite() && report.velo > 0.0 && report.coll > 0.0);

    let episodes: Vec<EpisodeMetrics> = read_csv(&out.join("episodes.csv")).unwrap();
    assert_eq!(episodes, report.episodes);
    let trace: Vec<TraceRow> = read_csv(&out.join("trace.csv")).unwrap();
    for e in &episodes {
        let mut rewards: Vec<(usize, f64)> = trace
            .iter()
            .filter(|r| r.seed == e.seed)
            .filter_map(|r| r.reward.map(|x| (r.t, x)))
            .collect();
        rewards.dedup_by_key(|(t, _)| *t);
        assert_eq!(rewards.len(), e.steps);
        let ats = rewards.iter().map(|(_, x)| x).sum::<f64>() / rewards.len() as f64;
        assert!((ats - e.ats).abs() <= 1e-12, "seed {}: {ats} vs {}", e.seed, e.ats);
    }
}

fn row(episode: usize, ats: f64, coll: usize) -> TrainRow {
    TrainRow {
        episode,
        ats,
        n_collisions: coll,
        n_success: 0,
        mean_speed: 10.0,
        epsilon: 1.0,
        mean_loss: None,
        wall_time: 0.0,
    }
}

#[test]
fn curves_average_two_seed_fixture() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, rows) in [
        (0, vec![row(0, 1.0, 4), row(1, 2.5, 0), row(2, -1.0, 3)]),
        (7, vec![row(0, 3.0, 1), row(1, 4.5, 2), row(2, 0.0, 3)]),
    ] {
        let d = dir.path().join(format!("seed_{seed}"));
        fs::create_dir(&d).unwrap();
        write_csv(&d.join("train_log.csv"), &rows).unwrap();
    }
    let (rows, path) = export_curves(dir.path(), None).unwrap();
    assert_eq!(read_csv::<CurveRow>(&path).unwrap(), rows);
    let want = [
        (0, 2.0, 1.0, 3.0, 2.5, 1.0, 4.0),
        (1, 3.5, 2.5, 4.5, 1.0, 0.0, 2.0),
        (2, -0.5, -1.0, 0.0, 3.0, 3.0, 3.0),
    ];
    for (r, w) in rows.iter().zip(want) {
        assert_eq!((r.episode, r.ats_mean, r.ats_min, r.ats_max, r.coll_mean, r.coll_min, r.coll_max), w);
    }
    let header = fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("episode,ats_mean,ats_min,ats_max,coll_mean,coll_min,coll_max\n"));
}

#[test]
fn curves_of_one_seed_have_equal_bands() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke_run(dir.path(), "4", "3").status.success());
    let o = spformer(&["export-curves", "--run-dir", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<CurveRow> = read_csv(&dir.path().join("curves.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert!(r.ats_mean == r.ats_min && r.ats_min == r.ats_max);
        assert!(r.coll_mean == r.coll_min && r.coll_min == r.coll_max);
    }
    let empty = tempfile::tempdir().unwrap();
    let o = spformer(&["export-curves", "--run-dir", s(empty.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_command_passes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for p in [&a, &b] {
        let o = spformer(&["gradcheck", "--samples", "200", "--seed", "5", "--out", s(p)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn gradcheck_catches_a_corrupted_backward_rule() {
    use spformer_core::agent::gradient_check_with_fault;
    use spformer_core::tensor::OpKind;
    for kind in [OpKind::MatMul, OpKind::SoftmaxRows, OpKind::LayerNorm, OpKind::Gelu] {
        let r = gradient_check_with_fault(100, 0, kind, 1.01).unwrap();
        assert!(!r.passed, "{kind:?} fault went unnoticed");
    }
}

#[test]
fn attention_oracle_command_passes() {
    let o = spformer(&["oracle-attention"]);
    assert!(o.status.success(), "{}", stderr(&o));
}
