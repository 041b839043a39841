//! CSV row types for training logs, evaluation episodes, traces and curves.

use std::fs::File;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use spformer_core::agent::EpisodeLog;
use spformer_core::metrics::{EpisodeMetrics, EpisodeRecord};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub episode: usize,
    #[serde(rename = "ATS")]
    pub ats: f64,
    pub n_collisions: usize,
    pub n_success: usize,
    pub mean_speed: f64,
    pub epsilon: f64,
    pub mean_loss: Option<f64>,
    pub wall_time: f64,
}

impl TrainRow {
    pub fn new(log: &EpisodeLog, wall_time: f64) -> Self {
        TrainRow {
            episode: log.episode,
            ats: log.ats,
            n_collisions: log.n_collisions,
            n_success: log.n_success,
            mean_speed: log.mean_speed,
            epsilon: log.epsilon,
            mean_loss: log.mean_loss,
            wall_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub seed: u64,
    pub t: usize,
    pub id: usize,
    pub kind: String,
    pub lane: usize,
    pub x: f64,
    pub v: f64,
    pub status: String,
    /// Empty at t = 0 and for vehicles that were off the road.
    pub action: String,
    pub n_collision: usize,
    /// Reward of step `t`; empty at t = 0.
    pub reward: Option<f64>,
}

/// One row per vehicle for the initial state and after every step.
pub fn trace_rows(r: &EpisodeRecord) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for (t, vehicles) in r.states.iter().enumerate() {
        let step = t.checked_sub(1);
        for (i, v) in vehicles.iter().enumerate() {
            let action = step
                .and_then(|s| r.outcomes[s].actions[i])
                .map(|a| a.label().to_string())
                .unwrap_or_default();
            rows.push(TraceRow {
                seed: r.seed,
                t,
                id: v.id,
                kind: format!("{:?}", v.kind).to_lowercase(),
                lane: v.lane,
                x: v.x,
                v: v.v,
                status: v.status.as_str().into(),
                action,
                n_collision: step.map_or(0, |s| r.outcomes[s].n_collision),
                reward: step.map(|s| r.rewards[s]),
            });
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub ats_mean: f64,
    pub ats_min: f64,
    pub ats_max: f64,
    pub coll_mean: f64,
    pub coll_min: f64,
    pub coll_max: f64,
}

pub type EvalRow = EpisodeMetrics;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::data(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::data(path, e))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::data(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| CliError::data(path, e))).collect()
}

/// Appends rows one at a time and flushes each, so an interrupted run keeps
/// every finished episode.
pub struct RowWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl RowWriter {
    pub fn create<T: Serialize>(path: &Path, existing: &[T]) -> CliResult<Self> {
        let file = File::create(path).map_err(CliError::io(path))?;
        let mut w = RowWriter {
            inner: csv::Writer::from_writer(file),
            path: path.to_path_buf(),
        };
        for r in existing {
            w.push(r)?;
        }
        Ok(w)
    }

    pub fn push<T: Serialize>(&mut self, row: &T) -> CliResult<()> {
        self.inner.serialize(row).map_err(|e| CliError::data(&self.path, e))?;
        self.inner.flush().map_err(CliError::io(&self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spformer_core::metrics::{play_episode, Policy};
    use spformer_core::sim::ScenarioConfig;

    #[test]
    fn train_rows_round_trip_with_missing_loss() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let rows = vec![
            TrainRow {
                episode: 0,
                ats: 0.1 + 0.2,
                n_collisions: 2,
                n_success: 1,
                mean_speed: 11.0,
                epsilon: 0.996,
                mean_loss: None,
                wall_time: 0.0,
            },
            TrainRow {
                episode: 1,
                ats: -1e-300,
                n_collisions: 0,
                n_success: 2,
                mean_speed: 1.0 / 3.0,
                epsilon: 0.992016,
                mean_loss: Some(12.5),
                wall_time: 0.0,
            },
        ];
        let mut w = RowWriter::create(&p, &rows[..1]).unwrap();
        w.push(&rows[1]).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("episode,ATS,n_collisions,n_success,mean_speed,epsilon,mean_loss,wall_time\n"));
        assert_eq!(read_csv::<TrainRow>(&p).unwrap(), rows);
    }

    #[test]
    fn trace_has_initial_rows_and_step_rewards() {
        let r = play_episode(Policy::Random, &ScenarioConfig::default(), 4).unwrap();
        let rows = trace_rows(&r);
        assert_eq!(rows.len(), 6 * (r.rewards.len() + 1));
        assert!(rows[..6].iter().all(|x| x.t == 0 && x.reward.is_none() && x.action.is_empty()));
        assert_eq!(rows[6].reward, Some(r.rewards[0]));
    }
}
