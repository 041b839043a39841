//! Evaluation: average traffic score, ramp success, collisions and speed
//! over batches of seeded test episodes.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{compute_reward, random_policy, rule_based_policy};
use crate::encoder::build_token_sequence;
use crate::error::{Error, Result};
use crate::net::{forward, ParameterSet};
use crate::sim::{reset, ActionPair, ScenarioConfig, StepOutcome, VehicleState};

/// Mean per-step reward of one episode.
pub fn ats(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::contract("ATS of an empty episode"));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    /// Greedy actions of a trained network.
    Network(&'a ParameterSet),
    RuleBased,
    Random,
}

impl Policy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Network(_) => "net",
            Policy::RuleBased => "rule",
            Policy::Random => "random",
        }
    }
}

const RANDOM_POLICY_STREAM: u64 = 4;

/// Everything that happened in one test episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub joint_actions: Vec<Vec<ActionPair>>,
    pub outcomes: Vec<StepOutcome>,
    pub rewards: Vec<f64>,
    /// Vehicle states before the first step and after every step.
    pub states: Vec<Vec<VehicleState>>,
}

/// Plays one episode from `reset(scenario, seed)`.
pub fn play_episode(policy: Policy<'_>, scenario: &ScenarioConfig, seed: u64) -> Result<EpisodeRecord> {
    let mut scene = reset(scenario, seed)?;
    if let Policy::Network(p) = policy {
        crate::agent::check_compatible(&p.config, scenario)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(RANDOM_POLICY_STREAM);
    let n = scenario.n_vehicles();
    let v_max = scenario.roster.hdv_v_max.max(scenario.roster.cav_v_max);
    let mut record = EpisodeRecord {
        seed,
        joint_actions: Vec::new(),
        outcomes: Vec::new(),
        rewards: Vec::new(),
        states: alloc::vec![scene.vehicles.clone()],
    };
    while !scene.done {
        let joint = match policy {
            Policy::Network(p) => {
                let seq = build_token_sequence(&scene, &scenario.grid, &scenario.encoder)?;
                let q = forward(&seq, p, &mut rng, false)?;
                (0..q.n_agents()).map(|i| ActionPair::from_index(q.argmax(i))).collect::<Result<_>>()?
            }
            Policy::RuleBased => rule_based_policy(&scene),
            Policy::Random => random_policy(&scene, &mut rng),
        };
        let outcome = scene.step(&joint)?;
        record.rewards.push(compute_reward(&outcome, &scenario.reward, n, v_max));
        record.joint_actions.push(joint);
        record.outcomes.push(outcome);
        record.states.push(scene.vehicles.clone());
    }
    Ok(record)
}

/// Per-episode summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub ats: f64,
    pub steps: usize,
    pub n_collisions: usize,
    pub n_success: usize,
    /// Mean speed over all vehicles and all steps they were on the road.
    pub velo: f64,
}

impl EpisodeMetrics {
    pub fn from_record(r: &EpisodeRecord) -> Result<Self> {
        let speeds: Vec<f64> = r.outcomes.iter().flat_map(|o| o.moving_speeds.iter().copied()).collect();
        Ok(EpisodeMetrics {
            seed: r.seed,
            ats: ats(&r.rewards)?,
            steps: r.rewards.len(),
            n_collisions: r.outcomes.iter().map(|o| o.n_collision).sum(),
            n_success: r.outcomes.iter().map(|o| o.n_onramp).sum(),
            velo: if speeds.is_empty() { 0.0 } else { speeds.iter().sum::<f64>() / speeds.len() as f64 },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: alloc::string::String,
    pub ats: f64,
    pub ats_std: f64,
    /// Ramp exits over all CAV-episodes, in percent.
    pub succ_pct: f64,
    /// Collision events per episode.
    pub coll: f64,
    pub velo: f64,
    pub n_episodes: usize,
    pub seeds: Vec<u64>,
    /// Per-episode rows, sorted by seed.
    pub episodes: Vec<EpisodeMetrics>,
}

/// Aggregates per-episode rows; the result does not depend on their order.
pub fn aggregate(policy: &str, mut episodes: Vec<EpisodeMetrics>, n_cav: usize) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::contract("no episodes to aggregate"));
    }
    episodes.sort_by_key(|e| e.seed);
    let n = episodes.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / n;
    let ats_mean = mean(&|e| e.ats);
    let var = mean(&|e| (e.ats - ats_mean) * (e.ats - ats_mean));
    let successes: usize = episodes.iter().map(|e| e.n_success).sum();
    Ok(MetricsReport {
        policy: policy.into(),
        ats: ats_mean,
        ats_std: libm::sqrt(var),
        succ_pct: 100.0 * successes as f64 / (n * n_cav as f64),
        coll: mean(&|e| e.n_collisions as f64),
        velo: mean(&|e| e.velo),
        n_episodes: episodes.len(),
        seeds: episodes.iter().map(|e| e.seed).collect(),
        episodes,
    })
}

/// Runs one episode per seed and aggregates.
pub fn evaluate(policy: Policy<'_>, scenario: &ScenarioConfig, seeds: &[u64]) -> Result<MetricsReport> {
    if seeds.is_empty() {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let episodes = seeds
        .iter()
        .map(|&s| EpisodeMetrics::from_record(&play_episode(policy, scenario, s)?))
        .collect::<Result<Vec<_>>>()?;
    aggregate(policy.name(), episodes, scenario.roster.n_cav)
}
