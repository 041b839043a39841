use serde::{Deserialize, Serialize};

use crate::sim::StepOutcome;

/// Weights of the speed, ramp-exit, collision and frequent-lane-change terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w1: 20.0,
            w2: 6.0,
            w3: -0.05,
            w4: -80.0,
        }
    }
}

/// Joint reward shared by all agents, averaged over the `n` vehicles.
pub fn compute_reward(outcome: &StepOutcome, weights: &RewardWeights, n: usize, v_max: f64) -> f64 {
    let speed: f64 = outcome.speeds.iter().map(|v| v / v_max).sum();
    (weights.w1 * speed
        + weights.w2 * outcome.n_onramp as f64
        + weights.w3 * outcome.n_collision as f64
        + weights.w4 * outcome.n_lc as f64)
        / n as f64
}
