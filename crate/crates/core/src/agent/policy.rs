use alloc::vec::Vec;

use rand::Rng;

use crate::net::{argmax, QValues};
use crate::sim::{follow_action, gap_acceptance, ActionPair, Lateral, SceneState, N_ACTIONS};

/// ε-greedy choice, independently for every agent row of `q`.
pub fn select_actions<R: Rng + ?Sized>(q: &QValues, epsilon: f64, rng: &mut R) -> Vec<usize> {
    (0..q.n_agents())
        .map(|agent| {
            let row = q.row(agent);
            // the draw happens even at ε = 0 so the stream does not depend on ε
            if rng.random::<f64>() < epsilon {
                rng.random_range(0..row.len())
            } else {
                argmax(row)
            }
        })
        .collect()
}

/// Car following for every CAV plus a ramp plan: one lane toward the ramp
/// lane whenever the gap is accepted upstream of the ramp, otherwise hold.
pub fn rule_based_policy(scene: &SceneState) -> Vec<ActionPair> {
    let cfg = &scene.config;
    let grid = &cfg.grid;
    scene
        .cav_indices()
        .into_iter()
        .map(|i| {
            let v = &scene.vehicles[i];
            if !v.is_active() {
                return ActionPair::KEEP;
            }
            let wants_ramp = v.intends_ramp && !v.missed_ramp && v.x < grid.x_int as f64;
            let step = match v.lane.cmp(&grid.ramp_lane) {
                core::cmp::Ordering::Less if wants_ramp => Some((Lateral::Right, v.lane + 1)),
                core::cmp::Ordering::Greater if wants_ramp => Some((Lateral::Left, v.lane - 1)),
                _ => None,
            };
            if let Some((lat, target)) = step {
                if gap_acceptance(&scene.vehicles, i, target, &cfg.idm, &cfg.lane_change, cfg.body_length) {
                    return ActionPair::new(follow_action(scene, i, target), lat);
                }
            }
            ActionPair::new(follow_action(scene, i, v.lane), Lateral::Keep)
        })
        .collect()
}

/// Uniformly random joint action.
pub fn random_policy<R: Rng + ?Sized>(scene: &SceneState, rng: &mut R) -> Vec<ActionPair> {
    (0..scene.n_cav())
        .map(|_| ActionPair::from_index(rng.random_range(0..N_ACTIONS)).expect("index below N_ACTIONS"))
        .collect()
}
