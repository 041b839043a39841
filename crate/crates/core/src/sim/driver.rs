// Car-following and lane-changing models for human-driven vehicles. The
// rule-based CAV baseline reuses the same primitives.

use serde::{Deserialize, Serialize};

use super::{ActionPair, Lateral, Longitudinal, SceneState, VehicleState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub min_gap: f64,
    pub headway: f64,
    pub delta: f64,
    /// Accelerations within ±threshold map to speed keeping.
    pub action_threshold: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            max_accel: 3.5,
            comfortable_decel: 2.5,
            min_gap: 2.0,
            headway: 1.0,
            delta: 4.0,
            action_threshold: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaneChangeParams {
    /// Deceleration the new follower (or the changer) may be forced into.
    pub safe_decel: f64,
    /// Acceleration gain an HDV needs before it changes lanes.
    pub incentive: f64,
}

impl Default for LaneChangeParams {
    fn default() -> Self {
        LaneChangeParams {
            safe_decel: 2.5,
            incentive: 1.0,
        }
    }
}

/// Intelligent-driver acceleration; `leader` is `(bumper gap, leader speed)`.
pub fn idm_acceleration(v: f64, v0: f64, leader: Option<(f64, f64)>, p: &IdmParams) -> f64 {
    let free = 1.0 - libm::pow(v / v0.max(1e-6), p.delta);
    let interaction = match leader {
        Some((gap, v_lead)) => {
            let dv = v - v_lead;
            let s_star = p.min_gap
                + (v * p.headway + v * dv / (2.0 * libm::sqrt(p.max_accel * p.comfortable_decel))).max(0.0);
            let s = gap.max(1e-3);
            (s_star / s) * (s_star / s)
        }
        None => 0.0,
    };
    p.max_accel * (free - interaction)
}

/// Nearest active vehicle ahead of `idx` in `lane`.
pub fn leader_in_lane(vehicles: &[VehicleState], idx: usize, lane: usize) -> Option<usize> {
    let me = &vehicles[idx];
    vehicles
        .iter()
        .enumerate()
        .filter(|(j, v)| *j != idx && v.is_active() && v.lane == lane && v.x > me.x)
        .min_by(|a, b| a.1.x.total_cmp(&b.1.x).then(a.0.cmp(&b.0)))
        .map(|(j, _)| j)
}

fn idm_behind(vehicles: &[VehicleState], idx: usize, lane: usize, p: &IdmParams, body_length: f64) -> f64 {
    let me = &vehicles[idx];
    let leader = leader_in_lane(vehicles, idx, lane).map(|j| (vehicles[j].x - body_length - me.x, vehicles[j].v));
    idm_acceleration(me.v, me.desired_speed, leader, p)
}

/// Whether `idx` may move into `target_lane` this step. Vehicles in the lane
/// beyond the target count as occupants too, since they may merge into the
/// same lane simultaneously.
pub fn gap_acceptance(
    vehicles: &[VehicleState],
    idx: usize,
    target_lane: usize,
    idm: &IdmParams,
    lc: &LaneChangeParams,
    body_length: f64,
) -> bool {
    let me = &vehicles[idx];
    if target_lane == me.lane {
        return true;
    }
    let beyond = (2 * target_lane).checked_sub(me.lane);
    let occupies = |v: &VehicleState| v.lane == target_lane || Some(v.lane) == beyond;
    let mut leader: Option<&VehicleState> = None;
    let mut follower: Option<&VehicleState> = None;
    for (j, v) in vehicles.iter().enumerate() {
        if j == idx || !v.is_active() || !occupies(v) {
            continue;
        }
        if libm::fabs(v.x - me.x) < body_length + idm.min_gap {
            return false;
        }
        if v.x > me.x {
            if leader.is_none_or(|l| v.x < l.x) {
                leader = Some(v);
            }
        } else if follower.is_none_or(|f| v.x > f.x) {
            follower = Some(v);
        }
    }
    if let Some(l) = leader {
        let a = idm_acceleration(me.v, me.desired_speed, Some((l.x - body_length - me.x, l.v)), idm);
        if a < -lc.safe_decel {
            return false;
        }
    }
    if let Some(f) = follower {
        let a = idm_acceleration(f.v, f.desired_speed, Some((me.x - body_length - f.x, me.v)), idm);
        if a < -lc.safe_decel {
            return false;
        }
    }
    true
}

pub(crate) fn quantize(accel: f64, threshold: f64) -> Longitudinal {
    if accel > threshold {
        Longitudinal::Accelerate
    } else if accel < -threshold {
        Longitudinal::Decelerate
    } else {
        Longitudinal::Keep
    }
}

/// Longitudinal choice while changing into `target_lane`: the more cautious
/// of the current-lane and target-lane car-following accelerations.
pub(crate) fn follow_action(scene: &SceneState, idx: usize, target_lane: usize) -> Longitudinal {
    let cfg = &scene.config;
    let vs = &scene.vehicles;
    let mut a = idm_behind(vs, idx, vs[idx].lane, &cfg.idm, cfg.body_length);
    if target_lane != vs[idx].lane {
        a = a.min(idm_behind(vs, idx, target_lane, &cfg.idm, cfg.body_length));
    }
    quantize(a, cfg.idm.action_threshold)
}

/// IDM longitudinal control plus a gap-acceptance lane change when the
/// adjacent lane offers enough extra acceleration.
pub fn hdv_control(scene: &SceneState, idx: usize) -> ActionPair {
    let cfg = &scene.config;
    let vs = &scene.vehicles;
    let me = &vs[idx];
    let a_here = idm_behind(vs, idx, me.lane, &cfg.idm, cfg.body_length);
    let mut best: Option<(f64, Lateral, usize)> = None;
    let candidates = [
        (Lateral::Left, me.lane.checked_sub(1)),
        (Lateral::Right, Some(me.lane + 1).filter(|&l| l < cfg.grid.n_lanes)),
    ];
    for (lat, lane) in candidates {
        let Some(lane) = lane else { continue };
        if !gap_acceptance(vs, idx, lane, &cfg.idm, &cfg.lane_change, cfg.body_length) {
            continue;
        }
        let gain = idm_behind(vs, idx, lane, &cfg.idm, cfg.body_length) - a_here;
        if gain > cfg.lane_change.incentive && best.is_none_or(|(g, _, _)| gain > g) {
            best = Some((gain, lat, lane));
        }
    }
    match best {
        Some((_, lat, lane)) => ActionPair::new(follow_action(scene, idx, lane), lat),
        None => ActionPair::new(quantize(a_here, cfg.idm.action_threshold), Lateral::Keep),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idm_free_road() {
        let p = IdmParams::default();
        assert_eq!(idm_acceleration(0.0, 20.0, None, &p), 3.5);
        assert!(idm_acceleration(20.0, 20.0, None, &p).abs() < 1e-12);
        // 10/20 → 1 - 1/16
        assert!((idm_acceleration(10.0, 20.0, None, &p) - 3.5 * 15.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn idm_interaction_term() {
        let p = IdmParams::default();
        // equal speeds: s* = 2 + 10 = 12, gap 24 → (1/2)²
        let a = idm_acceleration(10.0, 20.0, Some((24.0, 10.0)), &p);
        let expected = 3.5 * (1.0 - 1.0 / 16.0 - 0.25);
        assert!((a - expected).abs() < 1e-12);
        // closing fast on a short gap brakes hard
        assert!(idm_acceleration(20.0, 20.0, Some((5.0, 0.0)), &p) < -10.0);
    }

    #[test]
    fn quantization_bands() {
        assert_eq!(quantize(0.51, 0.5), Longitudinal::Accelerate);
        assert_eq!(quantize(0.5, 0.5), Longitudinal::Keep);
        assert_eq!(quantize(-0.5, 0.5), Longitudinal::Keep);
        assert_eq!(quantize(-0.51, 0.5), Longitudinal::Decelerate);
    }
}
