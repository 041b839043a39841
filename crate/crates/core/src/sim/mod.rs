//! Lattice simulator for the three-lane exit-ramp scenario.
//!
//! Vehicles move in 1 s steps on a straight road with `n_lanes` lanes. Every
//! vehicle, human-driven or automated, picks one of nine discrete
//! (longitudinal, lateral) actions per step; all vehicles update
//! simultaneously from the pre-step snapshot, then collisions, ramp exits and
//! main-road exits are resolved in that order.
//!
//! Lane 0 is the leftmost lane. `x` is the front-bumper position in metres;
//! a vehicle's body occupies `[x - body_length, x]`.

mod collision;
mod driver;

pub use collision::detect_collisions;
pub use driver::{gap_acceptance, hdv_control, idm_acceleration, leader_in_lane, IdmParams, LaneChangeParams};
pub(crate) use driver::follow_action;

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::RewardWeights;
use crate::encoder::{EncoderWeights, RoadGrid};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VehicleKind {
    Cav,
    Hdv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VehicleStatus {
    Active,
    ExitedRamp,
    ExitedMain,
    Collided,
}

impl VehicleStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleStatus::Active => "active",
            VehicleStatus::ExitedRamp => "exited_ramp",
            VehicleStatus::ExitedMain => "exited_main",
            VehicleStatus::Collided => "collided",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Longitudinal {
    Accelerate,
    Keep,
    Decelerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lateral {
    Left,
    Keep,
    Right,
}

/// One of the nine joint (longitudinal, lateral) actions.
///
/// Index layout: `3 * lon + lat` with lon in (AC, SK, DC) and lat in
/// (LC_left, LK, LC_right).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ActionPair {
    pub lon: Longitudinal,
    pub lat: Lateral,
}

pub const N_ACTIONS: usize = 9;

impl ActionPair {
    pub const KEEP: ActionPair = ActionPair {
        lon: Longitudinal::Keep,
        lat: Lateral::Keep,
    };

    pub fn new(lon: Longitudinal, lat: Lateral) -> Self {
        ActionPair { lon, lat }
    }

    pub fn index(self) -> usize {
        let lon = match self.lon {
            Longitudinal::Accelerate => 0,
            Longitudinal::Keep => 1,
            Longitudinal::Decelerate => 2,
        };
        let lat = match self.lat {
            Lateral::Left => 0,
            Lateral::Keep => 1,
            Lateral::Right => 2,
        };
        3 * lon + lat
    }

    pub fn from_index(index: usize) -> Result<Self> {
        if index >= N_ACTIONS {
            return Err(Error::Index {
                index,
                len: N_ACTIONS,
            });
        }
        let lon = [Longitudinal::Accelerate, Longitudinal::Keep, Longitudinal::Decelerate][index / 3];
        let lat = [Lateral::Left, Lateral::Keep, Lateral::Right][index % 3];
        Ok(ActionPair { lon, lat })
    }

    /// Short label such as `AC/LK`.
    pub fn label(self) -> &'static str {
        const LABELS: [&str; N_ACTIONS] = [
            "AC/LC_left", "AC/LK", "AC/LC_right", "SK/LC_left", "SK/LK", "SK/LC_right", "DC/LC_left", "DC/LK",
            "DC/LC_right",
        ];
        LABELS[self.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleState {
    pub id: usize,
    pub kind: VehicleKind,
    pub lane: usize,
    pub x: f64,
    pub v: f64,
    /// Magnitude of one accelerate/decelerate action, m/s².
    pub a_cap: f64,
    pub v_max: f64,
    /// Car-following desired speed (per-episode draw for HDVs).
    pub desired_speed: f64,
    pub intends_ramp: bool,
    /// Passed the ramp in a wrong lane; the vehicle stays on the main road.
    pub missed_ramp: bool,
    pub status: VehicleStatus,
    /// Bit `k` set when the vehicle changed lanes `k` steps ago (bit 0 = last step).
    pub lc_history: u8,
}

impl VehicleState {
    pub fn is_active(&self) -> bool {
        self.status == VehicleStatus::Active
    }

    /// Changed lanes in each of the last `window` steps.
    pub fn frequent_lane_changer(&self, window: u32) -> bool {
        let window = window.clamp(1, 8);
        let mask = ((1u16 << window) - 1) as u8;
        self.lc_history & mask == mask
    }
}

/// What exited vehicles contribute to the speed term of the reward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitedSpeed {
    VMax,
    FreezeLastSpeed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionMode {
    /// Place the rear vehicle behind the front one; both keep driving.
    Resolve,
    /// Take both vehicles off the road.
    Remove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Roster {
    pub n_hdv: usize,
    pub n_cav: usize,
    pub initial_x: Vec<f64>,
    pub initial_lane: Vec<usize>,
    pub is_cav: Vec<bool>,
    pub hdv_speed: f64,
    pub cav_speed: f64,
    pub hdv_v_max: f64,
    pub cav_v_max: f64,
}

impl Default for Roster {
    fn default() -> Self {
        Roster {
            n_hdv: 4,
            n_cav: 2,
            initial_x: alloc::vec![20.0, 30.0, 50.0, 50.0, 30.0, 0.0],
            initial_lane: alloc::vec![1, 0, 0, 2, 2, 1],
            is_cav: alloc::vec![false, false, false, false, true, true],
            hdv_speed: 10.0,
            cav_speed: 10.0,
            hdv_v_max: 20.0,
            cav_v_max: 20.0,
        }
    }
}

/// Everything that defines an episode: geometry, roster, driver models,
/// state encoding and reward weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: RoadGrid,
    pub roster: Roster,
    pub dt: f64,
    pub acceleration: f64,
    pub body_length: f64,
    pub max_steps: usize,
    /// Desired speeds of HDVs are drawn uniformly from this range each episode.
    pub hdv_v0_min: f64,
    pub hdv_v0_max: f64,
    pub idm: IdmParams,
    pub lane_change: LaneChangeParams,
    /// Consecutive lane-changing steps that make a vehicle "frequent".
    pub lc_window: u32,
    pub exited_speed: ExitedSpeed,
    pub collision_mode: CollisionMode,
    pub encoder: EncoderWeights,
    pub reward: RewardWeights,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            grid: RoadGrid::default(),
            roster: Roster::default(),
            dt: 1.0,
            acceleration: 3.5,
            body_length: 5.0,
            max_steps: 18,
            hdv_v0_min: 11.0,
            hdv_v0_max: 13.0,
            idm: IdmParams::default(),
            lane_change: LaneChangeParams::default(),
            lc_window: 2,
            exited_speed: ExitedSpeed::VMax,
            collision_mode: CollisionMode::Resolve,
            encoder: EncoderWeights::default(),
            reward: RewardWeights::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn n_vehicles(&self) -> usize {
        self.roster.n_hdv + self.roster.n_cav
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.encoder.validate()?;
        let r = &self.roster;
        let n = self.n_vehicles();
        for (name, len) in [
            ("initial_x", r.initial_x.len()),
            ("initial_lane", r.initial_lane.len()),
            ("is_cav", r.is_cav.len()),
        ] {
            if len != n {
                return Err(Error::config(format!(
                    "roster.{name} has {len} entries for {n} vehicles (n_hdv + n_cav)"
                )));
            }
        }
        let cavs = r.is_cav.iter().filter(|&&c| c).count();
        if cavs != r.n_cav {
            return Err(Error::config(format!("roster.is_cav marks {cavs} CAVs, n_cav is {}", r.n_cav)));
        }
        for (i, (&x, &lane)) in r.initial_x.iter().zip(&r.initial_lane).enumerate() {
            if lane >= self.grid.n_lanes {
                return Err(Error::config(format!("vehicle {i}: lane {lane} outside 0..{}", self.grid.n_lanes)));
            }
            if !(0.0..self.grid.l_main as f64).contains(&x) {
                return Err(Error::config(format!("vehicle {i}: x {x} outside the main road")));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                if r.initial_lane[i] == r.initial_lane[j]
                    && libm::fabs(r.initial_x[i] - r.initial_x[j]) < self.body_length
                {
                    return Err(Error::config(format!("vehicles {i} and {j} overlap at their initial cells")));
                }
            }
        }
        let speeds_ok = [r.hdv_speed, r.cav_speed].iter().all(|&v| v >= 0.0)
            && r.hdv_speed <= r.hdv_v_max
            && r.cav_speed <= r.cav_v_max;
        if !speeds_ok {
            return Err(Error::config("initial speeds must lie in [0, v_max]"));
        }
        if !(self.dt > 0.0 && self.acceleration > 0.0 && self.body_length > 0.0) {
            return Err(Error::config("dt, acceleration and body_length must be positive"));
        }
        if self.hdv_v0_min > self.hdv_v0_max || self.hdv_v0_min <= 0.0 {
            return Err(Error::config("need 0 < hdv_v0_min <= hdv_v0_max"));
        }
        if self.max_steps == 0 || !(1..=8).contains(&self.lc_window) {
            return Err(Error::config("max_steps must be positive and lc_window in 1..=8"));
        }
        Ok(())
    }
}

/// Per-step accounting used by the reward and the metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub n_onramp: usize,
    pub n_collision: usize,
    pub n_lc: usize,
    /// Speed term per vehicle (exited vehicles per [`ExitedSpeed`]).
    pub speeds: Vec<f64>,
    /// Post-step speeds of vehicles that were active when the step began.
    pub moving_speeds: Vec<f64>,
    /// Action taken by each vehicle this step (`None` if it was inactive).
    pub actions: Vec<Option<ActionPair>>,
    pub collisions: Vec<(usize, usize)>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub vehicles: Vec<VehicleState>,
    pub t: usize,
    pub seed: u64,
    pub done: bool,
    pub config: ScenarioConfig,
}

/// Outcome of the ramp test for one vehicle in one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RampOutcome {
    None,
    Exited,
    Missed,
}

/// Builds the initial scene. HDV desired speeds are the only random draw.
pub fn reset(config: &ScenarioConfig, seed: u64) -> Result<SceneState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &config.roster;
    let vehicles = (0..config.n_vehicles())
        .map(|id| {
            let cav = r.is_cav[id];
            let (speed, v_max) = if cav {
                (r.cav_speed, r.cav_v_max)
            } else {
                (r.hdv_speed, r.hdv_v_max)
            };
            let desired_speed = if cav {
                v_max
            } else if config.hdv_v0_max > config.hdv_v0_min {
                rng.random_range(config.hdv_v0_min..config.hdv_v0_max).min(v_max)
            } else {
                config.hdv_v0_min.min(v_max)
            };
            VehicleState {
                id,
                kind: if cav { VehicleKind::Cav } else { VehicleKind::Hdv },
                lane: r.initial_lane[id],
                x: r.initial_x[id],
                v: speed,
                a_cap: config.acceleration,
                v_max,
                desired_speed,
                intends_ramp: cav,
                missed_ramp: false,
                status: VehicleStatus::Active,
                lc_history: 0,
            }
        })
        .collect();
    Ok(SceneState {
        vehicles,
        t: 0,
        seed,
        done: false,
        config: config.clone(),
    })
}

/// Kinematic update for one step: speed first, then position with the new
/// speed. Impossible lane changes at the road edge degrade to lane keeping.
pub fn apply_action(vehicle: &VehicleState, action: ActionPair, grid: &RoadGrid, dt: f64) -> VehicleState {
    let mut next = vehicle.clone();
    let dv = vehicle.a_cap * dt;
    next.v = match action.lon {
        Longitudinal::Accelerate => vehicle.v + dv,
        Longitudinal::Keep => vehicle.v,
        Longitudinal::Decelerate => vehicle.v - dv,
    }
    .clamp(0.0, vehicle.v_max);
    next.x = vehicle.x + next.v * dt;
    next.lane = match action.lat {
        Lateral::Left if vehicle.lane > 0 => vehicle.lane - 1,
        Lateral::Right if vehicle.lane + 1 < grid.n_lanes => vehicle.lane + 1,
        _ => vehicle.lane,
    };
    let changed = next.lane != vehicle.lane;
    next.lc_history = (vehicle.lc_history << 1) | changed as u8;
    next
}

/// Ramp test for a ramp-bound vehicle that moved from `x_before` to its
/// current position. Only the path overlap with the intention window
/// `(x_int - int_range, x_int]` matters.
pub fn check_ramp_exit(x_before: f64, vehicle: &mut VehicleState, grid: &RoadGrid) -> RampOutcome {
    if !vehicle.is_active() || !vehicle.intends_ramp || vehicle.missed_ramp {
        return RampOutcome::None;
    }
    let x_int = grid.x_int as f64;
    let window_start = x_int - grid.int_range as f64;
    if x_before > x_int || vehicle.x <= window_start {
        return RampOutcome::None;
    }
    if vehicle.lane == grid.ramp_lane {
        vehicle.status = VehicleStatus::ExitedRamp;
        RampOutcome::Exited
    } else if vehicle.x > x_int {
        vehicle.missed_ramp = true;
        RampOutcome::Missed
    } else {
        RampOutcome::None
    }
}

impl SceneState {
    /// Vehicle indices of the CAV agents, in agent order.
    pub fn cav_indices(&self) -> Vec<usize> {
        self.vehicles
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == VehicleKind::Cav)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_cav(&self) -> usize {
        self.vehicles.iter().filter(|v| v.kind == VehicleKind::Cav).count()
    }

    /// Advances one step with one action per CAV agent (ignored for CAVs
    /// that already left the road).
    pub fn step(&mut self, joint_action: &[ActionPair]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::contract("step called on a finished episode"));
        }
        let cavs = self.cav_indices();
        if joint_action.len() != cavs.len() {
            return Err(Error::contract(format!(
                "joint action has {} entries for {} CAVs",
                joint_action.len(),
                cavs.len()
            )));
        }
        let cfg = &self.config;
        let pre = self.vehicles.clone();
        let mut actions: Vec<Option<ActionPair>> = alloc::vec![None; pre.len()];
        for (i, v) in pre.iter().enumerate() {
            if !v.is_active() {
                continue;
            }
            actions[i] = Some(match v.kind {
                VehicleKind::Cav => joint_action[cavs.iter().position(|&c| c == i).unwrap_or(0)],
                VehicleKind::Hdv => hdv_control(self, i),
            });
        }

        let mut next: Vec<VehicleState> = pre
            .iter()
            .zip(&actions)
            .map(|(v, a)| match a {
                Some(a) => apply_action(v, *a, &cfg.grid, cfg.dt),
                None => v.clone(),
            })
            .collect();

        let collisions = detect_collisions(&pre, &mut next, cfg.body_length);
        if cfg.collision_mode == CollisionMode::Remove {
            for &(a, b) in &collisions {
                next[a].status = VehicleStatus::Collided;
                next[b].status = VehicleStatus::Collided;
            }
        }

        let mut n_onramp = 0;
        let mut main_exit = false;
        for (v, before) in next.iter_mut().zip(&pre) {
            if !before.is_active() {
                continue;
            }
            if check_ramp_exit(before.x, v, &cfg.grid) == RampOutcome::Exited {
                n_onramp += 1;
            }
            if v.is_active() && v.x >= cfg.grid.l_main as f64 {
                v.status = VehicleStatus::ExitedMain;
                main_exit = true;
            }
        }

        let n_lc = next
            .iter()
            .zip(&pre)
            .filter(|(v, before)| before.is_active() && v.frequent_lane_changer(cfg.lc_window))
            .count();
        let speeds = next
            .iter()
            .map(|v| match v.status {
                VehicleStatus::Active => v.v,
                VehicleStatus::ExitedRamp | VehicleStatus::ExitedMain => match cfg.exited_speed {
                    ExitedSpeed::VMax => v.v_max,
                    ExitedSpeed::FreezeLastSpeed => v.v,
                },
                VehicleStatus::Collided => 0.0,
            })
            .collect();
        let moving_speeds = next
            .iter()
            .zip(&pre)
            .filter(|(_, before)| before.is_active())
            .map(|(v, _)| v.v)
            .collect();

        self.vehicles = next;
        self.t += 1;
        let cavs_gone = !cavs.is_empty() && cavs.iter().all(|&i| !self.vehicles[i].is_active());
        self.done = main_exit || cavs_gone || self.t >= self.config.max_steps;
        Ok(StepOutcome {
            n_onramp,
            n_collision: collisions.len(),
            n_lc,
            speeds,
            moving_speeds,
            actions,
            collisions,
            done: self.done,
        })
    }
}
