//! Raster state encoding.
//!
//! Each vehicle is described by a `(n_lanes + 1) × l_main` matrix: one row per
//! lane plus an extra row that marks the ramp intention window. Rows index
//! lanes, columns index 1 m longitudinal cells.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{SceneState, VehicleKind, VehicleState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadGrid {
    pub n_lanes: usize,
    pub l_main: usize,
    pub x_int: usize,
    pub int_range: usize,
    pub ramp_lane: usize,
}

impl Default for RoadGrid {
    fn default() -> Self {
        RoadGrid {
            n_lanes: 3,
            l_main: 250,
            x_int: 200,
            int_range: 5,
            ramp_lane: 2,
        }
    }
}

impl RoadGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_lanes == 0 || self.l_main == 0 {
            return Err(Error::config("grid needs at least one lane and one cell"));
        }
        if self.x_int == 0 || self.x_int > self.l_main {
            return Err(Error::config(format!("x_int {} outside (0, l_main]", self.x_int)));
        }
        if self.int_range >= self.x_int {
            return Err(Error::config("int_range must be smaller than x_int"));
        }
        if self.ramp_lane >= self.n_lanes {
            return Err(Error::config(format!("ramp_lane {} outside 0..{}", self.ramp_lane, self.n_lanes)));
        }
        Ok(())
    }

    /// Matrix height: lanes plus the intention row.
    pub fn height(&self) -> usize {
        self.n_lanes + 1
    }

    pub fn token_len(&self) -> usize {
        self.height() * self.l_main
    }

    /// Number of discrete physical positions (lane-major cells).
    pub fn n_positions(&self) -> usize {
        self.n_lanes * self.l_main
    }

    /// Position index given to vehicles that have left the road.
    pub fn sentinel_position(&self) -> usize {
        self.n_positions() - 1
    }

    pub fn physical_position(&self, lane: usize, x: f64) -> usize {
        lane * self.l_main + libm::floor(x) as usize
    }

    /// First and last cell of the intention window, both inclusive. The
    /// window is the open interval `(x_int - int_range, x_int)`.
    pub fn intention_cells(&self) -> (usize, usize) {
        (self.x_int - self.int_range + 1, self.x_int - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderWeights {
    pub i_ego: f64,
    pub i_potential: f64,
    pub i_intention: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub w_minus: f64,
    /// Feed each vehicle's own matrix instead of the composed one.
    pub ego_only_tokens: bool,
}

impl Default for EncoderWeights {
    fn default() -> Self {
        EncoderWeights {
            i_ego: 30.0,
            i_potential: 1.0,
            i_intention: 10.0,
            sigma_x: 5.0,
            sigma_y: 0.7,
            w_minus: 0.5,
            ego_only_tokens: false,
        }
    }
}

impl EncoderWeights {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.i_ego, self.i_potential, self.i_intention, self.sigma_x, self.sigma_y, self.w_minus]
            .iter()
            .all(|x| x.is_finite());
        if !finite || self.sigma_x <= 0.0 || self.sigma_y <= 0.0 {
            return Err(Error::config("encoder factors must be finite and both sigmas positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl StateMatrix {
    pub fn zeros(grid: &RoadGrid) -> Self {
        StateMatrix {
            rows: grid.height(),
            cols: grid.l_main,
            values: vec![0.0; grid.token_len()],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    fn add_scaled(&mut self, other: &StateMatrix, w: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = flush(*a + w * b);
        }
    }
}

/// Subnormal tails of the Gaussian become exact zeros; they carry no
/// information and make every downstream product slow.
fn flush(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE { 0.0 } else { x }
}

fn check_on_road(vehicle: &VehicleState, grid: &RoadGrid) -> Result<()> {
    if vehicle.lane >= grid.n_lanes || !(vehicle.x >= 0.0 && vehicle.x < grid.l_main as f64) {
        return Err(Error::Encoding(format!(
            "vehicle {} off the grid (lane {}, x {})",
            vehicle.id, vehicle.lane, vehicle.x
        )));
    }
    Ok(())
}

pub fn encode_position(vehicle: &VehicleState, grid: &RoadGrid, weights: &EncoderWeights) -> Result<StateMatrix> {
    check_on_road(vehicle, grid)?;
    let mut m = StateMatrix::zeros(grid);
    let col = libm::floor(vehicle.x) as usize;
    m.values[vehicle.lane * grid.l_main + col] = weights.i_ego;
    Ok(m)
}

/// Gaussian speed potential centred on the vehicle's cell, elongated along
/// the road. Evaluated on every row of the matrix.
pub fn encode_speed_field(vehicle: &VehicleState, grid: &RoadGrid, weights: &EncoderWeights) -> Result<StateMatrix> {
    check_on_road(vehicle, grid)?;
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(vehicle.v >= 0.0) {
        return Err(Error::Encoding(format!("vehicle {} has negative speed {}", vehicle.id, vehicle.v)));
    }
    let mut m = StateMatrix::zeros(grid);
    let amplitude = weights.i_potential * vehicle.v;
    if amplitude == 0.0 {
        return Ok(m);
    }
    let cx = libm::floor(vehicle.x);
    let cy = vehicle.lane as f64;
    let kx = 1.0 / (2.0 * weights.sigma_x * weights.sigma_x);
    let ky = 1.0 / (2.0 * weights.sigma_y * weights.sigma_y);
    let along: Vec<f64> = (0..grid.l_main)
        .map(|c| {
            let d = c as f64 - cx;
            d * d * kx
        })
        .collect();
    for r in 0..grid.height() {
        let d = r as f64 - cy;
        let lateral = d * d * ky;
        let row = &mut m.values[r * grid.l_main..(r + 1) * grid.l_main];
        for (cell, a) in row.iter_mut().zip(&along) {
            *cell = flush(amplitude * libm::exp(-(a + lateral)));
        }
    }
    Ok(m)
}

pub fn encode_intention(vehicle: &VehicleState, grid: &RoadGrid, weights: &EncoderWeights) -> StateMatrix {
    let mut m = StateMatrix::zeros(grid);
    if vehicle.intends_ramp {
        let (first, last) = grid.intention_cells();
        let base = grid.n_lanes * grid.l_main;
        for c in first..=last {
            m.values[base + c] = weights.i_intention;
        }
    }
    m
}

/// Position + speed field + intention of one vehicle.
pub fn encode_self(vehicle: &VehicleState, grid: &RoadGrid, weights: &EncoderWeights) -> Result<StateMatrix> {
    let mut m = encode_position(vehicle, grid, weights)?;
    m.add_scaled(&encode_speed_field(vehicle, grid, weights)?, 1.0);
    m.add_scaled(&encode_intention(vehicle, grid, weights), 1.0);
    Ok(m)
}

/// Own matrix plus `w_minus` times the sum of the other vehicles' own
/// matrices. Vehicles that have left the road are not part of the scene.
pub fn compose_state(
    i: usize,
    vehicles: &[VehicleState],
    grid: &RoadGrid,
    weights: &EncoderWeights,
) -> Result<StateMatrix> {
    let me = vehicles.get(i).ok_or(Error::Index {
        index: i,
        len: vehicles.len(),
    })?;
    let mut others = StateMatrix::zeros(grid);
    for (j, v) in vehicles.iter().enumerate() {
        if j != i && v.is_active() {
            others.add_scaled(&encode_self(v, grid, weights)?, 1.0);
        }
    }
    let mut s = encode_self(me, grid, weights)?;
    s.add_scaled(&others, weights.w_minus);
    Ok(s)
}

/// Per-vehicle tokens in vehicle storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `N × token_len`.
    pub tokens: Tensor,
    pub positions: Vec<usize>,
    /// Token index of each CAV agent, in agent order.
    pub cav_index_map: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn token_len(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token(&self, j: usize) -> &[f64] {
        self.tokens.row(j)
    }

    /// Reorders tokens so that new token `k` is old token `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<TokenSequence> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract("not a permutation of the token indices"));
        }
        let mut data = Vec::with_capacity(self.tokens.len());
        for &p in perm {
            data.extend_from_slice(self.token(p));
        }
        let mut inverse = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        Ok(TokenSequence {
            tokens: Tensor::new(vec![n, self.token_len()], data)?,
            positions: perm.iter().map(|&p| self.positions[p]).collect(),
            cav_index_map: self.cav_index_map.iter().map(|&c| inverse[c]).collect(),
        })
    }
}

pub fn build_token_sequence(scene: &SceneState, grid: &RoadGrid, weights: &EncoderWeights) -> Result<TokenSequence> {
    let vehicles = &scene.vehicles;
    let n = vehicles.len();
    let len = grid.token_len();
    let mut data = vec![0.0; n * len];
    let mut positions = Vec::with_capacity(n);
    for (j, v) in vehicles.iter().enumerate() {
        if !v.is_active() {
            positions.push(grid.sentinel_position());
            continue;
        }
        let s = if weights.ego_only_tokens {
            encode_self(v, grid, weights)?
        } else {
            compose_state(j, vehicles, grid, weights)?
        };
        data[j * len..(j + 1) * len].copy_from_slice(s.values());
        positions.push(grid.physical_position(v.lane, v.x));
    }
    let cav_index_map = vehicles
        .iter()
        .enumerate()
        .filter(|(_, v)| v.kind == VehicleKind::Cav)
        .map(|(j, _)| j)
        .collect();
    Ok(TokenSequence {
        tokens: Tensor::new(vec![n, len], data)?,
        positions,
        cav_index_map,
    })
}
