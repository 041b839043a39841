use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{clip_grad_norm, madqn_gradients};
use super::policy::select_actions;
use super::replay::{ReplayBuffer, Transition};
use super::reward::compute_reward;
use crate::encoder::build_token_sequence;
use crate::error::{Error, Result};
use crate::net::{forward, NetConfig, ParameterSet};
use crate::sim::{reset, ActionPair, ScenarioConfig};
use crate::tensor::{AdamConfig, AdamState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub epsilon_init: f64,
    pub epsilon_min: f64,
    /// Multiplier applied to ε once per episode.
    pub epsilon_decay: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Gradient steps between target-network copies; 0 bootstraps from the
    /// online network itself.
    pub target_sync: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Gradient steps per environment step once the buffer holds a batch.
    pub updates_per_step: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 5000,
            gamma: 1.0,
            epsilon_init: 1.0,
            epsilon_min: 0.01,
            epsilon_decay: 0.996,
            learning_rate: 1e-3,
            batch_size: 16,
            buffer_capacity: 4000,
            target_sync: 0,
            grad_clip: 10.0,
            updates_per_step: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.epsilon_min && self.epsilon_min <= self.epsilon_init && self.epsilon_init <= 1.0) {
            return Err(Error::config("need 0 <= epsilon_min <= epsilon_init <= 1"));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay < 1.0) {
            return Err(Error::config("epsilon_decay must lie in (0, 1)"));
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma must lie in [0, 1]"));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.grad_clip >= 0.0) {
            return Err(Error::config("learning_rate must be positive and grad_clip non-negative"));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(Error::config("need 0 < batch_size <= buffer_capacity"));
        }
        Ok(())
    }

    /// ε after `episodes` completed episodes.
    pub fn epsilon_after(&self, episodes: usize) -> f64 {
        let mut eps = self.epsilon_init;
        for _ in 0..episodes {
            eps = (eps * self.epsilon_decay).max(self.epsilon_min);
        }
        eps
    }
}

/// Checks that a network can read the scenario's tokens and drive its CAVs.
pub fn check_compatible(net: &NetConfig, scenario: &ScenarioConfig) -> Result<()> {
    let grid = &scenario.grid;
    if net.token_len != grid.token_len() || net.n_pos != grid.n_positions() || net.n_cav != scenario.roster.n_cav {
        return Err(Error::config(alloc::format!(
            "network expects token_len {}, n_pos {}, n_cav {}; scenario has {}, {}, {}",
            net.token_len,
            net.n_pos,
            net.n_cav,
            grid.token_len(),
            grid.n_positions(),
            scenario.roster.n_cav
        )));
    }
    if net.n_actions != crate::sim::N_ACTIONS {
        return Err(Error::config("network must have one output per joint action"));
    }
    Ok(())
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub ats: f64,
    pub n_collisions: usize,
    pub n_success: usize,
    pub mean_speed: f64,
    /// ε after this episode's decay.
    pub epsilon: f64,
    /// Mean loss of the gradient steps taken in this episode.
    pub mean_loss: Option<f64>,
    pub steps: usize,
}

pub trait TrainObserver {
    fn on_episode(&mut self, log: &EpisodeLog, trainer: &Trainer) -> Result<()>;
}

impl<F: FnMut(&EpisodeLog, &Trainer) -> Result<()>> TrainObserver for F {
    fn on_episode(&mut self, log: &EpisodeLog, trainer: &Trainer) -> Result<()> {
        self(log, trainer)
    }
}

/// Mixes a run seed and an episode index into an independent key.
pub fn episode_key(seed: u64, episode: usize) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(episode as u64))
}

const EXPLORE_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

fn stream(key: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(id);
    rng
}

/// Online network, optimizer, replay memory and exploration state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub scenario: ScenarioConfig,
    pub params: ParameterSet,
    pub target: Option<ParameterSet>,
    pub adam: AdamState,
    pub buffer: ReplayBuffer,
    pub epsilon: f64,
    /// Index of the next episode to run.
    pub episode: usize,
    /// Gradient steps taken so far.
    pub updates: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, scenario: ScenarioConfig, params: ParameterSet) -> Result<Self> {
        let adam = AdamState::new(params.tensors.iter(), AdamConfig::default());
        let epsilon = config.epsilon_init;
        Self::resume(config, scenario, params, adam, epsilon, 0, 0)
    }

    /// Continues from saved optimizer and exploration state. The replay
    /// memory starts empty and the target network from `params`.
    pub fn resume(
        config: TrainConfig,
        scenario: ScenarioConfig,
        params: ParameterSet,
        adam: AdamState,
        epsilon: f64,
        episode: usize,
        updates: u64,
    ) -> Result<Self> {
        config.validate()?;
        scenario.validate()?;
        params.config.validate()?;
        check_compatible(&params.config, &scenario)?;
        if adam.first.len() != params.tensors.len()
            || adam.first.iter().zip(&params.tensors).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::config("optimizer state does not match the parameters"));
        }
        let target = (config.target_sync > 0).then(|| params.clone());
        Ok(Trainer {
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            config,
            scenario,
            params,
            target,
            adam,
            epsilon,
            episode,
            updates,
        })
    }

    fn gradient_step(&mut self, sample_rng: &mut ChaCha8Rng, dropout_rng: &mut ChaCha8Rng) -> Result<f64> {
        let batch = self.buffer.sample(self.config.batch_size, sample_rng)?;
        let (loss, mut grads) = madqn_gradients(
            &batch,
            &self.params,
            self.config.gamma,
            self.target.as_ref(),
            dropout_rng,
            true,
        )?;
        clip_grad_norm(&mut grads, self.config.grad_clip);
        let grads: Vec<&Tensor> = grads.iter().collect();
        let mut params: Vec<&mut Tensor> = self.params.tensors.iter_mut().collect();
        self.adam.update(&mut params, &grads, self.config.learning_rate)?;
        self.updates += 1;
        if self.config.target_sync > 0 && self.updates.is_multiple_of(self.config.target_sync as u64) {
            self.target = Some(self.params.clone());
        }
        Ok(loss)
    }

    /// Plays and learns from one episode.
    pub fn run_episode(&mut self) -> Result<EpisodeLog> {
        let episode = self.episode;
        let key = episode_key(self.config.seed, episode);
        let (mut explore, mut sample, mut dropout) =
            (stream(key, EXPLORE_STREAM), stream(key, SAMPLE_STREAM), stream(key, DROPOUT_STREAM));
        let ctx = |step: usize| {
            move |e: Error| Error::Training {
                episode,
                step,
                source: Box::new(e),
            }
        };
        let mut scene = reset(&self.scenario, key).map_err(ctx(0))?;
        let grid = self.scenario.grid;
        let enc = self.scenario.encoder;
        let n = self.scenario.n_vehicles();
        let v_max = self.scenario.roster.hdv_v_max.max(self.scenario.roster.cav_v_max);
        let mut state = Arc::new(build_token_sequence(&scene, &grid, &enc).map_err(ctx(0))?);

        let mut rewards = Vec::new();
        let (mut n_collisions, mut n_success) = (0, 0);
        let (mut speed_sum, mut speed_n) = (0.0, 0usize);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        while !scene.done {
            let step = scene.t;
            let q = forward(&state, &self.params, &mut dropout, false).map_err(ctx(step))?;
            let actions = select_actions(&q, self.epsilon, &mut explore);
            let joint: Vec<ActionPair> =
                actions.iter().map(|&a| ActionPair::from_index(a)).collect::<Result<_>>().map_err(ctx(step))?;
            let outcome = scene.step(&joint).map_err(ctx(step))?;
            let reward = compute_reward(&outcome, &self.scenario.reward, n, v_max);
            let next = Arc::new(build_token_sequence(&scene, &grid, &enc).map_err(ctx(step))?);
            self.buffer
                .push(Transition {
                    state: state.clone(),
                    actions,
                    reward,
                    next_state: next.clone(),
                    done: outcome.done,
                })
                .map_err(ctx(step))?;
            state = next;

            rewards.push(reward);
            n_collisions += outcome.n_collision;
            n_success += outcome.n_onramp;
            speed_sum += outcome.moving_speeds.iter().sum::<f64>();
            speed_n += outcome.moving_speeds.len();

            if self.buffer.len() >= self.config.batch_size {
                for _ in 0..self.config.updates_per_step {
                    loss_sum += self.gradient_step(&mut sample, &mut dropout).map_err(ctx(step))?;
                    loss_n += 1;
                }
            }
        }

        self.epsilon = (self.epsilon * self.config.epsilon_decay).max(self.config.epsilon_min);
        self.episode += 1;
        Ok(EpisodeLog {
            episode,
            ats: rewards.iter().sum::<f64>() / rewards.len() as f64,
            n_collisions,
            n_success,
            mean_speed: if speed_n == 0 { 0.0 } else { speed_sum / speed_n as f64 },
            epsilon: self.epsilon,
            mean_loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            steps: rewards.len(),
        })
    }

    /// Runs episodes until `config.episodes` have been played in total.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<Vec<EpisodeLog>> {
        let mut logs = Vec::new();
        while self.episode < self.config.episodes {
            let log = self.run_episode()?;
            observer.on_episode(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }
}
