//! Multi-agent DQN: reward, exploration, replay and the training loop.
//!
//! All CAVs share one network and one joint transition per step: the policy
//! token yields a row of nine Q-values per agent, and the loss regresses the
//! agents' mean chosen value onto the reward plus the agents' mean best
//! next-state value.

mod gradcheck;
mod loss;
mod policy;
mod replay;
mod reward;
mod train;

#[cfg(feature = "fault-injection")]
pub use gradcheck::gradient_check_with_fault;
pub use gradcheck::{gradcheck_net, gradient_check, CoordCheck, GradCheckReport, GRADCHECK_TOLERANCE};
pub use loss::{chosen_mean, clip_grad_norm, joint_target, madqn_gradients, madqn_loss, mean_max, td_targets};
pub use policy::{random_policy, rule_based_policy, select_actions};
pub use replay::{ReplayBuffer, Transition};
pub use reward::{compute_reward, RewardWeights};
pub use train::{check_compatible, episode_key, EpisodeLog, TrainConfig, TrainObserver, Trainer};
