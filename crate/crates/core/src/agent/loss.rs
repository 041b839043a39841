use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::replay::Transition;
use crate::error::{Error, Result};
use crate::net::{bind, forward_batch, forward_on_tape, NetConfig, ParameterSet, QValues};
use crate::tensor::{Tape, Tensor, Var};

/// Mean over agents of each agent's best next-state value.
pub fn mean_max(q: &QValues) -> f64 {
    let n = q.n_agents();
    let total: f64 = (0..n).map(|i| q.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum();
    total / n as f64
}

/// Mean over agents of the value of the action each agent took.
pub fn chosen_mean(q: &QValues, actions: &[usize]) -> f64 {
    let total: f64 = actions.iter().enumerate().map(|(i, &a)| q.row(i)[a]).sum();
    total / actions.len() as f64
}

/// `r` for terminal steps, otherwise `r + γ · mean_max(Q(s'))`.
pub fn joint_target(reward: f64, gamma: f64, done: bool, next_q: Option<&QValues>) -> f64 {
    match next_q {
        Some(q) if !done => reward + gamma * mean_max(q),
        _ => reward,
    }
}

/// Targets for a batch from `target` parameters, evaluation mode, no gradient.
pub fn td_targets(batch: &[&Transition], target: &ParameterSet, gamma: f64) -> Result<Vec<f64>> {
    let live: Vec<&crate::encoder::TokenSequence> =
        batch.iter().filter(|t| !t.done).map(|t| t.next_state.as_ref()).collect();
    let mut next = if live.is_empty() {
        Vec::new()
    } else {
        // evaluation mode draws nothing from the generator
        forward_batch(&live, target, &mut ChaCha8Rng::seed_from_u64(0), false)?
    }
    .into_iter();
    Ok(batch
        .iter()
        .map(|t| {
            let q = if t.done { None } else { next.next() };
            joint_target(t.reward, gamma, t.done, q.as_ref())
        })
        .collect())
}

fn check_batch(batch: &[&Transition], config: &NetConfig) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if let Some(t) = batch.iter().find(|t| t.actions.len() != config.n_cav) {
        return Err(Error::contract(alloc::format!(
            "transition has {} actions for {} agents",
            t.actions.len(),
            config.n_cav
        )));
    }
    batch.iter().try_for_each(|t| t.validate())
}

/// Squared joint TD error averaged over the batch, on `tape`.
pub(crate) fn loss_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &[Var],
    config: &NetConfig,
    batch: &[&Transition],
    targets: &[f64],
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    let states: Vec<&crate::encoder::TokenSequence> = batch.iter().map(|t| t.state.as_ref()).collect();
    let q = forward_on_tape(tape, vars, config, &states, rng, training)?;
    let width = config.n_outputs();
    let mut mask = Tensor::zeros(&[batch.len(), width]);
    let share = 1.0 / config.n_cav as f64;
    for (b, t) in batch.iter().enumerate() {
        for (i, &a) in t.actions.iter().enumerate() {
            mask.set(b, i * config.n_actions + a, share);
        }
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(q, mask)?;
    let chosen = tape.row_sum(picked)?;
    let y = tape.constant(Tensor::new(alloc::vec![batch.len(), 1], targets.to_vec())?);
    let diff = tape.sub(y, chosen)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / batch.len() as f64)
}

/// Joint loss of `params` on a batch; `target` defaults to `params`.
pub fn madqn_loss<R: Rng + ?Sized>(
    batch: &[&Transition],
    params: &ParameterSet,
    gamma: f64,
    target: Option<&ParameterSet>,
    rng: &mut R,
    training: bool,
) -> Result<f64> {
    check_batch(batch, &params.config)?;
    let targets = td_targets(batch, target.unwrap_or(params), gamma)?;
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let loss = loss_on_tape(&mut tape, &vars, &params.config, batch, &targets, rng, training)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and its gradient with respect to every parameter array, in
/// parameter order. The targets are held fixed.
pub fn madqn_gradients<R: Rng + ?Sized>(
    batch: &[&Transition],
    params: &ParameterSet,
    gamma: f64,
    target: Option<&ParameterSet>,
    rng: &mut R,
    training: bool,
) -> Result<(f64, Vec<Tensor>)> {
    check_batch(batch, &params.config)?;
    let targets = td_targets(batch, target.unwrap_or(params), gamma)?;
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, true);
    let loss = loss_on_tape(&mut tape, &vars, &params.config, batch, &targets, rng, training)?;
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    Ok((tape.value(loss).data()[0], out))
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(Tensor::norm_sq).sum::<f64>());
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}
