//! Clipped-surrogate policy optimization with generalized advantage
//! estimation.

use crate::autodiff::{Tape, TapeError, Var};
use crate::optim::Adam;
use crate::params::{ParamTree, VarMap};
use crate::policy::{self, NetDims, PolicyError};
use crate::training::losses::LossError;
use crate::training::rollout::{RolloutBatch, RolloutError};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("clip epsilon must be positive (use f64::INFINITY to disable clipping)")]
    BadClip,
    #[error(transparent)]
    Batch(#[from] RolloutError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Diagonal-Gaussian log density (plain f64; the tape analogue lives in
/// [`policy::log_prob`]).
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut lp = -0.5 * action.len() as f64 * (2.0 * std::f64::consts::PI).ln();
    for ((m, ls), a) in mean.iter().zip(log_std).zip(action) {
        let z = (a - m) / ls.exp();
        lp += -0.5 * z * z - ls;
    }
    lp
}

/// Generalized advantage estimation over one contiguous worker segment.
///
/// `values[t]` is the critic's estimate at step `t`; `bootstrap` stands in
/// for the value after the last step when the segment was truncated
/// mid-episode (it is ignored when the last step terminated). A `true` in
/// `dones` cuts both the bootstrap and the advantage recursion, so episodes
/// inside the segment stay independent. Returns `(advantages, returns)`
/// with `returns[t] = advantages[t] + values[t]`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t = rewards.len();
    assert_eq!(values.len(), t, "one value per reward");
    assert_eq!(dones.len(), t, "one done flag per reward");
    let mut adv = vec![0.0; t];
    let mut next_adv = 0.0;
    for i in (0..t).rev() {
        let (next_value, carried) = if dones[i] {
            (0.0, 0.0)
        } else if i + 1 < t {
            (values[i + 1], next_adv)
        } else {
            (bootstrap, 0.0)
        };
        let delta = rewards[i] + gamma * next_value - values[i];
        adv[i] = delta + gamma * lam * carried;
        next_adv = adv[i];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shift to zero mean and divide by the population standard deviation,
/// unless the spread is degenerate (then only the shift happens). Returns
/// whether the division took place.
pub fn normalize_advantages(adv: &mut [f64]) -> bool {
    if adv.is_empty() {
        return false;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    for a in adv.iter_mut() {
        *a -= mean;
    }
    let std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if std > 1e-8 {
        for a in adv.iter_mut() {
            *a /= std;
        }
        true
    } else {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PpoConfig {
    /// Surrogate clip radius; `f64::INFINITY` degenerates to the unclipped
    /// objective.
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub normalize_adv: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.0,
            epochs: 4,
            minibatch: 64,
            normalize_adv: true,
        }
    }
}

/// Aggregated over the minibatches that were actually applied; zeros when
/// every minibatch was skipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean `log p_old − log p_new` estimate of the policy shift.
    pub kl: f64,
    /// Fraction of samples whose ratio left `[1−ε, 1+ε]`.
    pub clip_fraction: f64,
    pub minibatches: usize,
    /// Minibatches dropped because their loss went non-finite.
    pub skipped_minibatches: usize,
}

/// One PPO update over the batch: `epochs` shuffled passes in minibatches,
/// maximizing `min(r·A, clip(r, 1−ε, 1+ε)·A)` minus the value error and
/// plus the entropy bonus. A minibatch whose loss turns non-finite is
/// skipped (params untouched) and counted in the stats.
pub fn ppo_update(
    tree: &mut ParamTree,
    opt: &mut Adam,
    dims: &NetDims,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats, PpoError> {
    ppo_update_with(tree, opt, dims, batch, cfg, rng, |_, _, _| Ok(None))
}

/// [`ppo_update`] with a per-minibatch hook: the hook sees the bound tape
/// and the minibatch's batch indices and may return an extra (already
/// weighted) scalar term added to that minibatch's loss. The joint training
/// stage injects its specialization regularizers through this.
pub fn ppo_update_with<F>(
    tree: &mut ParamTree,
    opt: &mut Adam,
    dims: &NetDims,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
    mut extra: F,
) -> Result<PpoStats, PpoError>
where
    F: FnMut(&mut Tape, &VarMap, &[usize]) -> Result<Option<Var>, PpoError>,
{
    if !(cfg.clip_eps > 0.0) {
        return Err(PpoError::BadClip);
    }
    batch.validate()?;
    let n = batch.len();
    let mut advantages = batch.advantages.clone();
    if cfg.normalize_adv {
        normalize_advantages(&mut advantages);
    }

    let mut stats = PpoStats::default();
    let mut indices: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.minibatch.max(1)) {
            let m = chunk.len() as f64;
            let mut tape = Tape::new();
            let vars = tree.bind(&mut tape);
            let mut obj_sum: Option<Var> = None;
            let mut val_sum: Option<Var> = None;
            let mut ent_sum: Option<Var> = None;
            let mut kl_acc = 0.0;
            let mut clipped = 0usize;
            for &i in chunk {
                let t = &batch.transitions[i];
                let fv = policy::forward_vars(&mut tape, &vars, dims, &t.obs_env, &t.obs_self)?;
                let lp_new = policy::log_prob(&mut tape, fv.mean, fv.log_std, &t.action)?;
                let diff = tape.add_const(lp_new, -t.log_prob);
                let ratio = tape.exp(diff);
                let ratio_val = tape.value(ratio).item();
                if (ratio_val - 1.0).abs() > cfg.clip_eps {
                    clipped += 1;
                }
                kl_acc += t.log_prob - tape.value(lp_new).item();
                let surr = tape.scale(ratio, advantages[i]);
                let rclip = tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                let surr_clip = tape.scale(rclip, advantages[i]);
                let obj = tape.minimum(surr, surr_clip)?;
                obj_sum = Some(match obj_sum {
                    None => obj,
                    Some(s) => tape.add(s, obj)?,
                });
                let verr = tape.add_const(fv.value, -batch.returns[i]);
                let vsq = tape.square(verr);
                val_sum = Some(match val_sum {
                    None => vsq,
                    Some(s) => tape.add(s, vsq)?,
                });
                let ent = policy::entropy(&mut tape, fv.log_std, dims.action_dim);
                ent_sum = Some(match ent_sum {
                    None => ent,
                    Some(s) => tape.add(s, ent)?,
                });
            }
            let policy_loss = tape.scale(obj_sum.expect("non-empty chunk"), -1.0 / m);
            let value_mse = tape.scale(val_sum.expect("non-empty chunk"), 1.0 / m);
            let entropy_mean = tape.scale(ent_sum.expect("non-empty chunk"), 1.0 / m);
            let value_term = tape.scale(value_mse, cfg.value_coef);
            let ent_term = tape.scale(entropy_mean, -cfg.entropy_coef);
            let partial = tape.add(policy_loss, value_term)?;
            let mut total = tape.add(partial, ent_term)?;
            if let Some(term) = extra(&mut tape, &vars, chunk)? {
                total = tape.add(total, term)?;
            }

            if !tape.value(total).item().is_finite() {
                stats.skipped_minibatches += 1;
                continue;
            }
            let grads = tape.backward(total)?;
            let by_name = tree.grads_by_name(&vars, &grads);
            if by_name.values().any(|g| !g.is_finite()) {
                stats.skipped_minibatches += 1;
                continue;
            }
            opt.apply(tree, &by_name);

            stats.policy_loss += tape.value(policy_loss).item();
            stats.value_loss += tape.value(value_mse).item();
            stats.entropy += tape.value(entropy_mean).item();
            stats.kl += kl_acc / m;
            stats.clip_fraction += clipped as f64 / m;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let k = stats.minibatches as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.kl /= k;
        stats.clip_fraction /= k;
    }
    Ok(stats)
}
