//! Rollout collection, generalized advantage estimation and the PPO update.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvError, EnvSettings, EpisodeOutcome, OutcomeKind, OBS_DIM};
use crate::nn::{
    adam_update, backward, clip_grad_norm, loss, sample_action, AdamState, Batch, LossSpec, PolicyParams,
};
use crate::rng::StreamRng;
use crate::terrain::Heightfield;

pub const ACT_DIM: usize = 2;
pub const ADV_EPS: f64 = 1e-8;
pub const BETA_MIN: f64 = 1e-4;
pub const BETA_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Objective {
    Clip,
    AdaptiveKl,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Clip => "clip",
            Objective::AdaptiveKl => "adaptive_kl",
        })
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clip" => Ok(Objective::Clip),
            "adaptive_kl" => Ok(Objective::AdaptiveKl),
            other => Err(format!("unknown objective `{other}` (expected `clip` or `adaptive_kl`)")),
        }
    }
}

impl TryFrom<String> for Objective {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Objective> for String {
    fn from(o: Objective) -> String {
        o.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub clip_eps: f64,
    pub kl_target: f64,
    pub n_steps: usize,
    pub n_envs: usize,
    pub minibatch_size: usize,
    pub mini_epochs: usize,
    pub max_iterations: usize,
    pub critic_coef: f64,
    pub entropy_coef: f64,
    pub bound_coef: f64,
    pub total_env_steps: u64,
    pub objective: Objective,
    /// Initial KL penalty coefficient for [`Objective::AdaptiveKl`].
    pub initial_beta: f64,
    pub normalize_advantages: bool,
    /// Global gradient-norm cap; `0` disables clipping.
    pub max_grad_norm: f64,
    /// Multiplier applied to environment rewards before GAE.
    pub reward_scale: f64,
    /// Value credited after a successful episode ends.
    pub success_value: TerminalValue,
    /// Value credited after a timed-out episode ends.
    pub timeout_value: TerminalValue,
    /// Value credited after a collision or out-of-bounds ending.
    pub failure_value: TerminalValue,
}

impl PpoConfig {
    /// Baseline hyperparameters sized for a desktop CPU.
    pub fn desk_scale() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            lr: 5e-4,
            clip_eps: 0.2,
            kl_target: 0.008,
            n_steps: 256,
            n_envs: 8,
            minibatch_size: 512,
            mini_epochs: 8,
            max_iterations: 489,
            critic_coef: 4.0,
            entropy_coef: 0.005,
            bound_coef: 0.0001,
            total_env_steps: 1_000_000,
            objective: Objective::Clip,
            initial_beta: 1.0,
            normalize_advantages: true,
            max_grad_norm: 0.0,
            reward_scale: 0.05,
            success_value: TerminalValue::Final,
            timeout_value: TerminalValue::Final,
            failure_value: TerminalValue::Final,
        }
    }

    /// Baseline hyperparameters at full rollout size and a 1.2e7-step budget.
    pub fn full_scale() -> Self {
        Self {
            n_steps: 2048,
            minibatch_size: 16384,
            max_iterations: 150,
            total_env_steps: 12_000_000,
            ..Self::desk_scale()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.n_steps * self.n_envs
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must be in [0, 1], got {v}"))
            }
        };
        unit("gamma", self.gamma)?;
        unit("lambda", self.lambda)?;
        if !(self.clip_eps > 0.0) {
            return Err(format!("clip_eps must be > 0, got {}", self.clip_eps));
        }
        if !(self.lr > 0.0) {
            return Err(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.kl_target > 0.0) {
            return Err(format!("kl_target must be > 0, got {}", self.kl_target));
        }
        if self.n_steps == 0 || self.n_envs == 0 || self.minibatch_size == 0 || self.mini_epochs == 0 {
            return Err("n_steps, n_envs, minibatch_size and mini_epochs must be positive".into());
        }
        if !self.batch_size().is_multiple_of(self.minibatch_size) {
            return Err(format!(
                "minibatch_size {} does not divide n_steps × n_envs = {}",
                self.minibatch_size,
                self.batch_size()
            ));
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be positive".into());
        }
        if self.total_env_steps < self.batch_size() as u64 {
            return Err(format!(
                "total_env_steps {} is below one rollout of n_steps × n_envs = {}",
                self.total_env_steps,
                self.batch_size()
            ));
        }
        if !(self.initial_beta >= BETA_MIN && self.initial_beta <= BETA_MAX) {
            return Err(format!("initial_beta must be in [{BETA_MIN}, {BETA_MAX}]"));
        }
        for (name, v) in [
            ("critic_coef", self.critic_coef),
            ("entropy_coef", self.entropy_coef),
            ("bound_coef", self.bound_coef),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0) {
                return Err(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.reward_scale > 0.0) {
            return Err(format!("reward_scale must be > 0, got {}", self.reward_scale));
        }
        Ok(())
    }

    pub fn loss_spec(&self, beta: f64) -> LossSpec {
        LossSpec {
            objective: self.objective,
            clip_eps: self.clip_eps,
            beta,
            critic_coef: self.critic_coef,
            entropy_coef: self.entropy_coef,
            bound_coef: self.bound_coef,
        }
    }
}

/// `min(r·A, clip(r, 1 − ε, 1 + ε)·A)`.
pub fn clip_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// `r·A − β·KL`.
pub fn kl_penalty_objective(ratio: f64, advantage: f64, kl: f64, beta: f64) -> f64 {
    ratio * advantage - beta * kl
}

/// Closed-form `KL(old ‖ new)` between diagonal Gaussians.
pub fn gaussian_kl(old_mean: &[f64], old_log_std: &[f64], new_mean: &[f64], new_log_std: &[f64]) -> f64 {
    let mut kl = 0.0;
    for d in 0..old_mean.len() {
        let var_old = (2.0 * old_log_std[d]).exp();
        let var_new = (2.0 * new_log_std[d]).exp();
        let diff = old_mean[d] - new_mean[d];
        kl += new_log_std[d] - old_log_std[d] + (var_old + diff * diff) / (2.0 * var_new) - 0.5;
    }
    kl
}

/// Doubles β when KL overshoots `1.5·target`, halves it below `target/1.5`.
pub fn adaptive_kl_update(beta: f64, measured_kl: f64, kl_target: f64) -> f64 {
    let next = if measured_kl > 1.5 * kl_target {
        beta * 2.0
    } else if measured_kl < kl_target / 1.5 {
        beta / 2.0
    } else {
        beta
    };
    next.clamp(BETA_MIN, BETA_MAX)
}

/// GAE over one environment's time-ordered sequence.
///
/// `done[t]` marks that step `t` ended an episode, so neither the next value
/// nor later advantages flow back across it. Returns unnormalized
/// `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "sequence lengths differ");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean, unit variance. Batches of one are left
/// untouched.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + ADV_EPS;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Samples from `n_steps` synchronous steps of `n_envs` environments,
/// stored time-major (`index = step · n_envs + env`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub n_steps: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub means: Vec<f64>,
    pub log_stds: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of each environment's observation after the last step.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Episodes that ended during collection, in step then env order.
    pub outcomes: Vec<EpisodeOutcome>,
}

impl RolloutBuffer {
    fn with_capacity(n_envs: usize, n_steps: usize) -> Self {
        let n = n_envs * n_steps;
        Self {
            n_envs,
            n_steps,
            obs: Vec::with_capacity(n * OBS_DIM),
            actions: Vec::with_capacity(n * ACT_DIM),
            log_probs: Vec::with_capacity(n),
            means: Vec::with_capacity(n * ACT_DIM),
            log_stds: Vec::with_capacity(n * ACT_DIM),
            rewards: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            bootstrap: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Per-environment GAE followed by optional batch normalization.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64, normalize: bool) {
        let (e, t) = (self.n_envs, self.n_steps);
        self.advantages = vec![0.0; e * t];
        self.returns = vec![0.0; e * t];
        for env in 0..e {
            let pick = |v: &[f64]| -> Vec<f64> { (0..t).map(|s| v[s * e + env]).collect() };
            let dones: Vec<bool> = (0..t).map(|s| self.dones[s * e + env]).collect();
            let (adv, ret) = compute_gae(
                &pick(&self.rewards),
                &pick(&self.values),
                &dones,
                self.bootstrap[env],
                gamma,
                lambda,
            );
            for s in 0..t {
                self.advantages[s * e + env] = adv[s];
                self.returns[s * e + env] = ret[s];
            }
        }
        if normalize {
            normalize_advantages(&mut self.advantages);
        }
    }

    /// Gathers the samples at `indices` into a training batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut b = Batch {
            obs: Vec::with_capacity(indices.len() * OBS_DIM),
            actions: Vec::with_capacity(indices.len() * ACT_DIM),
            old_log_prob: Vec::with_capacity(indices.len()),
            old_mean: Vec::with_capacity(indices.len() * ACT_DIM),
            old_log_std: Vec::with_capacity(indices.len() * ACT_DIM),
            advantages: Vec::with_capacity(indices.len()),
            returns: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            b.obs.extend_from_slice(&self.obs[i * OBS_DIM..(i + 1) * OBS_DIM]);
            b.actions.extend_from_slice(&self.actions[i * ACT_DIM..(i + 1) * ACT_DIM]);
            b.old_log_prob.push(self.log_probs[i]);
            b.old_mean.extend_from_slice(&self.means[i * ACT_DIM..(i + 1) * ACT_DIM]);
            b.old_log_std.extend_from_slice(&self.log_stds[i * ACT_DIM..(i + 1) * ACT_DIM]);
            b.advantages.push(self.advantages[i]);
            b.returns.push(self.returns[i]);
        }
        b
    }

    pub fn full_batch(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// A set of environments stepped in lockstep, carrying the current
/// observation of each between rollouts.
#[derive(Debug, Clone)]
pub struct VecEnv {
    pub envs: Vec<Env>,
    /// Normalized current observation per environment.
    current: Vec<[f64; OBS_DIM]>,
}

impl VecEnv {
    /// Environment `i` draws layouts from stream `stream_base + i` of `seed`.
    pub fn new(
        settings: Arc<EnvSettings>,
        terrain: Arc<Heightfield>,
        n_envs: usize,
        seed: u64,
        stream_base: u64,
    ) -> Result<Self, EnvError> {
        let mut envs = Vec::with_capacity(n_envs);
        let mut current = Vec::with_capacity(n_envs);
        for i in 0..n_envs {
            let mut env = Env::new(
                settings.clone(),
                terrain.clone(),
                StreamRng::new(seed, stream_base + i as u64),
            );
            let obs = env.reset()?;
            current.push(obs.normalized(settings.limits.v_max));
            envs.push(env);
        }
        Ok(Self { envs, current })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn current_observations(&self) -> &[[f64; OBS_DIM]] {
        &self.current
    }

    /// Recomputes cached observations after environments were restored.
    pub fn refresh(&mut self) {
        for (c, env) in self.current.iter_mut().zip(&self.envs) {
            *c = env.observation().normalized(env.settings().limits.v_max);
        }
    }

    fn stacked(&self) -> Vec<f64> {
        self.current.iter().flat_map(|o| o.iter().copied()).collect()
    }
}

/// What an episode ending contributes beyond its final reward.
///
/// The stored transition stays marked done; a non-zero choice adds
/// `γ·V(·)` to that step's reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TerminalValue {
    /// Absorbing state: nothing follows.
    Zero,
    /// Value of the episode's final observation.
    Final,
    /// Value of the next episode's first observation.
    NextStart,
}

impl fmt::Display for TerminalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminalValue::Zero => "zero",
            TerminalValue::Final => "final",
            TerminalValue::NextStart => "next_start",
        })
    }
}

impl FromStr for TerminalValue {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zero" => Ok(TerminalValue::Zero),
            "final" => Ok(TerminalValue::Final),
            "next_start" => Ok(TerminalValue::NextStart),
            other => Err(format!(
                "unknown terminal value `{other}` (expected `zero`, `final` or `next_start`)"
            )),
        }
    }
}

impl TryFrom<String> for TerminalValue {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<TerminalValue> for String {
    fn from(t: TerminalValue) -> String {
        t.to_string()
    }
}

/// Rollout parameters taken from [`PpoConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub n_steps: usize,
    pub gamma: f64,
    pub reward_scale: f64,
    pub success_value: TerminalValue,
    pub timeout_value: TerminalValue,
    pub failure_value: TerminalValue,
}

impl RolloutOptions {
    pub fn plain(n_steps: usize) -> Self {
        Self {
            n_steps,
            gamma: 0.99,
            reward_scale: 1.0,
            success_value: TerminalValue::Zero,
            timeout_value: TerminalValue::Zero,
            failure_value: TerminalValue::Zero,
        }
    }

    fn terminal_value(&self, kind: OutcomeKind) -> TerminalValue {
        match kind {
            OutcomeKind::Success => self.success_value,
            OutcomeKind::Timeout => self.timeout_value,
            OutcomeKind::Collision | OutcomeKind::OutOfBounds => self.failure_value,
        }
    }
}

impl From<&PpoConfig> for RolloutOptions {
    fn from(c: &PpoConfig) -> Self {
        Self {
            n_steps: c.n_steps,
            gamma: c.gamma,
            reward_scale: c.reward_scale,
            success_value: c.success_value,
            timeout_value: c.timeout_value,
            failure_value: c.failure_value,
        }
    }
}

/// Runs `n_steps` synchronous steps with actions sampled from `params`.
///
/// Actions are sampled per environment in index order from `rng`; the
/// stored action is the unclipped sample, the environment receives it
/// clamped to `[-1, 1]`. Terminated environments are reset immediately
/// and their next stored observation is the fresh episode's first.
///
/// Episode endings add `γ·V(·)` to the stored reward as selected by the
/// outcome's [`TerminalValue`]; the step stays marked done, so the
/// advantage recursion itself is unchanged.
pub fn collect_rollout(
    venv: &mut VecEnv,
    params: &PolicyParams,
    opts: &RolloutOptions,
    rng: &mut StreamRng,
) -> Result<RolloutBuffer, EnvError> {
    let n_steps = opts.n_steps;
    let e = venv.len();
    let mut buf = RolloutBuffer::with_capacity(e, n_steps);
    for _ in 0..n_steps {
        let obs = venv.stacked();
        let f = params.forward_batch(&obs, e);
        buf.obs.extend_from_slice(&obs);
        for i in 0..e {
            let mean = &f.mean[i * ACT_DIM..(i + 1) * ACT_DIM];
            let (action, lp) = sample_action(mean, &f.log_std, rng);
            buf.actions.extend_from_slice(&action);
            buf.log_probs.push(lp);
            buf.means.extend_from_slice(mean);
            buf.log_stds.extend_from_slice(&f.log_std);
            buf.values.push(f.value[i]);

            let env = &mut venv.envs[i];
            let tr = env.step_normalized([action[0], action[1]])?;
            let mut reward = tr.reward.total * opts.reward_scale;
            let v_max = env.settings().limits.v_max;
            match tr.outcome {
                Some(outcome) => {
                    let fresh = env.reset()?.normalized(v_max);
                    let credited = match opts.terminal_value(outcome.kind) {
                        TerminalValue::Zero => None,
                        TerminalValue::Final => Some(tr.observation.normalized(v_max)),
                        TerminalValue::NextStart => Some(fresh),
                    };
                    if let Some(o) = credited {
                        reward += opts.gamma * params.forward_batch(&o, 1).value[0];
                    }
                    buf.rewards.push(reward);
                    buf.dones.push(true);
                    buf.outcomes.push(outcome);
                    venv.current[i] = fresh;
                }
                None => {
                    buf.rewards.push(reward);
                    buf.dones.push(false);
                    venv.current[i] = tr.observation.normalized(v_max);
                }
            }
        }
    }
    let f = params.forward_batch(&venv.stacked(), e);
    buf.bootstrap = f.value;
    Ok(buf)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean KL(old ‖ new) over the whole buffer after the update.
    pub mean_kl: f64,
    pub clip_fraction: f64,
    /// KL coefficient after adaptation.
    pub beta: f64,
    pub minibatches: usize,
    pub early_stopped: bool,
}

/// Mini-epoch passes over shuffled minibatches of `buf`.
///
/// Each epoch draws a Fisher–Yates permutation of the sample indices from
/// `rng` and consumes it in consecutive `minibatch_size` chunks. With
/// [`Objective::Clip`], the iteration stops as soon as a minibatch's KL to
/// the rollout policy exceeds `1.5·kl_target`.
pub fn ppo_update(
    params: &mut PolicyParams,
    adam: &mut AdamState,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    beta: f64,
    rng: &mut StreamRng,
) -> UpdateStats {
    let spec = cfg.loss_spec(beta);
    let mut indices: Vec<usize> = (0..buf.len()).collect();
    let mut acc = UpdateStats::default();
    'epochs: for _ in 0..cfg.mini_epochs {
        rng.shuffle(&mut indices);
        for chunk in indices.chunks(cfg.minibatch_size) {
            let batch = buf.batch(chunk);
            let (mut grads, stats) = backward(params, &batch, &spec);
            if cfg.objective == Objective::Clip && stats.kl > 1.5 * cfg.kl_target {
                acc.early_stopped = true;
                break 'epochs;
            }
            if cfg.max_grad_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.max_grad_norm);
            }
            adam_update(params, &grads, adam, cfg.lr);
            acc.policy_loss += stats.policy_loss;
            acc.value_loss += stats.value_loss;
            acc.entropy += stats.entropy;
            acc.clip_fraction += stats.clip_fraction;
            acc.minibatches += 1;
        }
    }
    if acc.minibatches > 0 {
        let n = acc.minibatches as f64;
        acc.policy_loss /= n;
        acc.value_loss /= n;
        acc.entropy /= n;
        acc.clip_fraction /= n;
    }
    acc.mean_kl = loss(params, &buf.full_batch(), &spec).kl;
    acc.beta = match cfg.objective {
        Objective::AdaptiveKl => adaptive_kl_update(beta, acc.mean_kl, cfg.kl_target),
        Objective::Clip => beta,
    };
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::DomainConfig;
    use crate::nn::Architecture;
    use crate::terrain::{generate_heightfield, TerrainConfig};

    /// `A_t = Σ_k (γλ)^k δ_{t+k}`, truncated at the first done.
    fn brute_force_gae(r: &[f64], v: &[f64], done: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    let next_v = if k + 1 < n { v[k + 1] } else { boot };
                    let live = if done[k] { 0.0 } else { 1.0 };
                    sum += w * (r[k] + g * next_v * live - v[k]);
                    if done[k] {
                        break;
                    }
                    w *= g * l;
                }
                sum
            })
            .collect()
    }

    fn random_rollout(rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>, Vec<bool>, f64) {
        let t = 1 + rng.below(16) as usize;
        let r = (0..t).map(|_| rng.normal()).collect();
        let v = (0..t).map(|_| rng.normal()).collect();
        let d = (0..t).map(|_| rng.uniform() < 0.2).collect();
        (r, v, d, rng.normal())
    }

    #[test]
    fn gae_examples() {
        let (a, r) = compute_gae(&[1.0], &[0.0], &[false], 0.0, 0.99, 0.95);
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        let (a, _) = compute_gae(&[1.0, 1.0], &[0.0, 0.0], &[false, false], 0.0, 0.99, 0.95);
        assert!((a[0] - 1.9405).abs() < 1e-12);
        assert_eq!(a[1], 1.0);
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = StreamRng::new(31, 0);
        for lambda in [0.0, 0.5, 0.95, 1.0] {
            for _ in 0..100 {
                let (r, v, d, b) = random_rollout(&mut rng);
                let (a, ret) = compute_gae(&r, &v, &d, b, 0.99, lambda);
                let oracle = brute_force_gae(&r, &v, &d, b, 0.99, lambda);
                for t in 0..r.len() {
                    assert!((a[t] - oracle[t]).abs() < 1e-10);
                    assert!((ret[t] - (a[t] + v[t])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gae_lambda_one_is_discounted_return_minus_value() {
        let mut rng = StreamRng::new(32, 0);
        for _ in 0..100 {
            let (r, v, _, b) = random_rollout(&mut rng);
            let d = vec![false; r.len()];
            let (a, _) = compute_gae(&r, &v, &d, b, 0.97, 1.0);
            for t in 0..r.len() {
                let mut g = 0.0;
                let mut w = 1.0;
                for rk in &r[t..] {
                    g += w * rk;
                    w *= 0.97;
                }
                g += w * b;
                assert!((a[t] - (g - v[t])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gae_lambda_zero_is_td_residual() {
        let mut rng = StreamRng::new(33, 0);
        for _ in 0..100 {
            let (r, v, d, b) = random_rollout(&mut rng);
            let (a, _) = compute_gae(&r, &v, &d, b, 0.99, 0.0);
            for t in 0..r.len() {
                let next = if t + 1 < r.len() { v[t + 1] } else { b };
                let live = if d[t] { 0.0 } else { 1.0 };
                assert_eq!(a[t], r[t] + 0.99 * next * live - v[t]);
            }
        }
    }

    #[test]
    fn normalization_moments() {
        let mut rng = StreamRng::new(34, 0);
        let mut a: Vec<f64> = (0..777).map(|_| 3.0 + 5.0 * rng.normal()).collect();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
        let mut one = vec![4.0];
        normalize_advantages(&mut one);
        assert_eq!(one, vec![4.0]);
    }

    #[test]
    fn clip_objective_examples_and_bound() {
        assert_eq!(clip_objective(1.0, -3.0, 0.2), -3.0);
        assert!((clip_objective(1.5, 2.0, 0.2) - 2.4).abs() < 1e-12);
        assert!((clip_objective(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        let mut rng = StreamRng::new(35, 0);
        for _ in 0..10_000 {
            let r = rng.uniform_range(0.01, 3.0);
            let a = rng.normal() * 3.0;
            let o = clip_objective(r, a, 0.2);
            assert!(o <= r * a);
            if (0.8..=1.2).contains(&r) {
                assert_eq!(o, r * a);
            }
        }
    }

    #[test]
    fn kl_penalty_examples() {
        assert_eq!(kl_penalty_objective(1.0, 0.7, 0.0, 3.0), 0.7);
        assert!((kl_penalty_objective(1.2, 1.0, 0.01, 2.0) - 1.18).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for beta in [0.1, 1.0, 10.0, 1e3, 1e6] {
            let o = kl_penalty_objective(1.1, 1.0, 0.05, beta);
            assert!(o < prev);
            prev = o;
        }
        assert_eq!(gaussian_kl(&[0.3, 0.1], &[-0.2, 0.4], &[0.3, 0.1], &[-0.2, 0.4]), 0.0);
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let mut rng = StreamRng::new(36, 0);
        let (om, ol) = ([0.2, -0.1], [-0.3, 0.1]);
        let (nm, nl) = ([0.5, 0.0], [-0.1, -0.2]);
        let n = 400_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let (a, lp_old) = sample_action(&om, &ol, &mut rng);
            acc += lp_old - crate::nn::log_prob(&nm, &nl, &a);
        }
        let mc = acc / n as f64;
        let exact = gaussian_kl(&om, &ol, &nm, &nl);
        assert!((mc - exact).abs() < 0.01, "{mc} vs {exact}");
    }

    #[test]
    fn adaptive_kl_examples() {
        assert_eq!(adaptive_kl_update(1.0, 0.008, 0.008), 1.0);
        assert_eq!(adaptive_kl_update(1.0, 0.02, 0.008), 2.0);
        assert_eq!(adaptive_kl_update(1.0, 0.004, 0.008), 0.5);
        assert_eq!(adaptive_kl_update(1e4, 1.0, 0.008), 1e4);
        assert_eq!(adaptive_kl_update(1e-4, 0.0, 0.008), 1e-4);
    }

    #[test]
    fn config_presets_validate() {
        PpoConfig::desk_scale().validate().unwrap();
        PpoConfig::full_scale().validate().unwrap();
        let bad = PpoConfig {
            minibatch_size: 500,
            ..PpoConfig::desk_scale()
        };
        assert!(bad.validate().unwrap_err().contains("does not divide"));
    }

    fn flat_venv(n_envs: usize, obstacles: usize, seed: u64) -> VecEnv {
        let mut domain = DomainConfig::farm(TerrainConfig::flat(15.0));
        domain.obstacle_count = obstacles;
        let hf = Arc::new(generate_heightfield(&domain.terrain).unwrap());
        VecEnv::new(Arc::new(EnvSettings::new(domain)), hf, n_envs, seed, 0).unwrap()
    }

    fn small_params(seed: u64) -> PolicyParams {
        PolicyParams::init(
            Architecture {
                obs_dim: OBS_DIM,
                hidden: vec![16, 16, 8],
                act_dim: ACT_DIM,
            },
            &mut StreamRng::new(seed, 100),
        )
    }

    #[test]
    fn rollout_capacity() {
        let mut venv = flat_venv(2, 0, 1);
        let p = small_params(1);
        let buf = collect_rollout(&mut venv, &p, &RolloutOptions::plain(1), &mut StreamRng::new(1, 200)).unwrap();
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.obs.len(), 2 * OBS_DIM);
        assert_eq!(buf.bootstrap.len(), 2);
    }

    #[test]
    fn rollout_is_deterministic() {
        let run = || {
            let mut venv = flat_venv(3, 10, 4);
            let p = small_params(4);
            collect_rollout(&mut venv, &p, &RolloutOptions::plain(50), &mut StreamRng::new(4, 200)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn terminal_step_is_followed_by_reset_observation() {
        // Drive straight from a start placed next to the arena edge.
        let mut venv = flat_venv(1, 0, 5);
        let env = &mut venv.envs[0];
        let mut layout = env.layout();
        layout.start = (6.9, 0.0, 0.0);
        env.load_layout(&layout);
        venv.refresh();
        // A policy that always outputs full forward speed and no turn.
        let mut p = small_params(5);
        let actor = p.layout().actor;
        for v in &mut p.flat_mut()[actor.weight..actor.bias + actor.outputs] {
            *v = 0.0;
        }
        p.flat_mut()[actor.bias] = 1.0;
        for v in p.log_std_param_mut() {
            *v = -5.0;
        }
        let buf = collect_rollout(&mut venv, &p, &RolloutOptions::plain(20), &mut StreamRng::new(5, 200)).unwrap();
        let k = buf.dones.iter().position(|d| *d).expect("episode must end");
        assert_eq!(buf.outcomes[0].kind, crate::env::OutcomeKind::OutOfBounds);
        let next = &buf.obs[(k + 1) * OBS_DIM..(k + 2) * OBS_DIM];
        let fresh = venv.envs[0].layout();
        // The observation after the terminal step starts at rest.
        assert!(next[8..].iter().all(|w| *w == 0.0));
        assert!(next[0].abs() * 15.0 <= 7.5 && fresh.goal != (0.0, 0.0));
    }

    fn synthetic_buffer(p: &PolicyParams, n: usize, seed: u64) -> RolloutBuffer {
        let mut rng = StreamRng::new(seed, 0);
        let mut buf = RolloutBuffer::with_capacity(1, n);
        for _ in 0..n {
            let obs: Vec<f64> = (0..OBS_DIM).map(|_| rng.normal() * 0.5).collect();
            let out = p.forward(&obs).unwrap();
            let (a, lp) = sample_action(&out.mean, &out.log_std, &mut rng);
            buf.obs.extend(&obs);
            buf.actions.extend(&a);
            buf.log_probs.push(lp);
            buf.means.extend(&out.mean);
            buf.log_stds.extend(&out.log_std);
            buf.values.push(out.value);
            buf.rewards.push(rng.normal());
            buf.dones.push(rng.uniform() < 0.05);
        }
        buf.bootstrap = vec![0.0];
        buf
    }

    fn test_cfg() -> PpoConfig {
        PpoConfig {
            n_steps: 64,
            n_envs: 1,
            minibatch_size: 16,
            mini_epochs: 2,
            ..PpoConfig::desk_scale()
        }
    }

    #[test]
    fn update_is_reproducible() {
        let run = || {
            let mut p = small_params(7);
            let mut buf = synthetic_buffer(&p, 64, 7);
            buf.compute_advantages(0.99, 0.95, true);
            let mut adam = AdamState::new(p.len());
            let stats = ppo_update(&mut p, &mut adam, &buf, &test_cfg(), 1.0, &mut StreamRng::new(7, 300));
            (p, stats)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn stationary_buffer_moves_only_log_std() {
        let mut p = small_params(8);
        let mut buf = synthetic_buffer(&p, 64, 8);
        buf.advantages = vec![0.0; 64];
        buf.returns = buf.values.clone();
        let before = p.clone();
        let cfg = PpoConfig {
            normalize_advantages: false,
            bound_coef: 0.0,
            mini_epochs: 1,
            minibatch_size: 64,
            ..test_cfg()
        };
        let mut adam = AdamState::new(p.len());
        ppo_update(&mut p, &mut adam, &buf, &cfg, 1.0, &mut StreamRng::new(8, 300));
        let ls = p.layout().log_std;
        for (i, (a, b)) in p.flat().iter().zip(before.flat()).enumerate() {
            if i == ls || i == ls + 1 {
                assert!(a > b, "entropy bonus should widen σ");
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn small_step_does_not_decrease_surrogate() {
        for seed in 0..10 {
            let mut p = small_params(40 + seed);
            let mut buf = synthetic_buffer(&p, 64, 40 + seed);
            buf.compute_advantages(0.99, 0.95, true);
            let cfg = PpoConfig {
                lr: 1e-5,
                mini_epochs: 1,
                minibatch_size: 64,
                critic_coef: 0.0,
                entropy_coef: 0.0,
                bound_coef: 0.0,
                ..test_cfg()
            };
            let spec = cfg.loss_spec(1.0);
            let before = -loss(&p, &buf.full_batch(), &spec).policy_loss;
            let mut adam = AdamState::new(p.len());
            ppo_update(&mut p, &mut adam, &buf, &cfg, 1.0, &mut StreamRng::new(seed, 300));
            let after = -loss(&p, &buf.full_batch(), &spec).policy_loss;
            assert!(after >= before, "seed {seed}: {before} -> {after}");
        }
    }
}
