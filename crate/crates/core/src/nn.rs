//! Actor-critic MLP with a diagonal-Gaussian policy head.
//!
//! A shared tanh trunk (default `12 → 128 → 128 → 64`) feeds a linear action
//! mean head and a linear value head. The policy log-std is a free,
//! state-independent parameter vector, clamped to `[-5, 2]` when used.
//!
//! # Parameter layout
//!
//! All parameters live in one flat `Vec<f64>` in canonical order:
//!
//! ```text
//! trunk[0].weight (out×in, row-major), trunk[0].bias,
//! trunk[1].weight, trunk[1].bias, ..., trunk[n-1].bias,
//! actor_mean.weight (act×hidden), actor_mean.bias,
//! log_std (act),
//! critic.weight (1×hidden), critic.bias
//! ```
//!
//! Gradients and optimizer moments use the same layout.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ppo::{clip_objective, gaussian_kl, kl_penalty_objective, Objective};
use crate::rng::StreamRng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Action-mean magnitude beyond which the bound loss applies.
pub const BOUND_LIMIT: f64 = 1.1;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("non-finite value in policy input at index {0}")]
    NonFiniteInput(usize),
    #[error("parameter shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub act_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            obs_dim: 12,
            hidden: vec![128, 128, 64],
            act_dim: 2,
        }
    }
}

impl Architecture {
    /// Compact shape descriptor, e.g. `12-128-128-64:2`.
    pub fn shape_string(&self) -> String {
        let mut s = self.obs_dim.to_string();
        for h in &self.hidden {
            s.push('-');
            s.push_str(&h.to_string());
        }
        format!("{s}:{}", self.act_dim)
    }

    pub fn parse_shape(s: &str) -> Option<Self> {
        let (trunk, act) = s.split_once(':')?;
        let act_dim = act.parse().ok()?;
        let mut dims = trunk.split('-').map(|d| d.parse::<usize>().ok());
        let obs_dim = dims.next()??;
        let hidden: Option<Vec<usize>> = dims.collect();
        let hidden = hidden?;
        if hidden.is_empty() {
            return None;
        }
        Some(Self {
            obs_dim,
            hidden,
            act_dim,
        })
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSlot {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: usize,
    pub bias: usize,
}

impl DenseSlot {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight..self.weight + self.inputs * self.outputs
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias..self.bias + self.outputs
    }
}

/// Offsets of every parameter group in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub trunk: Vec<DenseSlot>,
    pub actor: DenseSlot,
    pub log_std: usize,
    pub critic: DenseSlot,
    pub len: usize,
}

impl ParamLayout {
    fn new(arch: &Architecture) -> Self {
        let mut off = 0;
        let mut slot = |inputs: usize, outputs: usize| {
            let s = DenseSlot {
                inputs,
                outputs,
                weight: off,
                bias: off + inputs * outputs,
            };
            off += inputs * outputs + outputs;
            s
        };
        let mut trunk = Vec::with_capacity(arch.hidden.len());
        let mut width = arch.obs_dim;
        for &h in &arch.hidden {
            trunk.push(slot(width, h));
            width = h;
        }
        let actor = slot(width, arch.act_dim);
        let log_std = off;
        off += arch.act_dim;
        let critic = DenseSlot {
            inputs: width,
            outputs: 1,
            weight: off,
            bias: off + width,
        };
        off += width + 1;
        Self {
            trunk,
            actor,
            log_std,
            critic,
            len: off,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Architecture,
    layout: ParamLayout,
    data: Vec<f64>,
}

/// Gradient with the same shape and layout as [`PolicyParams`].
pub type GradientBundle = PolicyParams;

impl PolicyParams {
    pub fn zeros(arch: Architecture) -> Self {
        let layout = arch.layout();
        let data = vec![0.0; layout.len];
        Self { arch, layout, data }
    }

    /// Orthogonal init: gain √2 on the trunk, 0.01 on the action mean, 1.0
    /// on the critic; zero biases; log-std 0.
    pub fn init(arch: Architecture, rng: &mut StreamRng) -> Self {
        let mut p = Self::zeros(arch);
        let trunk = p.layout.trunk.clone();
        for slot in &trunk {
            orthogonal_fill(&mut p.data[slot.weight_range()], slot.outputs, slot.inputs, 2f64.sqrt(), rng);
        }
        let actor = p.layout.actor;
        orthogonal_fill(&mut p.data[actor.weight_range()], actor.outputs, actor.inputs, 0.01, rng);
        let critic = p.layout.critic;
        orthogonal_fill(&mut p.data[critic.weight_range()], critic.outputs, critic.inputs, 1.0, rng);
        p
    }

    pub fn from_flat(arch: Architecture, data: Vec<f64>) -> Result<Self, NnError> {
        let layout = arch.layout();
        if data.len() != layout.len {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} parameters", layout.len),
                found: format!("{} parameters", data.len()),
            });
        }
        Ok(Self { arch, layout, data })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch.clone())
    }

    /// Raw (unclamped) log-std parameters.
    pub fn log_std_param(&self) -> &[f64] {
        &self.data[self.layout.log_std..self.layout.log_std + self.arch.act_dim]
    }

    pub fn log_std_param_mut(&mut self) -> &mut [f64] {
        let (o, n) = (self.layout.log_std, self.arch.act_dim);
        &mut self.data[o..o + n]
    }

    /// Log-std in use, clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn log_std(&self) -> Vec<f64> {
        self.log_std_param()
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    pub fn weights(&self, slot: &DenseSlot) -> &[f64] {
        &self.data[slot.weight_range()]
    }

    pub fn biases(&self, slot: &DenseSlot) -> &[f64] {
        &self.data[slot.bias_range()]
    }

    /// Single-observation forward pass.
    pub fn forward(&self, obs: &[f64]) -> Result<PolicyOutput, NnError> {
        if let Some(i) = obs.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput(i));
        }
        let f = self.forward_batch(obs, 1);
        Ok(PolicyOutput {
            mean: f.mean,
            log_std: f.log_std,
            value: f.value[0],
        })
    }

    /// Forward pass over `batch` row-major observations.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> ForwardCache {
        assert_eq!(inputs.len(), batch * self.arch.obs_dim, "input shape");
        let mut acts = Vec::with_capacity(self.layout.trunk.len() + 1);
        acts.push(inputs.to_vec());
        for slot in &self.layout.trunk {
            let mut out = vec![0.0; batch * slot.outputs];
            dense(acts.last().unwrap(), batch, self.weights(slot), self.biases(slot), slot, &mut out);
            out.iter_mut().for_each(|v| *v = v.tanh());
            acts.push(out);
        }
        let features = acts.last().unwrap();
        let actor = &self.layout.actor;
        let mut mean = vec![0.0; batch * actor.outputs];
        dense(features, batch, self.weights(actor), self.biases(actor), actor, &mut mean);
        let critic = &self.layout.critic;
        let mut value = vec![0.0; batch];
        dense(features, batch, self.weights(critic), self.biases(critic), critic, &mut value);
        ForwardCache {
            batch,
            acts,
            mean,
            value,
            log_std: self.log_std(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: f64,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    /// `acts[0]` is the input; `acts[i + 1]` the output of trunk layer `i`.
    pub acts: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub value: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// `out[b, o] = bias[o] + Σ_i x[b, i] · w[o, i]`.
fn dense(x: &[f64], batch: usize, w: &[f64], b: &[f64], slot: &DenseSlot, out: &mut [f64]) {
    let (k, n) = (slot.inputs, slot.outputs);
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(b);
    }
    // SAFETY: slice lengths match the (batch×k)·(k×n) → (batch×n) shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            batch,
            k,
            n,
            1.0,
            x.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Accumulates the weight and bias gradients of a dense layer and returns
/// the gradient with respect to its input.
fn dense_backward(
    x: &[f64],
    d_out: &[f64],
    batch: usize,
    w: &[f64],
    slot: &DenseSlot,
    grad: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let (k, n) = (slot.inputs, slot.outputs);
    {
        let gw = &mut grad[slot.weight_range()];
        // SAFETY: dWᵀ shapes: (n×batch)·(batch×k) → (n×k).
        unsafe {
            matrixmultiply::dgemm(
                n,
                batch,
                k,
                1.0,
                d_out.as_ptr(),
                1,
                n as isize,
                x.as_ptr(),
                k as isize,
                1,
                1.0,
                gw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
    }
    let gb = &mut grad[slot.bias_range()];
    for row in d_out.chunks_exact(n) {
        for (g, d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    if !need_input_grad {
        return None;
    }
    let mut dx = vec![0.0; batch * k];
    // SAFETY: (batch×n)·(n×k) → (batch×k).
    unsafe {
        matrixmultiply::dgemm(
            batch,
            n,
            k,
            1.0,
            d_out.as_ptr(),
            n as isize,
            1,
            w.as_ptr(),
            k as isize,
            1,
            0.0,
            dx.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    Some(dx)
}

fn orthogonal_fill(w: &mut [f64], rows: usize, cols: usize, gain: f64, rng: &mut StreamRng) {
    // Orthonormalize the columns of a tall random matrix, then transpose if
    // the layer is wide.
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut q: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..tall).map(|_| rng.normal()).collect())
        .collect();
    for j in 0..short {
        for i in 0..j {
            let dot: f64 = q[j].iter().zip(&q[i]).map(|(a, b)| a * b).sum();
            let qi = q[i].clone();
            q[j].iter_mut().zip(&qi).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        q[j].iter_mut().for_each(|v| *v /= norm);
    }
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain * if rows >= cols { q[c][r] } else { q[r][c] };
        }
    }
}

/// Diagonal-Gaussian log density summed over action dimensions.
pub fn log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Differential entropy of the diagonal Gaussian.
pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
}

/// Draws `mean + σ ⊙ ε` and returns it with its log density.
pub fn sample_action(mean: &[f64], log_std: &[f64], rng: &mut StreamRng) -> (Vec<f64>, f64) {
    let action: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(m, ls)| m + ls.exp() * rng.normal())
        .collect();
    let lp = log_prob(mean, log_std, &action);
    (action, lp)
}

/// Composite-loss weights and objective selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub objective: Objective,
    pub clip_eps: f64,
    /// KL penalty coefficient (used by [`Objective::AdaptiveKl`]).
    pub beta: f64,
    pub critic_coef: f64,
    pub entropy_coef: f64,
    pub bound_coef: f64,
}

/// Training samples, row-major per field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub old_log_prob: Vec<f64>,
    pub old_mean: Vec<f64>,
    pub old_log_std: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub total: f64,
    /// Negated mean surrogate objective.
    pub policy_loss: f64,
    /// Mean squared value error (unweighted).
    pub value_loss: f64,
    pub entropy: f64,
    pub bound_loss: f64,
    /// Mean closed-form KL(old ‖ new).
    pub kl: f64,
    /// Fraction of samples with `|ratio − 1| > ε`.
    pub clip_fraction: f64,
}

struct HeadGrads {
    d_mean: Vec<f64>,
    d_value: Vec<f64>,
    d_log_std: Vec<f64>,
    stats: LossStats,
}

/// Evaluates the composite loss on the cached forward pass and, when
/// `with_grads`, its gradient with respect to the head outputs.
///
/// `loss = −mean(objective) + c_v·½·mean((V − R)²) − c_e·H + c_b·mean(max(0, |μ| − 1.1)²)`
fn head_loss(
    params: &PolicyParams,
    f: &ForwardCache,
    batch: &Batch,
    spec: &LossSpec,
    with_grads: bool,
) -> HeadGrads {
    let n = f.batch;
    let act = params.arch.act_dim;
    let inv_n = 1.0 / n as f64;
    let ls = &f.log_std;
    let sigma: Vec<f64> = ls.iter().map(|v| v.exp()).collect();

    let mut d_mean = vec![0.0; if with_grads { n * act } else { 0 }];
    let mut d_value = vec![0.0; if with_grads { n } else { 0 }];
    let mut d_ls = vec![0.0; act];

    let mut objective_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    let mut value_sq = 0.0;
    let mut bound_sum = 0.0;

    for i in 0..n {
        let mu = &f.mean[i * act..(i + 1) * act];
        let a = &batch.actions[i * act..(i + 1) * act];
        let old_mu = &batch.old_mean[i * act..(i + 1) * act];
        let old_ls = &batch.old_log_std[i * act..(i + 1) * act];
        let adv = batch.advantages[i];

        let logp = log_prob(mu, ls, a);
        let ratio = (logp - batch.old_log_prob[i]).exp();
        if (ratio - 1.0).abs() > spec.clip_eps {
            clipped += 1;
        }
        let kl = gaussian_kl(old_mu, old_ls, mu, ls);
        kl_sum += kl;

        // d objective / d logp, and the KL weight applied to dKL.
        let (obj, d_logp, kl_weight) = match spec.objective {
            Objective::Clip => {
                let obj = clip_objective(ratio, adv, spec.clip_eps);
                let clipped_branch = (adv >= 0.0 && ratio > 1.0 + spec.clip_eps)
                    || (adv < 0.0 && ratio < 1.0 - spec.clip_eps);
                (obj, if clipped_branch { 0.0 } else { ratio * adv }, 0.0)
            }
            Objective::AdaptiveKl => (
                kl_penalty_objective(ratio, adv, kl, spec.beta),
                ratio * adv,
                spec.beta,
            ),
        };
        objective_sum += obj;

        let err = f.value[i] - batch.returns[i];
        value_sq += err * err;

        for d in 0..act {
            let excess = (mu[d].abs() - BOUND_LIMIT).max(0.0);
            bound_sum += excess * excess;
            if !with_grads {
                continue;
            }
            let z = (a[d] - mu[d]) / sigma[d];
            let var_new = sigma[d] * sigma[d];
            let var_old = (2.0 * old_ls[d]).exp();
            let diff = old_mu[d] - mu[d];
            // Policy term: loss = −mean(obj); obj depends on logp and KL.
            let dlogp_dmu = z / sigma[d];
            let dlogp_dls = z * z - 1.0;
            let dkl_dmu = -diff / var_new;
            let dkl_dls = 1.0 - (var_old + diff * diff) / var_new;
            let mut g_mu = -(d_logp * dlogp_dmu - kl_weight * dkl_dmu) * inv_n;
            d_ls[d] += -(d_logp * dlogp_dls - kl_weight * dkl_dls) * inv_n;
            // Bound term: mean over n·act entries.
            g_mu += spec.bound_coef * 2.0 * excess * mu[d].signum() / (n * act) as f64;
            d_mean[i * act + d] = g_mu;
        }
        if with_grads {
            d_value[i] = spec.critic_coef * err * inv_n;
        }
    }
    // Entropy term: −c_e · Σ_d (ls_d + const), identical for every sample.
    for g in d_ls.iter_mut() {
        *g -= spec.entropy_coef;
    }

    let policy_loss = -objective_sum * inv_n;
    let value_loss = value_sq * inv_n;
    let ent = entropy(ls);
    let bound_loss = bound_sum / (n * act) as f64;
    let total = policy_loss + spec.critic_coef * 0.5 * value_loss - spec.entropy_coef * ent
        + spec.bound_coef * bound_loss;
    HeadGrads {
        d_mean,
        d_value,
        d_log_std: d_ls,
        stats: LossStats {
            total,
            policy_loss,
            value_loss,
            entropy: ent,
            bound_loss,
            kl: kl_sum * inv_n,
            clip_fraction: clipped as f64 * inv_n,
        },
    }
}

/// Composite PPO loss without gradients.
pub fn loss(params: &PolicyParams, batch: &Batch, spec: &LossSpec) -> LossStats {
    let f = params.forward_batch(&batch.obs, batch.len());
    head_loss(params, &f, batch, spec, false).stats
}

/// Exact gradient of the composite PPO loss with respect to every parameter.
pub fn backward(params: &PolicyParams, batch: &Batch, spec: &LossSpec) -> (GradientBundle, LossStats) {
    assert!(!batch.is_empty(), "empty minibatch");
    let n = batch.len();
    let f = params.forward_batch(&batch.obs, n);
    let heads = head_loss(params, &f, batch, spec, true);
    let layout = &params.layout;
    let mut grad = params.zeros_like();

    for (d, (g, raw)) in heads.d_log_std.iter().zip(params.log_std_param()).enumerate() {
        if *raw > LOG_STD_MIN && *raw < LOG_STD_MAX {
            grad.data[layout.log_std + d] = *g;
        }
    }

    let features = f.acts.last().unwrap();
    let mut d_feat = dense_backward(
        features,
        &heads.d_mean,
        n,
        params.weights(&layout.actor),
        &layout.actor,
        &mut grad.data,
        true,
    )
    .unwrap();
    let d_feat_critic = dense_backward(
        features,
        &heads.d_value,
        n,
        params.weights(&layout.critic),
        &layout.critic,
        &mut grad.data,
        true,
    )
    .unwrap();
    d_feat.iter_mut().zip(&d_feat_critic).for_each(|(a, b)| *a += b);

    let mut d_act = d_feat;
    for (li, slot) in layout.trunk.iter().enumerate().rev() {
        let out = &f.acts[li + 1];
        let d_pre: Vec<f64> = d_act.iter().zip(out).map(|(d, y)| d * (1.0 - y * y)).collect();
        match dense_backward(&f.acts[li], &d_pre, n, params.weights(slot), slot, &mut grad.data, li > 0) {
            Some(dx) => d_act = dx,
            None => break,
        }
    }
    (grad, heads.stats)
}

/// Adam first/second moments over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step (β1 = 0.9, β2 = 0.999, ε = 1e-8).
pub fn adam_update(params: &mut PolicyParams, grads: &GradientBundle, state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "gradient shape");
    assert_eq!(params.len(), state.m.len(), "moment shape");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .data
        .iter_mut()
        .zip(&grads.data)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Scales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm(grads: &mut GradientBundle, max_norm: f64) -> f64 {
    let norm = grads.data.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.data.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Natural log of 2π, exposed for closed-form checks.
pub fn ln_two_pi() -> f64 {
    (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture {
            obs_dim: 12,
            hidden: vec![7, 5, 4],
            act_dim: 2,
        }
    }

    fn naive_forward(p: &PolicyParams, x: &[f64]) -> (Vec<f64>, f64) {
        let mut h = x.to_vec();
        for slot in &p.layout.trunk {
            let w = p.weights(slot);
            let b = p.biases(slot);
            h = (0..slot.outputs)
                .map(|o| (b[o] + (0..slot.inputs).map(|i| w[o * slot.inputs + i] * h[i]).sum::<f64>()).tanh())
                .collect();
        }
        let head = |slot: &DenseSlot| -> Vec<f64> {
            let w = p.weights(slot);
            let b = p.biases(slot);
            (0..slot.outputs)
                .map(|o| b[o] + (0..slot.inputs).map(|i| w[o * slot.inputs + i] * h[i]).sum::<f64>())
                .collect()
        };
        (head(&p.layout.actor), head(&p.layout.critic)[0])
    }

    #[test]
    fn default_layout_size() {
        let l = Architecture::default().layout();
        let expected = (12 * 128 + 128) + (128 * 128 + 128) + (128 * 64 + 64) + (64 * 2 + 2) + 2 + (64 + 1);
        assert_eq!(l.len, expected);
        assert_eq!(l.critic.bias + 1, l.len);
    }

    #[test]
    fn shape_string_round_trip() {
        let a = Architecture::default();
        assert_eq!(a.shape_string(), "12-128-128-64:2");
        assert_eq!(Architecture::parse_shape(&a.shape_string()), Some(a));
        assert_eq!(Architecture::parse_shape("12:2"), None);
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let p = PolicyParams::zeros(Architecture::default());
        let out = p.forward(&[0.3; 12]).unwrap();
        assert_eq!(out.mean, vec![0.0, 0.0]);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = StreamRng::new(1, 0);
        let p = PolicyParams::init(Architecture::default(), &mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let out = p.forward(&x).unwrap();
        let (mean, value) = naive_forward(&p, &x);
        for (a, b) in out.mean.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.value - value).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let mk = || PolicyParams::init(Architecture::default(), &mut StreamRng::new(5, 0));
        let (a, b) = (mk(), mk());
        assert_eq!(a, b);
        let x = [0.1; 12];
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = PolicyParams::zeros(Architecture::default());
        let mut x = [0.0; 12];
        x[4] = f64::NAN;
        assert_eq!(p.forward(&x), Err(NnError::NonFiniteInput(4)));
    }

    #[test]
    fn saturated_trunk_matches_sign_oracle() {
        let mut rng = StreamRng::new(2, 0);
        let p = PolicyParams::init(Architecture::default(), &mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.normal() * 1e6).collect();
        let out = p.forward(&x).unwrap();
        // Oracle: first hidden layer replaced by the sign of its pre-activation.
        let first = &p.layout.trunk[0];
        let w = p.weights(first);
        let mut h: Vec<f64> = (0..first.outputs)
            .map(|o| (0..12).map(|i| w[o * 12 + i] * x[i]).sum::<f64>().signum())
            .collect();
        for slot in &p.layout.trunk[1..] {
            let w = p.weights(slot);
            let b = p.biases(slot);
            h = (0..slot.outputs)
                .map(|o| (b[o] + (0..slot.inputs).map(|i| w[o * slot.inputs + i] * h[i]).sum::<f64>()).tanh())
                .collect();
        }
        let a = &p.layout.actor;
        let wa = p.weights(a);
        for d in 0..2 {
            let m: f64 = (0..a.inputs).map(|i| wa[d * a.inputs + i] * h[i]).sum();
            assert!((m - out.mean[d]).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_init_rows_or_columns_are_orthonormal() {
        let mut rng = StreamRng::new(3, 0);
        let p = PolicyParams::init(Architecture::default(), &mut rng);
        let slot = p.layout.trunk[0]; // 128×12: columns orthonormal·√2
        let w = p.weights(&slot);
        for a in 0..12 {
            for b in 0..12 {
                let dot: f64 = (0..128).map(|r| w[r * 12 + a] * w[r * 12 + b]).sum();
                let expected = if a == b { 2.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-9);
            }
        }
        assert!(p.biases(&slot).iter().all(|b| *b == 0.0));
        assert_eq!(p.log_std(), vec![0.0, 0.0]);
    }

    #[test]
    fn log_prob_closed_forms() {
        let mode = log_prob(&[0.3, -0.2], &[0.0, 0.0], &[0.3, -0.2]);
        assert!((mode + ln_two_pi()).abs() < 1e-12);
        assert!((mode + 1.837877).abs() < 1e-6);
        let one_sigma = log_prob(&[0.3, -0.2], &[0.0, 0.0], &[1.3, -0.2]);
        assert!((one_sigma - (mode - 0.5)).abs() < 1e-12);
        assert!((one_sigma + 2.337877).abs() < 1e-6);
        let a = [0.5, 0.1];
        let lp = log_prob(&[0.1, 0.1], &[0.2, -0.3], &a);
        assert_eq!((lp - lp).exp(), 1.0);
    }

    #[test]
    fn sampling_is_consistent_and_tight() {
        let mut rng = StreamRng::new(4, 0);
        let mean = [0.2, -0.4];
        let tight = [-5.0, -5.0];
        let mut inside = 0;
        for _ in 0..10_000 {
            let (a, lp) = sample_action(&mean, &tight, &mut rng);
            assert!((lp - log_prob(&mean, &tight, &a)).abs() < 1e-12);
            if (a[0] - mean[0]).abs() < 0.07 && (a[1] - mean[1]).abs() < 0.07 {
                inside += 1;
            }
        }
        assert!(inside as f64 / 10_000.0 > 0.9999);
        let mut r1 = StreamRng::new(9, 1);
        let mut r2 = StreamRng::new(9, 1);
        assert_eq!(sample_action(&mean, &[0.0, 0.0], &mut r1), sample_action(&mean, &[0.0, 0.0], &mut r2));
    }

    #[test]
    fn density_integrates_to_one() {
        // Importance estimate of ∫ p(a) da with a Gaussian proposal 1.5× wider,
        // its density written out independently of `log_prob`.
        let mut rng = StreamRng::new(6, 0);
        for _ in 0..3 {
            let mean = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
            let ls = [rng.uniform_range(-1.0, 0.5), rng.uniform_range(-1.0, 0.5)];
            let sq: Vec<f64> = ls.iter().map(|l| 1.5 * l.exp()).collect();
            let n = 100_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let z = [rng.normal(), rng.normal()];
                let a = [mean[0] + sq[0] * z[0], mean[1] + sq[1] * z[1]];
                let q = (-0.5 * (z[0] * z[0] + z[1] * z[1])).exp() / (2.0 * PI * sq[0] * sq[1]);
                acc += log_prob(&mean, &ls, &a).exp() / q;
            }
            let integral = acc / n as f64;
            assert!((integral - 1.0).abs() < 0.01, "{integral}");
        }
    }

    fn random_batch(arch: &Architecture, p: &PolicyParams, n: usize, rng: &mut StreamRng) -> Batch {
        // Old policy: a perturbed copy, so ratios spread around 1.
        let mut old = p.clone();
        old.flat_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
        let mut b = Batch::default();
        for _ in 0..n {
            let x: Vec<f64> = (0..arch.obs_dim).map(|_| rng.normal()).collect();
            let out = old.forward(&x).unwrap();
            let (a, lp) = sample_action(&out.mean, &out.log_std, rng);
            b.obs.extend(&x);
            b.actions.extend(&a);
            b.old_log_prob.push(lp);
            b.old_mean.extend(&out.mean);
            b.old_log_std.extend(&out.log_std);
            b.advantages.push(rng.normal());
            b.returns.push(rng.normal());
        }
        b
    }

    fn spec(objective: Objective) -> LossSpec {
        LossSpec {
            objective,
            clip_eps: 0.2,
            beta: 0.7,
            critic_coef: 4.0,
            entropy_coef: 0.005,
            bound_coef: 0.0001,
        }
    }

    fn perturbed(arch: &Architecture, rng: &mut StreamRng) -> PolicyParams {
        let mut p = PolicyParams::init(arch.clone(), rng);
        // Large actor weights so the bound term and clip branches engage.
        let actor = p.layout.actor;
        for v in &mut p.flat_mut()[actor.weight..actor.bias + actor.outputs] {
            *v += 0.8 * rng.normal();
        }
        let n = p.len();
        for v in &mut p.flat_mut()[..n] {
            *v += 0.01 * rng.normal();
        }
        for v in p.log_std_param_mut() {
            *v = rng.uniform_range(-1.0, 0.5);
        }
        p
    }

    #[test]
    fn gradient_matches_finite_differences_every_parameter() {
        let arch = Architecture::default();
        let mut rng = StreamRng::new(21, 0);
        for objective in [Objective::Clip, Objective::AdaptiveKl] {
            let p = perturbed(&arch, &mut rng);
            let batch = random_batch(&arch, &p, 8, &mut rng);
            let s = spec(objective);
            let (g, _) = backward(&p, &batch, &s);
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            let mut q = p.clone();
            for i in 0..p.len() {
                let orig = q.flat()[i];
                q.flat_mut()[i] = orig + h;
                let up = loss(&q, &batch, &s).total;
                q.flat_mut()[i] = orig - h;
                let down = loss(&q, &batch, &s).total;
                q.flat_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = g.flat()[i];
                let err = (a - fd).abs();
                if err > 1e-6 {
                    worst = worst.max(err / a.abs().max(fd.abs()));
                }
            }
            assert!(worst < 1e-4, "{objective:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn stationary_batch_leaves_only_entropy_and_bound() {
        let arch = small_arch();
        let mut rng = StreamRng::new(22, 0);
        let p = PolicyParams::init(arch.clone(), &mut rng);
        let mut batch = random_batch(&arch, &p, 6, &mut rng);
        batch.advantages.iter_mut().for_each(|a| *a = 0.0);
        let f = p.forward_batch(&batch.obs, 6);
        batch.returns = f.value.clone();
        let s = LossSpec {
            entropy_coef: 0.0,
            bound_coef: 0.0,
            ..spec(Objective::Clip)
        };
        let (g, _) = backward(&p, &batch, &s);
        assert!(g.flat().iter().all(|v| *v == 0.0));
        let with_entropy = LossSpec {
            entropy_coef: 0.005,
            ..s
        };
        let (g, _) = backward(&p, &batch, &with_entropy);
        let ls = p.layout.log_std;
        assert_eq!(&g.flat()[ls..ls + 2], &[-0.005, -0.005]);
        assert!(g.flat()[..ls].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_scales_linearly_with_loss() {
        let arch = small_arch();
        let mut rng = StreamRng::new(23, 0);
        let p = perturbed(&arch, &mut rng);
        let batch = random_batch(&arch, &p, 5, &mut rng);
        // Advantages, value error and every coefficient scale together.
        let s = spec(Objective::AdaptiveKl);
        let c = 3.0;
        let mut scaled = batch.clone();
        scaled.advantages.iter_mut().for_each(|a| *a *= c);
        let s_scaled = LossSpec {
            beta: s.beta * c,
            entropy_coef: s.entropy_coef * c,
            bound_coef: s.bound_coef * c,
            critic_coef: s.critic_coef * c,
            ..s
        };
        let (g1, _) = backward(&p, &batch, &s);
        let (g2, _) = backward(&p, &scaled, &s_scaled);
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert!((c * a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} {b}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut rng = StreamRng::new(24, 0);
        let mut p = PolicyParams::init(small_arch(), &mut rng);
        let before = p.clone();
        let mut st = AdamState::new(p.len());
        let g = p.zeros_like();
        adam_update(&mut p, &g, &mut st, 5e-4);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let mut p = PolicyParams::zeros(small_arch());
        let mut g = p.zeros_like();
        g.flat_mut().iter_mut().enumerate().for_each(|(i, v)| {
            *v = if i % 2 == 0 { 0.3 } else { -2.0 }
        });
        let mut st = AdamState::new(p.len());
        let lr = 1e-3;
        let mut prev = p.clone();
        for _ in 0..5000 {
            prev = p.clone();
            adam_update(&mut p, &g, &mut st, lr);
        }
        for (i, (a, b)) in p.flat().iter().zip(prev.flat()).enumerate() {
            let step = a - b;
            let expected = -lr * g.flat()[i].signum();
            assert!((step - expected).abs() < 1e-3 * lr, "{step} vs {expected}");
        }
    }

    #[test]
    fn clip_grad_norm_bounds_norm() {
        let mut g = PolicyParams::zeros(small_arch());
        g.flat_mut().iter_mut().for_each(|v| *v = 1.0);
        let before = clip_grad_norm(&mut g, 0.5);
        assert!((before - (g.len() as f64).sqrt()).abs() < 1e-9);
        let after = g.flat().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 0.5).abs() < 1e-12);
    }
}
