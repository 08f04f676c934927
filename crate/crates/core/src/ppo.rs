//! Proximal policy optimization with a diagonal Gaussian actor and a
//! separate value network, generalized advantage estimation, and the clipped
//! surrogate objective.
//!
//! Training is single-threaded and deterministic for a fixed seed: episode
//! resets, action noise, and minibatch shuffling each draw from their own
//! derived stream.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{Env, EnvConfig, EnvId, ScriptedController};
use crate::error::{Error, Result};
use crate::jsonio::{read_json, write_json};
use crate::nn::{clip_grad_norm, Activation, AdamState, Mlp, MlpCheckpoint};
use crate::seeds::{derive_seed, stream};
use crate::trajstore::{StepRecord, Trajectory};

pub const POLICY_FORMAT_VERSION: u32 = 1;

/// Number of recent episodes used for rolling training statistics.
pub const ROLLING_EPISODES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub rollout_length: usize,
    pub minibatch_size: usize,
    pub update_epochs: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Actor learning rate.
    pub learning_rate: f64,
    /// Critic learning rate.
    pub value_learning_rate: f64,
    /// Global gradient-norm clip per network; 0 disables.
    pub max_grad_norm: f64,
    pub total_timesteps: usize,
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            rollout_length: 2048,
            minibatch_size: 64,
            update_epochs: 10,
            value_coef: 0.5,
            entropy_coef: 0.0,
            learning_rate: 3e-4,
            value_learning_rate: 3e-3,
            max_grad_norm: 0.5,
            total_timesteps: 50_000,
            hidden: vec![64, 64],
            log_std_init: 0.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("ppo: {msg}")));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be > 0");
        }
        if self.rollout_length == 0 || self.minibatch_size == 0 || self.update_epochs == 0 {
            return bad("rollout_length, minibatch_size and update_epochs must be positive");
        }
        if self.total_timesteps == 0 {
            return bad("total_timesteps must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.value_learning_rate > 0.0) || self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("learning rates must be > 0 and loss coefficients >= 0");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        Ok(())
    }

    /// Number of collect/update cycles needed to consume the budget.
    pub fn num_cycles(&self) -> usize {
        self.total_timesteps.div_ceil(self.rollout_length)
    }
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((&m, &ls), &v)| {
            let z = (v - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (2.0 * PI * std::f64::consts::E).ln()).sum()
}

/// Per-sample clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Diagonal Gaussian actor with state-independent `log_std`, plus critic.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
    pub value: Mlp,
    pub obs_scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorStep {
    /// Pre-clamp action; log-probabilities refer to this sample.
    pub raw_action: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

/// Anything that can drive a rollout.
pub trait RolloutPolicy {
    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<ActorStep>;
    fn value(&self, obs: &[f64]) -> Result<f64>;
}

impl GaussianPolicy {
    /// Actor and critic with ReLU hidden layers. The actor's output layer is
    /// scaled by 0.01 so initial action means sit near zero.
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize], log_std_init: f64, seed: u64) -> Result<Self> {
        let sizes = |out: usize| {
            let mut s = vec![obs_dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let mut mean = Mlp::new(&sizes(action_dim), Activation::Relu, derive_seed(seed, stream::PPO_INIT, 0))?;
        let last = mean.num_layers() - 1;
        mean.weight_mut(last).mapv_inplace(|w| w * 0.01);
        let value = Mlp::new(&sizes(1), Activation::Relu, derive_seed(seed, stream::PPO_INIT, 1))?;
        Ok(Self {
            mean,
            log_std: vec![log_std_init; action_dim],
            value,
            obs_scale: vec![1.0; obs_dim],
        })
    }

    /// Fixed per-dimension input multipliers applied before both networks.
    pub fn with_obs_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.obs_dim() || scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("obs_scale must be positive with one entry per observation".into()));
        }
        self.obs_scale = scale;
        Ok(self)
    }

    pub fn scale_obs(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter().zip(&self.obs_scale).map(|(o, s)| o * s).collect()
    }

    pub fn obs_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn action_mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.mean.forward(&self.scale_obs(obs))
    }

    pub fn state_value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.value.forward(&self.scale_obs(obs))?[0])
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.log_std)
    }

    pub fn sample(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<ActorStep> {
        let mean = self.action_mean(obs)?;
        let raw: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect();
        Ok(ActorStep {
            log_prob: gaussian_log_prob(&mean, &self.log_std, &raw),
            raw_action: raw,
            value: self.state_value(obs)?,
        })
    }

    pub fn to_checkpoint(&self, env_id: EnvId, config: &PpoConfig, seed: u64) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format_version: POLICY_FORMAT_VERSION,
            env_id,
            obs_dim: self.obs_dim(),
            action_dim: self.action_dim(),
            actor: self.mean.to_checkpoint(),
            log_std: self.log_std.clone(),
            critic: self.value.to_checkpoint(),
            obs_scale: self.obs_scale.clone(),
            config: config.clone(),
            seed,
        }
    }

    pub fn from_checkpoint(ckpt: &PolicyCheckpoint) -> Result<Self> {
        if ckpt.format_version != POLICY_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported policy format_version {}",
                ckpt.format_version
            )));
        }
        let mean = Mlp::from_checkpoint(&ckpt.actor)?;
        let value = Mlp::from_checkpoint(&ckpt.critic)?;
        if mean.input_dim() != ckpt.obs_dim
            || value.input_dim() != ckpt.obs_dim
            || mean.output_dim() != ckpt.action_dim
            || ckpt.log_std.len() != ckpt.action_dim
            || value.output_dim() != 1
        {
            return Err(Error::Config("policy checkpoint dimensions are inconsistent".into()));
        }
        Self {
            mean,
            log_std: ckpt.log_std.clone(),
            obs_scale: vec![1.0; ckpt.obs_dim],
            value,
        }
        .with_obs_scale(ckpt.obs_scale.clone())
    }
}

impl RolloutPolicy for GaussianPolicy {
    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<ActorStep> {
        self.sample(obs, rng)
    }

    fn value(&self, obs: &[f64]) -> Result<f64> {
        self.state_value(obs)
    }
}

/// Executes the Gaussian mean without sampling noise.
#[derive(Clone, Copy, Debug)]
pub struct MeanAction<'a>(pub &'a GaussianPolicy);

impl RolloutPolicy for MeanAction<'_> {
    fn act(&self, obs: &[f64], _rng: &mut ChaCha8Rng) -> Result<ActorStep> {
        let mean = self.0.action_mean(obs)?;
        Ok(ActorStep {
            log_prob: gaussian_log_prob(&mean, &self.0.log_std, &mean),
            raw_action: mean,
            value: self.0.state_value(obs)?,
        })
    }

    fn value(&self, obs: &[f64]) -> Result<f64> {
        self.0.state_value(obs)
    }
}

/// The reference PD controller as a rollout policy.
#[derive(Clone, Copy, Debug)]
pub struct ScriptedPolicy {
    pub env_id: EnvId,
    pub controller: ScriptedController,
}

impl RolloutPolicy for ScriptedPolicy {
    fn act(&self, obs: &[f64], _rng: &mut ChaCha8Rng) -> Result<ActorStep> {
        Ok(ActorStep {
            raw_action: self.controller.act(self.env_id, obs),
            log_prob: 0.0,
            value: 0.0,
        })
    }

    fn value(&self, _obs: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Serialized actor-critic: network format plus `log_std` and a config echo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format_version: u32,
    pub env_id: EnvId,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub actor: MlpCheckpoint,
    pub log_std: Vec<f64>,
    pub critic: MlpCheckpoint,
    pub obs_scale: Vec<f64>,
    pub config: PpoConfig,
    pub seed: u64,
}

impl PolicyCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub observations: Vec<Vec<f64>>,
    pub raw_actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    pub success: Vec<bool>,
    /// Critic value of the final observation at truncated steps, else 0.
    pub truncation_values: Vec<f64>,
    /// Critic value of the observation after the last step.
    pub bootstrap_value: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// GAE over the batch. Both termination and truncation break the
    /// bootstrap chain; truncated steps fold `discount * V(final obs)` into
    /// their reward instead.
    pub fn advantages(&self, discount: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let rewards: Vec<f64> = self
            .rewards
            .iter()
            .zip(&self.truncated)
            .zip(&self.truncation_values)
            .map(|((&r, &tr), &v)| if tr { r + discount * v } else { r })
            .collect();
        let breaks: Vec<bool> = self.terminated.iter().zip(&self.truncated).map(|(a, b)| *a || *b).collect();
        compute_gae(&rewards, &self.values, self.bootstrap_value, &breaks, discount, lambda)
    }
}

/// Generalized advantage estimation.
///
/// `delta_t = r_t + gamma * v_{t+1} * (1 - d_t) - v_t` and
/// `A_t = delta_t + gamma * lambda * (1 - d_t) * A_{t+1}`, with
/// `v_T = bootstrap`. Returns `(advantages, advantages + values)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    terminal: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || terminal.len() != n {
        return Err(Error::Shape(format!(
            "gae inputs differ in length: rewards {n}, values {}, terminal {}",
            values.len(),
            terminal.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if terminal[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub length: usize,
    pub success: bool,
}

/// Steps an environment under a policy, auto-resetting between episodes.
///
/// Episode seeds and action noise come from separate streams derived from
/// the collector seed. Optionally records every finished episode.
#[derive(Clone, Debug)]
pub struct RolloutCollector {
    env: Env,
    obs: Vec<f64>,
    seed: u64,
    episode_stream: u64,
    episode_index: u64,
    episode_seed: u64,
    action_rng: ChaCha8Rng,
    ep_return: f64,
    ep_steps: Vec<StepRecord>,
    ep_len: usize,
    record: bool,
    completed: Vec<EpisodeStats>,
    recorded: Vec<Trajectory>,
}

impl RolloutCollector {
    pub fn new(env: Env, seed: u64) -> Self {
        Self::with_streams(env, seed, stream::PPO_EPISODES, stream::PPO_ACTIONS)
    }

    pub fn with_streams(mut env: Env, seed: u64, episode_stream: u64, action_stream: u64) -> Self {
        let episode_seed = derive_seed(seed, episode_stream, 0);
        let obs = env.reset(episode_seed);
        Self {
            env,
            obs,
            seed,
            episode_stream,
            episode_index: 0,
            episode_seed,
            action_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, action_stream, 0)),
            ep_return: 0.0,
            ep_steps: Vec::new(),
            ep_len: 0,
            record: false,
            completed: Vec::new(),
            recorded: Vec::new(),
        }
    }

    /// Keep full trajectories of finished episodes.
    pub fn recording(mut self, on: bool) -> Self {
        self.record = on;
        self
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn take_completed(&mut self) -> Vec<EpisodeStats> {
        std::mem::take(&mut self.completed)
    }

    pub fn take_recorded(&mut self) -> Vec<Trajectory> {
        std::mem::take(&mut self.recorded)
    }

    /// Steps taken in the episode currently in progress.
    pub fn episode_progress(&self) -> usize {
        self.ep_len
    }

    /// Collects exactly `n_steps` transitions.
    pub fn collect<P: RolloutPolicy + ?Sized>(&mut self, policy: &P, n_steps: usize) -> Result<RolloutBatch> {
        let mut batch = RolloutBatch::default();
        for _ in 0..n_steps {
            let step = policy.act(&self.obs, &mut self.action_rng)?;
            let action: Vec<f64> = step.raw_action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
            let result = self.env.step(&action)?;
            if self.record {
                self.ep_steps.push(StepRecord {
                    t: self.ep_len as u32,
                    obs: self.obs.clone(),
                    action,
                    reward: result.reward,
                    success: result.success,
                    terminated: result.terminated,
                    truncated: result.truncated,
                });
            }
            self.ep_return += result.reward;
            self.ep_len += 1;

            batch.truncation_values.push(if result.truncated {
                policy.value(&result.observation)?
            } else {
                0.0
            });
            batch.observations.push(std::mem::take(&mut self.obs));
            batch.raw_actions.push(step.raw_action);
            batch.rewards.push(result.reward);
            batch.values.push(step.value);
            batch.log_probs.push(step.log_prob);
            batch.terminated.push(result.terminated);
            batch.truncated.push(result.truncated);
            batch.success.push(result.success);

            if result.done() {
                self.finish_episode(result.success);
            } else {
                self.obs = result.observation;
            }
        }
        let ended = batch.terminated.last().copied().unwrap_or(false) || batch.truncated.last().copied().unwrap_or(false);
        batch.bootstrap_value = if ended { 0.0 } else { policy.value(&self.obs)? };
        Ok(batch)
    }

    fn finish_episode(&mut self, success: bool) {
        self.completed.push(EpisodeStats {
            episode_return: self.ep_return,
            length: self.ep_len,
            success,
        });
        if self.record {
            self.recorded.push(Trajectory {
                episode_id: self.episode_index,
                seed: self.episode_seed,
                env_id: self.env.id(),
                steps: std::mem::take(&mut self.ep_steps),
            });
        }
        self.episode_index += 1;
        self.episode_seed = derive_seed(self.seed, self.episode_stream, self.episode_index);
        self.obs = self.env.reset(self.episode_seed);
        self.ep_return = 0.0;
        self.ep_len = 0;
    }
}

/// Result of the clipped policy objective on one minibatch.
#[derive(Clone, Debug)]
pub struct PolicyLoss {
    /// `-mean(surrogate) - entropy_coef * entropy`.
    pub loss: f64,
    pub surrogate: f64,
    pub mean_grads: Vec<f64>,
    pub log_std_grads: Vec<f64>,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub entropy: f64,
}

/// Clipped-surrogate loss and its exact gradients with respect to the mean
/// network parameters and `log_std`.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss(
    mean_net: &Mlp,
    log_std: &[f64],
    obs: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
    entropy_coef: f64,
) -> Result<PolicyLoss> {
    let n = obs.nrows();
    if actions.nrows() != n || old_log_probs.len() != n || advantages.len() != n || n == 0 {
        return Err(Error::Shape("policy loss inputs differ in length or are empty".into()));
    }
    let dim = log_std.len();
    if actions.ncols() != dim || mean_net.output_dim() != dim {
        return Err(Error::Shape("action dimension mismatch in policy loss".into()));
    }
    let cache = mean_net.forward_cached(obs)?;
    let mu = cache.output();
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();

    let mut d_mu = Array2::zeros((n, dim));
    let mut d_log_std = vec![0.0; dim];
    let (mut surrogate, mut ratio_sum, mut clipped, mut kl) = (0.0, 0.0, 0usize, 0.0);
    for i in 0..n {
        let mean_row = mu.row(i);
        let act_row = actions.row(i);
        let logp = gaussian_log_prob(mean_row.as_slice().unwrap(), log_std, &act_row.to_vec());
        let log_ratio = logp - old_log_probs[i];
        let ratio = log_ratio.exp();
        let a = advantages[i];
        surrogate += clipped_surrogate(ratio, a, clip);
        ratio_sum += ratio;
        if (ratio - 1.0).abs() > clip {
            clipped += 1;
        }
        kl += (ratio - 1.0) - log_ratio;
        // The unclipped branch carries the gradient whenever it is selected.
        let coef = if ratio * a <= ratio.clamp(1.0 - clip, 1.0 + clip) * a {
            ratio * a
        } else {
            0.0
        };
        let d_logp = -coef / n as f64;
        for j in 0..dim {
            let diff = act_row[j] - mean_row[j];
            d_mu[[i, j]] = d_logp * diff * inv_var[j];
            d_log_std[j] += d_logp * (diff * diff * inv_var[j] - 1.0);
        }
    }
    let entropy = gaussian_entropy(log_std);
    d_log_std.iter_mut().for_each(|g| *g -= entropy_coef);
    let grads = mean_net.backward(&cache, d_mu.view())?;
    let nf = n as f64;
    Ok(PolicyLoss {
        loss: -surrogate / nf - entropy_coef * entropy,
        surrogate: surrogate / nf,
        mean_grads: grads.params,
        log_std_grads: d_log_std,
        mean_ratio: ratio_sum / nf,
        clip_fraction: clipped as f64 / nf,
        approx_kl: kl / nf,
        entropy,
    })
}

/// Mean squared error of the critic against `returns`, with gradients.
pub fn value_loss(value_net: &Mlp, obs: ArrayView2<'_, f64>, returns: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = obs.nrows();
    if returns.len() != n || n == 0 {
        return Err(Error::Shape("value loss inputs differ in length or are empty".into()));
    }
    let cache = value_net.forward_cached(obs)?;
    let v = cache.output();
    let mut up = Array2::zeros((n, 1));
    let mut loss = 0.0;
    for i in 0..n {
        let e = v[[i, 0]] - returns[i];
        loss += e * e;
        up[[i, 0]] = 2.0 * e / n as f64;
    }
    let grads = value_net.backward(&cache, up.view())?;
    Ok((loss / n as f64, grads.params))
}

/// Optimizer state for the actor (mean parameters followed by `log_std`) and
/// the critic.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoOptimizers {
    pub actor: AdamState,
    pub critic: AdamState,
}

impl PpoOptimizers {
    pub fn new(policy: &GaussianPolicy, config: &PpoConfig) -> Self {
        Self {
            actor: AdamState::new(policy.mean.num_params() + policy.log_std.len(), config.learning_rate),
            critic: AdamState::new(policy.value.num_params(), config.value_learning_rate),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
}

fn rows(data: &[Vec<f64>], idx: &[usize]) -> Array2<f64> {
    let cols = data[idx[0]].len();
    let mut out = Array2::zeros((idx.len(), cols));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&ndarray::ArrayView1::from(&data[i]));
    }
    out
}

/// One PPO update over `batch`: advantages are normalized, then the actor
/// and critic take one Adam step per minibatch for `update_epochs` epochs.
pub fn ppo_update(
    policy: &mut GaussianPolicy,
    optim: &mut PpoOptimizers,
    batch: &RolloutBatch,
    config: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateMetrics> {
    if batch.is_empty() {
        return Ok(UpdateMetrics::default());
    }
    let (mut adv, returns) = batch.advantages(config.discount, config.gae_lambda)?;
    let n = adv.len();
    let mean = adv.iter().sum::<f64>() / n as f64;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));

    let mut metrics = UpdateMetrics::default();
    let mut order: Vec<usize> = (0..n).collect();
    let n_mean = policy.mean.num_params();
    for _ in 0..config.update_epochs {
        order.shuffle(rng);
        for idx in order.chunks(config.minibatch_size) {
            let mut obs = rows(&batch.observations, idx);
            for mut row in obs.rows_mut() {
                row.iter_mut().zip(&policy.obs_scale).for_each(|(o, s)| *o *= s);
            }
            let actions = rows(&batch.raw_actions, idx);
            let old_lp: Vec<f64> = idx.iter().map(|&i| batch.log_probs[i]).collect();
            let mb_adv: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
            let mb_ret: Vec<f64> = idx.iter().map(|&i| returns[i]).collect();

            let pl = policy_loss(
                &policy.mean,
                &policy.log_std,
                obs.view(),
                actions.view(),
                &old_lp,
                &mb_adv,
                config.clip,
                config.entropy_coef,
            )?;
            let (vl, mut v_grads) = value_loss(&policy.value, obs.view(), &mb_ret)?;
            if !pl.loss.is_finite() || !vl.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss (policy {}, value {vl}); mean ratio {}, log_std {:?}",
                    pl.loss, pl.mean_ratio, policy.log_std
                )));
            }

            let mut a_grads = pl.mean_grads;
            a_grads.extend_from_slice(&pl.log_std_grads);
            v_grads.iter_mut().for_each(|g| *g *= config.value_coef);
            if config.max_grad_norm > 0.0 {
                clip_grad_norm(&mut a_grads, config.max_grad_norm);
                clip_grad_norm(&mut v_grads, config.max_grad_norm);
            }
            let mut a_params = policy.mean.params().to_vec();
            a_params.extend_from_slice(&policy.log_std);
            optim.actor.step(&mut a_params, &a_grads)?;
            policy.mean.params_mut().copy_from_slice(&a_params[..n_mean]);
            policy.log_std.copy_from_slice(&a_params[n_mean..]);
            optim.critic.step(policy.value.params_mut(), &v_grads)?;

            metrics.policy_loss += pl.loss;
            metrics.value_loss += vl;
            metrics.entropy += pl.entropy;
            metrics.mean_ratio += pl.mean_ratio;
            metrics.clip_fraction += pl.clip_fraction;
            metrics.approx_kl += pl.approx_kl;
            metrics.minibatches += 1;
        }
    }
    let m = metrics.minibatches as f64;
    metrics.policy_loss /= m;
    metrics.value_loss /= m;
    metrics.entropy /= m;
    metrics.mean_ratio /= m;
    metrics.clip_fraction /= m;
    metrics.approx_kl /= m;
    Ok(metrics)
}

/// One row of the training curve, written after every update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub timestep: usize,
    pub mean_return: f64,
    pub success_rate: f64,
}

pub fn write_curve_csv<W: Write>(rows: &[CurveRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "timestep,mean_return,success_rate")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.timestep, r.mean_return, r.success_rate)?;
    }
    Ok(())
}

/// Mean return and success rate over the last `window` episodes.
pub fn rolling_stats(episodes: &[EpisodeStats], window: usize) -> (f64, f64) {
    let recent = &episodes[episodes.len().saturating_sub(window)..];
    if recent.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = recent.len() as f64;
    (
        recent.iter().map(|e| e.episode_return).sum::<f64>() / n,
        recent.iter().filter(|e| e.success).count() as f64 / n,
    )
}

/// Reciprocal of each observation dimension's declared magnitude bound.
pub fn observation_scale(env: &Env) -> Vec<f64> {
    let spec = env.observation_spec();
    spec.low
        .iter()
        .zip(&spec.high)
        .map(|(l, h)| {
            let m = l.abs().max(h.abs());
            if m > 0.0 { 1.0 / m } else { 1.0 }
        })
        .collect()
}

/// Alternates rollout collection and PPO updates until the timestep budget
/// is spent.
#[derive(Clone, Debug)]
pub struct PpoTrainer {
    env_id: EnvId,
    seed: u64,
    config: PpoConfig,
    policy: GaussianPolicy,
    optim: PpoOptimizers,
    collector: RolloutCollector,
    minibatch_rng: ChaCha8Rng,
    timesteps: usize,
    curve: Vec<CurveRow>,
    episodes: Vec<EpisodeStats>,
    harvest: Vec<Trajectory>,
    last_metrics: UpdateMetrics,
}

impl PpoTrainer {
    pub fn new(env_id: EnvId, env_config: EnvConfig, config: PpoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let policy = GaussianPolicy::new(
            env_id.obs_dim(),
            env_id.action_dim(),
            &config.hidden,
            config.log_std_init,
            seed,
        )?
        .with_obs_scale(observation_scale(&Env::new(env_id, env_config.clone())))?;
        let optim = PpoOptimizers::new(&policy, &config);
        Ok(Self {
            env_id,
            seed,
            collector: RolloutCollector::new(Env::new(env_id, env_config), seed),
            minibatch_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::PPO_MINIBATCH, 0)),
            config,
            policy,
            optim,
            timesteps: 0,
            curve: Vec::new(),
            episodes: Vec::new(),
            harvest: Vec::new(),
            last_metrics: UpdateMetrics::default(),
        })
    }

    /// Keep successful training episodes as they complete.
    pub fn harvesting(mut self, on: bool) -> Self {
        self.collector = self.collector.recording(on);
        self
    }

    pub fn policy(&self) -> &GaussianPolicy {
        &self.policy
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn curve(&self) -> &[CurveRow] {
        &self.curve
    }

    pub fn episodes(&self) -> &[EpisodeStats] {
        &self.episodes
    }

    pub fn last_metrics(&self) -> &UpdateMetrics {
        &self.last_metrics
    }

    pub fn is_done(&self) -> bool {
        self.timesteps >= self.config.total_timesteps
    }

    /// Successful episodes seen during training (when harvesting).
    pub fn take_harvest(&mut self) -> Vec<Trajectory> {
        std::mem::take(&mut self.harvest)
    }

    pub fn checkpoint(&self) -> PolicyCheckpoint {
        self.policy.to_checkpoint(self.env_id, &self.config, self.seed)
    }

    /// One collect/update cycle. On divergence the policy and optimizer are
    /// left as they were before the cycle.
    pub fn run_cycle(&mut self) -> Result<()> {
        let n = self.config.rollout_length.min(self.config.total_timesteps - self.timesteps);
        let batch = self.collector.collect(&self.policy, n)?;
        self.timesteps += n;
        self.episodes.extend(self.collector.take_completed());
        self.harvest
            .extend(self.collector.take_recorded().into_iter().filter(|t| t.is_success()));

        let mut policy = self.policy.clone();
        let mut optim = self.optim.clone();
        self.last_metrics = ppo_update(&mut policy, &mut optim, &batch, &self.config, &mut self.minibatch_rng)?;
        self.policy = policy;
        self.optim = optim;

        let (mean_return, success_rate) = rolling_stats(&self.episodes, ROLLING_EPISODES);
        self.curve.push(CurveRow {
            timestep: self.timesteps,
            mean_return,
            success_rate,
        });
        log::info!(
            "ppo t={} return={mean_return:.2} success={success_rate:.3} kl={:.4} clip={:.3} log_std={:?}",
            self.timesteps,
            self.last_metrics.approx_kl,
            self.last_metrics.clip_fraction,
            self.policy.log_std
        );
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_cycle()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PpoOutcome {
    pub checkpoint: PolicyCheckpoint,
    pub policy: GaussianPolicy,
    pub curve: Vec<CurveRow>,
    pub episodes: Vec<EpisodeStats>,
}

pub fn train_ppo(env_id: EnvId, env_config: EnvConfig, config: &PpoConfig, seed: u64) -> Result<PpoOutcome> {
    let mut trainer = PpoTrainer::new(env_id, env_config, config.clone(), seed)?;
    trainer.run()?;
    Ok(PpoOutcome {
        checkpoint: trainer.checkpoint(),
        policy: trainer.policy.clone(),
        curve: trainer.curve.clone(),
        episodes: trainer.episodes.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::Rng;

    /// Direct summation oracle: `A_t = sum_l (gamma lambda)^l delta_{t+l}`
    /// within the episode.
    fn brute_gae(r: &[f64], v: &[f64], boot: f64, d: &[bool], g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + if d[t] { 0.0 } else { g * next_v(t) } - v[t])
            .collect();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    sum += w * delta[k];
                    if d[k] {
                        break;
                    }
                    w *= g * l;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn gae_hand_unrolled() {
        let (adv, ret) = compute_gae(&[1.0, 1.0], &[0.0, 0.0], 0.0, &[false, false], 0.9, 1.0).unwrap();
        assert!((adv[0] - 1.9).abs() < 1e-15 && (adv[1] - 1.0).abs() < 1e-15);
        assert_eq!(adv, ret);
    }

    #[test]
    fn gae_zero_and_lambda_zero() {
        let (adv, _) = compute_gae(&[0.0; 4], &[0.0; 4], 0.0, &[false; 4], 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
        let r = [0.5, -1.0, 2.0];
        let v = [0.1, 0.2, 0.3];
        let (adv, _) = compute_gae(&r, &v, 0.7, &[false, true, false], 0.9, 0.0).unwrap();
        assert_eq!(adv[0], 0.5 + 0.9 * 0.2 - 0.1);
        assert_eq!(adv[1], -1.0 - 0.2);
        assert_eq!(adv[2], 2.0 + 0.9 * 0.7 - 0.3);
        assert!(compute_gae(&r, &v[..2], 0.0, &[false; 3], 0.9, 0.9).is_err());
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.random_range(1..=5);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let boot = rng.random_range(-1.0..1.0);
            let (g, l) = (rng.random_range(0.5..0.999), rng.random_range(0.0..1.0));
            let (adv, _) = compute_gae(&r, &v, boot, &d, g, l).unwrap();
            let oracle = brute_gae(&r, &v, boot, &d, g, l);
            for (a, b) in adv.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clipped_surrogate_cases() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_surrogate(1.0, 0.37, 0.2), 0.37);
    }

    #[test]
    fn surrogate_is_pessimistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = rng.random_range(0.0..3.0);
            let a = rng.random_range(-3.0..3.0);
            let s = clipped_surrogate(r, a, 0.2);
            assert!(s <= r * a + 1e-15);
            if (a > 0.0 && r > 1.2) || (a < 0.0 && r < 0.8) {
                assert!(s <= r * a);
                assert!((s - r.clamp(0.8, 1.2) * a).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn log_prob_matches_closed_form_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let ls: [f64; 2] = [rng.random_range(-2.0..0.5), rng.random_range(-2.0..0.5)];
            let x: [f64; 2] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let mut density: f64 = 1.0;
            for j in 0..2 {
                let s = ls[j].exp();
                density *= (-(x[j] - m[j]).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt());
            }
            assert!((gaussian_log_prob(&m, &ls, &x) - density.ln()).abs() < 1e-12);
        }
    }

    fn synthetic_minibatch(seed: u64) -> (GaussianPolicy, Array2<f64>, Array2<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = GaussianPolicy::new(3, 2, &[6, 5], -0.3, seed).unwrap();
        // larger output weights so ratios move away from 1
        let last = policy.mean.num_layers() - 1;
        policy.mean.weight_mut(last).mapv_inplace(|w| w * 50.0);
        let n = 6;
        let obs = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let act = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let old: Vec<f64> = (0..n).map(|_| rng.random_range(-2.5..-1.0)).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ret: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        (policy, obs, act, old, adv, ret)
    }

    #[test]
    fn policy_gradients_pass_grad_check() {
        for seed in 0..5 {
            let (policy, obs, act, old, adv, _) = synthetic_minibatch(seed);
            let sizes = policy.mean.layer_sizes().to_vec();
            let n_mean = policy.mean.num_params();
            let mut params = policy.mean.params().to_vec();
            params.extend_from_slice(&policy.log_std);
            let loss = |p: &[f64]| {
                let net = Mlp::from_flat(&sizes, Activation::Relu, p[..n_mean].to_vec())?;
                let pl = policy_loss(&net, &p[n_mean..], obs.view(), act.view(), &old, &adv, 0.2, 0.01)?;
                let mut g = pl.mean_grads;
                g.extend(pl.log_std_grads);
                Ok((pl.loss, g))
            };
            let err = grad_check(loss, &params, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn value_gradients_pass_grad_check() {
        for seed in 0..5 {
            let (policy, obs, _, _, _, ret) = synthetic_minibatch(seed);
            let sizes = policy.value.layer_sizes().to_vec();
            let loss = |p: &[f64]| {
                let net = Mlp::from_flat(&sizes, Activation::Relu, p.to_vec())?;
                value_loss(&net, obs.view(), &ret)
            };
            let err = grad_check(loss, policy.value.params(), 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn unit_ratio_surrogate_is_mean_advantage() {
        let policy = GaussianPolicy::new(3, 2, &[4], 0.0, 3).unwrap();
        let obs = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.1);
        let act = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 - j as f64) * 0.2);
        let old: Vec<f64> = (0..4)
            .map(|i| {
                let m = policy.action_mean(obs.row(i).as_slice().unwrap()).unwrap();
                gaussian_log_prob(&m, &policy.log_std, act.row(i).as_slice().unwrap())
            })
            .collect();
        let adv = [1.0, -1.0, 0.5, -0.5];
        let pl = policy_loss(&policy.mean, &policy.log_std, obs.view(), act.view(), &old, &adv, 0.2, 0.0).unwrap();
        assert!((pl.mean_ratio - 1.0).abs() < 1e-12);
        assert!(pl.surrogate.abs() < 1e-12);
        assert_eq!(pl.clip_fraction, 0.0);
    }

    #[test]
    fn empty_rollout() {
        let env = Env::new(EnvId::ReachServe, EnvConfig::default());
        let policy = GaussianPolicy::new(5, 2, &[8], 0.0, 0).unwrap();
        let mut c = RolloutCollector::new(env, 0);
        let b = c.collect(&policy, 0).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn rollout_is_deterministic() {
        let mut cfg = EnvConfig::default();
        cfg.reach_serve.drift_sigma = 0.0;
        let policy = GaussianPolicy::new(5, 2, &[8], 0.0, 0).unwrap();
        let run = || {
            let mut c = RolloutCollector::new(Env::new(EnvId::ReachServe, cfg.clone()), 4);
            c.collect(&MeanAction(&policy), 300).unwrap()
        };
        assert_eq!(run(), run());
        let stochastic = || {
            let mut c = RolloutCollector::new(Env::new(EnvId::ReachServe, EnvConfig::default()), 4);
            c.collect(&policy, 300).unwrap()
        };
        assert_eq!(stochastic(), stochastic());
    }

    #[test]
    fn scripted_rollout_contains_success() {
        let mut cfg = EnvConfig::default();
        cfg.reach_serve.drift_sigma = 0.0;
        let policy = ScriptedPolicy {
            env_id: EnvId::ReachServe,
            controller: ScriptedController::default(),
        };
        let mut c = RolloutCollector::new(Env::new(EnvId::ReachServe, cfg), 0).recording(true);
        let b = c.collect(&policy, 400).unwrap();
        assert_eq!(b.len(), 400);
        assert!(b.success.iter().any(|&s| s));
        for (s, t) in b.success.iter().zip(&b.terminated) {
            assert!(!s || *t);
        }
        let recorded = c.take_recorded();
        assert!(!recorded.is_empty());
        assert!(recorded.iter().all(|t| t.is_success()));
    }

    #[test]
    fn one_cycle_when_budget_equals_rollout() {
        let cfg = PpoConfig {
            rollout_length: 256,
            total_timesteps: 256,
            hidden: vec![16],
            ..Default::default()
        };
        let out = train_ppo(EnvId::ReachServe, EnvConfig::default(), &cfg, 0).unwrap();
        assert_eq!(out.curve.len(), 1);
        assert_eq!(out.curve[0].timestep, 256);
        let cfg = PpoConfig {
            total_timesteps: 600,
            ..cfg
        };
        let out = train_ppo(EnvId::ReachServe, EnvConfig::default(), &cfg, 0).unwrap();
        assert_eq!(out.curve.len(), 3);
        assert_eq!(out.curve.last().unwrap().timestep, 600);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = PpoConfig {
            rollout_length: 128,
            total_timesteps: 384,
            minibatch_size: 32,
            update_epochs: 2,
            hidden: vec![16, 16],
            ..Default::default()
        };
        let a = train_ppo(EnvId::SweepWipe, EnvConfig::default(), &cfg, 9).unwrap();
        let b = train_ppo(EnvId::SweepWipe, EnvConfig::default(), &cfg, 9).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(
            serde_json::to_string(&a.checkpoint).unwrap(),
            serde_json::to_string(&b.checkpoint).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let policy = GaussianPolicy::new(5, 2, &[8, 8], -0.5, 1).unwrap();
        let ckpt = policy.to_checkpoint(EnvId::ReachServe, &PpoConfig::default(), 1);
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: PolicyCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(GaussianPolicy::from_checkpoint(&back).unwrap(), policy);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PpoConfig {
            discount: 1.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PpoConfig {
            total_timesteps: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
