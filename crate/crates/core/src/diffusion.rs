//! Denoising diffusion over short action sequences, conditioned on a short
//! observation history, and its receding-horizon deployment wrapper.
//!
//! Diffusion steps are indexed `k = 1..=K`. The forward process is the
//! variance-preserving one, `x_k = sqrt(abar_k) x_0 + sqrt(1 - abar_k) eps`,
//! and sampling runs the ancestral chain from `x_K ~ N(0, I)` down to `x_0`.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::jsonio::{read_json, write_json};
use crate::nn::{Activation, AdamState, Mlp, MlpCheckpoint};
use crate::seeds::{derive_seed, stream};
use crate::trajstore::{self, make_windows, NormStats, Trajectory};

pub const DENOISER_FORMAT_VERSION: u32 = 1;

/// Width of the sinusoidal diffusion-step embedding.
pub const STEP_EMBED_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Number of diffusion steps K.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub obs_horizon: usize,
    pub action_horizon: usize,
    /// Actions executed from each sampled sequence before re-planning.
    pub exec_horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
            obs_horizon: 2,
            action_horizon: 8,
            exec_horizon: 4,
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-4,
            hidden: vec![256, 256, 256],
            activation: Activation::Relu,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("diffusion: {m}")));
        if self.obs_horizon == 0 || self.action_horizon == 0 {
            return bad("obs_horizon and action_horizon must be >= 1");
        }
        if self.exec_horizon == 0 || self.exec_horizon > self.action_horizon {
            return bad("exec_horizon must be in 1..=action_horizon");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end).map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-step noise levels. Index `k - 1` of each array holds step `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub posterior_variances: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` (k = 1) to `beta_end` (k = K).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variances = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return Err(Error::Index(format!("diffusion step {k} outside 1..={}", self.steps())));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    pub fn posterior_variance(&self, k: usize) -> f64 {
        self.posterior_variances[k - 1]
    }
}

/// Forward noising `x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps`.
pub fn q_sample(x0: &[f64], k: usize, noise: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let i = schedule.check(k)?;
    if noise.len() != x0.len() {
        return Err(Error::Shape(format!("noise length {} != x0 length {}", noise.len(), x0.len())));
    }
    let (a, b) = (schedule.alpha_bars[i].sqrt(), (1.0 - schedule.alpha_bars[i]).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// One reverse step given a noise prediction:
/// `x_{k-1} = (x_k - beta_k / sqrt(1 - abar_k) * eps_hat) / sqrt(alpha_k) + sigma_k z`.
/// `z` is ignored at `k = 1`.
pub fn posterior_step(
    x_k: &[f64],
    eps_hat: &[f64],
    k: usize,
    schedule: &NoiseSchedule,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let i = schedule.check(k)?;
    if eps_hat.len() != x_k.len() || z.is_some_and(|z| z.len() != x_k.len()) {
        return Err(Error::Shape("posterior step inputs differ in length".into()));
    }
    let coef = schedule.betas[i] / (1.0 - schedule.alpha_bars[i]).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alphas[i].sqrt();
    let sigma = schedule.posterior_variances[i].sqrt();
    Ok(x_k
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(j, (x, e))| {
            let mean = inv_sqrt_alpha * (x - coef * e);
            match z {
                Some(z) if k > 1 => mean + sigma * z[j],
                _ => mean,
            }
        })
        .collect())
}

/// Sinusoidal features of `k / K` at geometrically spaced frequencies.
pub fn step_embedding(k: usize, steps: usize) -> [f64; STEP_EMBED_DIM] {
    let s = k as f64 / steps as f64;
    let mut out = [0.0; STEP_EMBED_DIM];
    for i in 0..STEP_EMBED_DIM / 2 {
        let w = PI * 2f64.powf(i as f64 / 2.0);
        out[2 * i] = (w * s).sin();
        out[2 * i + 1] = (w * s).cos();
    }
    out
}

/// Conditional noise predictor `eps(O, A_k, k)`: an MLP over normalized
/// observations, noisy normalized actions, and the step embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub net: Mlp,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub obs_horizon: usize,
    pub action_horizon: usize,
    pub steps: usize,
}

impl Denoiser {
    pub fn new(obs_dim: usize, action_dim: usize, cfg: &DiffusionConfig, seed: u64) -> Result<Self> {
        let input = obs_dim * cfg.obs_horizon + action_dim * cfg.action_horizon + STEP_EMBED_DIM;
        let mut sizes = vec![input];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(action_dim * cfg.action_horizon);
        Ok(Self {
            net: Mlp::new(&sizes, cfg.activation, seed)?,
            obs_dim,
            action_dim,
            obs_horizon: cfg.obs_horizon,
            action_horizon: cfg.action_horizon,
            steps: cfg.steps,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.obs_dim * self.obs_horizon
    }

    pub fn sequence_dim(&self) -> usize {
        self.action_dim * self.action_horizon
    }

    fn fill_input(&self, row: &mut [f64], obs: &[f64], noisy: &[f64], k: usize) {
        let (c, s) = (self.cond_dim(), self.sequence_dim());
        row[..c].copy_from_slice(obs);
        row[c..c + s].copy_from_slice(noisy);
        row[c + s..].copy_from_slice(&step_embedding(k, self.steps));
    }

    /// Predicted noise for one (normalized) observation stack and noisy
    /// action sequence.
    pub fn predict(&self, obs: &[f64], noisy: &[f64], k: usize) -> Result<Vec<f64>> {
        if obs.len() != self.cond_dim() || noisy.len() != self.sequence_dim() {
            return Err(Error::Shape(format!(
                "denoiser expects obs {} / actions {}, got {} / {}",
                self.cond_dim(),
                self.sequence_dim(),
                obs.len(),
                noisy.len()
            )));
        }
        let mut row = vec![0.0; self.net.input_dim()];
        self.fill_input(&mut row, obs, noisy, k);
        self.net.forward(&row)
    }
}

/// A batch of denoising problems: conditioning, clean targets, step indices
/// and injected noise.
#[derive(Clone, Debug)]
pub struct DdpmBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub steps: Vec<usize>,
    pub noise: Vec<Vec<f64>>,
}

impl DdpmBatch {
    /// Draws `k ~ U{1..K}` and `eps ~ N(0, I)` for every sample.
    pub fn draw(
        obs: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        schedule: &NoiseSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k_dist = Uniform::new_inclusive(1, schedule.steps()).expect("K >= 1");
        let steps = actions.iter().map(|_| k_dist.sample(rng)).collect();
        let noise = actions
            .iter()
            .map(|a| a.iter().map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        Self {
            obs,
            actions,
            steps,
            noise,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Mean squared error of the denoiser's noise prediction and its gradient
/// with respect to the denoiser parameters.
pub fn ddpm_loss(den: &Denoiser, batch: &DdpmBatch, schedule: &NoiseSchedule) -> Result<(f64, Vec<f64>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InsufficientData("empty ddpm batch".into()));
    }
    let width = den.net.input_dim();
    let seq = den.sequence_dim();
    let mut input = Array2::zeros((n, width));
    let mut target = Array2::zeros((n, seq));
    for i in 0..n {
        if batch.obs[i].len() != den.cond_dim() || batch.actions[i].len() != seq || batch.noise[i].len() != seq {
            return Err(Error::Shape(format!("ddpm sample {i} has the wrong dimensions")));
        }
        let noisy = q_sample(&batch.actions[i], batch.steps[i], &batch.noise[i], schedule)?;
        den.fill_input(input.row_mut(i).as_slice_mut().unwrap(), &batch.obs[i], &noisy, batch.steps[i]);
        target.row_mut(i).as_slice_mut().unwrap().copy_from_slice(&batch.noise[i]);
    }
    let cache = den.net.forward_cached(input.view())?;
    let diff = cache.output() - &target;
    let count = (n * seq) as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    let upstream = diff.mapv(|d| 2.0 * d / count);
    let grads = den.net.backward(&cache, upstream.view())?;
    Ok((loss, grads.params))
}

/// Draws noise levels and noise for a batch of normalized windows, then
/// takes one Adam step on the denoising loss. Returns the pre-step loss.
pub fn ddpm_training_step(
    den: &mut Denoiser,
    optim: &mut AdamState,
    obs: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batch = DdpmBatch::draw(obs, actions, schedule, rng);
    let (loss, grads) = ddpm_loss(den, &batch, schedule)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("non-finite denoising loss {loss}")));
    }
    optim.step(den.net.params_mut(), &grads)?;
    Ok(loss)
}

/// One ancestral sampling step with the learned noise predictor.
pub fn p_sample_step(
    den: &Denoiser,
    x_k: &[f64],
    k: usize,
    obs: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    schedule.check(k)?;
    let eps_hat = den.predict(obs, x_k, k)?;
    if k > 1 {
        let z: Vec<f64> = (0..x_k.len()).map(|_| StandardNormal.sample(rng)).collect();
        posterior_step(x_k, &eps_hat, k, schedule, Some(&z))
    } else {
        posterior_step(x_k, &eps_hat, k, schedule, None)
    }
}

/// Full reverse chain in normalized space. The result is not clamped.
pub fn sample_normalized(
    den: &Denoiser,
    obs: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut x: Vec<f64> = (0..den.sequence_dim()).map(|_| StandardNormal.sample(rng)).collect();
    for k in (1..=schedule.steps()).rev() {
        x = p_sample_step(den, &x, k, obs, schedule, rng)?;
    }
    Ok(x)
}

/// Samples `T_a` raw actions conditioned on a raw observation history of
/// `T_o` observations (oldest first).
pub fn sample_action_sequence(
    den: &Denoiser,
    obs_history: &[Vec<f64>],
    schedule: &NoiseSchedule,
    stats: Option<&NormStats>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let stats = stats.ok_or_else(|| Error::Config("normalization statistics are required for sampling".into()))?;
    if obs_history.len() != den.obs_horizon {
        return Err(Error::Shape(format!(
            "observation history has {} entries, expected {}",
            obs_history.len(),
            den.obs_horizon
        )));
    }
    let obs = stats.normalize_obs(&obs_history.concat());
    let x = sample_normalized(den, &obs, schedule, rng)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("sampler produced non-finite actions".into()));
    }
    let clamped: Vec<f64> = x.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let raw = stats.denormalize_action(&clamped);
    Ok(raw.chunks(den.action_dim).map(<[f64]>::to_vec).collect())
}

/// Trained denoiser bundled with everything needed to act.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionPolicy {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub stats: NormStats,
    pub config: DiffusionConfig,
    pub env_id: Option<EnvId>,
}

impl DiffusionPolicy {
    pub fn controller(&self, seed: u64) -> DiffusionController<'_> {
        DiffusionController::new(self, seed)
    }

    pub fn to_checkpoint(&self) -> DenoiserCheckpoint {
        DenoiserCheckpoint {
            format_version: DENOISER_FORMAT_VERSION,
            env_id: self.env_id,
            network: self.denoiser.net.to_checkpoint(),
            steps: self.config.steps,
            beta_start: self.config.beta_start,
            beta_end: self.config.beta_end,
            obs_dim: self.denoiser.obs_dim,
            action_dim: self.denoiser.action_dim,
            obs_horizon: self.config.obs_horizon,
            action_horizon: self.config.action_horizon,
            exec_horizon: self.config.exec_horizon,
            norm_stats: self.stats.clone(),
            config: self.config.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &DenoiserCheckpoint) -> Result<Self> {
        if ckpt.format_version != DENOISER_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported denoiser format_version {}",
                ckpt.format_version
            )));
        }
        let mut config = ckpt.config.clone();
        config.steps = ckpt.steps;
        config.beta_start = ckpt.beta_start;
        config.beta_end = ckpt.beta_end;
        config.obs_horizon = ckpt.obs_horizon;
        config.action_horizon = ckpt.action_horizon;
        config.exec_horizon = ckpt.exec_horizon;
        config.validate()?;
        let net = Mlp::from_checkpoint(&ckpt.network)?;
        let denoiser = Denoiser {
            obs_dim: ckpt.obs_dim,
            action_dim: ckpt.action_dim,
            obs_horizon: ckpt.obs_horizon,
            action_horizon: ckpt.action_horizon,
            steps: ckpt.steps,
            net,
        };
        let expected_in = denoiser.cond_dim() + denoiser.sequence_dim() + STEP_EMBED_DIM;
        if denoiser.net.input_dim() != expected_in
            || denoiser.net.output_dim() != denoiser.sequence_dim()
            || ckpt.norm_stats.obs_dim() != ckpt.obs_dim
            || ckpt.norm_stats.action_dim() != ckpt.action_dim
        {
            return Err(Error::Config("denoiser checkpoint dimensions are inconsistent".into()));
        }
        Ok(Self {
            schedule: config.schedule()?,
            denoiser,
            stats: ckpt.norm_stats.clone(),
            config,
            env_id: ckpt.env_id,
        })
    }
}

/// Serialized diffusion policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserCheckpoint {
    pub format_version: u32,
    pub env_id: Option<EnvId>,
    pub network: MlpCheckpoint,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub obs_horizon: usize,
    pub action_horizon: usize,
    pub exec_horizon: usize,
    pub norm_stats: NormStats,
    pub config: DiffusionConfig,
}

impl DenoiserCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Receding-horizon executor: samples `T_a` actions, executes the first
/// `T_exec`, then samples again.
#[derive(Clone, Debug)]
pub struct DiffusionController<'a> {
    policy: &'a DiffusionPolicy,
    history: VecDeque<Vec<f64>>,
    first_obs: Option<Vec<f64>>,
    queue: VecDeque<Vec<f64>>,
    rng: ChaCha8Rng,
    sampler_calls: usize,
}

impl<'a> DiffusionController<'a> {
    pub fn new(policy: &'a DiffusionPolicy, seed: u64) -> Self {
        Self {
            policy,
            history: VecDeque::new(),
            first_obs: None,
            queue: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            sampler_calls: 0,
        }
    }

    /// Clears history and pending actions for a new episode.
    pub fn reset(&mut self, seed: u64) {
        self.history.clear();
        self.first_obs = None;
        self.queue.clear();
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn sampler_calls(&self) -> usize {
        self.sampler_calls
    }

    pub fn pending_actions(&self) -> usize {
        self.queue.len()
    }

    fn push_observation(&mut self, obs: &[f64]) {
        if self.first_obs.is_none() {
            self.first_obs = Some(obs.to_vec());
        }
        self.history.push_back(obs.to_vec());
        while self.history.len() > self.policy.denoiser.obs_horizon {
            self.history.pop_front();
        }
    }

    /// History padded at the front with the episode's first observation.
    fn padded_history(&self) -> Vec<Vec<f64>> {
        let t_o = self.policy.denoiser.obs_horizon;
        let first = self.first_obs.as_ref().expect("history is non-empty");
        let mut out = vec![first.clone(); t_o - self.history.len()];
        out.extend(self.history.iter().cloned());
        out
    }

    pub fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>> {
        self.push_observation(obs);
        if self.queue.is_empty() {
            let history = self.padded_history();
            let p = self.policy;
            let seq = sample_action_sequence(&p.denoiser, &history, &p.schedule, Some(&p.stats), &mut self.rng)?;
            self.sampler_calls += 1;
            self.queue.extend(seq.into_iter().take(p.config.exec_horizon));
        }
        Ok(self.queue.pop_front().expect("queue refilled"))
    }
}

/// Normalized `(observation stack, action sequence)` training pairs.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Builds windows from every episode and normalizes them with `stats`.
pub fn build_training_set(dataset: &[Trajectory], cfg: &DiffusionConfig, stats: &NormStats) -> Result<TrainingSet> {
    let mut set = TrainingSet::default();
    for traj in dataset {
        for w in make_windows(traj, cfg.obs_horizon, cfg.action_horizon)? {
            let (o, a) = stats.normalize_window(&w);
            set.obs.push(o);
            set.actions.push(a);
        }
    }
    Ok(set)
}

/// Minibatch Adam on the denoising loss for `cfg.epochs` epochs, shuffling
/// with a seeded stream. Returns the mean loss of each epoch.
pub fn fit_denoiser(
    den: &mut Denoiser,
    set: &TrainingSet,
    schedule: &NoiseSchedule,
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let mut optim = AdamState::new(den.net.num_params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::DIFFUSION_TRAIN, 0));
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let obs = idx.iter().map(|&i| set.obs[i].clone()).collect();
            let actions = idx.iter().map(|&i| set.actions[i].clone()).collect();
            total += ddpm_training_step(den, &mut optim, obs, actions, schedule, &mut rng)?;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("diffusion epoch {epoch}: loss {mean:.5}");
        curve.push(mean);
    }
    Ok(curve)
}

#[derive(Clone, Debug)]
pub struct DiffusionOutcome {
    pub policy: DiffusionPolicy,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub num_windows: usize,
    pub warning: Option<String>,
}

/// Fits a diffusion policy on successful episodes.
pub fn train_diffusion(dataset: &[Trajectory], cfg: &DiffusionConfig, seed: u64) -> Result<DiffusionOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("no successful episodes to train on".into()));
    }
    let warning = trajstore::min_success_warning(dataset.len(), trajstore::MIN_SUCCESS_EPISODES);
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let stats = NormStats::fit(dataset)?;
    let set = build_training_set(dataset, cfg, &stats)?;
    if set.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no episode is at least {} steps long",
            cfg.action_horizon
        )));
    }
    let schedule = cfg.schedule()?;
    let mut den = Denoiser::new(
        stats.obs_dim(),
        stats.action_dim(),
        cfg,
        derive_seed(seed, stream::DIFFUSION_INIT, 0),
    )?;
    let loss_curve = fit_denoiser(&mut den, &set, &schedule, cfg, seed)?;
    let env_id = dataset[0].env_id;
    Ok(DiffusionOutcome {
        policy: DiffusionPolicy {
            denoiser: den,
            schedule,
            stats,
            config: cfg.clone(),
            env_id: Some(env_id),
        },
        loss_curve,
        num_windows: set.len(),
        warning,
    })
}
