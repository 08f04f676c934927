//! End-to-end orchestration: PPO baseline, harvest, success filter,
//! diffusion distillation, evaluation and reporting.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{train_diffusion, DenoiserCheckpoint, DiffusionConfig, DiffusionPolicy};
use crate::envs::{Env, EnvConfig, EnvId, ScriptedController};
use crate::error::{Error, Result};
use crate::jsonio::{read_json, write_json};
use crate::ppo::{write_curve_csv, GaussianPolicy, PolicyCheckpoint, PpoConfig, PpoTrainer, RolloutCollector, RolloutPolicy};
use crate::seeds::{derive_seed, stream};
use crate::trajstore::{self, filter_success, Trajectory};

/// Artifact filenames written under the output directory.
pub mod files {
    pub const PPO_CHECKPOINT: &str = "ppo_checkpoint.json";
    pub const PPO_CURVE: &str = "ppo_curve.csv";
    pub const DATASET: &str = "dataset.jsonl";
    pub const DATASET_SUCC: &str = "dataset_succ.jsonl";
    pub const NORM_STATS: &str = "norm_stats.json";
    pub const DENOISER: &str = "denoiser.json";
    pub const DIFFUSION_LOSS: &str = "diffusion_loss.csv";
    pub const REPORT_CSV: &str = "report.csv";
    pub const REPORT_TXT: &str = "report.txt";

    pub fn eval(policy: super::PolicyKind) -> String {
        format!("eval_{policy}.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestConfig {
    /// Stop after this many episodes.
    pub episodes: Option<usize>,
    /// Stop once this many successful episodes are collected.
    pub success_target: Option<usize>,
    /// Below this many successes a degradation warning is emitted.
    pub min_success_warning: usize,
    /// Environment-step cap; an episode cut by the cap is discarded.
    pub max_env_steps: Option<usize>,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            episodes: None,
            success_target: Some(1000),
            min_success_warning: trajstore::MIN_SUCCESS_EPISODES,
            max_env_steps: Some(100_000),
        }
    }
}

impl HarvestConfig {
    /// Exactly `n` complete episodes, no other stopping rule.
    pub fn episodes(n: usize) -> Self {
        Self {
            episodes: Some(n),
            success_target: None,
            max_env_steps: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes.is_none() && self.success_target.is_none() && self.max_env_steps.is_none() {
            return Err(Error::Config("harvest needs at least one stopping rule".into()));
        }
        if self.episodes == Some(0) || self.success_target == Some(0) || self.max_env_steps == Some(0) {
            return Err(Error::Config("harvest limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Default seeds are `seed_base + i`.
    pub seed_base: u64,
    /// Explicit seed list; overrides `episodes` and `seed_base`.
    pub seeds: Option<Vec<u64>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed_base: 1_000_000_000,
            seeds: None,
        }
    }
}

impl EvalConfig {
    pub fn episode_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.episodes as u64).map(|i| self.seed_base + i).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub env_id: EnvId,
    pub seed: u64,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub diffusion: DiffusionConfig,
    pub harvest: HarvestConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_env(EnvId::ReachServe)
    }
}

impl PipelineConfig {
    /// Defaults for one task. ReachServe uses a 50k-step budget with a
    /// narrower initial policy; SweepWipe uses 100k steps.
    pub fn for_env(env_id: EnvId) -> Self {
        let ppo = match env_id {
            EnvId::ReachServe => PpoConfig {
                total_timesteps: 50_000,
                log_std_init: -1.0,
                learning_rate: 1e-3,
                ..PpoConfig::default()
            },
            EnvId::SweepWipe => PpoConfig {
                total_timesteps: 100_000,
                ..PpoConfig::default()
            },
        };
        Self {
            env_id,
            seed: 0,
            env: EnvConfig::default(),
            ppo,
            diffusion: DiffusionConfig::default(),
            harvest: HarvestConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }

    /// Parses a JSON document layered over the defaults of its `env_id`
    /// (ReachServe when absent). Nested sections merge key by key.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let env_id = match user.get("env_id") {
            Some(v) => serde_json::from_value::<EnvId>(v.clone()).map_err(|e| Error::Config(format!("env_id: {e}")))?,
            None => EnvId::ReachServe,
        };
        let mut base = serde_json::to_value(Self::for_env(env_id))?;
        merge(&mut base, user);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.diffusion.validate()?;
        self.harvest.validate()?;
        let seeds = self.eval.episode_seeds();
        if seeds.is_empty() {
            return Err(Error::Config("evaluation needs at least one seed".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Config("evaluation seeds must be distinct".into()));
        }
        if seeds.contains(&self.seed) {
            return Err(Error::Config(format!(
                "evaluation seeds must not include the training seed {}",
                self.seed
            )));
        }
        Ok(())
    }

    pub fn env(&self) -> Env {
        Env::new(self.env_id, self.env.clone())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Debug)]
pub struct HarvestOutcome {
    pub dataset: Vec<Trajectory>,
    pub env_steps: usize,
    pub successes: usize,
}

/// Rolls out `policy` with auto-reset until a stopping rule fires.
/// Episode seeds and action noise derive from `seed`.
pub fn harvest<P: RolloutPolicy + ?Sized>(
    policy: &P,
    env: Env,
    cfg: &HarvestConfig,
    seed: u64,
) -> Result<HarvestOutcome> {
    cfg.validate()?;
    let mut collector =
        RolloutCollector::with_streams(env, seed, stream::HARVEST_EPISODES, stream::HARVEST_ACTIONS).recording(true);
    let mut out = HarvestOutcome {
        dataset: Vec::new(),
        env_steps: 0,
        successes: 0,
    };
    loop {
        if cfg.episodes.is_some_and(|n| out.dataset.len() >= n)
            || cfg.success_target.is_some_and(|n| out.successes >= n)
        {
            break;
        }
        if cfg.max_env_steps.is_some_and(|n| out.env_steps >= n) {
            if collector.episode_progress() > 0 {
                log::debug!("discarding episode cut by the step cap");
            }
            break;
        }
        collector.collect(policy, 1)?;
        out.env_steps += 1;
        for traj in collector.take_recorded() {
            out.successes += usize::from(traj.is_success());
            out.dataset.push(traj);
        }
    }
    log::info!(
        "harvest: {} episodes, {} successful, {} env steps",
        out.dataset.len(),
        out.successes,
        out.env_steps
    );
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub episodes: usize,
    pub successful: usize,
    pub warning: Option<String>,
}

impl fmt::Display for FilterSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "episodes: {}, successful: {}", self.episodes, self.successful)
    }
}

pub fn filter_dataset(dataset: &[Trajectory], min_success: usize) -> Result<(Vec<Trajectory>, FilterSummary)> {
    let kept = filter_success(dataset)?;
    let warning = trajstore::min_success_warning(kept.len(), min_success);
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let summary = FilterSummary {
        episodes: dataset.len(),
        successful: kept.len(),
        warning,
    };
    Ok((kept, summary))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    PpoStochastic,
    PpoMean,
    Diffusion,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::PpoStochastic, PolicyKind::PpoMean, PolicyKind::Diffusion];

    pub fn name(self) -> &'static str {
        match self {
            Self::PpoStochastic => "ppo-stochastic",
            Self::PpoMean => "ppo-mean",
            Self::Diffusion => "diffusion",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy kind '{s}' (ppo-stochastic, ppo-mean, diffusion)")))
    }
}

/// A controller driven one episode at a time.
pub trait EpisodePolicy {
    fn reset(&mut self, episode_seed: u64);
    fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>>;
}

pub struct PpoEpisodePolicy<'a> {
    pub policy: &'a GaussianPolicy,
    pub stochastic: bool,
    rng: ChaCha8Rng,
}

impl<'a> PpoEpisodePolicy<'a> {
    pub fn new(policy: &'a GaussianPolicy, stochastic: bool) -> Self {
        Self {
            policy,
            stochastic,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl EpisodePolicy for PpoEpisodePolicy<'_> {
    fn reset(&mut self, episode_seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(derive_seed(episode_seed, stream::EVAL_POLICY, 0));
    }

    fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>> {
        if self.stochastic {
            Ok(self.policy.sample(obs, &mut self.rng)?.raw_action)
        } else {
            self.policy.action_mean(obs)
        }
    }
}

impl EpisodePolicy for crate::diffusion::DiffusionController<'_> {
    fn reset(&mut self, episode_seed: u64) {
        crate::diffusion::DiffusionController::reset(self, derive_seed(episode_seed, stream::EVAL_POLICY, 1));
    }

    fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>> {
        crate::diffusion::DiffusionController::act(self, obs)
    }
}

/// The reference PD controller.
pub struct ScriptedEpisodePolicy {
    pub env_id: EnvId,
    pub controller: ScriptedController,
}

impl EpisodePolicy for ScriptedEpisodePolicy {
    fn reset(&mut self, _episode_seed: u64) {}

    fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.controller.act(self.env_id, obs))
    }
}

/// Zero action at every step.
pub struct ZeroPolicy(pub usize);

impl EpisodePolicy for ZeroPolicy {
    fn reset(&mut self, _episode_seed: u64) {}

    fn act(&mut self, _obs: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.0])
    }
}

/// Runs one episode per seed and counts successes.
pub fn run_episodes(policy: &mut dyn EpisodePolicy, env: &mut Env, seeds: &[u64]) -> Result<usize> {
    if seeds.is_empty() {
        return Err(Error::Argument("evaluation needs at least one seed".into()));
    }
    let mut successes = 0;
    for &seed in seeds {
        let mut obs = env.reset(seed);
        policy.reset(seed);
        loop {
            let action = policy.act(&obs)?;
            let r = env.step(&action)?;
            if r.done() {
                successes += usize::from(r.success);
                break;
            }
            obs = r.observation;
        }
    }
    Ok(successes)
}

/// Wilson score interval for `s` successes out of `n`, clipped to [0, 1].
pub fn wilson_interval(s: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 || s > n || !(z > 0.0) {
        return Err(Error::Argument(format!("wilson_interval needs 0 <= s <= n, n >= 1, z > 0 (s={s}, n={n}, z={z})")));
    }
    let (nf, p) = (n as f64, s as f64 / n as f64);
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let low = if s == 0 { 0.0 } else { (center - half).clamp(0.0, 1.0) };
    let high = if s == n { 1.0 } else { (center + half).clamp(0.0, 1.0) };
    Ok((low.min(p), high.max(p)))
}

pub const WILSON_Z: f64 = 1.96;

/// One evaluated policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: EnvId,
    pub policy: PolicyKind,
    pub n: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub checkpoint: String,
    pub seeds: Vec<u64>,
}

impl EvalRow {
    pub fn new(task: EnvId, policy: PolicyKind, successes: usize, seeds: Vec<u64>, checkpoint: String) -> Result<Self> {
        let n = seeds.len();
        let (ci_low, ci_high) = wilson_interval(successes, n, WILSON_Z)?;
        Ok(Self {
            task,
            policy,
            n,
            successes,
            rate: successes as f64 / n as f64,
            ci_low,
            ci_high,
            checkpoint,
            seeds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// A policy loaded for evaluation.
pub enum LoadedPolicy {
    Ppo(GaussianPolicy),
    Diffusion(DiffusionPolicy),
}

impl LoadedPolicy {
    pub fn load(kind: PolicyKind, path: &Path) -> Result<(EnvId, Self)> {
        match kind {
            PolicyKind::PpoStochastic | PolicyKind::PpoMean => {
                let ckpt = PolicyCheckpoint::load(path)?;
                Ok((ckpt.env_id, Self::Ppo(GaussianPolicy::from_checkpoint(&ckpt)?)))
            }
            PolicyKind::Diffusion => {
                let ckpt = DenoiserCheckpoint::load(path)?;
                let env_id = ckpt
                    .env_id
                    .ok_or_else(|| Error::Config("denoiser checkpoint does not name its environment".into()))?;
                Ok((env_id, Self::Diffusion(DiffusionPolicy::from_checkpoint(&ckpt)?)))
            }
        }
    }
}

/// Evaluates one policy kind on the given episode seeds.
pub fn evaluate(kind: PolicyKind, policy: &LoadedPolicy, env: &mut Env, seeds: &[u64], checkpoint: &str) -> Result<EvalRow> {
    let (obs_dim, act_dim) = match policy {
        LoadedPolicy::Ppo(p) => (p.obs_dim(), p.action_dim()),
        LoadedPolicy::Diffusion(p) => (p.denoiser.obs_dim, p.denoiser.action_dim),
    };
    if obs_dim != env.obs_dim() || act_dim != env.action_dim() {
        return Err(Error::Config(format!(
            "policy dimensions ({obs_dim}, {act_dim}) do not match {} ({}, {})",
            env.id(),
            env.obs_dim(),
            env.action_dim()
        )));
    }
    let successes = match (kind, policy) {
        (PolicyKind::PpoStochastic, LoadedPolicy::Ppo(p)) => run_episodes(&mut PpoEpisodePolicy::new(p, true), env, seeds)?,
        (PolicyKind::PpoMean, LoadedPolicy::Ppo(p)) => run_episodes(&mut PpoEpisodePolicy::new(p, false), env, seeds)?,
        (PolicyKind::Diffusion, LoadedPolicy::Diffusion(p)) => run_episodes(&mut p.controller(0), env, seeds)?,
        _ => return Err(Error::Config(format!("checkpoint type does not match policy kind {kind}"))),
    };
    let row = EvalRow::new(env.id(), kind, successes, seeds.to_vec(), checkpoint.to_string())?;
    log::info!("evaluate {kind}: {successes}/{} = {:.3}", row.n, row.rate);
    Ok(row)
}

/// Comparison table over evaluated policies.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<EvalRow>,
}

pub const REPORT_HEADER: [&str; 7] = ["task", "policy", "n", "successes", "rate", "ci_low", "ci_high"];

impl Report {
    pub fn new(mut rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Argument("report needs at least one evaluation row".into()));
        }
        rows.sort_by_key(|r| (r.task.name(), r.policy));
        Ok(Self { rows })
    }

    /// Diffusion rate minus stochastic-baseline rate for `task`, when both
    /// rows exist.
    pub fn delta(&self, task: EnvId) -> Option<f64> {
        let rate = |k| self.rows.iter().find(|r| r.task == task && r.policy == k).map(|r| r.rate);
        Some(rate(PolicyKind::Diffusion)? - rate(PolicyKind::PpoStochastic)?)
    }

    fn has_delta(&self) -> bool {
        self.rows.iter().any(|r| self.delta(r.task).is_some())
    }

    fn cells(&self) -> (Vec<&str>, Vec<Vec<String>>) {
        let with_delta = self.has_delta();
        let mut header = REPORT_HEADER.to_vec();
        if with_delta {
            header.push("delta");
        }
        let body = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![
                    r.task.to_string(),
                    r.policy.to_string(),
                    r.n.to_string(),
                    r.successes.to_string(),
                    r.rate.to_string(),
                    r.ci_low.to_string(),
                    r.ci_high.to_string(),
                ];
                if with_delta {
                    cells.push(match (r.policy, self.delta(r.task)) {
                        (PolicyKind::Diffusion, Some(d)) => d.to_string(),
                        _ => String::new(),
                    });
                }
                cells
            })
            .collect();
        (header, body)
    }

    pub fn to_csv(&self) -> String {
        let (header, body) = self.cells();
        let mut out = header.join(",");
        out.push('\n');
        for row in body {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let with_delta = self.has_delta();
        let mut header: Vec<String> = REPORT_HEADER.iter().map(|s| s.to_string()).collect();
        if with_delta {
            header.push("delta".into());
        }
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![
                    r.task.to_string(),
                    r.policy.to_string(),
                    r.n.to_string(),
                    r.successes.to_string(),
                    format!("{:.3}", r.rate),
                    format!("{:.3}", r.ci_low),
                    format!("{:.3}", r.ci_high),
                ];
                if with_delta {
                    cells.push(match (r.policy, self.delta(r.task)) {
                        (PolicyKind::Diffusion, Some(d)) => format!("{d:+.3}"),
                        _ => String::new(),
                    });
                }
                cells
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&header);
        for row in &body {
            out.push_str(&line(row));
        }
        for r in &self.rows {
            out.push_str(&format!("# {} {}: checkpoint {}\n", r.task, r.policy, r.checkpoint));
        }
        out
    }

    /// Reads a CSV written by [`Report::to_csv`]. Checkpoint paths and seed
    /// lists are not part of the CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let path = PathBuf::from("<report csv>");
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.clone(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| perr(1, "empty report".into()))?.split(',').collect();
        if header[..] != REPORT_HEADER[..] && header[..REPORT_HEADER.len().min(header.len())] != REPORT_HEADER[..] {
            return Err(perr(1, format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != header.len() {
                return Err(perr(i + 2, "wrong number of columns".into()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| perr(i + 2, e.to_string()));
            let int = |s: &str| s.parse::<usize>().map_err(|e| perr(i + 2, e.to_string()));
            rows.push(EvalRow {
                task: c[0].parse().map_err(|e: Error| perr(i + 2, e.to_string()))?,
                policy: c[1].parse().map_err(|e: Error| perr(i + 2, e.to_string()))?,
                n: int(c[2])?,
                successes: int(c[3])?,
                rate: num(c[4])?,
                ci_low: num(c[5])?,
                ci_high: num(c[6])?,
                checkpoint: String::new(),
                seeds: Vec::new(),
            });
        }
        Self::new(rows)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(files::REPORT_CSV), &self.to_csv())?;
        write_text(&dir.join(files::REPORT_TXT), &self.to_text())
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains the PPO baseline and writes its checkpoint and curve. With
/// `harvest_during_training`, successful training episodes are written to
/// the success dataset as well. A diverged run still writes the last good
/// checkpoint before the error is returned.
pub fn run_train_ppo(cfg: &PipelineConfig, harvest_during_training: bool) -> Result<PpoTrainer> {
    ensure_dir(&cfg.out_dir)?;
    let mut trainer =
        PpoTrainer::new(cfg.env_id, cfg.env.clone(), cfg.ppo.clone(), cfg.seed)?.harvesting(harvest_during_training);
    let result = trainer.run();
    trainer.checkpoint().save(&cfg.out_dir.join(files::PPO_CHECKPOINT))?;
    let mut curve = Vec::new();
    write_curve_csv(trainer.curve(), &mut curve).map_err(|e| Error::io(cfg.out_dir.join(files::PPO_CURVE), e))?;
    write_text(&cfg.out_dir.join(files::PPO_CURVE), &String::from_utf8_lossy(&curve))?;
    result?;
    if harvest_during_training {
        let kept = trainer.take_harvest();
        log::info!("kept {} successful training episodes", kept.len());
        trajstore::save_dataset(&kept, &cfg.out_dir.join(files::DATASET_SUCC))?;
    }
    Ok(trainer)
}

/// Writes the denoiser checkpoint, its normalization statistics and the
/// per-epoch loss curve.
pub fn run_train_diffusion(cfg: &PipelineConfig, d_succ: &[Trajectory]) -> Result<DiffusionPolicy> {
    ensure_dir(&cfg.out_dir)?;
    let out = train_diffusion(d_succ, &cfg.diffusion, cfg.seed)?;
    out.policy.to_checkpoint().save(&cfg.out_dir.join(files::DENOISER))?;
    out.policy.stats.save(&cfg.out_dir.join(files::NORM_STATS))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in out.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_text(&cfg.out_dir.join(files::DIFFUSION_LOSS), &csv)?;
    Ok(out.policy)
}

/// Everything produced by [`run_end_to_end`].
#[derive(Clone, Debug)]
pub struct EndToEnd {
    pub harvest_episodes: usize,
    pub harvest_env_steps: usize,
    pub filter: FilterSummary,
    pub report: Report,
}

impl EndToEnd {
    pub fn rate(&self, kind: PolicyKind) -> Option<f64> {
        self.report.rows.iter().find(|r| r.policy == kind).map(|r| r.rate)
    }
}

/// Train PPO, harvest, filter, distill, evaluate all three policies and
/// write the report, all under `cfg.out_dir`.
pub fn run_end_to_end(cfg: &PipelineConfig) -> Result<EndToEnd> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let trainer = run_train_ppo(cfg, false)?;
    let policy = trainer.policy().clone();

    let harvested = harvest(&policy, cfg.env(), &cfg.harvest, cfg.seed)?;
    trajstore::save_dataset(&harvested.dataset, &dir.join(files::DATASET))?;
    let (d_succ, filter) = filter_dataset(&harvested.dataset, cfg.harvest.min_success_warning)?;
    trajstore::save_dataset(&d_succ, &dir.join(files::DATASET_SUCC))?;

    let seeds = cfg.eval.episode_seeds();
    let mut env = cfg.env();
    let ppo = LoadedPolicy::Ppo(policy);
    let ppo_path = dir.join(files::PPO_CHECKPOINT).display().to_string();
    let mut rows = vec![
        evaluate(PolicyKind::PpoStochastic, &ppo, &mut env, &seeds, &ppo_path)?,
        evaluate(PolicyKind::PpoMean, &ppo, &mut env, &seeds, &ppo_path)?,
    ];
    if d_succ.is_empty() {
        log::warn!("no successful episodes; skipping diffusion training");
    } else {
        let diffusion = LoadedPolicy::Diffusion(run_train_diffusion(cfg, &d_succ)?);
        let path = dir.join(files::DENOISER).display().to_string();
        rows.push(evaluate(PolicyKind::Diffusion, &diffusion, &mut env, &seeds, &path)?);
    }
    for r in &rows {
        r.save(&dir.join(files::eval(r.policy)))?;
    }
    let report = Report::new(rows)?;
    report.save(dir)?;
    Ok(EndToEnd {
        harvest_episodes: harvested.dataset.len(),
        harvest_env_steps: harvested.env_steps,
        filter,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed_form(s: f64, n: f64, z: f64) -> (f64, f64) {
        let p = s / n;
        let a = p + z * z / (2.0 * n);
        let b = z * ((p * (1.0 - p) + z * z / (4.0 * n)) / n).sqrt();
        let c = 1.0 + z * z / n;
        ((a - b) / c, (a + b) / c)
    }

    #[test]
    fn wilson_matches_closed_form() {
        let (lo, hi) = wilson_interval(86, 100, 1.96).unwrap();
        let (elo, ehi) = closed_form(86.0, 100.0, 1.96);
        assert!((lo - elo).abs() < 1e-9 && (hi - ehi).abs() < 1e-9);
        assert!(lo < 0.86 && 0.86 < hi);
    }

    #[test]
    fn wilson_boundaries_and_errors() {
        assert_eq!(wilson_interval(0, 10, 1.96).unwrap().0, 0.0);
        assert_eq!(wilson_interval(10, 10, 1.96).unwrap().1, 1.0);
        assert!(matches!(wilson_interval(11, 10, 1.96), Err(Error::Argument(_))));
        assert!(matches!(wilson_interval(0, 0, 1.96), Err(Error::Argument(_))));
        assert!(matches!(wilson_interval(1, 2, 0.0), Err(Error::Argument(_))));
        for n in 1..40 {
            for s in 0..=n {
                let (lo, hi) = wilson_interval(s, n, 1.96).unwrap();
                let p = s as f64 / n as f64;
                assert!((0.0..=p).contains(&lo) && (p..=1.0).contains(&hi));
            }
        }
    }

    fn row(policy: PolicyKind, s: usize) -> EvalRow {
        EvalRow::new(EnvId::ReachServe, policy, s, (0..100).collect(), "ckpt".into()).unwrap()
    }

    #[test]
    fn report_delta_and_layout() {
        let r = Report::new(vec![row(PolicyKind::PpoStochastic, 33), row(PolicyKind::Diffusion, 86)]).unwrap();
        assert!((r.delta(EnvId::ReachServe).unwrap() - 0.53).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.starts_with("task,policy,n,successes,rate,ci_low,ci_high,delta\n"));
        assert!(r.to_text().contains("+0.530"));

        let single = Report::new(vec![row(PolicyKind::PpoMean, 50)]).unwrap();
        assert!(single.delta(EnvId::ReachServe).is_none());
        assert!(!single.to_csv().contains("delta"));
        assert!(matches!(Report::new(vec![]), Err(Error::Argument(_))));
    }

    #[test]
    fn report_csv_round_trips() {
        let r = Report::new(PolicyKind::ALL.iter().zip([17, 61, 93]).map(|(&k, s)| row(k, s)).collect()).unwrap();
        let back = Report::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back.rows.len(), 3);
        for (a, b) in r.rows.iter().zip(&back.rows) {
            assert_eq!((a.task, a.policy, a.n, a.successes), (b.task, b.policy, b.n, b.successes));
            assert_eq!((a.rate, a.ci_low, a.ci_high), (b.rate, b.ci_low, b.ci_high));
        }
    }

    #[test]
    fn rate_from_counts() {
        let r = row(PolicyKind::Diffusion, 86);
        assert_eq!(r.rate, 0.86);
        assert!(r.ci_low <= r.rate && r.rate <= r.ci_high);
    }

    #[test]
    fn zero_policy_never_succeeds() {
        let mut env = Env::new(EnvId::ReachServe, EnvConfig::default());
        let seeds: Vec<u64> = (0..20).collect();
        assert_eq!(run_episodes(&mut ZeroPolicy(2), &mut env, &seeds).unwrap(), 0);
    }

    #[test]
    fn scripted_controller_without_drift_always_succeeds() {
        let mut cfg = EnvConfig::default();
        cfg.reach_serve.drift_sigma = 0.0;
        let mut env = Env::new(EnvId::ReachServe, cfg);
        let seeds: Vec<u64> = (0..50).map(|i| 5_000 + i).collect();
        let mut p = ScriptedEpisodePolicy {
            env_id: EnvId::ReachServe,
            controller: ScriptedController::default(),
        };
        let s = run_episodes(&mut p, &mut env, &seeds).unwrap();
        let row = EvalRow::new(EnvId::ReachServe, PolicyKind::PpoMean, s, seeds, String::new()).unwrap();
        assert_eq!(row.rate, 1.0);
    }

    #[test]
    fn config_layers_over_env_defaults() {
        let cfg = PipelineConfig::from_json_str(r#"{"env_id": "SweepWipe-v0", "ppo": {"clip": 0.1}}"#).unwrap();
        assert_eq!(cfg.ppo.total_timesteps, 100_000);
        assert_eq!(cfg.ppo.clip, 0.1);
        assert_eq!(cfg.ppo.rollout_length, 2048);
        let cfg = PipelineConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(matches!(
            PipelineConfig::from_json_str(r#"{"ppo": {"bogus": 1}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_json_str(r#"{"env_id": "Nope-v0"}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_json_str(r#"{"seed": 7, "eval": {"seeds": [1, 7]}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn harvest_episode_count_and_determinism() {
        let p = GaussianPolicy::new(5, 2, &[8], -1.0, 0).unwrap();
        let env = || Env::new(EnvId::ReachServe, EnvConfig::default());
        let a = harvest(&p, env(), &HarvestConfig::episodes(3), 4).unwrap();
        assert_eq!(a.dataset.len(), 3);
        let b = harvest(&p, env(), &HarvestConfig::episodes(3), 4).unwrap();
        assert_eq!(a.dataset, b.dataset);

        let capped = HarvestConfig {
            episodes: None,
            success_target: Some(10),
            max_env_steps: Some(450),
            ..HarvestConfig::default()
        };
        let c = harvest(&p, env(), &capped, 4).unwrap();
        assert_eq!(c.env_steps, 450);
        assert!(c.dataset.iter().all(|t| t.validate().is_ok()));
        assert!(c.dataset.iter().map(|t| t.len()).sum::<usize>() <= 450);
    }
}
