//! Surrogate assistive environments.
//!
//! Both tasks share a 2-D point effector with bounded velocity inside the
//! unit box. Actions are accelerations in `[-1, 1]^2`; out-of-range values
//! are clamped. Each step returns a dense shaping reward for RL training and
//! a separate binary success flag. Episodes terminate on the first success,
//! so a trajectory contains at most one successful step.
//!
//! * `ReachServe-v0`: carry food to a drifting mouth without spilling.
//! * `SweepWipe-v0`: touch at least 6 of 8 spots with a sponge.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACTION_DIM: usize = 2;
pub const REACH_SERVE_OBS_DIM: usize = 5;
pub const SWEEP_WIPE_OBS_DIM: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvId {
    ReachServe,
    SweepWipe,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::ReachServe => "ReachServe-v0",
            EnvId::SweepWipe => "SweepWipe-v0",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvId::ReachServe => REACH_SERVE_OBS_DIM,
            EnvId::SweepWipe => SWEEP_WIPE_OBS_DIM,
        }
    }

    pub fn action_dim(self) -> usize {
        ACTION_DIM
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ReachServe-v0" => Ok(EnvId::ReachServe),
            "SweepWipe-v0" => Ok(EnvId::SweepWipe),
            other => Err(Error::Config(format!("unknown env_id {other:?}"))),
        }
    }
}

impl Serialize for EnvId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for EnvId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Box bounds of an observation or action space.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceSpec {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl SpaceSpec {
    pub fn dim(&self) -> usize {
        self.low.len()
    }
}

/// Constants shared by both tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Velocity change per unit action.
    pub accel_gain: f64,
    /// Per-component speed limit (units/step).
    pub v_max: f64,
    pub start: [f64; 2],
    pub reach_serve: ReachServeConfig,
    pub sweep_wipe: SweepWipeConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            accel_gain: 0.01,
            v_max: 0.05,
            start: [0.1, 0.1],
            reach_serve: ReachServeConfig::default(),
            sweep_wipe: SweepWipeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachServeConfig {
    pub mouth_low: f64,
    pub mouth_high: f64,
    /// Std-dev of the per-step mouth random walk; 0 disables drift.
    pub drift_sigma: f64,
    pub spill_threshold: f64,
    pub spill_amount: f64,
    pub success_radius: f64,
    pub success_speed: f64,
    pub food_threshold: f64,
    pub success_bonus: f64,
    pub max_steps: u32,
}

impl Default for ReachServeConfig {
    fn default() -> Self {
        Self {
            mouth_low: 0.6,
            mouth_high: 0.9,
            drift_sigma: 0.002,
            spill_threshold: 0.8,
            spill_amount: 0.05,
            success_radius: 0.03,
            success_speed: 0.02,
            food_threshold: 0.75,
            success_bonus: 10.0,
            max_steps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepWipeConfig {
    pub n_spots: usize,
    pub touch_radius: f64,
    pub spots_required: usize,
    pub touch_bonus: f64,
    pub success_bonus: f64,
    pub max_steps: u32,
}

impl Default for SweepWipeConfig {
    fn default() -> Self {
        Self {
            n_spots: 8,
            touch_radius: 0.03,
            spots_required: 6,
            touch_bonus: 1.0,
            success_bonus: 10.0,
            max_steps: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    /// Value of the binary success reward at the new state.
    pub success: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReachServeState {
    pub p: [f64; 2],
    pub v: [f64; 2],
    pub mouth: [f64; 2],
    pub food: f64,
    pub t: u32,
}

impl ReachServeState {
    pub fn is_success(&self, cfg: &ReachServeConfig) -> bool {
        dist(self.p, self.mouth) <= cfg.success_radius
            && norm(self.v) <= cfg.success_speed
            && self.food >= cfg.food_threshold
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.mouth[0] - self.p[0],
            self.mouth[1] - self.p[1],
            self.v[0],
            self.v[1],
            self.food,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepWipeState {
    pub p: [f64; 2],
    pub v: [f64; 2],
    pub spots: Vec<[f64; 2]>,
    pub touched: Vec<bool>,
    pub t: u32,
}

impl SweepWipeState {
    pub fn touched_count(&self) -> usize {
        self.touched.iter().filter(|&&t| t).count()
    }

    pub fn is_success(&self, cfg: &SweepWipeConfig) -> bool {
        self.touched_count() >= cfg.spots_required
    }

    /// Offset from the effector to the closest untouched spot, or zero when
    /// every spot has been touched.
    pub fn nearest_untouched(&self) -> [f64; 2] {
        self.spots
            .iter()
            .zip(&self.touched)
            .filter(|(_, &t)| !t)
            .map(|(s, _)| [s[0] - self.p[0], s[1] - self.p[1]])
            .min_by(|a, b| norm(*a).total_cmp(&norm(*b)))
            .unwrap_or([0.0, 0.0])
    }

    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(4 + self.touched.len() + 2);
        obs.extend_from_slice(&self.p);
        obs.extend_from_slice(&self.v);
        obs.extend(self.touched.iter().map(|&t| if t { 1.0 } else { 0.0 }));
        obs.extend_from_slice(&self.nearest_untouched());
        obs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvState {
    ReachServe(ReachServeState),
    SweepWipe(SweepWipeState),
}

/// Pure success predicate used by [`Env::step`].
pub fn success_predicate(state: &EnvState, cfg: &EnvConfig) -> bool {
    match state {
        EnvState::ReachServe(s) => s.is_success(&cfg.reach_serve),
        EnvState::SweepWipe(s) => s.is_success(&cfg.sweep_wipe),
    }
}

/// A single-owner environment instance. All randomness comes from the stream
/// seeded at [`Env::reset`].
#[derive(Clone, Debug)]
pub struct Env {
    id: EnvId,
    cfg: EnvConfig,
    state: EnvState,
    rng: ChaCha8Rng,
    finished: bool,
}

fn norm(x: [f64; 2]) -> f64 {
    x[0].hypot(x[1])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    norm([a[0] - b[0], a[1] - b[1]])
}

impl Env {
    /// Creates an environment and resets it with seed 0.
    pub fn new(id: EnvId, cfg: EnvConfig) -> Self {
        let mut env = Self {
            id,
            cfg,
            state: EnvState::ReachServe(ReachServeState {
                p: [0.0; 2],
                v: [0.0; 2],
                mouth: [0.0; 2],
                food: 1.0,
                t: 0,
            }),
            rng: ChaCha8Rng::seed_from_u64(0),
            finished: true,
        };
        env.reset(0);
        env
    }

    pub fn from_name(name: &str, cfg: EnvConfig) -> Result<Self> {
        Ok(Self::new(name.parse()?, cfg))
    }

    pub fn id(&self) -> EnvId {
        self.id
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Replaces the current state. Intended for tests and oracles.
    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
        self.finished = false;
    }

    pub fn obs_dim(&self) -> usize {
        self.id.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    pub fn action_spec(&self) -> SpaceSpec {
        SpaceSpec {
            low: vec![-1.0; ACTION_DIM],
            high: vec![1.0; ACTION_DIM],
        }
    }

    pub fn observation_spec(&self) -> SpaceSpec {
        let n = self.obs_dim();
        match self.id {
            EnvId::ReachServe => SpaceSpec {
                low: vec![-1.0, -1.0, -self.cfg.v_max, -self.cfg.v_max, 0.0],
                high: vec![1.0, 1.0, self.cfg.v_max, self.cfg.v_max, 1.0],
            },
            EnvId::SweepWipe => {
                let mut low = vec![0.0; n];
                let mut high = vec![1.0; n];
                low[2] = -self.cfg.v_max;
                low[3] = -self.cfg.v_max;
                high[2] = self.cfg.v_max;
                high[3] = self.cfg.v_max;
                low[n - 2] = -1.0;
                low[n - 1] = -1.0;
                SpaceSpec { low, high }
            }
        }
    }

    pub fn max_steps(&self) -> u32 {
        match self.id {
            EnvId::ReachServe => self.cfg.reach_serve.max_steps,
            EnvId::SweepWipe => self.cfg.sweep_wipe.max_steps,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn observation(&self) -> Vec<f64> {
        match &self.state {
            EnvState::ReachServe(s) => s.observation(),
            EnvState::SweepWipe(s) => s.observation(),
        }
    }

    pub fn is_success(&self) -> bool {
        success_predicate(&self.state, &self.cfg)
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.finished = false;
        let start = self.cfg.start;
        self.state = match self.id {
            EnvId::ReachServe => {
                let c = &self.cfg.reach_serve;
                let mouth = [
                    self.rng.random_range(c.mouth_low..=c.mouth_high),
                    self.rng.random_range(c.mouth_low..=c.mouth_high),
                ];
                EnvState::ReachServe(ReachServeState {
                    p: start,
                    v: [0.0; 2],
                    mouth,
                    food: 1.0,
                    t: 0,
                })
            }
            EnvId::SweepWipe => {
                let n = self.cfg.sweep_wipe.n_spots;
                let spots = (0..n)
                    .map(|_| [self.rng.random::<f64>(), self.rng.random::<f64>()])
                    .collect();
                EnvState::SweepWipe(SweepWipeState {
                    p: start,
                    v: [0.0; 2],
                    spots,
                    touched: vec![false; n],
                    t: 0,
                })
            }
        };
        self.observation()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.finished {
            return Err(Error::EpisodeFinished);
        }
        if action.len() != ACTION_DIM {
            return Err(Error::Shape(format!(
                "action has length {}, expected {ACTION_DIM}",
                action.len()
            )));
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let (gain, v_max) = (self.cfg.accel_gain, self.cfg.v_max);
        let integrate = |p: &mut [f64; 2], v: &mut [f64; 2]| {
            for i in 0..2 {
                v[i] = (v[i] + gain * a[i]).clamp(-v_max, v_max);
                p[i] = (p[i] + v[i]).clamp(0.0, 1.0);
            }
        };

        let (reward, success, t) = match &mut self.state {
            EnvState::ReachServe(s) => {
                let c = &self.cfg.reach_serve;
                integrate(&mut s.p, &mut s.v);
                if c.drift_sigma > 0.0 {
                    for i in 0..2 {
                        let eta: f64 = self.rng.sample(StandardNormal);
                        s.mouth[i] = (s.mouth[i] + c.drift_sigma * eta).clamp(0.0, 1.0);
                    }
                }
                if a[0].abs().max(a[1].abs()) > c.spill_threshold {
                    s.food = (s.food - c.spill_amount).max(0.0);
                }
                s.t += 1;
                let success = s.is_success(c);
                let bonus = if success { c.success_bonus } else { 0.0 };
                (-dist(s.p, s.mouth) + bonus, success, s.t)
            }
            EnvState::SweepWipe(s) => {
                let c = &self.cfg.sweep_wipe;
                integrate(&mut s.p, &mut s.v);
                let mut newly = 0usize;
                for (spot, touched) in s.spots.iter().zip(s.touched.iter_mut()) {
                    if !*touched && dist(s.p, *spot) <= c.touch_radius {
                        *touched = true;
                        newly += 1;
                    }
                }
                s.t += 1;
                let success = s.is_success(c);
                let bonus = if success { c.success_bonus } else { 0.0 };
                let r = -norm(s.nearest_untouched()) + c.touch_bonus * newly as f64 + bonus;
                (r, success, s.t)
            }
        };

        let terminated = success;
        let truncated = !terminated && t >= self.max_steps();
        self.finished = terminated || truncated;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            terminated,
            truncated,
            success,
        })
    }
}

/// Proportional-derivative reference controller,
/// `a = clamp(gain * target_offset - damping * v, ±limit)`.
///
/// On ReachServe the target is the mouth; on SweepWipe it is the nearest
/// untouched spot. The default limit stays at the spill threshold so the
/// controller never spills food.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScriptedController {
    pub gain: f64,
    pub damping: f64,
    pub limit: f64,
}

impl Default for ScriptedController {
    fn default() -> Self {
        Self {
            gain: 1.0,
            damping: 20.0,
            limit: 0.8,
        }
    }
}

impl ScriptedController {
    pub fn act(&self, env_id: EnvId, obs: &[f64]) -> Vec<f64> {
        let (offset, v) = match env_id {
            EnvId::ReachServe => ([obs[0], obs[1]], [obs[2], obs[3]]),
            EnvId::SweepWipe => {
                let n = obs.len();
                ([obs[n - 2], obs[n - 1]], [obs[2], obs[3]])
            }
        };
        (0..2)
            .map(|i| (self.gain * offset[i] - self.damping * v[i]).clamp(-self.limit, self.limit))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_drift() -> EnvConfig {
        let mut cfg = EnvConfig::default();
        cfg.reach_serve.drift_sigma = 0.0;
        cfg
    }

    fn reach_state(env: &Env) -> ReachServeState {
        match env.state() {
            EnvState::ReachServe(s) => s.clone(),
            _ => panic!("not ReachServe"),
        }
    }

    #[test]
    fn env_ids_parse() {
        assert_eq!("ReachServe-v0".parse::<EnvId>().unwrap(), EnvId::ReachServe);
        assert_eq!("SweepWipe-v0".parse::<EnvId>().unwrap(), EnvId::SweepWipe);
        assert!(matches!("Feeding-v1".parse::<EnvId>(), Err(Error::Config(_))));
        assert!(Env::from_name("nope", EnvConfig::default()).is_err());
    }

    #[test]
    fn reset_is_deterministic_and_full_of_food() {
        for id in [EnvId::ReachServe, EnvId::SweepWipe] {
            let mut a = Env::new(id, EnvConfig::default());
            let mut b = Env::new(id, EnvConfig::default());
            assert_eq!(a.reset(99), b.reset(99));
            assert_eq!(a.observation().len(), id.obs_dim());
        }
        let mut env = Env::new(EnvId::ReachServe, EnvConfig::default());
        let obs = env.reset(5);
        assert_eq!(obs[4], 1.0);
        assert_eq!(&obs[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn mouth_samples_stay_in_range() {
        let mut env = Env::new(EnvId::ReachServe, EnvConfig::default());
        for seed in 0..1000 {
            env.reset(seed);
            let m = reach_state(&env).mouth;
            assert!(m.iter().all(|&x| (0.6..=0.9).contains(&x)), "seed {seed}: {m:?}");
        }
    }

    #[test]
    fn rest_stays_at_rest() {
        let mut env = Env::new(EnvId::ReachServe, no_drift());
        env.set_state(EnvState::ReachServe(ReachServeState {
            p: [0.0, 0.0],
            v: [0.0, 0.0],
            mouth: [0.7, 0.7],
            food: 1.0,
            t: 0,
        }));
        let r = env.step(&[0.0, 0.0]).unwrap();
        let s = reach_state(&env);
        assert_eq!(s.p, [0.0, 0.0]);
        assert_eq!(s.v, [0.0, 0.0]);
        assert_eq!(s.food, 1.0);
        assert!(!r.success && !r.terminated && !r.truncated);
    }

    #[test]
    fn full_thrust_moves_and_spills() {
        let mut env = Env::new(EnvId::ReachServe, no_drift());
        env.reset(3);
        env.step(&[1.0, 0.0]).unwrap();
        let s = reach_state(&env);
        assert_eq!(s.v, [0.01, 0.0]);
        assert!((s.p[0] - 0.11).abs() < 1e-15 && s.p[1] == 0.1);
        assert_eq!(s.food, 0.95);
    }

    #[test]
    fn out_of_range_actions_are_clamped() {
        let mut a = Env::new(EnvId::SweepWipe, EnvConfig::default());
        let mut b = a.clone();
        let ra = a.step(&[5.0, -7.0]).unwrap();
        let rb = b.step(&[1.0, -1.0]).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn success_predicate_cases() {
        let cfg = EnvConfig::default();
        let mut s = ReachServeState {
            p: [0.5, 0.5],
            v: [0.0, 0.0],
            mouth: [0.51, 0.5],
            food: 1.0,
            t: 10,
        };
        assert!(success_predicate(&EnvState::ReachServe(s.clone()), &cfg));
        s.food = 0.70;
        assert!(!success_predicate(&EnvState::ReachServe(s.clone()), &cfg));
        s.mouth = s.p;
        assert!(!success_predicate(&EnvState::ReachServe(s), &cfg));

        let mut w = SweepWipeState {
            p: [0.0; 2],
            v: [0.0; 2],
            spots: vec![[0.5, 0.5]; 8],
            touched: vec![true, true, true, true, true, true, false, false],
            t: 0,
        };
        assert!(success_predicate(&EnvState::SweepWipe(w.clone()), &cfg));
        w.touched[5] = false;
        assert!(!success_predicate(&EnvState::SweepWipe(w), &cfg));
    }

    #[test]
    fn step_after_finish_errors() {
        let mut cfg = EnvConfig::default();
        cfg.reach_serve.max_steps = 2;
        let mut env = Env::new(EnvId::ReachServe, cfg);
        env.step(&[0.0, 0.0]).unwrap();
        let r = env.step(&[0.0, 0.0]).unwrap();
        assert!(r.truncated && !r.terminated);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::EpisodeFinished)));
        env.reset(1);
        assert!(env.step(&[0.0, 0.0]).is_ok());
    }

    #[test]
    fn wrong_action_length_is_shape_error() {
        let mut env = Env::new(EnvId::ReachServe, EnvConfig::default());
        assert!(matches!(env.step(&[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn scripted_controller_succeeds_without_drift() {
        let ctl = ScriptedController::default();
        for seed in 0..10 {
            let mut env = Env::new(EnvId::ReachServe, no_drift());
            let mut obs = env.reset(seed);
            let mut succeeded = false;
            for _ in 0..200 {
                let r = env.step(&ctl.act(EnvId::ReachServe, &obs)).unwrap();
                if r.success {
                    succeeded = true;
                    assert!(r.terminated);
                    break;
                }
                if r.done() {
                    break;
                }
                obs = r.observation;
            }
            assert!(succeeded, "seed {seed}");
        }
    }

    #[test]
    fn sweep_observation_layout() {
        let mut env = Env::new(EnvId::SweepWipe, EnvConfig::default());
        let obs = env.reset(4);
        assert_eq!(obs.len(), 14);
        assert_eq!(&obs[0..2], &[0.1, 0.1]);
        assert!(obs[4..12].iter().all(|&m| m == 0.0));
        let EnvState::SweepWipe(s) = env.state() else { panic!() };
        let nearest = s
            .spots
            .iter()
            .map(|sp| [sp[0] - 0.1, sp[1] - 0.1])
            .min_by(|a, b| norm(*a).total_cmp(&norm(*b)))
            .unwrap();
        assert_eq!(&obs[12..14], &nearest);
    }

    #[test]
    fn invariants_hold_under_random_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in [EnvId::ReachServe, EnvId::SweepWipe] {
            for seed in 0..20 {
                let mut env = Env::new(id, EnvConfig::default());
                env.reset(seed);
                let mut prev_food = 1.0;
                let mut prev_mask = vec![false; 8];
                let mut successes = 0;
                loop {
                    let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
                    let r = env.step(&a).unwrap();
                    successes += r.success as u32;
                    if r.success {
                        assert!(r.terminated);
                    }
                    match env.state() {
                        EnvState::ReachServe(s) => {
                            assert!(s.food <= prev_food && (0.0..=1.0).contains(&s.food));
                            prev_food = s.food;
                            assert!(s.v.iter().all(|v| v.abs() <= 0.05));
                            assert!(s.p.iter().all(|p| (0.0..=1.0).contains(p)));
                        }
                        EnvState::SweepWipe(s) => {
                            assert!(prev_mask.iter().zip(&s.touched).all(|(a, b)| !a || *b));
                            prev_mask = s.touched.clone();
                            assert!(s.v.iter().all(|v| v.abs() <= 0.05));
                            assert!(s.p.iter().all(|p| (0.0..=1.0).contains(p)));
                        }
                    }
                    if r.done() {
                        break;
                    }
                }
                assert!(successes <= 1);
            }
        }
    }

    #[test]
    fn identical_seed_and_actions_reproduce_steps() {
        let run = || {
            let mut env = Env::new(EnvId::ReachServe, EnvConfig::default());
            env.reset(17);
            (0..50)
                .map(|i| env.step(&[(i as f64 * 0.1).sin(), 0.3]).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
