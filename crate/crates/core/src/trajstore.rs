//! Episode storage, success filtering, and windowing into fixed-horizon
//! `(observations, actions)` training samples.
//!
//! Dataset files are JSON lines. Each episode starts with a header line
//! `{"type":"episode","id":..,"seed":..,"env_id":..,"length":..,"success":..}`
//! followed by exactly `length` step lines
//! `{"type":"step","t":..,"obs":[..],"action":[..],"reward":..,"success":..,"terminated":..,"truncated":..}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::EnvId;
use crate::error::{Error, Result};

/// Below this many successful episodes distillation quality drops off.
pub const MIN_SUCCESS_EPISODES: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub obs: Vec<f64>,
    /// Executed (clamped) action.
    pub action: Vec<f64>,
    pub reward: f64,
    pub success: bool,
    pub terminated: bool,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    /// Seed passed to the environment reset.
    pub seed: u64,
    pub env_id: EnvId,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sum of the binary success reward over the episode.
    pub fn success_count(&self) -> usize {
        self.steps.iter().filter(|s| s.success).count()
    }

    pub fn is_success(&self) -> bool {
        self.success_count() == 1
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Checks that the episode is non-empty and that a success, if any, is
    /// the single terminal step.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Integrity(format!("episode {} has no steps", self.episode_id)));
        }
        let last = self.steps.len() - 1;
        for (i, s) in self.steps.iter().enumerate() {
            if s.success && i != last {
                return Err(Error::Integrity(format!(
                    "episode {}: success flag at step {i} is not the final step {last}",
                    self.episode_id
                )));
            }
        }
        if self.steps[last].success && !self.steps[last].terminated {
            return Err(Error::Integrity(format!(
                "episode {}: successful final step is not marked terminated",
                self.episode_id
            )));
        }
        Ok(())
    }
}

/// Keeps the episodes whose success flags sum to one, preserving order.
pub fn filter_success(dataset: &[Trajectory]) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for traj in dataset {
        traj.validate()?;
        if traj.is_success() {
            out.push(traj.clone());
        }
    }
    Ok(out)
}

/// Warning text when fewer than `threshold` successful episodes are
/// available for distillation.
pub fn min_success_warning(n_success: usize, threshold: usize) -> Option<String> {
    (n_success < threshold).then(|| {
        format!("only {n_success} successful episodes (< {threshold}); the distilled policy is likely to degrade")
    })
}

/// A training sample: `obs` holds `T_o` observations ending at `start`,
/// `actions` holds `T_a` actions beginning at `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Window {
    pub fn flat_obs(&self) -> Vec<f64> {
        self.obs.concat()
    }

    pub fn flat_actions(&self) -> Vec<f64> {
        self.actions.concat()
    }
}

/// Observation history of length `t_o` ending at step `t`, front-padded with
/// the first observation.
pub fn obs_history(obs: &[&[f64]], t: usize, t_o: usize) -> Vec<Vec<f64>> {
    (0..t_o)
        .map(|j| {
            let idx = (t + j + 1).saturating_sub(t_o);
            obs[idx].to_vec()
        })
        .collect()
}

/// Cuts a trajectory into one window per start index `0..=L - t_a`.
/// Actions are never padded, so episodes shorter than `t_a` yield nothing.
pub fn make_windows(traj: &Trajectory, t_o: usize, t_a: usize) -> Result<Vec<Window>> {
    if t_o == 0 || t_a == 0 {
        return Err(Error::Argument(format!(
            "horizons must be >= 1 (T_o = {t_o}, T_a = {t_a})"
        )));
    }
    let len = traj.steps.len();
    if len < t_a {
        log::warn!(
            "episode {} has {len} steps, shorter than the action horizon {t_a}; skipped",
            traj.episode_id
        );
        return Ok(Vec::new());
    }
    let obs: Vec<&[f64]> = traj.steps.iter().map(|s| s.obs.as_slice()).collect();
    Ok((0..=len - t_a)
        .map(|t| Window {
            start: t,
            obs: obs_history(&obs, t, t_o),
            actions: traj.steps[t..t + t_a].iter().map(|s| s.action.clone()).collect(),
        })
        .collect())
}

/// Per-dimension ranges used to map observations and actions to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs_min: Vec<f64>,
    pub obs_max: Vec<f64>,
    pub action_min: Vec<f64>,
    pub action_max: Vec<f64>,
}

fn affine_to_unit(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (l, h) = (lo[i % lo.len()], hi[i % hi.len()]);
            if h > l {
                2.0 * (v - l) / (h - l) - 1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn affine_from_unit(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (l, h) = (lo[i % lo.len()], hi[i % hi.len()]);
            if h > l {
                l + (v + 1.0) * 0.5 * (h - l)
            } else {
                l
            }
        })
        .collect()
}

impl NormStats {
    /// Fits ranges over every step of the (successful) episodes.
    pub fn fit(dataset: &[Trajectory]) -> Result<Self> {
        let first = dataset
            .iter()
            .flat_map(|t| t.steps.first())
            .next()
            .ok_or_else(|| Error::InsufficientData("cannot fit normalization on an empty dataset".into()))?;
        let mut stats = NormStats {
            obs_min: first.obs.clone(),
            obs_max: first.obs.clone(),
            action_min: first.action.clone(),
            action_max: first.action.clone(),
        };
        for step in dataset.iter().flat_map(|t| &t.steps) {
            if step.obs.len() != stats.obs_min.len() || step.action.len() != stats.action_min.len() {
                return Err(Error::Shape("inconsistent observation or action dimension".into()));
            }
            for (i, &v) in step.obs.iter().enumerate() {
                stats.obs_min[i] = stats.obs_min[i].min(v);
                stats.obs_max[i] = stats.obs_max[i].max(v);
            }
            for (i, &v) in step.action.iter().enumerate() {
                stats.action_min[i] = stats.action_min[i].min(v);
                stats.action_max[i] = stats.action_max[i].max(v);
            }
        }
        Ok(stats)
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_min.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_min.len()
    }

    /// Normalizes one observation, or a flattened stack of observations.
    pub fn normalize_obs(&self, x: &[f64]) -> Vec<f64> {
        affine_to_unit(x, &self.obs_min, &self.obs_max)
    }

    pub fn denormalize_obs(&self, x: &[f64]) -> Vec<f64> {
        affine_from_unit(x, &self.obs_min, &self.obs_max)
    }

    /// Normalizes one action, or a flattened action sequence.
    pub fn normalize_action(&self, x: &[f64]) -> Vec<f64> {
        affine_to_unit(x, &self.action_min, &self.action_max)
    }

    pub fn denormalize_action(&self, x: &[f64]) -> Vec<f64> {
        affine_from_unit(x, &self.action_min, &self.action_max)
    }

    /// Flattened, normalized `(obs, actions)` pair for a window.
    pub fn normalize_window(&self, w: &Window) -> (Vec<f64>, Vec<f64>) {
        (self.normalize_obs(&w.flat_obs()), self.normalize_action(&w.flat_actions()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum Line {
    Episode {
        id: u64,
        seed: u64,
        env_id: EnvId,
        length: usize,
        success: bool,
    },
    Step(StepRecord),
}

pub fn write_dataset<W: Write>(dataset: &[Trajectory], mut out: W) -> Result<()> {
    let io = |e| Error::io("<dataset>", e);
    for traj in dataset {
        let header = Line::Episode {
            id: traj.episode_id,
            seed: traj.seed,
            env_id: traj.env_id,
            length: traj.steps.len(),
            success: traj.is_success(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(io)?;
        for step in &traj.steps {
            serde_json::to_writer(&mut out, &Line::Step(step.clone()))?;
            out.write_all(b"\n").map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn save_dataset(dataset: &[Trajectory], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(dataset, BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses a dataset; `path` is only used in error messages.
pub fn read_dataset<R: BufRead>(reader: R, path: &Path) -> Result<Vec<Trajectory>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out: Vec<Trajectory> = Vec::new();
    // (header line, declared length, declared success)
    let mut open: Option<(usize, usize, bool)> = None;

    let close = |out: &[Trajectory], open: Option<(usize, usize, bool)>| -> Result<()> {
        if let Some((line, length, success)) = open {
            let traj = out.last().unwrap();
            if traj.steps.len() != length {
                return Err(parse_err(
                    line,
                    format!("episode declares {length} steps but has {}", traj.steps.len()),
                ));
            }
            if traj.is_success() != success {
                return Err(parse_err(line, "episode success flag disagrees with its steps".into()));
            }
        }
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        match parsed {
            Line::Episode {
                id,
                seed,
                env_id,
                length,
                success,
            } => {
                close(&out, open.take())?;
                out.push(Trajectory {
                    episode_id: id,
                    seed,
                    env_id,
                    steps: Vec::with_capacity(length),
                });
                open = Some((lineno, length, success));
            }
            Line::Step(step) => {
                let Some((_, length, _)) = open else {
                    return Err(parse_err(lineno, "step line before any episode header".into()));
                };
                let traj = out.last_mut().unwrap();
                if traj.steps.len() >= length {
                    return Err(parse_err(lineno, format!("episode already has its {length} steps")));
                }
                traj.steps.push(step);
            }
        }
    }
    close(&out, open)?;
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), path)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn synthetic(id: u64, len: usize, success: bool) -> Trajectory {
        let steps = (0..len)
            .map(|t| StepRecord {
                t: t as u32,
                obs: vec![t as f64, -(t as f64) * 0.5, 1.0],
                action: vec![(t as f64 * 0.3).sin(), (t as f64 * 0.7).cos()],
                reward: -0.1 * t as f64,
                success: success && t + 1 == len,
                terminated: success && t + 1 == len,
                truncated: !success && t + 1 == len,
            })
            .collect();
        Trajectory {
            episode_id: id,
            seed: 1000 + id,
            env_id: EnvId::ReachServe,
            steps,
        }
    }

    #[test]
    fn filter_keeps_successes_in_order() {
        let d = vec![synthetic(0, 5, true), synthetic(1, 4, false), synthetic(2, 6, true)];
        let s = filter_success(&d).unwrap();
        assert_eq!(s.iter().map(|t| t.episode_id).collect::<Vec<_>>(), vec![0, 2]);
        assert!(filter_success(&[]).unwrap().is_empty());
        assert_eq!(filter_success(&s).unwrap(), s);
    }

    #[test]
    fn filter_rejects_mid_episode_success() {
        let mut t = synthetic(0, 5, false);
        t.steps[2].success = true;
        assert!(matches!(filter_success(&[t]), Err(Error::Integrity(_))));
        assert!(matches!(filter_success(&[synthetic(1, 0, false)]), Err(Error::Integrity(_))));
    }

    #[test]
    fn window_counts_and_padding() {
        let t = synthetic(0, 10, true);
        let w = make_windows(&t, 2, 4).unwrap();
        assert_eq!(w.len(), 7);
        assert_eq!(w[0].obs, vec![t.steps[0].obs.clone(), t.steps[0].obs.clone()]);
        assert_eq!(w[3].obs, vec![t.steps[2].obs.clone(), t.steps[3].obs.clone()]);
        assert_eq!(w[6].actions.len(), 4);
        assert_eq!(w[6].actions[3], t.steps[9].action);
        assert!(make_windows(&synthetic(1, 3, true), 2, 4).unwrap().is_empty());
        assert!(make_windows(&t, 0, 4).is_err());
    }

    #[test]
    fn norm_midpoint_and_constant_dims() {
        let mut t = synthetic(0, 3, true);
        for (i, s) in t.steps.iter_mut().enumerate() {
            s.obs = vec![i as f64, 5.0];
        }
        let stats = NormStats::fit(&[t]).unwrap();
        assert_eq!(stats.normalize_obs(&[1.0, 5.0]), vec![0.0, 0.0]);
        assert_eq!(stats.denormalize_obs(&[0.0, 0.0]), vec![1.0, 5.0]);
        assert_eq!(stats.normalize_obs(&[0.0, 5.0])[0], -1.0);
        assert_eq!(stats.normalize_obs(&[2.0, 5.0])[0], 1.0);
    }

    #[test]
    fn fit_on_empty_is_insufficient_data() {
        assert!(matches!(NormStats::fit(&[]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn dataset_round_trip_and_line_count() {
        let d = vec![synthetic(0, 5, true), synthetic(1, 3, false)];
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 5 + 3 + 2);
        assert!(text.lines().next().unwrap().starts_with(r#"{"type":"episode","id":0"#));
        let back = read_dataset(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn missing_action_field_reports_line() {
        let d = vec![synthetic(0, 3, true)];
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        v.as_object_mut().unwrap().remove("action");
        lines[2] = v.to_string();
        let err = read_dataset(lines.join("\n").as_bytes(), Path::new("d.jsonl")).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("action"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_episode_is_a_parse_error() {
        let mut buf = Vec::new();
        write_dataset(&[synthetic(0, 4, false)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: Vec<&str> = text.lines().take(3).collect();
        let err = read_dataset(cut.join("\n").as_bytes(), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
