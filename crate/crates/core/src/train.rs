//! The training loop: rollout, advantage estimation and update, with
//! telemetry and resumable checkpoints.
//!
//! Random streams of a run with master seed `s`: parameter init `(s, 0)`,
//! action sampling `(s, 1)`, minibatch shuffling `(s, 2)` and environment
//! `i` at `(s, 1000 + i)`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::checkpoint::{timestamp_now, write_atomic, Checkpoint, CheckpointError, TrainRngs};
use crate::config::RunConfig;
use crate::env::{EnvError, EnvSettings, OutcomeKind};
use crate::nn::{AdamState, PolicyParams};
use crate::ppo::{collect_rollout, ppo_update, RolloutOptions, UpdateStats, VecEnv};
use crate::rng::StreamRng;
use crate::telemetry::{TelemetryRow, TelemetryWriter};
use crate::terrain::{clamp_slopes, generate_heightfield, Heightfield, TerrainError};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_POLICY: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_ENV_BASE: u64 = 1000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run: {0}")]
    Config(String),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite training state at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Builds the environment settings and heightfield for a named domain.
pub fn domain_setup(cfg: &RunConfig, name: &str) -> Result<(Arc<EnvSettings>, Arc<Heightfield>), TrainError> {
    let settings = cfg
        .env_settings(name)
        .ok_or_else(|| TrainError::Config(format!("unknown domain `{name}`")))?;
    let terrain = generate_heightfield(&settings.domain.terrain)?;
    let terrain = clamp_slopes(&terrain, settings.domain.terrain.slope_threshold);
    Ok((Arc::new(settings), Arc::new(terrain)))
}

/// In-memory state of a run between iterations.
pub struct Trainer {
    cfg: RunConfig,
    digest: String,
    venv: VecEnv,
    params: PolicyParams,
    adam: AdamState,
    beta: f64,
    policy_rng: StreamRng,
    shuffle_rng: StreamRng,
    env_steps: u64,
    iteration: u64,
    best_mean_reward: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, TrainError> {
        cfg.validate().map_err(|(_, m)| TrainError::Config(m))?;
        let seed = cfg.master_seed;
        let (settings, terrain) = domain_setup(&cfg, &cfg.train_domain)?;
        let venv = VecEnv::new(settings, terrain, cfg.ppo.n_envs, seed, STREAM_ENV_BASE)?;
        let params = PolicyParams::init(cfg.architecture(), &mut StreamRng::new(seed, STREAM_INIT));
        let adam = AdamState::new(params.len());
        Ok(Self {
            digest: cfg.digest(),
            beta: cfg.ppo.initial_beta,
            policy_rng: StreamRng::new(seed, STREAM_POLICY),
            shuffle_rng: StreamRng::new(seed, STREAM_SHUFFLE),
            venv,
            params,
            adam,
            env_steps: 0,
            iteration: 0,
            best_mean_reward: None,
            cfg,
        })
    }

    /// Restores a run exactly where `ck` was taken.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, TrainError> {
        let mut t = Self::new(ck.config)?;
        if ck.envs.len() != t.venv.len() {
            return Err(TrainError::Config(format!(
                "checkpoint holds {} environments, config has {}",
                ck.envs.len(),
                t.venv.len()
            )));
        }
        if ck.params.architecture() != t.params.architecture() {
            return Err(CheckpointError::ShapeMismatch {
                expected: t.params.architecture().shape_string(),
                found: ck.params.architecture().shape_string(),
            }
            .into());
        }
        for (env, snap) in t.venv.envs.iter_mut().zip(&ck.envs) {
            env.restore(snap);
        }
        t.venv.refresh();
        t.params = ck.params;
        t.adam = ck.adam;
        t.beta = ck.beta;
        t.policy_rng = StreamRng::from_state(ck.rngs.policy);
        t.shuffle_rng = StreamRng::from_state(ck.rngs.shuffle);
        t.env_steps = ck.env_steps;
        t.iteration = ck.iteration;
        t.best_mean_reward = ck.best_mean_reward;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn best_mean_reward(&self) -> Option<f64> {
        self.best_mean_reward
    }

    /// True once another iteration would exceed the step budget or the
    /// iteration cap.
    pub fn finished(&self) -> bool {
        let batch = self.cfg.ppo.batch_size() as u64;
        self.iteration >= self.cfg.ppo.max_iterations as u64
            || self.env_steps + batch > self.cfg.ppo.total_env_steps
    }

    /// Runs one collect → advantages → update iteration.
    pub fn step(&mut self) -> Result<TelemetryRow, TrainError> {
        let ppo = &self.cfg.ppo;
        let mut buf = collect_rollout(&mut self.venv, &self.params, &RolloutOptions::from(ppo), &mut self.policy_rng)?;
        buf.compute_advantages(ppo.gamma, ppo.lambda, ppo.normalize_advantages);
        let stats = ppo_update(&mut self.params, &mut self.adam, &buf, ppo, self.beta, &mut self.shuffle_rng);
        self.env_steps += buf.len() as u64;

        let count = |k: OutcomeKind| buf.outcomes.iter().filter(|o| o.kind == k).count() as u64;
        let mean_reward = buf.rewards.iter().sum::<f64>() / buf.len() as f64;
        let row = TelemetryRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_reward,
            success_count: count(OutcomeKind::Success),
            collision_count: count(OutcomeKind::Collision),
            oob_count: count(OutcomeKind::OutOfBounds),
            timeout_count: count(OutcomeKind::Timeout),
            mean_episode_len: (!buf.outcomes.is_empty()).then(|| {
                buf.outcomes.iter().map(|o| o.steps as f64).sum::<f64>() / buf.outcomes.len() as f64
            }),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            mean_kl: stats.mean_kl,
            beta: stats.beta,
            clip_fraction: stats.clip_fraction,
        };
        check_finite(self.iteration, &row, &stats, &self.params)?;
        self.beta = stats.beta;
        self.iteration += 1;
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            created_at: timestamp_now(),
            run_digest: self.digest.clone(),
            env_steps: self.env_steps,
            iteration: self.iteration,
            best_mean_reward: self.best_mean_reward,
            beta: self.beta,
            params: self.params.clone(),
            adam: self.adam.clone(),
            rngs: TrainRngs {
                policy: self.policy_rng.state(),
                shuffle: self.shuffle_rng.state(),
            },
            envs: self.venv.envs.iter().map(|e| e.snapshot()).collect(),
            config: self.cfg.clone(),
        }
    }
}

fn check_finite(iteration: u64, row: &TelemetryRow, stats: &UpdateStats, params: &PolicyParams) -> Result<(), TrainError> {
    let named = [
        ("mean_reward", row.mean_reward),
        ("policy_loss", stats.policy_loss),
        ("value_loss", stats.value_loss),
        ("entropy", stats.entropy),
        ("mean_kl", stats.mean_kl),
        ("beta", stats.beta),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(TrainError::NonFinite {
            iteration,
            detail: format!("{name} = {v}"),
        });
    }
    if let Some(i) = params.flat().iter().position(|v| !v.is_finite()) {
        return Err(TrainError::NonFinite {
            iteration,
            detail: format!("parameter {i} = {}", params.flat()[i]),
        });
    }
    Ok(())
}

/// File names inside a run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn telemetry(&self) -> PathBuf {
        self.root.join("telemetry.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn periodic(&self, env_steps: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{env_steps:010}.ckpt"))
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }

    pub fn abort_record(&self) -> PathBuf {
        self.root.join("abort.txt")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub env_steps: u64,
    pub best_mean_reward: Option<f64>,
    pub total_successes: u64,
}

/// Trains to completion, writing into `paths`: the resolved config, one
/// telemetry row per iteration, a checkpoint each time the step count
/// crosses a multiple of `checkpoint_interval_steps`, a rolling
/// best-mean-reward checkpoint and a final checkpoint.
///
/// With `resume`, continues from that checkpoint; the telemetry file is cut
/// back to the checkpoint's iteration first. On a non-finite loss the run
/// stops, an abort record is written and earlier artifacts are kept.
pub fn train(
    cfg: RunConfig,
    paths: &RunPaths,
    resume: Option<Checkpoint>,
    mut on_iteration: impl FnMut(&TelemetryRow),
) -> Result<TrainSummary, TrainError> {
    fs::create_dir_all(paths.checkpoints()).map_err(io_err(&paths.root))?;
    let (mut trainer, mut telemetry) = match resume {
        Some(ck) => {
            let iteration = ck.iteration;
            let t = Trainer::from_checkpoint(ck)?;
            let w = TelemetryWriter::resume(&paths.telemetry(), iteration).map_err(io_err(&paths.telemetry()))?;
            (t, w)
        }
        None => {
            let t = Trainer::new(cfg)?;
            let w = TelemetryWriter::create(&paths.telemetry()).map_err(io_err(&paths.telemetry()))?;
            (t, w)
        }
    };
    write_atomic(&paths.config(), trainer.config().to_toml().as_bytes()).map_err(io_err(&paths.config()))?;

    let interval = trainer.config().checkpoint_interval_steps;
    let mut total_successes = 0;
    while !trainer.finished() {
        let before = trainer.env_steps();
        let row = match trainer.step() {
            Ok(row) => row,
            Err(e @ TrainError::NonFinite { .. }) => {
                let record = format!("{e}\nenv_steps = {}\n", trainer.env_steps());
                let _ = write_atomic(&paths.abort_record(), record.as_bytes());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        telemetry.append(&row).map_err(io_err(&paths.telemetry()))?;
        total_successes += row.success_count;
        if trainer.best_mean_reward.is_none_or(|b| row.mean_reward > b) {
            trainer.best_mean_reward = Some(row.mean_reward);
            trainer.checkpoint().save(&paths.best())?;
        }
        if before / interval != trainer.env_steps() / interval {
            trainer.checkpoint().save(&paths.periodic(trainer.env_steps()))?;
        }
        on_iteration(&row);
    }
    trainer.checkpoint().save(&paths.last())?;
    Ok(TrainSummary {
        iterations: trainer.iteration(),
        env_steps: trainer.env_steps(),
        best_mean_reward: trainer.best_mean_reward(),
        total_successes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::read_telemetry;

    fn tiny(total: u64) -> RunConfig {
        let src = format!(
            "[network]\nhidden = [16, 16]\n[ppo]\nn_steps = 32\nn_envs = 2\nminibatch_size = 32\n\
             mini_epochs = 2\ntotal_env_steps = {total}\n"
        );
        RunConfig::parse(&src, "tiny").unwrap()
    }

    #[test]
    fn budget_of_one_batch_runs_one_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::new(dir.path());
        let s = train(tiny(64), &paths, None, |_| {}).unwrap();
        assert_eq!((s.iterations, s.env_steps), (1, 64));
        let rows = read_telemetry(fs::File::open(paths.telemetry()).unwrap()).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(paths.last().exists() && paths.best().exists() && paths.config().exists());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let a = tempfile::tempdir().unwrap();
        let pa = RunPaths::new(a.path());
        train(tiny(64 * 5), &pa, None, |_| {}).unwrap();

        let b = tempfile::tempdir().unwrap();
        let pb = RunPaths::new(b.path());
        let mut t = Trainer::new(tiny(64 * 5)).unwrap();
        let mut w = TelemetryWriter::create(&pb.telemetry()).unwrap();
        for _ in 0..2 {
            w.append(&t.step().unwrap()).unwrap();
        }
        let ck = Checkpoint::from_text(&t.checkpoint().to_text(), None).unwrap();
        // A row past the checkpoint that the resumed run must replace.
        w.append(&t.step().unwrap()).unwrap();
        drop(w);
        train(tiny(64 * 5), &pb, Some(ck), |_| {}).unwrap();

        let ta = fs::read_to_string(pa.telemetry()).unwrap();
        let tb = fs::read_to_string(pb.telemetry()).unwrap();
        assert_eq!(ta, tb);
        let ca = Checkpoint::load(&pa.last(), None).unwrap();
        let cb = Checkpoint::load(&pb.last(), None).unwrap();
        assert_eq!(ca.params.flat(), cb.params.flat());
        assert_eq!(ca.envs, cb.envs);
    }

    #[test]
    fn periodic_checkpoints_follow_interval() {
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::new(dir.path());
        let mut cfg = tiny(64 * 4);
        cfg.checkpoint_interval_steps = 128;
        train(cfg, &paths, None, |_| {}).unwrap();
        let mut names: Vec<String> = fs::read_dir(paths.checkpoints())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names, ["step_0000000128.ckpt", "step_0000000256.ckpt"]);
    }

    #[test]
    fn non_finite_aborts_with_record() {
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::new(dir.path());
        let mut cfg = tiny(64 * 3);
        cfg.ppo.lr = f64::MAX;
        let err = train(cfg, &paths, None, |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
        assert!(paths.abort_record().exists());
        assert!(paths.telemetry().exists());
    }
}
