//! Frozen-policy evaluation and the zero-shot transfer protocol.
//!
//! A failure is a collision, an out-of-bounds exit or a timeout. Timesteps
//! count the steps of each episode only; resets are free, so
//! `ts_per_success·successes + ts_per_failure·failures = total_timesteps`.

use std::io::{self, Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{Env, EnvError, EnvSettings, Layout, Observation, OutcomeKind};
use crate::nn::PolicyParams;
use crate::rng::StreamRng;
use crate::terrain::Heightfield;

pub const DEFAULT_MIN_OUTCOMES: usize = 170;
pub const DEFAULT_RUNS: usize = 10;
/// Stream id of the evaluation environment's layout generator.
pub const STREAM_EVAL: u64 = 7;

/// Maps an observation to a normalized action in `[-1, 1]²`.
pub trait Policy: Sync {
    fn act(&self, obs: &Observation, v_max: f64) -> [f64; 2];
}

/// The trained network acting with its mean (no sampling).
impl Policy for PolicyParams {
    fn act(&self, obs: &Observation, v_max: f64) -> [f64; 2] {
        let out = self
            .forward(&obs.normalized(v_max))
            .expect("observations are finite");
        [out.mean[0], out.mean[1]]
    }
}

/// A hand-written policy over raw observations.
pub struct Scripted<F>(pub F);

impl<F: Fn(&Observation) -> [f64; 2] + Sync> Policy for Scripted<F> {
    fn act(&self, obs: &Observation, _v_max: f64) -> [f64; 2] {
        (self.0)(obs)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub successes: u64,
    pub collisions: u64,
    pub out_of_bounds: u64,
    pub timeouts: u64,
    pub total_timesteps: u64,
    pub success_timesteps: u64,
    pub failure_timesteps: u64,
}

impl EvalMetrics {
    pub fn record(&mut self, kind: OutcomeKind, steps: u64) {
        match kind {
            OutcomeKind::Success => self.successes += 1,
            OutcomeKind::Collision => self.collisions += 1,
            OutcomeKind::OutOfBounds => self.out_of_bounds += 1,
            OutcomeKind::Timeout => self.timeouts += 1,
        }
        if kind.is_success() {
            self.success_timesteps += steps;
        } else {
            self.failure_timesteps += steps;
        }
        self.total_timesteps += steps;
    }

    pub fn failures(&self) -> u64 {
        self.collisions + self.out_of_bounds + self.timeouts
    }

    pub fn total_outcomes(&self) -> u64 {
        self.successes + self.failures()
    }

    /// Successes over all outcomes; 0 when nothing was recorded.
    pub fn success_rate(&self) -> f64 {
        match self.total_outcomes() {
            0 => 0.0,
            n => self.successes as f64 / n as f64,
        }
    }

    pub fn timesteps_per_success(&self) -> Option<f64> {
        (self.successes > 0).then(|| self.success_timesteps as f64 / self.successes as f64)
    }

    pub fn timesteps_per_failure(&self) -> Option<f64> {
        let f = self.failures();
        (f > 0).then(|| self.failure_timesteps as f64 / f as f64)
    }

    pub fn merge(&mut self, other: &EvalMetrics) {
        self.successes += other.successes;
        self.collisions += other.collisions;
        self.out_of_bounds += other.out_of_bounds;
        self.timeouts += other.timeouts;
        self.total_timesteps += other.total_timesteps;
        self.success_timesteps += other.success_timesteps;
        self.failure_timesteps += other.failure_timesteps;
    }
}

/// Metrics of one evaluation run plus a digest of every layout it drew.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub layouts_digest: String,
}

fn hash_layout(h: &mut Sha256, layout: &Layout) {
    let (x, y, heading) = layout.start;
    for v in [x, y, heading, layout.goal.0, layout.goal.1] {
        h.update(v.to_le_bytes());
    }
    for o in &layout.obstacles {
        for v in [o.x, o.y, o.radius] {
            h.update(v.to_le_bytes());
        }
    }
}

/// Runs episodes with `policy` until `min_outcomes` have ended. Layouts come
/// from stream [`STREAM_EVAL`] of `seed`, so obstacles are re-drawn every
/// episode and the same seed replays the same layouts.
pub fn evaluate(
    policy: &dyn Policy,
    settings: &Arc<EnvSettings>,
    terrain: &Arc<Heightfield>,
    min_outcomes: usize,
    seed: u64,
) -> Result<EvalRun, EnvError> {
    let mut env = Env::new(settings.clone(), terrain.clone(), StreamRng::new(seed, STREAM_EVAL));
    let v_max = settings.limits.v_max;
    let mut metrics = EvalMetrics::default();
    let mut digest = Sha256::new();
    while metrics.total_outcomes() < min_outcomes as u64 {
        let mut obs = env.reset()?;
        hash_layout(&mut digest, &env.layout());
        loop {
            let tr = env.step_normalized(policy.act(&obs, v_max))?;
            obs = tr.observation;
            if let Some(o) = tr.outcome {
                metrics.record(o.kind, o.steps as u64);
                break;
            }
        }
    }
    Ok(EvalRun {
        seed,
        metrics,
        layouts_digest: hex::encode(digest.finalize()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub runs: Vec<EvalRun>,
}

impl TransferReport {
    pub fn mean_success_rate(&self) -> f64 {
        self.runs.iter().map(|r| r.metrics.success_rate()).sum::<f64>() / self.runs.len() as f64
    }

    pub fn best_success_rate(&self) -> f64 {
        self.runs
            .iter()
            .map(|r| r.metrics.success_rate())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn pooled(&self) -> EvalMetrics {
        let mut m = EvalMetrics::default();
        self.runs.iter().for_each(|r| m.merge(&r.metrics));
        m
    }

    /// Writes one row per run and a final `summary` row. The summary's
    /// counts and timestep ratios are pooled over runs and its success_rate
    /// is the mean of the per-run rates; the best rate is the maximum over
    /// the data rows.
    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for (i, r) in self.runs.iter().enumerate() {
            out.serialize(ReportRow::from_metrics(i.to_string(), Some(r.seed), &r.metrics, r.metrics.success_rate()))?;
        }
        out.serialize(ReportRow::from_metrics(
            "summary".into(),
            None,
            &self.pooled(),
            self.mean_success_rate(),
        ))?;
        out.flush()
    }
}

pub const REPORT_HEADER: [&str; 10] = [
    "run",
    "seed",
    "successes",
    "collisions",
    "oob",
    "timeouts",
    "total_timesteps",
    "success_rate",
    "ts_per_success",
    "ts_per_failure",
];

/// One line of a transfer report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub seed: Option<u64>,
    pub successes: u64,
    pub collisions: u64,
    pub oob: u64,
    pub timeouts: u64,
    pub total_timesteps: u64,
    pub success_rate: f64,
    pub ts_per_success: Option<f64>,
    pub ts_per_failure: Option<f64>,
}

impl ReportRow {
    fn from_metrics(run: String, seed: Option<u64>, m: &EvalMetrics, success_rate: f64) -> Self {
        Self {
            run,
            seed,
            successes: m.successes,
            collisions: m.collisions,
            oob: m.out_of_bounds,
            timeouts: m.timeouts,
            total_timesteps: m.total_timesteps,
            success_rate,
            ts_per_success: m.timesteps_per_success(),
            ts_per_failure: m.timesteps_per_failure(),
        }
    }

    pub fn is_summary(&self) -> bool {
        self.run == "summary"
    }
}

/// Parses a transfer report CSV. Errors name the offending row.
pub fn read_report<R: Read>(reader: R) -> io::Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?
        .clone();
    if header.iter().ne(REPORT_HEADER.iter().copied()) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unexpected report header `{}`", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("report row {}: {e}", i + 1))))
        .collect()
}

pub const METRICS_HEADER: [&str; 12] = [
    "domain",
    "seed",
    "successes",
    "collisions",
    "oob",
    "timeouts",
    "total_outcomes",
    "total_timesteps",
    "success_rate",
    "ts_per_success",
    "ts_per_failure",
    "layouts_digest",
];

/// One evaluation as a metrics CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub domain: String,
    pub seed: u64,
    pub successes: u64,
    pub collisions: u64,
    pub oob: u64,
    pub timeouts: u64,
    pub total_outcomes: u64,
    pub total_timesteps: u64,
    pub success_rate: f64,
    pub ts_per_success: Option<f64>,
    pub ts_per_failure: Option<f64>,
    pub layouts_digest: String,
}

impl MetricsRow {
    pub fn new(domain: &str, run: &EvalRun) -> Self {
        let m = &run.metrics;
        Self {
            domain: domain.to_string(),
            seed: run.seed,
            successes: m.successes,
            collisions: m.collisions,
            oob: m.out_of_bounds,
            timeouts: m.timeouts,
            total_outcomes: m.total_outcomes(),
            total_timesteps: m.total_timesteps,
            success_rate: m.success_rate(),
            ts_per_success: m.timesteps_per_success(),
            ts_per_failure: m.timesteps_per_failure(),
            layouts_digest: run.layouts_digest.clone(),
        }
    }
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> io::Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()
}

pub fn read_metrics_csv<R: Read>(reader: R) -> io::Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("metrics row {}: {e}", i + 1))))
        .collect()
}

/// Seed of transfer run `i` for base seed `seed`.
pub fn run_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// `runs` independent evaluations with seeds `seed, seed + 1, …`, executed
/// on the current rayon pool and reported in run order.
pub fn transfer_protocol(
    policy: &dyn Policy,
    settings: &Arc<EnvSettings>,
    terrain: &Arc<Heightfield>,
    runs: usize,
    min_outcomes: usize,
    seed: u64,
) -> Result<TransferReport, EnvError> {
    assert!(runs >= 1, "at least one run");
    let runs = (0..runs)
        .into_par_iter()
        .map(|i| evaluate(policy, settings, terrain, min_outcomes, run_seed(seed, i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TransferReport { runs })
}

/// The same policy evaluated in two domains with matched outcome counts and
/// the same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainComparison {
    pub names: [String; 2],
    pub runs: [EvalRun; 2],
}

impl DomainComparison {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>9} {:>10} {:>5} {:>8} {:>12} {:>15} {:>15}\n",
            "domain", "successes", "collisions", "oob", "timeouts", "success_rate", "ts_per_success", "ts_per_failure"
        );
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        for (name, r) in self.names.iter().zip(&self.runs) {
            let m = &r.metrics;
            s.push_str(&format!(
                "{:<12} {:>9} {:>10} {:>5} {:>8} {:>12.4} {:>15} {:>15}\n",
                name,
                m.successes,
                m.collisions,
                m.out_of_bounds,
                m.timeouts,
                m.success_rate(),
                fmt(m.timesteps_per_success()),
                fmt(m.timesteps_per_failure())
            ));
        }
        s
    }
}

pub type DomainSetup<'a> = (&'a str, &'a Arc<EnvSettings>, &'a Arc<Heightfield>);

pub fn compare_domains(
    policy: &dyn Policy,
    a: DomainSetup<'_>,
    b: DomainSetup<'_>,
    episodes: usize,
    seed: u64,
) -> Result<DomainComparison, EnvError> {
    let ra = evaluate(policy, a.1, a.2, episodes, seed)?;
    let rb = evaluate(policy, b.1, b.2, episodes, seed)?;
    Ok(DomainComparison {
        names: [a.0.to_string(), b.0.to_string()],
        runs: [ra, rb],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DomainConfig, GoalMode};
    use crate::nn::Architecture;
    use crate::terrain::{generate_heightfield, TerrainConfig};
    use proptest::prelude::*;

    fn setup(domain: DomainConfig) -> (Arc<EnvSettings>, Arc<Heightfield>) {
        let hf = Arc::new(generate_heightfield(&domain.terrain).unwrap());
        (Arc::new(EnvSettings::new(domain)), hf)
    }

    fn empty_flat() -> DomainConfig {
        let mut d = DomainConfig::farm(TerrainConfig::flat(15.0));
        d.obstacle_count = 0;
        d
    }

    fn goal_seeker() -> Scripted<impl Fn(&Observation) -> [f64; 2] + Sync> {
        Scripted(|o: &Observation| {
            let turn = (2.0 * o.theta).clamp(-1.0, 1.0);
            [if o.theta.abs() < 0.3 { 1.0 } else { 0.2 }, turn]
        })
    }

    #[test]
    fn single_outcome_boundary() {
        let (s, t) = setup(empty_flat());
        let r = evaluate(&goal_seeker(), &s, &t, 1, 0).unwrap();
        assert_eq!(r.metrics.total_outcomes(), 1);
    }

    #[test]
    fn straight_drive_at_goal_dead_ahead_succeeds() {
        let (s, t) = setup(empty_flat());
        let mut env = Env::new(s.clone(), t.clone(), StreamRng::new(0, 0));
        for k in 0..20 {
            let heading = -3.0 + 0.3 * k as f64;
            let (gx, gy) = (5.0 * heading.cos(), 5.0 * heading.sin());
            env.load_layout(&Layout {
                start: (0.0, 0.0, heading),
                goal: (gx, gy),
                obstacles: vec![],
            });
            let outcome = loop {
                if let Some(o) = env.step_normalized([1.0, 0.0]).unwrap().outcome {
                    break o;
                }
            };
            assert_eq!(outcome.kind, OutcomeKind::Success);
        }
    }

    #[test]
    fn goal_seeker_in_empty_arena_always_succeeds() {
        let (s, t) = setup(empty_flat());
        let r = evaluate(&goal_seeker(), &s, &t, 50, 3).unwrap();
        assert_eq!(r.metrics.success_rate(), 1.0);
    }

    #[test]
    fn zero_velocity_always_times_out() {
        let mut d = empty_flat();
        d.obstacle_count = 3;
        let (s, t) = setup(d);
        let r = evaluate(&Scripted(|_: &Observation| [0.0, 0.0]), &s, &t, 5, 1).unwrap();
        assert_eq!(r.metrics.timeouts, 5);
        assert_eq!(r.metrics.success_rate(), 0.0);
        assert_eq!(r.metrics.total_timesteps, 5 * s.episode_max_steps as u64);
    }

    #[test]
    fn evaluation_is_deterministic_and_layout_digest_tracks_seed() {
        let (s, t) = setup(DomainConfig::farm(TerrainConfig::default()));
        let p = PolicyParams::init(Architecture::default(), &mut StreamRng::new(2, 0));
        let a = evaluate(&p, &s, &t, 20, 5).unwrap();
        let b = evaluate(&p, &s, &t, 20, 5).unwrap();
        let c = evaluate(&p, &s, &t, 20, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layouts_digest, c.layouts_digest);
    }

    #[test]
    fn transfer_single_run_mean_equals_best() {
        let (s, t) = setup(DomainConfig::lunar(TerrainConfig::default()));
        let r = transfer_protocol(&goal_seeker(), &s, &t, 1, 10, 0).unwrap();
        assert_eq!(r.mean_success_rate(), r.best_success_rate());
    }

    #[test]
    fn transfer_runs_use_distinct_seeds_and_layouts() {
        let (s, t) = setup(DomainConfig::lunar(TerrainConfig::default()));
        let r = transfer_protocol(&goal_seeker(), &s, &t, 4, 5, 10).unwrap();
        let seeds: Vec<u64> = r.runs.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, [10, 11, 12, 13]);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(r.runs[i].layouts_digest, r.runs[j].layouts_digest);
            }
        }
        assert!(r.runs.iter().all(|run| run.metrics.total_outcomes() == 5));
        let lunar_goal = match s.domain.goal_mode {
            GoalMode::Fixed(x, y) => (x, y),
            GoalMode::RandomizedPerEpisode => unreachable!(),
        };
        assert_eq!(lunar_goal, (6.0, 6.0));
    }

    #[test]
    fn report_csv_round_trip() {
        let (s, t) = setup(empty_flat());
        let r = transfer_protocol(&goal_seeker(), &s, &t, 3, 4, 0).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let rows = read_report(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[3].is_summary());
        let mean = rows[..3].iter().map(|r| r.success_rate).sum::<f64>() / 3.0;
        assert!((rows[3].success_rate - mean).abs() < 1e-12);
    }

    #[test]
    fn self_comparison_is_identical() {
        let (s, t) = setup(DomainConfig::farm(TerrainConfig::default()));
        let c = compare_domains(&goal_seeker(), ("farm", &s, &t), ("farm", &s, &t), 10, 4).unwrap();
        assert_eq!(c.runs[0].metrics, c.runs[1].metrics);
        assert!(c.table().lines().count() == 3);
    }

    #[test]
    fn untrained_policy_rarely_succeeds() {
        let (fs, ft) = setup(DomainConfig::farm(TerrainConfig::default()));
        let (ls, lt) = setup(DomainConfig::lunar(TerrainConfig::default()));
        let p = PolicyParams::init(Architecture::default(), &mut StreamRng::new(0, 0));
        let c = compare_domains(&p, ("farm", &fs, &ft), ("lunar", &ls, &lt), 100, 0).unwrap();
        for r in &c.runs {
            assert!(r.metrics.success_rate() < 0.1, "{:?}", r.metrics);
        }
    }

    fn arb_kind() -> impl Strategy<Value = OutcomeKind> {
        prop_oneof![
            Just(OutcomeKind::Success),
            Just(OutcomeKind::Collision),
            Just(OutcomeKind::OutOfBounds),
            Just(OutcomeKind::Timeout),
        ]
    }

    proptest! {
        #[test]
        fn metric_identities(stream in proptest::collection::vec((arb_kind(), 1u64..1000), 0..300)) {
            let mut m = EvalMetrics::default();
            for (k, steps) in &stream {
                m.record(*k, *steps);
            }
            prop_assert_eq!(m.total_outcomes(), stream.len() as u64);
            prop_assert_eq!(m.successes + m.collisions + m.out_of_bounds + m.timeouts, m.total_outcomes());
            let rate = m.success_rate();
            prop_assert!((0.0..=1.0).contains(&rate));
            if m.total_outcomes() > 0 {
                prop_assert_eq!(rate, m.successes as f64 / m.total_outcomes() as f64);
            }
            let total: u64 = stream.iter().map(|(_, s)| s).sum();
            prop_assert_eq!(m.total_timesteps, total);
            if let (Some(ps), Some(pf)) = (m.timesteps_per_success(), m.timesteps_per_failure()) {
                let recon = ps * m.successes as f64 + pf * m.failures() as f64;
                prop_assert!((recon - total as f64).abs() <= 1e-9 * total as f64);
            }
        }
    }
}
