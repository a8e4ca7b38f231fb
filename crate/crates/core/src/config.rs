//! Run configuration.
//!
//! A run file is TOML. Every key is optional: the file is deep-merged over
//! the defaults for its `profile`, then decoded with unknown keys rejected.
//! The fully resolved form (every key explicit) is what gets snapshotted
//! next to run artifacts and hashed into the run digest; loading a snapshot
//! reproduces the same run.
//!
//! ```toml
//! master_seed = 0
//! profile = "desk"            # or "full"
//! output_dir = "runs/farm"
//! train_domain = "farm"
//!
//! [ppo]
//! total_env_steps = 2000000
//!
//! [domain.farm]
//! g = 9.81
//! mu = 0.8
//! obstacle = "tree"
//! goal = "random"
//!
//! [domain.lunar]
//! g = 1.62
//! mu = 0.45
//! obstacle = "rock"
//! goal = "fixed(6.0,6.0)"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{DomainConfig, EnvSettings, GoalMode, ObstacleKind, DEFAULT_EPISODE_MAX_STEPS};
use crate::nn::Architecture;
use crate::ppo::PpoConfig;
use crate::rover::{RoverGeometry, RoverLimits};
use crate::terrain::TerrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("{origin}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Invalid {
        origin: String,
        line: Option<usize>,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    pub fn ppo(self) -> PpoConfig {
        match self {
            Profile::Desk => PpoConfig::desk_scale(),
            Profile::Full => PpoConfig::full_scale(),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        })
    }
}

/// Rover body, control rate and command limits in one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoverSection {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub track_width: f64,
    pub goal_radius: f64,
    pub dt: f64,
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for RoverSection {
    fn default() -> Self {
        let g = RoverGeometry::default();
        let l = RoverLimits::default();
        Self {
            length: g.length,
            width: g.width,
            height: g.height,
            track_width: g.track_width,
            goal_radius: g.goal_radius,
            dt: l.dt,
            v_max: l.v_max,
            omega_max: l.omega_max,
        }
    }
}

impl RoverSection {
    pub fn geometry(&self) -> RoverGeometry {
        RoverGeometry {
            length: self.length,
            width: self.width,
            height: self.height,
            track_width: self.track_width,
            goal_radius: self.goal_radius,
        }
    }

    pub fn limits(&self) -> RoverLimits {
        RoverLimits {
            dt: self.dt,
            v_max: self.v_max,
            omega_max: self.omega_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden: Architecture::default().hidden,
        }
    }
}

/// Which heightfield a domain drives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerrainChoice {
    /// The run's `[terrain]` generator.
    Rough,
    /// A zero-height floor of the same size.
    Flat,
}

/// One `[domain.<name>]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub g: f64,
    pub mu: f64,
    pub obstacle: ObstacleKind,
    pub goal: GoalMode,
    pub obstacle_count: usize,
    /// Defaults to the obstacle kind's footprint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle_radius: Option<f64>,
    pub arena_size: f64,
    pub terrain: TerrainChoice,
}

impl DomainSection {
    fn from_domain(d: &DomainConfig) -> Self {
        Self {
            g: d.gravity,
            mu: d.friction,
            obstacle: d.obstacle_kind,
            goal: d.goal_mode,
            obstacle_count: d.obstacle_count,
            obstacle_radius: None,
            arena_size: d.arena_size,
            terrain: TerrainChoice::Rough,
        }
    }

    fn domain(&self, rough: &TerrainConfig) -> DomainConfig {
        let terrain = match self.terrain {
            TerrainChoice::Rough => rough.clone(),
            TerrainChoice::Flat => TerrainConfig {
                seed: rough.seed,
                ..TerrainConfig::flat(rough.size_x.max(rough.size_y))
            },
        };
        DomainConfig {
            gravity: self.g,
            friction: self.mu,
            obstacle_kind: self.obstacle,
            obstacle_count: self.obstacle_count,
            obstacle_radius: self
                .obstacle_radius
                .unwrap_or_else(|| self.obstacle.default_radius()),
            arena_size: self.arena_size,
            goal_mode: self.goal,
            terrain,
        }
    }
}

/// A fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub profile: Profile,
    pub output_dir: PathBuf,
    pub checkpoint_interval_steps: u64,
    pub train_domain: String,
    pub transfer_domain: String,
    pub episode_max_steps: usize,
    pub terrain: TerrainConfig,
    pub rover: RoverSection,
    pub network: NetworkSection,
    pub ppo: PpoConfig,
    pub domain: BTreeMap<String, DomainSection>,
}

impl RunConfig {
    /// Defaults for `profile` with the built-in `farm` and `lunar` domains.
    pub fn preset(profile: Profile) -> Self {
        let rough = TerrainConfig::default();
        let mut domain = BTreeMap::new();
        domain.insert("farm".into(), DomainSection::from_domain(&DomainConfig::farm(rough.clone())));
        domain.insert("lunar".into(), DomainSection::from_domain(&DomainConfig::lunar(rough.clone())));
        let ppo = profile.ppo();
        Self {
            master_seed: 0,
            profile,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_interval_steps: ppo.total_env_steps / 4,
            train_domain: "farm".into(),
            transfer_domain: "lunar".into(),
            episode_max_steps: DEFAULT_EPISODE_MAX_STEPS,
            terrain: rough,
            rover: RoverSection::default(),
            network: NetworkSection::default(),
            ppo,
            domain,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&src, &path.display().to_string())
    }

    /// Parses a run file, merging it over its profile preset.
    pub fn parse(src: &str, origin: &str) -> Result<Self, ConfigError> {
        let parse_err = |e: toml::de::Error| ConfigError::Parse {
            origin: origin.to_string(),
            message: e.to_string().trim_end().to_string(),
        };
        let user: toml::Table = src.parse().map_err(parse_err)?;
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(v) => Profile::deserialize(v.clone()).map_err(|e| ConfigError::Invalid {
                origin: origin.to_string(),
                line: locate_key(src, &[], "profile"),
                message: format!("profile: {e}"),
            })?,
        };
        let mut merged = match toml::Value::try_from(Self::preset(profile)) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("preset serializes to a table"),
        };
        if let Some(toml::Value::Table(domains)) = user.get("domain") {
            // User-named domains without a preset start empty so that every
            // required key must be given.
            if let Some(toml::Value::Table(base)) = merged.get_mut("domain") {
                for name in domains.keys() {
                    base.entry(name.clone())
                        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                }
            }
        }
        merge(&mut merged, user);
        let resolved = toml::to_string(&merged).expect("merged table serializes");
        let cfg: RunConfig = toml::from_str(&resolved).map_err(|e| {
            let message = e.message().to_string();
            ConfigError::Invalid {
                origin: origin.to_string(),
                line: field_in_message(&message).and_then(|k| locate_any(src, k)),
                message,
            }
        })?;
        cfg.validate().map_err(|(path, message)| {
            let (tables, key) = path.split_at(path.len().saturating_sub(1));
            ConfigError::Invalid {
                origin: origin.to_string(),
                line: key.first().and_then(|k| locate_key(src, tables, k)),
                message,
            }
        })?;
        Ok(cfg)
    }

    /// Checks cross-field invariants. Errors carry the offending key path.
    pub fn validate(&self) -> Result<(), (Vec<String>, String)> {
        let at = |p: &[&str], m: String| (p.iter().map(|s| s.to_string()).collect(), m);
        for (key, name) in [("train_domain", &self.train_domain), ("transfer_domain", &self.transfer_domain)] {
            if !self.domain.contains_key(name) {
                let known: Vec<&str> = self.domain.keys().map(String::as_str).collect();
                return Err(at(
                    &[key],
                    format!("unknown domain `{name}` (known: {})", known.join(", ")),
                ));
            }
        }
        self.terrain
            .validate()
            .map_err(|e| at(&["terrain"], e.to_string()))?;
        self.rover
            .geometry()
            .validate()
            .map_err(|m| at(&["rover"], m))?;
        let l = self.rover.limits();
        if !(l.dt > 0.0 && l.v_max > 0.0 && l.omega_max > 0.0) {
            return Err(at(&["rover", "dt"], "rover dt, v_max and omega_max must be > 0".into()));
        }
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(at(&["network", "hidden"], "network.hidden needs positive layer widths".into()));
        }
        if self.episode_max_steps == 0 {
            return Err(at(&["episode_max_steps"], "episode_max_steps must be positive".into()));
        }
        if self.checkpoint_interval_steps == 0 {
            return Err(at(
                &["checkpoint_interval_steps"],
                "checkpoint_interval_steps must be positive".into(),
            ));
        }
        self.ppo.validate().map_err(|m| {
            let key = first_word(&m);
            (vec!["ppo".into(), key], format!("ppo: {m}"))
        })?;
        for (name, d) in &self.domain {
            d.domain(&self.terrain).validate().map_err(|m| {
                let key = first_word(&m);
                (
                    vec!["domain".into(), name.clone(), key],
                    format!("domain.{name}: {m}"),
                )
            })?;
        }
        Ok(())
    }

    /// The resolved configuration as TOML with every key explicit.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of [`to_toml`](Self::to_toml).
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.network.hidden.clone(),
            ..Architecture::default()
        }
    }

    pub fn domain_config(&self, name: &str) -> Option<DomainConfig> {
        self.domain.get(name).map(|d| d.domain(&self.terrain))
    }

    pub fn env_settings(&self, name: &str) -> Option<EnvSettings> {
        self.domain_config(name).map(|domain| EnvSettings {
            domain,
            geometry: self.rover.geometry(),
            limits: self.rover.limits(),
            episode_max_steps: self.episode_max_steps,
        })
    }
}

fn first_word(m: &str) -> String {
    m.split_whitespace()
        .next()
        .unwrap_or("")
        .trim_end_matches(',')
        .to_string()
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Pulls the key name out of serde messages like "unknown field `x`".
fn field_in_message(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

/// 1-based line of `key = ...` inside the table named by `tables`.
fn locate_key(src: &str, tables: &[String], key: &str) -> Option<usize> {
    let want = tables.join(".");
    let mut current = String::new();
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = h.trim().to_string();
            if current == want && key.is_empty() {
                return Some(i + 1);
            }
            continue;
        }
        if current == want && assigns(t, key) {
            return Some(i + 1);
        }
    }
    if !want.is_empty() {
        // Fall back to the table header.
        return src.lines().position(|l| l.trim() == format!("[{want}]")).map(|i| i + 1);
    }
    None
}

/// 1-based line of the first assignment to `key` in any table.
fn locate_any(src: &str, key: &str) -> Option<usize> {
    src.lines()
        .position(|l| assigns(l.trim(), key))
        .map(|i| i + 1)
}

fn assigns(line: &str, key: &str) -> bool {
    line.strip_prefix(key)
        .is_some_and(|rest| rest.trim_start().starts_with('='))
}
