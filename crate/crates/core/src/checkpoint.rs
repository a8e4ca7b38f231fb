//! Versioned checkpoint container.
//!
//! A checkpoint is a text file in two parts. The header is TOML holding the
//! format version, creation time, run digest, counters, network shape,
//! optimizer step, RNG positions, mid-episode environment snapshots and the
//! resolved run configuration. After a line reading `%% payload` come three
//! lines `params <b64>`, `adam_m <b64>`, `adam_v <b64>`, each the standard
//! base64 encoding of little-endian IEEE-754 doubles in the canonical
//! parameter order of [`crate::nn::ParamLayout`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::env::EnvSnapshot;
use crate::nn::{AdamState, Architecture, PolicyParams};
use crate::rng::RngState;

pub const FORMAT_VERSION: u32 = 1;
const PAYLOAD_MARKER: &str = "%% payload";
const SECTIONS: [&str; 3] = ["params", "adam_m", "adam_v"];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("run digest `{0}` is not 64 lowercase hex digits")]
    BadDigest(String),
    #[error("network shape mismatch: checkpoint has {found}, expected {expected}")]
    ShapeMismatch { expected: String, found: String },
    #[error("invalid base64 in `{section}` payload: {message}")]
    BadBase64 { section: String, message: String },
    #[error("`{section}` payload holds {found} bytes, expected {expected}")]
    LengthMismatch {
        section: String,
        expected: usize,
        found: usize,
    },
}

/// RNG positions of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRngs {
    pub policy: RngState,
    pub shuffle: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub created_at: String,
    pub run_digest: String,
    pub env_steps: u64,
    pub iteration: u64,
    /// Highest rollout mean reward seen so far.
    pub best_mean_reward: Option<f64>,
    pub beta: f64,
    pub params: PolicyParams,
    pub adam: AdamState,
    pub rngs: TrainRngs,
    pub envs: Vec<EnvSnapshot>,
    pub config: RunConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    created_at: String,
    run_digest: String,
    env_steps: u64,
    iteration: u64,
    shape: String,
    param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_mean_reward: Option<f64>,
    beta: f64,
    adam_step: u64,
    rngs: TrainRngs,
    envs: Vec<EnvSnapshot>,
    config: RunConfig,
}

/// Current UTC time as RFC 3339, or `SOURCE_DATE_EPOCH` when set so that
/// repeated runs produce byte-identical checkpoints.
pub fn timestamp_now() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .and_then(|s| time::OffsetDateTime::from_unix_timestamp(s).ok());
    pinned
        .unwrap_or_else(time::OffsetDateTime::now_utc)
        .format(&time::format_description::well_known::Rfc3339)
        .expect("UTC time formats")
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(section: &str, text: &str, expected_len: usize) -> Result<Vec<f64>, CheckpointError> {
    let bytes = STANDARD
        .decode(text.trim())
        .map_err(|e| CheckpointError::BadBase64 {
            section: section.into(),
            message: e.to_string(),
        })?;
    if bytes.len() != expected_len * 8 {
        return Err(CheckpointError::LengthMismatch {
            section: section.into(),
            expected: expected_len * 8,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let header = Header {
            format_version: FORMAT_VERSION,
            created_at: self.created_at.clone(),
            run_digest: self.run_digest.clone(),
            env_steps: self.env_steps,
            iteration: self.iteration,
            shape: self.params.architecture().shape_string(),
            param_count: self.params.len(),
            best_mean_reward: self.best_mean_reward,
            beta: self.beta,
            adam_step: self.adam.step,
            rngs: self.rngs,
            envs: self.envs.clone(),
            config: self.config.clone(),
        };
        let mut out = toml::to_string(&header).expect("header serializes");
        out.push_str(PAYLOAD_MARKER);
        out.push('\n');
        for (name, data) in SECTIONS
            .iter()
            .zip([self.params.flat(), &self.adam.m, &self.adam.v])
        {
            out.push_str(name);
            out.push(' ');
            out.push_str(&encode(data));
            out.push('\n');
        }
        out
    }

    /// Parses and validates a checkpoint. When `expected` is given the
    /// network shape must match it.
    pub fn from_text(text: &str, expected: Option<&Architecture>) -> Result<Self, CheckpointError> {
        let (head, payload) = text
            .split_once(&format!("\n{PAYLOAD_MARKER}\n"))
            .ok_or_else(|| CheckpointError::Malformed(format!("missing `{PAYLOAD_MARKER}` line")))?;
        let table: toml::Table = head
            .parse()
            .map_err(|e: toml::de::Error| CheckpointError::Malformed(e.to_string()))?;
        // Check the version before the rest of the schema, which may differ.
        let found = table
            .get("format_version")
            .and_then(toml::Value::as_integer)
            .ok_or_else(|| CheckpointError::Malformed("header lacks format_version".into()))?;
        if found != FORMAT_VERSION as i64 {
            return Err(CheckpointError::VersionMismatch {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CheckpointError::Malformed(e.to_string()))?;
        if header.run_digest.len() != 64
            || !header
                .run_digest
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        {
            return Err(CheckpointError::BadDigest(header.run_digest));
        }
        let arch = Architecture::parse_shape(&header.shape)
            .ok_or_else(|| CheckpointError::Malformed(format!("bad shape `{}`", header.shape)))?;
        if let Some(want) = expected {
            if *want != arch {
                return Err(CheckpointError::ShapeMismatch {
                    expected: want.shape_string(),
                    found: header.shape,
                });
            }
        }
        let n = arch.layout().len;
        if header.param_count != n {
            return Err(CheckpointError::ShapeMismatch {
                expected: format!("{} ({n} parameters)", header.shape),
                found: format!("{} parameters", header.param_count),
            });
        }

        let mut lines = payload.lines().filter(|l| !l.trim().is_empty());
        let mut sections = Vec::with_capacity(SECTIONS.len());
        for name in SECTIONS {
            let line = lines
                .next()
                .ok_or_else(|| CheckpointError::Malformed(format!("missing `{name}` payload")))?;
            let data = line
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| CheckpointError::Malformed(format!("expected `{name}` payload line")))?;
            sections.push(decode(name, data, n)?);
        }
        if lines.next().is_some() {
            return Err(CheckpointError::Malformed("trailing data after payload".into()));
        }
        let v = sections.pop().expect("three sections");
        let m = sections.pop().expect("three sections");
        let flat = sections.pop().expect("three sections");
        let params = PolicyParams::from_flat(arch, flat).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(Self {
            created_at: header.created_at,
            run_digest: header.run_digest,
            env_steps: header.env_steps,
            iteration: header.iteration,
            best_mean_reward: header.best_mean_reward,
            beta: header.beta,
            params,
            adam: AdamState {
                m,
                v,
                step: header.adam_step,
            },
            rngs: header.rngs,
            envs: header.envs,
            config: header.config,
        })
    }

    /// Writes atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, self.to_text().as_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path, expected: Option<&Architecture>) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text, expected)
    }
}

/// Writes `bytes` to a temporary sibling of `path` and renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::rng::StreamRng;

    fn sample(arch: Architecture) -> Checkpoint {
        let mut rng = StreamRng::new(4, 0);
        let params = PolicyParams::init(arch, &mut rng);
        let n = params.len();
        let config = RunConfig::preset(Profile::Desk);
        Checkpoint {
            created_at: "2026-01-01T00:00:00Z".into(),
            run_digest: config.digest(),
            env_steps: 2048,
            iteration: 1,
            best_mean_reward: Some(0.125),
            beta: 1.0,
            adam: AdamState {
                m: (0..n).map(|_| rng.normal() * 1e-3).collect(),
                v: (0..n).map(|_| rng.uniform() * 1e-6).collect(),
                step: 32,
            },
            params,
            rngs: TrainRngs {
                policy: StreamRng::new(0, 1).state(),
                shuffle: StreamRng::new(0, 2).state(),
            },
            envs: vec![],
            config,
        }
    }

    fn small() -> Architecture {
        Architecture {
            hidden: vec![8, 4],
            ..Architecture::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut ck = sample(small());
        ck.params.flat_mut()[0] = -0.0;
        ck.params.flat_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let text = ck.to_text();
        let back = Checkpoint::from_text(&text, Some(&small())).unwrap();
        let bits = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.params.flat()), bits(ck.params.flat()));
        assert_eq!(back, ck);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn version_mismatch_names_both() {
        let text = sample(small()).to_text().replacen("format_version = 1", "format_version = 9", 1);
        let err = Checkpoint::from_text(&text, None).unwrap_err();
        assert!(matches!(err, CheckpointError::VersionMismatch { found: 9, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn truncated_payload_is_length_mismatch() {
        let ck = sample(small());
        let text = ck.to_text();
        let full = encode(ck.params.flat());
        let short = encode(&ck.params.flat()[..ck.params.len() - 1]);
        let text = text.replacen(&full, &short, 1);
        let err = Checkpoint::from_text(&text, None).unwrap_err();
        assert!(matches!(err, CheckpointError::LengthMismatch { ref section, .. } if section == "params"), "{err}");
    }

    #[test]
    fn bad_base64_is_distinct() {
        let ck = sample(small());
        let text = ck.to_text().replacen("params ", "params *", 1);
        assert!(matches!(
            Checkpoint::from_text(&text, None),
            Err(CheckpointError::BadBase64 { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let text = sample(small()).to_text();
        let err = Checkpoint::from_text(&text, Some(&Architecture::default())).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, CheckpointError::ShapeMismatch { .. }));
        assert!(msg.contains("12-8-4:2") && msg.contains("12-128-128-64:2"), "{msg}");
    }

    #[test]
    fn bad_digest_rejected() {
        let ck = sample(small());
        let text = ck.to_text().replacen(&ck.run_digest, "xyz", 1);
        assert!(matches!(Checkpoint::from_text(&text, None), Err(CheckpointError::BadDigest(_))));
    }

    #[test]
    fn truncated_file_is_refused() {
        let text = sample(small()).to_text();
        for cut in [8, 100, text.len() / 2] {
            assert!(Checkpoint::from_text(&text[..text.len() - cut], None).is_err());
        }
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample(small());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path, None).unwrap(), ck);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
