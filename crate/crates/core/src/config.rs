//! Scenario configuration file.
//!
//! TOML with five sections. `[topology]`, `[catalog]` and `[capacities]` are
//! mandatory; `[solver]` and `[scenario]` may be omitted and fall back to the
//! defaults documented on each field. Unknown keys are rejected.
//!
//! ```toml
//! [topology]
//! mbs_count = 2
//! rsus_per_mbs = 4          # or: rsu = [{ id = 0, mbs = 0 }, ...]
//! rate_cloud_mbs = 10.0     # Mb/s
//! rate_mbs_rsu = 100.0
//! rate_mbs_mbs = 50.0
//!
//! [catalog]
//! file_count = 200
//! file_size = 1.0           # Mb, or: sizes = [..]
//!
//! [capacities]
//! rsu_cap = 10.0            # Mb, optional per-node lists rsu_caps / mbs_caps
//! mbs_cap = 30.0
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("syntax error at line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key `{key}`{}{}", line.map(|l| format!(" at line {l}")).unwrap_or_default(), suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey { key: String, line: Option<usize>, suggestion: Option<String> },
    #[error("type mismatch{}: {reason}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Type { line: Option<usize>, reason: String },
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("malformed override `{0}`: expected section.key=value")]
    Override(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub topology: TopologySection,
    pub catalog: CatalogSection,
    pub capacities: CapacitiesSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RsuEntry {
    pub id: usize,
    pub mbs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub mbs_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rsus_per_mbs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rsu: Option<Vec<RsuEntry>>,
    pub rate_cloud_mbs: f64,
    pub rate_mbs_rsu: f64,
    pub rate_mbs_mbs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CatalogSection {
    pub file_count: usize,
    /// Default 1.0 Mb.
    #[serde(default = "default_file_size")]
    pub file_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<f64>>,
}

fn default_file_size() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CapacitiesSection {
    pub rsu_cap: f64,
    pub mbs_cap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rsu_caps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mbs_caps: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SolverModeName {
    #[default]
    Practical,
    StrictDescent,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// Step size, default 0.05.
    pub eta: f64,
    /// Default 5000.
    pub max_iters: usize,
    /// Convergence window in iterations, default 10.
    pub window: usize,
    /// Default 1e-6.
    pub rel_tol: f64,
    /// `practical` (default) or `strict-descent`.
    pub mode: SolverModeName,
    /// Seed for the initial noise, default 0.
    pub seed: u64,
    /// Point pairs sampled for gradient Lipschitz estimates in strict mode, default 64.
    pub lipschitz_samples: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { eta: 0.05, max_iters: 5000, window: 10, rel_tol: 1e-6, mode: SolverModeName::Practical, seed: 0, lipschitz_samples: 64 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DemandPredictorName {
    #[default]
    Sasrec,
    Frequency,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    /// Scenario generator seed, default 1.
    pub seed: u64,
    /// Default 40.
    pub vehicles: usize,
    /// Default 5.
    pub episodes: usize,
    /// Slots per episode T, default 12.
    pub slots_per_episode: usize,
    /// Slots per day N, default 24.
    pub day_slots: usize,
    /// Days of history before the first episode, default 7.
    pub history_days: usize,
    /// Zipf exponent of request popularity, default 0.8.
    pub zipf_alpha: f64,
    /// Probability that a present vehicle issues a request in a slot, default 0.6.
    pub request_prob: f64,
    /// Width of the window within which each vehicle reshuffles global popularity ranks, default 8.
    pub preference_shuffle: usize,
    /// Mean dwell time at an RSU in slots, default 2.0.
    pub mean_dwell: f64,
    /// RSUs on each vehicle's commute route, default 4.
    pub route_len: usize,
    /// Probability of leaving the route at each move, default 0.1.
    pub deviation_prob: f64,
    /// Columns of the RSU grid; 0 picks ceil(sqrt(R)). Default 0.
    pub grid_cols: usize,
    /// PPM maximum context length, default 2.
    pub ppm_order: usize,
    /// Fraction of each episode's requests excluded from metrics, default 0.2.
    pub warmup_fraction: f64,
    /// `sasrec` (default) or `frequency`.
    pub demand_predictor: DemandPredictorName,
    /// Embedding width d, default 32.
    pub rec_dim: usize,
    /// Request window length I, default 20.
    pub rec_seq_len: usize,
    /// Targets per position I', default 5.
    pub rec_targets: usize,
    /// Sampled negatives per position, default 100.
    pub rec_negatives: usize,
    /// Local steps between RSU aggregations (kappa_1), default 5.
    pub hfl_local_steps: usize,
    /// RSU aggregations between MBS aggregations (kappa_2), default 2.
    pub hfl_edge_rounds: usize,
    /// Local learning rate, default 0.01.
    pub hfl_lr: f64,
    /// Total global steps kappa, default 200.
    pub hfl_rounds: usize,
    /// Optional mobility trace CSV replacing the synthetic mobility.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mobility_trace: Option<String>,
    /// Optional request trace CSV replacing the synthetic requests.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_trace: Option<String>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            seed: 1,
            vehicles: 40,
            episodes: 5,
            slots_per_episode: 12,
            day_slots: 24,
            history_days: 7,
            zipf_alpha: 0.8,
            request_prob: 0.6,
            preference_shuffle: 8,
            mean_dwell: 2.0,
            route_len: 4,
            deviation_prob: 0.1,
            grid_cols: 0,
            ppm_order: 2,
            warmup_fraction: 0.2,
            demand_predictor: DemandPredictorName::Sasrec,
            rec_dim: 32,
            rec_seq_len: 20,
            rec_targets: 5,
            rec_negatives: 100,
            hfl_local_steps: 5,
            hfl_edge_rounds: 2,
            hfl_lr: 0.01,
            hfl_rounds: 200,
            mobility_trace: None,
            request_trace: None,
        }
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("topology", &["mbs_count", "rsus_per_mbs", "rsu", "rate_cloud_mbs", "rate_mbs_rsu", "rate_mbs_mbs"]),
    ("catalog", &["file_count", "file_size", "sizes"]),
    ("capacities", &["rsu_cap", "mbs_cap", "rsu_caps", "mbs_caps"]),
    ("solver", &["eta", "max_iters", "window", "rel_tol", "mode", "seed", "lipschitz_samples"]),
    (
        "scenario",
        &[
            "seed",
            "vehicles",
            "episodes",
            "slots_per_episode",
            "day_slots",
            "history_days",
            "zipf_alpha",
            "request_prob",
            "preference_shuffle",
            "mean_dwell",
            "route_len",
            "deviation_prob",
            "grid_cols",
            "ppm_order",
            "warmup_fraction",
            "demand_predictor",
            "rec_dim",
            "rec_seq_len",
            "rec_targets",
            "rec_negatives",
            "hfl_local_steps",
            "hfl_edge_rounds",
            "hfl_lr",
            "hfl_rounds",
            "mobility_trace",
            "request_trace",
        ],
    ),
];

fn nearest<'a>(key: &str, candidates: impl Iterator<Item = &'a str>) -> Option<String> {
    candidates
        .map(|c| (strsim::levenshtein(key, c), c))
        .min_by_key(|(d, c)| (*d, *c))
        .filter(|(d, c)| *d <= c.len().max(key.len()).max(3))
        .map(|(_, c)| c.to_string())
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, or of the header itself when `key` is None.
fn find_key_line(text: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if key.is_none() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if let Some(k) = key {
            if current == section {
                if let Some((lhs, _)) = line.split_once('=') {
                    if lhs.trim() == k {
                        return Some(i + 1);
                    }
                }
            }
        }
    }
    None
}

fn check_keys(table: &toml::Table, text: &str) -> Result<(), ConfigError> {
    for (section, value) in table {
        let Some((_, keys)) = SECTIONS.iter().find(|(s, _)| s == section) else {
            return Err(ConfigError::UnknownKey {
                key: section.clone(),
                line: find_key_line(text, section, None),
                suggestion: nearest(section, SECTIONS.iter().map(|(s, _)| *s)),
            });
        };
        let Some(inner) = value.as_table() else {
            return Err(ConfigError::Type {
                line: find_key_line(text, "", Some(section)),
                reason: format!("`{section}` must be a table"),
            });
        };
        for key in inner.keys() {
            if !keys.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    key: format!("{section}.{key}"),
                    line: find_key_line(text, section, Some(key)),
                    suggestion: nearest(key, keys.iter().copied()).map(|k| format!("{section}.{k}")),
                });
            }
        }
    }
    Ok(())
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let (section, key) = path.trim().split_once('.').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let Some((_, keys)) = SECTIONS.iter().find(|(s, _)| *s == section) else {
        return Err(ConfigError::UnknownKey {
            key: section.to_string(),
            line: None,
            suggestion: nearest(section, SECTIONS.iter().map(|(s, _)| *s)),
        });
    };
    if !keys.contains(&key) {
        return Err(ConfigError::UnknownKey {
            key: path.trim().to_string(),
            line: None,
            suggestion: nearest(key, keys.iter().copied()).map(|k| format!("{section}.{k}")),
        });
    }
    let raw = raw.trim();
    // Bare words that are not valid TOML values are taken as strings.
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    entry
        .as_table_mut()
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?
        .insert(key.to_string(), value);
    Ok(())
}

impl ScenarioConfig {
    /// Parses configuration text, applies `section.key=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            reason: e.message().to_string(),
        })?;
        check_keys(&table, text)?;
        // Typed pass over the raw text first so mismatches carry a line number.
        if let Err(e) = toml::from_str::<ScenarioConfig>(text) {
            return Err(ConfigError::Type { line: e.span().map(|s| line_of(text, s.start)), reason: e.message().to_string() });
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ScenarioConfig =
            table.try_into().map_err(|e: toml::de::Error| ConfigError::Type { line: None, reason: e.message().to_string() })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Rejects values that are syntactically fine but cannot drive a run.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(field: &str, reason: impl fmt::Display) -> ConfigError {
            ConfigError::Invalid { field: field.to_string(), reason: reason.to_string() }
        }
        let t = &self.topology;
        if t.mbs_count == 0 {
            return Err(bad("topology.mbs_count", "must be >= 1"));
        }
        let s = &self.solver;
        if !(s.eta > 0.0) || !s.eta.is_finite() {
            return Err(bad("solver.eta", "must be > 0"));
        }
        if s.max_iters == 0 {
            return Err(bad("solver.max_iters", "must be >= 1"));
        }
        if s.window == 0 {
            return Err(bad("solver.window", "must be >= 1"));
        }
        if !(s.rel_tol >= 0.0) {
            return Err(bad("solver.rel_tol", "must be >= 0"));
        }
        if s.lipschitz_samples < 2 {
            return Err(bad("solver.lipschitz_samples", "must be >= 2"));
        }
        let c = &self.scenario;
        for (name, v) in [
            ("scenario.vehicles", c.vehicles),
            ("scenario.episodes", c.episodes),
            ("scenario.slots_per_episode", c.slots_per_episode),
            ("scenario.day_slots", c.day_slots),
            ("scenario.history_days", c.history_days),
            ("scenario.route_len", c.route_len),
            ("scenario.ppm_order", c.ppm_order),
            ("scenario.rec_dim", c.rec_dim),
            ("scenario.rec_targets", c.rec_targets),
            ("scenario.hfl_local_steps", c.hfl_local_steps),
            ("scenario.hfl_edge_rounds", c.hfl_edge_rounds),
        ] {
            if v == 0 {
                return Err(bad(name, "must be >= 1"));
            }
        }
        if c.rec_seq_len <= c.rec_targets {
            return Err(bad("scenario.rec_seq_len", "must exceed rec_targets"));
        }
        if !(c.zipf_alpha >= 0.0) {
            return Err(bad("scenario.zipf_alpha", "must be >= 0"));
        }
        for (name, v) in [("scenario.request_prob", c.request_prob), ("scenario.deviation_prob", c.deviation_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(name, "must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&c.warmup_fraction) {
            return Err(bad("scenario.warmup_fraction", "must lie in [0, 1)"));
        }
        if !(c.mean_dwell >= 1.0) {
            return Err(bad("scenario.mean_dwell", "must be >= 1 slot"));
        }
        if !(c.hfl_lr > 0.0) {
            return Err(bad("scenario.hfl_lr", "must be > 0"));
        }
        Ok(())
    }

    /// The built-in desk-scale scenario: 2 clusters of 4 RSUs, 40 vehicles, 200 files.
    pub fn example() -> Self {
        Self {
            topology: TopologySection {
                mbs_count: 2,
                rsus_per_mbs: Some(4),
                rsu: None,
                rate_cloud_mbs: 10.0,
                rate_mbs_rsu: 100.0,
                rate_mbs_mbs: 50.0,
            },
            catalog: CatalogSection { file_count: 200, file_size: 1.0, sizes: None },
            capacities: CapacitiesSection { rsu_cap: 10.0, mbs_cap: 20.0, rsu_caps: None, mbs_caps: None },
            // The default step barely moves W-driven logits at this demand scale.
            solver: SolverSection { eta: 5.0, ..SolverSection::default() },
            // Summed SASRec loss: plain SGD at the default rate diverges on some seeds.
            scenario: ScenarioSection { hfl_lr: 0.003, ..ScenarioSection::default() },
        }
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<ScenarioConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
    ScenarioConfig::from_toml_str(&text, overrides)
}
