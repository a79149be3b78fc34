//! TOML experiment configuration: defaults for every key, dotted key=value
//! overrides, an environment seed override, and validation that names the
//! violated constraint.
//!
//! Precedence, lowest to highest: built-in defaults, config file,
//! `--set key=value` overrides, the `QUORUM_RA_SEED` variable.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::graph::{
    metropolis_weights, parse_graph_file, random_strongly_connected, Digraph, GraphError,
};
use crate::harness::EnsembleConfig;
use crate::protocol::{InitMode, Rule};
use crate::quantizer::{QuantizerKind, QuantizerSpec};

/// Environment variable that overrides the master seed.
pub const SEED_ENV: &str = "QUORUM_RA_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {err}")]
    Io { path: String, err: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override must look like key=value, got {0:?}")]
    BadOverride(String),
    #[error("override {key} walks through non-table key {segment}")]
    OverridePath { key: String, segment: String },
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("{SEED_ENV} must be an unsigned integer, got {0:?}")]
    BadSeedEnv(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSection {
    /// "prob", "unif", or "none".
    pub kind: String,
    pub delta: Option<f64>,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self { kind: "prob".into(), delta: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    /// Graph file path; when set it wins over the generator fields.
    pub file: Option<String>,
    pub n: usize,
    pub extra_edge_prob: f64,
    pub seed: u64,
    /// "metropolis" or "unit".
    pub weighting: String,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self { file: None, n: 12, extra_edge_prob: 0.2, seed: 1, weighting: "metropolis".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub deltas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { deltas: vec![0.05, 0.1, 0.2, 0.4, 0.8, 1.0] }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub rules: Vec<String>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self { rules: vec!["prob-ra".into(), "prob".into(), "unif".into(), "pq-ra".into(), "tq-ra".into()] }
    }
}

/// The file-level schema. Every key has a default, so an empty file is a
/// complete configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub theta: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub k0: usize,
    pub t0: usize,
    /// Stage-2 horizon T.
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub rule: String,
    pub eta: f64,
    /// "measurement" or "interval".
    pub init: String,
    pub workers: usize,
    pub rstats: bool,
    /// Shorthand for quantizer.delta.
    pub delta: Option<f64>,
    pub quantizer: QuantizerSection,
    pub graph: GraphSection,
    pub sweep: SweepSection,
    pub compare: CompareSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            theta: 2.0,
            sigma: 1.0,
            alpha: 1.0,
            kappa: 1.15,
            k0: 25,
            t0: 25,
            steps: 5030,
            runs: 100,
            seed: 12345,
            rule: "prob-ra".into(),
            eta: 0.9,
            init: "interval".into(),
            workers: 0,
            rstats: true,
            delta: None,
            quantizer: QuantizerSection::default(),
            graph: GraphSection::default(),
            sweep: SweepSection::default(),
            compare: CompareSection::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Values go through the TOML grammar so arrays, booleans, and numbers
    // keep their types; anything that does not parse is a bare string.
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed override table has v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `key=value` override to a parsed TOML table, creating
/// intermediate tables along a dotted path.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|s| s.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let value = parse_override_value(raw.trim());
    let mut cursor = table;
    let segments: Vec<&str> = key.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        cursor = cursor
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::OverridePath {
                key: key.to_string(),
                segment: segment.to_string(),
            })?;
    }
    cursor.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Parses config text plus overrides into the file schema. Pure: no
/// filesystem or environment access.
pub fn parse_config_text(text: &str, overrides: &[String]) -> Result<FileConfig, ConfigError> {
    let mut table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
}

/// Fully resolved configuration: the realized graph plus everything the
/// ensemble driver and the sweep/compare front ends need.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub ensemble: EnsembleConfig,
    pub sweep_deltas: Vec<f64>,
    pub compare_rules: Vec<Rule>,
    /// Where the graph came from, for reporting.
    pub graph_source: String,
}

fn parse_rule(name: &str) -> Result<Rule, ConfigError> {
    name.parse::<Rule>().map_err(|e| ConfigError::Validation(e.to_string()))
}

fn realize_graph(section: &GraphSection) -> Result<(Digraph, String), ConfigError> {
    if let Some(path) = &section.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.clone(), err: e.to_string() })?;
        return Ok((parse_graph_file(&text)?, format!("file:{path}")));
    }
    let unit = random_strongly_connected(section.n, section.extra_edge_prob, section.seed);
    let source = format!(
        "generated:n={},extra_edge_prob={},seed={},weighting={}",
        section.n, section.extra_edge_prob, section.seed, section.weighting
    );
    match section.weighting.as_str() {
        "unit" => Ok((unit, source)),
        "metropolis" => {
            let edges: Vec<(usize, usize)> =
                unit.edges().iter().map(|&(f, t, _)| (f, t)).collect();
            Ok((metropolis_weights(section.n, &edges)?, source))
        }
        other => Err(ConfigError::Validation(format!(
            "graph.weighting must be \"metropolis\" or \"unit\", got {other:?}"
        ))),
    }
}

/// Validates the file schema and realizes it into runnable form.
pub fn resolve(file: &FileConfig) -> Result<ResolvedConfig, ConfigError> {
    let fail = |msg: String| Err(ConfigError::Validation(msg));

    if file.runs < 1 {
        return fail(format!("runs must be at least 1, got {}", file.runs));
    }
    if file.t0 < file.k0 {
        return fail(format!(
            "t0 must be at least k0 (stage 2 starts only after the stage-1 averaging warmup): t0={} k0={}",
            file.t0, file.k0
        ));
    }
    let warmup = file.k0.max(file.t0) + 2;
    if file.steps <= warmup {
        return fail(format!(
            "steps must exceed max(k0, t0)+2 = {warmup} so at least one averaged sample exists, got {}",
            file.steps
        ));
    }
    if !(file.sigma >= 0.0 && file.sigma.is_finite()) {
        return fail(format!("sigma must be finite and nonnegative, got {}", file.sigma));
    }
    if !(file.alpha > 0.0 && file.alpha.is_finite()) {
        return fail(format!("alpha must be finite and positive, got {}", file.alpha));
    }
    if !(file.kappa > 0.0 && file.kappa.is_finite()) {
        return fail(format!("kappa must be finite and positive, got {}", file.kappa));
    }
    if !(file.eta > 0.0 && file.eta < 1.0) {
        return fail(format!("eta must lie strictly between 0 and 1, got {}", file.eta));
    }
    if !file.theta.is_finite() {
        return fail(format!("theta must be finite, got {}", file.theta));
    }

    let delta = match (file.delta, file.quantizer.delta) {
        (Some(a), Some(b)) if a != b => {
            return fail(format!(
                "delta is set twice with different values: delta={a} quantizer.delta={b}"
            ));
        }
        (a, b) => a.or(b).unwrap_or(1.0),
    };
    let quant = match file.quantizer.kind.as_str() {
        "none" => QuantizerSpec::identity(),
        "prob" | "unif" => {
            if !(delta > 0.0 && delta.is_finite()) {
                return fail(format!(
                    "quantizer.delta must be finite and positive unless kind is \"none\", got {delta}"
                ));
            }
            let kind = if file.quantizer.kind == "prob" {
                QuantizerKind::Probabilistic
            } else {
                QuantizerKind::UniformDeterministic
            };
            QuantizerSpec { kind, delta }
        }
        other => {
            return fail(format!(
                "quantizer.kind must be \"prob\", \"unif\", or \"none\", got {other:?}"
            ));
        }
    };

    let init = match file.init.as_str() {
        "measurement" => InitMode::Measurement,
        "interval" => InitMode::Interval,
        other => {
            return fail(format!(
                "init must be \"measurement\" or \"interval\", got {other:?}"
            ));
        }
    };

    let rule = parse_rule(&file.rule)?;
    if file.compare.rules.is_empty() {
        return fail("compare.rules must not be empty".into());
    }
    let compare_rules =
        file.compare.rules.iter().map(|r| parse_rule(r)).collect::<Result<Vec<_>, _>>()?;
    if file.sweep.deltas.is_empty() {
        return fail("sweep.deltas must not be empty".into());
    }
    for d in &file.sweep.deltas {
        if !(*d > 0.0 && d.is_finite()) {
            return fail(format!("sweep.deltas entries must be finite and positive, got {d}"));
        }
    }

    let (graph, graph_source) = realize_graph(&file.graph)?;

    Ok(ResolvedConfig {
        ensemble: EnsembleConfig {
            graph,
            theta: file.theta,
            sigma: file.sigma,
            alpha: file.alpha,
            kappa: file.kappa,
            k0: file.k0,
            t0: file.t0,
            steps: file.steps,
            runs: file.runs,
            seed: file.seed,
            rule,
            quant,
            eta: file.eta,
            init,
            workers: file.workers,
            rstats: file.rstats,
        },
        sweep_deltas: file.sweep.deltas.clone(),
        compare_rules,
        graph_source,
    })
}

/// Loads a config file (defaults when absent), applies overrides and the
/// seed environment variable, and resolves the result.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
            path: p.display().to_string(),
            err: e.to_string(),
        })?,
        None => String::new(),
    };
    let mut file = parse_config_text(&text, overrides)?;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        file.seed = raw.parse().map_err(|_| ConfigError::BadSeedEnv(raw))?;
    }
    resolve(&file)
}
