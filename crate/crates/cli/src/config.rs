//! Flat experiment configuration shared by the JSON file and the flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const SUBCOMMANDS: [&str; 10] = [
    "check-hypotheses",
    "simulate",
    "resolve",
    "select-lambda",
    "flow",
    "stability",
    "bel",
    "fd-check",
    "decay-probe",
    "suite",
];

const COMMON: &[&str] = &["subcommand", "seed", "out", "workers", "fast"];
const TRANSFORM: &[&str] = &[
    "ladder",
    "gamma",
    "resolvent_dt",
    "resolvent_paths",
    "cache_radius",
    "cache_spacing",
];

/// Keys a subcommand reads besides the common ones.
fn relevant(subcommand: &str) -> Vec<&'static str> {
    let mut keys: Vec<&'static str> = match subcommand {
        "check-hypotheses" => vec!["drift", "sigma", "dim", "probes", "quad_points"],
        "simulate" => vec![
            "drift",
            "sigma",
            "dim",
            "x",
            "t",
            "dt",
            "paths",
            "quad_points",
        ],
        "resolve" => vec![
            "drift",
            "sigma",
            "dim",
            "lambda",
            "ladder",
            "gamma",
            "queries",
            "dt",
            "paths",
            "fd_step",
            "antithetic",
            "quad_points",
        ],
        "select-lambda" => vec![
            "drift",
            "sigma",
            "dim",
            "ladder",
            "gamma",
            "queries",
            "dt",
            "paths",
            "fd_step",
            "antithetic",
            "quad_points",
        ],
        "flow" => [
            &[
                "drift",
                "sigma",
                "dim",
                "x",
                "h",
                "t",
                "dt",
                "paths",
                "via_transform",
                "quad_points",
            ][..],
            TRANSFORM,
        ]
        .concat(),
        "stability" => [
            &[
                "drift",
                "sigma",
                "dim",
                "ns",
                "t",
                "dt",
                "paths",
                "quad_points",
                "p",
            ][..],
            TRANSFORM,
        ]
        .concat(),
        "bel" => [
            &[
                "f",
                "drift",
                "sigma",
                "dim",
                "t",
                "x",
                "h",
                "dt",
                "paths",
                "cv",
                "via_transform",
                "quad_points",
            ][..],
            TRANSFORM,
        ]
        .concat(),
        "fd-check" => vec![
            "f",
            "drift",
            "sigma",
            "dim",
            "t",
            "x",
            "h",
            "dt",
            "paths",
            "fd_step",
            "quad_points",
        ],
        "decay-probe" => vec![
            "f",
            "drift",
            "sigma",
            "dim",
            "x",
            "h",
            "ts",
            "paths",
            "steps_per_t",
            "cv",
            "quad_points",
        ],
        _ => vec![],
    };
    if keys.contains(&"drift") {
        keys.push("mollify");
    }
    keys.extend_from_slice(COMMON);
    keys
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcommand: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mollify: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub antithetic: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolvent_dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolvent_paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via_transform: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ns: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fast: Option<bool>,
}

fn config_err(key: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{key}`: {reason}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!(),
        }
    }

    /// Keys of `flags` replace those of `self`.
    pub fn overlay(&self, flags: &ExperimentConfig) -> ExperimentConfig {
        let mut base = self.to_map();
        base.extend(flags.to_map());
        serde_json::from_value(Value::Object(base)).expect("merged config deserializes")
    }

    /// Rejects keys the subcommand does not read, then checks the values
    /// against the module preconditions.
    pub fn validate(&self, subcommand: &str) -> Result<(), CliError> {
        if !SUBCOMMANDS.contains(&subcommand) {
            return Err(config_err(
                "subcommand",
                format!("unknown subcommand `{subcommand}`"),
            ));
        }
        if let Some(s) = &self.subcommand {
            if s != subcommand {
                return Err(config_err(
                    "subcommand",
                    format!("config is for `{s}`, invoked as `{subcommand}`"),
                ));
            }
        }
        let allowed = relevant(subcommand);
        for key in self.to_map().keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(config_err(key, format!("not used by `{subcommand}`")));
            }
        }
        let positive = |key: &str, v: Option<f64>| match v {
            Some(v) if !(v > 0.0 && v.is_finite()) => Err(config_err(key, "must be positive")),
            _ => Ok(()),
        };
        positive("t", self.t)?;
        positive("dt", self.dt)?;
        positive("lambda", self.lambda)?;
        positive("fd_step", self.fd_step)?;
        positive("resolvent_dt", self.resolvent_dt)?;
        positive("cache_radius", self.cache_radius)?;
        positive("cache_spacing", self.cache_spacing)?;
        positive("p", self.p)?;
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(config_err("gamma", "must lie in (0, 1)"));
            }
        }
        if let Some(l) = &self.ladder {
            if l.is_empty() || l.iter().any(|v| !(*v > 0.0)) || l.windows(2).any(|w| !(w[0] < w[1]))
            {
                return Err(config_err(
                    "ladder",
                    "must be positive and strictly ascending",
                ));
            }
        }
        if let Some(ts) = &self.ts {
            if ts.len() < 3
                || ts.iter().any(|v| !(*v > 0.0))
                || ts.windows(2).any(|w| !(w[0] < w[1]))
            {
                return Err(config_err("ts", "need ≥ 3 positive ascending horizons"));
            }
        }
        if let Some(ns) = &self.ns {
            if ns.is_empty() || ns.contains(&0) {
                return Err(config_err("ns", "need positive mollification indices"));
            }
        }
        for (key, v) in [
            ("paths", self.paths),
            ("resolvent_paths", self.resolvent_paths),
            ("dim", self.dim),
            ("workers", self.workers),
            ("steps_per_t", self.steps_per_t),
            ("probes", self.probes),
        ] {
            if v == Some(0) {
                return Err(config_err(key, "must be positive"));
            }
        }
        if let Some(d) = self.dim {
            if d > 3 {
                return Err(config_err("dim", "at most 3 (mollifier quadrature limit)"));
            }
        }
        let dim = self.dim();
        for (key, v) in [("x", &self.x), ("h", &self.h)] {
            if let Some(v) = v {
                if v.len() != dim {
                    return Err(config_err(
                        key,
                        format!("expected {dim} components, got {}", v.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim.unwrap_or(1)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn fast(&self) -> bool {
        self.fast.unwrap_or(false)
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
    }

    pub fn out_dir(&self, subcommand: &str) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("sdeflow-out").join(subcommand))
    }

    /// `full` paths, or a tenth of it (at least `floor`) under `--fast`.
    pub fn paths_or(&self, full: usize, floor: usize) -> usize {
        match self.paths {
            Some(p) => p,
            None if self.fast() => (full / 10).max(floor),
            None => full,
        }
    }

    pub fn x_or_zero(&self) -> Vec<f64> {
        self.x.clone().unwrap_or_else(|| vec![0.0; self.dim()])
    }

    pub fn h_or_e1(&self) -> Vec<f64> {
        self.h.clone().unwrap_or_else(|| {
            let mut h = vec![0.0; self.dim()];
            h[0] = 1.0;
            h
        })
    }
}

/// Flags accepted by every subcommand. Flags a subcommand does not read
/// are rejected after parsing, like unknown keys in a config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Knobs {
    /// Drift preset: zero | const:c=… | linear:a=… | holder:theta=…,scale=… | mollified:<base>:<n>
    #[arg(long)]
    pub drift: Option<String>,
    /// Replace the drift by its mollification: `n=<int>,quad=<int>`.
    #[arg(long)]
    pub mollify: Option<String>,
    /// Diffusion preset: identity | const:s=… | sin-perturbed:eps=…
    #[arg(long)]
    pub sigma: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Initial point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Option<Vec<f64>>,
    /// Direction of differentiation.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub h: Option<Vec<f64>>,
    /// Time horizon.
    #[arg(long = "t", alias = "T")]
    pub t: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub ladder: Option<Vec<f64>>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// `grid:lo,hi,n` (tensor grid in d > 1) or a file with one point per line.
    #[arg(long, allow_hyphen_values = true)]
    pub queries: Option<String>,
    #[arg(long)]
    pub fd_step: Option<f64>,
    /// Antithetic pairing in the resolvent solver.
    #[arg(long)]
    pub antithetic: bool,
    #[arg(long)]
    pub resolvent_dt: Option<f64>,
    #[arg(long)]
    pub resolvent_paths: Option<usize>,
    #[arg(long)]
    pub cache_radius: Option<f64>,
    #[arg(long)]
    pub cache_spacing: Option<f64>,
    /// Route the flow and its derivative through the transform.
    #[arg(long, conflicts_with = "direct")]
    pub via_transform: bool,
    /// Plain Euler on the original drift.
    #[arg(long)]
    pub direct: bool,
    /// Mollification indices.
    #[arg(long, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    #[arg(long)]
    pub quad_points: Option<usize>,
    /// Moment of the stability statistic.
    #[arg(long)]
    pub p: Option<f64>,
    /// Observable: const | coord:i | sq | holder:θ | holder-odd:θ
    #[arg(long)]
    pub f: Option<String>,
    /// Deterministic-flow control variate.
    #[arg(long)]
    pub cv: bool,
    #[arg(long, value_delimiter = ',')]
    pub ts: Option<Vec<f64>>,
    #[arg(long)]
    pub steps_per_t: Option<usize>,
    #[arg(long)]
    pub probes: Option<usize>,
}

impl Knobs {
    pub fn into_config(self) -> ExperimentConfig {
        let flag = |on: bool| if on { Some(true) } else { None };
        ExperimentConfig {
            drift: self.drift,
            mollify: self.mollify,
            sigma: self.sigma,
            dim: self.dim,
            x: self.x,
            h: self.h,
            t: self.t,
            dt: self.dt,
            paths: self.paths,
            lambda: self.lambda,
            ladder: self.ladder,
            gamma: self.gamma,
            queries: self.queries,
            fd_step: self.fd_step,
            antithetic: flag(self.antithetic),
            resolvent_dt: self.resolvent_dt,
            resolvent_paths: self.resolvent_paths,
            cache_radius: self.cache_radius,
            cache_spacing: self.cache_spacing,
            via_transform: if self.via_transform {
                Some(true)
            } else if self.direct {
                Some(false)
            } else {
                None
            },
            ns: self.ns,
            quad_points: self.quad_points,
            p: self.p,
            f: self.f,
            cv: flag(self.cv),
            ts: self.ts,
            steps_per_t: self.steps_per_t,
            probes: self.probes,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"drfit": "zero"}"#).is_err());
        let c = ExperimentConfig::from_json(r#"{"drift": "zero", "paths": 5}"#).unwrap();
        assert_eq!(c.paths, Some(5));
    }

    #[test]
    fn flags_win() {
        let file = ExperimentConfig::from_json(r#"{"drift": "zero", "paths": 5}"#).unwrap();
        let flags = ExperimentConfig {
            paths: Some(9),
            ..Default::default()
        };
        let m = file.overlay(&flags);
        assert_eq!(m.paths, Some(9));
        assert_eq!(m.drift.as_deref(), Some("zero"));
    }

    #[test]
    fn irrelevant_keys_name_the_offender() {
        let c = ExperimentConfig {
            ns: Some(vec![2]),
            ..Default::default()
        };
        match c.validate("bel") {
            Err(CliError::Config(m)) => assert!(m.contains("`ns`")),
            r => panic!("{r:?}"),
        }
        assert!(c.validate("stability").is_ok());
    }

    #[test]
    fn value_checks() {
        let bad = ExperimentConfig {
            gamma: Some(1.5),
            ..Default::default()
        };
        assert!(bad.validate("select-lambda").is_err());
        let bad = ExperimentConfig {
            x: Some(vec![1.0, 2.0]),
            ..Default::default()
        };
        assert!(bad.validate("simulate").is_err());
        let bad = ExperimentConfig {
            ladder: Some(vec![5.0, 2.0]),
            ..Default::default()
        };
        assert!(bad.validate("resolve").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = ExperimentConfig {
            subcommand: Some("bel".into()),
            x: Some(vec![1.0]),
            cv: Some(true),
            seed: Some(3),
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
