//! Flat `key = value` run configuration. A file supplies a base layer,
//! command-line flags override it, and the fully resolved result is written
//! next to the outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anisoline::fitting::FitConfig;
use anisoline::iga::{Marking, SolveConfig};
use anisoline::refine::Strategy;
use anisoline::verify::VerifyConfig;

use crate::{CliError, Result};

/// Recognised keys. Keys not used by a subcommand are accepted and ignored
/// so one file can drive several runs; `input` and `problem` are only
/// recorded.
pub const KEYS: [&str; 19] = [
    "input",
    "problem",
    "strategy",
    "seed",
    "max_levels",
    "tolerance",
    "delta",
    "delta1",
    "samples",
    "grid",
    "weight_radius",
    "points",
    "quadrature",
    "marking",
    "solver_tolerance",
    "depth",
    "trials",
    "unity_points",
    "write_spline",
];

pub const EFFECTIVE_CONFIG: &str = "effective_config.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown key '{key}' (known: {})", KEYS.join(", "))));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Later layer wins.
    pub fn merge(&mut self, other: &RunConfig) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("bad value '{v}' for key '{key}'"))),
        }
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.typed(key)?.unwrap_or(default))
    }

    pub fn strategy(&self) -> Result<Strategy> {
        match self.get("strategy") {
            None => Ok(Strategy::Modified),
            Some(s) => Strategy::parse(s)
                .ok_or_else(|| CliError::Config(format!("strategy must be modified or cross_only, got '{s}'"))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.or("seed", VerifyConfig::default().seed)
    }

    /// `NSxNT`.
    pub fn grid(&self) -> Result<Option<(usize, usize)>> {
        let Some(g) = self.get("grid") else { return Ok(None) };
        let bad = || CliError::Config(format!("grid must look like 4x4, got '{g}'"));
        let (a, b) = g.split_once('x').ok_or_else(bad)?;
        let ns: usize = a.trim().parse().map_err(|_| bad())?;
        let nt: usize = b.trim().parse().map_err(|_| bad())?;
        if ns == 0 || nt == 0 {
            return Err(bad());
        }
        Ok(Some((ns, nt)))
    }

    /// Sample grid size for built-in fit models.
    pub fn points(&self) -> Result<Option<usize>> {
        self.typed("points")
    }

    pub fn write_spline(&self) -> Result<bool> {
        self.or("write_spline", true)
    }

    pub fn fit_config(&self, default_grid: (usize, usize)) -> Result<FitConfig> {
        let d = FitConfig::default();
        let cfg = FitConfig {
            tolerance: self.or("tolerance", d.tolerance)?,
            delta: self.or("delta", d.delta)?,
            samples: self.or("samples", d.samples)?,
            max_levels: self.or("max_levels", d.max_levels)?,
            grid: self.grid()?.unwrap_or(default_grid),
            strategy: self.strategy()?,
            weight_radius: self.or("weight_radius", d.weight_radius)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `tolerance` is the absolute marking threshold; `marking` may switch
    /// to `dorfler:THETA` or `uniform`. Setting only `delta` puts `delta1`
    /// at its reciprocal.
    pub fn solve_config(&self) -> Result<SolveConfig> {
        let d = SolveConfig::default();
        let threshold = match d.marking {
            Marking::Threshold(x) => x,
            _ => 1e-4,
        };
        let marking = match self.get("marking").unwrap_or("threshold") {
            "threshold" => Marking::Threshold(self.or("tolerance", threshold)?),
            "uniform" => Marking::Uniform,
            m => match m.strip_prefix("dorfler:") {
                Some(x) => Marking::Dorfler(
                    x.parse().map_err(|_| CliError::Config(format!("bad Dorfler fraction in '{m}'")))?,
                ),
                None => {
                    return Err(CliError::Config(format!(
                        "marking must be threshold, uniform or dorfler:THETA, got '{m}'"
                    )))
                }
            },
        };
        let delta0 = self.or("delta", d.delta0)?;
        let delta1 = match self.typed("delta1")? {
            Some(x) => x,
            None if self.is_set("delta") => 1.0 / delta0,
            None => d.delta1,
        };
        let cfg = SolveConfig {
            marking,
            delta0,
            delta1,
            samples: self.or("samples", d.samples)?,
            quadrature: self.or("quadrature", d.quadrature)?,
            max_levels: self.or("max_levels", d.max_levels)?,
            solver_tolerance: self.or("solver_tolerance", d.solver_tolerance)?,
            strategy: self.strategy()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn verify_config(&self) -> Result<VerifyConfig> {
        let d = VerifyConfig::default();
        let cfg = VerifyConfig {
            depth: self.or("depth", d.depth)?,
            trials: self.or("trials", d.trials)?,
            seed: self.seed()?,
            samples: self.or("unity_points", d.samples)?,
            ..d
        };
        if cfg.depth == 0 {
            return Err(CliError::Config("depth must be at least 1".into()));
        }
        Ok(cfg)
    }
}

fn marking_string(m: Marking) -> String {
    match m {
        Marking::Threshold(_) => "threshold".into(),
        Marking::Uniform => "uniform".into(),
        Marking::Dorfler(x) => format!("dorfler:{x}"),
    }
}

/// Resolved values as `key = value` lines, sorted by key.
pub fn render(pairs: &[(&str, String)]) -> String {
    let mut sorted = pairs.to_vec();
    sorted.sort();
    let mut out = String::new();
    for (k, v) in sorted {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

pub fn effective_fit(cfg: &FitConfig, input: &str, seed: u64, points: Option<usize>, write_spline: bool) -> String {
    let mut pairs = vec![
        ("input", input.to_string()),
        ("strategy", cfg.strategy.name().to_string()),
        ("seed", seed.to_string()),
        ("max_levels", cfg.max_levels.to_string()),
        ("tolerance", format!("{:e}", cfg.tolerance)),
        ("delta", cfg.delta.to_string()),
        ("samples", cfg.samples.to_string()),
        ("grid", format!("{}x{}", cfg.grid.0, cfg.grid.1)),
        ("weight_radius", cfg.weight_radius.to_string()),
        ("write_spline", write_spline.to_string()),
    ];
    if let Some(p) = points {
        pairs.push(("points", p.to_string()));
    }
    render(&pairs)
}

pub fn effective_solve(cfg: &SolveConfig, problem: &str, grid: (usize, usize), seed: u64) -> String {
    let mut pairs = vec![
        ("problem", problem.to_string()),
        ("strategy", cfg.strategy.name().to_string()),
        ("seed", seed.to_string()),
        ("max_levels", cfg.max_levels.to_string()),
        ("marking", marking_string(cfg.marking)),
        ("delta", cfg.delta0.to_string()),
        ("delta1", cfg.delta1.to_string()),
        ("samples", cfg.samples.to_string()),
        ("quadrature", cfg.quadrature.to_string()),
        ("solver_tolerance", format!("{:e}", cfg.solver_tolerance)),
        ("grid", format!("{}x{}", grid.0, grid.1)),
    ];
    if let Marking::Threshold(x) = cfg.marking {
        pairs.push(("tolerance", format!("{x:e}")));
    }
    render(&pairs)
}

pub fn effective_verify(cfg: &VerifyConfig) -> String {
    render(&[
        ("depth", cfg.depth.to_string()),
        ("trials", cfg.trials.to_string()),
        ("seed", cfg.seed.to_string()),
        ("unity_points", cfg.samples.to_string()),
    ])
}
