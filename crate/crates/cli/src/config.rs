//! The line-oriented run configuration.
//!
//! ```text
//! # seed system
//! system.form = model
//! system.P = 0
//! system.Q = x2
//! chart.min = -1, -1, -1
//! chart.max = 1
//! num.dt = 0.01
//! ```
//!
//! Every key is optional; unset keys keep the values of [`RunConfig::default`].
//! For `system.form = general` all nine `system.X[i][j]` (component `j` of
//! field `X_i`, both 1-based) are required.

use std::collections::HashMap;
use std::fmt;

use singtraj_core::expr::ParseError;
use singtraj_core::{parse_expr, ChartBox, ScalarField, VectorFieldSystem};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config:{}:{}: {}", self.line, self.column, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemSpec {
    Model { p: ScalarField, q: ScalarField },
    General(Box<[[ScalarField; 3]; 3]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub chart_min: [f64; 3],
    pub chart_max: [f64; 3],
    pub resolution: [usize; 3],
    pub dt: f64,
    pub intervals: usize,
    pub rank_tol: f64,
    pub tangency_cutoff: f64,
    /// Line of each key that was set, for errors raised after parsing.
    lines: HashMap<String, usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: SystemSpec::Model {
                p: ScalarField::zero(),
                q: parse_expr("x2").expect("literal"),
            },
            chart_min: [-1.0; 3],
            chart_max: [1.0; 3],
            resolution: [12; 3],
            dt: 0.01,
            intervals: 50,
            rank_tol: 1e-6,
            tangency_cutoff: 1e-4,
            lines: HashMap::new(),
        }
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
    /// 1-based column where `value` starts.
    column: usize,
}

impl Entry<'_> {
    fn error(&self, offset: usize, message: impl Into<String>) -> ConfigError {
        ConfigError {
            line: self.line,
            column: self.column + offset,
            message: message.into(),
        }
    }

    fn expr(&self) -> Result<ScalarField, ConfigError> {
        parse_expr(self.value).map_err(|e| {
            let msg = match &e {
                ParseError::Syntax { message, .. } => format!("{}: {message}", self.key),
                ParseError::UnknownIdentifier { name, .. } => format!("{}: unknown identifier '{name}'", self.key),
            };
            self.error(e.offset(), msg)
        })
    }

    fn number(&self) -> Result<f64, ConfigError> {
        self.value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.error(0, format!("{}: expected a finite number, got '{}'", self.key, self.value)))
    }

    fn positive(&self) -> Result<f64, ConfigError> {
        let v = self.number()?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.error(0, format!("{} must be positive", self.key)))
        }
    }

    fn count(&self, min: usize) -> Result<usize, ConfigError> {
        match self.value.parse::<usize>() {
            Ok(n) if n >= min => Ok(n),
            _ => Err(self.error(0, format!("{}: expected an integer ≥ {min}, got '{}'", self.key, self.value))),
        }
    }

    /// One value for all three axes, or three separated by commas or spaces.
    fn triple<T: Copy>(&self, parse: impl Fn(&str) -> Option<T>) -> Result<[T; 3], ConfigError> {
        let parts: Vec<&str> = self
            .value
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let parsed: Option<Vec<T>> = parts.iter().map(|p| parse(p)).collect();
        match (parts.len(), parsed) {
            (1, Some(v)) => Ok([v[0]; 3]),
            (3, Some(v)) => Ok([v[0], v[1], v[2]]),
            _ => Err(self.error(0, format!("{}: expected one or three values, got '{}'", self.key, self.value))),
        }
    }
}

fn general_index(key: &str) -> Option<(usize, usize)> {
    let rest = key.strip_prefix("system.X[")?;
    let (i, rest) = rest.split_once("][")?;
    let j = rest.strip_suffix(']')?;
    let (i, j) = (i.parse::<usize>().ok()?, j.parse::<usize>().ok()?);
    ((1..=3).contains(&i) && (1..=3).contains(&j)).then_some((i - 1, j - 1))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut form: Option<(String, usize)> = None;
        let mut p = None;
        let mut q = None;
        let mut x: [[Option<ScalarField>; 3]; 3] = Default::default();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let Some(eq) = content.find('=') else {
                let column = raw.len() - raw.trim_start().len() + 1;
                return Err(ConfigError {
                    line,
                    column,
                    message: "expected 'key = value'".into(),
                });
            };
            let key = content[..eq].trim();
            let after = &content[eq + 1..];
            let value = after.trim();
            let leading = after.len() - after.trim_start().len();
            let entry = Entry {
                line,
                key,
                value,
                column: eq + 2 + leading,
            };
            if cfg.lines.insert(key.to_string(), line).is_some() {
                let column = raw.find(key).map_or(1, |c| c + 1);
                return Err(ConfigError {
                    line,
                    column,
                    message: format!("duplicate key '{key}'"),
                });
            }
            match key {
                "system.form" => match value {
                    "model" | "general" => form = Some((value.to_string(), line)),
                    _ => return Err(entry.error(0, format!("system.form must be 'model' or 'general', got '{value}'"))),
                },
                "system.P" => p = Some(entry.expr()?),
                "system.Q" => q = Some(entry.expr()?),
                "chart.min" => cfg.chart_min = entry.triple(|s| s.parse::<f64>().ok())?,
                "chart.max" => cfg.chart_max = entry.triple(|s| s.parse::<f64>().ok())?,
                "num.resolution" => {
                    cfg.resolution = entry.triple(|s| s.parse::<usize>().ok().filter(|&n| n >= 2))?
                }
                "num.dt" => cfg.dt = entry.positive()?,
                "num.N" => cfg.intervals = entry.count(1)?,
                "num.rank_tol" => cfg.rank_tol = entry.positive()?,
                "num.tangency_cutoff" => cfg.tangency_cutoff = entry.positive()?,
                _ => match general_index(key) {
                    Some((i, j)) => x[i][j] = Some(entry.expr()?),
                    None => {
                        let column = raw.find(key).map_or(1, |c| c + 1);
                        return Err(ConfigError {
                            line,
                            column,
                            message: format!("unknown key '{key}'"),
                        });
                    }
                },
            }
        }

        let general = matches!(&form, Some((f, _)) if f == "general");
        let any_x = x.iter().flatten().any(Option::is_some);
        if general {
            if p.is_some() || q.is_some() {
                return Err(cfg.key_error("system.P", "system.P/system.Q are only valid with system.form = model"));
            }
            for (i, row) in x.iter().enumerate() {
                if let Some(j) = row.iter().position(Option::is_none) {
                    return Err(ConfigError {
                        line: form.as_ref().map_or(0, |f| f.1),
                        column: 1,
                        message: format!("general form requires system.X[{}][{}]", i + 1, j + 1),
                    });
                }
            }
            let components: [[ScalarField; 3]; 3] =
                std::array::from_fn(|i| std::array::from_fn(|j| x[i][j].take().expect("checked above")));
            cfg.system = SystemSpec::General(Box::new(components));
        } else {
            if any_x {
                let key = cfg
                    .lines
                    .keys()
                    .filter(|k| k.starts_with("system.X["))
                    .min_by_key(|k| cfg.lines[*k])
                    .cloned()
                    .unwrap_or_default();
                return Err(cfg.key_error(&key, "system.X[i][j] requires system.form = general"));
            }
            if let SystemSpec::Model { p: dp, q: dq } = &mut cfg.system {
                if let Some(p) = p {
                    *dp = p;
                }
                if let Some(q) = q {
                    *dq = q;
                }
            }
        }
        Ok(cfg)
    }

    fn key_error(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            line: self.lines.get(key).copied().unwrap_or(0),
            column: 1,
            message: message.into(),
        }
    }

    pub fn chart(&self) -> Result<ChartBox, ConfigError> {
        ChartBox::new(self.chart_min, self.chart_max).map_err(|e| self.key_error("chart.min", e.to_string()))
    }

    pub fn build_system(&self) -> Result<VectorFieldSystem, ConfigError> {
        let chart = self.chart()?;
        match &self.system {
            SystemSpec::Model { p, q } => VectorFieldSystem::model(p.clone(), q.clone(), chart)
                .map_err(|e| self.key_error(if self.lines.contains_key("system.P") { "system.P" } else { "system.Q" }, e.to_string())),
            SystemSpec::General(components) => VectorFieldSystem::general((**components).clone(), chart)
                .map_err(|e| self.key_error("system.form", e.to_string())),
        }
    }
}
