//! Training configuration and the flat `key=value` config format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// Ratio against the frozen clean-audio teacher's sequence score.
    TeacherReference,
    /// Ratio against the student's own score recorded at rollout time.
    OldPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    TeacherGreedy,
    TeacherLikelihoodBestCandidate,
}

impl FromStr for RatioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_reference" => Ok(Self::TeacherReference),
            "old_policy" => Ok(Self::OldPolicy),
            other => Err(Error::Config(format!("unknown ratio_mode `{other}`"))),
        }
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_greedy" => Ok(Self::TeacherGreedy),
            "teacher_likelihood_best_candidate" => Ok(Self::TeacherLikelihoodBestCandidate),
            other => Err(Error::Config(format!("unknown guidance_mode `{other}`"))),
        }
    }
}

impl fmt::Display for RatioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TeacherReference => "teacher_reference",
            Self::OldPolicy => "old_policy",
        })
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TeacherGreedy => "teacher_greedy",
            Self::TeacherLikelihoodBestCandidate => "teacher_likelihood_best_candidate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub advantage_eps: f64,
    pub clip_eps: f64,
    pub beta: f64,
    pub lambda_policy: f64,
    pub lambda_distill: f64,
    /// Sampling temperature; `0.0` selects greedy decoding.
    pub temperature: f64,
    pub learning_rate: f64,
    pub ratio_mode: RatioMode,
    pub guidance_mode: GuidanceMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            advantage_eps: 1e-6,
            clip_eps: 0.2,
            beta: 0.5,
            lambda_policy: 1.0,
            lambda_distill: 1.0,
            temperature: 1.0,
            learning_rate: 1e-3,
            ratio_mode: RatioMode::TeacherReference,
            guidance_mode: GuidanceMode::TeacherGreedy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return fail("clip_eps must lie in (0, 1)");
        }
        if !(self.advantage_eps > 0.0) {
            return fail("advantage_eps must be positive");
        }
        if !(self.beta >= 0.0 && self.lambda_policy >= 0.0 && self.lambda_distill >= 0.0) {
            return fail("beta, lambda_policy and lambda_distill must be non-negative");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be finite and non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        Ok(())
    }

    /// Overrides fields present in `kv`; unknown keys are left for other consumers.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("group_size", &mut self.group_size)?;
        kv.set("advantage_eps", &mut self.advantage_eps)?;
        kv.set("clip_eps", &mut self.clip_eps)?;
        kv.set("beta", &mut self.beta)?;
        kv.set("lambda_policy", &mut self.lambda_policy)?;
        kv.set("lambda_distill", &mut self.lambda_distill)?;
        kv.set("temperature", &mut self.temperature)?;
        kv.set("learning_rate", &mut self.learning_rate)?;
        kv.set("ratio_mode", &mut self.ratio_mode)?;
        kv.set("guidance_mode", &mut self.guidance_mode)?;
        kv.set("seed", &mut self.seed)?;
        Ok(())
    }
}

/// Flat `key = value` lines. `#` starts a comment; blank lines are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{raw}`", lineno + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("`{key}`: {e}")))
            })
            .transpose()
    }

    pub fn set<T>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>()
                            .map_err(|e| Error::Config(format!("`{key}` item `{s}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn group_of_one_rejected() {
        let cfg = TrainConfig {
            group_size: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn clip_eps_bounds() {
        for bad in [0.0, 1.0, -0.1, 1.5] {
            let cfg = TrainConfig {
                clip_eps: bad,
                ..Default::default()
            };
            assert!(cfg.validate().is_err(), "clip_eps={bad}");
        }
    }

    #[test]
    fn parse_and_apply() {
        let kv = KeyValues::parse(
            "# comment\ngroup_size = 4\nbeta=0.25 # inline\nratio_mode = old_policy\n\nsnr_grid=-10, 0,30\n",
        )
        .unwrap();
        let mut cfg = TrainConfig::default();
        cfg.apply(&kv).unwrap();
        assert_eq!(cfg.group_size, 4);
        assert_eq!(cfg.beta, 0.25);
        assert_eq!(cfg.ratio_mode, RatioMode::OldPolicy);
        assert_eq!(kv.list::<f64>("snr_grid").unwrap().unwrap(), vec![-10.0, 0.0, 30.0]);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(KeyValues::parse("just words").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        let kv = KeyValues::parse("group_size=many").unwrap();
        assert!(TrainConfig::default().apply(&kv).is_err());
    }
}
