//! Simulation configuration and its strict `key = value` file format.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::mutation::Mutation;
use crate::types::{validator_count, ValidatorId};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Exact probability `num / den`, sampled with integer arithmetic so runs are
/// identical on every platform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rational {
    pub num: u64,
    pub den: u64,
}

impl Rational {
    pub const ZERO: Rational = Rational { num: 0, den: 1 };
    pub const ONE: Rational = Rational { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Rational, String> {
        if den == 0 {
            return Err("zero denominator".into());
        }
        if num > den {
            return Err(format!("{num}/{den} is greater than 1"));
        }
        let g = gcd(num, den);
        Ok(Rational {
            num: num / g,
            den: den / g,
        })
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Rational {
    type Err = String;

    /// Accepts `a/b` or a decimal such as `0.05`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            let a = a.trim().parse::<u64>().map_err(|e| e.to_string())?;
            let b = b.trim().parse::<u64>().map_err(|e| e.to_string())?;
            return Rational::new(a, b);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 15 || !frac.bytes().all(|c| c.is_ascii_digit()) {
            return Err(format!("bad decimal `{s}`"));
        }
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| format!("bad decimal `{s}`"))? };
        let den = 10u64.pow(frac.len() as u32);
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().unwrap() };
        Rational::new(int * den + frac_v, den)
    }
}

impl TryFrom<String> for Rational {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Rational> for String {
    fn from(r: Rational) -> String {
        r.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdversaryStrategy {
    Passive,
    Random,
    Equivocator,
    VoteSplitter,
    Scripted(PathBuf),
}

impl AdversaryStrategy {
    /// The four generated strategies, in campaign rotation order.
    pub const GENERATED: [AdversaryStrategy; 4] = [
        AdversaryStrategy::Passive,
        AdversaryStrategy::Random,
        AdversaryStrategy::Equivocator,
        AdversaryStrategy::VoteSplitter,
    ];

    pub fn name(&self) -> String {
        match self {
            AdversaryStrategy::Passive => "Passive".into(),
            AdversaryStrategy::Random => "Random".into(),
            AdversaryStrategy::Equivocator => "Equivocator".into(),
            AdversaryStrategy::VoteSplitter => "VoteSplitter".into(),
            AdversaryStrategy::Scripted(p) => format!("Scripted({})", p.display()),
        }
    }
}

impl fmt::Display for AdversaryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for AdversaryStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let lower = s.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("scripted(") {
            let inner = &s[s.len() - rest.len()..];
            let path = inner.strip_suffix(')').ok_or("missing `)`")?;
            return Ok(AdversaryStrategy::Scripted(PathBuf::from(path)));
        }
        if let Some(path) = lower.strip_prefix("scripted:") {
            return Ok(AdversaryStrategy::Scripted(PathBuf::from(&s[s.len() - path.len()..])));
        }
        match lower.as_str() {
            "passive" => Ok(AdversaryStrategy::Passive),
            "random" => Ok(AdversaryStrategy::Random),
            "equivocator" => Ok(AdversaryStrategy::Equivocator),
            "votesplitter" | "vote_splitter" => Ok(AdversaryStrategy::VoteSplitter),
            _ => Err(format!("unknown adversary `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimConfig {
    pub f: usize,
    pub byzantine: BTreeSet<ValidatorId>,
    pub seed: u64,
    pub max_steps: u64,
    pub drop_probability: Rational,
    pub duplicate_probability: Rational,
    pub adversary_strategy: AdversaryStrategy,
    /// Chance that a step fires a timer instead of delivering.
    pub timer_probability: Rational,
    /// Fire timers only when nothing is pending.
    pub quiescent_timers: bool,
    /// Chance that a step lets the adversary act, when it has something to say.
    pub inject_probability: Rational,
    pub mutation: Option<Mutation>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            f: 1,
            byzantine: BTreeSet::new(),
            seed: 0,
            max_steps: 2000,
            drop_probability: Rational::ZERO,
            duplicate_probability: Rational::ZERO,
            adversary_strategy: AdversaryStrategy::Passive,
            timer_probability: Rational { num: 1, den: 50 },
            quiescent_timers: false,
            inject_probability: Rational { num: 1, den: 5 },
            mutation: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 11] = [
    "f",
    "byzantine",
    "seed",
    "max_steps",
    "drop_probability",
    "duplicate_probability",
    "adversary_strategy",
    "timer_probability",
    "quiescent_timers",
    "inject_probability",
    "mutation",
];

impl SimConfig {
    pub fn n(&self) -> usize {
        validator_count(self.f)
    }

    pub fn honest(&self) -> Vec<ValidatorId> {
        (0..self.n() as u32)
            .map(ValidatorId)
            .filter(|v| !self.byzantine.contains(v))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.byzantine.len() > self.f {
            return Err(ConfigError::Invalid(format!(
                "{} byzantine validators exceed f = {}",
                self.byzantine.len(),
                self.f
            )));
        }
        if let Some(b) = self.byzantine.iter().find(|b| b.index() >= self.n()) {
            return Err(ConfigError::Invalid(format!("byzantine id {} is outside [0, {})", b.0, self.n())));
        }
        if self.f > 1000 {
            return Err(ConfigError::Invalid("f is unreasonably large".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::Value {
            key: key.to_string(),
            msg,
        };
        let value = value.trim();
        match key {
            "f" => self.f = value.parse().map_err(|e| bad(format!("{e}")))?,
            "byzantine" => self.byzantine = parse_id_set(value).map_err(bad)?,
            "seed" => self.seed = value.parse().map_err(|e| bad(format!("{e}")))?,
            "max_steps" => self.max_steps = value.parse().map_err(|e| bad(format!("{e}")))?,
            "drop_probability" => self.drop_probability = value.parse().map_err(bad)?,
            "duplicate_probability" => self.duplicate_probability = value.parse().map_err(bad)?,
            "adversary_strategy" => self.adversary_strategy = value.parse().map_err(bad)?,
            "timer_probability" => self.timer_probability = value.parse().map_err(bad)?,
            "quiescent_timers" => self.quiescent_timers = value.parse().map_err(|e| bad(format!("{e}")))?,
            "inject_probability" => self.inject_probability = value.parse().map_err(bad)?,
            "mutation" => {
                self.mutation = match value {
                    "" | "none" | "None" => None,
                    m => Some(m.parse().map_err(bad)?),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses the config file format. Blank lines and `#` comments are
    /// ignored; every other line must be `key = value` with a known key.
    pub fn parse(text: &str) -> Result<SimConfig, ConfigError> {
        let mut cfg = SimConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) && CONFIG_KEYS.contains(&k) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("duplicate key `{k}`"),
                });
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SimConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let mut cfg = SimConfig::parse(&text)?;
        // Script paths are relative to the config file.
        if let AdversaryStrategy::Scripted(p) = &cfg.adversary_strategy {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.adversary_strategy = AdversaryStrategy::Scripted(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    /// Renders the config back into the file format.
    pub fn render(&self) -> String {
        let ids: Vec<String> = self.byzantine.iter().map(|b| b.0.to_string()).collect();
        format!(
            "f = {}\nbyzantine = {}\nseed = {}\nmax_steps = {}\ndrop_probability = {}\nduplicate_probability = {}\n\
             adversary_strategy = {}\ntimer_probability = {}\nquiescent_timers = {}\ninject_probability = {}\nmutation = {}\n",
            self.f,
            ids.join(","),
            self.seed,
            self.max_steps,
            self.drop_probability,
            self.duplicate_probability,
            self.adversary_strategy,
            self.timer_probability,
            self.quiescent_timers,
            self.inject_probability,
            self.mutation.map(|m| m.name().to_string()).unwrap_or_else(|| "none".into()),
        )
    }
}

fn parse_id_set(s: &str) -> Result<BTreeSet<ValidatorId>, String> {
    let s = s.trim().trim_start_matches('{').trim_end_matches('}').trim();
    let s = s.trim_start_matches('[').trim_end_matches(']');
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map(ValidatorId).map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rationals() {
        assert_eq!("0.05".parse::<Rational>().unwrap(), Rational { num: 1, den: 20 });
        assert_eq!("1/4".parse::<Rational>().unwrap(), Rational { num: 1, den: 4 });
        assert_eq!("2/8".parse::<Rational>().unwrap(), Rational { num: 1, den: 4 });
        assert_eq!("1".parse::<Rational>().unwrap(), Rational::ONE);
        assert_eq!("0".parse::<Rational>().unwrap(), Rational::ZERO);
        assert!("1.5".parse::<Rational>().is_err());
        assert!("3/2".parse::<Rational>().is_err());
        assert!("1/0".parse::<Rational>().is_err());
        assert!("-0.1".parse::<Rational>().is_err());
    }

    #[test]
    fn parse_and_render_round_trip() {
        let text = "# base\nf = 1\nbyzantine = 3\nseed = 7\nmax_steps = 500\n\
                    drop_probability = 0.1\nadversary_strategy = Equivocator\nmutation = NoLockCheck\n";
        let cfg = SimConfig::parse(text).unwrap();
        assert_eq!(cfg.byzantine, BTreeSet::from([ValidatorId(3)]));
        assert_eq!(cfg.drop_probability, Rational { num: 1, den: 10 });
        assert_eq!(cfg.mutation, Some(Mutation::NoLockCheck));
        assert_eq!(SimConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn strict_parsing() {
        assert!(matches!(SimConfig::parse("colour = red"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(SimConfig::parse("f 1"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(SimConfig::parse("f = 1\nf = 2"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(SimConfig::parse("f = 1\nbyzantine = 2,3"), Err(ConfigError::Invalid(_))));
        assert!(matches!(SimConfig::parse("f = 1\nbyzantine = 4"), Err(ConfigError::Invalid(_))));
        assert!(matches!(SimConfig::parse("seed = x"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn adversary_names() {
        for a in AdversaryStrategy::GENERATED {
            assert_eq!(a.name().parse::<AdversaryStrategy>().unwrap(), a);
        }
        assert_eq!(
            "Scripted(dir/a.script)".parse::<AdversaryStrategy>().unwrap(),
            AdversaryStrategy::Scripted("dir/a.script".into())
        );
    }
}
