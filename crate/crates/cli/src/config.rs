//! Flat `key = value` scenario files.

use std::collections::BTreeSet;
use std::fmt;

use boxchain::boxchain::CapacitySpec;
use boxchain::sim::{AgentClass, Behavior, RewardSchedule, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Scenario,
    Attack,
}

/// Every recognised key with its default, in documentation order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("mode", "scenario", "scenario runs the event simulation, attack runs burst trials"),
    ("seed", "1", "run seed; --seed overrides it"),
    ("horizon_sec", "600", "simulated time"),
    ("tau_sec", "20", "box time limit"),
    ("capacity", "fixed:64", "box size law: fixed:M, uniform:L:U or pmf:v:p,..."),
    ("rate_guard", "0.25", "share of tau within which reaching M does not close a box"),
    ("fee", "1", "fee per issued transaction"),
    ("reward_primal", "1", "reward for approving parents"),
    ("reward_dual", "1", "reward for checking the previous box member"),
    ("reward_genesis", "10", "reward for a completed final confirmation"),
    ("reward_boxer", "5", "reward for closing a box"),
    ("reward_report", "3", "reward for reporting an illegal approval"),
    ("standing_threshold", "0", "minimum score for genesis eligibility"),
    ("honest_agents", "10", "number of honest agents"),
    ("honest_rate_per_min", "30", "total honest arrival rate"),
    ("lazy_agents", "0", "agents that reuse their first tip pair"),
    ("lazy_rate_per_min", "0", "total lazy arrival rate"),
    ("malicious_agents", "0", "double-spending agents (attacker addresses in attack mode)"),
    ("malicious_rate_per_min", "0", "total malicious background rate"),
    ("burst_size", "0", "transactions per malicious burst"),
    ("burst_at_sec", "", "comma-separated burst start times; default half the horizon"),
    ("forge_genesis", "false", "malicious geneses confirm without checking"),
    ("trials", "1000000", "attack mode: number of trials"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub mode: Mode,
    pub scenario: ScenarioConfig,
    pub trials: u64,
    /// Honest rate per second, also the attack-mode lambda.
    pub honest_rate: f64,
    pub honest_agents: u64,
    pub malicious_agents: u64,
}

struct Raw {
    entries: Vec<(String, String, usize)>,
}

impl Raw {
    fn get(&self, key: &str) -> (String, usize) {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.clone(), *l))
            .unwrap_or_else(|| {
                let default = KEYS.iter().find(|(k, _, _)| *k == key).expect("known key").1;
                (default.to_string(), 0)
            })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let (value, line) = self.get(key);
        value.parse().map_err(|_| ConfigError {
            line,
            message: format!("bad value {value:?} for {key}"),
        })
    }
}

pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    let known: BTreeSet<&str> = KEYS.iter().map(|(k, _, _)| *k).collect();
    let mut raw = Raw { entries: Vec::new() };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ConfigError { line: lineno, message };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected key = value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        if !known.contains(key) {
            return Err(err(format!("unknown key {key:?}")));
        }
        if raw.entries.iter().any(|(k, _, _)| k == key) {
            return Err(err(format!("duplicate key {key:?}")));
        }
        raw.entries.push((key.to_string(), value.to_string(), lineno));
    }

    let (mode_text, mode_line) = raw.get("mode");
    let mode = match mode_text.as_str() {
        "scenario" => Mode::Scenario,
        "attack" => Mode::Attack,
        other => {
            return Err(ConfigError {
                line: mode_line,
                message: format!("mode must be scenario or attack, not {other:?}"),
            })
        }
    };
    let horizon: f64 = raw.parse("horizon_sec")?;
    let tau: f64 = raw.parse("tau_sec")?;
    let (cap_text, cap_line) = raw.get("capacity");
    let capacity = CapacitySpec::parse(&cap_text).map_err(|e| ConfigError {
        line: cap_line,
        message: e.to_string(),
    })?;
    let per_sec = |key: &str| -> Result<f64, ConfigError> {
        let v: f64 = raw.parse(key)?;
        if v < 0.0 || !v.is_finite() {
            return Err(ConfigError {
                line: raw.get(key).1,
                message: format!("{key} must be a finite rate >= 0"),
            });
        }
        Ok(v / 60.0)
    };
    let honest_agents: u64 = raw.parse("honest_agents")?;
    let malicious_agents: u64 = raw.parse("malicious_agents")?;
    let honest_rate = per_sec("honest_rate_per_min")?;
    let classes = [
        AgentClass {
            behavior: Behavior::Honest,
            count: honest_agents,
            rate: honest_rate,
        },
        AgentClass {
            behavior: Behavior::Lazy,
            count: raw.parse("lazy_agents")?,
            rate: per_sec("lazy_rate_per_min")?,
        },
        AgentClass {
            behavior: Behavior::Malicious,
            count: malicious_agents,
            rate: per_sec("malicious_rate_per_min")?,
        },
    ];
    let whole = |e: boxchain::sim::SimError| ConfigError { line: 0, message: e.to_string() };
    let mut scenario = ScenarioConfig::from_classes(raw.parse("seed")?, horizon, tau, capacity, &classes)
        .map_err(whole)?;
    scenario.rate_guard = raw.parse("rate_guard")?;
    scenario.fee = raw.parse("fee")?;
    scenario.rewards = RewardSchedule {
        primal_validation: raw.parse("reward_primal")?,
        dual_validation: raw.parse("reward_dual")?,
        genesis_job: raw.parse("reward_genesis")?,
        boxer_job: raw.parse("reward_boxer")?,
        abnormal_report: raw.parse("reward_report")?,
    };
    scenario.standing_threshold = raw.parse("standing_threshold")?;
    scenario.burst_size = raw.parse("burst_size")?;
    scenario.forge_genesis = raw.parse("forge_genesis")?;
    let (bursts, burst_line) = raw.get("burst_at_sec");
    if !bursts.is_empty() {
        scenario.burst_times = bursts
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| ConfigError {
                line: burst_line,
                message: format!("bad burst times {bursts:?}"),
            })?;
    }
    let trials: u64 = raw.parse("trials")?;
    if mode == Mode::Scenario {
        scenario.validate().map_err(whole)?;
    } else if trials == 0 || malicious_agents == 0 || tau <= 0.0 {
        return Err(ConfigError {
            line: 0,
            message: "attack mode needs trials >= 1, malicious_agents >= 1 and tau_sec > 0".into(),
        });
    }
    Ok(ConfigFile {
        mode,
        scenario,
        trials,
        honest_rate,
        honest_agents,
        malicious_agents,
    })
}

/// Defaults table for `--help`.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (key = value, # comments):\n");
    for (key, default, doc) in KEYS {
        let default = if default.is_empty() { "-" } else { default };
        out.push_str(&format!("  {key:<24} [{default}] {doc}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_honest_setup() {
        let c = parse_config("").unwrap();
        assert_eq!(c.mode, Mode::Scenario);
        assert_eq!(c.scenario.tau, 20.0);
        assert_eq!(c.scenario.agents.len(), 10);
        assert!((c.honest_rate - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse_config("seed = 3\n\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.to_string().starts_with("config line 3: unknown key"));
        assert_eq!(parse_config("tau_sec = abc").unwrap_err().line, 1);
        assert_eq!(parse_config("seed=1\nseed=2").unwrap_err().line, 2);
        assert_eq!(parse_config("no equals sign").unwrap_err().line, 1);
        assert_eq!(parse_config("capacity = fixed:0").unwrap_err().line, 1);
        assert_eq!(parse_config("honest_agents = 0").unwrap_err().line, 0);
    }

    #[test]
    fn bursts_and_modes() {
        let c = parse_config(
            "mode = attack\nmalicious_agents = 3\ntau_sec = 10\nburst_at_sec = 5, 7.5\n",
        )
        .unwrap();
        assert_eq!(c.mode, Mode::Attack);
        assert_eq!(c.scenario.burst_times, vec![5.0, 7.5]);
        assert!(parse_config("mode = attack").is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let h = keys_help();
        assert!(KEYS.iter().all(|(k, _, _)| h.contains(k)));
    }
}
