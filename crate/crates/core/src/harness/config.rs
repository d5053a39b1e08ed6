use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::agent_daif::DaifHyper;
use crate::agent_dqn::DqnHyper;
use crate::error::ConfigError;
use crate::pretrain::PretrainConfig;
use crate::replay::DEFAULT_CAPACITY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AgentKind {
    Daif,
    Dqn,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Mdp,
    Pomdp,
}

impl FromStr for AgentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "daif" => Ok(AgentKind::Daif),
            "dqn" => Ok(AgentKind::Dqn),
            "random" => Ok(AgentKind::Random),
            _ => Err(format!("unknown agent `{s}` (expected daif, dqn or random)")),
        }
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mdp" => Ok(Scenario::Mdp),
            "pomdp" => Ok(Scenario::Pomdp),
            _ => Err(format!("unknown scenario `{s}` (expected mdp or pomdp)")),
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::Daif => "daif",
            AgentKind::Dqn => "dqn",
            AgentKind::Random => "random",
        })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Mdp => "mdp",
            Scenario::Pomdp => "pomdp",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub agent: AgentKind,
    pub scenario: Scenario,
    pub runs: usize,
    pub episodes: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Runs executed concurrently.
    pub jobs: usize,
    /// Frame dataset cache; the pre-trained VAE is cached beside it.
    pub pretrain_cache: Option<PathBuf>,
    pub buffer_capacity: usize,
    /// Write every n-th learn step to the telemetry CSV; 0 disables it.
    pub telemetry_interval: u64,
    /// Report progress on stderr every n episodes; 0 is silent.
    pub log_interval: usize,
    pub checkpoints: bool,
    pub daif: DaifHyper,
    pub dqn: DqnHyper,
    pub pretrain: PretrainConfig,
}

impl RunConfig {
    /// Defaults for a scenario.
    pub fn new(agent: AgentKind, scenario: Scenario) -> Self {
        let (daif, dqn) = match scenario {
            Scenario::Mdp => (DaifHyper::mdp(), DqnHyper::mdp()),
            Scenario::Pomdp => (DaifHyper::pomdp(), DqnHyper::pomdp()),
        };
        RunConfig {
            agent,
            scenario,
            runs: 10,
            episodes: 5000,
            seed: 0,
            out: PathBuf::from("out"),
            jobs: 1,
            pretrain_cache: None,
            buffer_capacity: DEFAULT_CAPACITY,
            telemetry_interval: 1,
            log_interval: 0,
            checkpoints: true,
            daif,
            dqn,
            pretrain: PretrainConfig::default(),
        }
    }

    /// Builds a configuration from `key = value` entries applied in order
    /// over the defaults of the scenario they name.
    pub fn from_entries<K: AsRef<str>, V: AsRef<str>>(entries: &[(K, V)]) -> Result<Self, ConfigError> {
        let mut agent = AgentKind::Daif;
        let mut scenario = Scenario::Mdp;
        for (k, v) in entries {
            match k.as_ref() {
                "agent" => agent = parse("agent", v.as_ref())?,
                "scenario" => scenario = parse("scenario", v.as_ref())?,
                _ => {}
            }
        }
        let mut cfg = RunConfig::new(agent, scenario);
        for (k, v) in entries {
            cfg.set(k.as_ref(), v.as_ref())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "agent" => self.agent = parse(key, v)?,
            "scenario" => self.scenario = parse(key, v)?,
            "runs" => self.runs = parse(key, v)?,
            "episodes" => self.episodes = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "jobs" => self.jobs = parse(key, v)?,
            "pretrain_cache" => self.pretrain_cache = Some(PathBuf::from(v)),
            "buffer_capacity" => self.buffer_capacity = parse(key, v)?,
            "telemetry_interval" => self.telemetry_interval = parse(key, v)?,
            "log_interval" => self.log_interval = parse(key, v)?,
            "checkpoints" => self.checkpoints = parse(key, v)?,
            "daif.gamma" => self.daif.gamma = parse(key, v)?,
            "daif.beta" => self.daif.beta = parse(key, v)?,
            "daif.alpha" => self.daif.alpha = parse(key, v)?,
            "daif.batch" => self.daif.batch = parse(key, v)?,
            "daif.freeze_period" => self.daif.freeze_period = parse(key, v)?,
            "daif.lr_transition" => self.daif.lr_transition = parse(key, v)?,
            "daif.lr_policy" => self.daif.lr_policy = parse(key, v)?,
            "daif.lr_efe" => self.daif.lr_efe = parse(key, v)?,
            "daif.lr_vae" => self.daif.lr_vae = parse(key, v)?,
            "daif.train_vae" => self.daif.train_vae = parse(key, v)?,
            "dqn.gamma" => self.dqn.gamma_q = parse(key, v)?,
            "dqn.epsilon_start" => self.dqn.epsilon_start = parse(key, v)?,
            "dqn.epsilon_end" => self.dqn.epsilon_end = parse(key, v)?,
            "dqn.epsilon_decay_fraction" => self.dqn.epsilon_decay_fraction = parse(key, v)?,
            "dqn.batch" => self.dqn.batch = parse(key, v)?,
            "dqn.freeze_period" => self.dqn.freeze_period = parse(key, v)?,
            "dqn.lr" => self.dqn.lr = parse(key, v)?,
            "pretrain.episodes" => self.pretrain.episodes = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.validation_fraction" => self.pretrain.validation_fraction = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.runs == 0 || self.episodes == 0 {
            return Err(ConfigError::Invalid("runs and episodes must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(ConfigError::Invalid("jobs must be at least 1".into()));
        }
        if self.buffer_capacity == 0 {
            return Err(ConfigError::Invalid("buffer capacity must be positive".into()));
        }
        self.daif.validate().map_err(ConfigError::Invalid)?;
        self.dqn.validate().map_err(ConfigError::Invalid)?;
        self.pretrain.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    /// Stem shared by the output files of this agent and scenario.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.agent, self.scenario)
    }

    pub fn episodes_path(&self) -> PathBuf {
        self.out.join(format!("{}.csv", self.stem()))
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue { key: key.to_string(), message: e.to_string() })
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse { line: i + 1, message: "expected `key = value`".into() })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Parse { line: i + 1, message: "empty key".into() });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
