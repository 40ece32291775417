//! Experiment configuration: built-in defaults, the `key = value` config
//! file format with `[section]` headers, CLI overrides, and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use f2dc_core::eval::FeatureProtocol;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    F2dc,
    FedAvg,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f2dc" => Ok(Mode::F2dc),
            "fedavg" => Ok(Mode::FedAvg),
            other => Err(Error::Config(format!("run.mode: unknown mode `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::F2dc => "f2dc",
            Mode::FedAvg => "fedavg",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Config(format!("optim.precision: unknown precision `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

/// Everything a run needs. Field defaults mirror the published training
/// recipe at desk scale; see `ExperimentConfig::default()`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Communication rounds R.
    pub rounds: usize,
    pub out_dir: PathBuf,

    /// Clients K.
    pub clients: usize,
    /// Domains Q.
    pub domains: usize,
    /// Classes.
    pub classes: usize,
    /// Local epochs E.
    pub epochs: usize,
    /// Fraction of clients selected per round, in (0, 1].
    pub participation: f64,
    /// Run selected clients on the rayon pool.
    pub parallel: bool,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub precision: Precision,

    /// Mask temperature.
    pub sigma: f64,
    /// Separability temperature.
    pub tau: f64,
    /// Decoupler loss weight.
    pub lambda1: f64,
    /// Corrector loss weight.
    pub lambda2: f64,

    /// Size term weight in the aggregation sigmoid.
    pub alpha: f64,
    /// Discrepancy term weight in the aggregation sigmoid.
    pub beta: f64,

    pub dfd_on: bool,
    pub dfc_on: bool,
    pub daa_on: bool,

    pub train_per_client: usize,
    pub test_per_domain: usize,
    pub noise: f64,

    pub protocol: FeatureProtocol,
    pub spectrum: bool,
    /// Write measured wall-clock into the CSV `seconds` column. Off by
    /// default so reruns of one config are byte-identical; measured timing
    /// is always available in the JSON summary.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::F2dc,
            rounds: 30,
            out_dir: PathBuf::from("runs/exp"),
            clients: 8,
            domains: 4,
            classes: 4,
            epochs: 2,
            participation: 1.0,
            parallel: true,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 64,
            precision: Precision::F64,
            sigma: 0.1,
            tau: 0.06,
            lambda1: 0.8,
            lambda2: 1.0,
            alpha: 1.0,
            beta: 0.4,
            dfd_on: true,
            dfc_on: true,
            daa_on: true,
            train_per_client: 200,
            test_per_domain: 200,
            noise: 0.02,
            protocol: FeatureProtocol::Plain,
            spectrum: false,
            timing: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{field}: cannot parse `{value}`")))
}

fn parse_switch(field: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!("{field}: expected on/off, got `{other}`"))),
    }
}

impl ExperimentConfig {
    /// Applies one `section.key = value` assignment.
    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let field = format!("{section}.{key}");
        match (section, key) {
            ("run", "seed") => self.seed = parse_num(&field, value)?,
            ("run", "mode") => self.mode = Mode::parse(value)?,
            ("run", "rounds") => self.rounds = parse_num(&field, value)?,
            ("run", "out") => self.out_dir = PathBuf::from(value),
            ("federation", "clients") => self.clients = parse_num(&field, value)?,
            ("federation", "domains") => self.domains = parse_num(&field, value)?,
            ("federation", "classes") => self.classes = parse_num(&field, value)?,
            ("federation", "epochs") => self.epochs = parse_num(&field, value)?,
            ("federation", "participation") => self.participation = parse_num(&field, value)?,
            ("federation", "parallel") => self.parallel = parse_switch(&field, value)?,
            ("optim", "lr") => self.lr = parse_num(&field, value)?,
            ("optim", "momentum") => self.momentum = parse_num(&field, value)?,
            ("optim", "weight_decay") => self.weight_decay = parse_num(&field, value)?,
            ("optim", "batch_size") => self.batch_size = parse_num(&field, value)?,
            ("optim", "precision") => self.precision = Precision::parse(value)?,
            ("dfd", "sigma") => self.sigma = parse_num(&field, value)?,
            ("dfd", "tau") => self.tau = parse_num(&field, value)?,
            ("dfc", "lambda1") => self.lambda1 = parse_num(&field, value)?,
            ("dfc", "lambda2") => self.lambda2 = parse_num(&field, value)?,
            ("aggregation", "alpha") => self.alpha = parse_num(&field, value)?,
            ("aggregation", "beta") => self.beta = parse_num(&field, value)?,
            ("ablation", "dfd") => self.dfd_on = parse_switch(&field, value)?,
            ("ablation", "dfc") => self.dfc_on = parse_switch(&field, value)?,
            ("ablation", "daa") => self.daa_on = parse_switch(&field, value)?,
            ("data", "train_per_client") => self.train_per_client = parse_num(&field, value)?,
            ("data", "test_per_domain") => self.test_per_domain = parse_num(&field, value)?,
            ("data", "noise") => self.noise = parse_num(&field, value)?,
            ("report", "protocol") => {
                self.protocol = FeatureProtocol::parse(value)
                    .map_err(|e| Error::Config(format!("{field}: {e}")))?
            }
            ("report", "spectrum") => self.spectrum = parse_switch(&field, value)?,
            ("report", "timing") => self.timing = parse_switch(&field, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{field}`"))),
        }
        Ok(())
    }

    /// Parses the plain-text config format: `[section]` headers, one
    /// `key = value` per line, `#` comments.
    pub fn from_str_contents(contents: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (lineno, raw) in contents.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: assignment before any [section]",
                    lineno + 1
                )));
            }
            cfg.set(&section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        Self::from_str_contents(&contents)
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(field: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{field}: must be positive, got {v}")))
            }
        }
        positive("optim.lr", self.lr)?;
        positive("dfd.sigma", self.sigma)?;
        positive("dfd.tau", self.tau)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "optim.momentum: must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config("optim.weight_decay: must be nonnegative".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("dfc.lambda1/lambda2: must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("optim.batch_size: must be positive".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "federation.participation: must lie in (0, 1], got {}",
                self.participation
            )));
        }
        if self.clients < self.domains {
            return Err(Error::Config(format!(
                "federation.clients: need at least one client per domain ({} < {})",
                self.clients, self.domains
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("federation.classes: need at least two classes".into()));
        }
        if self.dfc_on && !self.dfd_on {
            return Err(Error::Config(
                "ablation.dfc: the corrector path requires the decoupler path (ablation.dfd)"
                    .into(),
            ));
        }
        if self.train_per_client == 0 || self.test_per_domain == 0 {
            return Err(Error::Config("data.train_per_client: sample counts must be positive".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("data.noise: must be nonnegative".into()));
        }
        Ok(())
    }

    /// Effective path switches: `fedavg` mode turns everything off.
    pub fn switches(&self) -> f2dc_core::training::PathSwitches {
        match self.mode {
            Mode::FedAvg => f2dc_core::training::PathSwitches::ALL_OFF,
            Mode::F2dc => f2dc_core::training::PathSwitches {
                dfd: self.dfd_on,
                dfc: self.dfc_on,
                daa: self.daa_on,
            },
        }
    }

    /// Configuration echo for the JSON summary.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "run": {
                "seed": self.seed,
                "mode": self.mode.as_str(),
                "rounds": self.rounds,
                "out": self.out_dir.display().to_string(),
            },
            "federation": {
                "clients": self.clients,
                "domains": self.domains,
                "classes": self.classes,
                "epochs": self.epochs,
                "participation": self.participation,
                "parallel": self.parallel,
            },
            "optim": {
                "lr": self.lr,
                "momentum": self.momentum,
                "weight_decay": self.weight_decay,
                "batch_size": self.batch_size,
                "precision": self.precision.as_str(),
            },
            "dfd": { "sigma": self.sigma, "tau": self.tau },
            "dfc": { "lambda1": self.lambda1, "lambda2": self.lambda2 },
            "aggregation": { "alpha": self.alpha, "beta": self.beta },
            "ablation": {
                "dfd": self.dfd_on,
                "dfc": self.dfc_on,
                "daa": self.daa_on,
            },
            "data": {
                "train_per_client": self.train_per_client,
                "test_per_domain": self.test_per_domain,
                "noise": self.noise,
            },
            "report": {
                "protocol": self.protocol.as_str(),
                "spectrum": self.spectrum,
                "timing": self.timing,
            },
        })
    }

    /// The default config rendered in the file format, with every key listed.
    pub fn example_file(&self) -> String {
        format!(
            "# experiment configuration\n\
             [run]\n\
             seed = {}\n\
             mode = {}\n\
             rounds = {}\n\
             out = {}\n\
             \n\
             [federation]\n\
             clients = {}\n\
             domains = {}\n\
             classes = {}\n\
             epochs = {}\n\
             participation = {}\n\
             parallel = {}\n\
             \n\
             [optim]\n\
             lr = {}\n\
             momentum = {}\n\
             weight_decay = {}\n\
             batch_size = {}\n\
             precision = {}\n\
             \n\
             [dfd]\n\
             sigma = {}\n\
             tau = {}\n\
             \n\
             [dfc]\n\
             lambda1 = {}\n\
             lambda2 = {}\n\
             \n\
             [aggregation]\n\
             alpha = {}\n\
             beta = {}\n\
             \n\
             [ablation]\n\
             dfd = {}\n\
             dfc = {}\n\
             daa = {}\n\
             \n\
             [data]\n\
             train_per_client = {}\n\
             test_per_domain = {}\n\
             noise = {}\n\
             \n\
             [report]\n\
             protocol = {}\n\
             spectrum = {}\n\
             timing = {}\n",
            self.seed,
            self.mode,
            self.rounds,
            self.out_dir.display(),
            self.clients,
            self.domains,
            self.classes,
            self.epochs,
            self.participation,
            if self.parallel { "on" } else { "off" },
            self.lr,
            self.momentum,
            self.weight_decay,
            self.batch_size,
            self.precision.as_str(),
            self.sigma,
            self.tau,
            self.lambda1,
            self.lambda2,
            self.alpha,
            self.beta,
            if self.dfd_on { "on" } else { "off" },
            if self.dfc_on { "on" } else { "off" },
            if self.daa_on { "on" } else { "off" },
            self.train_per_client,
            self.test_per_domain,
            self.noise,
            self.protocol.as_str(),
            if self.spectrum { "on" } else { "off" },
            if self.timing { "on" } else { "off" },
        )
    }
}
