use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::write_atomic;
use crate::deq::SolverConfig;
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckConfig;
use crate::harness::{DatasetKind, PretrainConfig, Protocol, ProtocolConfig, ShiftKind, TaskSpec};
use crate::lion::PromptConfig;
use crate::robust_opt::{OptState, ThresholdRule, TrainConfig};

/// Every knob a command reads, stored as `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub tau: f64,
    pub eta: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub anderson_depth: usize,
    pub kappa: f64,
    pub layers: usize,
    pub protocol: Protocol,
    pub dataset: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub shift: Option<ShiftKind>,
    pub noise_sigma: f64,
    pub ir: Option<f64>,
    pub shots: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: Option<usize>,
    pub cases: usize,
    /// Hidden width of the pretrained backbone.
    pub hidden: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = TaskSpec::desk(0);
        Self {
            seed: 0,
            tau: 0.4,
            eta: 0.05,
            tol: 1e-8,
            max_iters: 500,
            anderson_depth: 5,
            kappa: 0.9,
            layers: 1,
            protocol: Protocol::Lion,
            dataset: desk.dataset,
            classes: desk.classes,
            dim: desk.dim,
            train_samples: desk.train_samples,
            test_samples: desk.test_samples,
            shift: desk.shift,
            noise_sigma: desk.noise_sigma,
            ir: None,
            shots: None,
            epochs: 200,
            batch_size: 32,
            patience: Some(20),
            cases: 20,
            hidden: 384,
            out: PathBuf::from("runs"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "tau",
    "eta",
    "tol",
    "max_iters",
    "anderson_depth",
    "kappa",
    "layers",
    "protocol",
    "dataset",
    "classes",
    "dim",
    "train_samples",
    "test_samples",
    "shift",
    "noise_sigma",
    "ir",
    "shots",
    "epochs",
    "batch_size",
    "patience",
    "cases",
    "hidden",
    "out",
];

fn bad(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, format!("cannot parse `{value}`")))
}

fn finite(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if !v.is_finite() {
        return Err(bad(key, "must be finite"));
    }
    Ok(v)
}

fn optional<T>(key: &str, value: &str, parse: impl Fn(&str, &str) -> Result<T>) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn positive(key: &str, value: &str) -> Result<usize> {
    let v: usize = num(key, value)?;
    if v == 0 {
        return Err(bad(key, "must be >= 1"));
    }
    Ok(v)
}

fn show_opt<T: Debug>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| format!("{x:?}"))
}

impl RunConfig {
    /// Sets one key from its text form, validating the value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = num(key, value)?,
            "tau" => {
                let t = finite(key, value)?;
                if !(t > 0.0 && t < 1.0) {
                    return Err(bad(key, format!("{t} must lie in (0, 1)")));
                }
                self.tau = t;
            }
            "eta" => {
                let e = finite(key, value)?;
                if e < 0.0 {
                    return Err(bad(key, "must be >= 0"));
                }
                self.eta = e;
            }
            "tol" => {
                let t = finite(key, value)?;
                if t <= 0.0 {
                    return Err(bad(key, "must be > 0"));
                }
                self.tol = t;
            }
            "max_iters" => self.max_iters = positive(key, value)?,
            "anderson_depth" => self.anderson_depth = num(key, value)?,
            "kappa" => {
                let k = finite(key, value)?;
                if !(k > 0.0 && k < 1.0) {
                    return Err(bad(key, format!("{k} must lie in (0, 1)")));
                }
                self.kappa = k;
            }
            "layers" => self.layers = positive(key, value)?,
            "protocol" => self.protocol = value.parse().map_err(|e: Error| bad(key, e.to_string()))?,
            "dataset" => self.dataset = value.parse().map_err(|e: Error| bad(key, e.to_string()))?,
            "classes" => {
                let c: usize = num(key, value)?;
                if c < 2 {
                    return Err(bad(key, "must be >= 2"));
                }
                self.classes = c;
            }
            "dim" => self.dim = positive(key, value)?,
            "train_samples" => self.train_samples = positive(key, value)?,
            "test_samples" => self.test_samples = positive(key, value)?,
            "shift" => {
                self.shift = optional(key, value, |k, v| {
                    ShiftKind::parse(v).ok_or_else(|| bad(k, format!("unknown shift `{v}`")))
                })?
            }
            "noise_sigma" => {
                let s = finite(key, value)?;
                if s < 0.0 {
                    return Err(bad(key, "must be >= 0"));
                }
                self.noise_sigma = s;
            }
            "ir" => {
                self.ir = optional(key, value, |k, v| {
                    let ir = finite(k, v)?;
                    if ir < 1.0 {
                        return Err(bad(k, "must be >= 1"));
                    }
                    Ok(ir)
                })?
            }
            "shots" => self.shots = optional(key, value, positive)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = positive(key, value)?,
            "patience" => self.patience = optional(key, value, positive)?,
            "cases" => self.cases = positive(key, value)?,
            "hidden" => self.hidden = positive(key, value)?,
            "out" => {
                if value.is_empty() {
                    return Err(bad(key, "must not be empty"));
                }
                self.out = PathBuf::from(value);
            }
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Reads `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(line, "expected `key = value`"))?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let out = self.out.to_string_lossy();
        let pairs: [(&str, String); 24] = [
            ("seed", self.seed.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("eta", format!("{:?}", self.eta)),
            ("tol", format!("{:?}", self.tol)),
            ("max_iters", self.max_iters.to_string()),
            ("anderson_depth", self.anderson_depth.to_string()),
            ("kappa", format!("{:?}", self.kappa)),
            ("layers", self.layers.to_string()),
            ("protocol", self.protocol.name().to_string()),
            ("dataset", self.dataset.name().to_string()),
            ("classes", self.classes.to_string()),
            ("dim", self.dim.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("test_samples", self.test_samples.to_string()),
            (
                "shift",
                self.shift.map_or_else(|| "none".into(), |s| s.name().to_string()),
            ),
            ("noise_sigma", format!("{:?}", self.noise_sigma)),
            ("ir", show_opt(&self.ir)),
            ("shots", show_opt(&self.shots)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patience", show_opt(&self.patience)),
            ("cases", self.cases.to_string()),
            ("hidden", self.hidden.to_string()),
            ("out", out.into_owned()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.serialize().as_bytes())
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            tol: self.tol,
            max_iters: self.max_iters,
            anderson_depth: self.anderson_depth,
            ..SolverConfig::default()
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            dataset: self.dataset,
            classes: self.classes,
            dim: self.dim,
            train_samples: self.train_samples,
            test_samples: self.test_samples,
            shift: self.shift,
            noise_sigma: self.noise_sigma,
            imbalance_ratio: self.ir,
            shots: self.shots,
            seed: self.seed,
            ..TaskSpec::desk(self.seed)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            patience: self.patience,
        }
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            train: self.train_config(),
            eta: self.eta,
            opt: OptState {
                eta: self.eta,
                threshold: ThresholdRule::Quantile(self.tau),
                ..OptState::default()
            },
            prompt: PromptConfig {
                classes: self.classes,
                layers: self.layers,
                kappa: self.kappa,
                solver: self.solver(),
                ..PromptConfig::default()
            },
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            hidden: vec![self.hidden],
            ..PretrainConfig::default()
        }
    }

    pub fn gradcheck_config(&self) -> GradcheckConfig {
        GradcheckConfig {
            cases: self.cases,
            seed: self.seed,
            kappa: self.kappa,
            solver: self.solver(),
            ..GradcheckConfig::default()
        }
    }
}
