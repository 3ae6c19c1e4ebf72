use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::perturb::DeltaNormScope;

/// Which perturbation sources a configuration switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    At,
    Pqat,
    Both,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::At, Mode::Pqat, Mode::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::At => "at",
            Mode::Pqat => "pqat",
            Mode::Both => "both",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected baseline, at, pqat or both")))
    }
}

/// How gradients of the `K` inner steps are combined before the optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradAccum {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eps_delta: f64,
    pub eps_p: f64,
    pub eps_q: f64,
    pub sigma: f64,
    pub k: usize,
    /// Classic projected steps on the local perturbation instead of the
    /// norm-scaled step; `alpha` and `eps_ball` go together.
    pub alpha: Option<f64>,
    pub eps_ball: Option<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_accum: GradAccum,
    pub delta_norm_scope: DeltaNormScope,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eps_delta: 0.0,
            eps_p: 0.0,
            eps_q: 0.0,
            sigma: 1e-2,
            k: 2,
            alpha: None,
            eps_ball: None,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            warmup_ratio: 0.1,
            batch_size: 32,
            epochs: 3,
            seed: 0,
            grad_accum: GradAccum::Sum,
            delta_norm_scope: DeltaNormScope::PerExample,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Default strengths for a mode: `1e-2` for the local perturbation,
    /// `2e-2` for both virtual matrices.
    pub fn for_mode(mode: Mode) -> Self {
        let mut c = TrainConfig::default();
        let (d, pq) = match mode {
            Mode::Baseline => (0.0, 0.0),
            Mode::At => (1e-2, 0.0),
            Mode::Pqat => (0.0, 2e-2),
            Mode::Both => (1e-2, 2e-2),
        };
        c.eps_delta = d;
        c.eps_p = pq;
        c.eps_q = pq;
        c
    }

    pub fn mode(&self) -> Mode {
        let pq = self.eps_p > 0.0 || self.eps_q > 0.0;
        match (self.eps_delta > 0.0, pq) {
            (false, false) => Mode::Baseline,
            (true, false) => Mode::At,
            (false, true) => Mode::Pqat,
            (true, true) => Mode::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("eps_delta", self.eps_delta),
            ("eps_p", self.eps_p),
            ("eps_q", self.eps_q),
            ("sigma", self.sigma),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        match (self.alpha, self.eps_ball) {
            (None, None) => {}
            (Some(a), Some(e)) if a > 0.0 && e > 0.0 => {}
            (Some(_), Some(_)) => return Err(Error::Config("alpha and eps_ball must be positive".into())),
            _ => return Err(Error::Config("alpha and eps_ball must be given together".into())),
        }
        self.model.validate()
    }
}
