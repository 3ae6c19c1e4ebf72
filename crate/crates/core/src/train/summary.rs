use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Mode;
use super::eval::EvalMetrics;
use crate::error::{Error, Result};

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

/// `sqrt((a.std^2 + b.std^2) / 2)`.
pub fn pooled_std(a: Stat, b: Stat) -> f64 {
    ((a.std * a.std + b.std * b.std) / 2.0).sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub em: Option<Stat>,
    pub f1: Option<Stat>,
    pub acc: Option<Stat>,
}

impl MetricStats {
    pub fn of(ms: &[EvalMetrics]) -> Self {
        let pick = |f: fn(&EvalMetrics) -> Option<f64>| -> Option<Stat> {
            let xs: Option<Vec<f64>> = ms.iter().map(f).collect();
            xs.and_then(|xs| Stat::of(&xs))
        };
        MetricStats {
            em: pick(|m| m.em),
            f1: pick(|m| m.f1),
            acc: pick(|m| m.acc),
        }
    }

    /// EM for span tasks, accuracy for choice tasks.
    pub fn headline(&self) -> Option<Stat> {
        self.em.or(self.acc)
    }
}

/// Final metrics of one (mode, seed) run, or why it failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub clean: Option<EvalMetrics>,
    pub distractor: Option<EvalMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub runs: Vec<RunResult>,
    /// Over successful runs only.
    pub clean: MetricStats,
    pub distractor: MetricStats,
}

impl ModeSummary {
    pub fn new(mode: Mode, runs: Vec<RunResult>) -> Self {
        let clean: Vec<_> = runs.iter().filter_map(|r| r.clean).collect();
        let distractor: Vec<_> = runs.iter().filter_map(|r| r.distractor).collect();
        ModeSummary {
            mode,
            clean: MetricStats::of(&clean),
            distractor: MetricStats::of(&distractor),
            runs,
        }
    }
}

/// Cross-seed comparison of training modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub modes: Vec<ModeSummary>,
    /// Set when any run failed; statistics then cover the remaining runs.
    pub partial: bool,
}

impl Summary {
    pub fn new(seeds: Vec<u64>, modes: Vec<ModeSummary>) -> Self {
        let partial = modes.iter().flat_map(|m| &m.runs).any(|r| r.error.is_some());
        Summary { seeds, modes, partial }
    }

    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Text table: one row per mode, mean (std) per metric.
    pub fn table(&self) -> String {
        let cell = |s: Option<Stat>| s.map_or("-".to_string(), |s| format!("{:.4} ({:.4})", s.mean, s.std));
        let mut out = format!(
            "{:<9} {:>17} {:>17} {:>17} {:>17} {:>17} {:>17}\n",
            "mode", "em", "f1", "acc", "dis em", "dis f1", "dis acc"
        );
        for m in &self.modes {
            out += &format!(
                "{:<9} {:>17} {:>17} {:>17} {:>17} {:>17} {:>17}\n",
                m.mode.as_str(),
                cell(m.clean.em),
                cell(m.clean.f1),
                cell(m.clean.acc),
                cell(m.distractor.em),
                cell(m.distractor.f1),
                cell(m.distractor.acc),
            );
        }
        let failed = self.modes.iter().flat_map(|m| &m.runs).filter(|r| r.error.is_some()).count();
        if failed > 0 {
            out += &format!("partial results: {failed} run(s) failed\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(em: f64) -> EvalMetrics {
        EvalMetrics {
            em: Some(em),
            f1: Some(em),
            acc: None,
            n: 10,
        }
    }

    #[test]
    fn population_std() {
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(Stat::of(&[0.5, 0.5]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn failed_runs_mark_partial() {
        let ok = RunResult {
            seed: 0,
            clean: Some(span(0.5)),
            distractor: None,
            error: None,
        };
        let bad = RunResult {
            seed: 1,
            clean: None,
            distractor: None,
            error: Some("boom".into()),
        };
        let s = Summary::new(vec![0, 1], vec![ModeSummary::new(Mode::At, vec![ok, bad])]);
        assert!(s.partial);
        assert_eq!(s.modes[0].clean.em.unwrap().mean, 0.5);
        assert!(s.modes[0].clean.acc.is_none());
        assert!(s.table().contains("1 run(s) failed"));
    }
}
