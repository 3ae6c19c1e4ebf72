use clap::{Args, ValueEnum};
use mrc_adv::perturb::DeltaNormScope;
use mrc_adv::train::{GradAccum, Mode, TrainConfig};
use mrc_adv::Result;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AccumArg {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    PerExample,
    WholeBatch,
}

/// Training configuration flags. Unset flags keep the defaults of the
/// chosen `--mode` preset (baseline when no mode is given).
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Preset strengths: baseline, at, pqat or both. Explicit eps flags win.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub eps_delta: Option<f64>,
    #[arg(long)]
    pub eps_p: Option<f64>,
    #[arg(long)]
    pub eps_q: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Inner adversarial steps per batch.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eps_ball: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub grad_accum: Option<AccumArg>,
    #[arg(long, value_enum)]
    pub delta_norm_scope: Option<ScopeArg>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub max_offset: Option<usize>,
    #[arg(long)]
    pub max_answer_len: Option<usize>,
    #[arg(long)]
    pub class_correlation: Option<f64>,
    #[arg(long)]
    pub shift_identity: Option<f64>,
}

impl ConfigArgs {
    /// Builds and validates the configuration. A forced `mode` overrides
    /// `--mode`, and the eps flags then only tune the sources it switches on.
    pub fn resolve(&self, mode: Option<Mode>) -> Result<TrainConfig> {
        let preset = match (mode, &self.mode) {
            (Some(m), _) => m,
            (None, Some(s)) => s.parse()?,
            (None, None) => Mode::Baseline,
        };
        let mut c = TrainConfig::for_mode(preset);
        let forced = mode.is_some();
        if !forced || c.eps_delta > 0.0 {
            set(&mut c.eps_delta, self.eps_delta);
        }
        if !forced || c.eps_p > 0.0 {
            set(&mut c.eps_p, self.eps_p);
            set(&mut c.eps_q, self.eps_q);
        }
        set(&mut c.sigma, self.sigma);
        set(&mut c.k, self.k);
        c.alpha = self.alpha.or(c.alpha);
        c.eps_ball = self.eps_ball.or(c.eps_ball);
        set(&mut c.lr, self.lr);
        set(&mut c.beta1, self.beta1);
        set(&mut c.beta2, self.beta2);
        set(&mut c.adam_eps, self.adam_eps);
        set(&mut c.weight_decay, self.weight_decay);
        set(&mut c.warmup_ratio, self.warmup_ratio);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.epochs, self.epochs);
        set(&mut c.seed, self.seed);
        if let Some(a) = self.grad_accum {
            c.grad_accum = match a {
                AccumArg::Sum => GradAccum::Sum,
                AccumArg::Mean => GradAccum::Mean,
            };
        }
        if let Some(s) = self.delta_norm_scope {
            c.delta_norm_scope = match s {
                ScopeArg::PerExample => DeltaNormScope::PerExample,
                ScopeArg::WholeBatch => DeltaNormScope::WholeBatch,
            };
        }
        let m = &mut c.model;
        set(&mut m.dim, self.dim);
        m.hidden = self.hidden.unwrap_or(4 * m.dim);
        set(&mut m.layers, self.layers);
        set(&mut m.max_offset, self.max_offset);
        set(&mut m.max_answer_len, self.max_answer_len);
        set(&mut m.class_correlation, self.class_correlation);
        set(&mut m.shift_identity, self.shift_identity);
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}
