use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Moment buffers for Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            m: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam step with bias correction plus decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn adam_update(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    adam: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != adam.m.len() || grads.len() != adam.m.len() {
        return Err(Error::Dimension(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            adam.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != adam.m[i].len() || g.len() != adam.m[i].len() {
            return Err(Error::Dimension(format!(
                "adam: parameter {i} has {} entries, gradient {}, buffer {}",
                p.numel(),
                g.len(),
                adam.m[i].len()
            )));
        }
    }
    adam.step += 1;
    let (b1, b2) = (adam.beta1, adam.beta2);
    let c1 = 1.0 - b1.powi(adam.step as i32);
    let c2 = 1.0 - b2.powi(adam.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
        for (j, x) in p.values_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= lr * (m_hat / (v_hat.sqrt() + adam.eps) + weight_decay * *x);
        }
    }
    Ok(())
}
