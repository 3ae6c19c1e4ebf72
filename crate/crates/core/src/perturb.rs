//! Embedding-space perturbations.
//!
//! Holds the word embedding table `E`, the virtual passage and question
//! matrices `P` and `Q`, and the per-batch local perturbation `delta`. The
//! adversarial input of a position holding token `x` is
//!
//! ```text
//! z = E[x] + P[x]·[passage] + Q[x]·[question or option] + delta[pos]
//! ```
//!
//! `P` and `Q` only ever contribute perturbations, never base vectors, and
//! are not part of any checkpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{l2_norm, mean_std, Graph, Tensor, Var};
use crate::data::Batch;
use crate::error::{Error, Result};

/// Gradients with an L2 norm below this are treated as zero: the
/// normalized step is skipped.
pub const ZERO_GRAD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Passage,
    Question,
    Option,
    Special,
}

impl Role {
    pub fn takes_passage_perturbation(self) -> bool {
        self == Role::Passage
    }

    /// Options share the question matrix.
    pub fn takes_question_perturbation(self) -> bool {
        matches!(self, Role::Question | Role::Option)
    }

    /// Index into the role-type embedding table.
    pub fn type_id(self) -> usize {
        match self {
            Role::Special => 0,
            Role::Passage => 1,
            Role::Question => 2,
            Role::Option => 3,
        }
    }
}

/// One role per position of a sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoleMask(Vec<Role>);

impl RoleMask {
    pub fn new(roles: Vec<Role>) -> Self {
        RoleMask(roles)
    }

    pub fn roles(&self) -> &[Role] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `E` plus the virtual matrices `P` and `Q`, all `V x D`.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub table: Tensor,
    pub passage: Tensor,
    pub question: Tensor,
}

impl EmbeddingSet {
    /// Wraps a word embedding table and draws `P`, `Q` from `N(0, sigma^2)`.
    pub fn new(table: Tensor, sigma: f64, seed: u64) -> Result<Self> {
        let (v, d) = table.dims2()?;
        let (passage, question) = init_virtual(v, d, sigma, seed)?;
        Ok(EmbeddingSet {
            table,
            passage,
            question,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// `‖E[i]‖₂` for every vocabulary row.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.vocab_size()).map(|i| l2_norm(self.table.row(i))).collect()
    }
}

/// How the norm of the clean input is scoped in the local perturbation step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaNormScope {
    #[default]
    PerExample,
    WholeBatch,
}

/// Local perturbation for one batch together with the strengths that
/// govern all three perturbation sources. A strength of zero disables its
/// source: `delta` stays zero, or the virtual matrix is left out of the
/// composed input.
#[derive(Clone, Debug)]
pub struct PerturbationState {
    /// `S x T x D` (sequences x padded length x width).
    pub delta: Tensor,
    pub sigma: f64,
    pub eps_delta: f64,
    pub eps_p: f64,
    pub eps_q: f64,
}

impl PerturbationState {
    /// Zero perturbation sized for `batch`.
    pub fn zeros(batch: &Batch, dim: usize) -> Self {
        PerturbationState {
            delta: Tensor::zeros(&[batch.n_sequences(), batch.max_len, dim]),
            sigma: 0.0,
            eps_delta: 0.0,
            eps_p: 0.0,
            eps_q: 0.0,
        }
    }

    pub fn uses_passage(&self) -> bool {
        self.eps_p > 0.0
    }

    pub fn uses_question(&self) -> bool {
        self.eps_q > 0.0
    }
}

/// Draws `P` and `Q` independently from `N(0, sigma^2)`; `P` first.
pub fn init_virtual(v: usize, d: usize, sigma: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    if v == 0 || d == 0 {
        return Err(Error::Config(format!("virtual matrices need V, D >= 1, got {v} x {d}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be non-negative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut draw = || -> Tensor {
        let vals = (0..v * d).map(|_| normal.sample(&mut rng)).collect();
        Tensor::new(&[v, d], vals).expect("shape matches")
    };
    let p = draw();
    let q = draw();
    Ok((p, q))
}

/// Result of [`renormalize`].
#[derive(Clone, Debug)]
pub struct Renormalized {
    pub matrix: Tensor,
    /// The input had zero spread and was replaced by zeros.
    pub degenerate: bool,
}

/// `(M - mean(M)) / std(M) * sigma` with scalar population statistics over
/// all entries. A constant matrix maps to zeros with a warning.
pub fn renormalize(m: &Tensor, sigma: f64) -> Result<Renormalized> {
    if m.numel() < 2 {
        return Err(Error::Contract("renormalize needs at least 2 entries".into()));
    }
    let (mean, std) = m.mean_std();
    if std == 0.0 || !std.is_finite() {
        log::warn!("renormalize: degenerate matrix (std {std}), resetting to zero");
        return Ok(Renormalized {
            matrix: Tensor::zeros(m.shape()),
            degenerate: true,
        });
    }
    let scale = sigma / std;
    let vals = m.values().iter().map(|x| (x - mean) * scale).collect();
    Ok(Renormalized {
        matrix: Tensor::new(m.shape(), vals)?,
        degenerate: false,
    })
}

/// Entries uniform on `(-sigma, sigma)` scaled by `1/sqrt(D)`, `D` being the
/// last extent of `shape`.
pub fn init_delta(shape: &[usize], sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be non-negative, got {sigma}")));
    }
    let mut t = Tensor::zeros(shape);
    if sigma == 0.0 {
        return Ok(t);
    }
    let scale = 1.0 / (*shape.last().unwrap() as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in t.values_mut() {
        *v = rng.gen_range(-sigma..sigma) * scale;
    }
    Ok(t)
}

/// Leaves and outputs of one composition on a graph.
#[derive(Clone, Debug)]
pub struct Composed {
    /// Adversarial input of each sequence, `len_s x D`.
    pub inputs: Vec<Var>,
    pub table: Var,
    pub passage: Option<Var>,
    pub question: Option<Var>,
    /// Local perturbation leaf of each sequence, `len_s x D`.
    pub delta: Vec<Var>,
}

impl Composed {
    /// Gradient of the local perturbation laid out like `state.delta`.
    pub fn delta_grad(&self, g: &Graph, batch: &Batch, dim: usize) -> Tensor {
        let mut out = Tensor::zeros(&[batch.n_sequences(), batch.max_len, dim]);
        let stride = batch.max_len * dim;
        for (s, v) in self.delta.iter().enumerate() {
            let gd = g.grad(*v);
            out.values_mut()[s * stride..s * stride + gd.len()].copy_from_slice(gd);
        }
        out
    }
}

fn check_batch(batch: &Batch, emb: &EmbeddingSet, delta: &Tensor) -> Result<()> {
    for s in 0..batch.n_sequences() {
        if batch.roles[s].len() != batch.max_len {
            return Err(Error::Contract(format!(
                "sequence {s}: {} roles for {} ids",
                batch.roles[s].len(),
                batch.max_len
            )));
        }
    }
    if batch.ids.len() != batch.n_sequences() * batch.max_len {
        return Err(Error::Contract("batch ids do not match its shape".into()));
    }
    let expect = [batch.n_sequences(), batch.max_len, emb.dim()];
    if delta.shape() != expect {
        return Err(Error::Contract(format!(
            "delta shape {:?}, batch needs {expect:?}",
            delta.shape()
        )));
    }
    Ok(())
}

/// Records the adversarial input of every sequence of `batch` on `g`.
/// Gradients reach `E`, the active virtual matrices (scatter-added per
/// role) and the local perturbation. Position information is not part of
/// the composition.
pub fn compose(
    g: &mut Graph,
    batch: &Batch,
    emb: &EmbeddingSet,
    state: &PerturbationState,
) -> Result<Composed> {
    check_batch(batch, emb, &state.delta)?;
    let d = emb.dim();
    let table = g.param(&emb.table);
    let passage = state.uses_passage().then(|| g.param(&emb.passage));
    let question = state.uses_question().then(|| g.param(&emb.question));

    let mut inputs = Vec::with_capacity(batch.n_sequences());
    let mut deltas = Vec::with_capacity(batch.n_sequences());
    for s in 0..batch.n_sequences() {
        let ids = batch.seq_ids(s);
        let roles = batch.seq_roles(s);
        let mut z = g.gather_rows(table, ids)?;
        if let Some(p) = passage {
            let mask: Vec<bool> = roles.iter().map(|r| r.takes_passage_perturbation()).collect();
            let pv = g.gather_rows_masked(p, ids, &mask)?;
            z = g.add(z, pv)?;
        }
        if let Some(q) = question {
            let mask: Vec<bool> = roles.iter().map(|r| r.takes_question_perturbation()).collect();
            let qv = g.gather_rows_masked(q, ids, &mask)?;
            z = g.add(z, qv)?;
        }
        let off = s * batch.max_len * d;
        let slice = state.delta.values()[off..off + ids.len() * d].to_vec();
        let dv = g.param(&Tensor::new(&[ids.len(), d], slice)?);
        z = g.add(z, dv)?;
        inputs.push(z);
        deltas.push(dv);
    }
    Ok(Composed {
        inputs,
        table,
        passage,
        question,
        delta: deltas,
    })
}

/// Clean word vectors `E[ids]` laid out like `delta`; padding rows are zero.
pub fn clean_lookup(batch: &Batch, table: &Tensor) -> Result<Tensor> {
    let (v, d) = table.dims2()?;
    let mut out = Tensor::zeros(&[batch.n_sequences(), batch.max_len, d]);
    for s in 0..batch.n_sequences() {
        for (t, &id) in batch.seq_ids(s).iter().enumerate() {
            if id >= v {
                return Err(Error::Index(format!("token id {id} out of range for {v} rows")));
            }
            let off = (s * batch.max_len + t) * d;
            out.values_mut()[off..off + d].copy_from_slice(table.row(id));
        }
    }
    Ok(out)
}

fn leading_slices(t: &Tensor) -> usize {
    t.shape()[0]
}

/// Normalized ascent step on the local perturbation:
/// `delta[b] += g[b] / ‖g[b]‖ * ‖x[b]‖ * eps`, with norms over each
/// example's whole slice (or over the whole batch). Slices whose gradient
/// norm is below [`ZERO_GRAD`] are left unchanged.
pub fn update_delta(
    delta: &mut Tensor,
    grad: &Tensor,
    x_vec: &Tensor,
    eps: f64,
    scope: DeltaNormScope,
) -> Result<()> {
    if delta.shape() != grad.shape() || delta.shape() != x_vec.shape() {
        return Err(Error::Dimension(format!(
            "update_delta: delta {:?}, grad {:?}, x_vec {:?}",
            delta.shape(),
            grad.shape(),
            x_vec.shape()
        )));
    }
    if eps == 0.0 {
        return Ok(());
    }
    let chunk = match scope {
        DeltaNormScope::PerExample => delta.numel() / leading_slices(delta),
        DeltaNormScope::WholeBatch => delta.numel(),
    };
    let gv = grad.values();
    let xv = x_vec.values();
    for (b, dv) in delta.values_mut().chunks_mut(chunk).enumerate() {
        let range = b * chunk..(b + 1) * chunk;
        let gnorm = l2_norm(&gv[range.clone()]);
        if gnorm < ZERO_GRAD {
            continue;
        }
        let scale = l2_norm(&xv[range.clone()]) * eps / gnorm;
        for (d, g) in dv.iter_mut().zip(&gv[range]) {
            *d += g * scale;
        }
    }
    Ok(())
}

/// Token-wise normalized step on a virtual matrix:
/// `M[i] += g[i] / ‖g[i]‖ * row_norms[i] * eps` for every row whose
/// gradient norm reaches [`ZERO_GRAD`]. Other rows are untouched.
pub fn update_virtual_rowwise(m: &mut Tensor, grad: &[f64], row_norms: &[f64], eps: f64) -> Result<()> {
    let (v, d) = m.dims2()?;
    if grad.len() != v * d {
        return Err(Error::Dimension(format!(
            "virtual gradient has {} entries, matrix is {v} x {d}",
            grad.len()
        )));
    }
    if eps == 0.0 {
        return Ok(());
    }
    for i in 0..v {
        let gi = &grad[i * d..(i + 1) * d];
        let gnorm = l2_norm(gi);
        if gnorm < ZERO_GRAD {
            continue;
        }
        let norm = match row_norms.get(i) {
            Some(n) if n.is_finite() => *n,
            _ => {
                return Err(Error::Contract(format!(
                    "no row norm for vocabulary row {i}, which has a nonzero gradient"
                )))
            }
        };
        let scale = norm * eps / gnorm;
        for (x, g) in m.row_mut(i).iter_mut().zip(gi) {
            *x += g * scale;
        }
    }
    Ok(())
}

/// Classic projected step: `delta[b] = Π(delta[b] + alpha * g[b] / ‖g[b]‖)`
/// where `Π` rescales any slice with norm above `eps_ball` back onto the
/// ball. A zero gradient skips the step but still projects.
pub fn pgd_update_classic(delta: &mut Tensor, grad: &Tensor, alpha: f64, eps_ball: f64) -> Result<()> {
    if delta.shape() != grad.shape() {
        return Err(Error::Dimension(format!(
            "pgd_update_classic: delta {:?}, grad {:?}",
            delta.shape(),
            grad.shape()
        )));
    }
    if !(alpha > 0.0 && eps_ball > 0.0) {
        return Err(Error::Config(format!(
            "alpha and eps_ball must be positive, got {alpha} and {eps_ball}"
        )));
    }
    let chunk = delta.numel() / leading_slices(delta);
    let gv = grad.values();
    for (b, dv) in delta.values_mut().chunks_mut(chunk).enumerate() {
        let gi = &gv[b * chunk..(b + 1) * chunk];
        let gnorm = l2_norm(gi);
        if gnorm >= ZERO_GRAD {
            for (d, g) in dv.iter_mut().zip(gi) {
                *d += alpha * g / gnorm;
            }
        }
        let n = l2_norm(dv);
        if n > eps_ball {
            let s = eps_ball / n;
            dv.iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(())
}

/// Population mean and standard deviation of a matrix.
pub fn matrix_stats(m: &Tensor) -> (f64, f64) {
    mean_std(m.values())
}
