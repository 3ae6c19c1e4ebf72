//! Toy reading-comprehension model.
//!
//! Composed word inputs plus a role-type embedding, with each position's
//! predecessor mixed in through a learned matrix, run through pre-norm,
//! single-head, bidirectional encoder blocks. Position enters only through a
//! learned relative-offset bias on the attention scores, so nothing
//! positional is ever perturbed. A span head scores start and end positions;
//! a choice head scores the first position of each option sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{Batch, Label, Vocab};
use crate::error::{Error, Result};
use crate::perturb::{compose, EmbeddingSet, PerturbationState, Role};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Relative offsets are clipped to `[-max_offset, max_offset]`.
    pub max_offset: usize,
    pub max_answer_len: usize,
    /// Correlation between word vectors of keys sharing a confusion class
    /// at initialization.
    pub class_correlation: f64,
    /// Weight of the identity component in the initial predecessor mix.
    pub shift_identity: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            hidden: 128,
            layers: 1,
            max_offset: 8,
            max_answer_len: 8,
            class_correlation: 0.8,
            shift_identity: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 {
            return Err(Error::Config("dim and layers must be positive".into()));
        }
        if self.hidden < self.dim {
            return Err(Error::Config(format!(
                "hidden {} must be at least dim {}",
                self.hidden, self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.class_correlation) {
            return Err(Error::Config("class_correlation must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub ln1_scale: Tensor,
    pub ln1_shift: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    /// `(2 * max_offset + 1) x 1` attention bias per clipped offset `j - i`.
    pub rel_bias: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_shift: Tensor,
    pub w_1: Tensor,
    pub w_2: Tensor,
}

const BLOCK_PARAMS: usize = 11;
// type embeddings and the predecessor mix
const PRE_PARAMS: usize = 2;

impl EncoderParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden);
        EncoderParams {
            ln1_scale: Tensor::full(&[d], 1.0),
            ln1_shift: Tensor::zeros(&[d]),
            w_q: gaussian(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            w_k: gaussian(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            w_v: gaussian(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            w_o: gaussian(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            rel_bias: Tensor::zeros(&[2 * cfg.max_offset + 1, 1]),
            ln2_scale: Tensor::full(&[d], 1.0),
            ln2_shift: Tensor::zeros(&[d]),
            w_1: gaussian(&[d, h], 1.0 / (d as f64).sqrt(), rng),
            w_2: gaussian(&[h, d], 1.0 / (h as f64).sqrt(), rng),
        }
    }

    fn tensors(&self) -> [&Tensor; BLOCK_PARAMS] {
        [
            &self.ln1_scale,
            &self.ln1_shift,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.rel_bias,
            &self.ln2_scale,
            &self.ln2_shift,
            &self.w_1,
            &self.w_2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; BLOCK_PARAMS] {
        [
            &mut self.ln1_scale,
            &mut self.ln1_shift,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.rel_bias,
            &mut self.ln2_scale,
            &mut self.ln2_shift,
            &mut self.w_1,
            &mut self.w_2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub span_start: Tensor,
    pub span_end: Tensor,
    pub choice: Tensor,
}

/// `scale * I` plus Gaussian noise of std `1/sqrt(d)`.
fn identity_plus(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = gaussian(&[d, d], 1.0 / (d as f64).sqrt(), rng);
    for i in 0..d {
        t.values_mut()[i * d + i] += scale;
    }
    t
}

fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

/// Word embedding table: unit-variance Gaussian rows, except that keys of
/// one confusion class share a common component with weight
/// `class_correlation`, which makes near-miss keys close at initialization.
pub fn init_word_embeddings(vocab: &Vocab, dim: usize, class_correlation: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut table = Tensor::zeros(&[vocab.len(), dim]);
    for i in 0..vocab.len() {
        for v in table.row_mut(i) {
            *v = normal.sample(&mut rng);
        }
    }
    let n_classes = vocab.keys().iter().filter_map(|k| vocab.confusion_class(*k)).max();
    let centers: Vec<Vec<f64>> = (0..n_classes.map_or(0, |c| c + 1))
        .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let (a, b) = (class_correlation.sqrt(), (1.0 - class_correlation).sqrt());
    for &k in vocab.keys() {
        let c = &centers[vocab.confusion_class(k).expect("keys have classes")];
        for (v, cv) in table.row_mut(k).iter_mut().zip(c) {
            *v = a * cv + b * *v;
        }
    }
    table
}

/// Encoder parameters plus task heads; the `θ` the optimizer trains
/// alongside the word embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrcModel {
    pub config: ModelConfig,
    /// One row per [`Role`] type id.
    pub types: Tensor,
    /// Mixes each position's predecessor into it: `x_i += x_{i-1} W_shift`.
    pub shift: Tensor,
    pub blocks: Vec<EncoderParams>,
    pub head: TaskHead,
}

/// Anything whose loss the adversarial trainer can minimize: a list of
/// trainable tensors and a batch loss over composed inputs.
pub trait Objective {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
    /// Mean loss over the batch's examples. `params` are leaves bound in
    /// [`Objective::parameters`] order, `inputs` the composed input of each
    /// sequence.
    fn batch_loss(&self, g: &mut Graph, params: &[Var], inputs: &[Var], batch: &Batch) -> Result<Var>;
}

/// Span-head output for a batch.
#[derive(Clone, Debug)]
pub struct SpanOutput {
    pub start_logits: Vec<Vec<f64>>,
    pub end_logits: Vec<Vec<f64>>,
    pub loss: f64,
}

/// Choice-head output for a batch.
#[derive(Clone, Debug)]
pub struct ChoiceOutput {
    pub logits: Vec<Vec<f64>>,
    pub loss: f64,
}

impl MrcModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let types = gaussian(&[4, d], 1.0, &mut rng);
        let shift = identity_plus(d, config.shift_identity, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| EncoderParams::init(&config, &mut rng))
            .collect();
        let hs = 1.0 / (d as f64).sqrt();
        let head = TaskHead {
            span_start: gaussian(&[d, 1], hs, &mut rng),
            span_end: gaussian(&[d, 1], hs, &mut rng),
            choice: gaussian(&[d, 1], hs, &mut rng),
        };
        Ok(MrcModel {
            config,
            types,
            shift,
            blocks,
            head,
        })
    }

    fn head_base(&self) -> usize {
        PRE_PARAMS + self.blocks.len() * BLOCK_PARAMS
    }

    /// Binds every parameter as a graph leaf in [`Objective::parameters`] order.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| if track { g.param(p) } else { g.constant(p.clone()) })
            .collect()
    }

    /// Pre-norm encoder stack: `h = x + Attn(LN(x))`, `out = h + FFN(LN(h))`
    /// per block. `x` is `T x D`.
    pub fn encode(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        let scale = 1.0 / (self.config.dim as f64).sqrt();
        let r = self.config.max_offset as isize;
        let offsets: Vec<usize> = (0..t)
            .flat_map(|i| (0..t).map(move |j| ((j as isize - i as isize).clamp(-r, r) + r) as usize))
            .collect();

        let mut x = x;
        for b in 0..self.blocks.len() {
            let p = &params[PRE_PARAMS + b * BLOCK_PARAMS..PRE_PARAMS + (b + 1) * BLOCK_PARAMS];
            let a = g.layer_norm(x, p[0], p[1])?;
            let q = g.matmul(a, p[2])?;
            let k = g.matmul(a, p[3])?;
            let v = g.matmul(a, p[4])?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.mul_scalar(scores, scale);
            let bias = g.gather_rows(p[6], &offsets)?;
            let bias = g.reshape(bias, &[t, t])?;
            let scores = g.add(scores, bias)?;
            let attn = g.softmax(scores);
            let ctx = g.matmul(attn, v)?;
            let o = g.matmul(ctx, p[5])?;
            let h = g.add(x, o)?;

            let a = g.layer_norm(h, p[7], p[8])?;
            let f = g.matmul(a, p[9])?;
            let f = g.relu(f);
            let f = g.matmul(f, p[10])?;
            x = g.add(h, f)?;
        }
        Ok(x)
    }

    /// Encoder output of one sequence from its composed input and roles.
    pub fn sequence_output(&self, g: &mut Graph, params: &[Var], z: Var, roles: &[Role]) -> Result<Var> {
        if g.shape(z).first() != Some(&roles.len()) {
            return Err(Error::Contract(format!(
                "input {:?} for {} roles",
                g.shape(z),
                roles.len()
            )));
        }
        let type_ids: Vec<usize> = roles.iter().map(|r| r.type_id()).collect();
        let types = g.gather_rows(params[0], &type_ids)?;
        let x = g.add(z, types)?;
        let t = roles.len();
        let mut sm = Tensor::zeros(&[t, t]);
        for i in 1..t {
            sm.values_mut()[i * t + i - 1] = 1.0;
        }
        let sm = g.constant(sm);
        let prev = g.matmul(sm, x)?;
        let prev = g.matmul(prev, params[1])?;
        let x = g.add(x, prev)?;
        self.encode(g, params, x)
    }

    /// Start and end logits (each `T x 1`) of one sequence.
    pub fn span_logits(&self, g: &mut Graph, params: &[Var], z: Var, roles: &[Role]) -> Result<(Var, Var)> {
        let out = self.sequence_output(g, params, z, roles)?;
        let hb = self.head_base();
        let s = g.matmul(out, params[hb])?;
        let e = g.matmul(out, params[hb + 1])?;
        Ok((s, e))
    }

    /// Choice logit (`1 x 1`) of one option sequence, read at position 0.
    pub fn choice_logit(&self, g: &mut Graph, params: &[Var], z: Var, roles: &[Role]) -> Result<Var> {
        let out = self.sequence_output(g, params, z, roles)?;
        let pooled = g.gather_rows(out, &[0])?;
        g.matmul(pooled, params[self.head_base() + 2])
    }

    /// Span loss `(CE(start) + CE(end)) / 2` of every example, plus logits.
    fn span_terms(
        &self,
        g: &mut Graph,
        params: &[Var],
        inputs: &[Var],
        batch: &Batch,
    ) -> Result<Vec<(Var, Var, Var)>> {
        batch
            .labels
            .iter()
            .enumerate()
            .map(|(s, label)| {
                let Label::Span { start, end } = *label else {
                    return Err(Error::Data("span head given a choice label".into()));
                };
                let len = batch.lengths[s];
                if start >= len || end >= len {
                    return Err(Error::Data(format!(
                        "gold span ({start}, {end}) outside sequence of length {len}"
                    )));
                }
                let (sl, el) = self.span_logits(g, params, inputs[s], batch.seq_roles(s))?;
                let ls = g.cross_entropy(sl, start)?;
                let le = g.cross_entropy(el, end)?;
                let sum = g.add(ls, le)?;
                Ok((sl, el, g.mul_scalar(sum, 0.5)))
            })
            .collect()
    }

    /// Concatenated option logits (`m`) and CE loss of every example.
    fn choice_terms(
        &self,
        g: &mut Graph,
        params: &[Var],
        inputs: &[Var],
        batch: &Batch,
    ) -> Result<Vec<(Var, Var)>> {
        let m = batch.seqs_per_example;
        if m < 2 {
            return Err(Error::Data(format!("{m} options; need at least 2")));
        }
        batch
            .labels
            .iter()
            .enumerate()
            .map(|(e, label)| {
                let Label::Choice(gold) = *label else {
                    return Err(Error::Data("choice head given a span label".into()));
                };
                let logits = (e * m..(e + 1) * m)
                    .map(|s| self.choice_logit(g, params, inputs[s], batch.seq_roles(s)))
                    .collect::<Result<Vec<_>>>()?;
                let logits = g.concat(&logits)?;
                let loss = g.cross_entropy(logits, gold)?;
                Ok((logits, loss))
            })
            .collect()
    }

    fn mean(g: &mut Graph, losses: &[Var]) -> Result<Var> {
        let all = g.concat(losses)?;
        let s = g.sum(all);
        Ok(g.mul_scalar(s, 1.0 / losses.len() as f64))
    }

    /// Span forward pass over a composed batch.
    pub fn span_forward(&self, batch: &Batch, emb: &EmbeddingSet, state: &PerturbationState) -> Result<SpanOutput> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let comp = compose(&mut g, batch, emb, state)?;
        let terms = self.span_terms(&mut g, &params, &comp.inputs, batch)?;
        let losses: Vec<Var> = terms.iter().map(|t| t.2).collect();
        let loss = Self::mean(&mut g, &losses)?;
        Ok(SpanOutput {
            start_logits: terms.iter().map(|t| g.values(t.0).to_vec()).collect(),
            end_logits: terms.iter().map(|t| g.values(t.1).to_vec()).collect(),
            loss: g.values(loss)[0],
        })
    }

    /// Multiple-choice forward pass over a composed batch.
    pub fn choice_forward(&self, batch: &Batch, emb: &EmbeddingSet, state: &PerturbationState) -> Result<ChoiceOutput> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let comp = compose(&mut g, batch, emb, state)?;
        let terms = self.choice_terms(&mut g, &params, &comp.inputs, batch)?;
        let losses: Vec<Var> = terms.iter().map(|t| t.1).collect();
        let loss = Self::mean(&mut g, &losses)?;
        Ok(ChoiceOutput {
            logits: terms.iter().map(|t| g.values(t.0).to_vec()).collect(),
            loss: g.values(loss)[0],
        })
    }

    /// Runs the encoder stack on a `B x T x D` tensor, sequence by sequence.
    pub fn encode_values(&self, z: &Tensor) -> Result<Tensor> {
        let [b, t, d] = z.shape() else {
            return Err(Error::Dimension(format!("expected B x T x D, got {:?}", z.shape())));
        };
        let (b, t, d) = (*b, *t, *d);
        let mut out = Vec::with_capacity(z.numel());
        for s in 0..b {
            let mut g = Graph::new();
            let params = self.bind(&mut g, false);
            let x = g.constant(Tensor::new(&[t, d], z.values()[s * t * d..(s + 1) * t * d].to_vec())?);
            let y = self.encode(&mut g, &params, x)?;
            out.extend_from_slice(g.values(y));
        }
        Tensor::new(&[b, t, d], out)
    }
}

impl Objective for MrcModel {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.types, &self.shift];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.head.span_start, &self.head.span_end, &self.head.choice]);
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.types, &mut self.shift];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([
            &mut self.head.span_start,
            &mut self.head.span_end,
            &mut self.head.choice,
        ]);
        v
    }

    fn batch_loss(&self, g: &mut Graph, params: &[Var], inputs: &[Var], batch: &Batch) -> Result<Var> {
        let losses: Vec<Var> = match batch.labels.first() {
            Some(Label::Span { .. }) => self
                .span_terms(g, params, inputs, batch)?
                .into_iter()
                .map(|t| t.2)
                .collect(),
            Some(Label::Choice(_)) => self
                .choice_terms(g, params, inputs, batch)?
                .into_iter()
                .map(|t| t.1)
                .collect(),
            None => return Err(Error::Data("empty batch".into())),
        };
        Self::mean(g, &losses)
    }
}

/// Best `(start, end)` with `start <= end <= start + max_answer_len`, both
/// inside the half-open `passage` range. Ties go to the smallest start,
/// then the smallest end.
pub fn predict_span(start_logits: &[f64], end_logits: &[f64], passage: (usize, usize), max_answer_len: usize) -> (usize, usize) {
    let (lo, hi) = passage;
    assert!(lo < hi && hi <= start_logits.len(), "empty or out-of-range passage");
    let mut best = (lo, lo);
    let mut best_score = f64::NEG_INFINITY;
    for s in lo..hi {
        for e in s..hi.min(s + max_answer_len + 1) {
            let score = start_logits[s] + end_logits[e];
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}
