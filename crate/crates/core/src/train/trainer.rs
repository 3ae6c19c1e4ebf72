use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_update, AdamState};
use super::config::{GradAccum, TrainConfig};
use super::eval::{evaluate, EvalMetrics};
use super::metrics::MetricsRecord;
use crate::autodiff::{l2_norm, Graph, Tensor};
use crate::data::{build_batch, derive_seed, sequence_len, Batch, Dataset, Example};
use crate::error::{Error, Result};
use crate::model::{init_word_embeddings, MrcModel, Objective};
use crate::perturb::{
    clean_lookup, compose, init_delta, pgd_update_classic, renormalize, update_delta,
    update_virtual_rowwise, EmbeddingSet, PerturbationState,
};

// salts for the streams derived from the run seed
const SALT_MODEL: u64 = 1;
const SALT_TABLE: u64 = 2;
const SALT_VIRTUAL: u64 = 3;
const SALT_DELTA: u64 = 4;
const SALT_SHUFFLE: u64 = 5;

/// Intermediate quantities of one batch, reported as they are produced.
#[derive(Debug)]
pub enum TraceEvent<'a> {
    /// Both virtual matrices at the start of the batch, after renormalizing
    /// the active ones.
    Renormalized { passage: &'a Tensor, question: &'a Tensor },
    /// Local perturbation before and after the step of inner iteration `inner`.
    DeltaStep {
        inner: usize,
        before: &'a Tensor,
        after: &'a Tensor,
        x_vec: &'a Tensor,
    },
    /// A virtual matrix before and after its row-wise step.
    VirtualStep {
        inner: usize,
        passage: bool,
        before: &'a Tensor,
        after: &'a Tensor,
        row_norms: &'a [f64],
    },
    /// Combined gradients handed to the optimizer: model parameters in
    /// [`Objective::parameters`] order, then the word embedding table.
    Accumulated { grads: &'a [Vec<f64>] },
}

/// Losses seen while training on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    /// Loss on unperturbed inputs before the update.
    pub loss_clean: f64,
    /// Loss on the composed input of every inner iteration.
    pub loss_adv: Vec<f64>,
}

/// Optimizer state covering the model parameters followed by the word
/// embedding table. The virtual matrices are not optimizer parameters.
pub fn optimizer_for<M: Objective>(model: &M, emb: &EmbeddingSet, config: &TrainConfig) -> AdamState {
    let mut shapes = model.parameters();
    shapes.push(&emb.table);
    AdamState::new(&shapes, config.beta1, config.beta2, config.adam_eps)
}

fn clean_loss<M: Objective>(batch: &Batch, model: &M, emb: &EmbeddingSet) -> Result<f64> {
    let mut g = Graph::new();
    let params: Vec<_> = model.parameters().into_iter().map(|p| g.constant(p.clone())).collect();
    let comp = compose(&mut g, batch, emb, &PerturbationState::zeros(batch, emb.dim()))?;
    let loss = model.batch_loss(&mut g, &params, &comp.inputs, batch)?;
    Ok(g.values(loss)[0])
}

/// One batch of adversarial training: `K` compose/forward/backward
/// iterations that accumulate parameter gradients and step the
/// perturbations, then one optimizer update.
pub fn train_batch<M: Objective>(
    batch: &Batch,
    model: &mut M,
    emb: &mut EmbeddingSet,
    config: &TrainConfig,
    adam: &mut AdamState,
    step: usize,
    lr: f64,
) -> Result<BatchOutcome> {
    train_batch_traced(batch, model, emb, config, adam, step, lr, &mut |_| {})
}

/// [`train_batch`] reporting intermediate quantities to `observer`.
#[allow(clippy::too_many_arguments)]
pub fn train_batch_traced<M: Objective>(
    batch: &Batch,
    model: &mut M,
    emb: &mut EmbeddingSet,
    config: &TrainConfig,
    adam: &mut AdamState,
    step: usize,
    lr: f64,
    observer: &mut dyn FnMut(TraceEvent<'_>),
) -> Result<BatchOutcome> {
    let dim = emb.dim();
    let mut state = PerturbationState {
        delta: Tensor::zeros(&[batch.n_sequences(), batch.max_len, dim]),
        sigma: config.sigma,
        eps_delta: config.eps_delta,
        eps_p: config.eps_p,
        eps_q: config.eps_q,
    };

    if state.uses_passage() {
        emb.passage = renormalize(&emb.passage, config.sigma)?.matrix;
    }
    if state.uses_question() {
        emb.question = renormalize(&emb.question, config.sigma)?.matrix;
    }
    observer(TraceEvent::Renormalized {
        passage: &emb.passage,
        question: &emb.question,
    });

    if config.eps_delta > 0.0 {
        state.delta = init_delta(state.delta.shape(), config.sigma, derive_seed(derive_seed(config.seed, SALT_DELTA), step as u64))?;
        let stride = batch.max_len * dim;
        for (s, chunk) in state.delta.values_mut().chunks_mut(stride).enumerate() {
            chunk[batch.lengths[s] * dim..].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let x_vec = clean_lookup(batch, &emb.table)?;
    let row_norms = emb.row_norms();

    let loss_clean = clean_loss(batch, model, emb)?;

    let n_params = model.parameters().len();
    let mut acc: Vec<Vec<f64>> = model.parameters().iter().map(|p| vec![0.0; p.numel()]).collect();
    acc.push(vec![0.0; emb.table.numel()]);
    let mut loss_adv = Vec::with_capacity(config.k);

    for inner in 0..config.k {
        let mut g = Graph::new();
        let params: Vec<_> = model.parameters().into_iter().map(|p| g.param(p)).collect();
        let comp = compose(&mut g, batch, emb, &state)?;
        let loss = model.batch_loss(&mut g, &params, &comp.inputs, batch)?;
        let value = g.values(loss)[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                inner,
                mode: config.mode().to_string(),
                delta_norm: l2_norm(state.delta.values()),
                p_norm: l2_norm(emb.passage.values()),
                q_norm: l2_norm(emb.question.values()),
            });
        }
        loss_adv.push(value);
        g.backward(loss)?;

        for (a, v) in acc.iter_mut().zip(&params) {
            a.iter_mut().zip(g.grad(*v)).for_each(|(a, x)| *a += x);
        }
        acc[n_params].iter_mut().zip(g.grad(comp.table)).for_each(|(a, x)| *a += x);

        if config.eps_delta > 0.0 {
            let grad = comp.delta_grad(&g, batch, dim);
            let before = state.delta.clone();
            match (config.alpha, config.eps_ball) {
                (Some(alpha), Some(ball)) => pgd_update_classic(&mut state.delta, &grad, alpha, ball)?,
                _ => update_delta(&mut state.delta, &grad, &x_vec, config.eps_delta, config.delta_norm_scope)?,
            }
            observer(TraceEvent::DeltaStep {
                inner,
                before: &before,
                after: &state.delta,
                x_vec: &x_vec,
            });
        }
        for (var, passage) in [(comp.passage, true), (comp.question, false)] {
            let Some(var) = var else { continue };
            let (m, eps) = if passage {
                (&mut emb.passage, config.eps_p)
            } else {
                (&mut emb.question, config.eps_q)
            };
            let before = m.clone();
            update_virtual_rowwise(m, g.grad(var), &row_norms, eps)?;
            observer(TraceEvent::VirtualStep {
                inner,
                passage,
                before: &before,
                after: m,
                row_norms: &row_norms,
            });
        }
    }

    if config.grad_accum == GradAccum::Mean && config.k > 1 {
        let s = 1.0 / config.k as f64;
        acc.iter_mut().flatten().for_each(|x| *x *= s);
    }
    observer(TraceEvent::Accumulated { grads: &acc });

    let mut targets = model.parameters_mut();
    targets.push(&mut emb.table);
    adam_update(&mut targets, &acc, adam, lr, config.weight_decay)?;

    Ok(BatchOutcome { loss_clean, loss_adv })
}

/// Linear warmup over the first `ceil(warmup_ratio * total)` steps, then
/// linear decay to zero at `total`.
pub fn scheduled_lr(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Held-out sets evaluated at the end of every epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalSets<'a> {
    pub clean: Option<&'a [Example]>,
    pub distractor: Option<&'a [Example]>,
}

/// Model, embeddings and virtual matrices at the end of a run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: MrcModel,
    pub emb: EmbeddingSet,
    pub clean: Option<EvalMetrics>,
    pub distractor: Option<EvalMetrics>,
}

/// Initial model and embeddings of a run, derived from its seed.
pub fn init_run(dataset: &Dataset, config: &TrainConfig) -> Result<(MrcModel, EmbeddingSet)> {
    let model = MrcModel::new(config.model.clone(), derive_seed(config.seed, SALT_MODEL))?;
    let table = init_word_embeddings(
        &dataset.vocab,
        config.model.dim,
        config.model.class_correlation,
        derive_seed(config.seed, SALT_TABLE),
    );
    let emb = EmbeddingSet::new(table, config.sigma, derive_seed(config.seed, SALT_VIRTUAL))?;
    Ok((model, emb))
}

/// Runs `epochs` passes of shuffled batches and reports one record per
/// step to `sink`. The last record of each epoch carries evaluation
/// metrics. `wall_clock` fills `wall_ms`; without it the field is 0 so
/// metrics files are reproducible byte for byte.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    evals: EvalSets<'_>,
    wall_clock: bool,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Trained> {
    config.validate()?;
    if dataset.examples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (mut model, mut emb) = init_run(dataset, config)?;
    let mut adam = optimizer_for(&model, &emb, config);
    let n = dataset.examples.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let started = Instant::now();
    let mode = config.mode();
    let mut last = (None, None);

    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(config.seed, SALT_SHUFFLE), epoch as u64));
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let examples: Vec<Example> = idx.iter().map(|&i| dataset.examples[i].clone()).collect();
            let max_len = examples.iter().map(sequence_len).max().unwrap_or(1);
            let batch = build_batch(&examples, max_len)?;
            let lr = scheduled_lr(config.lr, step, total, config.warmup_ratio);
            let out = train_batch(&batch, &mut model, &mut emb, config, &mut adam, step, lr)?;

            let mut rec = MetricsRecord {
                step,
                epoch,
                mode,
                loss_clean: out.loss_clean,
                loss_adv: out.loss_adv,
                em: None,
                f1: None,
                acc: None,
                wall_ms: 0,
                distractor_em: None,
                distractor_f1: None,
                distractor_acc: None,
            };
            if b + 1 == per_epoch {
                if let Some(set) = evals.clean {
                    let m = evaluate(&model, &emb.table, set)?;
                    (rec.em, rec.f1, rec.acc) = (m.em, m.f1, m.acc);
                    last.0 = Some(m);
                }
                if let Some(set) = evals.distractor {
                    let m = evaluate(&model, &emb.table, set)?;
                    (rec.distractor_em, rec.distractor_f1, rec.distractor_acc) = (m.em, m.f1, m.acc);
                    last.1 = Some(m);
                }
            }
            if wall_clock {
                rec.wall_ms = started.elapsed().as_millis() as u64;
            }
            sink(&rec)?;
            step += 1;
        }
    }
    Ok(Trained {
        model,
        emb,
        clean: last.0,
        distractor: last.1,
    })
}
