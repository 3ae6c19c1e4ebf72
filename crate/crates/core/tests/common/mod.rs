#![allow(dead_code)]

use mrc_adv::autodiff::Tensor;
use mrc_adv::data::{
    build_batch, gen_choice_task, gen_kv_task, sequence_len, Batch, Dataset, Example, Label, TaskParams,
};
use mrc_adv::model::ModelConfig;
use mrc_adv::perturb::{Role, RoleMask};
use mrc_adv::train::{Mode, TraceEvent, TrainConfig};

pub fn tiny(dim: usize) -> ModelConfig {
    ModelConfig {
        dim,
        hidden: 2 * dim,
        layers: 1,
        max_offset: 3,
        ..ModelConfig::default()
    }
}

pub fn config(mode: Mode, dim: usize) -> TrainConfig {
    let mut c = TrainConfig::for_mode(mode);
    c.model = tiny(dim);
    c.batch_size = 8;
    c
}

pub fn span_set(n: usize, seed: u64) -> Dataset {
    gen_kv_task(&TaskParams::span(n, 3, 40, seed)).unwrap()
}

pub fn choice_set(n: usize, seed: u64) -> Dataset {
    gen_choice_task(&TaskParams::choice(n, 3, 4, 40, seed)).unwrap()
}

pub fn batch_of(examples: &[Example]) -> Batch {
    let max_len = examples.iter().map(sequence_len).max().unwrap();
    build_batch(examples, max_len).unwrap()
}

pub fn batches(ds: &Dataset, size: usize) -> Vec<Batch> {
    ds.examples.chunks(size).map(batch_of).collect()
}

/// Span batch from explicit `(ids, roles, (start, end))` sequences.
pub fn manual_batch(seqs: &[(Vec<usize>, Vec<Role>, (usize, usize))]) -> Batch {
    let max_len = seqs.iter().map(|s| s.0.len()).max().unwrap();
    let mut b = Batch {
        max_len,
        ids: Vec::new(),
        roles: Vec::new(),
        lengths: Vec::new(),
        pad_mask: Vec::new(),
        labels: Vec::new(),
        seqs_per_example: 1,
        passage_ranges: Vec::new(),
    };
    for (ids, roles, (start, end)) in seqs {
        assert_eq!(ids.len(), roles.len());
        let len = ids.len();
        let mut ids = ids.clone();
        let mut roles = roles.clone();
        let lo = roles.iter().position(|r| *r == Role::Passage).unwrap();
        let hi = lo + roles[lo..].iter().take_while(|r| **r == Role::Passage).count();
        ids.resize(max_len, 0);
        roles.resize(max_len, Role::Special);
        b.lengths.push(len);
        b.pad_mask.extend((0..max_len).map(|i| i < len));
        b.ids.extend(ids);
        b.roles.push(RoleMask::new(roles));
        b.labels.push(Label::Span {
            start: *start,
            end: *end,
        });
        b.passage_ranges.push((lo, hi));
    }
    b
}

pub fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Largest `|a - b| / max(1, |b|)`.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Owned copy of a [`TraceEvent`].
#[derive(Clone, Debug)]
pub enum Event {
    Renormalized {
        passage: Tensor,
        question: Tensor,
    },
    DeltaStep {
        inner: usize,
        before: Tensor,
        after: Tensor,
        x_vec: Tensor,
    },
    VirtualStep {
        inner: usize,
        passage: bool,
        before: Tensor,
        after: Tensor,
        row_norms: Vec<f64>,
    },
    Accumulated(Vec<Vec<f64>>),
}

pub fn own(e: TraceEvent<'_>) -> Event {
    match e {
        TraceEvent::Renormalized { passage, question } => Event::Renormalized {
            passage: passage.clone(),
            question: question.clone(),
        },
        TraceEvent::DeltaStep {
            inner,
            before,
            after,
            x_vec,
        } => Event::DeltaStep {
            inner,
            before: before.clone(),
            after: after.clone(),
            x_vec: x_vec.clone(),
        },
        TraceEvent::VirtualStep {
            inner,
            passage,
            before,
            after,
            row_norms,
        } => Event::VirtualStep {
            inner,
            passage,
            before: before.clone(),
            after: after.clone(),
            row_norms: row_norms.to_vec(),
        },
        TraceEvent::Accumulated { grads } => Event::Accumulated(grads.to_vec()),
    }
}
