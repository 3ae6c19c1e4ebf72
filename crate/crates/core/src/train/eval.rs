use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{build_batch, sequence_len, Answer, Example};
use crate::error::Result;
use crate::model::{predict_span, MrcModel};

const EVAL_BATCH: usize = 64;

/// EM and F1 for span examples, accuracy for choice examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub acc: Option<f64>,
    pub n: usize,
}

/// Token-overlap F1 between a predicted and a gold token sequence.
pub fn span_f1(pred: &[usize], gold: &[usize]) -> f64 {
    let mut left = gold.to_vec();
    let mut common = 0usize;
    for t in pred {
        if let Some(i) = left.iter().position(|g| g == t) {
            left.swap_remove(i);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Per-example predictions: a passage span or an option index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prediction {
    Span(usize, usize),
    Choice(usize),
}

/// Predicts every example from clean word vectors only.
pub fn predict(model: &MrcModel, table: &Tensor, examples: &[Example]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let max_len = chunk.iter().map(sequence_len).max().unwrap_or(1);
        let batch = build_batch(chunk, max_len)?;
        let m = batch.seqs_per_example;
        let mut g = Graph::new();
        let params = model.bind(&mut g, false);
        let tv = g.constant(table.clone());
        for (e, ex) in chunk.iter().enumerate() {
            if ex.is_choice() {
                let mut best = (f64::NEG_INFINITY, 0);
                for (o, s) in (e * m..(e + 1) * m).enumerate() {
                    let z = g.gather_rows(tv, batch.seq_ids(s))?;
                    let l = model.choice_logit(&mut g, &params, z, batch.seq_roles(s))?;
                    let v = g.values(l)[0];
                    if v > best.0 {
                        best = (v, o);
                    }
                }
                out.push(Prediction::Choice(best.1));
            } else {
                let z = g.gather_rows(tv, batch.seq_ids(e))?;
                let (sl, el) = model.span_logits(&mut g, &params, z, batch.seq_roles(e))?;
                let (s, t) = predict_span(
                    g.values(sl),
                    g.values(el),
                    batch.passage_ranges[e],
                    model.config.max_answer_len,
                );
                let off = batch.passage_ranges[e].0;
                out.push(Prediction::Span(s - off, t - off));
            }
        }
    }
    Ok(out)
}

/// Scores predictions against gold answers.
pub fn score(examples: &[Example], preds: &[Prediction]) -> EvalMetrics {
    let (mut em, mut f1, mut acc) = (0.0, 0.0, 0.0);
    let (mut n_span, mut n_choice) = (0usize, 0usize);
    for (ex, p) in examples.iter().zip(preds) {
        match (&ex.answer, p) {
            (Answer::Span { start, end }, Prediction::Span(s, e)) => {
                n_span += 1;
                let gold = &ex.passage[*start..=*end];
                let pred = &ex.passage[*s..=*e];
                if gold == pred {
                    em += 1.0;
                }
                f1 += span_f1(pred, gold);
            }
            (Answer::Choice { choice }, Prediction::Choice(c)) => {
                n_choice += 1;
                if choice == c {
                    acc += 1.0;
                }
            }
            _ => {}
        }
    }
    let frac = |x: f64, n: usize| (n > 0).then(|| x / n as f64);
    EvalMetrics {
        em: frac(em, n_span),
        f1: frac(f1, n_span),
        acc: frac(acc, n_choice),
        n: examples.len(),
    }
}

/// Clean-input evaluation. Only the word embedding table and the model are
/// read; the virtual matrices are not an argument.
pub fn evaluate(model: &MrcModel, table: &Tensor, examples: &[Example]) -> Result<EvalMetrics> {
    let preds = predict(model, table, examples)?;
    Ok(score(examples, &preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_choice_task, TaskParams};
    use crate::model::{init_word_embeddings, ModelConfig};

    #[test]
    fn f1_examples() {
        assert_eq!(span_f1(&[4, 5], &[4, 5]), 1.0);
        // passage positions 2..=4 vs 3..=5 of distinct tokens
        let passage = [10, 11, 12, 13, 14, 15, 16];
        let f = span_f1(&passage[2..=4], &passage[3..=5]);
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(span_f1(&[1], &[2]), 0.0);
    }

    #[test]
    fn gold_predictions_score_one() {
        let ex = Example {
            passage: vec![3, 7, 4, 8],
            question: vec![4],
            options: None,
            answer: Answer::Span { start: 3, end: 3 },
            seed: 0,
            distractor: false,
        };
        let m = score(&[ex], &[Prediction::Span(3, 3)]);
        assert_eq!((m.em, m.f1, m.acc), (Some(1.0), Some(1.0), None));
    }

    #[test]
    fn untrained_choice_accuracy_is_chance() {
        let ds = gen_choice_task(&TaskParams::choice(10_000, 3, 4, 40, 11)).unwrap();
        let cfg = ModelConfig {
            dim: 8,
            hidden: 8,
            layers: 1,
            ..ModelConfig::default()
        };
        let model = MrcModel::new(cfg, 1).unwrap();
        let table = init_word_embeddings(&ds.vocab, 8, 0.5, 2);
        let acc = evaluate(&model, &table, &ds.examples).unwrap().acc.unwrap();
        let sd = (0.25f64 * 0.75 / 10_000.0).sqrt();
        assert!((acc - 0.25).abs() < 3.0 * sd, "{acc}");
    }
}
