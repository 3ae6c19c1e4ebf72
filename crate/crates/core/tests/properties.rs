mod common;

use common::*;
use mrc_adv::autodiff::{Graph, Tensor};
use mrc_adv::data::{decode, gen_kv_task, inject_distractor, Answer, TaskParams};
use mrc_adv::model::predict_span;
use mrc_adv::perturb::{
    clean_lookup, compose, pgd_update_classic, renormalize, update_delta, update_virtual_rowwise, DeltaNormScope,
    EmbeddingSet, PerturbationState,
};
use mrc_adv::train::{scheduled_lr, span_f1, Stat};
use proptest::collection::vec;
use proptest::prelude::*;

fn tensor(shape: &[usize], vals: Vec<f64>) -> Tensor {
    Tensor::new(shape, vals).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn renormalize_hits_zero_mean_and_target_std(
        vals in vec(-5.0f64..5.0, 12),
        sigma in 1e-3f64..1.0,
    ) {
        let m = tensor(&[3, 4], vals);
        prop_assume!(m.mean_std().1 > 1e-6);
        let r = renormalize(&m, sigma).unwrap();
        prop_assert!(!r.degenerate);
        let (mean, std) = r.matrix.mean_std();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((std - sigma).abs() < 1e-9);
    }

    #[test]
    fn delta_step_scales_with_clean_norm(
        grad in vec(-1.0f64..1.0, 24),
        x in vec(-2.0f64..2.0, 24),
        eps in 1e-4f64..0.5,
    ) {
        let mut delta = Tensor::zeros(&[2, 3, 4]);
        let g = tensor(&[2, 3, 4], grad);
        let xv = tensor(&[2, 3, 4], x);
        update_delta(&mut delta, &g, &xv, eps, DeltaNormScope::PerExample).unwrap();
        for b in 0..2 {
            let r = b * 12..(b + 1) * 12;
            let want = if norm(&g.values()[r.clone()]) < 1e-12 { 0.0 } else { eps * norm(&xv.values()[r.clone()]) };
            prop_assert!((norm(&delta.values()[r]) - want).abs() < 1e-9);
        }
        let mut whole = Tensor::zeros(&[2, 3, 4]);
        update_delta(&mut whole, &g, &xv, eps, DeltaNormScope::WholeBatch).unwrap();
        prop_assert!((norm(whole.values()) - eps * norm(xv.values())).abs() < 1e-9);
    }

    #[test]
    fn rowwise_step_touches_only_rows_with_gradient(
        start in vec(-1.0f64..1.0, 15),
        grad in vec(-1.0f64..1.0, 15),
        zero_rows in vec(any::<bool>(), 5),
        row_norms in vec(0.1f64..3.0, 5),
        eps in 1e-3f64..0.5,
    ) {
        let mut grad = grad;
        for (i, z) in zero_rows.iter().enumerate() {
            if *z {
                grad[i * 3..(i + 1) * 3].fill(0.0);
            }
        }
        let before = tensor(&[5, 3], start);
        let mut m = before.clone();
        update_virtual_rowwise(&mut m, &grad, &row_norms, eps).unwrap();
        for i in 0..5 {
            let step = norm(&diff(m.row(i), before.row(i)));
            let want = if zero_rows[i] { 0.0 } else { eps * row_norms[i] };
            prop_assert!((step - want).abs() < 1e-9);
        }
    }

    #[test]
    fn projected_step_stays_in_ball(
        start in vec(-1.0f64..1.0, 12),
        grad in vec(-1.0f64..1.0, 12),
        alpha in 0.01f64..2.0,
        ball in 0.01f64..1.0,
    ) {
        let mut delta = tensor(&[3, 4], start);
        pgd_update_classic(&mut delta, &tensor(&[3, 4], grad), alpha, ball).unwrap();
        for row in delta.values().chunks(4) {
            prop_assert!(norm(row) <= ball + 1e-12);
        }
    }

    #[test]
    fn zero_state_composes_to_clean_lookup(seed in 0u64..1000) {
        let ds = span_set(3, seed);
        let batch = batch_of(&ds.examples);
        let table = mrc_adv::model::init_word_embeddings(&ds.vocab, 4, 0.5, seed);
        let emb = EmbeddingSet::new(table, 0.1, seed).unwrap();
        let mut g = Graph::new();
        let comp = compose(&mut g, &batch, &emb, &PerturbationState::zeros(&batch, 4)).unwrap();
        prop_assert!(comp.passage.is_none() && comp.question.is_none());
        let clean = clean_lookup(&batch, &emb.table).unwrap();
        for (s, z) in comp.inputs.iter().enumerate() {
            let off = s * batch.max_len * 4;
            prop_assert_eq!(g.values(*z), &clean.values()[off..off + batch.lengths[s] * 4]);
        }
    }

    #[test]
    fn f1_is_bounded_and_symmetric(a in vec(0usize..6, 1..6), b in vec(0usize..6, 1..6)) {
        let f = span_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, span_f1(&b, &a));
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort();
        sb.sort();
        prop_assert_eq!(f == 1.0, sa == sb);
    }

    #[test]
    fn predicted_spans_are_admissible(
        start in vec(-3.0f64..3.0, 12),
        end in vec(-3.0f64..3.0, 12),
        lo in 0usize..6,
        width in 1usize..6,
        max_len in 0usize..5,
    ) {
        let hi = lo + width;
        let (s, e) = predict_span(&start, &end, (lo, hi), max_len);
        prop_assert!(lo <= s && s <= e && e < hi && e - s <= max_len);
        for i in lo..hi {
            for j in i..hi.min(i + max_len + 1) {
                prop_assert!(start[i] + end[j] <= start[s] + end[e]);
            }
        }
    }

    #[test]
    fn batches_decode_and_distractors_append(seed in 0u64..500, pairs in 1usize..5) {
        let ds = gen_kv_task(&TaskParams::span(4, pairs, 40, seed)).unwrap();
        let batch = batch_of(&ds.examples);
        for (ex, dec) in ds.examples.iter().zip(decode(&batch, &ds.vocab)) {
            let passage: Vec<String> = ex.passage.iter().map(|&i| ds.vocab.token(i).to_string()).collect();
            prop_assert_eq!(dec.passage, passage);
            let d = inject_distractor(ex, &ds.vocab, seed).unwrap();
            prop_assert_eq!(d.answer, ex.answer);
            prop_assert_eq!(&d.passage[..ex.passage.len()], &ex.passage[..]);
            prop_assert_eq!(d.passage.len(), ex.passage.len() + 2);
            let Answer::Span { start, .. } = ex.answer else { unreachable!() };
            prop_assert_ne!(d.passage[ex.passage.len() + 1], ex.passage[start]);
        }
    }

    #[test]
    fn schedule_stays_within_base(total in 1usize..200, ratio in 0.0f64..0.9) {
        for s in 0..total {
            let lr = scheduled_lr(0.5, s, total, ratio);
            prop_assert!(lr > 0.0 && lr <= 0.5 + 1e-15);
        }
    }

    #[test]
    fn stats_are_population_moments(xs in vec(-10.0f64..10.0, 1..20)) {
        let s = Stat::of(&xs).unwrap();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-12 <= s.mean && s.mean <= hi + 1e-12);
        prop_assert!(s.std >= 0.0 && s.std <= (hi - lo) / 2.0 + 1e-12);
    }
}
