mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use veritas::decoding::{
    argmax_score, decode, mean_logprob_score, run_benchmark, score_with_beta, toy_benchmark,
    BenchmarkTask, DecodeParams, Strategy,
};
use veritas::model::{HeadActivations, StepCandidate};
use veritas::Execution;

fn candidate(text: String, probs: &[f64]) -> StepCandidate {
    StepCandidate {
        text,
        token_ids: vec![],
        token_logprobs: probs.iter().map(|p| p.ln()).collect(),
        activations: HeadActivations::zeros(1, 1, 1),
    }
}

#[test]
fn hand_checked_scores() {
    let c = candidate("s".into(), &[0.9, 0.4]);
    assert!((mean_logprob_score(&c).unwrap() - 0.6).abs() < 1e-15);
    let scored = score_with_beta(c, 0.8, 0.5).unwrap();
    assert!((scored.score - 0.7).abs() < 1e-15);
}

/// First index maximizing `key`, ties to the smaller text.
fn brute_argmax(texts: &[String], key: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..key.len() {
        if key[i] > key[best] || (key[i] == key[best] && texts[i] < texts[best]) {
            best = i;
        }
    }
    best
}

#[test]
fn lambda_extremes_reduce_to_single_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let texts: Vec<String> = (0..n).map(|i| format!("step {}", (i * 7) % 11)).collect();
        // coarse grids so ties occur
        let betas: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..5u8)) / 4.0)
            .collect();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..rng.random_range(1..4))
                    .map(|_| f64::from(rng.random_range(1..5u8)) / 4.0)
                    .collect()
            })
            .collect();
        let scored = |lambda: f64| {
            (0..n)
                .map(|i| {
                    score_with_beta(candidate(texts[i].clone(), &probs[i]), betas[i], lambda)
                        .unwrap()
                })
                .collect::<Vec<_>>()
        };
        let s1 = scored(1.0);
        assert_eq!(argmax_score(&s1).unwrap(), brute_argmax(&texts, &betas));
        let s0 = scored(0.0);
        let pbars: Vec<f64> = s0.iter().map(|s| s.pbar).collect();
        assert_eq!(argmax_score(&s0).unwrap(), brute_argmax(&texts, &pbars));
    }
}

#[test]
fn guided_without_confidence_weight_is_greedy() {
    let model = common::planted_model(1.0, 6);
    let predictor = common::step_predictor(&model, 6, Execution::Parallel);
    for task in toy_benchmark(20, 2, 4, 31) {
        let run = |strategy, m| {
            let params = DecodeParams {
                strategy,
                m,
                lambda: 0.0,
                ..DecodeParams::default()
            };
            decode(&model, Some(&predictor), &task.question, &[], &params).unwrap()
        };
        let guided = run(Strategy::Guided, 1);
        let greedy = run(Strategy::GreedyFewshot, 1);
        assert_eq!(guided.chain.step_texts(), greedy.chain.step_texts());
        assert_eq!(guided.answer, greedy.answer);
    }
}

fn fixture_tasks(suite: &[common::FixtureTask]) -> Vec<BenchmarkTask> {
    suite
        .iter()
        .enumerate()
        .map(|(i, t)| BenchmarkTask {
            id: format!("fx-{i}"),
            question: t.question.clone(),
            answer: t.answer.clone(),
        })
        .collect()
}

#[test]
fn self_correction_recovers_truthful_steps() {
    let suite = common::correction_suite();
    let model = common::fixture_model(&suite);
    let predictor = common::identity_predictor();
    let tasks = fixture_tasks(&suite);
    let run = |threshold| {
        run_benchmark(
            &model,
            Some(&predictor),
            &tasks,
            &[],
            &common::fixture_params(threshold),
            Execution::Sequential,
            false,
        )
        .unwrap()
    };
    let plain = run(None);
    let corrected = run(Some(0.5));
    assert_eq!(plain.accuracy(), 0.0);
    assert!((corrected.accuracy() - 4.0 / 6.0).abs() < 1e-12);
    for m in &corrected.manifests {
        assert_eq!(m.diagnostics.corrections, 1);
        assert!(m.chain[0].corrected);
    }
    // the unrecorded regeneration fails softly and keeps the first pass
    assert_eq!(corrected.manifests[5].diagnostics.correction_failures, 1);
    assert_eq!(corrected.manifests[5].answer, plain.manifests[5].answer);
    // a worse regeneration never displaces the first-pass pick
    assert_eq!(corrected.manifests[4].answer, plain.manifests[4].answer);
}

#[test]
fn correction_gate_stays_closed_above_threshold() {
    let mut suite = common::correction_suite();
    for t in &mut suite {
        t.first = vec![
            common::fixture_candidate("\\boxed{1}", 0.6, 0.5),
            common::fixture_candidate("\\boxed{2}", 0.9, 0.7),
        ];
    }
    let model = common::fixture_model(&suite);
    let predictor = common::identity_predictor();
    let run = run_benchmark(
        &model,
        Some(&predictor),
        &fixture_tasks(&suite),
        &[],
        &common::fixture_params(Some(0.5)),
        Execution::Sequential,
        false,
    )
    .unwrap();
    for m in &run.manifests {
        assert_eq!(m.diagnostics.corrections, 0);
        assert!(!m.chain[0].corrected);
        assert_eq!(m.answer, "2");
    }
}

#[test]
fn benchmark_is_identical_across_execution_policies() {
    let model = common::planted_model(1.0, 2);
    let predictor = common::step_predictor(&model, 2, Execution::Parallel);
    let tasks = toy_benchmark(30, 2, 4, 5);
    for strategy in Strategy::ALL {
        let params = DecodeParams {
            strategy,
            seed: 9,
            ..DecodeParams::default()
        };
        let a = run_benchmark(
            &model,
            Some(&predictor),
            &tasks,
            &[],
            &params,
            Execution::Sequential,
            false,
        )
        .unwrap();
        let b = run_benchmark(
            &model,
            Some(&predictor),
            &tasks,
            &[],
            &params,
            Execution::Parallel,
            false,
        )
        .unwrap();
        assert_eq!(a.rows, b.rows, "{strategy}");
        assert_eq!(a.manifests, b.manifests, "{strategy}");
    }
}

#[test]
fn chains_respect_step_and_token_limits() {
    let model = common::planted_model(1.0, 2);
    let predictor = common::step_predictor(&model, 2, Execution::Parallel);
    for task in toy_benchmark(10, 4, 6, 8) {
        let params = DecodeParams {
            max_steps: 2,
            ..DecodeParams::default()
        };
        let out = decode(&model, Some(&predictor), &task.question, &[], &params).unwrap();
        assert!(out.chain.steps.len() <= 2);
        let tight = DecodeParams {
            max_new_tokens: 12,
            ..DecodeParams::default()
        };
        let out = decode(&model, Some(&predictor), &task.question, &[], &tight).unwrap();
        assert!(out.chain.tokens_used <= 12);
        assert!(out.chain.finished);
    }
}

proptest! {
    #[test]
    fn combined_score_lies_between_its_parts(
        beta in 0.0f64..=1.0,
        probs in proptest::collection::vec(0.01f64..=1.0, 1..6),
        lambda in 0.0f64..=1.0,
    ) {
        let s = score_with_beta(candidate("x".into(), &probs), beta, lambda).unwrap();
        let (lo, hi) = (beta.min(s.pbar), beta.max(s.pbar));
        prop_assert!(s.score >= lo - 1e-15 && s.score <= hi + 1e-15);
        prop_assert!(s.pbar > 0.0 && s.pbar <= 1.0);
    }
}
