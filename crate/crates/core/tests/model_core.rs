mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use veritas::model::trace::{
    read_trace_file, write_trace_file, ReplayBuilder, ReplayCandidate, Trace, TraceHeader,
    TraceRecord,
};
use veritas::model::{
    CognitiveModel, GenerationParams, HeadActivations, ModelDims, ReplayModel, TinyTransformer,
    TokenSeq, TransformerConfig,
};
use veritas::probing::{collect_activations, fit_probe_grid, LabeledActivations, ProbeHyper};
use veritas::Execution;

fn transformer(
    layers: usize,
    heads: usize,
    d_head: usize,
    vocab: usize,
    seed: u64,
) -> TinyTransformer {
    let dims = ModelDims::new(layers, heads, d_head, vocab).unwrap();
    TinyTransformer::new(TransformerConfig::new(dims, seed)).unwrap()
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> TokenSeq {
    let n = rng.random_range(1..=max_len);
    TokenSeq::new((0..n).map(|_| rng.random_range(0..vocab as u32)).collect()).unwrap()
}

#[test]
fn forward_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..50u64 {
        let (l, h, d) = (
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=6),
        );
        let model = transformer(l, h, d, 11, case);
        let tokens = random_tokens(&mut rng, 11, 12);
        let fast = model.forward_trace(&tokens).unwrap();
        let slow = common::naive_forward(&model, tokens.as_slice());
        for (a, b) in fast.probs.iter().zip(&slow.probs) {
            assert!((a - b).abs() <= 1e-10, "case {case}: prob {a} vs {b}");
        }
        for (a, b) in fast.activations.values().iter().zip(&slow.activations) {
            assert!((a - b).abs() <= 1e-10, "case {case}: activation {a} vs {b}");
        }
    }
}

#[test]
fn attention_rows_are_causal_distributions() {
    let model = transformer(2, 3, 4, 9, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let tokens = random_tokens(&mut rng, 9, 16);
        let trace = model.forward_trace(&tokens).unwrap();
        for layer in &trace.attention {
            for a in layer {
                for (i, row) in a.outer_iter().enumerate() {
                    assert!((row.sum() - 1.0).abs() <= 1e-9);
                    assert!(row.iter().skip(i + 1).all(|&w| w == 0.0));
                }
            }
        }
    }
}

#[test]
fn output_projection_does_not_touch_its_own_tap() {
    let model = transformer(3, 4, 5, 13, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let tokens = random_tokens(&mut rng, 13, 10);
        let base = model.activations(&tokens).unwrap();
        for layer in 0..3 {
            let zeroed = model.with_zeroed_output_projection_layers(&[layer]);
            let acts = zeroed.activations(&tokens).unwrap();
            // layers up to and including the zeroed one see the same inputs
            for l in 0..=layer {
                for h in 0..4 {
                    assert_eq!(acts.head(l, h), base.head(l, h));
                }
            }
        }
    }
    let single = transformer(1, 4, 5, 13, 9);
    let tokens = random_tokens(&mut rng, 13, 10);
    assert_eq!(
        single
            .with_zeroed_output_projections()
            .activations(&tokens)
            .unwrap(),
        single.activations(&tokens).unwrap()
    );
}

#[test]
fn wide_beam_enumerates_every_continuation() {
    let model = transformer(1, 2, 3, 8, 21);
    let context = TokenSeq::new(vec![1, 5]).unwrap();
    let params = GenerationParams {
        max_new_tokens: 3,
        ..GenerationParams::default()
    };
    let set = model.generate_candidates(&context, 512, &params).unwrap();
    assert_eq!(set.candidates.len(), 512);

    // brute force: every 3-token continuation, scored token by token
    let mut expected = Vec::new();
    for a in 0..8u32 {
        for b in 0..8u32 {
            for c in 0..8u32 {
                let mut lp = Vec::new();
                let mut seq = context.clone();
                for t in [a, b, c] {
                    lp.push(model.next_token_probs(&seq).unwrap()[t as usize].ln());
                    seq = seq.extended(&[t]);
                }
                expected.push((format!("{a} {b} {c}"), lp));
            }
        }
    }
    for c in &set.candidates {
        let (_, lp) = expected
            .iter()
            .find(|(t, _)| *t == c.text)
            .expect("enumerated");
        for (x, y) in lp.iter().zip(&c.token_logprobs) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    // width 1 is greedy decoding
    let greedy = model
        .generate_candidates(&context, 1, &params)
        .unwrap()
        .candidates
        .remove(0);
    let mut seq = context.clone();
    let mut tokens = Vec::new();
    for _ in 0..3 {
        let p = model.next_token_probs(&seq).unwrap();
        let t = (0..p.len())
            .max_by(|&i, &j| p[i].total_cmp(&p[j]).then(j.cmp(&i)))
            .unwrap() as u32;
        tokens.push(t);
        seq = seq.extended(&[t]);
    }
    assert_eq!(greedy.token_ids, tokens);
}

fn rounded(a: &HeadActivations) -> HeadActivations {
    let (l, h, d) = a.shape();
    HeadActivations::from_vec(l, h, d, a.to_f32().iter().map(|&x| f64::from(x)).collect()).unwrap()
}

#[test]
fn replayed_candidates_match_live_generation() {
    let model = common::planted_model(1.0, 3);
    let tasks = veritas::decoding::toy_benchmark(5, 2, 3, 9);
    let params = GenerationParams::default();
    let mut builder = ReplayBuilder::default();
    let mut live = Vec::new();
    for t in &tasks {
        let set = model
            .generate_candidates(&model.encode(&t.question).unwrap(), 3, &params)
            .unwrap();
        builder
            .add(
                &t.question,
                set.candidates
                    .iter()
                    .map(|c| ReplayCandidate {
                        text: c.text.clone(),
                        token_logprobs: c.token_logprobs.clone(),
                        activations: c.activations.to_f32(),
                        token_ids: None,
                        truncated: false,
                    })
                    .collect(),
            )
            .unwrap();
        live.push(set.candidates);
    }
    let dims = ModelDims::new(8, 8, 16, 257).unwrap();
    let replay = ReplayModel::new(dims, None, builder.finish()).unwrap();
    for (t, live) in tasks.iter().zip(&live) {
        let got = replay
            .generate_candidates(&replay.encode(&t.question).unwrap(), 3, &params)
            .unwrap();
        assert_eq!(got.candidates.len(), live.len());
        for (r, l) in got.candidates.iter().zip(live) {
            assert_eq!(r.text, l.text);
            assert_eq!(r.token_logprobs, l.token_logprobs);
            assert_eq!(r.activations, rounded(&l.activations));
            let via_text = replay
                .activations(&replay.encode(&format!("{}{}", t.question, r.text)).unwrap())
                .unwrap();
            assert_eq!(via_text, r.activations);
        }
    }
}

#[test]
fn probe_grid_from_trace_equals_in_process_grid() {
    let model = common::planted_model(1.0, 5);
    let split = common::noncot_split(60, (0.5, 0.5, 0.0), 2);
    let exec = Execution::Sequential;
    let live_train = collect_activations(&model, &split.train, None, exec).unwrap();
    let live_val = collect_activations(&model, &split.validation, None, exec).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let to_trace = |set: &LabeledActivations| Trace {
        header: TraceHeader::new(&model.dims(), "planted"),
        records: set
            .tensors
            .iter()
            .zip(&set.labels)
            .enumerate()
            .map(|(i, (t, &l))| TraceRecord {
                example_id: i as u64,
                label: Some(l),
                prompt_token_count: 1,
                activations: t.to_f32(),
            })
            .collect(),
    };
    let (pt, pv) = (dir.path().join("train.vtrc"), dir.path().join("val.vtrc"));
    write_trace_file(&pt, &to_trace(&live_train)).unwrap();
    write_trace_file(&pv, &to_trace(&live_val)).unwrap();
    let replay_train = LabeledActivations::from_trace(&read_trace_file(&pt).unwrap()).unwrap();
    let replay_val = LabeledActivations::from_trace(&read_trace_file(&pv).unwrap()).unwrap();

    let round_set = |s: &LabeledActivations| {
        LabeledActivations::new(
            replay_ids(s.len()),
            s.tensors.iter().map(rounded).collect(),
            s.labels.clone(),
        )
        .unwrap()
    };
    for (a, b) in replay_train.tensors.iter().zip(&live_train.tensors) {
        assert_eq!(*a, rounded(b));
    }
    let hyper = ProbeHyper::default();
    let from_trace = fit_probe_grid(&replay_train, &replay_val, &hyper, exec).unwrap();
    let in_process =
        fit_probe_grid(&round_set(&live_train), &round_set(&live_val), &hyper, exec).unwrap();
    assert_eq!(from_trace, in_process);
}

fn replay_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn next_token_distribution_sums_to_one(seed in 0u64..1000, toks in proptest::collection::vec(0u32..7, 1..10)) {
        let model = transformer(2, 2, 3, 7, seed);
        let p = model.next_token_probs(&TokenSeq::new(toks).unwrap()).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
    }
}
