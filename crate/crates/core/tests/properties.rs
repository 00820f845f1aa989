use proptest::prelude::*;
use sonarllm::analysis::{fit_scaling_law, flops_sonar_llm, flops_token_llm, ArchShape, FlopsModel};
use sonarllm::checkpoint::Checkpoint;
use sonarllm::codec::{CodecConfig, SentenceCodec};
use sonarllm::concept::rope_rotate;
use sonarllm::inference::{generate_with, StopRule};
use sonarllm::tensor::{dot, norm};
use sonarllm::text::{build_vocab, generate_synthetic_corpus, DEFAULT_SENTINEL};
use sonarllm::{grad_check, FrozenCodec, HeadKind, SentenceEmbedding, Tensor};

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0f64..3.0, len)
}

fn tiny_codec() -> FrozenCodec {
    let docs = generate_synthetic_corpus(2, 10).unwrap();
    let vocab = build_vocab(&docs, 300).unwrap();
    let cc = CodecConfig {
        d: 8,
        enc_layers: 1,
        dec_layers: 1,
        n_heads: 2,
        ffn_mult: 2,
        vocab_size: vocab.len(),
        ..CodecConfig::default()
    };
    SentenceCodec::new(cc, 1)
        .unwrap()
        .freeze(vocab, DEFAULT_SENTINEL)
        .unwrap()
}

fn shape(n_layers: usize, d_model: usize, head: HeadKind) -> ArchShape {
    ArchShape {
        n_layers,
        d_model,
        n_heads: 2,
        ffn_mult: 3,
        vocab_size: 100,
        d_embed: 16,
        head,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_chain_gradient(a in values(6), b in values(12)) {
        let w = Tensor::new(vec![3, 4], b).unwrap();
        let err = grad_check(
            |t, x| {
                let w = t.constant(w.clone());
                let y = t.matmul(x, w)?;
                let y = t.silu(y);
                let y = t.softmax(y, 1)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            &Tensor::new(vec![2, 3], a).unwrap(),
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn rope_preserves_norm_and_relative_angles(q in values(8), k in values(8), m in 0usize..200, n in 0usize..200, s in 0usize..200) {
        let rot = |x: &[f64], p: usize| {
            let mut x = x.to_vec();
            rope_rotate(&mut x, p, 10000.0, false);
            x
        };
        prop_assert!((norm(&rot(&q, m)) - norm(&q)).abs() < 1e-12);
        let lhs = dot(&rot(&q, m), &rot(&k, n));
        let rhs = dot(&rot(&q, m + s), &rot(&k, n + s));
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn flops_match_per_step_sums(t in 1u64..3000, lambda in 1u64..80, layers in 0usize..4, width in 1usize..5) {
        let d = 8 * width;
        let m = FlopsModel {
            token: shape(layers, d, HeadKind::Token),
            concept: shape(layers, d, HeadKind::Concept),
            encoder: shape(1, 16, HeadKind::Token),
            decoder: shape(1, 16, HeadKind::Token),
            lambda,
        };
        let step = |s: &ArchShape, i: u128| 2 * s.params() + 4 * (s.n_layers * s.d_model) as u128 * i;
        let token: u128 = (1..=t as u128).map(|i| step(&m.token, i)).sum();
        prop_assert_eq!(flops_token_llm(&m.token, t), token);

        let l = lambda as u128;
        let enc = 2 * m.encoder.params() * l + 2 * 16 * l * l;
        let dec: u128 = (1..=l).map(|i| step(&m.decoder, i)).sum();
        let sentences = t.div_ceil(lambda) as u128;
        let sonar: u128 = (1..=sentences).map(|s| step(&m.concept, s) + enc + dec).sum();
        prop_assert_eq!(flops_sonar_llm(&m, t), sonar);
    }

    #[test]
    fn noise_free_power_laws_are_recovered(a in 1e2f64..1e6, alpha in 0.1f64..1.5, b in 0.5f64..5.0) {
        let ns = [11e6, 34e6, 170e6, 450e6, 700e6];
        let pts: Vec<(f64, f64)> = ns.iter().map(|&n: &f64| (n, a * n.powf(-alpha) + b)).collect();
        let spread = pts[0].1 - pts[4].1;
        prop_assume!(spread > 1e-6 * b);
        let fit = fit_scaling_law(&pts).unwrap();
        prop_assert!((fit.alpha - alpha).abs() < 1e-3, "{} vs {}", fit.alpha, alpha);
        prop_assert!(fit.r2 > 0.99999);
    }

    #[test]
    fn checkpoint_bytes_round_trip(data in proptest::collection::vec(proptest::num::f64::ANY, 1..40), name in "[a-z.]{1,12}") {
        let n = data.len();
        let c = Checkpoint {
            config_text: "k = 1".into(),
            vocab: vec!["w".into()],
            arrays: vec![(name, Tensor::new(vec![n], data).unwrap())],
        };
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let same = back.arrays[0].1.data().iter().zip(c.arrays[0].1.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        prop_assert!(same);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn raising_the_threshold_never_shortens_output(seed in 0u64..1000, t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
        let codec = tiny_codec();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let run = |tau: f64| {
            let rule = StopRule::new(tau, 12, codec.sentinel_embedding().clone()).unwrap();
            // deterministic stub: a seeded rotation towards or away from the sentinel
            let mut step = 0u64;
            let eot = codec.sentinel_embedding().values().to_vec();
            let mut stub = move |prev: &SentenceEmbedding| {
                step += 1;
                let w = ((seed.wrapping_mul(31).wrapping_add(step * 17)) % 100) as f64 / 50.0 - 1.0;
                let v: Vec<f64> = eot.iter().zip(prev.values()).map(|(e, p)| w * e + 0.5 * p).collect();
                Ok(SentenceEmbedding::new(v))
            };
            generate_with(&mut stub, &codec, "Tom had a red ball. He was happy.", &rule)
        };
        match (run(lo), run(hi)) {
            (Ok(a), Ok(b)) => prop_assert!(b.sentences.len() >= a.sentences.len()),
            (a, b) => prop_assert!(a.is_err() && b.is_err()),
        }
    }
}
