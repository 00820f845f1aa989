use proptest::prelude::*;
use sonarllm::text::{
    build_vocab, decode_tokens, encode_tokens, format_corpus, generate_synthetic_corpus, normalize_whitespace,
    parse_corpus, segment_sentences, tokenize, DEFAULT_SENTINEL, UNK,
};

const FIXTURE: &str = include_str!("fixtures/english_50.txt");

fn check_lossless(text: &str) {
    let parts = segment_sentences(text);
    assert_eq!(normalize_whitespace(&parts.join(" ")), normalize_whitespace(text));
    for (i, p) in parts.iter().enumerate() {
        assert!(!p.trim().is_empty());
        let last = i + 1 == parts.len();
        let closed = p.trim_end_matches(['"', '\'', ')', ']']).ends_with(['.', '!', '?']);
        assert!(closed || last, "unterminated inner sentence {p:?}");
    }
}

#[test]
fn fixture_paragraphs_segment_losslessly() {
    let paragraphs: Vec<&str> = FIXTURE.split("\n\n").filter(|p| !p.trim().is_empty()).collect();
    assert_eq!(paragraphs.len(), 50);
    let mut total = 0;
    for p in &paragraphs {
        check_lossless(p);
        total += segment_sentences(p).len();
    }
    check_lossless(FIXTURE);
    assert!(total >= 150, "{total}");
}

#[test]
fn fixture_spot_checks() {
    let p = "Dr. Chen reviewed the results carefully. The numbers did not add up. She asked the lab to run every sample again.";
    assert_eq!(segment_sentences(p).len(), 3);
    let q = "\"Where are you going?\" asked the old woman. The boy pointed at the hill.";
    assert_eq!(
        segment_sentences(q),
        vec![
            "\"Where are you going?\" asked the old woman.",
            "The boy pointed at the hill."
        ]
    );
    let r = "By noon the bridge on St. Mark's Road was closed.";
    assert_eq!(segment_sentences(r).len(), 1);
}

#[test]
fn synthetic_corpus_properties() {
    let docs = generate_synthetic_corpus(3, 500).unwrap();
    for d in &docs {
        let n = d.content().len();
        assert!((3..=10).contains(&n), "{n} sentences");
        assert_eq!(d.sentences.last().unwrap(), DEFAULT_SENTINEL);
        assert_eq!(d.sentences.iter().filter(|s| *s == DEFAULT_SENTINEL).count(), 1);
        let text = d.content().join(" ");
        check_lossless(&text);
        assert_eq!(segment_sentences(&text), d.content());
    }
    let vocab = build_vocab(&docs, 10_000).unwrap();
    assert!(vocab.corpus_tokens().len() <= 124, "{}", vocab.corpus_tokens().len());
}

#[test]
fn vocabulary_is_deterministic() {
    let a = build_vocab(&generate_synthetic_corpus(7, 50).unwrap(), 100).unwrap();
    let b = build_vocab(&generate_synthetic_corpus(7, 50).unwrap(), 100).unwrap();
    assert_eq!(a, b);
    for id in 0..a.len() {
        assert_eq!(a.id(a.token(id).unwrap()), Some(id));
    }
}

#[test]
fn generated_sentences_round_trip() {
    let docs = generate_synthetic_corpus(11, 60).unwrap();
    let vocab = build_vocab(&docs, 1000).unwrap();
    let sentences: Vec<&String> = docs.iter().flat_map(|d| d.content()).take(200).collect();
    assert_eq!(sentences.len(), 200);
    for s in sentences {
        let ids = encode_tokens(s, &vocab);
        assert!(!ids.contains(&UNK));
        assert_eq!(decode_tokens(&ids, &vocab).unwrap(), normalize_whitespace(s));
    }
}

#[test]
fn corpus_file_round_trip() {
    let docs = generate_synthetic_corpus(5, 20).unwrap();
    let text = format_corpus(&docs);
    assert_eq!(parse_corpus(&text, DEFAULT_SENTINEL), docs);
}

proptest! {
    #[test]
    fn segmentation_is_total_and_lossless(s in "[A-Za-z0-9 .!?\"'\n]{0,120}") {
        let parts = segment_sentences(&s);
        prop_assert_eq!(normalize_whitespace(&parts.join(" ")), normalize_whitespace(&s));
        prop_assert!(parts.iter().all(|p| !p.trim().is_empty()));
    }

    #[test]
    fn tokens_rebuild_the_text_without_spaces(s in "[a-z .,!?']{0,80}") {
        let joined: String = tokenize(&s).concat();
        let squeezed: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        prop_assert_eq!(joined, squeezed);
    }
}
