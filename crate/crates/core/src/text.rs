//! Sentence segmentation, word-level vocabulary, token framing and the
//! synthetic story generator used for hermetic experiments.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_SENTINEL: &str = "End of sequence.";
pub const DEFAULT_MAX_SENTENCE_TOKENS: usize = 64;

/// Words ending in a period that never close a sentence.
pub const ABBREVIATIONS: [&str; 8] = ["Mr.", "Mrs.", "Dr.", "St.", "vs.", "etc.", "e.g.", "i.e."];

const TERMINATORS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 4] = ['"', '\'', ')', ']'];

fn is_abbreviation(word: &str) -> bool {
    let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    ABBREVIATIONS.iter().any(|a| a.eq_ignore_ascii_case(word))
}

/// Splits text after `.`, `!` or `?` (plus any closing quotes) when the
/// next non-space character starts a capitalised word or the text ends.
/// Periods ending a word from [`ABBREVIATIONS`] never split.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if !TERMINATORS.contains(&c) {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && (TERMINATORS.contains(&chars[j].1) || CLOSERS.contains(&chars[j].1)) {
            j += 1;
        }
        let end = chars.get(j).map_or(text.len(), |&(p, _)| p);
        let boundary = if j == chars.len() {
            true
        } else if chars[j].1.is_whitespace() {
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            k == chars.len() || starts_capitalised(&chars[k..])
        } else {
            false
        };
        let abbreviated = c == '.' && j == i + 1 && {
            let word_start = text[..pos].rfind(char::is_whitespace).map_or(0, |w| w + 1);
            is_abbreviation(&text[word_start..=pos])
        };
        if boundary && !abbreviated {
            push_trimmed(&mut out, &text[start..end]);
            start = end;
        }
        i = j;
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn starts_capitalised(rest: &[(usize, char)]) -> bool {
    let mut it = rest.iter().map(|&(_, c)| c);
    match it.next() {
        Some(c) if c.is_uppercase() || c.is_ascii_digit() => true,
        Some('"' | '\'' | '(' | '[') => it.next().is_some_and(char::is_uppercase),
        _ => false,
    }
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

/// Collapses every whitespace run to a single space.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace split with punctuation detached: each token is a run of
/// alphanumerics (apostrophes allowed inside) or a single other character.
pub fn tokenize(s: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    for chunk in s.split_whitespace() {
        let mut word_start: Option<usize> = None;
        let bytes: Vec<(usize, char)> = chunk.char_indices().collect();
        for (n, &(i, c)) in bytes.iter().enumerate() {
            let inner_apostrophe =
                c == '\'' && word_start.is_some() && bytes.get(n + 1).is_some_and(|&(_, d)| d.is_alphanumeric());
            if c.is_alphanumeric() || inner_apostrophe {
                word_start.get_or_insert(i);
            } else {
                if let Some(ws) = word_start.take() {
                    tokens.push(&chunk[ws..i]);
                }
                tokens.push(&chunk[i..i + c.len_utf8()]);
            }
        }
        if let Some(ws) = word_start {
            tokens.push(&chunk[ws..]);
        }
    }
    tokens
}

fn attaches_left(token: &str) -> bool {
    matches!(token, "." | "," | "!" | "?" | ";" | ":" | ")" | "]")
}

/// Inverse of [`tokenize`] for ordinary prose.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !attaches_left(t) && !out.ends_with(['(', '[']) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, usize>,
    token_of: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in id order after the reserved ones.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut token_of: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        token_of.extend(tokens.into_iter().map(Into::into));
        let mut id_of = HashMap::with_capacity(token_of.len());
        for (i, t) in token_of.iter().enumerate() {
            if id_of.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { id_of, token_of })
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_of.get(id).map(String::as_str)
    }

    /// Corpus tokens in id order (reserved entries excluded).
    pub fn corpus_tokens(&self) -> &[String] {
        &self.token_of[RESERVED.len()..]
    }
}

/// Keeps the `max_size − 4` most frequent tokens; ties go to the
/// lexicographically smaller token.
pub fn build_vocab(corpus: &[Document], max_size: usize) -> Result<Vocabulary> {
    if max_size < RESERVED.len() + 1 {
        return Err(Error::config(format!("vocabulary max_size {max_size} is below 5")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for s in &doc.sentences {
            for t in tokenize(s) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(t, _)| !RESERVED.contains(t)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// Token ids of `s`, framed as `BOS … EOS`; unknown tokens map to `UNK`.
pub fn encode_tokens(s: &str, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(tokenize(s).into_iter().map(|t| vocab.id(t).unwrap_or(UNK)));
    ids.push(EOS);
    ids
}

/// Text for `ids`, dropping padding and framing tokens.
pub fn decode_tokens(ids: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::Index {
            what: "vocabulary",
            index: id,
            len: vocab.len(),
        })?;
        if !matches!(id, PAD | BOS | EOS) {
            words.push(tok);
        }
    }
    Ok(detokenize(&words))
}

/// Caps a framed sequence at `max_len` by keeping the first `max_len − 1`
/// ids and re-appending `EOS`.
pub fn truncate_framed(mut ids: Vec<usize>, max_len: usize) -> Vec<usize> {
    if ids.len() > max_len {
        log::warn!("sentence of {} tokens truncated to {max_len}", ids.len());
        ids.truncate(max_len - 1);
        ids.push(EOS);
    }
    ids
}

/// One sentence with its framed token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceSpan {
    pub text: String,
    pub tokens: Vec<usize>,
}

impl SentenceSpan {
    pub fn new(text: &str, vocab: &Vocabulary, max_tokens: usize) -> Self {
        Self {
            text: text.to_string(),
            tokens: truncate_framed(encode_tokens(text, vocab), max_tokens),
        }
    }

    /// Tokens between the framing ids.
    pub fn content(&self) -> &[usize] {
        let end = if self.tokens.last() == Some(&EOS) {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[1.min(end)..end]
    }
}

/// Sentences of one document; the last one is always the sentinel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub sentences: Vec<String>,
}

impl Document {
    /// Appends the sentinel to already segmented sentences.
    pub fn from_sentences(mut sentences: Vec<String>, sentinel: &str) -> Self {
        sentences.push(sentinel.to_string());
        Self { sentences }
    }

    pub fn from_text(text: &str, sentinel: &str) -> Self {
        Self::from_sentences(segment_sentences(text), sentinel)
    }

    /// Sentences before the sentinel.
    pub fn content(&self) -> &[String] {
        &self.sentences[..self.sentences.len() - 1]
    }

    pub fn encode(&self, vocab: &Vocabulary, max_tokens: usize) -> EncodedDocument {
        EncodedDocument {
            sentences: self
                .sentences
                .iter()
                .map(|s| SentenceSpan::new(s, vocab, max_tokens))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDocument {
    pub sentences: Vec<SentenceSpan>,
}

impl EncodedDocument {
    /// Tokens of the whole document as one stream: `BOS`, every sentence's
    /// content tokens (sentinel included), then `EOS`.
    pub fn token_stream(&self) -> Vec<usize> {
        let mut ids = vec![BOS];
        for s in &self.sentences {
            ids.extend_from_slice(s.content());
        }
        ids.push(EOS);
        ids
    }
}

/// Parses a corpus file: documents separated by blank lines.
pub fn parse_corpus(text: &str, sentinel: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut para: Vec<&str> = Vec::new();
    let flush = |para: &mut Vec<&str>, docs: &mut Vec<Document>| {
        if !para.is_empty() {
            docs.push(Document::from_text(&para.join(" "), sentinel));
            para.clear();
        }
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut para, &mut docs);
        } else {
            para.push(line.trim());
        }
    }
    flush(&mut para, &mut docs);
    docs
}

/// Renders documents in the corpus file format (sentinels omitted).
pub fn format_corpus(docs: &[Document]) -> String {
    docs.iter()
        .map(|d| d.content().join(" "))
        .collect::<Vec<_>>()
        .join("\n\n")
        + "\n"
}

const NAMES: [(&str, bool); 8] = [
    ("Tom", true),
    ("Ben", true),
    ("Max", true),
    ("Sam", true),
    ("Lily", false),
    ("Mia", false),
    ("Anna", false),
    ("Zoe", false),
];
const ADJECTIVES: [&str; 6] = ["red", "big", "small", "blue", "new", "old"];
const OBJECTS: [&str; 8] = ["ball", "kite", "book", "hat", "cake", "drum", "boat", "doll"];
const PLACES: [&str; 6] = ["park", "garden", "forest", "beach", "river", "farm"];
const ANIMALS: [&str; 6] = ["dog", "cat", "bird", "frog", "duck", "fox"];
const FEELINGS: [&str; 6] = ["happy", "sad", "tired", "proud", "glad", "scared"];

/// Story templates after the opening line, in narrative order. Slots:
/// `{N}` name, `{P}`/`{p}` pronoun, `{O}` object, `{L}` place, `{X}` animal,
/// `{F}` a freshly drawn feeling.
const STORY_TEMPLATES: [&str; 9] = [
    "{P} liked the {O} very much.",
    "One day {p} took the {O} to the {L}.",
    "At the {L} {p} saw a {X}.",
    "The {X} wanted to play with the {O}.",
    "{P} gave the {O} to the {X}.",
    "The {X} was very {F}.",
    "Then {p} went home with the {X}.",
    "{N} was {F}.",
    "It was a good day.",
];

/// Deterministic template stories of 3–10 sentences plus the sentinel.
///
/// Each story opens with "`{N}` had a `{adj}` `{O}`." and continues with an
/// order-preserving subset of [`STORY_TEMPLATES`]; names, pronouns, objects,
/// places and animals persist across sentences.
pub fn generate_synthetic_corpus(seed: u64, n_docs: usize) -> Result<Vec<Document>> {
    if n_docs == 0 {
        return Err(Error::contract("synthetic corpus needs at least one document"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let (name, male) = NAMES[rng.gen_range(0..NAMES.len())];
        let (upper, lower) = if male { ("He", "he") } else { ("She", "she") };
        let object = OBJECTS[rng.gen_range(0..OBJECTS.len())];
        let adjective = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
        let place = PLACES[rng.gen_range(0..PLACES.len())];
        let animal = ANIMALS[rng.gen_range(0..ANIMALS.len())];

        let n_sentences = rng.gen_range(3..=10);
        let mut picks = index::sample(&mut rng, STORY_TEMPLATES.len(), n_sentences - 1).into_vec();
        picks.sort_unstable();

        let mut sentences = vec![format!("{name} had a {adjective} {object}.")];
        for t in picks {
            let feeling = FEELINGS[rng.gen_range(0..FEELINGS.len())];
            sentences.push(
                STORY_TEMPLATES[t]
                    .replace("{N}", name)
                    .replace("{P}", upper)
                    .replace("{p}", lower)
                    .replace("{O}", object)
                    .replace("{L}", place)
                    .replace("{X}", animal)
                    .replace("{F}", feeling),
            );
        }
        docs.push(Document::from_sentences(sentences, DEFAULT_SENTINEL));
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_has_no_sentences() {
        assert!(segment_sentences("").is_empty());
        assert!(segment_sentences("   \n ").is_empty());
    }

    #[test]
    fn two_terminated_sentences() {
        assert_eq!(segment_sentences("Hi. Bye!"), vec!["Hi.", "Bye!"]);
    }

    #[test]
    fn abbreviation_does_not_split() {
        assert_eq!(
            segment_sentences("Dr. Smith ran. He fell."),
            vec!["Dr. Smith ran.", "He fell."]
        );
        assert_eq!(
            segment_sentences("Bring fruit, e.g. Apples. Then go."),
            vec!["Bring fruit, e.g. Apples.", "Then go."]
        );
    }

    #[test]
    fn lowercase_continuation_and_decimals_do_not_split() {
        assert_eq!(
            segment_sentences("It cost 3.5 dollars. ok then."),
            vec!["It cost 3.5 dollars. ok then."]
        );
        assert_eq!(segment_sentences("Wait... What?"), vec!["Wait...", "What?"]);
    }

    #[test]
    fn closing_quotes_stay_with_their_sentence() {
        assert_eq!(
            segment_sentences("She said \"Go.\" Then he went."),
            vec!["She said \"Go.\"", "Then he went."]
        );
    }

    #[test]
    fn trailing_fragment_is_kept() {
        assert_eq!(segment_sentences("One. two"), vec!["One. two"]);
        assert_eq!(segment_sentences("One. Two"), vec!["One.", "Two"]);
    }

    #[test]
    fn tokenize_detaches_punctuation() {
        assert_eq!(
            tokenize("Hi, Tom's dog.  Ok!"),
            vec!["Hi", ",", "Tom's", "dog", ".", "Ok", "!"]
        );
        assert_eq!(detokenize(&tokenize("Hi, Tom's dog. Ok!")), "Hi, Tom's dog. Ok!");
    }

    fn doc(s: &str) -> Document {
        Document::from_sentences(vec![s.to_string()], DEFAULT_SENTINEL)
    }

    #[test]
    fn vocab_orders_by_frequency() {
        let v = build_vocab(
            &[Document {
                sentences: vec!["a a b".into()],
            }],
            10,
        )
        .unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.token(BOS), Some("<bos>"));
    }

    #[test]
    fn vocab_truncates_to_max_size() {
        let words: Vec<String> = (0..100).map(|i| format!("w{i:03}")).collect();
        let v = build_vocab(
            &[Document {
                sentences: vec![words.join(" ")],
            }],
            20,
        )
        .unwrap();
        assert_eq!(v.len(), 20);
        // all counts tie, so the lexicographically first survive
        assert_eq!(v.corpus_tokens()[0], "w000");
        assert_eq!(v.corpus_tokens()[15], "w015");
    }

    #[test]
    fn vocab_rejects_tiny_max_size() {
        assert!(build_vocab(&[doc("x")], 4).is_err());
    }

    #[test]
    fn encode_frames_and_falls_back_to_unk() {
        let v = build_vocab(
            &[Document {
                sentences: vec!["hi .".into()],
            }],
            10,
        )
        .unwrap();
        let ids = encode_tokens("hi .", &v);
        assert_eq!(ids, vec![BOS, v.id("hi").unwrap(), v.id(".").unwrap(), EOS]);
        assert!(encode_tokens("hi stranger", &v).contains(&UNK));
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let v = build_vocab(&[doc("a")], 10).unwrap();
        assert!(matches!(decode_tokens(&[BOS, 99], &v), Err(Error::Index { .. })));
    }

    #[test]
    fn overlong_sentences_are_truncated_with_eos() {
        let v = build_vocab(&[doc("a b c d e f")], 20).unwrap();
        let span = SentenceSpan::new("a b c d e f", &v, 5);
        assert_eq!(span.tokens.len(), 5);
        assert_eq!(span.tokens[0], BOS);
        assert_eq!(*span.tokens.last().unwrap(), EOS);
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_sentinel_terminated() {
        let a = generate_synthetic_corpus(1, 2).unwrap();
        let b = generate_synthetic_corpus(1, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_corpus(2, 2).unwrap());
        for d in &a {
            assert_eq!(d.sentences.last().unwrap(), DEFAULT_SENTINEL);
            assert!((4..=11).contains(&d.sentences.len()));
        }
        assert!(generate_synthetic_corpus(1, 0).is_err());
    }

    #[test]
    fn corpus_file_round_trip() {
        let docs = generate_synthetic_corpus(5, 4).unwrap();
        let text = format_corpus(&docs);
        assert_eq!(text.matches("\n\n").count(), 3);
        assert_eq!(parse_corpus(&text, DEFAULT_SENTINEL), docs);
    }
}
