//! BLEU, ROUGE-L and an exact-match METEOR variant, plus the next-sentence
//! evaluation harness.

use std::collections::HashMap;
use std::fmt;

use crate::codec::FrozenCodec;
use crate::concept::{ConceptTransformer, TokenLm};
use crate::error::{Error, Result};
use crate::text::{self, Document, BOS, EOS};

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU up to `max_n`-grams. Precisions for `n ≥ 2` are smoothed by
/// adding one to both clipped matches and the n-gram total.
pub fn bleu<T: Eq + std::hash::Hash>(candidate: &[T], reference: &[T], max_n: usize) -> f64 {
    if candidate.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let total = candidate.len().saturating_sub(n - 1);
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / max_n as f64).exp()
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Exact-match METEOR: greedy left-to-right unigram alignment, recall-weighted
/// harmonic mean and a cubic fragmentation penalty.
pub fn meteor_lite<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut alignment = Vec::new();
    for (i, tok) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok) {
            used[j] = true;
            alignment.push((i, j));
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefixMode {
    /// The first two sentences.
    Short,
    /// The first half of the sentences, rounded down.
    Long,
}

impl PrefixMode {
    pub fn prefix_len(self, n_sentences: usize) -> usize {
        match self {
            PrefixMode::Short => 2,
            PrefixMode::Long => n_sentences / 2,
        }
    }
}

impl fmt::Display for PrefixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrefixMode::Short => "short",
            PrefixMode::Long => "long",
        })
    }
}

impl std::str::FromStr for PrefixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(PrefixMode::Short),
            "long" => Ok(PrefixMode::Long),
            _ => Err(Error::config(format!(
                "unknown prefix mode `{s}` (expected short or long)"
            ))),
        }
    }
}

/// Produces one continuation sentence for a prefix of sentences.
pub trait NextSentencePredictor {
    fn predict(&mut self, prefix: &[String]) -> Result<String>;
}

impl<F: FnMut(&[String]) -> Result<String>> NextSentencePredictor for F {
    fn predict(&mut self, prefix: &[String]) -> Result<String> {
        self(prefix)
    }
}

/// Encodes the prefix, predicts one embedding and decodes it.
pub struct ConceptPredictor<'a> {
    pub model: &'a ConceptTransformer,
    pub codec: &'a FrozenCodec,
}

impl NextSentencePredictor for ConceptPredictor<'_> {
    fn predict(&mut self, prefix: &[String]) -> Result<String> {
        let mut session = self.model.session();
        let mut next = None;
        for s in prefix {
            next = Some(session.push(&self.codec.encode_text(s)?)?);
        }
        let next = next.ok_or_else(|| Error::contract("empty prefix"))?;
        self.codec.decode_text(&next)
    }
}

/// Greedy token continuation until a sentence terminator or `EOS`.
pub struct TokenPredictor<'a> {
    pub model: &'a TokenLm,
    pub codec: &'a FrozenCodec,
    pub max_tokens: usize,
}

impl NextSentencePredictor for TokenPredictor<'_> {
    fn predict(&mut self, prefix: &[String]) -> Result<String> {
        let vocab = self.codec.vocab();
        let mut prompt = vec![BOS];
        for s in prefix {
            let ids = text::encode_tokens(s, vocab);
            prompt.extend_from_slice(&ids[1..ids.len() - 1]);
        }
        let mut stop: Vec<usize> = [".", "!", "?"].iter().filter_map(|t| vocab.id(t)).collect();
        stop.push(EOS);
        let mut out = self.model.greedy_continue(&prompt, &stop, self.max_tokens)?;
        if out.last() == Some(&EOS) {
            out.pop();
        }
        text::decode_tokens(&out, vocab)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleScore {
    pub doc: usize,
    pub prediction: String,
    pub reference: String,
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub examples: Vec<ExampleScore>,
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    /// Documents with too few sentences for the prefix mode.
    pub skipped: usize,
}

impl MetricReport {
    /// Per-example rows, then a `mean` row whose last column is the skip count.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("doc,bleu,rouge_l,meteor,skipped\n");
        for e in &self.examples {
            out.push_str(&format!("{},{},{},{},\n", e.doc, e.bleu, e.rouge_l, e.meteor));
        }
        out.push_str(&format!(
            "mean,{},{},{},{}\n",
            self.bleu, self.rouge_l, self.meteor, self.skipped
        ));
        out
    }
}

pub fn score_pair(prediction: &str, reference: &str) -> (f64, f64, f64) {
    let c = text::tokenize(prediction);
    let r = text::tokenize(reference);
    (bleu(&c, &r, 4), rouge_l(&c, &r), meteor_lite(&c, &r))
}

/// Scores one predicted sentence per document against the sentence that
/// actually follows the prefix. The sentinel never counts as a sentence.
pub fn next_sentence_harness(
    predictor: &mut dyn NextSentencePredictor,
    docs: &[Document],
    mode: PrefixMode,
) -> Result<MetricReport> {
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (i, doc) in docs.iter().enumerate() {
        let content = doc.content();
        let k = mode.prefix_len(content.len());
        if k == 0 || k >= content.len() {
            skipped += 1;
            continue;
        }
        let prediction = predictor.predict(&content[..k])?;
        let reference = content[k].clone();
        let (b, r, m) = score_pair(&prediction, &reference);
        examples.push(ExampleScore {
            doc: i,
            prediction,
            reference,
            bleu: b,
            rouge_l: r,
            meteor: m,
        });
    }
    if examples.is_empty() {
        return Err(Error::contract(format!(
            "no document is long enough for the {mode} prefix"
        )));
    }
    if skipped > 0 {
        log::warn!("{skipped} documents too short for the {mode} prefix");
    }
    let n = examples.len() as f64;
    let mean = |f: fn(&ExampleScore) -> f64| examples.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        bleu: mean(|e| e.bleu),
        rouge_l: mean(|e| e.rouge_l),
        meteor: mean(|e| e.meteor),
        examples,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::DEFAULT_SENTINEL;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    /// Clipped n-gram matches by direct enumeration of positions.
    fn brute_bleu(c: &[&str], r: &[&str], max_n: usize) -> f64 {
        let mut logp = 0.0;
        for n in 1..=max_n {
            let cg: Vec<&[&str]> = (0..c.len().saturating_sub(n - 1)).map(|i| &c[i..i + n]).collect();
            let rg: Vec<&[&str]> = (0..r.len().saturating_sub(n - 1)).map(|i| &r[i..i + n]).collect();
            let mut taken = vec![false; rg.len()];
            let mut m = 0;
            for g in &cg {
                if let Some(j) = (0..rg.len()).find(|&j| !taken[j] && rg[j] == *g) {
                    taken[j] = true;
                    m += 1;
                }
            }
            let p = if n == 1 {
                m as f64 / cg.len() as f64
            } else {
                (m + 1) as f64 / (cg.len() + 1) as f64
            };
            logp += p.ln() / max_n as f64;
        }
        let bp = if c.len() > r.len() {
            1.0
        } else {
            (1.0 - r.len() as f64 / c.len() as f64).exp()
        };
        bp * logp.exp()
    }

    fn memo_lcs(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + memo_lcs(a, b, i + 1, j + 1, memo)
        } else {
            memo_lcs(a, b, i + 1, j, memo).max(memo_lcs(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }

    #[test]
    fn bleu_cases() {
        let s = toks("the cat sat on the mat");
        assert!((bleu(&s, &s, 4) - 1.0).abs() < 1e-12);
        assert_eq!(bleu(&toks("a b c"), &toks("x y z"), 4), 0.0);
        assert_eq!(bleu::<&str>(&[], &toks("x"), 4), 0.0);
        let c = toks("the cat sat");
        let r = toks("the cat sat down");
        let v = bleu(&c, &r, 4);
        assert!((v - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!((v - brute_bleu(&c, &r, 4)).abs() < 1e-12);
        let c = toks("the the cat on a mat mat");
        let r = toks("the cat is on the mat");
        assert!((bleu(&c, &r, 4) - brute_bleu(&c, &r, 4)).abs() < 1e-12);
    }

    #[test]
    fn rouge_cases() {
        let v = rouge_l(&toks("a b c"), &toks("a c b"));
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("a b"), &toks("a b")), 1.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")), 0.0);
        assert_eq!(rouge_l::<&str>(&[], &toks("a")), 0.0);
        let (x, y) = (toks("a b c d e"), toks("b a d c e"));
        assert_eq!(rouge_l(&x, &y), rouge_l(&y, &x));
    }

    #[test]
    fn meteor_cases() {
        let s = toks("a b c d e");
        assert!((meteor_lite(&s, &s) - (1.0 - 0.5 * (1.0f64 / 5.0).powi(3))).abs() < 1e-12);
        assert_eq!(meteor_lite(&toks("a b"), &toks("c d")), 0.0);
        // alignment a→0, b→2, c→1, d→3: four chunks of one match each
        let v = meteor_lite(&toks("a b c d"), &toks("a c b d"));
        assert!((v - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn lcs_matches_memoised_recursion(a in proptest::collection::vec(0u8..4, 0..=12), b in proptest::collection::vec(0u8..4, 0..=12)) {
            prop_assert_eq!(lcs_len(&a, &b), memo_lcs(&a, &b, 0, 0, &mut HashMap::new()));
        }

        #[test]
        fn metrics_stay_in_unit_interval(a in proptest::collection::vec(0u8..5, 0..=10), b in proptest::collection::vec(0u8..5, 0..=10)) {
            for v in [bleu(&a, &b, 4), rouge_l(&a, &b), meteor_lite(&a, &b)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    fn docs() -> Vec<Document> {
        vec![
            Document::from_text("Tom had a ball. He went to the park. He was happy.", DEFAULT_SENTINEL),
            Document::from_text(
                "Mia had a cat. The cat was sad. Mia gave it milk. It purred. Then it slept.",
                DEFAULT_SENTINEL,
            ),
            Document::from_text("Sam ran.", DEFAULT_SENTINEL),
        ]
    }

    #[test]
    fn echo_stub_scores_maxima_and_short_docs_are_skipped() {
        let d = docs();
        let mut echo = |prefix: &[String]| -> Result<String> {
            let doc = d.iter().find(|doc| doc.content().starts_with(prefix)).unwrap();
            Ok(doc.content()[prefix.len()].clone())
        };
        let r = next_sentence_harness(&mut echo, &d, PrefixMode::Short).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.examples.len(), 2);
        assert_eq!((r.bleu, r.rouge_l), (1.0, 1.0));
        let want = r
            .examples
            .iter()
            .map(|e| {
                let t = text::tokenize(&e.reference);
                meteor_lite(&t, &t)
            })
            .sum::<f64>()
            / 2.0;
        assert!((r.meteor - want).abs() < 1e-12);
        assert_eq!(r.examples[1].reference, "Mia gave it milk.");

        let long = next_sentence_harness(&mut echo, &d, PrefixMode::Long).unwrap();
        assert_eq!(long.examples[1].reference, "Mia gave it milk.");
        assert_eq!(long.examples[0].reference, "He went to the park.");
    }

    #[test]
    fn unrelated_stub_scores_zero() {
        let mut fixed = |_: &[String]| -> Result<String> { Ok("Zebras quietly juggle umbrellas".to_string()) };
        let r = next_sentence_harness(&mut fixed, &docs(), PrefixMode::Short).unwrap();
        assert_eq!((r.bleu, r.rouge_l, r.meteor), (0.0, 0.0, 0.0));
        assert!(r.to_csv().ends_with("mean,0,0,0,1\n"));
    }

    #[test]
    fn prefix_mode_parsing() {
        assert_eq!("long".parse::<PrefixMode>().unwrap(), PrefixMode::Long);
        assert!("medium".parse::<PrefixMode>().is_err());
    }
}
