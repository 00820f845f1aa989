//! Sentence-level generation with the sentinel stop rule.

use std::fmt;

use crate::codec::{FrozenCodec, SentenceEmbedding};
use crate::concept::{ConceptSession, ConceptTransformer};
use crate::error::{Error, Result};
use crate::tensor;
use crate::text;

pub const DEFAULT_TAU_STOP: f64 = 0.98;
pub const DEFAULT_T_MAX: usize = 32;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let (nu, nv) = (tensor::norm(u), tensor::norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::contract("cosine similarity of a zero vector"));
    }
    Ok((tensor::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StopRule {
    pub tau_stop: f64,
    pub t_max: usize,
    pub e_eot: SentenceEmbedding,
}

impl StopRule {
    pub fn new(tau_stop: f64, t_max: usize, e_eot: SentenceEmbedding) -> Result<Self> {
        if !(tau_stop > 0.0 && tau_stop <= 1.0) {
            return Err(Error::config(format!("tau_stop must be in (0, 1], got {tau_stop}")));
        }
        if t_max == 0 {
            return Err(Error::config("t_max must be at least 1"));
        }
        Ok(Self { tau_stop, t_max, e_eot })
    }

    /// Default thresholds with the codec's sentinel embedding.
    pub fn for_codec(codec: &FrozenCodec) -> Self {
        Self {
            tau_stop: DEFAULT_TAU_STOP,
            t_max: DEFAULT_T_MAX,
            e_eot: codec.sentinel_embedding().clone(),
        }
    }

    pub fn is_stop(&self, emb: &SentenceEmbedding) -> Result<bool> {
        Ok(cosine_similarity(emb.values(), self.e_eot.values())? >= self.tau_stop)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Sentinel,
    TMax,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Sentinel => "sentinel",
            StopReason::TMax => "t_max",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub sentences: Vec<String>,
    /// Every prediction made, including the one that triggered a sentinel stop.
    pub embeddings: Vec<SentenceEmbedding>,
    pub stop_reason: StopReason,
}

impl GenerationResult {
    /// One sentence per line, then `# stop_reason=<reason> sentences=<n>`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(s);
            out.push('\n');
        }
        out.push_str(&format!(
            "# stop_reason={} sentences={}\n",
            self.stop_reason,
            self.sentences.len()
        ));
        out
    }
}

/// Anything that consumes embeddings one at a time and predicts the next.
pub trait Predictor {
    fn push(&mut self, emb: &SentenceEmbedding) -> Result<SentenceEmbedding>;
}

impl Predictor for ConceptSession<'_> {
    fn push(&mut self, emb: &SentenceEmbedding) -> Result<SentenceEmbedding> {
        ConceptSession::push(self, emb)
    }
}

impl<F: FnMut(&SentenceEmbedding) -> Result<SentenceEmbedding>> Predictor for F {
    fn push(&mut self, emb: &SentenceEmbedding) -> Result<SentenceEmbedding> {
        self(emb)
    }
}

/// Feeds the prompt's embeddings, then alternates: test the latest
/// prediction against the stop rule, decode it, feed it back unchanged.
pub fn generate_from_embeddings(
    predictor: &mut dyn Predictor,
    codec: &FrozenCodec,
    prompt: &[SentenceEmbedding],
    rule: &StopRule,
) -> Result<GenerationResult> {
    if prompt.is_empty() {
        return Err(Error::contract("generation needs at least one prompt sentence"));
    }
    let mut next = None;
    for e in prompt {
        next = Some(predictor.push(e)?);
    }
    let mut next = next.expect("non-empty prompt");
    let mut sentences = Vec::new();
    let mut embeddings = Vec::new();
    loop {
        embeddings.push(next.clone());
        if rule.is_stop(&next)? {
            return Ok(GenerationResult {
                sentences,
                embeddings,
                stop_reason: StopReason::Sentinel,
            });
        }
        sentences.push(codec.decode_text(&next)?);
        if sentences.len() >= rule.t_max {
            return Ok(GenerationResult {
                sentences,
                embeddings,
                stop_reason: StopReason::TMax,
            });
        }
        next = predictor.push(&next)?;
    }
}

pub fn generate_with(
    predictor: &mut dyn Predictor,
    codec: &FrozenCodec,
    prompt_text: &str,
    rule: &StopRule,
) -> Result<GenerationResult> {
    let sentences = text::segment_sentences(prompt_text);
    if sentences.is_empty() {
        return Err(Error::contract("prompt contains no sentence"));
    }
    let prompt = sentences
        .iter()
        .map(|s| codec.encode_text(s))
        .collect::<Result<Vec<_>>>()?;
    generate_from_embeddings(predictor, codec, &prompt, rule)
}

pub fn generate(
    model: &ConceptTransformer,
    codec: &FrozenCodec,
    prompt_text: &str,
    rule: &StopRule,
) -> Result<GenerationResult> {
    let mut session = model.session();
    generate_with(&mut session, codec, prompt_text, rule)
}
