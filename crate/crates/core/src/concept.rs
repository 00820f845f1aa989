//! Decoder-only transformer over sentence embeddings, and the token-level
//! language model that shares its block stack.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::SentenceEmbedding;
use crate::error::{Error, Result};
use crate::nn::{self, KvCache, Stack, StackShape, INIT_STD, NORM_EPS};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

pub use crate::nn::rope_rotate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Width of the sentence embeddings (the codec's `d`).
    pub d_embed: usize,
    pub max_concepts: usize,
    pub rope_base: f64,
    /// Token vocabulary, used by the token-level model only.
    pub vocab_size: usize,
}

impl Default for ConceptModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_mult: 4,
            d_embed: 32,
            max_concepts: 64,
            rope_base: 10000.0,
            vocab_size: 0,
        }
    }
}

impl ConceptModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_embed == 0 || self.ffn_mult == 0 || self.max_concepts == 0 {
            return Err(Error::config("model widths and max_concepts must be at least 1"));
        }
        nn::head_dim(self.d_model, self.n_heads)?;
        Ok(())
    }

    fn stack_shape(&self) -> StackShape {
        StackShape {
            d: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            rope_base: self.rope_base,
            causal: true,
        }
    }
}

/// Which head sits on top of the shared block stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Concept,
    Token,
}

/// Exact parameter count from shape arithmetic.
///
/// Without embeddings: the blocks plus the head's trainable parts (for the
/// concept head, the in/out projections and the norm in front of the output
/// projection; for the token head, the final norm). With embeddings: blocks,
/// final norm and a `|V| × d_model` token table, the token-LLM convention
/// under which both model families are compared.
pub fn count_params(config: &ConceptModelConfig, head: HeadKind, include_embeddings: bool) -> u64 {
    let d = config.d_model as u64;
    let e = config.d_embed as u64;
    let v = config.vocab_size as u64;
    let blocks = config.n_layers as u64 * nn::block_param_count(d, config.ffn_mult as u64);
    if include_embeddings {
        return blocks + d + v * d;
    }
    match head {
        HeadKind::Concept => blocks + (e * d + d) + (d * e + e) + d,
        HeadKind::Token => blocks + d,
    }
}

/// Maps a prefix of sentence embeddings to the next one.
#[derive(Clone, Debug)]
pub struct ConceptTransformer {
    config: ConceptModelConfig,
    params: ParamStore,
    in_w: ParamId,
    in_b: ParamId,
    stack: Stack,
    norm: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl ConceptTransformer {
    pub fn new(config: ConceptModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let (d, e) = (config.d_model, config.d_embed);
        let in_w = params.add("in.weight", init.normal(&[e, d], INIT_STD));
        let in_b = params.add("in.bias", Tensor::zeros(&[d]));
        let stack = Stack::new(&config.stack_shape(), "block", &mut params, &mut init)?;
        let norm = params.add("out.norm", Tensor::full(&[d], 1.0));
        let out_w = params.add("out.weight", init.normal(&[d, e], INIT_STD));
        let out_b = params.add("out.bias", Tensor::zeros(&[e]));
        Ok(Self {
            config,
            params,
            in_w,
            in_b,
            stack,
            norm,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ConceptModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Taped forward of a `T×d_embed` input; row `t` of the result predicts
    /// embedding `t + 1`.
    pub fn forward_on(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.config.d_embed {
            return Err(Error::shape("concept input", &[0, self.config.d_embed], shape));
        }
        let t = shape[0];
        if t > self.config.max_concepts {
            return Err(Error::contract(format!(
                "{t} concepts exceed max_concepts {}",
                self.config.max_concepts
            )));
        }
        let h = tape.matmul(x, p[self.in_w])?;
        let h = tape.add(h, p[self.in_b])?;
        let h = self.stack.forward(tape, p, h)?;
        let h = tape.rms_norm(h, p[self.norm], NORM_EPS)?;
        let y = tape.matmul(h, p[self.out_w])?;
        tape.add(y, p[self.out_b])
    }

    pub fn forward_concepts(&self, embeddings: &[SentenceEmbedding]) -> Result<Vec<SentenceEmbedding>> {
        if embeddings.is_empty() {
            return Err(Error::contract("forward_concepts needs at least one embedding"));
        }
        let e = self.config.d_embed;
        let mut data = Vec::with_capacity(embeddings.len() * e);
        for emb in embeddings {
            if emb.dim() != e {
                return Err(Error::shape("concept input", &[e], &[emb.dim()]));
            }
            data.extend_from_slice(emb.values());
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::matrix(embeddings.len(), e, data)?);
        let y = self.forward_on(&mut tape, &p, x)?;
        let y = tape.value(y);
        Ok((0..y.rows())
            .map(|r| SentenceEmbedding::new(y.row(r).to_vec()))
            .collect())
    }

    pub fn session(&self) -> ConceptSession<'_> {
        ConceptSession {
            model: self,
            cache: self.stack.new_cache(),
        }
    }
}

/// Incremental prediction with a KV cache; one per generation.
#[derive(Debug)]
pub struct ConceptSession<'a> {
    model: &'a ConceptTransformer,
    cache: KvCache,
}

impl ConceptSession<'_> {
    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    /// Appends one embedding and returns the prediction for the next.
    pub fn push(&mut self, emb: &SentenceEmbedding) -> Result<SentenceEmbedding> {
        let m = self.model;
        if self.cache.len() >= m.config.max_concepts {
            return Err(Error::contract(format!(
                "session already holds max_concepts = {}",
                m.config.max_concepts
            )));
        }
        if emb.dim() != m.config.d_embed {
            return Err(Error::shape("concept input", &[m.config.d_embed], &[emb.dim()]));
        }
        let store = &m.params;
        let mut h = nn::row_matmul(emb.values(), store.get(m.in_w));
        h.iter_mut().zip(store.get(m.in_b).data()).for_each(|(a, b)| *a += b);
        let h = m.stack.step(store, &h, &mut self.cache)?;
        let (h, _) = tensor::rms_norm_rows(&h, store.get(m.norm).data(), NORM_EPS);
        let mut y = nn::row_matmul(&h, store.get(m.out_w));
        y.iter_mut().zip(store.get(m.out_b).data()).for_each(|(a, b)| *a += b);
        Ok(SentenceEmbedding::new(y))
    }
}

/// Token-level causal LM; output logits reuse the embedding table.
#[derive(Clone, Debug)]
pub struct TokenLm {
    config: ConceptModelConfig,
    params: ParamStore,
    embed: ParamId,
    stack: Stack,
    norm: ParamId,
}

impl TokenLm {
    pub fn new(config: ConceptModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size == 0 {
            return Err(Error::config("token model needs vocab_size ≥ 1"));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let embed = params.add("embed", init.normal(&[config.vocab_size, config.d_model], INIT_STD));
        let stack = Stack::new(&config.stack_shape(), "block", &mut params, &mut init)?;
        let norm = params.add("norm", Tensor::full(&[config.d_model], 1.0));
        Ok(Self {
            config,
            params,
            embed,
            stack,
            norm,
        })
    }

    pub fn config(&self) -> &ConceptModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Taped `T×|V|` next-token logits.
    pub fn forward_on(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::contract("forward_tokens needs at least one token"));
        }
        let x = tape.gather_rows(p[self.embed], ids)?;
        let h = self.stack.forward(tape, p, x)?;
        let h = tape.rms_norm(h, p[self.norm], NORM_EPS)?;
        let table_t = tape.transpose(p[self.embed])?;
        tape.matmul(h, table_t)
    }

    pub fn forward_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let y = self.forward_on(&mut tape, &p, ids)?;
        Ok(tape.value(y).clone())
    }

    /// Feeds `prompt` then extends it greedily until a token in `stop` or
    /// `max_new` tokens. Returns only the new tokens, the stop token included.
    pub fn greedy_continue(&self, prompt: &[usize], stop: &[usize], max_new: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::contract("greedy_continue needs a non-empty prompt"));
        }
        let mut cache = self.stack.new_cache();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.step(t, &mut cache)?;
        }
        let mut out = Vec::new();
        while out.len() < max_new {
            let next = tensor::argmax(&logits);
            out.push(next);
            if stop.contains(&next) {
                break;
            }
            logits = self.step(next, &mut cache)?;
        }
        Ok(out)
    }

    fn step(&self, id: usize, cache: &mut KvCache) -> Result<Vec<f64>> {
        let table = self.params.get(self.embed);
        if id >= table.rows() {
            return Err(Error::Index {
                what: "token vocabulary",
                index: id,
                len: table.rows(),
            });
        }
        let h = self.stack.step(&self.params, table.row(id), cache)?;
        let (h, _) = tensor::rms_norm_rows(&h, self.params.get(self.norm).data(), NORM_EPS);
        Ok((0..table.rows()).map(|r| tensor::dot(&h, table.row(r))).collect())
    }
}
