//! Small sentence autoencoder that stands in for a pretrained multilingual
//! sentence encoder/decoder.
//!
//! The encoder is a bidirectional transformer whose final hidden states are
//! mean-pooled into one `d`-dimensional [`SentenceEmbedding`]. The decoder is
//! a causal transformer that sees the embedding through a learned projection
//! added to every input position, position 0 (the `BOS` slot) included, so
//! every token's loss reaches the embedding.
//!
//! After pretraining the codec is wrapped in a [`FrozenCodec`], which has no
//! mutating API.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Stack, StackShape, INIT_STD, NORM_EPS};
use crate::optim::{adam_step, cosine_lr, AdamConfig, AdamState};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{self, Tensor};
use crate::text::{self, Document, Vocabulary, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_sentence_tokens: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            d: 32,
            enc_layers: 2,
            dec_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_sentence_tokens: text::DEFAULT_MAX_SENTENCE_TOKENS,
            vocab_size: 0,
            rope_base: 10000.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_mult == 0 {
            return Err(Error::config("codec widths and layer counts must be at least 1"));
        }
        nn::head_dim(self.d, self.n_heads)?;
        if self.vocab_size < text::RESERVED.len() + 1 {
            return Err(Error::config(format!("codec vocab_size {} too small", self.vocab_size)));
        }
        if self.max_sentence_tokens < 2 {
            return Err(Error::config("max_sentence_tokens must be at least 2"));
        }
        Ok(())
    }
}

/// A sentence as a point in the codec's embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding(Vec<f64>);

impl SentenceEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        tensor::norm(&self.0)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct SentenceCodec {
    config: CodecConfig,
    params: ParamStore,
    enc_embed: ParamId,
    encoder: Stack,
    enc_norm: ParamId,
    dec_embed: ParamId,
    cond_proj: ParamId,
    decoder: Stack,
    dec_norm: ParamId,
    out: ParamId,
}

impl SentenceCodec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let (d, v) = (config.d, config.vocab_size);
        let shape = |n_layers, causal| StackShape {
            d,
            n_layers,
            n_heads: config.n_heads,
            ffn_mult: config.ffn_mult,
            rope_base: config.rope_base,
            causal,
        };
        let enc_embed = params.add("enc.embed", init.normal(&[v, d], INIT_STD));
        let encoder = Stack::new(&shape(config.enc_layers, false), "enc.block", &mut params, &mut init)?;
        let enc_norm = params.add("enc.norm", Tensor::full(&[d], 1.0));
        let dec_embed = params.add("dec.embed", init.normal(&[v, d], INIT_STD));
        let cond_proj = params.add("dec.cond", init.normal(&[d, d], INIT_STD));
        let decoder = Stack::new(&shape(config.dec_layers, true), "dec.block", &mut params, &mut init)?;
        let dec_norm = params.add("dec.norm", Tensor::full(&[d], 1.0));
        let out = params.add("dec.out", init.normal(&[d, v], INIT_STD));
        Ok(Self {
            config,
            params,
            enc_embed,
            encoder,
            enc_norm,
            dec_embed,
            cond_proj,
            decoder,
            dec_norm,
            out,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() < 2 {
            return Err(Error::contract(format!(
                "a framed sentence needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "codec vocabulary",
                index: bad,
                len: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Taped encoder pass; returns the `1×d` embedding.
    pub fn encode_on(&self, tape: &mut Tape, p: &Bound, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let x = tape.gather_rows(p[self.enc_embed], tokens)?;
        let h = self.encoder.forward(tape, p, x)?;
        let h = tape.rms_norm(h, p[self.enc_norm], NORM_EPS)?;
        tape.mean_rows(h)
    }

    /// Taped decoder pass: logits for `teacher[1..]` given `teacher[..len-1]`
    /// and the `1×d` embedding `emb`.
    pub fn decode_logits_on(&self, tape: &mut Tape, p: &Bound, emb: Var, teacher: &[usize]) -> Result<Var> {
        self.check_tokens(teacher)?;
        if teacher[0] != BOS {
            return Err(Error::contract("teacher tokens must start with BOS"));
        }
        let d = self.config.d;
        let cond = tape.matmul(emb, p[self.cond_proj])?;
        let cond = tape.reshape(cond, &[d])?;
        let x = tape.gather_rows(p[self.dec_embed], &teacher[..teacher.len() - 1])?;
        let x = tape.add(x, cond)?;
        let h = self.decoder.forward(tape, p, x)?;
        let h = tape.rms_norm(h, p[self.dec_norm], NORM_EPS)?;
        tape.matmul(h, p[self.out])
    }

    /// Summed token cross-entropy of reconstructing `tokens` from its own
    /// embedding.
    pub fn reconstruction_loss_on(&self, tape: &mut Tape, p: &Bound, tokens: &[usize]) -> Result<Var> {
        let emb = self.encode_on(tape, p, tokens)?;
        let logits = self.decode_logits_on(tape, p, emb, tokens)?;
        tape.cross_entropy(logits, &tokens[1..])
    }

    /// Freezes the codec and caches the embedding of `sentinel`.
    pub fn freeze(self, vocab: Vocabulary, sentinel: &str) -> Result<FrozenCodec> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::config(format!(
                "vocabulary has {} entries, codec expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let mut frozen = FrozenCodec {
            inner: self,
            vocab,
            sentinel: sentinel.to_string(),
            e_eot: SentenceEmbedding(Vec::new()),
        };
        frozen.e_eot = frozen.encode_text(sentinel)?;
        Ok(frozen)
    }
}

/// A pretrained codec whose weights can no longer change.
#[derive(Clone, Debug)]
pub struct FrozenCodec {
    inner: SentenceCodec,
    vocab: Vocabulary,
    sentinel: String,
    e_eot: SentenceEmbedding,
}

impl FrozenCodec {
    pub fn config(&self) -> &CodecConfig {
        &self.inner.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.inner.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn sentinel(&self) -> &str {
        &self.sentinel
    }

    /// Embedding of the sentinel sentence, computed once at freeze time.
    pub fn sentinel_embedding(&self) -> &SentenceEmbedding {
        &self.e_eot
    }

    pub fn d(&self) -> usize {
        self.inner.config.d
    }

    pub fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    /// Binds the weights to `tape` as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.inner.params.bind(tape, false)
    }

    pub fn encode_on(&self, tape: &mut Tape, p: &Bound, tokens: &[usize]) -> Result<Var> {
        self.inner.encode_on(tape, p, tokens)
    }

    pub fn decode_logits_on(&self, tape: &mut Tape, p: &Bound, emb: Var, teacher: &[usize]) -> Result<Var> {
        self.inner.decode_logits_on(tape, p, emb, teacher)
    }

    pub fn reconstruction_loss_on(&self, tape: &mut Tape, p: &Bound, tokens: &[usize]) -> Result<Var> {
        self.inner.reconstruction_loss_on(tape, p, tokens)
    }

    /// Embeds a framed token sequence. Over-length input keeps its first
    /// `max_sentence_tokens − 1` ids followed by `EOS`.
    pub fn encode_sentence(&self, tokens: &[usize]) -> Result<SentenceEmbedding> {
        let tokens = text::truncate_framed(tokens.to_vec(), self.config().max_sentence_tokens);
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let e = self.encode_on(&mut tape, &p, &tokens)?;
        Ok(SentenceEmbedding(tape.value(e).data().to_vec()))
    }

    pub fn encode_text(&self, sentence: &str) -> Result<SentenceEmbedding> {
        self.encode_sentence(&text::encode_tokens(sentence, &self.vocab))
    }

    /// Teacher-forced logits, `(len(teacher) − 1) × |V|`.
    pub fn decode_logits(&self, emb: &SentenceEmbedding, teacher: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let e = tape.constant(self.embedding_row(emb)?);
        let logits = self.decode_logits_on(&mut tape, &p, e, teacher)?;
        Ok(tape.value(logits).clone())
    }

    fn embedding_row(&self, emb: &SentenceEmbedding) -> Result<Tensor> {
        if emb.dim() != self.d() {
            return Err(Error::shape("sentence embedding", &[self.d()], &[emb.dim()]));
        }
        Tensor::matrix(1, self.d(), emb.values().to_vec())
    }

    /// Argmax decoding from `BOS`, lowest id winning ties, until `EOS` or
    /// `max_len` generated tokens. The result excludes `BOS` and includes
    /// `EOS` when it was produced.
    pub fn greedy_decode(&self, emb: &SentenceEmbedding, max_len: usize) -> Result<Vec<usize>> {
        if max_len > self.config().max_sentence_tokens {
            return Err(Error::contract(format!(
                "max_len {max_len} exceeds max_sentence_tokens {}",
                self.config().max_sentence_tokens
            )));
        }
        let c = &self.inner;
        let store = &c.params;
        let cond = nn::row_matmul(emb.values(), store.get(c.cond_proj));
        let mut cache = c.decoder.new_cache();
        let mut out = Vec::new();
        let mut prev = BOS;
        while out.len() < max_len {
            let mut x = store.get(c.dec_embed).row(prev).to_vec();
            x.iter_mut().zip(&cond).for_each(|(a, b)| *a += b);
            let h = c.decoder.step(store, &x, &mut cache)?;
            let (h, _) = tensor::rms_norm_rows(&h, store.get(c.dec_norm).data(), NORM_EPS);
            let logits = nn::row_matmul(&h, store.get(c.out));
            prev = tensor::argmax(&logits);
            out.push(prev);
            if prev == EOS {
                break;
            }
        }
        Ok(out)
    }

    /// Greedy decode rendered as text.
    pub fn decode_text(&self, emb: &SentenceEmbedding) -> Result<String> {
        let ids = self.greedy_decode(emb, self.config().max_sentence_tokens - 1)?;
        text::decode_tokens(&ids, &self.vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 16,
            warmup_steps: 50,
            adam: AdamConfig::default(),
        }
    }
}

/// Distinct framed sentences of a corpus in first-seen order.
pub fn unique_sentences(corpus: &[Document], vocab: &Vocabulary, max_tokens: usize) -> Vec<Vec<usize>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for doc in corpus {
        for s in &doc.sentences {
            let ids = text::truncate_framed(text::encode_tokens(s, vocab), max_tokens);
            if seen.insert(ids.clone()) {
                out.push(ids);
            }
        }
    }
    out
}

/// Per-epoch mean reconstruction loss (per predicted token).
pub type CodecLossCurve = Vec<f64>;

/// Trains encoder and decoder jointly on sentence reconstruction.
pub fn pretrain_codec(
    sentences: &[Vec<usize>],
    config: CodecConfig,
    train: &CodecTrainConfig,
    seed: u64,
) -> Result<(SentenceCodec, CodecLossCurve)> {
    if sentences.is_empty() {
        return Err(Error::contract("codec pretraining needs at least one sentence"));
    }
    let mut codec = SentenceCodec::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let batch = train.batch_size.max(1);
    let steps_per_epoch = sentences.len().div_ceil(batch);
    let total = steps_per_epoch * train.epochs;
    let mut state = AdamState::new();
    let mut curve = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            step += 1;
            let mut tape = Tape::new();
            let p = codec.params.bind(&mut tape, true);
            let mut terms = Vec::with_capacity(chunk.len());
            let mut tokens = 0;
            for &i in chunk {
                terms.push(codec.reconstruction_loss_on(&mut tape, &p, &sentences[i])?);
                tokens += sentences[i].len() - 1;
            }
            let total_loss = tape.add_all(&terms)?;
            let loss = tape.scale(total_loss, 1.0 / tokens as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            sum += tape.value(total_loss).item();
            count += tokens;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.take(v).expect("param grad")).collect();
            let lr = cosine_lr(step, total + 1, train.warmup_steps, train.learning_rate);
            adam_step(codec.params.values_mut(), &grads, &mut state, &train.adam, lr)?;
        }
        let epoch_loss = sum / count as f64;
        log::info!("codec epoch {}: loss {epoch_loss:.5}", curve.len() + 1);
        curve.push(epoch_loss);
    }
    Ok((codec, curve))
}

/// Fraction of target tokens (after `BOS`, `EOS` included) that greedy
/// decoding of each sentence's own embedding reproduces in place.
pub fn reconstruction_accuracy(codec: &FrozenCodec, sentences: &[Vec<usize>]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in sentences {
        let emb = codec.encode_sentence(s)?;
        let decoded = codec.greedy_decode(&emb, s.len() - 1)?;
        let target = &s[1..];
        hit += target.iter().zip(&decoded).filter(|(a, b)| a == b).count();
        total += target.len();
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{build_vocab, generate_synthetic_corpus, DEFAULT_SENTINEL};

    fn tiny_codec(vocab: &Vocabulary) -> FrozenCodec {
        let config = CodecConfig {
            d: 8,
            enc_layers: 1,
            dec_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            vocab_size: vocab.len(),
            ..CodecConfig::default()
        };
        SentenceCodec::new(config, 1)
            .unwrap()
            .freeze(vocab.clone(), DEFAULT_SENTINEL)
            .unwrap()
    }

    fn corpus_vocab() -> (Vec<Document>, Vocabulary) {
        let docs = generate_synthetic_corpus(3, 20).unwrap();
        let v = build_vocab(&docs, 200).unwrap();
        (docs, v)
    }

    #[test]
    fn encode_is_deterministic_and_sentinel_cached() {
        let (_, v) = corpus_vocab();
        let c = tiny_codec(&v);
        let a = c.encode_text("Tom had a red ball.").unwrap();
        let b = c.encode_text("Tom had a red ball.").unwrap();
        assert_eq!(a, b);
        assert!(a.norm() > 0.0);
        let eot = c.encode_text(DEFAULT_SENTINEL).unwrap();
        assert!(eot
            .values()
            .iter()
            .zip(c.sentinel_embedding().values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn decode_logits_shape_and_causality() {
        let (_, v) = corpus_vocab();
        let c = tiny_codec(&v);
        let emb = c.encode_text("Lily had a big kite.").unwrap();
        let teacher = text::encode_tokens("Lily had a big kite.", &v);
        let logits = c.decode_logits(&emb, &teacher).unwrap();
        assert_eq!(logits.shape(), &[teacher.len() - 1, v.len()]);

        let mut perturbed = teacher.clone();
        let i = 2;
        for t in perturbed.iter_mut().skip(i + 1) {
            *t = v.id("fox").unwrap();
        }
        let other = c.decode_logits(&emb, &perturbed).unwrap();
        for r in 0..=i {
            assert_eq!(logits.row(r), other.row(r));
        }
        assert_ne!(logits.row(i + 1), other.row(i + 1));
    }

    #[test]
    fn embedding_gradient_through_frozen_decoder() {
        let (_, v) = corpus_vocab();
        let c = tiny_codec(&v);
        let teacher = text::encode_tokens("Then he went home with the dog.", &v);
        let start = Tensor::new(vec![1, 8], vec![0.9, -1.2, 0.3, 2.0, -0.4, 1.1, -2.2, 0.6]).unwrap();
        let err = crate::autodiff::grad_check(
            |t, e| {
                let p = c.bind(t);
                let logits = c.decode_logits_on(t, &p, e, &teacher)?;
                t.cross_entropy(logits, &teacher[1..])
            },
            &start,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn greedy_decode_terminates_within_max_len() {
        let (_, v) = corpus_vocab();
        let c = tiny_codec(&v);
        let emb = c.encode_text("Mia was sad.").unwrap();
        for max_len in [0, 1, 5, 63] {
            assert!(c.greedy_decode(&emb, max_len).unwrap().len() <= max_len);
        }
        assert!(c.greedy_decode(&emb, 65).is_err());
    }

    #[test]
    fn greedy_decode_matches_full_forward_argmax() {
        let (_, v) = corpus_vocab();
        let c = tiny_codec(&v);
        let emb = c.encode_text("Sam saw a frog.").unwrap();
        let decoded = c.greedy_decode(&emb, 6).unwrap();
        let mut teacher = vec![BOS];
        teacher.extend(&decoded);
        let logits = c.decode_logits(&emb, &teacher).unwrap();
        for (r, &tok) in decoded.iter().enumerate() {
            assert_eq!(tensor::argmax(logits.row(r)), tok);
        }
    }

    #[test]
    fn over_length_sentences_are_truncated() {
        let (_, v) = corpus_vocab();
        let mut config = tiny_codec(&v).config().clone();
        config.max_sentence_tokens = 4;
        let c = SentenceCodec::new(config, 1)
            .unwrap()
            .freeze(v.clone(), DEFAULT_SENTINEL)
            .unwrap();
        let long = text::encode_tokens("Tom had a red ball.", &v);
        let mut short = long[..3].to_vec();
        short.push(EOS);
        assert_eq!(c.encode_sentence(&long).unwrap(), c.encode_sentence(&short).unwrap());
    }

    #[test]
    fn single_sentence_is_memorised() {
        let (_, v) = corpus_vocab();
        let s = vec![text::encode_tokens("Anna had a new doll.", &v)];
        let config = CodecConfig {
            vocab_size: v.len(),
            ..CodecConfig::default()
        };
        let train = CodecTrainConfig {
            epochs: 200,
            batch_size: 1,
            warmup_steps: 10,
            learning_rate: 3e-3,
            ..CodecTrainConfig::default()
        };
        let (codec, curve) = pretrain_codec(&s, config, &train, 5).unwrap();
        assert!(*curve.last().unwrap() < 0.01, "final loss {}", curve.last().unwrap());
        let frozen = codec.freeze(v, DEFAULT_SENTINEL).unwrap();
        assert_eq!(reconstruction_accuracy(&frozen, &s).unwrap(), 1.0);
    }

    #[test]
    fn freeze_checks_vocabulary_size() {
        let (_, v) = corpus_vocab();
        let config = CodecConfig {
            vocab_size: v.len() + 1,
            ..CodecConfig::default()
        };
        assert!(SentenceCodec::new(config, 0)
            .unwrap()
            .freeze(v, DEFAULT_SENTINEL)
            .is_err());
    }
}
