//! Training objectives and the epoch loop.
//!
//! A batch is a handful of documents whose graphs are recorded on one tape
//! and summed, so documents of different lengths need no padding. Every
//! objective is normalised per target element (tokens for the two
//! cross-entropy losses, embedding coordinates for MSE) over the whole batch.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::FrozenCodec;
use crate::concept::{ConceptModelConfig, ConceptTransformer, TokenLm};
use crate::error::{Error, Result};
use crate::optim::{adam_step, cosine_lr, AdamConfig, AdamState};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::text::{Document, EncodedDocument};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy of the frozen decoder's reconstruction of each predicted
    /// embedding against the true next sentence.
    CeSonar,
    /// Mean squared error against the true next embedding.
    MseLcm,
    /// Next-token cross-entropy of the token-level baseline.
    TokenCe,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::CeSonar, Objective::MseLcm, Objective::TokenCe];

    pub fn name(self) -> &'static str {
        match self {
            Objective::CeSonar => "ce_sonar",
            Objective::MseLcm => "mse_lcm",
            Objective::TokenCe => "token_ce",
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Objective::CeSonar => 1e-3,
            _ => 5e-4,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL.into_iter().find(|o| o.name() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown objective `{s}` (expected ce_sonar, mse_lcm or token_ce)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate; the objective's default when absent.
    pub learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: None,
            epochs: 4,
            batch_size: 4,
            warmup_steps: 20,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn peak_lr(&self, objective: Objective) -> f64 {
        self.learning_rate.unwrap_or_else(|| objective.default_learning_rate())
    }

    pub fn validate(&self, objective: Objective) -> Result<()> {
        let lr = self.peak_lr(objective);
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning_rate must be positive, got {lr}")));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// A trained (or trainable) model of either family.
#[derive(Clone, Debug)]
pub enum Model {
    Concept(ConceptTransformer),
    Token(TokenLm),
}

impl Model {
    pub fn new(objective: Objective, config: ConceptModelConfig, seed: u64) -> Result<Self> {
        Ok(match objective {
            Objective::TokenCe => Model::Token(TokenLm::new(config, seed)?),
            _ => Model::Concept(ConceptTransformer::new(config, seed)?),
        })
    }

    pub fn config(&self) -> &ConceptModelConfig {
        match self {
            Model::Concept(m) => m.config(),
            Model::Token(m) => m.config(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Concept(m) => m.params(),
            Model::Token(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Concept(m) => m.params_mut(),
            Model::Token(m) => m.params_mut(),
        }
    }

    pub fn as_concept(&self) -> Option<&ConceptTransformer> {
        match self {
            Model::Concept(m) => Some(m),
            Model::Token(_) => None,
        }
    }

    pub fn as_token(&self) -> Option<&TokenLm> {
        match self {
            Model::Token(m) => Some(m),
            Model::Concept(_) => None,
        }
    }
}

/// A document with its sentence embeddings computed once by the frozen codec.
#[derive(Clone, Debug)]
pub struct PreparedDoc {
    /// Framed token ids per sentence, sentinel last.
    pub sentences: Vec<Vec<usize>>,
    /// `T × d` codec embeddings.
    pub embeddings: Tensor,
    /// `BOS`, every sentence's content tokens, `EOS`.
    pub token_stream: Vec<usize>,
}

impl PreparedDoc {
    pub fn new(doc: &EncodedDocument, codec: &FrozenCodec) -> Result<Self> {
        let d = codec.d();
        let mut data = Vec::with_capacity(doc.sentences.len() * d);
        for s in &doc.sentences {
            data.extend(codec.encode_sentence(&s.tokens)?.into_values());
        }
        Ok(Self {
            sentences: doc.sentences.iter().map(|s| s.tokens.clone()).collect(),
            embeddings: Tensor::matrix(doc.sentences.len(), d, data)?,
            token_stream: doc.token_stream(),
        })
    }

    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }
}

pub fn prepare_corpus(docs: &[Document], codec: &FrozenCodec) -> Result<Vec<PreparedDoc>> {
    let max = codec.config().max_sentence_tokens;
    docs.iter()
        .map(|d| PreparedDoc::new(&d.encode(codec.vocab(), max), codec))
        .collect()
}

/// Summed loss of one document and the number of elements it averages over.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub sum: Var,
    pub count: usize,
}

/// Summed decoder cross-entropy of `predicted` (row `t` the guess for
/// `targets[t]`) against the targets' tokens.
pub fn decoder_ce_on(
    tape: &mut Tape,
    codec: &FrozenCodec,
    cp: &Bound,
    predicted: Var,
    targets: &[Vec<usize>],
) -> Result<LossTerm> {
    let rows = tape.value(predicted).rows();
    if rows != targets.len() {
        return Err(Error::shape("decoder_ce", &[targets.len()], &[rows]));
    }
    let mut terms = Vec::with_capacity(rows);
    let mut count = 0;
    for (t, tokens) in targets.iter().enumerate() {
        let e = tape.slice_rows(predicted, t, 1)?;
        let logits = codec.decode_logits_on(tape, cp, e, tokens)?;
        terms.push(tape.cross_entropy(logits, &tokens[1..])?);
        count += tokens.len() - 1;
    }
    Ok(LossTerm {
        sum: tape.add_all(&terms)?,
        count,
    })
}

fn concept_inputs(tape: &mut Tape, doc: &PreparedDoc) -> Result<(Var, Tensor)> {
    let t = doc.n_sentences();
    let d = doc.embeddings.cols();
    let data = doc.embeddings.data();
    let inputs = Tensor::matrix(t - 1, d, data[..(t - 1) * d].to_vec())?;
    let targets = Tensor::matrix(t - 1, d, data[d..].to_vec())?;
    Ok((tape.constant(inputs), targets))
}

/// Records one document's loss. `None` when the document has nothing to
/// predict (a single sentence, or a token stream shorter than 2).
pub fn document_loss_on(
    tape: &mut Tape,
    objective: Objective,
    model: &Model,
    mp: &Bound,
    codec: &FrozenCodec,
    cp: &Bound,
    doc: &PreparedDoc,
) -> Result<Option<LossTerm>> {
    match (objective, model) {
        (Objective::TokenCe, Model::Token(m)) => {
            let s = &doc.token_stream;
            if s.len() < 2 {
                return Ok(None);
            }
            let logits = m.forward_on(tape, mp, &s[..s.len() - 1])?;
            Ok(Some(LossTerm {
                sum: tape.cross_entropy(logits, &s[1..])?,
                count: s.len() - 1,
            }))
        }
        (Objective::CeSonar, Model::Concept(m)) => {
            if doc.n_sentences() < 2 {
                return Ok(None);
            }
            let (x, _) = concept_inputs(tape, doc)?;
            let y = m.forward_on(tape, mp, x)?;
            decoder_ce_on(tape, codec, cp, y, &doc.sentences[1..]).map(Some)
        }
        (Objective::MseLcm, Model::Concept(m)) => {
            if doc.n_sentences() < 2 {
                return Ok(None);
            }
            let (x, targets) = concept_inputs(tape, doc)?;
            let count = targets.numel();
            let y = m.forward_on(tape, mp, x)?;
            let target = tape.constant(targets);
            let diff = tape.sub(y, target)?;
            let sq = tape.mul(diff, diff)?;
            Ok(Some(LossTerm {
                sum: tape.sum(sq),
                count,
            }))
        }
        _ => Err(Error::contract(format!(
            "objective {objective} does not match the model family"
        ))),
    }
}

/// Per-element mean loss of one document, no gradients.
pub fn document_loss(
    objective: Objective,
    model: &Model,
    codec: &FrozenCodec,
    doc: &PreparedDoc,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let mp = model.params().bind(&mut tape, false);
    let cp = codec.bind(&mut tape);
    let term = document_loss_on(&mut tape, objective, model, &mp, codec, &cp, doc)?;
    Ok(term.map(|t| tape.value(t.sum).item() / t.count as f64))
}

/// Per-element mean loss over a whole corpus.
pub fn corpus_loss(objective: Objective, model: &Model, codec: &FrozenCodec, docs: &[PreparedDoc]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for doc in docs {
        let mut tape = Tape::new();
        let mp = model.params().bind(&mut tape, false);
        let cp = codec.bind(&mut tape);
        if let Some(t) = document_loss_on(&mut tape, objective, model, &mp, codec, &cp, doc)? {
            sum += tape.value(t.sum).item();
            count += t.count;
        }
    }
    if count == 0 {
        return Err(Error::contract("corpus has no document with a prediction target"));
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl LossReport {
    /// One row per optimizer step (empty `val_loss`) followed, at each epoch
    /// boundary, by a summary row with an empty `lr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr,train_loss,val_loss\n");
        let mut summaries = self.epochs.iter().peekable();
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{},\n", s.epoch, s.step, s.lr, s.loss));
            while let Some(e) = summaries.next_if(|e| e.step == s.step) {
                out.push_str(&format!("{},{},,{},{}\n", e.epoch, e.step, e.train_loss, e.val_loss));
            }
        }
        for e in summaries {
            out.push_str(&format!("{},{},,{},{}\n", e.epoch, e.step, e.train_loss, e.val_loss));
        }
        out
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: LossReport,
}

/// Order in which documents are visited in `epoch` (1-based).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Trains a fresh model with `objective`, evaluating the validation corpus
/// after every epoch. The codec's vocabulary and width override the
/// corresponding fields of `model_config`.
pub fn train_run(
    objective: Objective,
    train: &[PreparedDoc],
    val: &[PreparedDoc],
    codec: &FrozenCodec,
    model_config: &ConceptModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate(objective)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract(
            "train_run needs non-empty train and validation corpora",
        ));
    }
    let skipped = train.iter().filter(|d| d.n_sentences() < 2).count();
    if skipped > 0 {
        log::warn!("{skipped} single-sentence training documents skipped");
    }
    let mut mc = model_config.clone();
    mc.d_embed = codec.d();
    mc.vocab_size = codec.vocab_size();
    let mut model = Model::new(objective, mc, config.seed)?;
    let peak = config.peak_lr(objective);
    let total = train.len().div_ceil(config.batch_size) * config.epochs;
    let mut state = AdamState::new();
    let mut report = LossReport::default();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let order = epoch_order(train.len(), config.seed, epoch);
        let (mut epoch_sum, mut epoch_count) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let mut idx = batch.to_vec();
            idx.sort_unstable();
            let mut tape = Tape::new();
            let mp = model.params().bind(&mut tape, true);
            let cp = codec.bind(&mut tape);
            let mut sums = Vec::with_capacity(idx.len());
            let mut count = 0;
            for &i in &idx {
                if let Some(t) = document_loss_on(&mut tape, objective, &model, &mp, codec, &cp, &train[i])? {
                    sums.push(t.sum);
                    count += t.count;
                }
            }
            if sums.is_empty() {
                continue;
            }
            step += 1;
            let total_loss = tape.add_all(&sums)?;
            let loss = tape.scale(total_loss, 1.0 / count as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = mp.vars().iter().map(|&v| grads.take(v).expect("param grad")).collect();
            let lr = cosine_lr(step, total + 1, config.warmup_steps, peak);
            adam_step(model.params_mut().values_mut(), &grads, &mut state, &config.adam, lr)?;
            epoch_sum += tape.value(total_loss).item();
            epoch_count += count;
            report.steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss: value,
            });
        }
        let val_loss = corpus_loss(objective, &model, codec, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { step, loss: val_loss });
        }
        let train_loss = epoch_sum / epoch_count.max(1) as f64;
        log::info!("{objective} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        report.epochs.push(EpochRecord {
            epoch,
            step,
            train_loss,
            val_loss,
        });
    }
    Ok(TrainOutcome { model, report })
}

/// Largest per-tensor relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between the
/// backward-pass gradient `a` of one document's mean loss and the central
/// difference `n`, over every parameter tensor of `model`.
pub fn model_gradient_check(
    objective: Objective,
    model: &Model,
    codec: &FrozenCodec,
    doc: &PreparedDoc,
    h: f64,
) -> Result<f64> {
    let mean_loss = |m: &Model| -> Result<f64> {
        document_loss(objective, m, codec, doc)?.ok_or_else(|| Error::contract("document has no prediction target"))
    };
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let mp = model.params().bind(&mut tape, true);
        let cp = codec.bind(&mut tape);
        let term = document_loss_on(&mut tape, objective, model, &mp, codec, &cp, doc)?
            .ok_or_else(|| Error::contract("document has no prediction target"))?;
        let loss = tape.scale(term.sum, 1.0 / term.count as f64);
        let mut g = tape.backward(loss)?;
        mp.vars().iter().map(|&v| g.take(v).expect("param grad")).collect()
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (pi, a) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut norm_a = 0.0;
        let mut norm_n = 0.0;
        for j in 0..a.numel() {
            let orig = probe.params().values()[pi].data()[j];
            probe.params_mut().values_mut()[pi].data_mut()[j] = orig + h;
            let up = mean_loss(&probe)?;
            probe.params_mut().values_mut()[pi].data_mut()[j] = orig - h;
            let down = mean_loss(&probe)?;
            probe.params_mut().values_mut()[pi].data_mut()[j] = orig;
            let n = (up - down) / (2.0 * h);
            let ai = a.data()[j];
            diff2 += (ai - n) * (ai - n);
            norm_a += ai * ai;
            norm_n += n * n;
        }
        let denom = norm_a.sqrt() + norm_n.sqrt();
        if denom > 0.0 {
            worst = worst.max(diff2.sqrt() / denom);
        }
    }
    Ok(worst)
}
