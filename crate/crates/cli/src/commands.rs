use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;

use sonarllm::analysis::{
    crossover_length, fit_scaling_law, flops_csv, log_grid, parse_points_csv, quadratic_coefficients, ArchShape,
    FlopsModel,
};
use sonarllm::checkpoint::write_atomic;
use sonarllm::codec::{pretrain_codec, reconstruction_accuracy, unique_sentences, SentenceCodec};
use sonarllm::inference::{generate, GenerationResult, StopReason, StopRule};
use sonarllm::metrics::{next_sentence_harness, ConceptPredictor, NextSentencePredictor, TokenPredictor};
use sonarllm::text::{build_vocab, format_corpus, generate_synthetic_corpus, parse_corpus, segment_sentences};
use sonarllm::training::{model_gradient_check, prepare_corpus, train_run, PreparedDoc};
use sonarllm::{
    Checkpoint, CodecConfig, Document, Error, ExperimentConfig, FrozenCodec, HeadKind, Model, Objective, PrefixMode,
    Result, Tensor,
};

use crate::{Cli, Command, Common};

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// Number of documents; defaults to the config's synthetic training size.
    #[arg(long)]
    docs: Option<usize>,
    /// File name inside the output directory.
    #[arg(long, default_value = "corpus.txt")]
    file: String,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Training corpus; the synthetic generator is used when neither this nor the config names one.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Codec checkpoint from `pretrain-codec`; pretrained in place when absent.
    #[arg(long)]
    codec: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Model checkpoint; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    tau_stop: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model checkpoint; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "short")]
    mode: PrefixMode,
    /// Evaluation corpus; defaults to the validation corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// CSV of `N,loss` rows (an optional header line is skipped).
    points: PathBuf,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// Largest sequence length on the power-of-two grid.
    #[arg(long, default_value_t = 1 << 20)]
    t_max: u64,
    /// Average sentence length in tokens.
    #[arg(long, default_value_t = 60)]
    lambda: u64,
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value_t = 1024)]
    d_model: usize,
    #[arg(long, default_value_t = 16)]
    heads: usize,
    #[arg(long, default_value_t = 3)]
    ffn_mult: usize,
    #[arg(long, default_value_t = 128_256)]
    vocab: usize,
    /// Concept model depth; defaults to `--layers`.
    #[arg(long)]
    concept_layers: Option<usize>,
    /// Concept model width; defaults to `--d-model`.
    #[arg(long)]
    concept_d_model: Option<usize>,
    /// Encoder and decoder depth; defaults to `--layers`.
    #[arg(long)]
    codec_layers: Option<usize>,
    /// Encoder and decoder width, also the embedding size; defaults to `--d-model`.
    #[arg(long)]
    codec_d_model: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check one objective instead of all three.
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&cfg, a),
        Command::PretrainCodec(a) => pretrain(&cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Generate(a) => generate_cmd(&cfg, a),
        Command::EvalNlg(a) => eval_nlg(&cfg, a),
        Command::FitScaling(a) => fit_scaling(a),
        Command::Flops(a) => flops(a),
        Command::Gradcheck(a) => gradcheck(&cfg, a),
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(at(path))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.join(name))
}

/// Prefixes I/O errors with the offending path.
fn at(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| at(path)(e.into()))
}

fn read_corpus(path: &Path, sentinel: &str) -> Result<Vec<Document>> {
    let docs = parse_corpus(&read_text(path)?, sentinel);
    if docs.is_empty() {
        return Err(Error::Format(format!("`{}` holds no documents", path.display())));
    }
    Ok(docs)
}

fn synthetic(seed: u64, n: usize, sentinel: &str) -> Result<Vec<Document>> {
    Ok(generate_synthetic_corpus(seed, n)?
        .into_iter()
        .map(|d| Document::from_sentences(d.content().to_vec(), sentinel))
        .collect())
}

fn train_corpus(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Vec<Document>> {
    let c = &cfg.corpus;
    match path.or(c.train.as_deref()) {
        Some(p) => read_corpus(p, &c.sentinel),
        None => synthetic(cfg.seed, c.synthetic_train_docs, &c.sentinel),
    }
}

fn val_corpus(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Vec<Document>> {
    let c = &cfg.corpus;
    match path.or(c.val.as_deref()) {
        Some(p) => read_corpus(p, &c.sentinel),
        None => synthetic(c.synthetic_val_seed, c.synthetic_val_docs, &c.sentinel),
    }
}

fn gen_corpus(cfg: &ExperimentConfig, a: GenCorpusArgs) -> Result<()> {
    let n = a.docs.unwrap_or(cfg.corpus.synthetic_train_docs);
    let docs = synthetic(cfg.seed, n, &cfg.corpus.sentinel)?;
    let path = out_path(cfg, &a.file)?;
    write_atomic(&path, format_corpus(&docs).as_bytes())?;
    info!("wrote {n} documents to {}", path.display());
    Ok(())
}

fn pretrain_frozen(
    cfg: &ExperimentConfig,
    docs: &[Document],
    epochs: Option<usize>,
) -> Result<(FrozenCodec, Vec<f64>)> {
    let vocab = build_vocab(docs, cfg.corpus.max_vocab)?;
    let codec_cfg = CodecConfig {
        vocab_size: vocab.len(),
        ..cfg.codec.clone()
    };
    let sentences = unique_sentences(docs, &vocab, codec_cfg.max_sentence_tokens);
    let mut train = cfg.codec_train.clone();
    if let Some(e) = epochs {
        train.epochs = e;
    }
    info!(
        "pretraining codec on {} unique sentences, vocabulary {}",
        sentences.len(),
        vocab.len()
    );
    let (codec, curve) = pretrain_codec(&sentences, codec_cfg, &train, cfg.seed)?;
    let codec = codec.freeze(vocab, &cfg.corpus.sentinel)?;
    let acc = reconstruction_accuracy(&codec, &sentences)?;
    info!("codec token reconstruction accuracy {acc:.4}");
    Ok((codec, curve))
}

fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    out
}

fn pretrain(cfg: &ExperimentConfig, a: PretrainArgs) -> Result<()> {
    let docs = train_corpus(cfg, a.corpus.as_deref())?;
    let (codec, curve) = pretrain_frozen(cfg, &docs, a.epochs)?;
    let path = out_path(cfg, "codec.ckpt")?;
    Checkpoint::from_codec(&codec)?.save(&path)?;
    write_atomic(&out_path(cfg, "codec_loss.csv")?, curve_csv(&curve).as_bytes())?;
    info!("saved codec to {}", path.display());
    Ok(())
}

fn train(mut cfg: ExperimentConfig, a: TrainArgs) -> Result<()> {
    if let Some(o) = a.objective {
        cfg.objective = o;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.seed = cfg.seed;
    let docs = train_corpus(&cfg, a.corpus.as_deref())?;
    let codec = match &a.codec {
        Some(p) => Checkpoint::load(p).map_err(at(p))?.codec()?,
        None => {
            let (codec, curve) = pretrain_frozen(&cfg, &docs, None)?;
            Checkpoint::from_codec(&codec)?.save(&out_path(&cfg, "codec.ckpt")?)?;
            write_atomic(&out_path(&cfg, "codec_loss.csv")?, curve_csv(&curve).as_bytes())?;
            codec
        }
    };
    let val_docs = val_corpus(&cfg, a.val.as_deref())?;
    let train_docs = prepare_corpus(&docs, &codec)?;
    let val = prepare_corpus(&val_docs, &codec)?;
    info!(
        "training {} for {} epochs on {} documents",
        cfg.objective,
        cfg.train.epochs,
        train_docs.len()
    );
    let outcome = train_run(cfg.objective, &train_docs, &val, &codec, &cfg.model, &cfg.train)?;
    cfg.model = outcome.model.config().clone();
    write_atomic(&out_path(&cfg, "config.toml")?, cfg.to_toml()?.as_bytes())?;
    write_atomic(
        &out_path(&cfg, "train_metrics.csv")?,
        outcome.report.to_csv().as_bytes(),
    )?;
    let path = out_path(&cfg, "model.ckpt")?;
    Checkpoint::from_model(&codec, cfg.objective, &outcome.model)?.save(&path)?;
    if let Some(last) = outcome.report.epochs.last() {
        info!("final train loss {:.4}, val loss {:.4}", last.train_loss, last.val_loss);
    }
    info!("saved model to {}", path.display());
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, path: Option<PathBuf>) -> Result<(FrozenCodec, Objective, Model)> {
    let path = path.unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    let ckpt = Checkpoint::load(&path).map_err(at(&path))?;
    let codec = ckpt.codec()?;
    let (objective, model) = ckpt
        .model()?
        .ok_or_else(|| Error::Config(format!("`{}` holds a codec but no model", path.display())))?;
    Ok((codec, objective, model))
}

fn generate_cmd(cfg: &ExperimentConfig, a: GenerateArgs) -> Result<()> {
    let (codec, _, model) = load_model(cfg, a.checkpoint)?;
    let tau = a.tau_stop.unwrap_or(cfg.generation.tau_stop);
    let t_max = a.t_max.unwrap_or(cfg.generation.t_max);
    let rule = StopRule::new(tau, t_max, codec.sentinel_embedding().clone())?;
    let result = match &model {
        Model::Concept(m) => generate(m, &codec, &a.prompt, &rule)?,
        Model::Token(m) => {
            let mut predictor = TokenPredictor {
                model: m,
                codec: &codec,
                max_tokens: codec.config().max_sentence_tokens,
            };
            token_generate(&mut predictor, &a.prompt, codec.sentinel(), t_max)?
        }
    };
    print!("{}", result.render());
    Ok(())
}

/// Sentence-by-sentence greedy continuation for the token baseline; a
/// predicted sentinel sentence ends the document.
fn token_generate(
    predictor: &mut dyn NextSentencePredictor,
    prompt: &str,
    sentinel: &str,
    t_max: usize,
) -> Result<GenerationResult> {
    let mut context = segment_sentences(prompt);
    if context.is_empty() {
        return Err(Error::Contract("prompt contains no sentence".into()));
    }
    let mut sentences = Vec::new();
    while sentences.len() < t_max {
        let next = predictor.predict(&context)?;
        if next == sentinel {
            return Ok(GenerationResult {
                sentences,
                embeddings: Vec::new(),
                stop_reason: StopReason::Sentinel,
            });
        }
        context.push(next.clone());
        sentences.push(next);
    }
    Ok(GenerationResult {
        sentences,
        embeddings: Vec::new(),
        stop_reason: StopReason::TMax,
    })
}

fn eval_nlg(cfg: &ExperimentConfig, a: EvalArgs) -> Result<()> {
    let (codec, objective, model) = load_model(cfg, a.checkpoint)?;
    let docs = val_corpus(cfg, a.corpus.as_deref())?;
    let report = match &model {
        Model::Concept(m) => next_sentence_harness(
            &mut ConceptPredictor {
                model: m,
                codec: &codec,
            },
            &docs,
            a.mode,
        )?,
        Model::Token(m) => {
            let mut p = TokenPredictor {
                model: m,
                codec: &codec,
                max_tokens: codec.config().max_sentence_tokens,
            };
            next_sentence_harness(&mut p, &docs, a.mode)?
        }
    };
    let path = out_path(cfg, &format!("eval_{}.csv", a.mode))?;
    write_atomic(&path, report.to_csv().as_bytes())?;
    println!(
        "objective={objective} mode={} examples={} skipped={} bleu={:.4} rouge_l={:.4} meteor_lite={:.4}",
        a.mode,
        report.examples.len(),
        report.skipped,
        report.bleu,
        report.rouge_l,
        report.meteor
    );
    Ok(())
}

fn fit_scaling(a: FitArgs) -> Result<()> {
    let points = parse_points_csv(&read_text(&a.points)?)?;
    let fit = fit_scaling_law(&points)?;
    print!("{}", fit.to_csv());
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let shape = |layers, d_model, d_embed, head| ArchShape {
        n_layers: layers,
        d_model,
        n_heads: a.heads,
        ffn_mult: a.ffn_mult,
        vocab_size: a.vocab,
        d_embed,
        head,
    };
    let (cl, cd) = (a.codec_layers.unwrap_or(a.layers), a.codec_d_model.unwrap_or(a.d_model));
    let model = FlopsModel {
        token: shape(a.layers, a.d_model, a.d_model, HeadKind::Token),
        concept: shape(
            a.concept_layers.unwrap_or(a.layers),
            a.concept_d_model.unwrap_or(a.d_model),
            cd,
            HeadKind::Concept,
        ),
        encoder: shape(cl, cd, cd, HeadKind::Token),
        decoder: shape(cl, cd, cd, HeadKind::Token),
        lambda: a.lambda,
    };
    model.validate()?;
    if a.t_max == 0 {
        return Err(Error::Config("--t-max must be at least 1".into()));
    }
    print!("{}", flops_csv(&model, &log_grid(a.t_max)));
    let (tok, son) = quadratic_coefficients(&model, a.t_max);
    let cross = crossover_length(&model, a.t_max)?;
    match cross.t_star {
        Some(t) => info!("sentence-level generation is cheaper from T = {t}"),
        None => info!("no crossover up to T = {}", a.t_max),
    }
    info!("quadratic coefficient ratio {:.6e}", son / tok);
    Ok(())
}

fn gradcheck(cfg: &ExperimentConfig, a: GradcheckArgs) -> Result<()> {
    let docs = synthetic(cfg.seed, 4, &cfg.corpus.sentinel)?;
    let vocab = build_vocab(&docs, 200)?;
    let cc = CodecConfig {
        d: 8,
        enc_layers: 1,
        dec_layers: 1,
        n_heads: 2,
        ffn_mult: 2,
        vocab_size: vocab.len(),
        ..CodecConfig::default()
    };
    let codec = SentenceCodec::new(cc, cfg.seed)?.freeze(vocab, &cfg.corpus.sentinel)?;
    let full = &prepare_corpus(&docs, &codec)?[0];
    let d = codec.d();
    let doc = PreparedDoc {
        sentences: full.sentences[..2].to_vec(),
        embeddings: Tensor::matrix(2, d, full.embeddings.data()[..2 * d].to_vec())?,
        token_stream: full.token_stream[..full.token_stream.len().min(14)].to_vec(),
    };
    let mc = sonarllm::ConceptModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_mult: 2,
        d_embed: d,
        vocab_size: codec.vocab_size(),
        ..Default::default()
    };
    let objectives: Vec<Objective> = a.objective.map_or(Objective::ALL.to_vec(), |o| vec![o]);
    let mut failed = Vec::new();
    for o in objectives {
        let model = Model::new(o, mc.clone(), cfg.seed)?;
        let err = model_gradient_check(o, &model, &codec, &doc, 1e-5)?;
        let ok = err < a.tolerance;
        println!("{o} max_relative_error={err:.3e} {}", if ok { "ok" } else { "FAILED" });
        if !ok {
            failed.push(o.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
