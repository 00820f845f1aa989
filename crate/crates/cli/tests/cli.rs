use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sonarllm::analysis::{flops_sonar_llm, flops_token_llm, ArchShape, FlopsModel};
use sonarllm::{Checkpoint, HeadKind, Objective};

const TINY: &str = r#"
seed = 7
[corpus]
synthetic_train_docs = 30
synthetic_val_docs = 10
[codec]
d = 16
enc_layers = 1
dec_layers = 1
n_heads = 2
ffn_mult = 2
[codec_train]
epochs = 3
[model]
d_model = 16
n_layers = 1
n_heads = 2
ffn_mult = 2
[train]
epochs = 2
"#;

fn sonarllm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sonarllm"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn usage_errors_exit_one() {
    let dir = workdir();
    let out = sonarllm(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(
        sonarllm(dir.path(), &["flops", "--lambda", "sixty"]).status.code(),
        Some(1)
    );
    assert_eq!(sonarllm(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(sonarllm(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(sonarllm(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = workdir();
    let out = sonarllm(dir.path(), &["generate", "--prompt", "Hi there."]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.ckpt"));
    fs::write(dir.path().join("bad.toml"), "sede = 3\n").unwrap();
    assert_eq!(
        sonarllm(dir.path(), &["--config", "bad.toml", "gradcheck"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(sonarllm(dir.path(), &["flops", "--lambda", "0"]).status.code(), Some(2));
}

#[test]
fn flops_csv_matches_library() {
    let dir = workdir();
    let csv = ok(&sonarllm(
        dir.path(),
        &[
            "flops",
            "--t-max",
            "1048576",
            "--lambda",
            "60",
            "--codec-layers",
            "2",
            "--codec-d-model",
            "256",
        ],
    ));
    let shape = |l, d, e, head| ArchShape {
        n_layers: l,
        d_model: d,
        n_heads: 16,
        ffn_mult: 3,
        vocab_size: 128_256,
        d_embed: e,
        head,
    };
    let m = FlopsModel {
        token: shape(32, 1024, 1024, HeadKind::Token),
        concept: shape(32, 1024, 256, HeadKind::Concept),
        encoder: shape(2, 256, 256, HeadKind::Token),
        decoder: shape(2, 256, 256, HeadKind::Token),
        lambda: 60,
    };
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("T,flops_llm,flops_sonar"));
    let rows: Vec<Vec<u128>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 21);
    for (i, r) in rows.iter().enumerate() {
        let t = 1u64 << i;
        assert_eq!(r[0], t as u128);
        assert_eq!(r[1], flops_token_llm(&m.token, t));
        assert_eq!(r[2], flops_sonar_llm(&m, t));
    }
}

#[test]
fn fit_scaling_recovers_generated_law() {
    let dir = workdir();
    let mut csv = String::from("N,loss\n");
    for n in [11e6f64, 34e6, 170e6, 450e6, 700e6] {
        csv.push_str(&format!("{n},{}\n", 2.09e3 * n.powf(-0.569) + 1.73));
    }
    fs::write(dir.path().join("points.csv"), csv).unwrap();
    let out = ok(&sonarllm(dir.path(), &["fit-scaling", "points.csv"]));
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("a,alpha,b,r2,degenerate"));
    let v: Vec<&str> = lines.next().unwrap().split(',').collect();
    let num = |i: usize| v[i].parse::<f64>().unwrap();
    assert!((num(1) - 0.569).abs() < 1e-3, "{out}");
    assert!((num(0) / 2.09e3 - 1.0).abs() < 1e-2);
    assert!((num(2) - 1.73).abs() < 1e-3);
    assert!(num(3) > 0.99999);
}

#[test]
fn gradcheck_passes() {
    let dir = workdir();
    let out = ok(&sonarllm(dir.path(), &["gradcheck"]));
    assert_eq!(out.lines().count(), 3);
    assert!(out.lines().all(|l| l.ends_with(" ok")), "{out}");
}

#[test]
fn pipeline_commands_share_checkpoints() {
    let dir = workdir();
    let d = dir.path();
    let cfg = ["--config", "tiny.toml", "--out", "run"];
    let with = |extra: &[&str]| -> Vec<String> { cfg.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(&sonarllm(d, &args.iter().map(String::as_str).collect::<Vec<_>>()))
    };

    run(&["gen-corpus"]);
    let corpus = fs::read_to_string(d.join("run/corpus.txt")).unwrap();
    assert_eq!(corpus.split("\n\n").count(), 30);

    run(&["pretrain-codec", "--corpus", "run/corpus.txt"]);
    let codec = Checkpoint::load(&d.join("run/codec.ckpt")).unwrap();
    assert!(codec.model().unwrap().is_none());

    run(&[
        "train",
        "--objective",
        "ce_sonar",
        "--epochs",
        "2",
        "--codec",
        "run/codec.ckpt",
    ]);
    let model = Checkpoint::load(&d.join("run/model.ckpt")).unwrap();
    assert_eq!(model.model().unwrap().unwrap().0, Objective::CeSonar);
    assert_eq!(
        model.codec().unwrap().params().fingerprint(),
        codec.codec().unwrap().params().fingerprint()
    );
    let metrics = fs::read_to_string(d.join("run/train_metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,lr,train_loss,val_loss\n"));
    assert_eq!(metrics.lines().filter(|l| l.contains(",,")).count(), 2);
    assert!(fs::read_to_string(d.join("run/config.toml"))
        .unwrap()
        .contains("ce_sonar"));

    let text = run(&[
        "generate",
        "--prompt",
        "Tom had a red ball. He was happy.",
        "--t-max",
        "4",
    ]);
    let trailer = text.lines().last().unwrap();
    assert!(trailer.starts_with("# stop_reason="), "{text}");
    let n: usize = trailer.rsplit('=').next().unwrap().parse().unwrap();
    assert!(n <= 4);
    assert_eq!(text.lines().count(), n + 1);

    let summary = run(&["eval-nlg", "--mode", "short"]);
    assert!(summary.contains("examples=10"), "{summary}");
    let eval = fs::read_to_string(d.join("run/eval_short.csv")).unwrap();
    assert!(eval.starts_with("doc,bleu,rouge_l,meteor,skipped\n"));
    assert!(eval.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn token_baseline_trains_and_generates() {
    let dir = workdir();
    let d = dir.path();
    let base = ["--config", "tiny.toml", "--out", "tok"];
    let args = |extra: &[&'static str]| base.iter().copied().chain(extra.iter().copied()).collect::<Vec<_>>();
    ok(&sonarllm(d, &args(&["train", "--objective", "token_ce"])));
    assert!(d.join("tok/codec.ckpt").exists());
    let text = ok(&sonarllm(
        d,
        &args(&["generate", "--prompt", "Lily had a blue boat.", "--t-max", "3"]),
    ));
    assert!(text.lines().last().unwrap().starts_with("# stop_reason="));
    ok(&sonarllm(d, &args(&["eval-nlg", "--mode", "long"])));
    assert!(d.join("tok/eval_long.csv").exists());
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = workdir();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(&sonarllm(
            d,
            &[
                "--config",
                "tiny.toml",
                "--seed",
                "11",
                "--out",
                out,
                "train",
                "--objective",
                "mse_lcm",
            ],
        ));
        ok(&sonarllm(d, &["--config", "tiny.toml", "--out", out, "eval-nlg"]));
    }
    for f in ["train_metrics.csv", "codec_loss.csv", "eval_short.csv", "model.ckpt"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}
