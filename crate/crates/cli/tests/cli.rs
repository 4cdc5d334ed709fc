use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TRAIN: &str = "\
The\tO
great\tO
pizza\tB
was\tO
hot\tO
.\tO

we\tO
love\tO
the\tO
awful\tO
battery\tB
life\tI

staff\tO
was\tO
great\tO
wine\tB
!\tO
";

const CONFIG: &str = "\
# toy sizes
dim_w=4
dim_h_aspect=3
dim_h_opinion=2
history_window=2
epochs=3
dropout=0.1
";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace { dir };
        ws.write("train.txt", TRAIN);
        ws.write("config.txt", CONFIG);
        ws.write("lexicon.txt", "great\nawful\nlove\n");
        ws.write(
            "vectors.txt",
            "pizza 0.1 0.2 0.3 0.4\ngreat -0.1 0.5 0.0 0.3\n",
        );
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) {
        fs::write(self.path(name), text).unwrap();
    }

    fn train(&self, extra: &[&str]) -> Output {
        let mut args = vec![
            "train".to_string(),
            "--config".into(),
            arg(&self.path("config.txt")),
            "--train".into(),
            arg(&self.path("train.txt")),
            "--dev".into(),
            arg(&self.path("train.txt")),
            "--embeddings".into(),
            arg(&self.path("vectors.txt")),
            "--lexicon".into(),
            arg(&self.path("lexicon.txt")),
            "--out".into(),
            arg(&self.path("model.ckpt")),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        hast(&args)
    }
}

fn arg(p: &Path) -> String {
    p.display().to_string()
}

fn hast<S: AsRef<str>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hast"))
        .args(args.iter().map(AsRef::as_ref))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn train_eval_predict_attn() {
    let ws = Workspace::new();
    let out = ws.train(&["--seed", "9"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("saved to"));
    let ckpt = fs::read_to_string(ws.path("model.ckpt")).unwrap();
    assert!(ckpt.starts_with("HAST-CKPT v1\n"));
    assert!(ckpt.contains("\nseed=9\n"));

    let ckpt_arg = arg(&ws.path("model.ckpt"));
    let data_arg = arg(&ws.path("train.txt"));
    let out = hast(&["eval", "--ckpt", &ckpt_arg, "--data", &data_arg]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("precision recall f1"));
    let scores: Vec<f64> = lines
        .next()
        .unwrap()
        .split(' ')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 3);
    assert!(scores.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(lines.next().unwrap().contains("gold=3"));

    let out = hast(&["predict", "--ckpt", &ckpt_arg, "--data", &data_arg]);
    assert_eq!(code(&out), 0);
    let predicted = stdout(&out);
    // raw tokens survive and the output is itself a valid corpus
    assert!(predicted.starts_with("The\t"));
    assert!(predicted.contains("\n.\t"));
    assert_eq!(
        predicted
            .split("\n\n")
            .filter(|b| !b.trim().is_empty())
            .count(),
        3
    );
    ws.write("pred.txt", &predicted);
    let pred_arg = arg(&ws.path("pred.txt"));
    let out = hast(&["eval", "--ckpt", &ckpt_arg, "--data", &pred_arg]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let counts = text.lines().nth(2).unwrap();
    if !counts.contains("gold=0") {
        assert_eq!(text.lines().nth(1), Some("1.0000 1.0000 1.0000"));
    }

    let out = hast(&[
        "attn",
        "--ckpt",
        &ckpt_arg,
        "--sentence",
        "The great pizza !",
        "--pos",
        "3",
    ]);
    assert_eq!(code(&out), 0);
    let csv = stdout(&out);
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("kind,position,token,weight"));
    let opinion: Vec<Vec<String>> = rows
        .map(|r| r.split(',').map(String::from).collect::<Vec<_>>())
        .filter(|r| r[0] == "opinion")
        .collect();
    assert_eq!(opinion.len(), 4);
    assert_eq!(opinion[3][2], "PUNCT");
    let total: f64 = opinion.iter().map(|r| r[3].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() <= 1e-9);
}

#[test]
fn ablation_flags_reach_the_checkpoint() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.train(&["--no-tha", "--no-stn"])), 0);
    let ckpt = fs::read_to_string(ws.path("model.ckpt")).unwrap();
    assert!(ckpt.contains("\nuse_tha=false\n"));
    assert!(ckpt.contains("\nuse_stn=false\n"));
}

#[test]
fn training_is_reproducible() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.train(&[])), 0);
    let first = fs::read(ws.path("model.ckpt")).unwrap();
    assert_eq!(code(&ws.train(&[])), 0);
    assert_eq!(first, fs::read(ws.path("model.ckpt")).unwrap());
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(code(&hast(&["train"])), 2);
    assert_eq!(code(&hast(&["frobnicate"])), 2);

    let ws = Workspace::new();
    ws.write("config.txt", "dropout=1.5\n");
    assert_eq!(code(&ws.train(&[])), 2);
    ws.write("config.txt", "hidden=3\n");
    assert_eq!(code(&ws.train(&[])), 2);

    ws.write("config.txt", CONFIG);
    // embedding width disagrees with dim_w
    ws.write("vectors.txt", "pizza 0.1 0.2\n");
    assert_eq!(code(&ws.train(&[])), 2);

    ws.write("vectors.txt", "pizza 0.1 0.2 0.3 0.4\n");
    assert_eq!(code(&ws.train(&[])), 0);
    let ckpt_arg = arg(&ws.path("model.ckpt"));
    for pos in ["0", "3"] {
        let out = hast(&[
            "attn",
            "--ckpt",
            &ckpt_arg,
            "--sentence",
            "great pizza",
            "--pos",
            pos,
        ]);
        assert_eq!(code(&out), 2);
    }
    let out = hast(&[
        "attn",
        "--ckpt",
        &ckpt_arg,
        "--sentence",
        "  ",
        "--pos",
        "1",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn data_errors_exit_3() {
    let ws = Workspace::new();
    ws.write("train.txt", "pizza\tB\nlife\tX\n");
    let out = ws.train(&[]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));

    ws.write("train.txt", "pizza\tO\nlife\tI\n");
    assert_eq!(code(&ws.train(&[])), 3);

    ws.write("train.txt", TRAIN);
    fs::remove_file(ws.path("lexicon.txt")).unwrap();
    assert_eq!(code(&ws.train(&[])), 3);

    ws.write("lexicon.txt", "great\n");
    assert_eq!(code(&ws.train(&[])), 0);
    let ckpt_arg = arg(&ws.path("model.ckpt"));
    let missing = arg(&ws.path("nope.txt"));
    assert_eq!(
        code(&hast(&["eval", "--ckpt", &ckpt_arg, "--data", &missing])),
        3
    );

    let text = fs::read_to_string(ws.path("model.ckpt")).unwrap();
    ws.write(
        "model.ckpt",
        &text.replacen("HAST-CKPT v1", "HAST-CKPT v2", 1),
    );
    let data_arg = arg(&ws.path("train.txt"));
    assert_eq!(
        code(&hast(&["eval", "--ckpt", &ckpt_arg, "--data", &data_arg])),
        3
    );
    ws.write("model.ckpt", &text[..text.len() / 2]);
    assert_eq!(
        code(&hast(&[
            "predict", "--ckpt", &ckpt_arg, "--data", &data_arg
        ])),
        3
    );
}

#[test]
fn divergence_exits_4() {
    let ws = Workspace::new();
    ws.write(
        "config.txt",
        &format!("{CONFIG}learning_rate=1e300\nepochs=5\n"),
    );
    let out = ws.train(&[]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sentence"));
}
