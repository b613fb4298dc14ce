//! The `auxdepth` binary: exit codes, printed configuration, and each subcommand.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn auxdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auxdepth")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(auxdepth(&[]).status.code(), Some(2));
    assert_eq!(auxdepth(&["fly"]).status.code(), Some(2));
    let o = auxdepth(&["gradcheck", "--set", "no.such.key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key `no.such.key`"), "{}", stderr(&o));
    let o = auxdepth(&["gradcheck", "--set", "lid.bins=1", "--set", "train.lr=-1"]);
    assert_eq!(o.status.code(), Some(2));
    // Both problems reported at once.
    assert!(stderr(&o).contains("lid") && stderr(&o).contains("train.lr"), "{}", stderr(&o));
    assert_eq!(auxdepth(&["gradcheck", "--set", "novalue"]).status.code(), Some(2));
    assert_eq!(auxdepth(&["gradcheck", "--config", "/nonexistent/x.cfg"]).status.code(), Some(2));
    assert_eq!(auxdepth(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_then_overrides_then_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# toy tweaks\nlid.bins = 24\ntrain.lr = 0.001\nseed = 5\n").unwrap();
    let o = auxdepth(&[
        "synth", "--config", p(&cfg), "--set", "train.lr=0.002", "--seed", "9",
        "--out", p(&dir.path().join("data")), "--count", "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("# resolved configuration\n"));
    for line in ["lid.bins = 24", "train.lr = 0.002", "seed = 9", "synth.count = 2"] {
        assert!(out.lines().any(|l| l == line), "missing `{line}` in\n{out}");
    }
    assert_eq!(fs::read_dir(dir.path().join("data/label_2")).unwrap().count(), 2);
}

#[test]
fn synth_evaluate_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = auxdepth(&["synth", "--out", p(&data), "--count", "3", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for sub in ["image_2", "label_2", "calib", "depth"] {
        assert!(data.join(sub).is_dir(), "{sub}");
    }
    let labels = data.join("label_2");
    let csv = dir.path().join("eval.csv");
    let o = auxdepth(&[
        "evaluate", "--pred", p(&labels), "--gt", p(&labels), "--iou", "0.5", "--metric", "apbev", "--csv", p(&csv),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("eval.iou = 0.5"));
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("metric,easy,moderate,hard\nAPBEV,"), "{table}");
    assert!(table.contains("100.0000"), "{table}");

    let o = auxdepth(&["evaluate", "--pred", "/nonexistent/pred", "--gt", p(&labels)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let svg = dir.path().join("plots/000000.svg");
    let o = auxdepth(&[
        "bev-plot", "--gt", p(&labels), "--pred", p(&labels), "--frame", "000000", "--out", p(&svg),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let polys = |class: &str| {
        doc.descendants()
            .filter(|n| n.has_tag_name("polygon") && n.attribute("class") == Some(class))
            .count()
    };
    let cars = fs::read_to_string(labels.join("000000.txt")).unwrap().lines().filter(|l| l.starts_with("Car")).count();
    assert_eq!(polys("gt"), cars);
    assert_eq!(polys("pred"), cars);
}

#[test]
fn train_writes_artifacts_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(auxdepth(&["synth", "--out", p(&data), "--count", "2"]).status.code(), Some(0));
    let out = dir.path().join("run");
    let common = |steps: &str| {
        vec![
            "--set".to_string(), format!("data.train_dir={}", p(&data)),
            "--set".into(), format!("output.dir={}", p(&out)),
            "--set".into(), "input.height=64".into(),
            "--set".into(), "input.width=192".into(),
            "--set".into(), "train.batch_size=2".into(),
            "--set".into(), "train.checkpoint_every=2".into(),
            "--set".into(), format!("train.steps={steps}"),
        ]
    };
    let mut args = vec!["train".to_string()];
    args.extend(common("4"));
    let o = auxdepth(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("step      1"), "{}", stdout(&o));
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,lcls,lreg,ldepth,ltotal,lr"));
    assert_eq!(csv.lines().count(), 5);
    for f in ["model.ckpt", "eval.txt", "eval.csv", "checkpoints/step_000002.ckpt", "checkpoints/step_000004.adam"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_dir(out.join("pred")).unwrap().count(), 2);

    let mut args = vec!["train".to_string(), "--resume".into(), p(&out.join("checkpoints/step_000002.ckpt")).into()];
    args.extend(common("6"));
    let o = auxdepth(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "3", "4", "5", "6"]);
}

#[test]
fn train_without_data_is_a_usage_error() {
    let o = auxdepth(&["train", "--set", "train.steps=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("# resolved configuration"));
}

#[test]
fn gradcheck_passes() {
    let o = auxdepth(&["gradcheck", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("checks, 0 failed"));
}
