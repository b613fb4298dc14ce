//! Model size, gradients, ablation switches, determinism and checkpoint resume.

use std::path::Path;

use auxdepth::config::{Profile, RunConfig};
use auxdepth::diagnostics::{model_checks, module_checks};
use auxdepth::model::Model;
use auxdepth::synth::{write_dataset, SynthConfig};
use auxdepth::train::{load_split, Trainer};

const PARAM_BUDGET: usize = 500_000;

fn small_config(extra: &[(&str, &str)]) -> RunConfig {
    let overrides: Vec<(String, String)> = [
        ("input.height", "64"),
        ("input.width", "192"),
        ("train.batch_size", "2"),
        ("train.steps", "50"),
        ("train.lr", "3e-4"),
        ("seed", "3"),
    ]
    .iter()
    .chain(extra)
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    RunConfig::resolve(None, &overrides).unwrap()
}

fn small_split(root: &Path) {
    write_dataset(root, 4, 2, 3, 5, &SynthConfig::default()).unwrap();
}

#[test]
fn toy_model_fits_the_parameter_budget() {
    let cfg = RunConfig::profile(Profile::Toy);
    let model = Model::new(cfg.model.clone(), 0).unwrap();
    let n = model.num_params();
    assert!(n < PARAM_BUDGET, "{n} parameters");
    assert!(n > PARAM_BUDGET / 10, "{n} parameters");
}

#[test]
fn module_and_model_gradients_match_finite_differences() {
    let results: Vec<_> = module_checks(9).unwrap().into_iter().chain(model_checks(9).unwrap()).collect();
    assert!(results.len() >= 10);
    for r in &results {
        assert!(r.passed(), "{}", r.line());
    }
}

#[test]
fn ablation_switches_run() {
    let dir = tempfile::tempdir().unwrap();
    small_split(dir.path());
    let variants: &[&[(&str, &str)]] = &[
        &[("model.use_adf", "false")],
        &[("adf.enable_prototype_enhancement", "false")],
        &[("adf.attention", "similarity")],
        &[("model.fusion", "concat")],
        &[("dft.query_source", "learned")],
        &[("dft.encoder_attention", "softmax"), ("dft.decoder_attention", "linear")],
        &[("loss.lambda_depth", "0")],
        &[("train.augment", "true")],
        &[("lid.formula", "piecewise")],
    ];
    for v in variants {
        let mut extra = vec![("train.steps", "3")];
        extra.extend_from_slice(v);
        let cfg = small_config(&extra);
        let mut trainer = Trainer::new(cfg, load_split(dir.path()).unwrap()).unwrap();
        for _ in 0..3 {
            let s = trainer.train_step().unwrap();
            assert!(s.loss.total.is_finite(), "{v:?}");
        }
        trainer.predict_all().unwrap();
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    small_split(dir.path());
    let run = || {
        let cfg = small_config(&[("train.augment", "true")]);
        let mut t = Trainer::new(cfg, load_split(dir.path()).unwrap()).unwrap();
        (0..3).map(|_| t.train_step().unwrap().loss.total).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_run_continues_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    small_split(&dir.path().join("data"));
    let frames = || load_split(&dir.path().join("data")).unwrap();
    let cfg = small_config(&[("train.augment", "true"), ("train.steps", "10")]);

    let mut straight = Trainer::new(cfg.clone(), frames()).unwrap();
    for _ in 0..3 {
        straight.train_step().unwrap();
    }
    let ckpt = straight.save_checkpoint(&dir.path().join("ckpt")).unwrap();
    assert!(ckpt.ends_with("step_000003.ckpt"));
    let want = straight.train_step().unwrap();

    let mut resumed = Trainer::new(cfg, frames()).unwrap();
    resumed.resume(&ckpt).unwrap();
    assert_eq!(resumed.step, 3);
    let got = resumed.train_step().unwrap();
    assert_eq!(got.step, want.step);
    assert_eq!(got.loss.total.to_bits(), want.loss.total.to_bits());
    assert_eq!(got.lr.to_bits(), want.lr.to_bits());
    for (name, t) in straight.model.params.iter() {
        assert_eq!(resumed.model.params.get(name).unwrap(), t, "{name}");
    }
}
