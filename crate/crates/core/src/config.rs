//! Run configuration: UTF-8 `key = value` lines with `#` comments, layered over a
//! named profile and then over command-line overrides.
//!
//! Lists are comma separated. Unknown keys and malformed values are collected and
//! reported together.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adf::AdfAttention;
use crate::dft::AttentionKernel;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Metric};
use crate::head::{AnchorConfig, HeadConfig};
use crate::kitti::PreprocessConfig;
use crate::lid::{LidConfig, LidFormula};
use crate::losses::LossConfig;
use crate::model::{Fusion, ModelConfig, QuerySource};
use crate::synth::SynthConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Toy,
    KittiFull,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "kitti-full" => Ok(Profile::KittiFull),
            _ => Err(Error::Config(format!("profile must be `toy` or `kitti-full`, got `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Toy => "toy",
            Profile::KittiFull => "kitti-full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    /// Optimizer steps; when zero, derived from `epochs` and the dataset size.
    pub steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub augment: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub train_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub class_names: Vec<String>,
    pub lid: LidConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth_count: usize,
    pub synth_min_objects: usize,
    pub synth_max_objects: usize,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => {
                let lid = LidConfig {
                    bins: 32,
                    ..LidConfig::default()
                };
                let preprocess = PreprocessConfig {
                    out_width: 640,
                    out_height: 192,
                    ..PreprocessConfig::default()
                };
                let anchors = AnchorConfig {
                    d_min: lid.d_min,
                    d_max: lid.d_max,
                    ..AnchorConfig::toy()
                };
                RunConfig {
                    profile,
                    seed: 0,
                    train_dir: None,
                    output_dir: PathBuf::from("runs/toy"),
                    class_names: vec!["Car".into()],
                    model: ModelConfig::new(192, 640, lid.bins, anchors.per_location()),
                    lid,
                    preprocess,
                    head: HeadConfig::new(anchors),
                    loss: LossConfig::default(),
                    train: TrainConfig {
                        lr: 1e-3,
                        lr_min: 5e-6,
                        steps: 2000,
                        epochs: 0,
                        batch_size: 4,
                        checkpoint_every: 500,
                        augment: false,
                        beta1: 0.9,
                        beta2: 0.999,
                        eps: 1e-8,
                    },
                    eval: EvalConfig::default(),
                    synth_count: 20,
                    synth_min_objects: 2,
                    synth_max_objects: 5,
                    synth: SynthConfig::default(),
                }
            }
            Profile::KittiFull => {
                let lid = LidConfig::default();
                let anchors = AnchorConfig::full_scale();
                let mut cfg = RunConfig::profile(Profile::Toy);
                cfg.profile = profile;
                cfg.output_dir = PathBuf::from("runs/kitti-full");
                cfg.preprocess = PreprocessConfig::default();
                cfg.model = ModelConfig::new(288, 1280, lid.bins, anchors.per_location());
                cfg.lid = lid;
                cfg.head = HeadConfig::new(anchors);
                cfg.train.lr = 1e-4;
                cfg.train.steps = 0;
                cfg.train.epochs = 120;
                cfg.train.batch_size = 16;
                cfg.train.augment = true;
                cfg.train.checkpoint_every = 5000;
                cfg
            }
        }
    }

    /// Parses config text and overrides on top of the profile named by the last
    /// `profile` entry (default `toy`). Overrides win over file entries.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = match file_text {
            Some(t) => parse_entries(t)?,
            None => Vec::new(),
        };
        entries.extend(overrides.iter().cloned());
        let profile = match entries.iter().rev().find(|(k, _)| k == "profile") {
            Some((_, v)) => Profile::parse(v)?,
            None => Profile::Toy,
        };
        let mut cfg = RunConfig::profile(profile);
        let mut problems = Vec::new();
        for (k, v) in &entries {
            if k == "profile" {
                continue;
            }
            if let Err(e) = cfg.set(k, v) {
                problems.push(e.to_string());
            }
        }
        cfg.sync();
        if let Err(e) = cfg.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems.join("\n  ")))
        }
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        RunConfig::resolve(text.as_deref(), overrides)
    }

    /// Propagates shared values (bins, widths, depth range, input size) into the
    /// sub-configurations.
    pub fn sync(&mut self) {
        self.model.input_height = self.preprocess.out_height;
        self.model.input_width = self.preprocess.out_width;
        self.model.adf.bins = self.lid.bins;
        self.model.adf.channels = self.model.dft.width;
        self.model.anchors_per_location = self.head.anchors.per_location();
        self.model.classes = self.class_names.len();
        self.head.anchors.d_min = self.lid.d_min;
        self.head.anchors.d_max = self.lid.d_max;
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        check(self.lid.validate());
        check(self.model.validate());
        check(self.head.validate());
        check(self.loss.validate());
        check(self.eval.validate());
        if self.class_names.is_empty() {
            problems.push("model.classes must name at least one class".into());
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr) {
            problems.push(format!("need 0 ≤ train.lr_min ≤ train.lr and lr > 0, got {} and {}", t.lr_min, t.lr));
        }
        if t.batch_size == 0 || (t.steps == 0 && t.epochs == 0) {
            problems.push("train.batch_size and one of train.steps or train.epochs must be positive".into());
        }
        if let Some(dir) = &self.train_dir {
            if !dir.is_dir() {
                problems.push(format!("data.train_dir {} is not a directory", dir.display()));
            }
        }
        if self.preprocess.crop_top >= self.synth.height {
            problems.push(format!(
                "input.crop_top {} leaves nothing of {}-row synthetic images",
                self.preprocess.crop_top, self.synth.height
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("`{key}`: {what}, got `{v}`"));
        let f = || v.parse::<f64>().map_err(|_| bad("expected a number"));
        let u = || v.parse::<usize>().map_err(|_| bad("expected a non-negative integer"));
        let b = || match v {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(bad("expected true or false")),
        };
        let fl = || -> Result<Vec<f64>> {
            v.split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad("expected comma-separated numbers")))
                .collect()
        };
        match key {
            "seed" => self.seed = v.parse().map_err(|_| bad("expected an integer"))?,
            "data.train_dir" => self.train_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output.dir" => self.output_dir = PathBuf::from(v),
            "model.classes" => self.class_names = v.split(',').map(|s| s.trim().to_string()).collect(),
            "model.use_adf" => self.model.use_adf = b()?,
            "model.fusion" => self.model.fusion = v.parse::<Fusion>()?,
            "model.backbone_channels" => {
                self.model.backbone_channels = v
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| bad("expected comma-separated integers")))
                    .collect::<Result<_>>()?
            }
            "input.height" => self.preprocess.out_height = u()?,
            "input.width" => self.preprocess.out_width = u()?,
            "input.crop_top" => self.preprocess.crop_top = u()?,
            "lid.d_min" => self.lid.d_min = f()?,
            "lid.d_max" => self.lid.d_max = f()?,
            "lid.bins" => self.lid.bins = u()?,
            "lid.formula" => self.lid.formula = v.parse::<LidFormula>()?,
            "adf.dilation" => self.model.adf.dilation = u()?,
            "adf.enable_prototype_enhancement" => self.model.adf.enable_prototype_enhancement = b()?,
            "adf.attention" => self.model.adf.attention = v.parse::<AdfAttention>()?,
            "dft.width" => {
                let w = u()?;
                self.model.dft.width = w;
                self.model.dft.ffn_hidden = 2 * w;
                if let Some(last) = self.model.backbone_channels.last_mut() {
                    *last = w;
                }
            }
            "dft.heads" => self.model.dft.heads = u()?,
            "dft.enc_layers" => self.model.dft.enc_layers = u()?,
            "dft.dec_layers" => self.model.dft.dec_layers = u()?,
            "dft.ffn_hidden" => self.model.dft.ffn_hidden = u()?,
            "dft.encoder_attention" => self.model.dft.encoder_attention = v.parse::<AttentionKernel>()?,
            "dft.decoder_attention" => self.model.dft.decoder_attention = v.parse::<AttentionKernel>()?,
            "dft.query_source" => self.model.query_source = v.parse::<QuerySource>()?,
            "head.scales" => self.head.anchors.scales = fl()?,
            "head.ratios" => self.head.anchors.ratios = fl()?,
            "head.nms_iou" => self.head.nms_iou = f()?,
            "head.min_score" => self.head.min_score = f()?,
            "head.pos_iou" => self.head.pos_iou = f()?,
            "head.neg_iou" => self.head.neg_iou = f()?,
            "loss.alpha" => self.loss.alpha = f()?,
            "loss.gamma" => self.loss.gamma = f()?,
            "loss.beta" => self.loss.beta = f()?,
            "loss.lambda_reg" => self.loss.lambda_reg = f()?,
            "loss.lambda_depth" => self.loss.lambda_depth = f()?,
            "train.lr" => self.train.lr = f()?,
            "train.lr_min" => self.train.lr_min = f()?,
            "train.steps" => self.train.steps = u()?,
            "train.epochs" => self.train.epochs = u()?,
            "train.batch_size" => self.train.batch_size = u()?,
            "train.checkpoint_every" => self.train.checkpoint_every = u()?,
            "train.augment" => self.train.augment = b()?,
            "aug.brightness" => self.preprocess.brightness = f()?,
            "aug.contrast" => self.preprocess.contrast = f()?,
            "aug.saturation" => self.preprocess.saturation = f()?,
            "aug.hue" => self.preprocess.hue = f()?,
            "aug.flip_prob" => self.preprocess.flip_probability = f()?,
            "eval.iou" => self.eval.iou_threshold = f()?,
            "eval.class" => self.eval.class = v.to_string(),
            "eval.metrics" => {
                self.eval.metrics = v.split(',').map(|s| s.trim().parse::<Metric>()).collect::<Result<_>>()?
            }
            "synth.count" => self.synth_count = u()?,
            "synth.min_objects" => self.synth_min_objects = u()?,
            "synth.max_objects" => self.synth_max_objects = u()?,
            "synth.z_min" => self.synth.z_min = f()?,
            "synth.z_max" => self.synth.z_max = f()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let m = &self.model;
        vec![
            ("profile", self.profile.as_str().into()),
            ("seed", self.seed.to_string()),
            (
                "data.train_dir",
                self.train_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("output.dir", self.output_dir.display().to_string()),
            ("model.classes", self.class_names.join(",")),
            ("model.use_adf", m.use_adf.to_string()),
            ("model.fusion", m.fusion.as_str().into()),
            (
                "model.backbone_channels",
                m.backbone_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("input.height", self.preprocess.out_height.to_string()),
            ("input.width", self.preprocess.out_width.to_string()),
            ("input.crop_top", self.preprocess.crop_top.to_string()),
            ("lid.d_min", self.lid.d_min.to_string()),
            ("lid.d_max", self.lid.d_max.to_string()),
            ("lid.bins", self.lid.bins.to_string()),
            ("lid.formula", self.lid.formula.as_str().into()),
            ("adf.dilation", m.adf.dilation.to_string()),
            ("adf.enable_prototype_enhancement", m.adf.enable_prototype_enhancement.to_string()),
            ("adf.attention", m.adf.attention.as_str().into()),
            ("dft.width", m.dft.width.to_string()),
            ("dft.heads", m.dft.heads.to_string()),
            ("dft.enc_layers", m.dft.enc_layers.to_string()),
            ("dft.dec_layers", m.dft.dec_layers.to_string()),
            ("dft.ffn_hidden", m.dft.ffn_hidden.to_string()),
            ("dft.encoder_attention", m.dft.encoder_attention.as_str().into()),
            ("dft.decoder_attention", m.dft.decoder_attention.as_str().into()),
            ("dft.query_source", m.query_source.as_str().into()),
            ("head.scales", list(&self.head.anchors.scales)),
            ("head.ratios", list(&self.head.anchors.ratios)),
            ("head.nms_iou", self.head.nms_iou.to_string()),
            ("head.min_score", self.head.min_score.to_string()),
            ("head.pos_iou", self.head.pos_iou.to_string()),
            ("head.neg_iou", self.head.neg_iou.to_string()),
            ("loss.alpha", self.loss.alpha.to_string()),
            ("loss.gamma", self.loss.gamma.to_string()),
            ("loss.beta", self.loss.beta.to_string()),
            ("loss.lambda_reg", self.loss.lambda_reg.to_string()),
            ("loss.lambda_depth", self.loss.lambda_depth.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.lr_min", self.train.lr_min.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("train.augment", self.train.augment.to_string()),
            ("aug.brightness", self.preprocess.brightness.to_string()),
            ("aug.contrast", self.preprocess.contrast.to_string()),
            ("aug.saturation", self.preprocess.saturation.to_string()),
            ("aug.hue", self.preprocess.hue.to_string()),
            ("aug.flip_prob", self.preprocess.flip_probability.to_string()),
            ("eval.class", self.eval.class.clone()),
            ("eval.iou", self.eval.iou_threshold.to_string()),
            (
                "eval.metrics",
                self.eval
                    .metrics
                    .iter()
                    .map(|m| m.name().to_ascii_lowercase())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("synth.count", self.synth_count.to_string()),
            ("synth.min_objects", self.synth_min_objects.to_string()),
            ("synth.max_objects", self.synth_max_objects.to_string()),
            ("synth.z_min", self.synth.z_min.to_string()),
            ("synth.z_max", self.synth.z_max.to_string()),
        ]
    }

    /// The resolved configuration in the same `key = value` format it is read from.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        s
    }
}

/// `key = value` pairs in file order.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override `{s}` is not `key=value`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!((c.model.input_height, c.model.input_width), (192, 640));
        assert_eq!(c.lid.bins, 32);
        assert_eq!(c.model.dft.width, 64);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.steps, 2000);
        assert_eq!(c.head.anchors.per_location(), 8);
        assert_eq!(c.train.lr, 1e-3);
    }

    #[test]
    fn overrides_and_profile() {
        let text = "# comment\nprofile = kitti-full\nlid.bins = 48 # trailing\n";
        let c = RunConfig::resolve(Some(text), &[("adf.dilation".into(), "8".into())]).unwrap();
        assert_eq!(c.profile, Profile::KittiFull);
        assert_eq!(c.lid.bins, 48);
        assert_eq!(c.model.adf.bins, 48);
        assert_eq!(c.model.adf.dilation, 8);
        assert_eq!((c.model.input_height, c.model.input_width), (288, 1280));
    }

    #[test]
    fn all_problems_reported_together() {
        let text = "bogus = 1\nlid.bins = many\nadf.dilation = 3\n";
        let err = RunConfig::resolve(Some(text), &[]).unwrap_err().to_string();
        assert!(err.contains("unknown key `bogus`"));
        assert!(err.contains("lid.bins"));
        assert!(err.contains("adf.dilation"));
    }

    #[test]
    fn printed_config_round_trips() {
        let c = RunConfig::resolve(None, &[("dft.query_source".into(), "learned".into())]).unwrap();
        let again = RunConfig::resolve(Some(&c.to_text()), &[]).unwrap();
        assert_eq!(c, again);
    }
}
