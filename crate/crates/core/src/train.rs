//! Data loading, target construction, the training loop, checkpointing and
//! inference over a dataset split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result, ResultExt};
use crate::eval::{evaluate_frames, EvalReport, FrameData};
use crate::head::{build_targets, generate_anchors, postprocess, Anchor};
use crate::kitti::{self, AppliedTransforms, Calibration, Frame, KittiLabel, Mode};
use crate::lid::Lid;
use crate::losses::{detection_loss, Targets};
use crate::model::{model_forward, Model};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::{checkpoint, ParamStore, Rng, Tape, Tensor};

pub const LOSS_CSV_HEADER: &str = "step,lcls,lreg,ldepth,ltotal,lr";

/// Seed-stream offsets keeping epoch shuffles and augmentation draws apart.
const SHUFFLE_STREAM: u64 = 1 << 40;
const AUGMENT_STREAM: u64 = 1 << 41;

/// One frame held in memory.
#[derive(Clone, Debug)]
pub struct LoadedFrame {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<KittiLabel>,
    pub calib: Calibration,
    /// `[H, W]` metric depth, `+inf` where unknown.
    pub depth: Option<Tensor>,
}

pub fn load_frame(frame: &Frame) -> Result<LoadedFrame> {
    let depth = if frame.depth.exists() {
        Some(kitti::read_depth(&frame.depth)?)
    } else {
        None
    };
    let image = kitti::load_image(&frame.image)?;
    if let Some(d) = &depth {
        if d.shape() != &image.shape()[1..] {
            return Err(Error::Dimension(format!(
                "{}: depth {:?} does not match image {:?}",
                frame.id,
                d.shape(),
                image.shape()
            )));
        }
    }
    Ok(LoadedFrame {
        id: frame.id.clone(),
        image,
        labels: kitti::read_labels(&frame.label)?,
        calib: kitti::read_calibration(&frame.calib)?,
        depth,
    })
}

pub fn load_split(root: &Path) -> Result<Vec<LoadedFrame>> {
    let frames = kitti::dataset_frames(root)?;
    if frames.is_empty() {
        return Err(Error::Config(format!("no labelled frames under {}", root.display())));
    }
    frames.iter().map(load_frame).collect()
}

/// Per-cell depth bins: each feature cell samples the source depth at the pixel
/// under its center. Cells over unknown depth get `None`.
pub fn depth_targets(
    depth: &Tensor,
    t: &AppliedTransforms,
    lid: &Lid,
    rows: usize,
    cols: usize,
) -> Vec<Option<usize>> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let (sy, sx) = (t.out_height as f64 / rows as f64, t.out_width as f64 / cols as f64);
    let d = depth.data();
    let mut out = Vec::with_capacity(rows * cols);
    for y in 0..rows {
        for x in 0..cols {
            let (u, v) = t.source_point((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy);
            let (px, py) = (u.floor(), v.floor());
            let z = if px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < h {
                d[py as usize * w + px as usize] as f64
            } else {
                f64::INFINITY
            };
            out.push(z.is_finite().then(|| lid.depth_to_bin(z)));
        }
    }
    out
}

/// A network-ready image with its adjusted calibration and supervision.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub image: Tensor,
    pub calib: Calibration,
    pub transforms: AppliedTransforms,
    pub targets: Targets,
}

/// Shared per-run state derived from the configuration.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub anchors: Vec<Anchor>,
    pub lid: Lid,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (rows, cols) = cfg.model.feature_size();
        let anchors = generate_anchors(&cfg.head.anchors, rows, cols)?;
        let lid = Lid::new(cfg.lid)?;
        Ok(Pipeline { cfg, anchors, lid })
    }

    pub fn prepare(&self, frame: &LoadedFrame, mode: Mode, rng: &mut Rng) -> Result<Prepared> {
        let (image, t) = kitti::preprocess(&frame.image, mode, &self.cfg.preprocess, rng)?;
        let calib = t.adjust_calibration(&frame.calib);
        let labels = t.adjust_labels(&frame.labels);
        let (cls, reg) = build_targets(&self.anchors, &labels, &self.cfg.class_names, &calib, &self.cfg.head)
            .context(&frame.id)?;
        let (rows, cols) = self.cfg.model.feature_size();
        let depth_bins = match &frame.depth {
            Some(d) => depth_targets(d, &t, &self.lid, rows, cols),
            None => vec![None; rows * cols],
        };
        Ok(Prepared {
            id: frame.id.clone(),
            image,
            calib,
            transforms: t,
            targets: Targets { cls, reg, depth_bins },
        })
    }

    /// Detections for one frame in source-image coordinates.
    pub fn predict(&self, model: &Model, frame: &LoadedFrame) -> Result<Vec<KittiLabel>> {
        let mut rng = Rng::seed(0);
        let (image, t) = kitti::preprocess(&frame.image, Mode::Test, &self.cfg.preprocess, &mut rng)?;
        let calib = t.adjust_calibration(&frame.calib);
        let out = model.infer(&image)?;
        let dets = postprocess(
            &out.cls_logits,
            &out.box_deltas,
            &self.anchors,
            self.cfg.class_names.len(),
            &calib,
            &self.cfg.head,
        )?;
        Ok(dets
            .iter()
            .map(|d| {
                let name = &self.cfg.class_names[d.class];
                KittiLabel::from_box3d(name, t.restore_box(&d.bbox), &d.box3d, Some(d.score))
            })
            .collect())
    }
}

/// Loss values of one image or the mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub cls: f64,
    pub reg: f64,
    pub depth: f64,
    pub total: f64,
}

/// Forward and backward pass of one image on its own tape.
pub fn image_gradients(
    params: &ParamStore,
    cfg: &RunConfig,
    sample: &Prepared,
) -> Result<(LossValues, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let x = tape.constant(sample.image.clone());
    let out = model_forward(&mut tape, &p, &cfg.model, x)?;
    let terms = detection_loss(&mut tape, &out, &sample.targets, cfg.class_names.len(), &cfg.loss)?;
    let scalar = |tape: &Tape, v| tape.value(v).item().map(|x| x as f64);
    let values = LossValues {
        cls: scalar(&tape, terms.cls)?,
        reg: scalar(&tape, terms.reg)?,
        depth: match terms.depth {
            Some(d) if terms.depth_supervised > 0 => scalar(&tape, d)?,
            _ => 0.0,
        },
        total: scalar(&tape, terms.total)?,
    };
    tape.backward(terms.total)?;
    let grads = p
        .iter()
        .filter_map(|(name, v)| tape.grad(v).map(|g| (name.to_string(), g)))
        .collect();
    Ok((values, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based index of the step just taken.
    pub step: usize,
    pub loss: LossValues,
    pub lr: f64,
}

impl StepStats {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6e}",
            self.step, l.cls, l.reg, l.depth, l.total, self.lr
        )
    }
}

pub struct Trainer {
    pub pipeline: Pipeline,
    pub model: Model,
    pub adam: Adam,
    /// Steps completed.
    pub step: usize,
    pub total_steps: usize,
    frames: Vec<LoadedFrame>,
    /// Preprocessed samples when augmentation is off, so each image is prepared once.
    cache: Option<Vec<Prepared>>,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, frames: Vec<LoadedFrame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Config("training needs at least one frame".into()));
        }
        let pipeline = Pipeline::new(cfg)?;
        let cfg = &pipeline.cfg;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(cfg.train.beta1, cfg.train.beta2, cfg.train.eps);
        let total_steps = match cfg.train.steps {
            0 => cfg.train.epochs * frames.len().div_ceil(cfg.train.batch_size),
            s => s,
        };
        let cache = if cfg.train.augment {
            None
        } else {
            let mut rng = Rng::seed(cfg.seed);
            Some(
                frames
                    .iter()
                    .map(|f| pipeline.prepare(f, Mode::Test, &mut rng))
                    .collect::<Result<_>>()?,
            )
        };
        Ok(Trainer {
            pipeline,
            model,
            adam,
            step: 0,
            total_steps,
            frames,
            cache,
            order: None,
        })
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.pipeline.cfg
    }

    pub fn frames(&self) -> &[LoadedFrame] {
        &self.frames
    }

    /// Frame indices of the batch for `step`: consecutive draws from per-epoch
    /// shuffles, so the batch depends only on the seed and the step.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let n = self.frames.len();
        let b = self.cfg().train.batch_size;
        let seed = self.cfg().seed;
        (step * b..(step + 1) * b)
            .map(|k| {
                let epoch = k / n;
                if self.order.as_ref().map(|o| o.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    Rng::stream(seed, SHUFFLE_STREAM + epoch as u64).shuffle(&mut perm);
                    self.order = Some((epoch, perm));
                }
                self.order.as_ref().expect("order set above").1[k % n]
            })
            .collect()
    }

    fn batch(&mut self, step: usize) -> Result<Vec<Prepared>> {
        let idx = self.batch_indices(step);
        let b = idx.len();
        match &self.cache {
            Some(c) => Ok(idx.iter().map(|&i| c[i].clone()).collect()),
            None => idx
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = Rng::stream(self.cfg().seed, AUGMENT_STREAM + (step * b + j) as u64);
                    self.pipeline.prepare(&self.frames[i], Mode::Train, &mut rng)
                })
                .collect(),
        }
    }

    /// Mean loss over the batch for `step` at the current parameters, without updating.
    pub fn batch_loss(&mut self, step: usize) -> Result<LossValues> {
        let batch = self.batch(step)?;
        let per_image = self.per_image(&batch)?;
        Ok(mean_losses(per_image.iter().map(|(l, _)| l)))
    }

    fn per_image(&self, batch: &[Prepared]) -> Result<Vec<(LossValues, BTreeMap<String, Tensor>)>> {
        let (params, cfg) = (&self.model.params, self.cfg());
        batch
            .par_iter()
            .map(|s| image_gradients(params, cfg, s).context(&s.id))
            .collect()
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        let step = self.step;
        let batch = self.batch(step)?;
        let per_image = self.per_image(&batch)?;
        let loss = mean_losses(per_image.iter().map(|(l, _)| l));
        if !loss.total.is_finite() {
            return Err(Error::Contract(format!("loss became non-finite at step {}", step + 1)));
        }
        let scale = 1.0 / per_image.len() as f64;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (_, g) in per_image {
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += *b),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * scale) as _);
        }
        let t = &self.cfg().train;
        let lr = cosine_lr(step, self.total_steps, t.lr, t.lr_min);
        self.adam.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            lr,
        })
    }

    /// Writes parameters to `<dir>/step_NNNNNN.ckpt` and optimizer state beside it.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("step_{:06}.ckpt", self.step));
        checkpoint::save(&path, &self.model.params)?;
        checkpoint::save(&optimizer_path(&path), &self.adam.state())?;
        Ok(path)
    }

    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let params = checkpoint::load(path)?;
        self.model.params.check_compatible(&params)?;
        self.model.params = params;
        self.adam.restore(&checkpoint::load(&optimizer_path(path))?)?;
        self.step = self.adam.t as usize;
        Ok(())
    }

    pub fn predict_all(&self) -> Result<Vec<(String, Vec<KittiLabel>)>> {
        self.frames
            .iter()
            .map(|f| Ok((f.id.clone(), self.pipeline.predict(&self.model, f)?)))
            .collect()
    }
}

pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("adam")
}

fn mean_losses<'a>(it: impl Iterator<Item = &'a LossValues>) -> LossValues {
    let mut n = 0.0;
    let mut acc = LossValues::default();
    for l in it {
        n += 1.0;
        acc.cls += l.cls;
        acc.reg += l.reg;
        acc.depth += l.depth;
        acc.total += l.total;
    }
    if n > 0.0 {
        acc.cls /= n;
        acc.reg /= n;
        acc.depth /= n;
        acc.total /= n;
    }
    acc
}

/// Writes one KITTI label file per frame into `dir`.
pub fn write_predictions(dir: &Path, preds: &[(String, Vec<KittiLabel>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, labels) in preds {
        kitti::write_labels(&dir.join(format!("{id}.txt")), labels)?;
    }
    Ok(())
}

pub fn evaluate_predictions(
    frames: &[LoadedFrame],
    preds: &[(String, Vec<KittiLabel>)],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let data: Vec<FrameData> = frames
        .iter()
        .zip(preds)
        .map(|(f, (_, dets))| FrameData {
            gts: f.labels.clone(),
            dets: dets.clone(),
        })
        .collect();
    evaluate_frames(&data, &cfg.eval)
}

/// What a full training run produced.
pub struct TrainSummary {
    pub first: Option<StepStats>,
    pub last: Option<StepStats>,
    pub report: EvalReport,
    pub model_path: PathBuf,
}

/// Trains for the configured number of steps, logging every step to
/// `<out>/loss.csv` and checkpointing into `<out>/checkpoints`, then writes the
/// final model, predictions on the training split, and their evaluation.
pub fn run_training(
    cfg: RunConfig,
    resume: Option<&Path>,
    mut progress: impl FnMut(&StepStats),
) -> Result<TrainSummary> {
    let root = cfg
        .train_dir
        .clone()
        .ok_or_else(|| Error::Config("data.train_dir is not set".into()))?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let frames = load_split(&root)?;
    let mut trainer = Trainer::new(cfg, frames)?;
    if let Some(p) = resume {
        trainer.resume(p)?;
    }
    let csv_path = out.join("loss.csv");
    let mut csv = if resume.is_some() && csv_path.exists() {
        fs::OpenOptions::new().append(true).open(&csv_path)
    } else {
        fs::File::create(&csv_path).and_then(|mut f| writeln!(f, "{LOSS_CSV_HEADER}").map(|_| f))
    }
    .map_err(|e| Error::io(&csv_path, e))?;
    let ckpt_dir = out.join("checkpoints");
    let every = trainer.cfg().train.checkpoint_every;
    let (mut first, mut last) = (None, None);
    while trainer.step < trainer.total_steps {
        let s = trainer.train_step()?;
        writeln!(csv, "{}", s.csv_row()).map_err(|e| Error::io(&csv_path, e))?;
        progress(&s);
        first.get_or_insert(s);
        last = Some(s);
        if every > 0 && trainer.step % every == 0 {
            trainer.save_checkpoint(&ckpt_dir)?;
        }
    }
    let model_path = out.join("model.ckpt");
    checkpoint::save(&model_path, &trainer.model.params)?;
    let preds = trainer.predict_all()?;
    write_predictions(&out.join("pred"), &preds)?;
    let report = evaluate_predictions(trainer.frames(), &preds, trainer.cfg())?;
    let eval_path = out.join("eval.txt");
    fs::write(&eval_path, report.to_text()).map_err(|e| Error::io(&eval_path, e))?;
    let csv_report = out.join("eval.csv");
    fs::write(&csv_report, report.to_csv()).map_err(|e| Error::io(&csv_report, e))?;
    Ok(TrainSummary {
        first,
        last,
        report,
        model_path,
    })
}

/// Summary lines printed at the end of training.
pub fn summary_text(s: &TrainSummary) -> String {
    let mut t = String::new();
    if let (Some(a), Some(b)) = (s.first, s.last) {
        writeln!(
            t,
            "loss {:.4} -> {:.4} over steps {}..{}",
            a.loss.total, b.loss.total, a.step, b.step
        )
        .expect("write to string");
    }
    writeln!(t, "model written to {}", s.model_path.display()).expect("write to string");
    t.push_str(&s.report.to_text());
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lid::LidConfig;

    #[test]
    fn depth_targets_follow_the_flip() {
        // Left half near, right half unknown.
        let (h, w) = (8, 8);
        let depth = Tensor::from_fn(&[h, w], |i| if i % w < 4 { 5.0 } else { f64::INFINITY as _ });
        let lid = Lid::new(LidConfig::default()).unwrap();
        let mut t = AppliedTransforms {
            crop_top: 0,
            cropped_width: w,
            cropped_height: h,
            flipped: false,
            out_width: w,
            out_height: h,
        };
        let bins = depth_targets(&depth, &t, &lid, 2, 2);
        let near = Some(lid.depth_to_bin(5.0));
        assert_eq!(bins, vec![near, None, near, None]);
        t.flipped = true;
        assert_eq!(depth_targets(&depth, &t, &lid, 2, 2), vec![None, near, None, near]);
    }
}
