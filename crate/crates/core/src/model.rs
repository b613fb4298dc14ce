//! Backbone and full-model assembly.
//!
//! ```text
//! image ─ backbone ─┬─ context conv ──────────── encoder ─┐
//!                   └─ ADF ─ depth position mapping ─ decoder(queries) ─ head
//! ```
//!
//! Switches select the ablation variants: no ADF (context only), concatenation
//! instead of the transformer, and learned queries instead of the depth stream.

use std::str::FromStr;

use crate::adf::{adf_forward, AdfConfig};
use crate::dft::{self, DftConfig};
use crate::error::{Error, Result, ResultExt};
use crate::head::REGRESSION_DIMS;
use crate::nn;
use crate::tensor::{BoundParams, Conv2dParams, Initializer, ParamStore, Real, Tape, Tensor, Var};

pub const FEATURE_STRIDE: usize = 16;
/// Initial foreground probability of the classification head.
pub const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    /// Depth position mapping of the ADF output.
    Depth,
    /// A learned `[1, L, C]` table, one query per feature cell.
    Learned,
}

impl FromStr for QuerySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(QuerySource::Depth),
            "learned" => Ok(QuerySource::Learned),
            _ => Err(Error::Config(format!(
                "query source must be `depth` or `learned`, got `{s}`"
            ))),
        }
    }
}

impl QuerySource {
    pub fn as_str(self) -> &'static str {
        match self {
            QuerySource::Depth => "depth",
            QuerySource::Learned => "learned",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Transformer,
    /// 1×1 conv over the concatenated context and depth streams.
    Concat,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Fusion::Transformer),
            "concat" => Ok(Fusion::Concat),
            _ => Err(Error::Config(format!(
                "fusion must be `transformer` or `concat`, got `{s}`"
            ))),
        }
    }
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Transformer => "transformer",
            Fusion::Concat => "concat",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of the four stride-2 stages; the last equals the model width.
    pub backbone_channels: Vec<usize>,
    pub classes: usize,
    pub anchors_per_location: usize,
    pub adf: AdfConfig,
    pub dft: DftConfig,
    pub use_adf: bool,
    pub query_source: QuerySource,
    pub fusion: Fusion,
}

impl ModelConfig {
    pub fn new(input_height: usize, input_width: usize, bins: usize, anchors_per_location: usize) -> Self {
        let dft = DftConfig::default();
        ModelConfig {
            input_height,
            input_width,
            backbone_channels: vec![16, 32, 48, dft.width],
            classes: 1,
            anchors_per_location,
            adf: AdfConfig::new(dft.width, bins),
            dft,
            use_adf: true,
            query_source: QuerySource::Depth,
            fusion: Fusion::Transformer,
        }
    }

    pub fn width(&self) -> usize {
        self.dft.width
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_height / FEATURE_STRIDE, self.input_width / FEATURE_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % FEATURE_STRIDE != 0
            || self.input_width % FEATURE_STRIDE != 0
        {
            problems.push(format!(
                "input {}x{} must be a positive multiple of the feature stride {FEATURE_STRIDE}",
                self.input_height, self.input_width
            ));
        }
        if self.backbone_channels.len() != 4 || self.backbone_channels.contains(&0) {
            problems.push(format!(
                "backbone needs four positive stage widths, got {:?}",
                self.backbone_channels
            ));
        } else if self.backbone_channels[3] != self.width() {
            problems.push(format!(
                "last backbone stage width {} must equal the model width {}",
                self.backbone_channels[3],
                self.width()
            ));
        }
        if self.classes == 0 || self.anchors_per_location == 0 {
            problems.push("classes and anchors per location must be positive".into());
        }
        if self.adf.channels != self.width() {
            problems.push(format!(
                "adf width {} must equal the model width {}",
                self.adf.channels,
                self.width()
            ));
        }
        for (name, r) in [("adf", self.adf.validate()), ("dft", self.dft.validate())] {
            if let Err(e) = r {
                problems.push(format!("{name}: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn uses_transformer(&self) -> bool {
        self.fusion == Fusion::Transformer && (self.use_adf || self.query_source == QuerySource::Learned)
    }

    /// Seeded parameters for exactly the sub-modules this configuration uses.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed, &mut store);
        let c = self.width();
        let mut c_in = 3;
        for (i, &c_out) in self.backbone_channels.iter().enumerate() {
            init.conv(&format!("backbone.{i}"), c_out, c_in, 3);
            c_in = c_out;
        }
        init.conv("context", c, c, 3);
        if self.use_adf {
            self.adf.init_params("adf", &mut init);
        }
        match self.fusion {
            Fusion::Concat if self.use_adf => init.conv("fuse", c, 2 * c, 1),
            Fusion::Concat => {}
            Fusion::Transformer => {
                if self.uses_transformer() {
                    for i in 0..self.dft.enc_layers {
                        self.dft.init_encoder_layer(&format!("dft.enc.{i}"), &mut init);
                    }
                    for i in 0..self.dft.dec_layers {
                        self.dft.init_decoder_layer(&format!("dft.dec.{i}"), &mut init);
                    }
                }
                match self.query_source {
                    QuerySource::Depth if self.use_adf => {
                        self.dft.init_dpm("dft.dpm", self.adf.bins, &mut init)
                    }
                    QuerySource::Depth => {}
                    QuerySource::Learned => {
                        let (h, w) = self.feature_size();
                        init.uniform("dft.queries", &[1, h * w, c], c);
                    }
                }
            }
        }
        let a = self.anchors_per_location;
        init.conv("head.conv", c, c, 3);
        init.conv("head.cls", a * self.classes, c, 1);
        init.conv("head.box", a * REGRESSION_DIMS, c, 1);
        init.constant(
            "head.cls.bias",
            &[a * self.classes],
            -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln() as Real,
        );
        Ok(store)
    }
}

pub struct ModelOutputs {
    /// `[A·K, H_f, W_f]`.
    pub cls_logits: Var,
    /// `[A·R, H_f, W_f]`.
    pub box_deltas: Var,
    /// `[D, H_f, W_f]`; absent without the ADF branch.
    pub depth_logits: Option<Var>,
}

/// Four stride-2 3×3 conv + ReLU stages.
pub fn backbone_forward(tape: &mut Tape, p: &BoundParams, stages: usize, image: Var) -> Result<Var> {
    let (_, h, w) = nn::chw(tape, image)?;
    let factor = 1 << stages;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by the backbone stride {factor}"
        )));
    }
    (0..stages).try_fold(image, |x, i| {
        nn::conv_relu(tape, p, &format!("backbone.{i}"), x, Conv2dParams::same(3, 1).with_stride(2))
    })
}

pub fn model_forward(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, image: Var) -> Result<ModelOutputs> {
    cfg.validate()?;
    let (c_img, h, w) = nn::chw(tape, image)?;
    if (c_img, h, w) != (3, cfg.input_height, cfg.input_width) {
        return Err(Error::Dimension(format!(
            "model expects a [3, {}, {}] image, got {:?}",
            cfg.input_height,
            cfg.input_width,
            tape.shape(image)
        )));
    }
    let feat = backbone_forward(tape, p, cfg.backbone_channels.len(), image).context("backbone")?;
    let ctx = nn::conv_relu(tape, p, "context", feat, Conv2dParams::same(3, 1))?;
    let adf = if cfg.use_adf {
        Some(adf_forward(tape, p, "adf", &cfg.adf, feat).context("adf")?)
    } else {
        None
    };
    let (hf, wf) = cfg.feature_size();
    let fused = match cfg.fusion {
        Fusion::Concat => match &adf {
            Some(a) => {
                let both = tape.concat(&[ctx, a.features])?;
                nn::conv(tape, p, "fuse", both, Conv2dParams::default())?
            }
            None => ctx,
        },
        Fusion::Transformer => {
            let queries = match (cfg.query_source, &adf) {
                (QuerySource::Depth, Some(a)) => Some(
                    dft::depth_position_mapping(tape, p, "dft.dpm", a.features, a.dist)
                        .context("dft.dpm")?,
                ),
                (QuerySource::Depth, None) => None,
                (QuerySource::Learned, _) => Some(p.get("dft.queries")?),
            };
            match queries {
                Some(q) => {
                    let seq = dft::flatten(tape, ctx)?;
                    let context = dft::encode(tape, p, "dft", &cfg.dft, seq).context("dft.encoder")?;
                    let out = dft::decode(tape, p, "dft", &cfg.dft, q, context).context("dft.decoder")?;
                    dft::unflatten(tape, out, hf, wf)?
                }
                None => ctx,
            }
        }
    };
    let hidden = nn::conv_relu(tape, p, "head.conv", fused, Conv2dParams::same(3, 1))?;
    let cls_logits = nn::conv(tape, p, "head.cls", hidden, Conv2dParams::default())?;
    let box_deltas = nn::conv(tape, p, "head.box", hidden, Conv2dParams::default())?;
    Ok(ModelOutputs {
        cls_logits,
        box_deltas,
        depth_logits: adf.map(|a| a.logits),
    })
}

/// Parameters plus configuration, for inference outside a training loop.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

pub struct Inference {
    pub cls_logits: Tensor,
    pub box_deltas: Tensor,
    pub depth_logits: Option<Tensor>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = cfg.init_params(seed)?;
        Ok(Model { cfg, params })
    }

    /// Wraps loaded parameters after checking they match the configuration.
    pub fn with_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.init_params(0)?.check_compatible(&params)?;
        Ok(Model { cfg, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn infer(&self, image: &Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let out = model_forward(&mut tape, &p, &self.cfg, x)?;
        Ok(Inference {
            cls_logits: tape.value(out.cls_logits).clone(),
            box_deltas: tape.value(out.box_deltas).clone(),
            depth_logits: out.depth_logits.map(|d| tape.value(d).clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn toy_shapes() {
        let mut cfg = ModelConfig::new(64, 64, 16, 2);
        cfg.dft.width = 32;
        cfg.backbone_channels[3] = 32;
        cfg.adf.channels = 32;
        cfg.dft.ffn_hidden = 64;
        let m = Model::new(cfg, 1).unwrap();
        let img = Rng::seed(0).tensor_uniform(&[3, 64, 64], -1.0, 1.0);
        let out = m.infer(&img).unwrap();
        assert_eq!(out.cls_logits.shape(), &[2, 4, 4]);
        assert_eq!(out.box_deltas.shape(), &[22, 4, 4]);
        assert_eq!(out.depth_logits.unwrap().shape(), &[16, 4, 4]);
    }

    #[test]
    fn baseline_has_no_depth_logits() {
        let mut cfg = ModelConfig::new(32, 32, 8, 1);
        cfg.use_adf = false;
        let m = Model::new(cfg, 1).unwrap();
        assert!(m.params.names().all(|n| !n.starts_with("adf") && !n.starts_with("dft")));
        let out = m.infer(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(out.depth_logits.is_none());
    }

    #[test]
    fn stride_mismatch_is_config_error() {
        let cfg = ModelConfig::new(40, 64, 8, 1);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
