//! The dense-block UNet, its base-model variants and the stacked ensemble.

mod checkpoint;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, BoundParams, ConvLayer, DeconvBlock, DenseBlock, ParamSpec, ParamStore,
    DENSE_LAYERS,
};
use crate::tensor::{Real, Tensor};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Channels of the encoded input: 12 frames x (volume, speed, 4 direction one-hots).
pub const INPUT_CHANNELS: usize = 72;
/// Channels of a frame prediction: 3 frames x (volume, speed, direction).
pub const OUTPUT_CHANNELS: usize = 9;
/// One have-data logit per predicted frame.
pub const MASK_CHANNELS: usize = 3;
/// Concatenated base outputs: 9 + 9 + 9 + 3.
pub const ENSEMBLE_INPUT_CHANNELS: usize = 3 * OUTPUT_CHANNELS + MASK_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain MSE on a single city.
    Base1,
    /// MSE masked to have-data pixels.
    Base2,
    /// Masked MSE over windows from every city.
    Base3,
    /// Per-pixel have-data classifier (sigmoid cross-entropy).
    Base4,
    Ensemble,
}

impl Variant {
    pub const BASES: [Variant; 4] = [
        Variant::Base1,
        Variant::Base2,
        Variant::Base3,
        Variant::Base4,
    ];

    pub fn input_channels(self) -> usize {
        match self {
            Variant::Ensemble => ENSEMBLE_INPUT_CHANNELS,
            _ => INPUT_CHANNELS,
        }
    }

    pub fn output_channels(self) -> usize {
        match self {
            Variant::Base4 => MASK_CHANNELS,
            _ => OUTPUT_CHANNELS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base1 => "base1",
            Variant::Base2 => "base2",
            Variant::Base3 => "base3",
            Variant::Base4 => "base4",
            Variant::Ensemble => "ensemble",
        }
    }

    /// Whether the model emits frame predictions (as opposed to mask logits).
    pub fn predicts_frames(self) -> bool {
        self != Variant::Base4
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base1" => Ok(Variant::Base1),
            "base2" => Ok(Variant::Base2),
            "base3" => Ok(Variant::Base3),
            "base4" => Ok(Variant::Base4),
            "ensemble" => Ok(Variant::Ensemble),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Architecture of one UNet.
///
/// `depth` counts the pooling steps; the encoder has `depth + 1` dense
/// blocks and the decoder `depth` deconvolution blocks. `stage_widths[i]` is
/// the output width of dense block `i + 1`, so its growth rate is a quarter
/// of that.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub stage_widths: Vec<usize>,
    pub decoder_width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub variant: Variant,
    #[serde(default = "default_true")]
    pub dense_bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 495,
            width: 436,
            depth: 7,
            stage_widths: ModelConfig::default_stage_widths(7),
            decoder_width: 128,
            in_channels: INPUT_CHANNELS,
            out_channels: OUTPUT_CHANNELS,
            variant: Variant::Base1,
            dense_bias: true,
        }
    }
}

impl ModelConfig {
    /// Full-size encoder widths for `depth` pools: 64, 96, then 128.
    pub fn default_stage_widths(depth: usize) -> Vec<usize> {
        (0..=depth)
            .map(|i| [64, 96].get(i).copied().unwrap_or(128))
            .collect()
    }

    /// Small architecture for desk-scale runs: `depth` pools with widths
    /// growing from 8 in steps of 8.
    pub fn desk(height: usize, width: usize, depth: usize) -> Self {
        let stage_widths: Vec<usize> = (0..=depth).map(|i| 8 * (i + 1)).collect();
        ModelConfig {
            height,
            width,
            depth,
            decoder_width: *stage_widths.last().expect("at least one stage"),
            stage_widths,
            ..ModelConfig::default()
        }
    }

    /// Same architecture with the channel counts of `variant`.
    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelConfig {
            variant,
            in_channels: variant.input_channels(),
            out_channels: variant.output_channels(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 {
            return fail(format!(
                "input dims must be positive, got {}x{}",
                self.height, self.width
            ));
        }
        if self.stage_widths.len() != self.depth + 1 {
            return fail(format!(
                "depth {} needs {} stage widths, got {}",
                self.depth,
                self.depth + 1,
                self.stage_widths.len()
            ));
        }
        if let Some(w) = self
            .stage_widths
            .iter()
            .find(|&&w| w == 0 || w % DENSE_LAYERS != 0)
        {
            return fail(format!(
                "stage width {w} must be a positive multiple of {DENSE_LAYERS}"
            ));
        }
        if self.decoder_width == 0 {
            return fail("decoder width must be positive".into());
        }
        if self.in_channels != self.variant.input_channels() {
            return fail(format!(
                "{} takes {} input channels, config says {}",
                self.variant,
                self.variant.input_channels(),
                self.in_channels
            ));
        }
        if self.out_channels != self.variant.output_channels() {
            return fail(format!(
                "{} emits {} channels, config says {}",
                self.variant,
                self.variant.output_channels(),
                self.out_channels
            ));
        }
        Ok(())
    }

    /// Spatial dims of each encoder level, from the input down to the bottleneck.
    pub fn level_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.height, self.width)];
        for _ in 0..self.depth {
            let (h, w) = *dims.last().expect("nonempty");
            dims.push((kernels::ceil_half(h), kernels::ceil_half(w)));
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeRow {
    pub stage: String,
    pub shape: [usize; 3],
}

/// Output shape of every block, encoder first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeTrace {
    pub rows: Vec<ShapeRow>,
}

impl ShapeTrace {
    pub fn last(&self) -> &ShapeRow {
        self.rows.last().expect("trace has at least the head row")
    }
}

impl fmt::Display for ShapeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pad = self.rows.iter().map(|r| r.stage.len()).max().unwrap_or(0);
        for row in &self.rows {
            let [h, w, c] = row.shape;
            writeln!(f, "{:<pad$}  ({h}, {w}, {c})", row.stage)?;
        }
        Ok(())
    }
}

/// Pure shape inference; allocates no parameters.
pub fn shape_trace(config: &ModelConfig) -> Result<ShapeTrace> {
    config.validate()?;
    let dims = config.level_dims();
    let mut rows = Vec::new();
    let mut push = |stage: String, (h, w): (usize, usize), c: usize| {
        rows.push(ShapeRow {
            stage,
            shape: [h, w, c],
        })
    };
    for (i, &width) in config.stage_widths.iter().enumerate() {
        push(format!("DenseBlock-{}", i + 1), dims[i], width);
        if i < config.depth {
            push("AveragePooling".into(), dims[i + 1], width);
        }
    }
    push(
        "Convolution Layer".into(),
        dims[config.depth],
        config.decoder_width,
    );
    for k in 1..=config.depth {
        push(
            format!("DeconvolutionBlock-{k}"),
            dims[config.depth - k],
            config.decoder_width,
        );
    }
    push("Convolution Layer".into(), dims[0], config.out_channels);
    Ok(ShapeTrace { rows })
}

/// Layer layout of a UNet for a given config.
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: ModelConfig,
    pub dense: Vec<DenseBlock>,
    pub bottleneck: ConvLayer,
    pub decoders: Vec<DeconvBlock>,
    pub head: ConvLayer,
}

impl UNet {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let widths = &config.stage_widths;
        let dense = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let cin = if i == 0 {
                    config.in_channels
                } else {
                    widths[i - 1]
                };
                DenseBlock::new(
                    format!("dense{}", i + 1),
                    cin,
                    w / DENSE_LAYERS,
                    config.dense_bias,
                )
            })
            .collect();
        let bottleneck = ConvLayer::new(
            "bottleneck",
            3,
            widths[config.depth],
            config.decoder_width,
            Activation::Relu,
            Padding::Same,
        );
        let decoders = (1..=config.depth)
            .map(|k| {
                DeconvBlock::new(
                    format!("deconv{k}"),
                    config.decoder_width,
                    widths[config.depth - k],
                    config.decoder_width,
                )
            })
            .collect();
        let head = ConvLayer::new(
            "head",
            1,
            config.decoder_width,
            config.out_channels,
            Activation::Linear,
            Padding::Same,
        );
        Ok(UNet {
            config: config.clone(),
            dense,
            bottleneck,
            decoders,
            head,
        })
    }

    fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.dense
            .iter()
            .flat_map(|b| b.layers.iter())
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoders.iter().flat_map(|d| [&d.up, &d.fuse]))
            .chain(std::iter::once(&self.head))
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.conv_layers()
            .flat_map(ConvLayer::param_specs)
            .collect()
    }

    /// Seeded Glorot initialization; each layer draws its own sub-seed
    /// from a master generator in layer order.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for layer in self.conv_layers() {
            for (name, value) in layer.init_params(master.gen()) {
                store
                    .insert(name, value)
                    .expect("layer names are unique by construction");
            }
        }
        store
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &BoundParams, x: Var) -> Result<Var> {
        let c = &self.config;
        let expected = [c.height, c.width, c.in_channels];
        if g.value(x).shape() != expected {
            return Err(Error::shape("model_forward", g.value(x).shape(), &expected));
        }
        let mut skips = Vec::with_capacity(c.depth);
        let mut h = x;
        for (i, block) in self.dense.iter().enumerate() {
            h = block.forward(g, params, h)?;
            if i < c.depth {
                skips.push(h);
                h = g.avg_pool2d_ceil(h)?;
            }
        }
        h = self.bottleneck.forward(g, params, h)?;
        for block in &self.decoders {
            let skip = skips.pop().expect("one skip per decoder");
            h = block.forward(g, params, h, skip)?;
        }
        self.head.forward(g, params, h)
    }
}

/// A named parameter set together with the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<TrainedModel> {
    let unet = UNet::new(config)?;
    Ok(TrainedModel {
        config: config.clone(),
        params: unet.init_params(seed),
    })
}

impl TrainedModel {
    pub fn new(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let model = TrainedModel { config, params };
        model.check_params()?;
        Ok(model)
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn unet(&self) -> Result<UNet> {
        UNet::new(&self.config)
    }

    /// Parameter names and shapes must match the config-derived architecture
    /// exactly, in order.
    pub fn check_params(&self) -> Result<()> {
        let specs = self.unet()?.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::Config(format!(
                "architecture has {} parameters, store has {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (spec, (name, value)) in specs.iter().zip(self.params.iter()) {
            if spec.name != name || spec.shape != value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Inference with frozen parameters.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let unet = self.unet()?;
        let mut g = Graph::new();
        let params = self.params.bind(&mut g, false);
        let input = g.constant(x.clone());
        let y = unet.forward(&mut g, &params, input)?;
        Ok(g.value(y).clone())
    }
}

/// Channel-concatenate base outputs into the ensemble input. The fourth
/// output holds have-data logits and goes through a sigmoid first.
pub fn ensemble_input<T: Real>(base_outputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let expected = [
        OUTPUT_CHANNELS,
        OUTPUT_CHANNELS,
        OUTPUT_CHANNELS,
        MASK_CHANNELS,
    ];
    if base_outputs.len() != expected.len() {
        return Err(Error::Invalid(format!(
            "ensemble needs {} base outputs, got {}",
            expected.len(),
            base_outputs.len()
        )));
    }
    let (h, w) = match base_outputs[0].shape() {
        [h, w, _] => (*h, *w),
        other => return Err(Error::invalid_shape("ensemble_input", format!("{other:?}"))),
    };
    for (out, &c) in base_outputs.iter().zip(&expected) {
        if out.shape() != [h, w, c] {
            return Err(Error::shape("ensemble_input", out.shape(), &[h, w, c]));
        }
    }
    let probs = base_outputs[3].map(kernels::sigmoid);
    let parts: Vec<&Tensor<T>> = base_outputs[..3].iter().chain([&probs]).collect();
    kernels::concat(&parts, 2)
}

pub fn ensemble_forward(
    ensemble: &TrainedModel,
    base_outputs: &[Tensor<f32>],
) -> Result<Tensor<f32>> {
    if ensemble.variant() != Variant::Ensemble {
        return Err(Error::Config(format!(
            "expected an ensemble model, got {}",
            ensemble.variant()
        )));
    }
    ensemble.forward(&ensemble_input(base_outputs)?)
}
