//! Parameterized layers built from the autodiff primitives.
//!
//! Layers are pure descriptions (names and shapes). Their weights live in a
//! [`ParamStore`], and a forward pass binds the store into a [`Graph`] first,
//! so the same layer description serves training, frozen inference and
//! checkpoint validation.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Convolution layers per dense block.
pub const DENSE_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Linear => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard(Padding),
    /// 2x2 kernel, stride 2, cropped to a target size.
    Transposed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Ordered, uniquely named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Replace an existing entry, keeping its position and shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("param_store", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }

    /// Insert every parameter into `graph`, as trainable leaves or as
    /// constants for frozen use.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| {
                let var = if trainable {
                    graph.param(value.clone())
                } else {
                    graph.constant(value.clone())
                };
                (name.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for a bound [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
    pub kind: ConvKind,
    pub bias: bool,
}

impl ConvLayer {
    pub fn new(
        name: impl Into<String>,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
        padding: Padding,
    ) -> Self {
        ConvLayer {
            name: name.into(),
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels,
            out_channels,
            activation,
            kind: ConvKind::Standard(padding),
            bias: true,
        }
    }

    pub fn transposed(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
    ) -> Self {
        ConvLayer {
            name: name.into(),
            kernel_h: 2,
            kernel_w: 2,
            in_channels,
            out_channels,
            activation,
            kind: ConvKind::Transposed,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn kernel_name(&self) -> String {
        format!("{}.kernel", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![
            self.kernel_h,
            self.kernel_w,
            self.in_channels,
            self.out_channels,
        ]
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = vec![ParamSpec {
            name: self.kernel_name(),
            shape: self.kernel_shape(),
        }];
        if self.bias {
            specs.push(ParamSpec {
                name: self.bias_name(),
                shape: vec![self.out_channels],
            });
        }
        specs
    }

    /// Glorot-uniform kernel in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    /// Deterministic in `seed`.
    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<(String, Tensor<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = self.kernel_h * self.kernel_w;
        let fan_in = taps * self.in_channels;
        let fan_out = taps * self.out_channels;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let kernel = Tensor::from_fn(self.kernel_shape(), |_| {
            T::lit(rng.gen_range(-limit..=limit))
        });
        let mut params = vec![(self.kernel_name(), kernel)];
        if self.bias {
            params.push((self.bias_name(), Tensor::zeros(vec![self.out_channels])));
        }
        params
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let shape = g.value(x).shape();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(Error::invalid_shape(
                "conv_layer",
                format!(
                    "{} expects (H, W, {}) input, got {shape:?}",
                    self.name, self.in_channels
                ),
            ));
        }
        Ok(())
    }

    fn bias_var(&self, params: &BoundParams) -> Result<Option<Var>> {
        if self.bias {
            params.get(&self.bias_name()).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &BoundParams, x: Var) -> Result<Var> {
        let ConvKind::Standard(padding) = self.kind else {
            return Err(Error::Invalid(format!(
                "{} is a transposed layer; use forward_to",
                self.name
            )));
        };
        self.check_input(g, x)?;
        let kernel = params.get(&self.kernel_name())?;
        let bias = self.bias_var(params)?;
        let y = g.conv2d(x, kernel, bias, padding)?;
        Ok(self.activation.apply(g, y))
    }

    /// Forward for transposed layers, cropped to `(target_h, target_w)`.
    pub fn forward_to<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        x: Var,
        target_h: usize,
        target_w: usize,
    ) -> Result<Var> {
        if self.kind != ConvKind::Transposed {
            return Err(Error::Invalid(format!(
                "{} is not a transposed layer",
                self.name
            )));
        }
        self.check_input(g, x)?;
        let kernel = params.get(&self.kernel_name())?;
        let bias = self.bias_var(params)?;
        let y = g.conv2d_transpose(x, kernel, bias, target_h, target_w)?;
        Ok(self.activation.apply(g, y))
    }
}

/// Four 3x3 relu convolutions; layer `i` sees the block input concatenated
/// with every earlier layer output, and the block emits the concatenation
/// of the four layer outputs (`4 * growth` channels).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseBlock {
    pub name: String,
    pub in_channels: usize,
    pub growth: usize,
    pub layers: Vec<ConvLayer>,
}

impl DenseBlock {
    pub fn new(name: impl Into<String>, in_channels: usize, growth: usize, bias: bool) -> Self {
        let name = name.into();
        let layers = (0..DENSE_LAYERS)
            .map(|i| {
                let layer = ConvLayer::new(
                    format!("{name}.conv{}", i + 1),
                    3,
                    in_channels + i * growth,
                    growth,
                    Activation::Relu,
                    Padding::Same,
                );
                if bias {
                    layer
                } else {
                    layer.without_bias()
                }
            })
            .collect();
        DenseBlock {
            name,
            in_channels,
            growth,
            layers,
        }
    }

    pub fn out_channels(&self) -> usize {
        DENSE_LAYERS * self.growth
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers
            .iter()
            .flat_map(ConvLayer::param_specs)
            .collect()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &BoundParams, x: Var) -> Result<Var> {
        let channels = g.value(x).shape().get(2).copied();
        if channels != Some(self.in_channels) {
            return Err(Error::invalid_shape(
                "dense_block",
                format!(
                    "{} expects {} input channels, got shape {:?}",
                    self.name,
                    self.in_channels,
                    g.value(x).shape()
                ),
            ));
        }
        let mut features = vec![x];
        let mut outputs = Vec::with_capacity(DENSE_LAYERS);
        for layer in &self.layers {
            let input = if features.len() == 1 {
                x
            } else {
                g.concat(&features, 2)?
            };
            let out = layer.forward(g, params, input)?;
            features.push(out);
            outputs.push(out);
        }
        g.concat(&outputs, 2)
    }
}

/// Stride-2 upsampling to the skip tensor's size, channel concatenation with
/// the skip, then a 3x3 relu fusion convolution to the stage width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeconvBlock {
    pub name: String,
    pub up: ConvLayer,
    pub fuse: ConvLayer,
}

impl DeconvBlock {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        skip_channels: usize,
        width: usize,
    ) -> Self {
        let name = name.into();
        DeconvBlock {
            up: ConvLayer::transposed(format!("{name}.up"), in_channels, width, Activation::Relu),
            fuse: ConvLayer::new(
                format!("{name}.fuse"),
                3,
                width + skip_channels,
                width,
                Activation::Relu,
                Padding::Same,
            ),
            name,
        }
    }

    pub fn skip_channels(&self) -> usize {
        self.fuse.in_channels - self.up.out_channels
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.out_channels
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.up.param_specs();
        specs.extend(self.fuse.param_specs());
        specs
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        x: Var,
        skip: Var,
    ) -> Result<Var> {
        let skip_shape = g.value(skip).shape().to_vec();
        let (h, w) = (g.value(x).shape()[0], g.value(x).shape()[1]);
        if skip_shape.len() != 3 || skip_shape[2] != self.skip_channels() {
            return Err(Error::invalid_shape(
                "deconv_block",
                format!(
                    "{} expects a skip with {} channels, got {skip_shape:?}",
                    self.name,
                    self.skip_channels()
                ),
            ));
        }
        let (th, tw) = (skip_shape[0], skip_shape[1]);
        let reachable = |src: usize, dst: usize| dst == 2 * src || dst + 1 == 2 * src;
        if !reachable(h, th) || !reachable(w, tw) {
            return Err(Error::invalid_shape(
                "deconv_block",
                format!(
                    "{}: skip spatial dims ({th}, {tw}) do not match an upsampling of ({h}, {w})",
                    self.name
                ),
            ));
        }
        let up = self.up.forward_to(g, params, x, th, tw)?;
        let merged = g.concat(&[up, skip], 2)?;
        self.fuse.forward(g, params, merged)
    }
}

/// Build a store for the given layer specs with every tensor zeroed.
pub fn zero_params<T: Real>(specs: &[ParamSpec]) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for spec in specs {
        store.insert(spec.name.clone(), Tensor::zeros(spec.shape.clone()))?;
    }
    Ok(store)
}
