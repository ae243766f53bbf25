//! Minimal sequential CNN: conv / relu / maxpool / gap / dense layers with
//! named outputs and optional channel gates after any layer.
//!
//! Gates act on a layer's declared output. When a conv layer is followed by
//! a separate relu layer, gating the relu layer therefore gates the
//! post-nonlinearity response; gating the conv layer gates the
//! pre-activation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{ChainError, Result};
use crate::scalar::Scalar;

/// Semantic concept level, ordered from shallow (`Color`) to deep (`Scene`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Color,
    Material,
    Part,
    Object,
    Scene,
}

impl Level {
    /// All levels, deepest first.
    pub const TOP_DOWN: [Level; 5] = [
        Level::Scene,
        Level::Object,
        Level::Part,
        Level::Material,
        Level::Color,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Color => "color",
            Level::Material => "material",
            Level::Part => "part",
            Level::Object => "object",
            Level::Scene => "scene",
        }
    }

    /// The next level towards the input, if any.
    pub fn shallower(self) -> Option<Level> {
        match self {
            Level::Scene => Some(Level::Object),
            Level::Object => Some(Level::Part),
            Level::Part => Some(Level::Material),
            Level::Material => Some(Level::Color),
            Level::Color => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = ChainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "color" => Ok(Level::Color),
            "material" => Ok(Level::Material),
            "part" => Ok(Level::Part),
            "object" => Ok(Level::Object),
            "scene" => Ok(Level::Scene),
            other => Err(ChainError::InvalidArgument(format!(
                "unknown semantic level `{other}`"
            ))),
        }
    }
}

/// Dense `(channels, height, width)` tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Tensor<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 3], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(ChainError::ShapeMismatch(format!(
                "{} values for tensor of shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// A `(len, 1, 1)` tensor.
    pub fn from_vector(data: Vec<T>) -> Self {
        Tensor {
            shape: [data.len(), 1, 1],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let len = self.spatial_len();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let len = self.spatial_len();
        &mut self.data[c * len..(c + 1) * len]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn scale(&self, s: T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named layer's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ActivationMap<T> {
    pub layer_name: String,
    pub data: Tensor<T>,
}

impl<T: Scalar> ActivationMap<T> {
    pub fn units(&self) -> usize {
        self.data.channels()
    }
}

/// Per-layer activations from one forward pass, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations<T> {
    maps: Vec<ActivationMap<T>>,
}

impl<T: Scalar> Activations<T> {
    pub fn get(&self, layer: &str) -> Option<&ActivationMap<T>> {
        self.maps.iter().find(|m| m.layer_name == layer)
    }

    pub fn require(&self, layer: &str) -> Result<&ActivationMap<T>> {
        self.get(layer)
            .ok_or_else(|| ChainError::UnknownLayer(layer.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ActivationMap<T>> {
        self.maps.iter()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Output of the final layer.
    pub fn output(&self) -> Option<&ActivationMap<T>> {
        self.maps.last()
    }
}

/// Binary channel gate vector; `false` blocks a channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GateVector(pub Vec<bool>);

impl GateVector {
    pub fn all_open(len: usize) -> Self {
        GateVector(vec![true; len])
    }

    pub fn all_closed(len: usize) -> Self {
        GateVector(vec![false; len])
    }

    /// Opens every unit except the listed ones.
    pub fn closing(len: usize, closed: &[usize]) -> Self {
        let mut g = vec![true; len];
        for &i in closed {
            g[i] = false;
        }
        GateVector(g)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn closed_count(&self) -> usize {
        self.0.iter().filter(|&&g| !g).count()
    }

    pub fn is_all_open(&self) -> bool {
        self.0.iter().all(|&g| g)
    }

    pub fn value<T: Scalar>(&self, i: usize) -> T {
        if self.0[i] {
            T::one()
        } else {
            T::zero()
        }
    }
}

impl Serialize for GateVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|&g| u8::from(g)))
    }
}

impl<'de> Deserialize<'de> for GateVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!(
                    "gate entries must be 0 or 1, got {other}"
                ))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(GateVector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Relu,
    Maxpool,
    Gap,
    Dense,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Gap => "gap",
            LayerKind::Dense => "dense",
        }
    }
}

impl FromStr for LayerKind {
    type Err = ChainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(LayerKind::Conv),
            "relu" => Ok(LayerKind::Relu),
            "maxpool" => Ok(LayerKind::Maxpool),
            "gap" => Ok(LayerKind::Gap),
            "dense" => Ok(LayerKind::Dense),
            other => Err(ChainError::UnknownLayerKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(out, in, ky, kx)` row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weights[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    fn out_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if input[0] != self.in_channels {
            return Err(ChainError::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input[0]
            )));
        }
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(ChainError::ShapeMismatch(format!(
                    "kernel {} larger than padded extent {padded}",
                    self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok([self.out_channels, span(input[1])?, span(input[2])?])
    }

    fn apply(&self, input: &Tensor<T>, out_shape: [usize; 3]) -> Tensor<T> {
        let [_, h, w] = input.shape();
        let [oc, oh, ow] = out_shape;
        let mut out = Tensor::zeros(out_shape);
        let pad = self.padding as isize;
        // Channel pairs whose kernel is entirely zero contribute nothing.
        let kk = self.kernel * self.kernel;
        let live: Vec<bool> = self
            .weights
            .chunks(kk)
            .map(|k| k.iter().any(|&v| v != T::zero()))
            .collect();
        for o in 0..oc {
            let b = self.bias.get(o).copied().unwrap_or_else(T::zero);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for i in 0..self.in_channels {
                        if !live[o * self.in_channels + i] {
                            continue;
                        }
                        for ky in 0..self.kernel {
                            let y = (oy * self.stride + ky) as isize - pad;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let x = (ox * self.stride + kx) as isize - pad;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                acc += self.weight(o, i, ky, kx)
                                    * input.at(i, y as usize, x as usize);
                            }
                        }
                    }
                    out.data[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in)` row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp<T> {
    Conv(Conv2d<T>),
    Relu,
    Maxpool { kernel: usize, stride: usize },
    Gap,
    Dense(Dense<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec<T> {
    pub name: String,
    pub op: LayerOp<T>,
}

impl<T: Scalar> LayerSpec<T> {
    pub fn kind(&self) -> LayerKind {
        match self.op {
            LayerOp::Conv(_) => LayerKind::Conv,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::Maxpool { .. } => LayerKind::Maxpool,
            LayerOp::Gap => LayerKind::Gap,
            LayerOp::Dense(_) => LayerKind::Dense,
        }
    }

    fn out_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let ctx = |e: ChainError| match e {
            ChainError::ShapeMismatch(m) => {
                ChainError::ShapeMismatch(format!("layer `{}`: {m}", self.name))
            }
            other => other,
        };
        match &self.op {
            LayerOp::Conv(c) => c.out_shape(input).map_err(ctx),
            LayerOp::Relu => Ok(input),
            LayerOp::Maxpool { kernel, stride } => {
                if input[1] < *kernel || input[2] < *kernel {
                    return Err(ctx(ChainError::ShapeMismatch(format!(
                        "maxpool kernel {kernel} exceeds input {input:?}"
                    ))));
                }
                Ok([
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            LayerOp::Gap => Ok([input[0], 1, 1]),
            LayerOp::Dense(d) => {
                let flat = input.iter().product::<usize>();
                if flat != d.in_features {
                    return Err(ctx(ChainError::ShapeMismatch(format!(
                        "dense expects {} inputs, got {flat}",
                        d.in_features
                    ))));
                }
                Ok([d.out_features, 1, 1])
            }
        }
    }

    fn apply(&self, input: &Tensor<T>, out_shape: [usize; 3]) -> Tensor<T> {
        match &self.op {
            LayerOp::Conv(c) => c.apply(input, out_shape),
            LayerOp::Relu => Tensor {
                shape: input.shape,
                data: input.data.iter().map(|&v| v.max(T::zero())).collect(),
            },
            LayerOp::Maxpool { kernel, stride } => {
                let [c, oh, ow] = out_shape;
                let mut out = Tensor::zeros(out_shape);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = T::neg_infinity();
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    m = m.max(input.at(ch, oy * stride + ky, ox * stride + kx));
                                }
                            }
                            out.data[(ch * oh + oy) * ow + ox] = m;
                        }
                    }
                }
                out
            }
            LayerOp::Gap => Tensor::from_vector(gap_tensor(input)),
            LayerOp::Dense(d) => {
                let x = input.as_slice();
                let data = (0..d.out_features)
                    .map(|o| {
                        let row = &d.weights[o * d.in_features..(o + 1) * d.in_features];
                        let b = d.bias.get(o).copied().unwrap_or_else(T::zero);
                        b + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>()
                    })
                    .collect();
                Tensor::from_vector(data)
            }
        }
    }
}

/// A validated sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec<T> {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec<T>>,
    level_map: BTreeMap<Level, String>,
    class_names: Vec<String>,
    shapes: Vec<[usize; 3]>,
}

impl<T: Scalar> NetworkSpec<T> {
    /// Validates layer compatibility, name uniqueness and the level map.
    pub fn new(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec<T>>,
        level_map: BTreeMap<Level, String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if input_shape.iter().any(|&d| d == 0) {
            return Err(ChainError::InvalidNetwork(format!(
                "input shape {input_shape:?} has a zero dimension"
            )));
        }
        if layers.is_empty() {
            return Err(ChainError::InvalidNetwork("network has no layers".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &layers {
            if l.name.is_empty() {
                return Err(ChainError::InvalidNetwork("empty layer name".into()));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(ChainError::InvalidNetwork(format!(
                    "duplicate layer name `{}`",
                    l.name
                )));
            }
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape;
        for l in &layers {
            validate_params(l)?;
            shape = l.out_shape(shape)?;
            shapes.push(shape);
        }
        let mut previous: Option<(Level, usize)> = None;
        // Walk from shallow to deep; layer indices must strictly increase.
        for (&level, layer) in &level_map {
            let idx = layers
                .iter()
                .position(|l| &l.name == layer)
                .ok_or_else(|| {
                    ChainError::InvalidNetwork(format!(
                        "level `{level}` maps to unknown layer `{layer}`"
                    ))
                })?;
            if let Some((prev_level, prev_idx)) = previous {
                if idx <= prev_idx {
                    return Err(ChainError::InvalidNetwork(format!(
                        "level `{level}` (layer `{layer}`) must be deeper than level `{prev_level}`"
                    )));
                }
            }
            previous = Some((level, idx));
        }
        if !class_names.is_empty() {
            let out = shapes.last().copied().unwrap_or(input_shape);
            if class_names.len() != out[0] {
                return Err(ChainError::InvalidNetwork(format!(
                    "{} class names for {} output units",
                    class_names.len(),
                    out[0]
                )));
            }
        }
        Ok(NetworkSpec {
            input_shape,
            layers,
            level_map,
            class_names,
            shapes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec<T>] {
        &self.layers
    }

    pub fn level_map(&self) -> &BTreeMap<Level, String> {
        &self.level_map
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn layer_for_level(&self, level: Level) -> Result<&str> {
        self.level_map
            .get(&level)
            .map(String::as_str)
            .ok_or_else(|| {
                ChainError::InvalidNetwork(format!("no layer mapped to level `{level}`"))
            })
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| ChainError::UnknownLayer(name.to_string()))
    }

    /// Output shape of the named layer.
    pub fn layer_shape(&self, name: &str) -> Result<[usize; 3]> {
        Ok(self.shapes[self.layer_index(name)?])
    }

    /// Number of units (channels) produced by the named layer.
    pub fn units(&self, name: &str) -> Result<usize> {
        Ok(self.layer_shape(name)?[0])
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(ChainError::ShapeMismatch(format!(
                "input shape {:?} does not match network input {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn run_range(
        &self,
        range: std::ops::Range<usize>,
        mut current: Tensor<T>,
        maps: &mut Vec<ActivationMap<T>>,
    ) {
        let layers = &self.layers[range.clone()];
        for (layer, &shape) in layers.iter().zip(&self.shapes[range]) {
            current = layer.apply(&current, shape);
            maps.push(ActivationMap {
                layer_name: layer.name.clone(),
                data: current.clone(),
            });
        }
    }

    /// Activations of every layer for one input.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Activations<T>> {
        self.check_input(input)?;
        let mut maps = Vec::with_capacity(self.layers.len());
        self.run_range(0..self.layers.len(), input.clone(), &mut maps);
        Ok(Activations { maps })
    }

    /// Forward pass with the named layer's output channels multiplied by
    /// `gates`; layers after it see the gated tensor.
    pub fn forward_with_gates(
        &self,
        input: &Tensor<T>,
        gate_layer: &str,
        gates: &GateVector,
    ) -> Result<Activations<T>> {
        let runner = GatedRunner::new(self, input, gate_layer)?;
        let mut maps: Vec<ActivationMap<T>> = Vec::with_capacity(self.layers.len());
        self.run_range(0..runner.gate_index, input.clone(), &mut maps);
        let suffix = runner.run(gates)?;
        maps.extend(suffix.maps);
        Ok(Activations { maps })
    }

    /// Predicted class index: argmax of the final layer (lowest index on ties).
    pub fn predict(&self, acts: &Activations<T>) -> usize {
        let out = acts.output().expect("network has layers");
        argmax(out.data.as_slice())
    }

    pub fn class_name(&self, index: usize) -> String {
        self.class_names
            .get(index)
            .cloned()
            .unwrap_or_else(|| format!("class_{index}"))
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Caches the ungated prefix of a forward pass so repeated gated passes
/// only recompute the layers after the gate.
#[derive(Debug, Clone)]
pub struct GatedRunner<'a, T> {
    net: &'a NetworkSpec<T>,
    gate_index: usize,
    gate_output: Tensor<T>,
}

impl<'a, T: Scalar> GatedRunner<'a, T> {
    pub fn new(net: &'a NetworkSpec<T>, input: &Tensor<T>, gate_layer: &str) -> Result<Self> {
        net.check_input(input)?;
        let gate_index = net.layer_index(gate_layer)?;
        let mut current = input.clone();
        for (layer, &shape) in net.layers[..=gate_index].iter().zip(&net.shapes) {
            current = layer.apply(&current, shape);
        }
        Ok(GatedRunner {
            net,
            gate_index,
            gate_output: current,
        })
    }

    pub fn gate_units(&self) -> usize {
        self.gate_output.channels()
    }

    /// Ungated output of the gate layer.
    pub fn gate_output(&self) -> &Tensor<T> {
        &self.gate_output
    }

    /// Activations of the gated layer and every deeper layer.
    pub fn run(&self, gates: &GateVector) -> Result<Activations<T>> {
        if gates.len() != self.gate_units() {
            return Err(ChainError::ShapeMismatch(format!(
                "gate vector has {} entries, layer `{}` has {} units",
                gates.len(),
                self.net.layers[self.gate_index].name,
                self.gate_units()
            )));
        }
        let mut gated = self.gate_output.clone();
        for (c, &open) in gates.0.iter().enumerate() {
            if !open {
                gated.channel_mut(c).iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let mut maps = Vec::with_capacity(self.net.layers.len() - self.gate_index);
        maps.push(ActivationMap {
            layer_name: self.net.layers[self.gate_index].name.clone(),
            data: gated.clone(),
        });
        self.net
            .run_range(self.gate_index + 1..self.net.layers.len(), gated, &mut maps);
        Ok(Activations { maps })
    }
}

fn gap_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let len = T::from_count(t.spatial_len());
    (0..t.channels())
        .map(|c| t.channel(c).iter().copied().sum::<T>() / len)
        .collect()
}

/// Global average pooling: per-channel mean over all spatial positions.
pub fn gap<T: Scalar>(act: &ActivationMap<T>) -> Vec<T> {
    gap_tensor(&act.data)
}

fn validate_params<T: Scalar>(l: &LayerSpec<T>) -> Result<()> {
    let bad = |m: String| ChainError::ShapeMismatch(format!("layer `{}`: {m}", l.name));
    match &l.op {
        LayerOp::Conv(c) => {
            if c.kernel == 0 || c.stride == 0 {
                return Err(bad("kernel and stride must be positive".into()));
            }
            let expected = c.out_channels * c.in_channels * c.kernel * c.kernel;
            if c.weights.len() != expected {
                return Err(bad(format!(
                    "conv weights have {} values, expected {expected}",
                    c.weights.len()
                )));
            }
            if !c.bias.is_empty() && c.bias.len() != c.out_channels {
                return Err(bad(format!(
                    "conv bias has {} values, expected {}",
                    c.bias.len(),
                    c.out_channels
                )));
            }
        }
        LayerOp::Dense(d) => {
            if d.weights.len() != d.in_features * d.out_features {
                return Err(bad(format!(
                    "dense weights have {} values, expected {}",
                    d.weights.len(),
                    d.in_features * d.out_features
                )));
            }
            if !d.bias.is_empty() && d.bias.len() != d.out_features {
                return Err(bad(format!(
                    "dense bias has {} values, expected {}",
                    d.bias.len(),
                    d.out_features
                )));
            }
        }
        LayerOp::Maxpool { kernel, stride } => {
            if *kernel == 0 || *stride == 0 {
                return Err(bad("maxpool kernel and stride must be positive".into()));
            }
        }
        LayerOp::Relu | LayerOp::Gap => {}
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Serialize, Deserialize)]
struct RawNetwork {
    input_shape: [usize; 3],
    #[serde(default)]
    level_map: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    class_names: Vec<String>,
    layers: Vec<RawLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawLayer {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "RawParams::is_empty")]
    params: RawParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Value>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

impl RawParams {
    fn is_empty(&self) -> bool {
        self.in_channels.is_none()
            && self.out_channels.is_none()
            && self.kernel.is_none()
            && self.stride.is_none()
            && self.padding.is_none()
            && self.in_features.is_none()
            && self.out_features.is_none()
            && self.bias.is_none()
    }
}

/// Flattens a nested numeric array, checking it has exactly `dims` shape.
fn flatten_nested<T: Scalar>(value: &Value, dims: &[usize], layer: &str) -> Result<Vec<T>> {
    fn walk<T: Scalar>(v: &Value, dims: &[usize], out: &mut Vec<T>, layer: &str) -> Result<()> {
        match dims.split_first() {
            None => {
                let x = v.as_f64().ok_or_else(|| {
                    ChainError::ShapeMismatch(format!(
                        "layer `{layer}`: weight tensor has wrong rank (expected a number, found {v})"
                    ))
                })?;
                out.push(T::lit(x));
                Ok(())
            }
            Some((&n, rest)) => {
                let arr = v.as_array().ok_or_else(|| {
                    ChainError::ShapeMismatch(format!(
                        "layer `{layer}`: weight tensor has wrong rank (expected an array of {n})"
                    ))
                })?;
                if arr.len() != n {
                    return Err(ChainError::ShapeMismatch(format!(
                        "layer `{layer}`: weight dimension has {} entries, expected {n}",
                        arr.len()
                    )));
                }
                for item in arr {
                    walk(item, rest, out, layer)?;
                }
                Ok(())
            }
        }
    }
    let mut out = Vec::with_capacity(dims.iter().product());
    walk(value, dims, &mut out, layer)?;
    Ok(out)
}

fn nest<T: Scalar>(flat: &[T], dims: &[usize]) -> Value {
    match dims.split_first() {
        None => Value::from(flat[0].to_f64_lossy()),
        Some((&n, rest)) => {
            let stride: usize = rest.iter().product();
            Value::Array(
                (0..n)
                    .map(|i| nest(&flat[i * stride..(i + 1) * stride], rest))
                    .collect(),
            )
        }
    }
}

fn raw_to_layer<T: Scalar>(raw: RawLayer) -> Result<LayerSpec<T>> {
    let kind: LayerKind = raw.kind.parse()?;
    let p = &raw.params;
    let missing = |field: &str| {
        ChainError::InvalidNetwork(format!("layer `{}`: missing param `{field}`", raw.name))
    };
    let bias = |n: usize| -> Result<Vec<T>> {
        match &p.bias {
            None => Ok(Vec::new()),
            Some(b) if b.len() == n => Ok(b.iter().map(|&v| T::lit(v)).collect()),
            Some(b) => Err(ChainError::ShapeMismatch(format!(
                "layer `{}`: bias has {} values, expected {n}",
                raw.name,
                b.len()
            ))),
        }
    };
    let op = match kind {
        LayerKind::Conv => {
            let in_channels = p.in_channels.ok_or_else(|| missing("in_channels"))?;
            let out_channels = p.out_channels.ok_or_else(|| missing("out_channels"))?;
            let kernel = p.kernel.ok_or_else(|| missing("kernel"))?;
            let w = raw.weights.as_ref().ok_or_else(|| missing("weights"))?;
            let weights =
                flatten_nested(w, &[out_channels, in_channels, kernel, kernel], &raw.name)?;
            LayerOp::Conv(Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride: p.stride.unwrap_or(1),
                padding: p.padding.unwrap_or(0),
                weights,
                bias: bias(out_channels)?,
            })
        }
        LayerKind::Dense => {
            let in_features = p.in_features.ok_or_else(|| missing("in_features"))?;
            let out_features = p.out_features.ok_or_else(|| missing("out_features"))?;
            let w = raw.weights.as_ref().ok_or_else(|| missing("weights"))?;
            let weights = flatten_nested(w, &[out_features, in_features], &raw.name)?;
            LayerOp::Dense(Dense {
                in_features,
                out_features,
                weights,
                bias: bias(out_features)?,
            })
        }
        LayerKind::Maxpool => {
            let kernel = p.kernel.ok_or_else(|| missing("kernel"))?;
            LayerOp::Maxpool {
                kernel,
                stride: p.stride.unwrap_or(kernel),
            }
        }
        LayerKind::Relu => LayerOp::Relu,
        LayerKind::Gap => LayerOp::Gap,
    };
    Ok(LayerSpec { name: raw.name, op })
}

fn layer_to_raw<T: Scalar>(l: &LayerSpec<T>) -> RawLayer {
    let bias_vec = |b: &[T]| {
        if b.is_empty() {
            None
        } else {
            Some(b.iter().map(|v| v.to_f64_lossy()).collect())
        }
    };
    let (params, weights) = match &l.op {
        LayerOp::Conv(c) => (
            RawParams {
                in_channels: Some(c.in_channels),
                out_channels: Some(c.out_channels),
                kernel: Some(c.kernel),
                stride: Some(c.stride),
                padding: Some(c.padding),
                bias: bias_vec(&c.bias),
                ..RawParams::default()
            },
            Some(nest(
                &c.weights,
                &[c.out_channels, c.in_channels, c.kernel, c.kernel],
            )),
        ),
        LayerOp::Dense(d) => (
            RawParams {
                in_features: Some(d.in_features),
                out_features: Some(d.out_features),
                bias: bias_vec(&d.bias),
                ..RawParams::default()
            },
            Some(nest(&d.weights, &[d.out_features, d.in_features])),
        ),
        LayerOp::Maxpool { kernel, stride } => (
            RawParams {
                kernel: Some(*kernel),
                stride: Some(*stride),
                ..RawParams::default()
            },
            None,
        ),
        LayerOp::Relu | LayerOp::Gap => (RawParams::default(), None),
    };
    RawLayer {
        name: l.name.clone(),
        kind: l.kind().as_str().to_string(),
        params,
        weights,
    }
}

impl<T: Scalar> NetworkSpec<T> {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: RawNetwork =
            serde_json::from_str(text).map_err(|e| ChainError::parse("network spec", e))?;
        let mut level_map = BTreeMap::new();
        for (k, v) in raw.level_map {
            level_map.insert(k.parse::<Level>()?, v);
        }
        let layers = raw
            .layers
            .into_iter()
            .map(raw_to_layer)
            .collect::<Result<Vec<_>>>()?;
        NetworkSpec::new(raw.input_shape, layers, level_map, raw.class_names)
    }

    pub fn to_json_string(&self) -> String {
        let raw = RawNetwork {
            input_shape: self.input_shape,
            level_map: self
                .level_map
                .iter()
                .map(|(k, v)| (k.as_str().to_string(), v.clone()))
                .collect(),
            class_names: self.class_names.clone(),
            layers: self.layers.iter().map(layer_to_raw).collect(),
        };
        serde_json::to_string_pretty(&raw).expect("network serializes")
    }
}

/// Reads and validates a network-spec JSON file.
pub fn load_network<T: Scalar>(path: impl AsRef<Path>) -> Result<NetworkSpec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ChainError::io(path, e))?;
    NetworkSpec::from_json_str(&text)
}

/// Per-sample input tensor file: `{"shape":[C,H,W],"data":[...]}`.
pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ChainError::io(path, e))?;
    let t: Tensor<T> = serde_json::from_str(&text)
        .map_err(|e| ChainError::parse(path.display().to_string(), e))?;
    Tensor::from_vec(t.shape, t.data)
}
