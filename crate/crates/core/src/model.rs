//! Declarative MLP/CNN models over a flat parameter vector.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pruning::Mask;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    /// Per-sample output shape, or `None` if `input` does not fit this layer.
    fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (input == [inputs]).then(|| vec![outputs]),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, padding } => {
                if input.len() != 3 || input[0] != in_channels {
                    return None;
                }
                let pad = match padding {
                    Padding::Same if kernel % 2 == 1 => (kernel - 1) / 2,
                    Padding::Same => return None,
                    Padding::Valid => 0,
                };
                let (h, w) = (input[1] + 2 * pad, input[2] + 2 * pad);
                (h >= kernel && w >= kernel)
                    .then(|| vec![out_channels, h - kernel + 1, w - kernel + 1])
            }
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense:{inputs}:{outputs}"),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, padding } => {
                let pad = match padding {
                    Padding::Same => "same",
                    Padding::Valid => "valid",
                };
                write!(f, "conv2d:{in_channels}:{out_channels}:{kernel}:{pad}")
            }
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').map(str::trim).collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| Error::Config(format!("layer `{s}` is missing a field")))?
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("layer `{s}`: field {i} must be a positive integer")))
        };
        match parts[0] {
            "dense" if parts.len() == 3 => Ok(LayerSpec::Dense { inputs: num(1)?, outputs: num(2)? }),
            "conv2d" if parts.len() == 4 || parts.len() == 5 => {
                let padding = match parts.get(4).copied().unwrap_or("same") {
                    "same" => Padding::Same,
                    "valid" => Padding::Valid,
                    other => return Err(Error::Config(format!("unknown padding `{other}`"))),
                };
                Ok(LayerSpec::Conv2d {
                    in_channels: num(1)?,
                    out_channels: num(2)?,
                    kernel: num(3)?,
                    padding,
                })
            }
            "relu" if parts.len() == 1 => Ok(LayerSpec::Relu),
            "flatten" if parts.len() == 1 => Ok(LayerSpec::Flatten),
            _ => Err(Error::Config(format!("cannot parse layer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    /// Shape of one sample, e.g. `[2]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl ModelSpec {
    /// Dense ReLU network `input -> hidden... -> classes`.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense { inputs: prev, outputs: h });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Dense { inputs: prev, outputs: classes });
        ModelSpec { input_shape: vec![inputs], layers, classes }
    }

    /// Checks that layer shapes compose and end in `[classes]`.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input shape {:?}", self.input_shape)));
        }
        if self.classes < 2 {
            return Err(Error::Config("class count must be at least 2".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut previous = format!("input {}", shape_str(&shape));
        for (index, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).ok_or_else(|| Error::Compose {
                index,
                layer: layer.to_string(),
                previous: previous.clone(),
            })?;
            previous = format!("layer {index} ({layer}) with output {}", shape_str(&shape));
        }
        if shape != [self.classes] {
            return Err(Error::Compose {
                index: self.layers.len(),
                layer: format!("classifier head of {} classes", self.classes),
                previous,
            });
        }
        Ok(())
    }

    pub fn has_conv(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Conv2d { .. }))
    }

    pub fn layers_string(&self) -> String {
        self.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
    }

    pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
    }

    /// Canonical text form; two specs are equal iff their canonical forms are.
    pub fn canonical(&self) -> String {
        format!(
            "input={};layers={};classes={}",
            shape_str(&self.input_shape),
            self.layers_string(),
            self.classes
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

pub fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("bad shape `{s}`")))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentRole {
    Weight,
    Bias,
}

/// One named tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub role: SegmentRole,
    pub layer: usize,
    pub conv: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ParamLayout {
    fn for_spec(spec: &ModelSpec) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, role, layer, conv| {
            let len: usize = shape.iter().product();
            segments.push(Segment { name, shape, offset, role, layer, conv });
            offset += len;
        };
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    push(format!("{i}.dense.weight"), vec![inputs, outputs], SegmentRole::Weight, i, false);
                    push(format!("{i}.dense.bias"), vec![outputs], SegmentRole::Bias, i, false);
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    push(
                        format!("{i}.conv2d.weight"),
                        vec![out_channels, in_channels, kernel, kernel],
                        SegmentRole::Weight,
                        i,
                        true,
                    );
                    push(format!("{i}.conv2d.bias"), vec![out_channels], SegmentRole::Bias, i, true);
                }
                LayerSpec::Relu | LayerSpec::Flatten => {}
            }
        }
        ParamLayout { segments, len: offset }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// 1.0 on coordinates that receive weight decay (weights), 0.0 on biases.
    pub fn decay_flags(&self) -> Vec<f32> {
        let mut flags = vec![0.0; self.len];
        for s in self.segments.iter().filter(|s| s.role == SegmentRole::Weight) {
            flags[s.range()].fill(1.0);
        }
        flags
    }
}

/// All trainable parameters of one model as a single flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f32>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.len()];
        ParamVector { layout, values }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape("param_vector", &[layout.len()], &[values.len()]));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn segment_values(&self, seg: &Segment) -> &[f32] {
        &self.values[seg.range()]
    }

    /// Splits into one named tensor per segment.
    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .segments()
            .iter()
            .map(|s| {
                let t = Tensor::new(s.shape.clone(), self.values[s.range()].to_vec())
                    .expect("layout shapes are valid");
                (s.name.clone(), t)
            })
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`]; every segment must be present exactly once.
    pub fn flatten(layout: Arc<ParamLayout>, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut out = ParamVector::zeros(layout.clone());
        if tensors.len() != layout.segments().len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.segments().len(),
                tensors.len()
            )));
        }
        for seg in layout.segments() {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == seg.name)
                .ok_or_else(|| Error::Format(format!("missing parameter tensor `{}`", seg.name)))?;
            if t.shape() != seg.shape.as_slice() {
                return Err(Error::shape("flatten", &seg.shape, t.shape()));
            }
            out.values[seg.range()].copy_from_slice(t.data());
        }
        Ok(out)
    }
}

/// Which layer kinds contribute prunable weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrunableKinds {
    /// Conv weights when the model has conv layers, dense weights otherwise.
    Auto,
    Dense,
    Conv,
    All,
}

impl PrunableKinds {
    fn resolve(self, spec: &ModelSpec) -> (bool, bool) {
        match self {
            PrunableKinds::Auto if spec.has_conv() => (false, true),
            PrunableKinds::Auto | PrunableKinds::Dense => (true, false),
            PrunableKinds::Conv => (false, true),
            PrunableKinds::All => (true, true),
        }
    }
}

impl fmt::Display for PrunableKinds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrunableKinds::Auto => "auto",
            PrunableKinds::Dense => "dense",
            PrunableKinds::Conv => "conv",
            PrunableKinds::All => "all",
        })
    }
}

impl FromStr for PrunableKinds {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(PrunableKinds::Auto),
            "dense" => Ok(PrunableKinds::Dense),
            "conv" => Ok(PrunableKinds::Conv),
            "all" | "dense,conv" | "conv,dense" => Ok(PrunableKinds::All),
            other => Err(Error::Config(format!("unknown prunable kinds `{other}`"))),
        }
    }
}

/// Coordinates of the parameter vector that pruning may zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrunableSet {
    coords: Vec<usize>,
    member: Vec<bool>,
}

impl PrunableSet {
    fn new(layout: &ParamLayout, spec: &ModelSpec, kinds: PrunableKinds) -> Self {
        let (dense, conv) = kinds.resolve(spec);
        let mut member = vec![false; layout.len()];
        for s in layout.segments() {
            let selected = if s.conv { conv } else { dense };
            if s.role == SegmentRole::Weight && selected {
                member[s.range()].fill(true);
            }
        }
        let coords = (0..member.len()).filter(|&i| member[i]).collect();
        PrunableSet { coords, member }
    }

    /// Prunable coordinate indices into the parameter vector, ascending.
    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    pub fn count(&self) -> usize {
        self.coords.len()
    }

    pub fn contains(&self, coord: usize) -> bool {
        self.member[coord]
    }

    pub fn dim(&self) -> usize {
        self.member.len()
    }
}

/// A validated spec with its parameter layout and prunable set.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layout: Arc<ParamLayout>,
    prunable: PrunableSet,
    prunable_segments: Vec<bool>,
}

impl Model {
    pub fn new(spec: ModelSpec, kinds: PrunableKinds) -> Result<Self> {
        spec.validate()?;
        let layout = ParamLayout::for_spec(&spec);
        let prunable = PrunableSet::new(&layout, &spec, kinds);
        let prunable_segments = layout
            .segments()
            .iter()
            .map(|s| prunable.contains(s.offset) && s.role == SegmentRole::Weight)
            .collect();
        Ok(Model {
            spec,
            layout: Arc::new(layout),
            prunable,
            prunable_segments,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn prunable(&self) -> &PrunableSet {
        &self.prunable
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    /// Kaiming-uniform (fan-in) weights, zero biases. Depends only on `seed`.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut params = ParamVector::zeros(self.layout.clone());
        for (i, seg) in self.layout.segments().iter().enumerate() {
            if seg.role != SegmentRole::Weight {
                continue;
            }
            let fan_in: usize = if seg.conv { seg.shape[1..].iter().product() } else { seg.shape[0] };
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let mut rng = rng::stream(seed, i as u64);
            for v in &mut params.values[seg.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    /// All-ones mask over this model's prunable coordinates.
    pub fn dense_mask(&self) -> Mask {
        Mask::ones(self.prunable.count())
    }

    /// Per-coordinate multiplier: 0 on masked prunable coordinates, 1 elsewhere.
    pub fn expand_mask(&self, mask: &Mask) -> Result<Vec<f32>> {
        if mask.len() != self.prunable.count() {
            return Err(Error::shape("mask", &[self.prunable.count()], &[mask.len()]));
        }
        let mut full = vec![1.0f32; self.dim()];
        for (bit, &coord) in mask.bits().iter().zip(self.prunable.coords()) {
            if !bit {
                full[coord] = 0.0;
            }
        }
        Ok(full)
    }

    /// Records the forward pass on `tape`. Returns the logits and one leaf per segment.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        mask: Option<&[f32]>,
        batch: &Tensor,
    ) -> Result<(Var, Vec<Var>)> {
        if params.len() != self.dim() {
            return Err(Error::shape("forward", &[self.dim()], &[params.len()]));
        }
        let per_sample: usize = self.spec.input_shape.iter().product();
        let rows = batch.shape().first().copied().unwrap_or(0);
        if rows == 0 || batch.len() != rows * per_sample {
            let mut expected = vec![rows];
            expected.extend(&self.spec.input_shape);
            return Err(Error::shape("forward", &expected, batch.shape()));
        }
        let mut in_shape = vec![rows];
        in_shape.extend(&self.spec.input_shape);
        let mut x = tape.constant(batch.clone().reshaped(&in_shape)?);

        let mut leaves = Vec::with_capacity(self.layout.segments().len());
        let mut effective = Vec::with_capacity(self.layout.segments().len());
        for (seg, &prunable) in self.layout.segments().iter().zip(&self.prunable_segments) {
            let t = Tensor::new(seg.shape.clone(), params.values[seg.range()].to_vec())?;
            let leaf = tape.leaf(t);
            leaves.push(leaf);
            let eff = match mask {
                Some(m) if prunable => {
                    let mt = Tensor::new(seg.shape.clone(), m[seg.range()].to_vec())?;
                    let mv = tape.constant(mt);
                    tape.mul(leaf, mv)?
                }
                _ => leaf,
            };
            effective.push(eff);
        }

        let mut next = 0;
        for layer in &self.spec.layers {
            x = match *layer {
                LayerSpec::Dense { .. } => {
                    let (w, b) = (effective[next], effective[next + 1]);
                    next += 2;
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)?
                }
                LayerSpec::Conv2d { padding, .. } => {
                    let (w, b) = (effective[next], effective[next + 1]);
                    next += 2;
                    let y = tape.conv2d(x, w, padding)?;
                    tape.add_bias(y, b)?
                }
                LayerSpec::Relu => tape.relu(x),
                LayerSpec::Flatten => {
                    let shape = tape.value(x).shape();
                    let flat = [shape[0], shape[1..].iter().product()];
                    tape.reshape(x, &flat)?
                }
            };
        }
        Ok((x, leaves))
    }

    /// Logits `[batch, classes]` computed with effective weights `w ∘ m`.
    pub fn forward_logits(&self, params: &ParamVector, mask: Option<&Mask>, batch: &Tensor) -> Result<Tensor> {
        let expanded = mask.map(|m| self.expand_mask(m)).transpose()?;
        let mut tape = Tape::new();
        let (logits, _) = self.forward_on_tape(&mut tape, params, expanded.as_deref(), batch)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean cross-entropy and its gradient with respect to the raw parameters.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        mask: Option<&[f32]>,
        batch: &Tensor,
        labels: &[usize],
    ) -> Result<(f32, Vec<f32>)> {
        let mut tape = Tape::new();
        let (logits, leaves) = self.forward_on_tape(&mut tape, params, mask, batch)?;
        let loss = cross_entropy_on_tape(&mut tape, logits, labels)?;
        let grads = tape.backward(loss)?;
        let mut flat = vec![0.0f32; self.dim()];
        for (seg, leaf) in self.layout.segments().iter().zip(leaves) {
            if let Some(g) = grads.get(leaf) {
                flat[seg.range()].copy_from_slice(g.data());
            }
        }
        Ok((tape.value(loss).item()?, flat))
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("cross_entropy", &[rows], &[labels.len()]));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange { index, label, classes });
    }
    Ok(())
}

/// Records mean cross-entropy of `logits: [batch, classes]` on the tape.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len(), 0]));
    }
    check_labels(labels, shape[0], shape[1])?;
    let mut onehot = Tensor::zeros(&shape);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * shape[1] + l] = 1.0;
    }
    let logp = tape.log_softmax(logits)?;
    let pick = tape.constant(onehot);
    let picked = tape.mul(logp, pick)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / shape[0] as f32))
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = cross_entropy_on_tape(&mut tape, l, labels)?;
    tape.value(loss).item()
}
