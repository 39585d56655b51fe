//! Layer specs, the tiny teacher/auxiliary/student CNN family, and forward
//! passes that expose every intermediate feature map.

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_extent, BatchNormMode, RunningStats, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output filters (conv) or neurons (dense).
    pub width: usize,
    /// Square kernel extent; ignored for dense layers.
    #[serde(default)]
    pub kernel: usize,
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default)]
    pub activation: bool,
    /// Max-pool window (and stride) applied after the activation.
    #[serde(default)]
    pub pool: Option<usize>,
}

impl LayerSpec {
    /// Conv → batchnorm → ReLU, optionally followed by a max-pool.
    pub fn conv(width: usize, kernel: usize, pool: Option<usize>) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            width,
            kernel,
            batchnorm: true,
            activation: true,
            pool,
        }
    }

    /// Dense → ReLU.
    pub fn hidden(width: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            width,
            kernel: 0,
            batchnorm: false,
            activation: true,
            pool: None,
        }
    }

    /// Dense output layer without activation.
    pub fn classifier(classes: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            width: classes,
            kernel: 0,
            batchnorm: false,
            activation: false,
            pool: None,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Teacher,
    Auxiliary,
    Student,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Teacher => "teacher",
            ModelRole::Auxiliary => "auxiliary",
            ModelRole::Student => "student",
        })
    }
}

/// Input image geometry `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        InputShape {
            channels,
            height,
            width,
        }
    }

    pub const CIFAR10: InputShape = InputShape::new(3, 32, 32);
    pub const FASHION_MNIST: InputShape = InputShape::new(1, 28, 28);
}

/// Architecture description.
///
/// Every layer except the last produces a feature map that can be matched
/// during distillation; the last layer is the classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub role: ModelRole,
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    /// Spatial maps are average-pooled onto a `grid × grid` map before the
    /// first dense layer.
    #[serde(default)]
    pub grid: Option<usize>,
}

/// Number of leading conv layers followed by a 2×2 max-pool in the CNN family.
const POOLED_CONVS: usize = 3;

impl ModelSpec {
    /// Conv blocks (conv, batchnorm, ReLU, 2×2 max-pool on the first three),
    /// a 2×2 average-pooled grid, hidden ReLU dense layers, then the classifier.
    pub fn tiny_cnn(
        name: impl Into<String>,
        role: ModelRole,
        input: InputShape,
        convs: &[(usize, usize)],
        hidden: &[usize],
        num_classes: usize,
    ) -> Self {
        let mut layers: Vec<LayerSpec> = convs
            .iter()
            .enumerate()
            .map(|(i, &(w, k))| LayerSpec::conv(w, k, (i < POOLED_CONVS).then_some(2)))
            .collect();
        layers.extend(hidden.iter().map(|&w| LayerSpec::hidden(w)));
        layers.push(LayerSpec::classifier(num_classes));
        ModelSpec {
            name: name.into(),
            role,
            input,
            layers,
            num_classes,
            grid: Some(2),
        }
    }

    /// Student CNN: conv 8/16/32 (3×3), fc 64, classifier.
    pub fn cnn_s(input: InputShape, num_classes: usize) -> Self {
        Self::tiny_cnn("cnn-s", ModelRole::Student, input, &[(8, 3), (16, 3), (32, 3)], &[64], num_classes)
    }

    /// Auxiliary CNN: conv 16/32/64 (3×3), fc 128, classifier.
    pub fn cnn_a(input: InputShape, num_classes: usize) -> Self {
        Self::tiny_cnn(
            "cnn-a",
            ModelRole::Auxiliary,
            input,
            &[(16, 3), (32, 3), (64, 3)],
            &[128],
            num_classes,
        )
    }

    /// CUB-sized variant with 9×9/5×5/5×5 kernels.
    pub fn cnn_s_large_kernels(input: InputShape, num_classes: usize) -> Self {
        Self::tiny_cnn("cnn-s-k955", ModelRole::Student, input, &[(8, 9), (16, 5), (32, 5)], &[64], num_classes)
    }

    /// Desk-scale teacher: the CNN family at twice the auxiliary widths.
    pub fn wide_teacher(input: InputShape, num_classes: usize) -> Self {
        Self::tiny_cnn(
            "wide-teacher",
            ModelRole::Teacher,
            input,
            &[(32, 3), (64, 3), (128, 3)],
            &[256],
            num_classes,
        )
    }

    /// Student with `depth` conv layers (2..=7), widths doubling from 8.
    pub fn student_with_depth(depth: usize, input: InputShape, num_classes: usize) -> Result<Self> {
        if !(2..=7).contains(&depth) {
            return Err(Error::Spec(format!("student depth must be in 2..=7, got {depth}")));
        }
        let convs: Vec<(usize, usize)> = (0..depth).map(|i| (8 << i, 3)).collect();
        Ok(Self::tiny_cnn(
            format!("cnn-s-d{depth}"),
            ModelRole::Student,
            input,
            &convs,
            &[64],
            num_classes,
        ))
    }

    /// Looks up a named architecture.
    pub fn by_name(name: &str, input: InputShape, num_classes: usize) -> Result<Self> {
        match name {
            "cnn-s" => Ok(Self::cnn_s(input, num_classes)),
            "cnn-a" => Ok(Self::cnn_a(input, num_classes)),
            "cnn-s-k955" => Ok(Self::cnn_s_large_kernels(input, num_classes)),
            "wide-teacher" => Ok(Self::wide_teacher(input, num_classes)),
            other => match other.strip_prefix("cnn-s-d").and_then(|d| d.parse().ok()) {
                Some(depth) => Self::student_with_depth(depth, input, num_classes),
                None => Err(Error::Spec(format!("unknown architecture `{other}`"))),
            },
        }
    }

    /// Number of feature-producing layers (every layer but the classifier).
    pub fn feature_layers(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    /// Output widths of the feature layers.
    pub fn feature_widths(&self) -> Vec<usize> {
        self.layers[..self.feature_layers()].iter().map(|l| l.width).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::Spec("model has no layers".into()));
        };
        if last.kind != LayerKind::Dense || last.width != self.num_classes || last.activation {
            return Err(Error::Spec(format!(
                "last layer must be a dense classifier of width {} without activation",
                self.num_classes
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec("need at least 2 classes".into()));
        }
        let InputShape {
            channels,
            height,
            width,
        } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Spec(format!("invalid input shape {:?}", self.input)));
        }
        let mut seen_dense = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.width == 0 {
                return Err(Error::Spec(format!("layer {} has zero width", i + 1)));
            }
            match layer.kind {
                LayerKind::Conv => {
                    if seen_dense {
                        return Err(Error::Spec(format!("conv layer {} follows a dense layer", i + 1)));
                    }
                    if layer.kernel == 0 {
                        return Err(Error::Spec(format!("conv layer {} has zero kernel", i + 1)));
                    }
                }
                LayerKind::Dense => {
                    seen_dense = true;
                    if layer.batchnorm || layer.pool.is_some() {
                        return Err(Error::Spec(format!(
                            "dense layer {} cannot carry batchnorm or pooling",
                            i + 1
                        )));
                    }
                }
            }
        }
        self.feature_shapes().map(|_| ())
    }

    /// Shapes `(channels, height, width)` of each feature map and the flattened
    /// input width of the first dense layer, from conv/pool arithmetic.
    pub fn feature_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shape = [self.input.channels, self.input.height, self.input.width];
        let mut out = Vec::with_capacity(self.feature_layers());
        let mut spatial = true;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Conv => {
                    let ext = |v| conv_output_extent(v, layer.kernel, 1, layer.padding());
                    let (Some(h), Some(w)) = (ext(shape[1]), ext(shape[2])) else {
                        return Err(Error::Spec(format!(
                            "conv layer {} kernel {} too large for {}x{} input",
                            i + 1,
                            layer.kernel,
                            shape[1],
                            shape[2]
                        )));
                    };
                    shape = [layer.width, h, w];
                }
                LayerKind::Dense => {
                    if spatial {
                        if let Some(g) = self.grid {
                            if shape[1] < g || shape[2] < g {
                                return Err(Error::Spec(format!(
                                    "{}x{} map is smaller than the {g}x{g} pooling grid",
                                    shape[1], shape[2]
                                )));
                            }
                        }
                        spatial = false;
                    }
                    shape = [layer.width, 1, 1];
                }
            }
            if i < self.feature_layers() {
                out.push(shape);
            }
            if let Some(p) = layer.pool {
                let (Some(h), Some(w)) = (
                    conv_output_extent(shape[1], p, p, 0),
                    conv_output_extent(shape[2], p, p, 0),
                ) else {
                    return Err(Error::Spec(format!("layer {} pooling collapses the map", i + 1)));
                };
                shape = [shape[0], h, w];
            }
        }
        Ok(out)
    }

    /// Flattened input width of every layer.
    fn fan_ins(&self) -> Result<Vec<usize>> {
        let mut fans = Vec::with_capacity(self.layers.len());
        let mut shape = [self.input.channels, self.input.height, self.input.width];
        let mut spatial = true;
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv => {
                    fans.push(shape[0]);
                    let ext = |v| conv_output_extent(v, layer.kernel, 1, layer.padding()).unwrap_or(0);
                    shape = [layer.width, ext(shape[1]), ext(shape[2])];
                }
                LayerKind::Dense => {
                    if spatial {
                        if let Some(g) = self.grid {
                            shape = [shape[0], g, g];
                        }
                        spatial = false;
                    }
                    fans.push(shape.iter().product());
                    shape = [layer.width, 1, 1];
                }
            }
            if let Some(p) = layer.pool {
                let ext = |v| conv_output_extent(v, p, p, 0).unwrap_or(0);
                shape = [shape[0], ext(shape[1]), ext(shape[2])];
            }
        }
        Ok(fans)
    }

    /// Parameter tensor shapes per layer, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<Vec<usize>>>> {
        self.validate()?;
        let fans = self.fan_ins()?;
        Ok(self
            .layers
            .iter()
            .zip(fans)
            .map(|(layer, fan)| match layer.kind {
                LayerKind::Conv => {
                    let mut v = vec![vec![fan, layer.width, layer.kernel, layer.kernel], vec![layer.width]];
                    if layer.batchnorm {
                        v.push(vec![layer.width]);
                        v.push(vec![layer.width]);
                    }
                    v
                }
                LayerKind::Dense => vec![vec![fan, layer.width], vec![layer.width]],
            })
            .collect())
    }

    /// Trainable parameter count (batchnorm affine terms included, running
    /// statistics excluded).
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .flatten()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }
}

/// Auxiliary architecture whose feature layers are `1/(1−q)` times wider than
/// the student's, so that pruning a fraction `q` of its channels leaves exactly
/// the student's widths.
pub fn make_auxiliary(student: &ModelSpec, q: f64) -> Result<ModelSpec> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Config(format!("pruning rate must lie in [0, 1), got {q}")));
    }
    let mut aux = student.clone();
    let features = aux.feature_layers();
    for (i, layer) in aux.layers.iter_mut().take(features).enumerate() {
        let scaled = layer.width as f64 / (1.0 - q);
        let rounded = scaled.round();
        if (scaled - rounded).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "pruning rate {q} gives a non-integer auxiliary width {scaled} for layer {} (student width {}); \
                 pick q so that width/(1-q) is an integer, e.g. 1/2 or 3/4 for power-of-two widths",
                i + 1,
                layer.width
            )));
        }
        layer.width = rounded as usize;
    }
    aux.role = ModelRole::Auxiliary;
    aux.name = if q == 0.0 {
        student.name.clone()
    } else {
        format!("{}-aux", student.name)
    };
    Ok(aux)
}

/// Feature maps captured during a forward pass, indexed by 1-based layer.
#[derive(Debug, Clone, Default)]
pub struct FeatureCapture {
    layers: Vec<Var>,
}

impl FeatureCapture {
    /// Feature map of layer `l` (1-based).
    pub fn get(&self, l: usize) -> Option<Var> {
        l.checked_sub(1).and_then(|i| self.layers.get(i).copied())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().copied()
    }

    pub fn last(&self) -> Option<Var> {
        self.layers.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Present when the pass ran through the classifier.
    pub logits: Option<Var>,
    pub features: FeatureCapture,
    /// `(parameter index, tape handle)` for every parameter used by the pass.
    pub params: Vec<(usize, Var)>,
}

/// A built network: parameters plus batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Tensor>,
    /// Parameter index range of each layer.
    layout: Vec<Range<usize>>,
    /// Running statistics of each layer that has batchnorm.
    bn: Vec<Option<RunningStats>>,
}

impl Model {
    /// Builds a model with seeded He-uniform weights (`U(±√(6/fan_in))`), zero
    /// biases, unit batchnorm scale and zero shift.
    ///
    /// Each role draws from its own stream, so a student and its reference
    /// built from the same seed do not start out as channel subsets of
    /// each other.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(spec.role as u64);
        let mut params = Vec::new();
        let mut layout = Vec::new();
        let mut bn = Vec::new();
        for (layer, layer_shapes) in spec.layers.iter().zip(&shapes) {
            let start = params.len();
            let weight_shape = &layer_shapes[0];
            let fan_in = match layer.kind {
                LayerKind::Conv => weight_shape[0] * layer.kernel * layer.kernel,
                LayerKind::Dense => weight_shape[0],
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = weight_shape.iter().product();
            let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            params.push(Tensor::new(weight_shape.clone(), w)?);
            params.push(Tensor::zeros(vec![layer.width]));
            if layer.batchnorm {
                params.push(Tensor::full(vec![layer.width], 1.0));
                params.push(Tensor::zeros(vec![layer.width]));
                bn.push(Some(RunningStats::new(layer.width)));
            } else {
                bn.push(None);
            }
            layout.push(start..params.len());
        }
        Ok(Model {
            spec,
            params,
            layout,
            bn,
        })
    }

    /// Reassembles a model from stored tensors, checking every shape.
    pub fn from_parts(spec: ModelSpec, params: Vec<Tensor>, bn: Vec<Option<RunningStats>>) -> Result<Self> {
        let template = Model::build(spec, 0)?;
        if params.len() != template.params.len() || bn.len() != template.bn.len() {
            return Err(Error::Spec("parameter list does not match the architecture".into()));
        }
        for (i, (p, t)) in params.iter().zip(&template.params).enumerate() {
            if p.shape() != t.shape() {
                return Err(Error::Spec(format!(
                    "parameter {i} has shape {:?}, architecture needs {:?}",
                    p.shape(),
                    t.shape()
                )));
            }
        }
        for (a, b) in bn.iter().zip(&template.bn) {
            match (a, b) {
                (Some(a), Some(b)) if a.mean.len() == b.mean.len() && a.var.len() == b.var.len() => {}
                (None, None) => {}
                _ => return Err(Error::Spec("batchnorm statistics do not match the architecture".into())),
            }
        }
        Ok(Model { params, bn, ..template })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[Option<RunningStats>] {
        &self.bn
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Names in storage order, e.g. `layer2.kernel`, `layer2.gamma`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.params.len());
        for (i, (layer, range)) in self.spec.layers.iter().zip(&self.layout).enumerate() {
            let labels: &[&str] = match layer.kind {
                LayerKind::Conv => &["kernel", "bias", "gamma", "beta"],
                LayerKind::Dense => &["weight", "bias"],
            };
            for label in labels.iter().take(range.len()) {
                names.push(format!("layer{}.{label}", i + 1));
            }
        }
        names
    }

    /// 1-based layer owning parameter `index`.
    pub fn layer_of_param(&self, index: usize) -> usize {
        self.layout
            .iter()
            .position(|r| r.contains(&index))
            .map(|l| l + 1)
            .expect("parameter index in range")
    }

    /// Weight tensor of layer `l` (1-based): `[c_in, c_out, k, k]` for conv,
    /// `[in, out]` for dense.
    pub fn layer_weight(&self, l: usize) -> Option<&Tensor> {
        l.checked_sub(1)
            .and_then(|i| self.layout.get(i))
            .map(|r| &self.params[r.start])
    }

    /// Runs the network in train mode (batch statistics, running estimates
    /// updated). With `until = Some(l)` the pass stops after feature layer `l`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, until: Option<usize>) -> Result<ForwardOutput> {
        let Model {
            spec,
            params,
            layout,
            bn,
        } = self;
        run_forward(spec, params, layout, BnAccess::Train(bn), tape, x, until)
    }

    /// Runs the network in eval mode (running statistics, no state change).
    pub fn forward_eval(&self, tape: &mut Tape, x: Var, until: Option<usize>) -> Result<ForwardOutput> {
        run_forward(&self.spec, &self.params, &self.layout, BnAccess::Eval(&self.bn), tape, x, until)
    }

    /// Dispatches on [`Mode`].
    pub fn forward_with_mode(&mut self, tape: &mut Tape, x: Var, mode: Mode, until: Option<usize>) -> Result<ForwardOutput> {
        match mode {
            Mode::Train => self.forward(tape, x, until),
            Mode::Eval => self.forward_eval(tape, x, until),
        }
    }

    /// Eval-mode logits and feature maps for a batch of images.
    pub fn forward_with_features(&self, images: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let out = self.forward_eval(&mut tape, x, None)?;
        let logits = tape.value(out.logits.expect("full pass has logits")).clone();
        let features = out.features.iter().map(|v| tape.value(v).clone()).collect();
        Ok((logits, features))
    }

    /// Eval-mode logits `[n, classes]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let out = self.forward_eval(&mut tape, x, None)?;
        Ok(tape.value(out.logits.expect("full pass has logits")).clone())
    }

    /// Eval-mode penultimate representation `[n, d]` (the last feature layer,
    /// flattened).
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let depth = self.spec.feature_layers();
        if depth == 0 {
            return Err(Error::Spec("model has no feature layer to embed with".into()));
        }
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let out = self.forward_eval(&mut tape, x, Some(depth))?;
        let feat = tape.value(out.features.last().expect("feature captured")).clone();
        let n = feat.dim(0);
        let d = feat.len() / n;
        feat.reshape(vec![n, d])
    }
}

enum BnAccess<'a> {
    Train(&'a mut [Option<RunningStats>]),
    Eval(&'a [Option<RunningStats>]),
}

fn run_forward(
    spec: &ModelSpec,
    params: &[Tensor],
    layout: &[Range<usize>],
    mut bn: BnAccess<'_>,
    tape: &mut Tape,
    x: Var,
    until: Option<usize>,
) -> Result<ForwardOutput> {
    let InputShape {
        channels,
        height,
        width,
    } = spec.input;
    let in_shape = tape.shape(x);
    if in_shape.len() != 4 || in_shape[1..] != [channels, height, width] {
        return Err(Error::shape(
            "forward",
            format!("expected [n,{channels},{height},{width}] input, got {in_shape:?}"),
        ));
    }
    let features = spec.feature_layers();
    if let Some(l) = until {
        if l == 0 || l > features {
            return Err(Error::Parameter(format!("feature layer {l} outside 1..={features}")));
        }
    }
    let stop = until.unwrap_or(spec.layers.len());
    let mut h = x;
    let mut captured = Vec::new();
    let mut bound = Vec::new();
    for (i, (layer, range)) in spec.layers.iter().zip(layout).enumerate().take(stop) {
        let vars: Vec<Var> = range.clone().map(|p| tape.leaf(params[p].clone())).collect();
        bound.extend(range.clone().zip(vars.iter().copied()));
        match layer.kind {
            LayerKind::Conv => {
                h = tape.conv2d(h, vars[0], vars[1], 1, layer.padding())?;
                if layer.batchnorm {
                    let mode = match &mut bn {
                        BnAccess::Train(stats) => BatchNormMode::Train(stats[i].as_mut().expect("bn stats")),
                        BnAccess::Eval(stats) => BatchNormMode::Eval(stats[i].as_ref().expect("bn stats")),
                    };
                    h = tape.batch_norm(h, vars[2], vars[3], mode)?;
                }
            }
            LayerKind::Dense => {
                if tape.shape(h).len() == 4 {
                    if let Some(g) = spec.grid {
                        h = tape.adaptive_avg_pool2d(h, g, g)?;
                    }
                    h = tape.flatten(h);
                }
                h = tape.dense(h, vars[0], vars[1])?;
            }
        }
        if layer.activation {
            h = tape.relu(h);
        }
        if i < features {
            captured.push(h);
        }
        if let Some(p) = layer.pool {
            h = tape.max_pool2d(h, p, p)?;
        }
    }
    Ok(ForwardOutput {
        logits: (stop == spec.layers.len()).then_some(h),
        features: FeatureCapture { layers: captured },
        params: bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_match_reference_architectures() {
        assert_eq!(ModelSpec::cnn_s(InputShape::CIFAR10, 10).param_count().unwrap(), 15_050);
        assert_eq!(ModelSpec::cnn_a(InputShape::CIFAR10, 10).param_count().unwrap(), 57_994);
        assert_eq!(ModelSpec::cnn_s(InputShape::FASHION_MNIST, 10).param_count().unwrap(), 14_906);
        assert_eq!(ModelSpec::cnn_a(InputShape::FASHION_MNIST, 10).param_count().unwrap(), 57_706);
    }

    #[test]
    fn single_dense_layer_count() {
        let spec = ModelSpec {
            name: "linear".into(),
            role: ModelRole::Student,
            input: InputShape::new(4, 1, 1),
            layers: vec![LayerSpec::classifier(2)],
            num_classes: 2,
            grid: None,
        };
        assert_eq!(Model::build(spec, 0).unwrap().param_count(), 10);
    }

    #[test]
    fn auxiliary_widths() {
        let s = ModelSpec::cnn_s(InputShape::CIFAR10, 10);
        let a = make_auxiliary(&s, 0.5).unwrap();
        assert_eq!(a.feature_widths(), vec![16, 32, 64, 128]);
        assert_eq!(a.layers, ModelSpec::cnn_a(InputShape::CIFAR10, 10).layers);
        assert_eq!(make_auxiliary(&s, 0.0).unwrap().layers, s.layers);
    }

    #[test]
    fn auxiliary_rejects_fractional_widths() {
        let mut s = ModelSpec::cnn_s(InputShape::CIFAR10, 10);
        s.layers[0].width = 9;
        s.layers[1].width = 18;
        let err = make_auxiliary(&s, 1.0 / 3.0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(make_auxiliary(&s, 1.0).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = ModelSpec::cnn_s(InputShape::CIFAR10, 10);
        s.layers.last_mut().unwrap().width = 7;
        assert!(Model::build(s, 0).is_err());
        let mut s = ModelSpec::cnn_s(InputShape::CIFAR10, 10);
        s.layers[1].width = 0;
        assert!(s.validate().is_err());
        assert!(ModelSpec::student_with_depth(8, InputShape::CIFAR10, 10).is_err());
    }

    #[test]
    fn build_is_seeded() {
        let spec = ModelSpec::cnn_s(InputShape::CIFAR10, 10);
        let a = Model::build(spec.clone(), 3).unwrap();
        let b = Model::build(spec.clone(), 3).unwrap();
        let c = Model::build(spec, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn names_follow_layout() {
        let m = Model::build(ModelSpec::cnn_s(InputShape::CIFAR10, 10), 0).unwrap();
        let names = m.param_names();
        assert_eq!(names.len(), m.params().len());
        assert_eq!(names[0], "layer1.kernel");
        assert_eq!(names[3], "layer1.beta");
        assert_eq!(names.last().unwrap(), "layer5.bias");
        assert_eq!(m.layer_of_param(0), 1);
        assert_eq!(m.layer_of_param(names.len() - 1), 5);
    }

    #[test]
    fn truncated_forward_skips_deeper_parameters() {
        let mut m = Model::build(ModelSpec::cnn_s(InputShape::CIFAR10, 10), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 3, 32, 32], 0.5));
        let out = m.forward(&mut tape, x, Some(2)).unwrap();
        assert!(out.logits.is_none());
        assert_eq!(out.features.len(), 2);
        assert!(out.params.iter().all(|&(p, _)| m.layer_of_param(p) <= 2));
        let bn_after = m.running_stats()[2].clone();
        assert_eq!(bn_after, Some(RunningStats::new(32)));
    }
}
