//! Concrete networks: the multi-task classifier, the conditional generator
//! and critic, and the white-box membership attacker.
//!
//! Each network can be rebuilt from its parameter set alone (layer kinds carry
//! every structural hyperparameter), so checkpoints are self-describing.

use rand::Rng;
use serde::{Deserialize, Serialize};
use synthaudit_nn::layers::{
    avg_pool2, batch_norm, conv2d, global_avg_pool, group_norm, linear, standardize, upsample2,
};
use synthaudit_nn::{Batch, BatchStats, Bound, Element, Forward, Graph, LayerKind, Mode, Model, NnError, ParamSet, Tensor, Var};

use crate::corpus::{ImageRecord, N_ATTRIBUTES};
use crate::error::{Error, Result};

/// Width of the label/target vector: protest, violence, attributes.
pub const N_TARGETS: usize = 2 + N_ATTRIBUTES;
const SLOPE: f64 = 0.2;
const GN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

fn leaky<T: Element>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, T::from_f64_lossy(SLOPE))
}

/// Maps pixels from `[0, 1]` to `[-1, 1]`.
fn center<T: Element>(g: &mut Graph<T>, x: Var) -> Var {
    let y = g.scale(x, T::from_f64_lossy(2.0));
    g.add_scalar(y, -T::one())
}

/// Images `[n, side, side, 3]` with targets `[n, 12]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    pub x: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Element> ImageBatch<T> {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> Result<Self> {
        let mut side = None;
        let (mut x, mut targets, mut n) = (Vec::new(), Vec::new(), 0);
        for r in records {
            if *side.get_or_insert(r.image.side) != r.image.side {
                return Err(Error::Invalid("records have mixed image sizes".into()));
            }
            x.extend(r.image.data.iter().map(|&v| T::from_f32(v).unwrap()));
            targets.extend(r.annotation.targets().iter().map(|&v| T::from_f32(v).unwrap()));
            n += 1;
        }
        let side = side.ok_or_else(|| Error::Invalid("empty batch".into()))?;
        Ok(Self {
            x: Tensor::new(vec![n, side, side, 3], x)?,
            targets: Tensor::new(vec![n, N_TARGETS], targets)?,
        })
    }
}

impl<T: Element> Batch for ImageBatch<T> {
    fn len(&self) -> usize {
        self.x.rows()
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            targets: self.targets.select_rows(idx),
        }
    }
}

// -------------------------------------------------------------------------
// classifier

/// Normalization used inside the convolutional blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Group,
    /// Batch statistics in training, running statistics at evaluation.
    Batch,
}

/// How the last feature map reaches the dense layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Keep the spatial layout.
    #[default]
    Flatten,
    /// Global average over positions.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierArch {
    pub input_side: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub norm: Norm,
    /// Group count for group normalization.
    pub groups: usize,
    pub pooling: Pooling,
    pub hidden: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            input_side: 32,
            widths: vec![16, 32, 64, 64],
            strides: vec![2, 1, 2, 2],
            norm: Norm::Group,
            groups: 4,
            pooling: Pooling::Flatten,
            hidden: 64,
        }
    }
}

impl ClassifierArch {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::config("downstream.arch.strides", "needs one stride per block width"));
        }
        if self.norm == Norm::Group && (self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0)) {
            return Err(Error::config("downstream.arch.groups", "must divide every block width"));
        }
        if self.strides.iter().any(|&s| s == 0) || self.hidden == 0 || self.input_side == 0 {
            return Err(Error::config("downstream.arch", "strides, sizes and hidden width must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockNorm {
    Group(usize),
    Batch,
}

/// Convolutional blocks (conv 3x3, normalization, leaky ReLU), global average
/// pooling, one hidden dense layer and a 12-logit head.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    params: ParamSet<T>,
    blocks: Vec<(usize, BlockNorm)>,
    /// Channel count of the last block; the dense layer's input width tells the pooling.
    last_channels: usize,
}

pub const CLASSIFIER_MODEL: &str = "classifier";

impl<T: Element> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(arch: &ClassifierArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut p = ParamSet::new(CLASSIFIER_MODEL);
        let mut in_ch = 3;
        for (i, (&w, &s)) in arch.widths.iter().zip(&arch.strides).enumerate() {
            p.push(
                &format!("conv{i}"),
                LayerKind::Conv2d {
                    in_ch,
                    out_ch: w,
                    kernel: 3,
                    stride: s,
                    padding: 1,
                },
                rng,
            );
            match arch.norm {
                Norm::Group => p.push(&format!("gn{i}"), LayerKind::GroupNorm { groups: arch.groups, channels: w }, rng),
                Norm::Batch => p.push(&format!("bn{i}"), LayerKind::BatchNorm { channels: w }, rng),
            };
            in_ch = w;
        }
        // 3x3 convolutions with padding 1: out = ceil(in / stride)
        let side = arch.strides.iter().fold(arch.input_side, |s, &st| s.div_ceil(st));
        let fc_in = match arch.pooling {
            Pooling::Flatten => in_ch * side * side,
            Pooling::Average => in_ch,
        };
        p.push("fc", LayerKind::Linear { inputs: fc_in, outputs: arch.hidden }, rng);
        p.push("head", LayerKind::Linear { inputs: arch.hidden, outputs: N_TARGETS }, rng);
        Self::from_params(p)
    }

    /// Rebuilds the network around an existing parameter set.
    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let bad = |m: &str| Error::Nn(NnError::InvalidArgument(format!("not a classifier: {m}")));
        if params.model() != CLASSIFIER_MODEL {
            return Err(bad("model name"));
        }
        let layers = params.layers();
        let n = layers.len();
        if n < 4 || n % 2 != 0 {
            return Err(bad("layer count"));
        }
        let mut blocks = Vec::new();
        for pair in layers[..n - 2].chunks(2) {
            match (&pair[0].spec.kind, &pair[1].spec.kind) {
                (LayerKind::Conv2d { stride, .. }, LayerKind::GroupNorm { groups, .. }) => {
                    blocks.push((*stride, BlockNorm::Group(*groups)))
                }
                (LayerKind::Conv2d { stride, .. }, LayerKind::BatchNorm { .. }) => {
                    blocks.push((*stride, BlockNorm::Batch))
                }
                _ => return Err(bad("expected conv/normalization pairs")),
            }
        }
        match &layers[n - 1].spec.kind {
            LayerKind::Linear { outputs, .. } if *outputs == N_TARGETS => {}
            _ => return Err(bad("head")),
        }
        let last_channels = match &layers[n - 4].spec.kind {
            LayerKind::Conv2d { out_ch, .. } => *out_ch,
            _ => return Err(bad("last block")),
        };
        Ok(Self {
            params,
            blocks,
            last_channels,
        })
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Whether any layer mixes statistics across a batch.
    pub fn batch_coupled(&self) -> bool {
        self.blocks.iter().any(|b| b.1 == BlockNorm::Batch)
    }

    /// Forward pass returning the penultimate features alongside the logits.
    pub fn forward_features(&self, g: &mut Graph<T>, p: &Bound, x: Var, mode: Mode) -> (Forward, Var) {
        let (fwd, feats, _) = self.forward_impl(g, p, x, mode);
        (fwd, feats)
    }

    fn forward_impl(&self, g: &mut Graph<T>, p: &Bound, x: Var, mode: Mode) -> (Forward, Var, Vec<BatchStats>) {
        let mut outs = Vec::with_capacity(p.len());
        let mut stats = Vec::new();
        let mut h = center(g, x);
        for (i, &(stride, norm)) in self.blocks.iter().enumerate() {
            h = conv2d(g, &p[2 * i], h, 3, stride, 1);
            outs.push(h);
            h = match norm {
                BlockNorm::Group(groups) => group_norm(g, &p[2 * i + 1], h, groups, GN_EPS),
                BlockNorm::Batch => {
                    let (y, s) = batch_norm(g, &p[2 * i + 1], h, mode == Mode::Train, BN_EPS);
                    stats.extend(s);
                    y
                }
            };
            outs.push(h);
            h = leaky(g, h);
        }
        let n = p.len();
        let fc_in = match self.params.layers()[n - 2].spec.kind {
            LayerKind::Linear { inputs, .. } => inputs,
            _ => unreachable!("checked in from_params"),
        };
        h = if fc_in == self.last_channels {
            global_avg_pool(g, h)
        } else {
            let rows = g.shape(h)[0];
            g.reshape(h, &[rows, fc_in])
        };
        h = linear(g, &p[n - 2], h);
        outs.push(h);
        let feats = leaky(g, h);
        let logits = linear(g, &p[n - 1], feats);
        outs.push(logits);
        (
            Forward {
                output: logits,
                layer_outputs: outs,
            },
            feats,
            stats,
        )
    }

    /// Sets the running statistics of every batch-norm layer to the average
    /// of train-mode batch statistics over `x`, taken in chunks of `chunk`.
    pub fn calibrate_batch_norm(&mut self, x: &Tensor<T>, chunk: usize) -> Result<()> {
        if !self.batch_coupled() {
            return Ok(());
        }
        let n = x.rows();
        if n == 0 || chunk == 0 {
            return Err(Error::Invalid("batch-norm calibration needs data".into()));
        }
        let mut acc: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut chunks = 0usize;
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let xv = g.constant(x.select_rows(&idx));
            let (_, _, stats) = self.forward_impl(&mut g, &p, xv, Mode::Train);
            if acc.is_empty() {
                acc = stats
                    .iter()
                    .map(|s| (vec![0.0; g.value(s.mean).len()], vec![0.0; g.value(s.var).len()]))
                    .collect();
            }
            for (a, s) in acc.iter_mut().zip(&stats) {
                for (d, v) in a.0.iter_mut().zip(g.value(s.mean).data()) {
                    *d += v.as_f64();
                }
                for (d, v) in a.1.iter_mut().zip(g.value(s.var).data()) {
                    *d += v.as_f64();
                }
            }
            chunks += 1;
        }
        let bn_layers: Vec<usize> = (0..self.blocks.len())
            .filter(|&i| self.blocks[i].1 == BlockNorm::Batch)
            .map(|i| 2 * i + 1)
            .collect();
        for (li, (mean, var)) in bn_layers.into_iter().zip(acc) {
            let layer = &mut self.params.layers_mut()[li];
            let c = mean.len();
            let scale = 1.0 / chunks as f64;
            layer.tensors[2] = Tensor::from_f64(&[c], &mean.iter().map(|v| v * scale).collect::<Vec<_>>())?;
            layer.tensors[3] = Tensor::from_f64(&[c], &var.iter().map(|v| v * scale).collect::<Vec<_>>())?;
        }
        Ok(())
    }
}

impl<T: Element> Model<T> for Classifier<T> {
    type Batch = ImageBatch<T>;

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn check_batch(&self, batch: &ImageBatch<T>) -> synthaudit_nn::Result<()> {
        let s = batch.x.shape();
        if s.len() != 4 || s[3] != 3 || s[1] != s[2] || s[1] == 0 {
            return Err(NnError::ShapeMismatch(format!("classifier input {s:?}, expected [n, s, s, 3]")));
        }
        if let LayerKind::Linear { inputs, .. } = self.params.layers()[self.params.layer_count() - 2].spec.kind {
            let side = self.blocks.iter().fold(s[1], |acc, b| acc.div_ceil(b.0));
            if inputs != self.last_channels && inputs != self.last_channels * side * side {
                return Err(NnError::ShapeMismatch(format!(
                    "classifier input side {} does not match its dense layer",
                    s[1]
                )));
            }
        }
        if batch.targets.shape() != [s[0], N_TARGETS] {
            return Err(NnError::ShapeMismatch(format!(
                "targets {:?}, expected [{}, {N_TARGETS}]",
                batch.targets.shape(),
                s[0]
            )));
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph<T>, p: &Bound, batch: &ImageBatch<T>, mode: Mode) -> Forward {
        let x = g.constant(batch.x.clone());
        self.forward_features(g, p, x, mode).0
    }
}

// -------------------------------------------------------------------------
// generator and critic

/// What the GAN produces: square RGB images or plain vectors (toy mode).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleShape {
    Image { side: usize },
    Vector { dim: usize },
}

impl SampleShape {
    pub fn len(self) -> usize {
        match self {
            SampleShape::Image { side } => side * side * 3,
            SampleShape::Vector { dim } => dim,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn tensor_shape(self, n: usize) -> Vec<usize> {
        match self {
            SampleShape::Image { side } => vec![n, side, side, 3],
            SampleShape::Vector { dim } => vec![n, dim],
        }
    }

    /// Width of the last dense generator layer (images are produced at half
    /// resolution and upsampled).
    fn g_out(self) -> usize {
        match self {
            SampleShape::Image { side } => (side / 2) * (side / 2) * 3,
            SampleShape::Vector { dim } => dim,
        }
    }

    /// Width of the flattened critic input.
    fn d_in(self) -> usize {
        self.g_out()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanArch {
    pub z_dim: usize,
    pub g_hidden: usize,
    pub d_hidden: usize,
}

impl Default for GanArch {
    fn default() -> Self {
        Self {
            z_dim: 64,
            g_hidden: 256,
            d_hidden: 128,
        }
    }
}

pub const GENERATOR_MODEL: &str = "generator";
pub const CRITIC_MODEL: &str = "critic";

fn linear_dims<T: Element>(p: &ParamSet<T>, name: &str) -> Option<(usize, usize)> {
    let i = p.index_of(name)?;
    match p.layers()[i].spec.kind {
        LayerKind::Linear { inputs, outputs } => Some((inputs, outputs)),
        _ => None,
    }
}

/// `G(z, y)`: the latent and the conditioning code enter through separate
/// dense layers whose outputs are summed, so the conditional input weights
/// can be reinitialized on their own.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    params: ParamSet<T>,
    shape: SampleShape,
    z_dim: usize,
    code_dim: usize,
}

impl<T: Element> Generator<T> {
    pub fn new<R: Rng + ?Sized>(arch: &GanArch, shape: SampleShape, code_dim: usize, rng: &mut R) -> Result<Self> {
        if arch.z_dim == 0 || arch.g_hidden == 0 {
            return Err(Error::config("gan.arch", "z_dim and g_hidden must be positive"));
        }
        if let SampleShape::Image { side } = shape {
            if side < 2 || side % 2 != 0 {
                return Err(Error::config("corpus.side", "GAN images need an even side"));
            }
        }
        let h = arch.g_hidden;
        let mut p = ParamSet::new(GENERATOR_MODEL);
        p.push("latent_in", LayerKind::Linear { inputs: arch.z_dim, outputs: h }, rng);
        if code_dim > 0 {
            p.push("cond_in", LayerKind::Linear { inputs: code_dim, outputs: h }, rng);
        }
        p.push("g_fc", LayerKind::Linear { inputs: h, outputs: h }, rng);
        p.push("g_out", LayerKind::Linear { inputs: h, outputs: shape.g_out() }, rng);
        Self::from_params(p, shape)
    }

    pub fn from_params(params: ParamSet<T>, shape: SampleShape) -> Result<Self> {
        let bad = |m: &str| Error::Nn(NnError::InvalidArgument(format!("not a generator: {m}")));
        if params.model() != GENERATOR_MODEL {
            return Err(bad("model name"));
        }
        let (z_dim, _) = linear_dims(&params, "latent_in").ok_or_else(|| bad("latent_in"))?;
        let code_dim = linear_dims(&params, "cond_in").map_or(0, |d| d.0);
        let (_, out) = linear_dims(&params, "g_out").ok_or_else(|| bad("g_out"))?;
        if out != shape.g_out() {
            return Err(bad("output width does not match the sample shape"));
        }
        Ok(Self {
            params,
            shape,
            z_dim,
            code_dim,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn shape(&self) -> SampleShape {
        self.shape
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Samples `[n, ...]` from latents `z [n, z_dim]` and codes `[n, code_dim]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, z: Var, code: Var) -> Var {
        let mut i = 0;
        let mut h = linear(g, &p[i], z);
        i += 1;
        if self.code_dim > 0 {
            let c = linear(g, &p[i], code);
            h = g.add(h, c);
            i += 1;
        }
        h = leaky(g, h);
        h = linear(g, &p[i], h);
        h = leaky(g, h);
        let out = linear(g, &p[i + 1], h);
        let n = g.shape(z)[0];
        match self.shape {
            SampleShape::Image { side } => {
                let img = g.sigmoid(out);
                let img = g.reshape(img, &[n, side / 2, side / 2, 3]);
                upsample2(g, img)
            }
            SampleShape::Vector { .. } => out,
        }
    }

    /// Evaluates samples without recording gradients.
    pub fn sample(&self, z: &Tensor<T>, code: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let cv = g.constant(code.clone());
        let out = self.forward(&mut g, &p, zv, cv);
        g.value(out).clone()
    }
}

/// Critic with projection conditioning: `D(x, y) = w.h(x) + b + <E y, h(x)>`.
#[derive(Clone, Debug)]
pub struct Critic<T> {
    params: ParamSet<T>,
    shape: SampleShape,
    code_dim: usize,
}

impl<T: Element> Critic<T> {
    pub fn new<R: Rng + ?Sized>(arch: &GanArch, shape: SampleShape, code_dim: usize, rng: &mut R) -> Result<Self> {
        if arch.d_hidden == 0 {
            return Err(Error::config("gan.arch.d_hidden", "must be positive"));
        }
        let h = arch.d_hidden;
        let mut p = ParamSet::new(CRITIC_MODEL);
        p.push("d_fc1", LayerKind::Linear { inputs: shape.d_in(), outputs: h }, rng);
        p.push("d_fc2", LayerKind::Linear { inputs: h, outputs: h }, rng);
        p.push("d_out", LayerKind::Linear { inputs: h, outputs: 1 }, rng);
        if code_dim > 0 {
            p.push("embed", LayerKind::Linear { inputs: code_dim, outputs: h }, rng);
        }
        Self::from_params(p, shape)
    }

    pub fn from_params(params: ParamSet<T>, shape: SampleShape) -> Result<Self> {
        let bad = |m: &str| Error::Nn(NnError::InvalidArgument(format!("not a critic: {m}")));
        if params.model() != CRITIC_MODEL {
            return Err(bad("model name"));
        }
        let (d_in, _) = linear_dims(&params, "d_fc1").ok_or_else(|| bad("d_fc1"))?;
        if d_in != shape.d_in() {
            return Err(bad("input width does not match the sample shape"));
        }
        let code_dim = linear_dims(&params, "embed").map_or(0, |d| d.0);
        Ok(Self {
            params,
            shape,
            code_dim,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Critic values `[n, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, code: Var) -> Var {
        let n = g.shape(x)[0];
        let flat = match self.shape {
            SampleShape::Image { .. } => {
                let c = center(g, x);
                let pooled = avg_pool2(g, c);
                g.reshape(pooled, &[n, self.shape.d_in()])
            }
            SampleShape::Vector { .. } => x,
        };
        let mut h = linear(g, &p[0], flat);
        h = leaky(g, h);
        h = linear(g, &p[1], h);
        h = leaky(g, h);
        let mut out = linear(g, &p[2], h);
        if self.code_dim > 0 {
            let e = linear(g, &p[3], code);
            let prod = g.mul(h, e);
            let width = g.shape(h)[1];
            let proj = g.reduce_mid(prod, [n, width, 1]);
            out = g.add(out, proj);
        }
        out
    }
}

// -------------------------------------------------------------------------
// white-box attacker

/// Fixed-size white-box inputs of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackInput {
    /// `[layers, width]` activation summary.
    pub activations: Vec<f64>,
    /// `[layers, width]` gradient summary.
    pub gradients: Vec<f64>,
    pub loss: f64,
    pub label: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerArch {
    pub conv_channels: usize,
    pub grid_embed: usize,
    pub scalar_embed: usize,
    pub hidden: usize,
}

impl Default for AttackerArch {
    fn default() -> Self {
        Self {
            conv_channels: 8,
            grid_embed: 64,
            scalar_embed: 16,
            hidden: 64,
        }
    }
}

pub const ATTACKER_MODEL: &str = "attacker";

/// Batched attacker inputs; `grids` is `[n, layers, width, 2]` (activation and
/// gradient planes), `scalars` is `[n, 1 + label_len]`, `y` is membership.
#[derive(Clone, Debug)]
pub struct AttackBatch<T> {
    pub grids: Tensor<T>,
    pub scalars: Tensor<T>,
    pub y: Tensor<T>,
}

impl<T: Element> Batch for AttackBatch<T> {
    fn len(&self) -> usize {
        self.grids.rows()
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            grids: self.grids.select_rows(idx),
            scalars: self.scalars.select_rows(idx),
            y: self.y.select_rows(idx),
        }
    }
}

/// Convolutional encoders over the per-layer grids, dense encoders over the
/// loss and label, concatenated into a binary membership head. A frozen
/// standardization layer holds the feature normalization fitted on the
/// attack-train split.
#[derive(Clone, Debug)]
pub struct Attacker<T> {
    params: ParamSet<T>,
    layers: usize,
    width: usize,
    label_len: usize,
}

impl<T: Element> Attacker<T> {
    pub fn new<R: Rng + ?Sized>(
        arch: &AttackerArch,
        layers: usize,
        width: usize,
        label_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers < 2 || width < 2 || layers % 2 != 0 || width % 2 != 0 {
            return Err(Error::config("attack.whitebox", "feature grid sides must be even and at least 2"));
        }
        let grid = layers * width * 2;
        let mut p = ParamSet::new(ATTACKER_MODEL);
        p.push("norm_grid", LayerKind::Standardize { features: grid }, rng);
        p.push("norm_scalar", LayerKind::Standardize { features: 1 + label_len }, rng);
        p.push(
            "grid_conv",
            LayerKind::Conv2d {
                in_ch: 2,
                out_ch: arch.conv_channels,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            rng,
        );
        let pooled = layers / 2 * width / 2 * arch.conv_channels;
        p.push("grid_fc", LayerKind::Linear { inputs: pooled, outputs: arch.grid_embed }, rng);
        p.push("loss_fc", LayerKind::Linear { inputs: 1, outputs: arch.scalar_embed }, rng);
        p.push("label_fc", LayerKind::Linear { inputs: label_len, outputs: arch.scalar_embed }, rng);
        let joint = arch.grid_embed + 2 * arch.scalar_embed;
        p.push("joint_fc", LayerKind::Linear { inputs: joint, outputs: arch.hidden }, rng);
        p.push("member_out", LayerKind::Linear { inputs: arch.hidden, outputs: 1 }, rng);
        // start at p = 0.5 for every input
        let last = p.layer_count() - 1;
        for t in &mut p.layers_mut()[last].tensors {
            t.data_mut().fill(T::zero());
        }
        Ok(Self {
            params: p,
            layers,
            width,
            label_len,
        })
    }

    pub fn from_params(params: ParamSet<T>, layers: usize, width: usize, label_len: usize) -> Result<Self> {
        if params.model() != ATTACKER_MODEL
            || linear_dims(&params, "label_fc").map(|d| d.0) != Some(label_len)
            || params.layers()[0].spec.kind != (LayerKind::Standardize { features: layers * width * 2 })
        {
            return Err(Error::Nn(NnError::InvalidArgument("attacker architecture mismatch".into())));
        }
        Ok(Self {
            params,
            layers,
            width,
            label_len,
        })
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.layers, self.width)
    }

    /// Stores feature means and scales in the frozen normalization layers.
    pub fn set_normalization(&mut self, grid: (&[f64], &[f64]), scalar: (&[f64], &[f64])) -> Result<()> {
        for (layer, (mean, scale)) in [(0usize, grid), (1, scalar)] {
            let tensors = &mut self.params.layers_mut()[layer].tensors;
            if mean.len() != tensors[0].len() || scale.len() != tensors[1].len() {
                return Err(Error::Invalid("normalization width mismatch".into()));
            }
            for (d, &m) in tensors[0].data_mut().iter_mut().zip(mean) {
                *d = T::from_f64_lossy(m);
            }
            for (d, &s) in tensors[1].data_mut().iter_mut().zip(scale) {
                *d = T::from_f64_lossy(if s > 1e-12 { s } else { 1.0 });
            }
        }
        Ok(())
    }

    /// Packs inputs into a batch (`members` may be empty for scoring).
    pub fn batch(&self, inputs: &[&AttackInput], members: &[bool]) -> Result<AttackBatch<T>> {
        let n = inputs.len();
        let cells = self.layers * self.width;
        let mut grids = Vec::with_capacity(n * cells * 2);
        let mut scalars = Vec::with_capacity(n * (1 + self.label_len));
        for a in inputs {
            if a.activations.len() != cells || a.gradients.len() != cells || a.label.len() != self.label_len {
                return Err(Error::Invalid("attack input does not match the attacker grid".into()));
            }
            for (&act, &grad) in a.activations.iter().zip(&a.gradients) {
                grids.push(T::from_f64_lossy(act));
                grids.push(T::from_f64_lossy(grad));
            }
            scalars.push(T::from_f64_lossy(a.loss));
            scalars.extend(a.label.iter().map(|&v| T::from_f64_lossy(v)));
        }
        let y: Vec<T> = if members.is_empty() {
            vec![T::zero(); n]
        } else {
            members.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()
        };
        Ok(AttackBatch {
            grids: Tensor::new(vec![n, self.layers, self.width, 2], grids)?,
            scalars: Tensor::new(vec![n, 1 + self.label_len], scalars)?,
            y: Tensor::new(vec![n, 1], y)?,
        })
    }
}

impl<T: Element> Model<T> for Attacker<T> {
    type Batch = AttackBatch<T>;

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn check_batch(&self, b: &AttackBatch<T>) -> synthaudit_nn::Result<()> {
        let n = b.grids.rows();
        if b.grids.shape() != [n, self.layers, self.width, 2] || b.scalars.shape() != [n, 1 + self.label_len] {
            return Err(NnError::ShapeMismatch("attack batch does not match the attacker".into()));
        }
        Ok(())
    }

    /// Returns membership logits `[n, 1]`.
    fn forward(&self, g: &mut Graph<T>, p: &Bound, b: &AttackBatch<T>, _mode: Mode) -> Forward {
        let n = b.grids.rows();
        let grids = g.constant(b.grids.clone().reshape(&[n, self.layers * self.width * 2]).expect("grid"));
        let grids = standardize(g, &p[0], grids);
        let grids = g.reshape(grids, &[n, self.layers, self.width, 2]);
        let scalars = g.constant(b.scalars.clone());
        let scalars = standardize(g, &p[1], scalars);
        let loss = g.slice_cols(scalars, 0, 1);
        let label = g.slice_cols(scalars, 1, self.label_len);

        let c = conv2d(g, &p[2], grids, 3, 1, 1);
        let c = leaky(g, c);
        let c = avg_pool2(g, c);
        let width = g.value(c).len() / n;
        let c = g.reshape(c, &[n, width]);
        let eg = linear(g, &p[3], c);
        let eg = leaky(g, eg);
        let el = linear(g, &p[4], loss);
        let el = leaky(g, el);
        let ey = linear(g, &p[5], label);
        let ey = leaky(g, ey);
        let joint = g.concat_cols(eg, el);
        let joint = g.concat_cols(joint, ey);
        let h = linear(g, &p[6], joint);
        let h = leaky(g, h);
        let out = linear(g, &p[7], h);
        Forward {
            output: out,
            layer_outputs: vec![grids, scalars, c, eg, el, ey, h, out],
        }
    }
}
