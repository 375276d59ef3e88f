//! Parameterized layers and the building blocks that consume them.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::element::Element;
use crate::error::{NnError, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::tensor::Tensor;

/// What a parameterized layer computes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GroupNorm {
        groups: usize,
        channels: usize,
    },
    /// Batch-coupled normalization: scale, shift, then the running mean and
    /// variance used in eval mode (not trained by gradient).
    BatchNorm {
        channels: usize,
    },
    /// Frozen per-feature affine `(x - mean) / scale`, used for input standardization.
    Standardize {
        features: usize,
    },
}

impl LayerKind {
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Linear { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                vec![vec![kernel * kernel * in_ch, out_ch], vec![out_ch]]
            }
            LayerKind::GroupNorm { channels, .. } => vec![vec![channels], vec![channels]],
            LayerKind::BatchNorm { channels } => vec![vec![channels]; 4],
            LayerKind::Standardize { features } => vec![vec![features], vec![features]],
        }
    }

    pub fn trainable(&self) -> bool {
        !matches!(self, LayerKind::Standardize { .. })
    }

    /// Whether tensor `index` of the layer is updated by gradient steps.
    pub fn trainable_tensor(&self, index: usize) -> bool {
        match self {
            LayerKind::Standardize { .. } => false,
            LayerKind::BatchNorm { .. } => index < 2,
            _ => true,
        }
    }

    /// Whether the layer mixes statistics across the examples of a batch.
    pub fn batch_coupled(&self) -> bool {
        matches!(self, LayerKind::BatchNorm { .. })
    }
}

/// Name and kind of one layer; the ordered list is the architecture descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub model: String,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureDescriptor {
    /// Reports the first layer at which `other` differs from `self`.
    pub fn check_compatible(&self, other: &ArchitectureDescriptor) -> Result<()> {
        if self.model != other.model {
            return Err(NnError::ArchitectureMismatch {
                index: 0,
                layer: other
                    .layers
                    .first()
                    .map(|l| l.name.clone())
                    .unwrap_or_default(),
                detail: format!("model kind {} vs {}", other.model, self.model),
            });
        }
        for (i, (mine, theirs)) in self.layers.iter().zip(&other.layers).enumerate() {
            if mine != theirs {
                return Err(NnError::ArchitectureMismatch {
                    index: i,
                    layer: theirs.name.clone(),
                    detail: format!("found {:?}, expected {:?}", theirs, mine),
                });
            }
        }
        if self.layers.len() != other.layers.len() {
            let i = self.layers.len().min(other.layers.len());
            let layer = self
                .layers
                .get(i)
                .or_else(|| other.layers.get(i))
                .map(|l| l.name.clone())
                .unwrap_or_default();
            return Err(NnError::ArchitectureMismatch {
                index: i,
                layer,
                detail: format!(
                    "layer count {} vs expected {}",
                    other.layers.len(),
                    self.layers.len()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub tensors: Vec<Tensor<T>>,
}

/// Named, ordered layers with their parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    model: String,
    layers: Vec<Layer<T>>,
}

/// Per-layer variables bound into a graph, mirroring a [`ParamSet`].
pub type Bound = Vec<Vec<Var>>;

impl<T: Element> ParamSet<T> {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            layers: Vec::new(),
        }
    }

    /// Appends a layer with default initialization and returns its index.
    pub fn push<R: Rng + ?Sized>(&mut self, name: &str, kind: LayerKind, rng: &mut R) -> usize {
        let tensors = init_layer(&kind, rng);
        self.layers.push(Layer {
            spec: LayerSpec {
                name: name.to_string(),
                kind,
            },
            tensors,
        });
        self.layers.len() - 1
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.spec.name == name)
    }

    pub fn descriptor(&self) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            model: self.model.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.tensors.iter())
            .map(|t| t.len())
            .sum()
    }

    /// Binds every tensor as a differentiable leaf (frozen layers as constants).
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, true)
    }

    /// Binds every tensor as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.layers
            .iter()
            .map(|l| {
                l.tensors
                    .iter()
                    .enumerate()
                    .map(|(ti, t)| {
                        if trainable && l.spec.kind.trainable_tensor(ti) {
                            g.param(t.clone())
                        } else {
                            g.constant(t.clone())
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Reinitializes one layer in place.
    pub fn reinit_layer<R: Rng + ?Sized>(&mut self, index: usize, rng: &mut R) {
        let kind = self.layers[index].spec.kind.clone();
        self.layers[index].tensors = init_layer(&kind, rng);
    }

    /// Copies parameters from `other` after checking the architecture matches.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.descriptor().check_compatible(&other.descriptor())?;
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            mine.tensors = theirs.tensors.clone();
        }
        Ok(())
    }

    /// Flattened parameter values in layer order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.layers.iter().flat_map(|l| l.tensors.iter()) {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut off = 0;
        for t in self.layers.iter_mut().flat_map(|l| l.tensors.iter_mut()) {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Hex SHA-256 of the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.param_count() * T::DTYPE.size());
        for v in self.flatten() {
            v.write_le(&mut bytes);
        }
        hex::encode(Sha256::digest(&bytes))
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            model: self.model.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    tensors: l.tensors.iter().map(|t| t.cast()).collect(),
                })
                .collect(),
        }
    }

    pub(crate) fn from_parts(model: String, layers: Vec<Layer<T>>) -> Self {
        Self { model, layers }
    }
}

fn init_layer<T: Element, R: Rng + ?Sized>(kind: &LayerKind, rng: &mut R) -> Vec<Tensor<T>> {
    let shapes = kind.param_shapes();
    match *kind {
        LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
            let fan_in = match *kind {
                LayerKind::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
                LayerKind::Linear { inputs, .. } => inputs,
                _ => unreachable!(),
            };
            // leaky-relu friendly uniform init
            let bound = (3.0f64 / fan_in.max(1) as f64).sqrt() * 1.41;
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let n: usize = shapes[0].iter().product();
            let w: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
            vec![
                Tensor::from_f64(&shapes[0], &w).expect("shape"),
                Tensor::zeros(&shapes[1]),
            ]
        }
        LayerKind::GroupNorm { .. } => vec![
            Tensor::full(&shapes[0], T::one()),
            Tensor::zeros(&shapes[1]),
        ],
        LayerKind::Standardize { .. } => vec![
            Tensor::zeros(&shapes[0]),
            Tensor::full(&shapes[1], T::one()),
        ],
        LayerKind::BatchNorm { .. } => vec![
            Tensor::full(&shapes[0], T::one()),
            Tensor::zeros(&shapes[1]),
            Tensor::zeros(&shapes[2]),
            Tensor::full(&shapes[3], T::one()),
        ],
    }
}

// -------------------------------------------------------------------------
// functional building blocks

/// `x [m, in] · W + b`.
pub fn linear<T: Element>(g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
    let y = g.matmul(x, p[0]);
    g.add_row(y, p[1])
}

/// 2-D convolution on NHWC input via patch extraction.
pub fn conv2d<T: Element>(
    g: &mut Graph<T>,
    p: &[Var],
    x: Var,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Var {
    let s = g.shape(x).to_vec();
    assert_eq!(s.len(), 4, "conv2d expects NHWC input, got {s:?}");
    let geom = ConvGeom {
        n: s[0],
        h: s[1],
        w: s[2],
        c: s[3],
        k: kernel,
        stride,
        pad: padding,
    };
    let cols = g.im2col(x, geom);
    let y = g.matmul(cols, p[0]);
    let y = g.add_row(y, p[1]);
    let out_ch = g.shape(p[1])[0];
    g.reshape(y, &[geom.n, geom.out_h(), geom.out_w(), out_ch])
}

/// Group normalization over NHWC (or `[N, C]`) input; statistics never mix examples.
pub fn group_norm<T: Element>(g: &mut Graph<T>, p: &[Var], x: Var, groups: usize, eps: f64) -> Var {
    let shape = g.shape(x).to_vec();
    let n = shape[0];
    let c = *shape.last().unwrap();
    let spatial = g.value(x).len() / (n * c);
    assert!(
        groups > 0 && c % groups == 0,
        "channels {c} not divisible by groups {groups}"
    );
    let cg = c / groups;
    let count = T::from_usize(spatial * cg).unwrap();

    let group_mean = |g: &mut Graph<T>, v: Var| {
        let a = g.reduce_mid(v, [n * spatial * groups, cg, 1]);
        let b = g.reduce_mid(a, [n, spatial, groups]);
        g.scale(b, T::one() / count)
    };
    let expand = |g: &mut Graph<T>, v: Var| {
        let a = g.broadcast_mid(v, [n, spatial, groups], &[n * spatial * groups]);
        g.broadcast_mid(a, [n * spatial * groups, cg, 1], &shape)
    };

    let mean = group_mean(g, x);
    let mean_b = expand(g, mean);
    let centered = g.sub(x, mean_b);
    let sq = g.square(centered);
    let var = group_mean(g, sq);
    let var = g.add_scalar(var, T::from_f64_lossy(eps));
    let inv = g.rsqrt(var);
    let inv_b = expand(g, inv);
    let xn = g.mul(centered, inv_b);
    let y = g.mul_row(xn, p[0]);
    g.add_row(y, p[1])
}

/// Batch statistics of a [`batch_norm`] call in train mode.
#[derive(Clone, Copy, Debug)]
pub struct BatchStats {
    pub mean: Var,
    pub var: Var,
}

/// Batch normalization over every axis but the last (channels).
///
/// `p` holds scale, shift, running mean and running variance. In train mode
/// the batch statistics are used and returned; otherwise the running ones.
pub fn batch_norm<T: Element>(
    g: &mut Graph<T>,
    p: &[Var],
    x: Var,
    train: bool,
    eps: f64,
) -> (Var, Option<BatchStats>) {
    let shape = g.shape(x).to_vec();
    let c = *shape.last().unwrap();
    let rows = g.value(x).len() / c;
    let (normed, stats) = if train {
        let inv_n = T::one() / T::from_usize(rows).unwrap();
        let s = g.reduce_mid(x, [1, rows, c]);
        let mean = g.scale(s, inv_n);
        let mean_b = g.broadcast_mid(mean, [1, rows, c], &shape);
        let centered = g.sub(x, mean_b);
        let sq = g.square(centered);
        let ss = g.reduce_mid(sq, [1, rows, c]);
        let var = g.scale(ss, inv_n);
        let ve = g.add_scalar(var, T::from_f64_lossy(eps));
        let inv = g.rsqrt(ve);
        let inv_b = g.broadcast_mid(inv, [1, rows, c], &shape);
        (g.mul(centered, inv_b), Some(BatchStats { mean, var }))
    } else {
        let mean = g.value(p[2]).clone();
        let var = g.value(p[3]).clone();
        let neg: Vec<T> = (0..rows).flat_map(|_| mean.data().iter().map(|&m| -m)).collect();
        let inv: Vec<T> = (0..rows)
            .flat_map(|_| {
                var.data()
                    .iter()
                    .map(|&v| T::one() / (v + T::from_f64_lossy(eps)).sqrt())
            })
            .collect();
        let off = g.constant(Tensor::new(shape.clone(), neg).expect("shape"));
        let centered = g.add(x, off);
        (g.mul_const(centered, std::sync::Arc::new(inv)), None)
    };
    let y = g.mul_row(normed, p[0]);
    (g.add_row(y, p[1]), stats)
}

/// Frozen standardization `(x - mean) / scale` over the last axis.
pub fn standardize<T: Element>(g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
    let mean = g.value(p[0]).clone();
    let scale = g.value(p[1]).clone();
    let shape = g.shape(x).to_vec();
    let f = *shape.last().unwrap();
    let rows = g.value(x).len() / f;
    let neg_mean: Vec<T> = (0..rows)
        .flat_map(|_| mean.data().iter().map(|&m| -m))
        .collect();
    let inv: Vec<T> = (0..rows)
        .flat_map(|_| scale.data().iter().map(|&s| T::one() / s))
        .collect();
    let off = g.constant(Tensor::new(shape.clone(), neg_mean).expect("shape"));
    let centered = g.add(x, off);
    g.mul_const(centered, std::sync::Arc::new(inv))
}

/// 2x2 average pooling on NHWC input with even spatial size.
pub fn avg_pool2<T: Element>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sides");
    // rows: [n*h/2, 2, w*c] then columns: [n*h/2*w/2, 2, c]
    let a = g.reduce_mid(x, [n * h / 2, 2, w * c]);
    let b = g.reduce_mid(a, [n * h / 2 * w / 2, 2, c]);
    let b = g.scale(b, T::from_f64_lossy(0.25));
    g.reshape(b, &[n, h / 2, w / 2, c])
}

/// Nearest-neighbour 2x upsampling on NHWC input.
pub fn upsample2<T: Element>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let a = g.broadcast_mid(x, [n * h * w, 2, c], &[n * h * w * 2 * c]);
    g.broadcast_mid(a, [n * h, 2, w * 2 * c], &[n, 2 * h, 2 * w, c])
}

/// Mean over spatial positions, `[N,H,W,C] -> [N,C]`.
pub fn global_avg_pool<T: Element>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
    let r = g.reduce_mid(x, [n, hw, c]);
    g.scale(r, T::one() / T::from_usize(hw).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new("t");
        ps.push(
            "gn",
            LayerKind::GroupNorm {
                groups: 2,
                channels: 4,
            },
            &mut rng,
        );
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let data: Vec<f64> = (0..2 * 3 * 3 * 4)
            .map(|i| ((i * 7919) % 23) as f64)
            .collect();
        let x = g.constant(Tensor::from_f64(&[2, 3, 3, 4], &data).unwrap());
        let y = group_norm(&mut g, &p[0], x, 2, 1e-5);
        let v = g.value(y).data();
        for n in 0..2 {
            for grp in 0..2 {
                let vals: Vec<f64> = (0..9)
                    .flat_map(|s| (0..2).map(move |cc| (n, s, grp * 2 + cc)))
                    .map(|(n, s, c)| v[(n * 9 + s) * 4 + c])
                    .collect();
                let m = vals.iter().sum::<f64>() / 18.0;
                let var = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 18.0;
                assert!(m.abs() < 1e-9);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn batch_norm_train_and_eval_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new("t");
        ps.push("bn", LayerKind::BatchNorm { channels: 2 }, &mut rng);
        let data: Vec<f64> = (0..3 * 2 * 2 * 2).map(|i| ((i * 31) % 11) as f64).collect();
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        assert!(g.requires_grad(p[0][0]) && !g.requires_grad(p[0][2]));
        let x = g.constant(Tensor::from_f64(&[3, 2, 2, 2], &data).unwrap());
        let (y, stats) = batch_norm(&mut g, &p[0], x, true, 1e-5);
        let stats = stats.unwrap();
        let v = g.value(y).data().to_vec();
        for c in 0..2 {
            let col: Vec<f64> = v.iter().skip(c).step_by(2).copied().collect();
            let m = col.iter().sum::<f64>() / 12.0;
            let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-9 && (var - 1.0).abs() < 1e-4);
        }
        // eval with the batch statistics installed reproduces train mode
        let mean = g.value(stats.mean).clone();
        let var = g.value(stats.var).clone();
        ps.layers_mut()[0].tensors[2] = mean.reshape(&[2]).unwrap();
        ps.layers_mut()[0].tensors[3] = var.reshape(&[2]).unwrap();
        let mut g2 = Graph::new();
        let p2 = ps.bind_frozen(&mut g2);
        let x2 = g2.constant(Tensor::from_f64(&[3, 2, 2, 2], &data).unwrap());
        let (y2, none) = batch_norm(&mut g2, &p2[0], x2, false, 1e-5);
        assert!(none.is_none());
        for (a, b) in v.iter().zip(g2.value(y2).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f64> = (0..2 * 4 * 4 * 3).map(|i| i as f64).collect();
        let x = g.constant(Tensor::from_f64(&[2, 4, 4, 3], &data).unwrap());
        let p = avg_pool2(&mut g, x);
        assert_eq!(g.shape(p), &[2, 2, 2, 3]);
        // top-left block of channel 0: pixels (0,0),(0,1),(1,0),(1,1)
        let expect = (0.0 + 3.0 + 12.0 + 15.0) / 4.0;
        assert!((g.value(p).data()[0] - expect).abs() < 1e-6);
        let u = upsample2(&mut g, p);
        assert_eq!(g.shape(u), &[2, 4, 4, 3]);
        assert_eq!(g.value(u).data()[0], g.value(u).data()[3 * 5]);
    }

    #[test]
    fn descriptor_mismatch_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamSet::<f32>::new("m");
        a.push(
            "fc1",
            LayerKind::Linear {
                inputs: 3,
                outputs: 4,
            },
            &mut rng,
        );
        a.push(
            "fc2",
            LayerKind::Linear {
                inputs: 4,
                outputs: 1,
            },
            &mut rng,
        );
        let mut b = ParamSet::<f32>::new("m");
        b.push(
            "fc1",
            LayerKind::Linear {
                inputs: 3,
                outputs: 4,
            },
            &mut rng,
        );
        b.push(
            "fc2",
            LayerKind::Linear {
                inputs: 4,
                outputs: 2,
            },
            &mut rng,
        );
        let err = a.load_from(&b).unwrap_err().to_string();
        assert!(err.contains("fc2"), "{err}");
    }
}
