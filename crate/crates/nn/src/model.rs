//! The differentiable-model contract and the gradient utilities built on it.

use crate::element::Element;
use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Forward-pass mode. Batch-coupled normalization uses batch statistics in
/// `Train` and running statistics in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    /// One output per parameterized layer, in layer order.
    pub layer_outputs: Vec<Var>,
}

/// A batch whose leading axis indexes examples.
pub trait Batch: Sized {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Self;
}

pub trait Model<T: Element>: Send + Sync {
    type Batch: Batch;

    fn params(&self) -> &ParamSet<T>;

    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// Rejects batches whose shapes do not match the input signature.
    fn check_batch(&self, batch: &Self::Batch) -> Result<()>;

    fn forward(&self, g: &mut Graph<T>, p: &Bound, batch: &Self::Batch, mode: Mode) -> Forward;
}

/// Per-layer, per-tensor parameter gradients.
pub type Grads<T> = Vec<Vec<Tensor<T>>>;

#[derive(Clone, Debug)]
pub struct GradientBundle<T> {
    pub loss: T,
    pub grads: Grads<T>,
    /// Layer outputs, when requested.
    pub activations: Option<Vec<Tensor<T>>>,
}

impl<T: Element> GradientBundle<T> {
    pub fn sq_norm(&self) -> T {
        self.grads.iter().flatten().map(|t| t.sq_norm()).sum()
    }

    pub fn norm(&self) -> T {
        self.sq_norm().sqrt()
    }
}

/// White-box features of one example: the last `k` layers' outputs and
/// parameter gradients, the scalar loss and the label encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackFeatureBundle<T> {
    pub layer_names: Vec<String>,
    pub activations: Vec<Tensor<T>>,
    pub gradients: Vec<Vec<Tensor<T>>>,
    pub loss: T,
    pub label: Vec<T>,
}

/// Collects gradients for all layers from `wrt` vars after `Graph::grad`.
pub fn read_grads<T: Element>(g: &Graph<T>, bound: &Bound, flat: &[Var]) -> Grads<T> {
    let mut it = flat.iter();
    bound
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|_| {
                    g.value(*it.next().expect("one gradient per bound tensor"))
                        .clone()
                })
                .collect()
        })
        .collect()
}

pub fn flat_vars(bound: &Bound) -> Vec<Var> {
    bound.iter().flatten().copied().collect()
}

fn run<T, M, F>(
    model: &M,
    batch: &M::Batch,
    loss_fn: &F,
    keep_activations: bool,
    mode: Mode,
) -> Result<GradientBundle<T>>
where
    T: Element,
    M: Model<T>,
    F: Fn(&mut Graph<T>, &Forward, &M::Batch) -> Var,
{
    model.check_batch(batch)?;
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let fwd = model.forward(&mut g, &bound, batch, mode);
    let loss = loss_fn(&mut g, &fwd, batch);
    let loss_value = g.scalar(loss);
    if !loss_value.is_finite() {
        return Err(NnError::NonFinite {
            what: "loss".into(),
        });
    }
    let flat = flat_vars(&bound);
    let gv = g.grad(loss, &flat, false)?;
    let grads = read_grads(&g, &bound, &gv);
    let activations = keep_activations.then(|| {
        fwd.layer_outputs
            .iter()
            .map(|&v| g.value(v).clone())
            .collect()
    });
    Ok(GradientBundle {
        loss: loss_value,
        grads,
        activations,
    })
}

/// Loss and parameter gradients of `loss_fn` on `batch`.
pub fn loss_and_grad<T, M, F>(model: &M, batch: &M::Batch, loss_fn: &F) -> Result<GradientBundle<T>>
where
    T: Element,
    M: Model<T>,
    F: Fn(&mut Graph<T>, &Forward, &M::Batch) -> Var,
{
    run(model, batch, loss_fn, false, Mode::Train)
}

/// Per-example gradients, each computed on its example alone.
pub fn per_sample_grads<T, M, F>(
    model: &M,
    batch: &M::Batch,
    loss_fn: &F,
) -> Result<Vec<GradientBundle<T>>>
where
    T: Element,
    M: Model<T>,
    F: Fn(&mut Graph<T>, &Forward, &M::Batch) -> Var,
{
    if batch.is_empty() {
        return Err(NnError::InvalidArgument(
            "per-sample gradients need a nonempty batch".into(),
        ));
    }
    (0..batch.len())
        .map(|i| run(model, &batch.select(&[i]), loss_fn, false, Mode::Train))
        .collect()
}

/// L2 norms of the per-example gradients.
pub fn per_sample_grad_norms<T, M, F>(model: &M, batch: &M::Batch, loss_fn: &F) -> Result<Vec<T>>
where
    T: Element,
    M: Model<T>,
    F: Fn(&mut Graph<T>, &Forward, &M::Batch) -> Var,
{
    Ok(per_sample_grads(model, batch, loss_fn)?
        .iter()
        .map(|b| b.norm())
        .collect())
}

/// Forward/backward features of a single example restricted to the last
/// `last_k` layers, taken in eval mode.
pub fn capture_layer_features<T, M, F>(
    model: &M,
    example: &M::Batch,
    loss_fn: &F,
    last_k: usize,
    label: Vec<T>,
) -> Result<AttackFeatureBundle<T>>
where
    T: Element,
    M: Model<T>,
    F: Fn(&mut Graph<T>, &Forward, &M::Batch) -> Var,
{
    let layers = model.params().layer_count();
    if last_k == 0 || last_k > layers {
        return Err(NnError::InvalidArgument(format!(
            "last_k = {last_k} but the model has {layers} layers"
        )));
    }
    if example.len() != 1 {
        return Err(NnError::InvalidArgument(format!(
            "feature capture takes one example, got {}",
            example.len()
        )));
    }
    let bundle = run(model, example, loss_fn, true, Mode::Eval)?;
    let start = layers - last_k;
    let activations = bundle.activations.expect("requested activations");
    Ok(AttackFeatureBundle {
        layer_names: model.params().layers()[start..]
            .iter()
            .map(|l| l.spec.name.clone())
            .collect(),
        activations: activations[start..].to_vec(),
        gradients: bundle.grads[start..].to_vec(),
        loss: bundle.loss,
        label,
    })
}

/// Evaluates the model output without recording gradients.
pub fn predict<T, M>(model: &M, batch: &M::Batch) -> Result<Tensor<T>>
where
    T: Element,
    M: Model<T>,
{
    model.check_batch(batch)?;
    let mut g = Graph::new();
    let bound = model.params().bind_frozen(&mut g);
    let fwd = model.forward(&mut g, &bound, batch, Mode::Eval);
    Ok(g.value(fwd.output).clone())
}

/// Output and all layer outputs, without gradients.
pub fn predict_with_layers<T, M>(model: &M, batch: &M::Batch) -> Result<(Tensor<T>, Vec<Tensor<T>>)>
where
    T: Element,
    M: Model<T>,
{
    model.check_batch(batch)?;
    let mut g = Graph::new();
    let bound = model.params().bind_frozen(&mut g);
    let fwd = model.forward(&mut g, &bound, batch, Mode::Eval);
    let layers = fwd
        .layer_outputs
        .iter()
        .map(|&v| g.value(v).clone())
        .collect();
    Ok((g.value(fwd.output).clone(), layers))
}
