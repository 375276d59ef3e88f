//! First-order optimizers.

use crate::element::Element;
use crate::error::{NnError, Result};
use crate::layers::ParamSet;
use crate::model::Grads;
use crate::tensor::Tensor;

pub trait Optimizer<T: Element> {
    fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()>;

    /// Number of updates applied so far.
    fn steps(&self) -> u64;
}

fn check_grads<T: Element>(params: &ParamSet<T>, grads: &Grads<T>) -> Result<()> {
    if grads.len() != params.layer_count() {
        return Err(NnError::ShapeMismatch(format!(
            "{} gradient layers for {} parameter layers",
            grads.len(),
            params.layer_count()
        )));
    }
    for (layer, g) in params.layers().iter().zip(grads) {
        for (t, gt) in layer.tensors.iter().zip(g) {
            if t.shape() != gt.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "gradient {:?} for parameter {:?} in {}",
                    gt.shape(),
                    t.shape(),
                    layer.spec.name
                )));
            }
            if !gt.is_finite() {
                return Err(NnError::NonFinite {
                    what: format!("gradient in layer {}", layer.spec.name),
                });
            }
        }
    }
    Ok(())
}

fn zeros_like<T: Element>(params: &ParamSet<T>) -> Vec<Vec<Tensor<T>>> {
    params
        .layers()
        .iter()
        .map(|l| l.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect())
        .collect()
}

/// Stochastic gradient descent with optional momentum and L2 weight decay.
///
/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Option<Vec<Vec<Tensor<T>>>>,
    steps: u64,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(NnError::InvalidArgument(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        Ok(Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            velocity: None,
            steps: 0,
        })
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

impl<T: Element> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()> {
        check_grads(params, grads)?;
        let lr = T::from_f64_lossy(self.lr);
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        if self.momentum != 0.0 && self.velocity.is_none() {
            self.velocity = Some(zeros_like(params));
        }
        for (li, layer) in params.layers_mut().iter_mut().enumerate() {
            if !layer.spec.kind.trainable() {
                continue;
            }
            for (ti, t) in layer.tensors.iter_mut().enumerate() {
                if !layer.spec.kind.trainable_tensor(ti) {
                    continue;
                }
                let g = grads[li][ti].data();
                match self.velocity.as_mut() {
                    Some(vel) => {
                        let v = vel[li][ti].data_mut();
                        for ((w, &gi), vi) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                            *vi = mu * *vi + gi + wd * *w;
                            *w = *w - lr * *vi;
                        }
                    }
                    None => {
                        for (w, &gi) in t.data_mut().iter_mut().zip(g) {
                            *w = *w - lr * (gi + wd * *w);
                        }
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.steps
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Option<Vec<Vec<Tensor<T>>>>,
    v: Option<Vec<Vec<Tensor<T>>>>,
    steps: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(NnError::InvalidArgument(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: None,
            v: None,
            steps: 0,
        })
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

impl<T: Element> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.is_none() {
            self.m = Some(zeros_like(params));
            self.v = Some(zeros_like(params));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(self.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        let wd = T::from_f64_lossy(self.weight_decay);
        let (ms, vs) = (self.m.as_mut().unwrap(), self.v.as_mut().unwrap());
        for (li, layer) in params.layers_mut().iter_mut().enumerate() {
            if !layer.spec.kind.trainable() {
                continue;
            }
            for (ti, w) in layer.tensors.iter_mut().enumerate() {
                if !layer.spec.kind.trainable_tensor(ti) {
                    continue;
                }
                let g = grads[li][ti].data();
                let m = ms[li][ti].data_mut();
                let v = vs[li][ti].data_mut();
                for i in 0..g.len() {
                    let w_i = &mut w.data_mut()[i];
                    let gi = g[i] + wd * *w_i;
                    m[i] = b1 * m[i] + one_b1 * gi;
                    v[i] = b2 * v[i] + one_b2 * gi * gi;
                    *w_i = *w_i - step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
                }
            }
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(w: f64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new("q");
        p.push(
            "w",
            LayerKind::Linear {
                inputs: 1,
                outputs: 1,
            },
            &mut rng,
        );
        p.set_flat(&[w, 0.0]).unwrap();
        p
    }

    fn grad_of_quadratic(p: &ParamSet<f64>) -> Grads<f64> {
        // loss (w - 3)^2 on the weight only
        let w = p.flatten()[0];
        vec![vec![
            Tensor::from_f64(&[1, 1], &[2.0 * (w - 3.0)]).unwrap(),
            Tensor::zeros(&[1]),
        ]]
    }

    #[test]
    fn sgd_single_step_on_quadratic() {
        let mut p = one_param(0.0);
        let mut opt = Sgd::new(0.1).unwrap();
        let g = grad_of_quadratic(&p);
        opt.step(&mut p, &g).unwrap();
        assert!((p.flatten()[0] - 0.6).abs() < 1e-12);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn sgd_momentum_matches_recurrence() {
        // v1 = g0, w1 = w0 - lr v1; v2 = 0.9 v1 + g1, w2 = w1 - lr v2
        let (lr, mu) = (0.1, 0.9);
        let mut p = one_param(0.0);
        let mut opt = Sgd::new(lr).unwrap().with_momentum(mu);
        let g0 = 2.0 * (0.0 - 3.0);
        let v1 = g0;
        let w1 = 0.0 - lr * v1;
        let g1 = 2.0 * (w1 - 3.0);
        let v2 = mu * v1 + g1;
        let w2 = w1 - lr * v2;
        for _ in 0..2 {
            let g = grad_of_quadratic(&p);
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p.flatten()[0] - w2).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one_param(1.5);
        let before = p.clone();
        let zeros = vec![vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])]];
        Sgd::new(0.5).unwrap().step(&mut p, &zeros).unwrap();
        assert_eq!(p, before);
        Adam::new(0.5).unwrap().step(&mut p, &zeros).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Sgd::<f64>::new(0.0).is_err());
        assert!(Adam::<f64>::new(-1.0).is_err());
        let mut p = one_param(0.0);
        let bad = vec![vec![
            Tensor::from_f64(&[1, 1], &[f64::NAN]).unwrap(),
            Tensor::zeros(&[1]),
        ]];
        assert!(matches!(
            Sgd::new(0.1).unwrap().step(&mut p, &bad),
            Err(NnError::NonFinite { .. })
        ));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one_param(0.0);
        let mut opt = Adam::new(0.01).unwrap();
        let g = grad_of_quadratic(&p);
        opt.step(&mut p, &g).unwrap();
        assert!((p.flatten()[0] - 0.01).abs() < 1e-6);
    }
}
