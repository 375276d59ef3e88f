//! Hybrid multi-task loss, as plain functions and as graph expressions.
//!
//! Violence and attribute terms average over protest-positive examples only;
//! an all-negative batch contributes 0 for both.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use synthaudit_nn::{Element, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::models::N_TARGETS;

/// Probabilities are kept this far from 0 and 1 inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn bce(y: f64, p: f64) -> f64 {
    let p = clamp_p(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Invalid(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Mean binary cross-entropy of protest scores.
pub fn protest_loss(y: &[f64], p: &[f64]) -> Result<f64> {
    same_len(y.len(), p.len())?;
    if y.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    Ok(y.iter().zip(p).map(|(&y, &p)| bce(y, p)).sum::<f64>() / y.len() as f64)
}

/// Mean squared violence error over unmasked examples.
pub fn violence_loss(v: &[f64], v_hat: &[f64], mask: &[bool]) -> Result<f64> {
    same_len(v.len(), v_hat.len())?;
    same_len(v.len(), mask.len())?;
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        tracing::warn!("violence loss: every example is masked");
        return Ok(0.0);
    }
    let s: f64 = v
        .iter()
        .zip(v_hat)
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|((a, b), _)| (a - b).powi(2))
        .sum();
    Ok(s / m as f64)
}

/// Attribute cross-entropy summed over attributes, averaged over unmasked examples.
pub fn attribute_loss(y: &[Vec<f64>], p: &[Vec<f64>], mask: &[bool]) -> Result<f64> {
    same_len(y.len(), p.len())?;
    same_len(y.len(), mask.len())?;
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        tracing::warn!("attribute loss: every example is masked");
        return Ok(0.0);
    }
    let mut s = 0.0;
    for ((ys, ps), &keep) in y.iter().zip(p).zip(mask) {
        same_len(ys.len(), ps.len())?;
        if keep {
            s += ys.iter().zip(ps).map(|(&a, &b)| bce(a, b)).sum::<f64>();
        }
    }
    Ok(s / m as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridWeights {
    pub protest: f64,
    pub violence: f64,
    pub attributes: f64,
}

impl Default for HybridWeights {
    fn default() -> Self {
        Self {
            protest: 1.0,
            violence: 10.0,
            attributes: 5.0,
        }
    }
}

impl HybridWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("protest", self.protest),
            ("violence", self.violence),
            ("attributes", self.attributes),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("downstream.weights.{name}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub protest: f64,
    pub violence: f64,
    pub attributes: f64,
}

pub fn hybrid_loss(c: LossComponents, w: HybridWeights) -> f64 {
    w.protest * c.protest + w.violence * c.violence + w.attributes * c.attributes
}

/// Graph variables of the weighted loss and its unweighted components.
#[derive(Clone, Copy, Debug)]
pub struct HybridVars {
    pub total: Var,
    pub protest: Var,
    pub violence: Var,
    pub attributes: Var,
}

/// Hybrid loss on logits `[n, 12]` (protest, violence, attributes) against
/// targets `[n, 12]`. The violence head is squashed with a sigmoid.
pub fn hybrid_loss_graph<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &Tensor<T>,
    w: HybridWeights,
) -> HybridVars {
    let n = targets.rows();
    let t = targets.data();
    let mask: Vec<bool> = (0..n).map(|i| t[i * N_TARGETS] > T::from_f64_lossy(0.5)).collect();
    let m = mask.iter().filter(|&&b| b).count();
    let inv_m = if m == 0 { 0.0 } else { 1.0 / m as f64 };
    let inv_n = 1.0 / n as f64;

    // per-element selection weights
    let mut w_p = vec![T::zero(); n * N_TARGETS];
    let mut w_v = vec![T::zero(); n * N_TARGETS];
    let mut w_a = vec![T::zero(); n * N_TARGETS];
    for i in 0..n {
        w_p[i * N_TARGETS] = T::from_f64_lossy(inv_n);
        if mask[i] {
            w_v[i * N_TARGETS + 1] = T::from_f64_lossy(inv_m);
            for j in 2..N_TARGETS {
                w_a[i * N_TARGETS + j] = T::from_f64_lossy(inv_m);
            }
        }
    }

    // BCE through logits; clamping the logit equals clamping the probability
    let bound = T::from_f64_lossy(((1.0 - PROB_EPS) / PROB_EPS).ln());
    let z = g.clamp(logits, -bound, bound);
    let y = g.constant(targets.clone());
    let sp = g.softplus(z);
    let yz = g.mul(y, z);
    let bce_all = g.sub(sp, yz);

    let lp = g.mul_const(bce_all, Arc::new(w_p));
    let protest = g.sum(lp);
    let la = g.mul_const(bce_all, Arc::new(w_a));
    let attributes = g.sum(la);

    let s = g.sigmoid(logits);
    let d = g.sub(s, y);
    let d2 = g.square(d);
    let lv = g.mul_const(d2, Arc::new(w_v));
    let violence = g.sum(lv);

    let a = g.scale(protest, T::from_f64_lossy(w.protest));
    let b = g.scale(violence, T::from_f64_lossy(w.violence));
    let c = g.scale(attributes, T::from_f64_lossy(w.attributes));
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    HybridVars {
        total,
        protest,
        violence,
        attributes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert!((protest_loss(&[1.0], &[0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((protest_loss(&[1.0, 0.0], &[0.9, 0.1]).unwrap() - 0.105_360_5).abs() < 1e-6);
        assert_eq!(violence_loss(&[0.5], &[0.25], &[true]).unwrap(), 0.0625);
        assert_eq!(violence_loss(&[0.5], &[0.25], &[false]).unwrap(), 0.0);
        let l = attribute_loss(&[vec![1.0; 10]], &[vec![0.5; 10]], &[true]).unwrap();
        assert!((l - 10.0 * 2f64.ln()).abs() < 1e-12);
        let c = LossComponents {
            protest: 0.1,
            violence: 0.02,
            attributes: 0.3,
        };
        assert!((hybrid_loss(c, HybridWeights::default()) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn graph_matches_scalar_losses() {
        let logits = [0.3, -1.2, 2.0, 0.1, -0.5, 0.7, 1.1, -2.2, 0.0, 0.4, -0.9, 1.5];
        let mut targets = vec![1.0, 0.4, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let mut lg = logits.to_vec();
        lg.extend(logits.iter().map(|v| -v));
        targets.extend([0.0; 12]);
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[2, 12], &lg).unwrap());
        let t = Tensor::from_f64(&[2, 12], &targets).unwrap();
        let h = hybrid_loss_graph(&mut g, z, &t, HybridWeights::default());
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let p: Vec<f64> = lg.iter().map(|&v| sig(v)).collect();
        let lp = protest_loss(&[1.0, 0.0], &[p[0], p[12]]).unwrap();
        let lv = violence_loss(&[0.4, 0.0], &[p[1], p[13]], &[true, false]).unwrap();
        let la = attribute_loss(
            &[targets[2..12].to_vec(), targets[14..24].to_vec()],
            &[p[2..12].to_vec(), p[14..24].to_vec()],
            &[true, false],
        )
        .unwrap();
        assert!((g.scalar(h.protest) - lp).abs() < 1e-12);
        assert!((g.scalar(h.violence) - lv).abs() < 1e-12);
        assert!((g.scalar(h.attributes) - la).abs() < 1e-12);
    }
}
