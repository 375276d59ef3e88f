//! Multi-task classifier training (standard and DP-SGD) and utility evaluation.

mod augment;
mod dp;
mod losses;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use synthaudit_nn::{
    loss_and_grad, per_sample_grads, seed, Batch, Forward, Graph, Grads, Mode, Model, Optimizer, Sgd,
    Tensor, Var,
};

pub use augment::{augment, color_jitter, random_resized_crop, rotate, AugmentConfig};
pub use dp::{dp_epsilon, rdp_orders, rdp_step, DpGuarantee, DpSgdConfig};
pub use losses::{
    attribute_loss, hybrid_loss, hybrid_loss_graph, protest_loss, violence_loss, HybridVars,
    HybridWeights, LossComponents, PROB_EPS,
};

use crate::corpus::{ImageRecord, ATTRIBUTES};
use crate::error::{Error, Result};
use crate::metrics::{self, LinearFit, RocPoint};
use crate::models::{Classifier, ClassifierArch, ImageBatch, N_TARGETS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: HybridWeights,
    pub augment: AugmentConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::default(),
            epochs: 30,
            batch_size: 32,
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 0.0,
            weights: HybridWeights::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("downstream.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("downstream.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("downstream.momentum", "momentum in [0, 1), weight decay >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_batch_loss: f64,
    pub steps: u64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub classifier: Classifier<f32>,
    pub log: Vec<EpochLog>,
    pub steps: u64,
    pub dp: Option<DpGuarantee>,
}

const CALIBRATION_CHUNK: usize = 64;

fn hybrid_fn(w: HybridWeights) -> impl Fn(&mut Graph<f32>, &Forward, &ImageBatch<f32>) -> Var {
    move |g, fwd, batch| hybrid_loss_graph(g, fwd.output, &batch.targets, w).total
}

fn assemble(
    base: &ImageBatch<f32>,
    idx: &[usize],
    cfg: &AugmentConfig,
    seed_: u64,
    epoch: usize,
) -> ImageBatch<f32> {
    let mut b = base.select(idx);
    if cfg.enabled {
        let side = b.x.shape()[1];
        let len = side * side * 3;
        let data = b.x.data_mut();
        for (k, &i) in idx.iter().enumerate() {
            let mut rng = seed::rng(seed_, "augment", (epoch as u64) << 32 | i as u64);
            let out = augment(cfg, &data[k * len..(k + 1) * len], side, &mut rng);
            data[k * len..(k + 1) * len].copy_from_slice(&out);
        }
    }
    b
}

/// Trains a classifier on `train`. With `dp` set, each fixed-size batch uses
/// per-example gradients clipped to `clip_norm` and Gaussian noise of
/// standard deviation `noise_multiplier * clip_norm` on their sum.
pub fn train_downstream(
    train: &[&ImageRecord],
    cfg: &DownstreamConfig,
    dp: Option<&DpSgdConfig>,
    seed_: u64,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if let Some(d) = dp {
        d.validate()?;
    }
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let base = ImageBatch::<f32>::from_records(train.iter().copied())?;
    let n = base.len();
    let mut init_rng = seed::rng(seed_, "downstream-init", 0);
    let mut model = Classifier::<f32>::new(&cfg.arch, &mut init_rng)?;
    if dp.is_some() && model.batch_coupled() {
        return Err(Error::config(
            "downstream.arch.norm",
            "DP-SGD needs per-example gradients; batch normalization couples examples",
        ));
    }
    let mut opt = Sgd::new(cfg.lr)?
        .with_momentum(cfg.momentum)
        .with_weight_decay(cfg.weight_decay);
    let loss_fn = hybrid_fn(cfg.weights);
    let bs = cfg.batch_size.min(n);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed_, "downstream-shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        // DP batches have a fixed size so the sampling rate is B / N
        let chunks: Vec<&[usize]> = if dp.is_some() {
            order.chunks_exact(bs).collect()
        } else {
            order.chunks(bs).collect()
        };
        for idx in chunks {
            let batch = assemble(&base, idx, &cfg.augment, seed_, epoch);
            let (loss, grads) = match dp {
                None => {
                    let b = loss_and_grad(&model, &batch, &loss_fn)?;
                    (f64::from(b.loss), b.grads)
                }
                Some(d) => dp_gradient(&model, &batch, &loss_fn, d, seed_, steps)?,
            };
            opt.step(model.params_mut(), &grads)?;
            loss_sum += loss;
            batches += 1;
            steps += 1;
        }
        let entry = EpochLog {
            epoch,
            mean_batch_loss: loss_sum / batches.max(1) as f64,
            steps,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        tracing::debug!(epoch, loss = entry.mean_batch_loss, "downstream epoch");
        log.push(entry);
    }
    model.calibrate_batch_norm(&base.x, CALIBRATION_CHUNK)?;
    let dp_report = match dp {
        Some(d) => Some(dp_epsilon(d.noise_multiplier, bs as f64 / n as f64, steps, d.delta)?),
        None => None,
    };
    Ok(TrainedClassifier {
        classifier: model,
        log,
        steps,
        dp: dp_report,
    })
}

/// Clipping factor `min(1, C / ||g||)`.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm <= clip || norm == 0.0 {
        1.0
    } else {
        clip / norm
    }
}

/// Noised mean of clipped per-example gradients, plus the mean per-example loss.
pub fn dp_gradient<M, F>(
    model: &M,
    batch: &M::Batch,
    loss_fn: &F,
    dp: &DpSgdConfig,
    seed_: u64,
    step: u64,
) -> Result<(f64, Grads<f32>)>
where
    M: Model<f32>,
    F: Fn(&mut Graph<f32>, &Forward, &M::Batch) -> Var,
{
    let per = per_sample_grads(model, batch, loss_fn)?;
    let b = per.len() as f64;
    let mut sum = clipped_sum(&per.iter().map(|p| &p.grads).collect::<Vec<_>>(), dp.clip_norm);
    let std = dp.noise_multiplier * dp.clip_norm;
    if std > 0.0 {
        let mut rng = seed::rng(seed_, "dp-noise", step);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in sum.iter_mut().flatten().flat_map(|t| t.data_mut().iter_mut()) {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    for v in sum.iter_mut().flatten().flat_map(|t| t.data_mut().iter_mut()) {
        *v /= b as f32;
    }
    let loss = per.iter().map(|p| f64::from(p.loss)).sum::<f64>() / b;
    Ok((loss, sum))
}

/// Sum of per-example gradients, each scaled to L2 norm at most `clip`.
pub fn clipped_sum(per: &[&Grads<f32>], clip: f64) -> Grads<f32> {
    let mut sum: Grads<f32> = per[0]
        .iter()
        .map(|l| l.iter().map(|t| Tensor::zeros(t.shape())).collect())
        .collect();
    for g in per {
        let norm = g.iter().flatten().map(|t| f64::from(t.sq_norm())).sum::<f64>().sqrt();
        let f = clip_factor(norm, clip) as f32;
        for (dst, src) in sum.iter_mut().flatten().zip(g.iter().flatten()) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += f * s;
            }
        }
    }
    sum
}

/// Per-image sigmoid outputs and penultimate features.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub probs: Vec<[f64; N_TARGETS]>,
    pub features: Vec<Vec<f64>>,
}

const EVAL_BATCH: usize = 64;

/// Evaluates the classifier without gradients; chunk order does not affect results.
pub fn predict_records(model: &Classifier<f32>, records: &[&ImageRecord]) -> Result<Predictions> {
    let parts: Vec<Result<(Vec<[f64; N_TARGETS]>, Vec<Vec<f64>>)>> = records
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let batch = ImageBatch::<f32>::from_records(chunk.iter().copied())?;
            model.check_batch(&batch)?;
            let mut g = Graph::new();
            let p = model.params().bind_frozen(&mut g);
            let x = g.constant(batch.x.clone());
            let (fwd, feats) = model.forward_features(&mut g, &p, x, Mode::Eval);
            let logits = g.value(fwd.output);
            let probs = (0..chunk.len())
                .map(|i| {
                    let row = logits.row(i);
                    std::array::from_fn(|j| synthaudit_nn::graph::sigmoid(f64::from(row[j])))
                })
                .collect();
            let f = g.value(feats);
            let features = (0..chunk.len())
                .map(|i| f.row(i).iter().map(|&v| f64::from(v)).collect())
                .collect();
            Ok((probs, features))
        })
        .collect();
    let mut out = Predictions {
        probs: Vec::with_capacity(records.len()),
        features: Vec::with_capacity(records.len()),
    };
    for part in parts {
        let (p, f) = part?;
        out.probs.extend(p);
        out.features.extend(f);
    }
    Ok(out)
}

/// Unweighted loss components over a record set.
pub fn dataset_loss(probs: &[[f64; N_TARGETS]], records: &[&ImageRecord]) -> Result<LossComponents> {
    let y: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.annotation.protest))).collect();
    let mask: Vec<bool> = records.iter().map(|r| r.annotation.protest).collect();
    let p: Vec<f64> = probs.iter().map(|p| p[0]).collect();
    let v: Vec<f64> = records.iter().map(|r| r.annotation.violence).collect();
    let vh: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let ya: Vec<Vec<f64>> = records
        .iter()
        .map(|r| r.annotation.attributes.iter().map(|&a| f64::from(u8::from(a))).collect())
        .collect();
    let pa: Vec<Vec<f64>> = probs.iter().map(|p| p[2..].to_vec()).collect();
    Ok(LossComponents {
        protest: protest_loss(&y, &p)?,
        violence: violence_loss(&v, &vh, &mask)?,
        attributes: attribute_loss(&ya, &pa, &mask)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: String,
    /// Absent when the evaluated set lacks one of the classes.
    pub auc: Option<f64>,
    /// Wilson interval at effective size `min(n_pos, n_neg)`.
    pub auc_ci: Option<[f64; 2]>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub n: usize,
    pub n_protest: usize,
    pub protest: HeadScore,
    /// Evaluated on protest images only.
    pub attributes: Vec<HeadScore>,
    /// Violence fit over protest images: `predicted ~ slope * truth + intercept`.
    pub violence: Option<LinearFit>,
    pub loss: LossComponents,
    pub hybrid_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub id: String,
    pub truth: f64,
    pub predicted: f64,
}

/// Report plus plot data.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: UtilityReport,
    pub roc: Vec<(String, Vec<RocPoint>)>,
    pub scatter: Vec<ScatterPoint>,
}

fn head_score(name: &str, scores: &[f64], truth: &[bool]) -> Result<(HeadScore, Option<Vec<RocPoint>>)> {
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok((
            HeadScore {
                head: name.into(),
                auc: None,
                auc_ci: None,
                n_pos,
                n_neg,
            },
            None,
        ));
    }
    let auc = metrics::auc_roc(scores, truth)?;
    let (lo, hi) = metrics::wilson_rate(auc, n_pos.min(n_neg) as f64, metrics::Z95);
    Ok((
        HeadScore {
            head: name.into(),
            auc: Some(auc),
            auc_ci: Some([lo, hi]),
            n_pos,
            n_neg,
        },
        Some(metrics::roc_points(scores, truth)?),
    ))
}

/// Per-head AUC, violence correlation and fit on a labeled test set.
pub fn evaluate_downstream(model: &Classifier<f32>, test: &[&ImageRecord], weights: HybridWeights) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Invalid("test set is empty".into()));
    }
    let pred = predict_records(model, test)?;
    let truth: Vec<bool> = test.iter().map(|r| r.annotation.protest).collect();
    let scores: Vec<f64> = pred.probs.iter().map(|p| p[0]).collect();
    let mut roc = Vec::new();
    let (protest, pts) = head_score("protest", &scores, &truth)?;
    roc.extend(pts.map(|p| ("protest".to_string(), p)));

    let pos: Vec<usize> = (0..test.len()).filter(|&i| truth[i]).collect();
    let mut attributes = Vec::new();
    for (j, name) in ATTRIBUTES.iter().enumerate() {
        let s: Vec<f64> = pos.iter().map(|&i| pred.probs[i][2 + j]).collect();
        let t: Vec<bool> = pos.iter().map(|&i| test[i].annotation.attributes[j]).collect();
        let (h, pts) = head_score(name, &s, &t)?;
        roc.extend(pts.map(|p| (name.to_string(), p)));
        attributes.push(h);
    }
    let scatter: Vec<ScatterPoint> = pos
        .iter()
        .map(|&i| ScatterPoint {
            id: test[i].id.clone(),
            truth: test[i].annotation.violence,
            predicted: pred.probs[i][1],
        })
        .collect();
    let vx: Vec<f64> = scatter.iter().map(|s| s.truth).collect();
    let vy: Vec<f64> = scatter.iter().map(|s| s.predicted).collect();
    let violence = metrics::pearson_and_fit(&vx, &vy).ok();
    let loss = dataset_loss(&pred.probs, test)?;
    Ok(Evaluation {
        report: UtilityReport {
            n: test.len(),
            n_protest: pos.len(),
            protest,
            attributes,
            violence,
            loss,
            hybrid_loss: hybrid_loss(loss, weights),
        },
        roc,
        scatter,
    })
}
