//! Membership inference: the confidence-threshold black-box attack and the
//! supervised white-box attack over forward/backward features.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use synthaudit_nn::{
    capture_layer_features, loss_and_grad, seed, predict, Adam, Batch, Element, Forward, Graph, Optimizer, Tensor, Var,
};

use crate::corpus::ImageRecord;
use crate::downstream::{hybrid_loss_graph, predict_records, HybridWeights};
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{AttackBatch, AttackInput, Attacker, AttackerArch, Classifier, ImageBatch, N_TARGETS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Fraction of the pool that are members.
    pub member_fraction: f64,
    /// Pool size; by default the largest pool the member fraction allows.
    pub pool_size: Option<usize>,
    pub train_fraction: f64,
    /// Black-box thresholds, each reported separately.
    pub thresholds: Vec<f64>,
    /// Layers whose features the white-box attack reads, counted from the output.
    pub last_k: usize,
    /// Per-layer feature width after padding or truncation.
    pub width: usize,
    pub arch: AttackerArch,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of attack-train held out to pick the epoch with the lowest
    /// validation log-loss; the untrained attacker is a candidate too.
    /// 0 keeps the last epoch.
    pub validation_fraction: f64,
    /// Improvement in validation log-loss an epoch needs to replace the
    /// kept parameters.
    pub validation_min_delta: f64,
    /// Permit pools whose member fraction is not one half.
    pub allow_unbalanced: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            member_fraction: 0.5,
            pool_size: None,
            train_fraction: 0.8,
            thresholds: vec![0.5, 0.95, 0.99],
            last_k: 10,
            width: 64,
            arch: AttackerArch::default(),
            lr: 1e-4,
            batch_size: 32,
            epochs: 25,
            validation_fraction: 0.2,
            validation_min_delta: 0.02,
            allow_unbalanced: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.member_fraction > 0.0 && self.member_fraction < 1.0) {
            return Err(Error::config("attack.member_fraction", "must lie in (0, 1)"));
        }
        if (self.member_fraction - 0.5).abs() > 1e-12 && !self.allow_unbalanced {
            return Err(Error::config(
                "attack.member_fraction",
                "unbalanced pools are rejected unless attack.allow_unbalanced is set",
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("attack.train_fraction", "must lie in (0, 1)"));
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::config("attack.thresholds", "thresholds must lie in [0, 1]"));
        }
        if self.last_k == 0 || self.width < 2 || self.width % 2 != 0 {
            return Err(Error::config("attack.width", "last_k >= 1 and an even width >= 2"));
        }
        if !(self.lr > 0.0) || self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::config("attack.lr", "lr > 0, batch_size >= 2, epochs >= 1"));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::config("attack.validation_fraction", "must lie in [0, 0.5)"));
        }
        if !(self.validation_min_delta >= 0.0) {
            return Err(Error::config("attack.validation_min_delta", "must be >= 0"));
        }
        Ok(())
    }
}

// -------------------------------------------------------------------------
// pool

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub member: bool,
    /// Attack-train split when true, attack-test otherwise.
    pub attack_train: bool,
}

/// Examples with known membership, split for attacker training and testing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPool {
    pub entries: Vec<PoolEntry>,
    pub member_fraction: f64,
}

impl AttackPool {
    /// Samples members from `members` and non-members from `non_members`,
    /// then splits each class into attack-train and attack-test.
    pub fn build(members: &[&ImageRecord], non_members: &[&ImageRecord], cfg: &AttackConfig, seed_: u64) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.member_fraction;
        let max_total = ((members.len() as f64 / f).floor()).min((non_members.len() as f64 / (1.0 - f)).floor()) as usize;
        let total = cfg.pool_size.unwrap_or(max_total);
        if total > max_total || total < 4 {
            return Err(Error::Invalid(format!(
                "pool of {total} needs at most {max_total} given {} members and {} non-members",
                members.len(),
                non_members.len()
            )));
        }
        let n_mem = (total as f64 * f).round() as usize;
        let n_non = total - n_mem;
        let mut rng = seed::rng(seed_, "attack-pool", 0);
        let mut pick = |src: &[&ImageRecord], k: usize, member: bool| -> Vec<PoolEntry> {
            let mut idx: Vec<usize> = (0..src.len()).collect();
            idx.shuffle(&mut rng);
            let n_train = (k as f64 * cfg.train_fraction).round() as usize;
            idx[..k]
                .iter()
                .enumerate()
                .map(|(j, &i)| PoolEntry {
                    id: src[i].id.clone(),
                    member,
                    attack_train: j < n_train,
                })
                .collect()
        };
        let mut entries = pick(members, n_mem, true);
        entries.extend(pick(non_members, n_non, false));
        let mut seen = std::collections::HashSet::new();
        if !entries.iter().all(|e| seen.insert(e.id.as_str())) {
            return Err(Error::Invalid("member and non-member sources share ids".into()));
        }
        Ok(Self {
            entries,
            member_fraction: n_mem as f64 / total as f64,
        })
    }

    pub fn split(&self, attack_train: bool) -> Vec<&PoolEntry> {
        self.entries.iter().filter(|e| e.attack_train == attack_train).collect()
    }

    /// Resolves the ids of `entries` against `records`.
    pub fn resolve<'a>(entries: &[&PoolEntry], records: &[&'a ImageRecord]) -> Result<Vec<&'a ImageRecord>> {
        let by_id: std::collections::HashMap<&str, &ImageRecord> = records.iter().map(|r| (r.id.as_str(), *r)).collect();
        entries
            .iter()
            .map(|e| {
                by_id
                    .get(e.id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("pool id {} not found in the corpus", e.id)))
            })
            .collect()
    }
}

// -------------------------------------------------------------------------
// reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub score: f64,
    pub truth: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// "blackbox" or "whitebox".
    pub kind: String,
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
    pub log_loss: f64,
    pub n: usize,
    pub n_members: usize,
    /// Per-example scores; written to plot data rather than the report.
    #[serde(skip)]
    pub scores: Vec<ScoreRow>,
}

/// Metrics of membership scores decided at `threshold` (inclusive).
pub fn evaluate_attack(kind: &str, ids: &[&str], scores: &[f64], truth: &[bool], threshold: f64) -> Result<AttackReport> {
    if ids.len() != scores.len() || scores.len() != truth.len() {
        return Err(Error::Invalid("ids, scores and truth differ in length".into()));
    }
    let decided = blackbox_decide(scores, threshold);
    let m = metrics::binary_metrics(&decided, truth)?;
    Ok(AttackReport {
        kind: kind.into(),
        threshold,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        auc: metrics::auc_roc(scores, truth)?,
        log_loss: metrics::log_loss(scores, truth)?,
        n: truth.len(),
        n_members: truth.iter().filter(|&&t| t).count(),
        scores: ids
            .iter()
            .zip(scores)
            .zip(truth)
            .map(|((id, &score), &truth)| ScoreRow {
                id: id.to_string(),
                score,
                truth,
            })
            .collect(),
    })
}

// -------------------------------------------------------------------------
// black box

/// Query access to a victim: output probabilities and nothing else.
pub struct QueryOnly<'a> {
    model: &'a Classifier<f32>,
}

impl<'a> QueryOnly<'a> {
    pub fn new(model: &'a Classifier<f32>) -> Self {
        Self { model }
    }

    /// Sigmoid outputs of every head.
    pub fn query(&self, records: &[&ImageRecord]) -> Result<Vec<[f64; N_TARGETS]>> {
        Ok(predict_records(self.model, records)?.probs)
    }
}

/// Highest class posterior of the protest head, `max(p, 1 - p)`.
pub fn posterior_max(p: f64) -> f64 {
    p.max(1.0 - p)
}

pub fn blackbox_scores(victim: &QueryOnly<'_>, records: &[&ImageRecord]) -> Result<Vec<f64>> {
    Ok(victim.query(records)?.iter().map(|p| posterior_max(p[0])).collect())
}

/// Member iff `score >= threshold`.
pub fn blackbox_decide(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

/// Black-box reports on the attack-test split, one per configured threshold.
pub fn blackbox_attack(
    victim: &QueryOnly<'_>,
    pool: &AttackPool,
    records: &[&ImageRecord],
    thresholds: &[f64],
) -> Result<Vec<AttackReport>> {
    let test = pool.split(false);
    let recs = AttackPool::resolve(&test, records)?;
    let scores = blackbox_scores(victim, &recs)?;
    let ids: Vec<&str> = test.iter().map(|e| e.id.as_str()).collect();
    let truth: Vec<bool> = test.iter().map(|e| e.member).collect();
    thresholds
        .iter()
        .map(|&t| evaluate_attack("blackbox", &ids, &scores, &truth, t))
        .collect()
}

// -------------------------------------------------------------------------
// white box

/// `sign(x) ln(1 + |x| / 1e-6)`: compresses magnitudes spanning many decades.
fn signed_log(x: f64) -> f64 {
    x.signum() * (x.abs() / 1e-6).ln_1p()
}

fn fit_width(mut v: Vec<f64>, width: usize) -> Vec<f64> {
    v.resize(width, 0.0);
    v
}

/// Mean absolute activation per channel (last axis).
pub fn activation_summary(t: &Tensor<f32>) -> Vec<f64> {
    let c = *t.shape().last().unwrap_or(&1);
    let rows = t.len() / c.max(1);
    let mut out = vec![0.0; c];
    for chunk in t.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += f64::from(v.abs());
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

/// The weight gradient itself when it fits in `width`, else the L2 norm of
/// each output column.
pub fn gradient_summary(t: &Tensor<f32>, width: usize) -> Vec<f64> {
    if t.len() <= width || t.shape().len() < 2 {
        return t.data().iter().map(|&v| f64::from(v)).collect();
    }
    let cols = *t.shape().last().unwrap();
    let mut out = vec![0.0; cols];
    for row in t.data().chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += f64::from(v) * f64::from(v);
        }
    }
    out.into_iter().map(f64::sqrt).collect()
}

/// Fixed-size white-box features of each record under the victim, computed
/// with the hybrid loss and the record's true labels.
pub fn whitebox_extract(
    victim: &Classifier<f32>,
    records: &[&ImageRecord],
    last_k: usize,
    width: usize,
    weights: HybridWeights,
) -> Result<Vec<AttackInput>> {
    use synthaudit_nn::Model;
    let layers = victim.params().layer_count();
    if last_k > layers {
        return Err(Error::Invalid(format!("last_k = {last_k} exceeds the victim's {layers} layers")));
    }
    let loss_fn = move |g: &mut Graph<f32>, fwd: &Forward, b: &ImageBatch<f32>| -> Var {
        hybrid_loss_graph(g, fwd.output, &b.targets, weights).total
    };
    records
        .par_iter()
        .map(|r| {
            let batch = ImageBatch::<f32>::from_records([*r])?;
            let label = r.annotation.targets().to_vec();
            let b = capture_layer_features(victim, &batch, &loss_fn, last_k, label.clone())?;
            let mut activations = Vec::with_capacity(last_k * width);
            let mut gradients = Vec::with_capacity(last_k * width);
            for (act, grads) in b.activations.iter().zip(&b.gradients) {
                activations.extend(fit_width(activation_summary(act), width).into_iter().map(signed_log));
                let gs = grads.first().map(|t| gradient_summary(t, width)).unwrap_or_default();
                gradients.extend(fit_width(gs, width).into_iter().map(signed_log));
            }
            Ok(AttackInput {
                activations,
                gradients,
                loss: (f64::from(b.loss).max(0.0) + 1e-6).ln(),
                label: label.into_iter().map(f64::from).collect(),
            })
        })
        .collect()
}

/// Feature columns' mean and standard deviation.
fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Mean membership BCE on attacker logits.
pub fn attacker_loss<T: Element>(g: &mut Graph<T>, fwd: &Forward, b: &AttackBatch<T>) -> Var {
    // BCE with logits: softplus(z) - y z
    let y = g.constant(b.y.clone());
    let sp = g.softplus(fwd.output);
    let yz = g.mul(y, fwd.output);
    let l = g.sub(sp, yz);
    g.mean(l)
}

pub struct TrainedAttacker {
    pub attacker: Attacker<f32>,
    pub epoch_losses: Vec<f64>,
    /// Validation log-loss before training and after each epoch.
    pub validation_losses: Vec<f64>,
    /// Epoch whose parameters were kept; `None` for the untrained attacker.
    pub selected_epoch: Option<usize>,
}

/// Stratified holdout: `frac` of each class, at least one of each.
fn holdout(pos: &[usize], neg: &[usize], frac: f64, seed_: u64) -> (Vec<usize>, Vec<usize>) {
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for (k, class) in [pos, neg].into_iter().enumerate() {
        let mut c = class.to_vec();
        c.shuffle(&mut seed::rng(seed_, "attacker-val", k as u64));
        let n_val = ((frac * c.len() as f64).round() as usize).clamp(1, c.len() - 1);
        val.extend_from_slice(&c[..n_val]);
        fit.extend_from_slice(&c[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

/// Trains the white-box attacker on balanced batches (half members, half
/// non-members; the smaller class is resampled within each epoch).
pub fn train_whitebox_attacker(
    inputs: &[&AttackInput],
    members: &[bool],
    cfg: &AttackConfig,
    seed_: u64,
) -> Result<TrainedAttacker> {
    cfg.validate()?;
    if inputs.len() != members.len() || inputs.is_empty() {
        return Err(Error::Invalid("attacker needs one label per input".into()));
    }
    let pos: Vec<usize> = (0..members.len()).filter(|&i| members[i]).collect();
    let neg: Vec<usize> = (0..members.len()).filter(|&i| !members[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Invalid("attack-train split needs members and non-members".into()));
    }
    let ratio = pos.len() as f64 / members.len() as f64;
    if (ratio - 0.5).abs() > 0.05 && !cfg.allow_unbalanced {
        return Err(Error::Invalid(format!(
            "attack-train member fraction {ratio:.3} is unbalanced; set attack.allow_unbalanced to override"
        )));
    }
    let select = cfg.validation_fraction > 0.0;
    if select && (pos.len() < 2 || neg.len() < 2) {
        return Err(Error::Invalid("validation holdout needs two examples of each class".into()));
    }
    let (fit, val) = if select {
        holdout(&pos, &neg, cfg.validation_fraction, seed_)
    } else {
        ((0..members.len()).collect(), Vec::new())
    };
    let pos: Vec<usize> = fit.iter().copied().filter(|&i| members[i]).collect();
    let neg: Vec<usize> = fit.iter().copied().filter(|&i| !members[i]).collect();

    let layers = inputs[0].activations.len() / cfg.width;
    let mut init = seed::rng(seed_, "attacker-init", 0);
    let mut attacker = Attacker::<f32>::new(&cfg.arch, layers, cfg.width, inputs[0].label.len(), &mut init)?;

    let grid_rows: Vec<Vec<f64>> = fit
        .iter()
        .map(|&i| {
            let a = inputs[i];
            a.activations.iter().zip(&a.gradients).flat_map(|(&x, &y)| [x, y]).collect()
        })
        .collect();
    let scalar_rows: Vec<Vec<f64>> = fit
        .iter()
        .map(|&i| std::iter::once(inputs[i].loss).chain(inputs[i].label.iter().copied()).collect())
        .collect();
    let (gm, gs) = column_stats(&grid_rows);
    let (sm, ss) = column_stats(&scalar_rows);
    attacker.set_normalization((&gm, &gs), (&sm, &ss))?;

    let val_inputs: Vec<&AttackInput> = val.iter().map(|&i| inputs[i]).collect();
    let val_truth: Vec<bool> = val.iter().map(|&i| members[i]).collect();
    let val_loss = |a: &Attacker<f32>| -> Result<f64> { metrics::log_loss(&attacker_scores(a, &val_inputs)?, &val_truth) };
    let mut validation_losses = Vec::new();
    let mut best: Option<(f64, Option<usize>, Attacker<f32>)> = None;
    if select {
        let l = val_loss(&attacker)?;
        validation_losses.push(l);
        best = Some((l, None, attacker.clone()));
    }

    let all = attacker.batch(inputs, members)?;
    let mut opt = Adam::new(cfg.lr)?;
    let half = cfg.batch_size / 2;
    let per_epoch = pos.len().max(neg.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed_, "attacker-shuffle", epoch as u64);
        let order = |src: &[usize], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
            let mut out = Vec::with_capacity(per_epoch);
            while out.len() < per_epoch {
                let mut s = src.to_vec();
                s.shuffle(rng);
                out.extend(s);
            }
            out.truncate(per_epoch);
            out
        };
        let p_ord = order(&pos, &mut rng);
        let n_ord = order(&neg, &mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for (pc, nc) in p_ord.chunks(half).zip(n_ord.chunks(half)) {
            let mut idx: Vec<usize> = pc.iter().chain(nc).copied().collect();
            idx.shuffle(&mut rng);
            let b = all.select(&idx);
            let bundle = loss_and_grad(&attacker, &b, &attacker_loss)?;
            opt.step(synthaudit_nn::Model::params_mut(&mut attacker), &bundle.grads)?;
            sum += f64::from(bundle.loss);
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
        if select {
            let l = val_loss(&attacker)?;
            validation_losses.push(l);
            if best.as_ref().is_some_and(|b| l < b.0 - cfg.validation_min_delta) {
                best = Some((l, Some(epoch), attacker.clone()));
            }
        }
    }
    let (attacker, selected_epoch) = match best {
        Some((_, e, a)) => (a, e),
        None => (attacker, Some(cfg.epochs - 1)),
    };
    Ok(TrainedAttacker {
        attacker,
        epoch_losses,
        validation_losses,
        selected_epoch,
    })
}

/// Membership probabilities from a trained attacker.
pub fn attacker_scores(attacker: &Attacker<f32>, inputs: &[&AttackInput]) -> Result<Vec<f64>> {
    let b = attacker.batch(inputs, &[])?;
    let logits = predict(attacker, &b)?;
    Ok(logits.data().iter().map(|&z| synthaudit_nn::graph::sigmoid(f64::from(z))).collect())
}

/// Outcome of the full white-box protocol on one victim.
pub struct WhiteboxOutcome {
    pub report: AttackReport,
    pub attacker: TrainedAttacker,
}

/// Extracts features for the pool, trains on attack-train and evaluates on
/// attack-test at the 0.5 decision point.
pub fn whitebox_attack(
    victim: &Classifier<f32>,
    pool: &AttackPool,
    records: &[&ImageRecord],
    cfg: &AttackConfig,
    weights: HybridWeights,
    seed_: u64,
) -> Result<WhiteboxOutcome> {
    let train = pool.split(true);
    let test = pool.split(false);
    let f_train = whitebox_extract(victim, &AttackPool::resolve(&train, records)?, cfg.last_k, cfg.width, weights)?;
    let f_test = whitebox_extract(victim, &AttackPool::resolve(&test, records)?, cfg.last_k, cfg.width, weights)?;
    let y_train: Vec<bool> = train.iter().map(|e| e.member).collect();
    let trained = train_whitebox_attacker(&f_train.iter().collect::<Vec<_>>(), &y_train, cfg, seed_)?;
    let scores = attacker_scores(&trained.attacker, &f_test.iter().collect::<Vec<_>>())?;
    let ids: Vec<&str> = test.iter().map(|e| e.id.as_str()).collect();
    let truth: Vec<bool> = test.iter().map(|e| e.member).collect();
    Ok(WhiteboxOutcome {
        report: evaluate_attack("whitebox", &ids, &scores, &truth, 0.5)?,
        attacker: trained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_max_is_symmetric() {
        assert_eq!(posterior_max(0.97), 0.97);
        assert!((posterior_max(0.03) - 0.97).abs() < 1e-12);
    }

    #[test]
    fn decide_boundary_is_inclusive() {
        assert_eq!(blackbox_decide(&[0.5, 0.49, 0.99], 0.5), vec![true, false, true]);
        assert_eq!(blackbox_decide(&[0.999, 0.2], 1.0), vec![false, false]);
    }

    #[test]
    fn all_positive_on_balanced_pool() {
        let ids = ["a", "b", "c", "d"];
        let r = evaluate_attack("blackbox", &ids, &[0.5; 4], &[true, false, true, false], 0.5).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall), (0.5, 0.5, 1.0));
        assert!((r.log_loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn perfect_scores() {
        let ids = ["a", "b"];
        let r = evaluate_attack("whitebox", &ids, &[1.0, 0.0], &[true, false], 0.5).unwrap();
        assert_eq!(r.auc, 1.0);
        assert!(r.log_loss < 1e-6);
    }

    #[test]
    fn gradient_summary_switches_to_column_norms() {
        let small = Tensor::new(vec![2, 2], vec![1.0f32, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gradient_summary(&small, 8), vec![1.0, -2.0, 3.0, 4.0]);
        let norms = gradient_summary(&small, 2);
        assert!((norms[0] - 10f64.sqrt()).abs() < 1e-6 && (norms[1] - 20f64.sqrt()).abs() < 1e-6);
        let act = Tensor::new(vec![1, 2, 1, 2], vec![1.0f32, -2.0, -3.0, 4.0]).unwrap();
        assert_eq!(activation_summary(&act), vec![2.0, 3.0]);
    }
}
