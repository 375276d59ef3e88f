//! Generative-quality and audit statistics. Everything here is a pure function.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n x d` feature matrix with the provenance of the network that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
    pub provenance: String,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<Vec<f64>>, provenance: impl Into<String>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if n == 0 || d == 0 {
            return Err(Error::Invalid("embedding set must be nonempty".into()));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid("embedding rows differ in length".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("embedding contains non-finite values".into()));
        }
        Ok(Self {
            n,
            d,
            data,
            provenance: provenance.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.data)
    }
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn check_pair(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<()> {
    if a.d != b.d {
        return Err(Error::Invalid(format!("embedding dims differ: {} vs {}", a.d, b.d)));
    }
    if a.n < 2 || b.n < 2 {
        return Err(Error::Invalid("need at least 2 embeddings per set".into()));
    }
    Ok(())
}

/// Frechet distance between Gaussian fits of two embedding sets.
///
/// `Tr((C_r C_s)^{1/2})` is evaluated as the trace of the square root of the
/// symmetric matrix `C_r^{1/2} C_s C_r^{1/2}`, which has the same spectrum.
pub fn fid(real: &EmbeddingSet, synth: &EmbeddingSet) -> Result<f64> {
    check_pair(real, synth)?;
    if real.n < real.d || synth.n < synth.d {
        tracing::warn!(n_real = real.n, n_synth = synth.n, d = real.d, "fewer samples than dimensions; covariance is singular");
    }
    let (mu_r, c_r) = mean_and_cov(&real.matrix());
    let (mu_s, c_s) = mean_and_cov(&synth.matrix());
    let s = sym_sqrt(&c_r);
    let inner = &s * &c_s * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner
        .symmetric_eigenvalues()
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = mu_r - mu_s;
    Ok(diff.norm_squared() + c_r.trace() + c_s.trace() - 2.0 * tr_sqrt)
}

/// Unbiased MMD^2 with the kernel `(x.y / d + 1)^3`.
pub fn kid(real: &EmbeddingSet, synth: &EmbeddingSet) -> Result<f64> {
    check_pair(real, synth)?;
    let d = real.d as f64;
    let k = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        (dot / d + 1.0).powi(3)
    };
    let within = |s: &EmbeddingSet| {
        let mut acc = 0.0;
        for i in 0..s.n {
            for j in 0..s.n {
                if i != j {
                    acc += k(s.row(i), s.row(j));
                }
            }
        }
        acc / (s.n * (s.n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..real.n {
        for j in 0..synth.n {
            cross += k(real.row(i), synth.row(j));
        }
    }
    Ok(within(real) + within(synth) - 2.0 * cross / (real.n * synth.n) as f64)
}

/// `exp(mean KL(p(y|x) || p(y)))` with the marginal taken over the given rows.
pub fn inception_score(posteriors: &[Vec<f64>]) -> Result<f64> {
    let k = posteriors.first().map_or(0, Vec::len);
    if posteriors.is_empty() || k == 0 {
        return Err(Error::Invalid("inception score needs posteriors".into()));
    }
    for (i, row) in posteriors.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.len() != k || row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("row {i} is not a probability vector")));
        }
    }
    let n = posteriors.len() as f64;
    let marginal: Vec<f64> = (0..k)
        .map(|j| posteriors.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let mean_kl = posteriors
        .iter()
        .map(|r| {
            r.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

fn check_scores(scores: &[f64], truth: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != truth.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("scores contain NaN".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("AUC needs both positive and negative examples".into()));
    }
    Ok((pos, neg))
}

/// Rank-based AUC; tied scores contribute one half.
pub fn auc_roc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, truth)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * idx[i..=j].iter().filter(|&&t| truth[t]).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    #[serde(with = "crate::serde_util::inf_as_null")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from `(0, 0)` to `(1, 1)`, one point per distinct score, taken
/// in decreasing score order (predict positive iff score >= threshold).
pub fn roc_points(scores: &[f64], truth: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_scores(scores, truth)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if truth[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(pts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub r: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// Pearson correlation and least-squares line `y ~ slope * x + intercept`.
/// `r` is reported as 0 when `y` is constant.
pub fn pearson_and_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("need at least two paired values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::Invalid("x is constant; slope undefined".into()));
    }
    let slope = sxy / sxx;
    let r = if syy == 0.0 { 0.0 } else { sxy / (sxx * syy).sqrt() };
    Ok(LinearFit {
        r: r.clamp(-1.0, 1.0),
        slope,
        intercept: my - slope * mx,
        n: x.len(),
    })
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(Error::Invalid(format!("invalid proportion {k}/{n}")));
    }
    Ok(wilson_rate(k as f64 / n as f64, n as f64, z))
}

/// Wilson interval around an observed rate `p` with (possibly effective) sample size `n`.
pub fn wilson_rate(p: f64, n: f64, z: f64) -> (f64, f64) {
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // the closed form is exact at the boundaries; clamp rounding noise
    let lo = if p <= 0.0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if p >= 1.0 { 1.0 } else { (center + half).min(1.0) };
    (lo.min(p), hi.max(p))
}

/// Interval for `p1 - p2` from independent Wilson intervals combined in quadrature.
pub fn diff_interval(k1: usize, n1: usize, k2: usize, n2: usize, z: f64) -> Result<(f64, f64)> {
    let (l1, u1) = wilson_interval(k1, n1, z)?;
    let (l2, u2) = wilson_interval(k2, n2, z)?;
    let p1 = k1 as f64 / n1 as f64;
    let p2 = k2 as f64 / n2 as f64;
    let d = p1 - p2;
    Ok((
        d - ((p1 - l1).powi(2) + (u2 - p2).powi(2)).sqrt(),
        d + ((u1 - p1).powi(2) + (p2 - l2).powi(2)).sqrt(),
    ))
}

pub const Z95: f64 = 1.959_963_984_540_054;

/// Pairwise statistical parity differences between groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdMatrix {
    pub groups: Vec<String>,
    pub counts: Vec<usize>,
    pub positives: Vec<usize>,
    /// `spd[i][j] = rate_i - rate_j`.
    pub spd: Vec<Vec<f64>>,
    /// 95% interval per cell, `[lo, hi]`.
    pub ci: Vec<Vec<[f64; 2]>>,
    /// Groups below the minimum count, with their counts.
    pub excluded: Vec<(String, usize)>,
}

impl SpdMatrix {
    pub fn rate(&self, i: usize) -> f64 {
        self.positives[i] as f64 / self.counts[i] as f64
    }

    pub fn index_of(&self, group: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == group)
    }
}

/// SPD matrix of binary `outcomes` over `groups` (indices into `names`).
/// Groups with fewer than `min_count` examples are excluded and listed.
pub fn spd_matrix(outcomes: &[bool], groups: &[usize], names: &[&str], min_count: usize) -> Result<SpdMatrix> {
    if outcomes.len() != groups.len() {
        return Err(Error::Invalid("outcomes and groups differ in length".into()));
    }
    let mut counts = vec![0usize; names.len()];
    let mut positives = vec![0usize; names.len()];
    for (&o, &g) in outcomes.iter().zip(groups) {
        if g >= names.len() {
            return Err(Error::Invalid(format!("group index {g} out of range")));
        }
        counts[g] += 1;
        positives[g] += usize::from(o);
    }
    let mut keep = Vec::new();
    let mut excluded = Vec::new();
    for (g, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        if c < min_count.max(1) {
            excluded.push((names[g].to_string(), c));
        } else {
            keep.push(g);
        }
    }
    let m = keep.len();
    let mut spd = vec![vec![0.0; m]; m];
    let mut ci = vec![vec![[0.0, 0.0]; m]; m];
    for a in 0..m {
        for b in a + 1..m {
            let (ga, gb) = (keep[a], keep[b]);
            let ra = positives[ga] as f64 / counts[ga] as f64;
            let rb = positives[gb] as f64 / counts[gb] as f64;
            let (lo, hi) = diff_interval(positives[ga], counts[ga], positives[gb], counts[gb], Z95)?;
            spd[a][b] = ra - rb;
            spd[b][a] = -(ra - rb);
            ci[a][b] = [lo, hi];
            ci[b][a] = [-hi, -lo];
        }
    }
    Ok(SpdMatrix {
        groups: keep.iter().map(|&g| names[g].to_string()).collect(),
        counts: keep.iter().map(|&g| counts[g]).collect(),
        positives: keep.iter().map(|&g| positives[g]).collect(),
        spd,
        ci,
        excluded,
    })
}

/// Total-variation distance between two histograms (normalized internally).
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Invalid("histograms differ in length".into()));
    }
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    if sp <= 0.0 || sq <= 0.0 {
        return Err(Error::Invalid("empty histogram".into()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a / sp - b / sq).abs()).sum::<f64>())
}

/// Mean binary cross-entropy of probabilities, clamped at `1e-7`.
pub fn log_loss(probs: &[f64], truth: &[bool]) -> Result<f64> {
    if probs.len() != truth.len() || probs.is_empty() {
        return Err(Error::Invalid("log-loss needs equal, nonempty inputs".into()));
    }
    let eps = 1e-7;
    Ok(probs
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            if t {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / probs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    /// 0 when nothing is predicted positive.
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn binary_metrics(pred: &[bool], truth: &[bool]) -> Result<BinaryMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Invalid("predictions and labels must be equal and nonempty".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(BinaryMetrics {
        accuracy: ratio(tp + tn, pred.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        tp,
        fp,
        tn,
        fn_,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> EmbeddingSet {
        EmbeddingSet::new(rows.iter().map(|r| r.to_vec()).collect(), "test").unwrap()
    }

    #[test]
    fn fid_closed_forms() {
        let s = 0.5f64.sqrt();
        let a = set(&[&[-s], &[s]]);
        let b = set(&[&[1.0 - s], &[1.0 + s]]);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let r1 = 1.5f64.sqrt();
        let r4 = 6.0f64.sqrt();
        let i = set(&[&[r1, 0.0], &[-r1, 0.0], &[0.0, r1], &[0.0, -r1]]);
        let four = set(&[&[r4, 0.0], &[-r4, 0.0], &[0.0, r4], &[0.0, -r4]]);
        assert!((fid(&i, &four).unwrap() - 2.0).abs() < 1e-9);
        assert!(fid(&i, &i).unwrap().abs() < 1e-9);
    }

    #[test]
    fn kid_constant_sets_cancel() {
        let a = set(&[&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7]]);
        assert_eq!(kid(&a, &a.clone()).unwrap(), 0.0);
    }

    #[test]
    fn inception_score_examples() {
        let same = vec![vec![0.2, 0.8]; 5];
        assert!((inception_score(&same).unwrap() - 1.0).abs() < 1e-12);
        let one_hot: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..10).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        assert!((inception_score(&one_hot).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.8, 0.85, 0.7];
        let t = [true, true, false, false];
        assert_eq!(auc_roc(&s, &t).unwrap(), 0.75);
        assert_eq!(auc_roc(&[0.5; 4], &t).unwrap(), 0.5);
        assert_eq!(auc_roc(&[0.9, 0.8, 0.1, 0.2], &t).unwrap(), 1.0);
        let pts = roc_points(&s, &t).unwrap();
        assert_eq!(pts.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
    }

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson_interval(50, 100, 1.96).unwrap();
        assert!((lo - 0.4038).abs() < 1e-3 && (hi - 0.5962).abs() < 1e-3);
        let (lo, hi) = wilson_interval(0, 10, 1.96).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 0.2775).abs() < 1e-3);
    }

    #[test]
    fn spd_examples() {
        let outcomes: Vec<bool> = (0..10).map(|i| i < 8).chain((0..10).map(|i| i < 5)).collect();
        let groups: Vec<usize> = [0; 10].into_iter().chain([1; 10]).collect();
        let m = spd_matrix(&outcomes, &groups, &["a", "b"], 1).unwrap();
        assert!((m.spd[0][1] - 0.3).abs() < 1e-12);
        assert_eq!(m.spd[1][0], -m.spd[0][1]);
        let m = spd_matrix(&[true, false], &[0, 0], &["a", "b"], 1).unwrap();
        assert_eq!(m.spd, vec![vec![0.0]]);
    }

    #[test]
    fn binary_metrics_all_positive() {
        let truth: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let m = binary_metrics(&[true; 10], &truth).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall), (0.5, 0.5, 1.0));
        assert!((log_loss(&[0.5; 10], &truth).unwrap() - 2f64.ln()).abs() < 1e-12);
    }
}
