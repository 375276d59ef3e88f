//! Audit sections and the consolidated, schema-versioned report.
//!
//! Each section records the corpora it read as `role -> content digest`;
//! compiling rejects two sections that disagree on a role.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthaudit_nn::{seed, Model};

use crate::attacks::{blackbox_attack, whitebox_attack, AttackConfig, AttackPool, AttackReport, QueryOnly};
use crate::corpus::{
    records_digest, AnnotationVector, Image, ImageRecord, Sensitive, Split, ATTRIBUTES,
};
use crate::downstream::{evaluate_downstream, predict_records, DpGuarantee, HybridWeights, UtilityReport};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::generative::inherent_dp_delta;
use crate::metrics::{self, EmbeddingSet, SpdMatrix};
use crate::models::Classifier;

pub const SCHEMA_VERSION: &str = "synthaudit.report/1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const REPORT_FILE: &str = "report.json";

/// Outcome names in audit order: the two main heads, then the attributes.
pub fn outcome_names() -> Vec<String> {
    ["protest", "violence"]
        .iter()
        .chain(ATTRIBUTES.iter())
        .map(|s| s.to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub min_group_count: usize,
    /// Predicted violence at or above this counts as a positive outcome.
    pub violence_threshold: f64,
    /// Same, for protest and attribute probabilities.
    pub outcome_threshold: f64,
    pub outcomes: Vec<String>,
    /// Images drawn from each corpus for the demographic histograms.
    pub demographic_sample: usize,
    /// Images drawn from each corpus for FID and KID.
    pub embedding_sample: usize,
    pub inherent_dp_epsilons: Vec<f64>,
    pub inherent_dp_c: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            min_group_count: 20,
            violence_threshold: 0.5,
            outcome_threshold: 0.5,
            outcomes: outcome_names(),
            demographic_sample: 2500,
            embedding_sample: 1000,
            inherent_dp_epsilons: vec![1.0, 2.0, 5.0, 10.0],
            inherent_dp_c: 1.0,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("audit.violence_threshold", self.violence_threshold),
            ("audit.outcome_threshold", self.outcome_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        let known = outcome_names();
        for (i, o) in self.outcomes.iter().enumerate() {
            if !known.contains(o) {
                return Err(Error::config(format!("audit.outcomes[{i}]"), format!("unknown outcome `{o}`")));
            }
        }
        if self.demographic_sample == 0 || self.embedding_sample < 2 {
            return Err(Error::config("audit.embedding_sample", "sample sizes must be positive"));
        }
        if self.inherent_dp_epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::config("audit.inherent_dp_epsilons", "must be finite and >= 0"));
        }
        if !(self.inherent_dp_c > 0.0) {
            return Err(Error::config("audit.inherent_dp_c", "must be > 0"));
        }
        Ok(())
    }
}

// -------------------------------------------------------------------------
// corpus access

/// Read access to one declared corpus.
pub trait CorpusSource {
    fn role(&self) -> &str;
    fn digest(&self) -> &str;
    fn records(&self) -> Vec<&ImageRecord>;
}

pub struct Corpus<'a> {
    role: String,
    digest: String,
    records: Vec<&'a ImageRecord>,
}

impl<'a> Corpus<'a> {
    pub fn new(role: impl Into<String>, records: &[&'a ImageRecord]) -> Self {
        Self {
            role: role.into(),
            digest: records_digest(records.iter().copied()),
            records: records.to_vec(),
        }
    }
}

impl CorpusSource for Corpus<'_> {
    fn role(&self) -> &str {
        &self.role
    }

    fn digest(&self) -> &str {
        &self.digest
    }

    fn records(&self) -> Vec<&ImageRecord> {
        self.records.clone()
    }
}

fn inputs(sources: &[&dyn CorpusSource]) -> BTreeMap<String, String> {
    sources
        .iter()
        .map(|s| (s.role().to_string(), s.digest().to_string()))
        .collect()
}

/// Up to `k` records chosen by a keyed draw that depends only on the corpus
/// size, so identical corpora yield identical subsets.
fn subsample<'a>(records: &[&'a ImageRecord], k: usize, seed_: u64, stream: &str) -> Vec<&'a ImageRecord> {
    if records.len() <= k {
        return records.to_vec();
    }
    let mut idx = sample(&mut seed::rng(seed_, stream, records.len() as u64), records.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| records[i]).collect()
}

// -------------------------------------------------------------------------
// sections

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSection {
    pub inputs: BTreeMap<String, String>,
    pub n_real: usize,
    pub n_synth: usize,
    pub fid: f64,
    pub kid: f64,
    /// Over the protest head's two-way posterior.
    pub inception_score: f64,
    /// FID of uniform-noise images against the same real sample.
    pub noise_fid: f64,
    pub embedding_provenance: String,
}

/// FID, KID and IS of `synth` against `real`, embedded by the penultimate
/// layer of `embedder`.
pub fn audit_generative(
    real: &dyn CorpusSource,
    synth: &dyn CorpusSource,
    embedder: &Classifier<f32>,
    embedder_name: &str,
    cfg: &AuditConfig,
    seed_: u64,
) -> Result<GenerativeSection> {
    let r = subsample(&real.records(), cfg.embedding_sample, seed_, "audit-embed");
    let s = subsample(&synth.records(), cfg.embedding_sample, seed_, "audit-embed");
    if r.len() < 2 || s.len() < 2 {
        return Err(Error::Invalid("generative audit needs two images per corpus".into()));
    }
    let provenance = format!(
        "{embedder_name}@{}/penultimate",
        &embedder.params().digest()[..16]
    );
    let pr = predict_records(embedder, &r)?;
    let ps = predict_records(embedder, &s)?;
    let er = EmbeddingSet::new(pr.features, provenance.clone())?;
    let es = EmbeddingSet::new(ps.features, provenance.clone())?;
    let posteriors: Vec<Vec<f64>> = ps.probs.iter().map(|p| vec![p[0], 1.0 - p[0]]).collect();

    let side = s[0].image.side;
    let mut rng = seed::rng(seed_, "audit-noise", 0);
    let noise: Vec<ImageRecord> = (0..s.len())
        .map(|i| {
            let data: Vec<f32> = (0..side * side * 3).map(|_| rng.random::<f32>()).collect();
            Ok(ImageRecord {
                id: format!("noise-{i:06}"),
                image: Image::new(side, data)?,
                annotation: AnnotationVector::negative(None),
                split: Split::Test,
            })
        })
        .collect::<Result<_>>()?;
    let pn = predict_records(embedder, &noise.iter().collect::<Vec<_>>())?;
    let en = EmbeddingSet::new(pn.features, provenance.clone())?;

    Ok(GenerativeSection {
        inputs: inputs(&[real, synth]),
        n_real: r.len(),
        n_synth: s.len(),
        fid: metrics::fid(&er, &es)?,
        kid: metrics::kid(&er, &es)?,
        inception_score: metrics::inception_score(&posteriors)?,
        noise_fid: metrics::fid(&er, &en)?,
        embedding_provenance: provenance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilitySection {
    pub victim: String,
    pub inputs: BTreeMap<String, String>,
    pub report: UtilityReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotData {
    pub roc: Vec<RocRow>,
    pub scatter: Vec<ScatterRow>,
    pub attack_scores: Vec<AttackScoreRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocRow {
    pub victim: String,
    pub head: String,
    #[serde(with = "crate::serde_util::inf_as_null")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScatterRow {
    pub victim: String,
    pub id: String,
    pub truth: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackScoreRow {
    pub victim: String,
    pub kind: String,
    pub threshold: f64,
    pub id: String,
    pub score: f64,
    pub member: bool,
}

/// Head metrics of `victim` on the test split of `real`.
pub fn audit_utility(
    victim_name: &str,
    victim: &Classifier<f32>,
    real: &dyn CorpusSource,
    weights: HybridWeights,
    plots: &mut PlotData,
) -> Result<UtilitySection> {
    let records = real.records();
    let test: Vec<&ImageRecord> = records.iter().copied().filter(|r| r.split == Split::Test).collect();
    let ev = evaluate_downstream(victim, &test, weights)?;
    for (head, pts) in &ev.roc {
        plots.roc.extend(pts.iter().map(|p| RocRow {
            victim: victim_name.into(),
            head: head.clone(),
            threshold: p.threshold,
            fpr: p.fpr,
            tpr: p.tpr,
        }));
    }
    plots.scatter.extend(ev.scatter.iter().map(|s| ScatterRow {
        victim: victim_name.into(),
        id: s.id.clone(),
        truth: s.truth,
        predicted: s.predicted,
    }));
    Ok(UtilitySection {
        victim: victim_name.into(),
        inputs: inputs(&[real]),
        report: ev.report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub victim: String,
    pub inputs: BTreeMap<String, String>,
    pub pool_size: usize,
    pub n_attack_train: usize,
    pub blackbox: Vec<AttackReport>,
    pub whitebox: AttackReport,
    /// Loss the white-box features differentiate.
    pub loss_feature: String,
    pub whitebox_selected_epoch: Option<usize>,
}

/// Both attacks against one victim over a pool drawn from `real`.
pub fn audit_attacks(
    victim_name: &str,
    victim: &Classifier<f32>,
    pool: &AttackPool,
    real: &dyn CorpusSource,
    cfg: &AttackConfig,
    weights: HybridWeights,
    seed_: u64,
    plots: &mut PlotData,
) -> Result<AttackSection> {
    let records = real.records();
    let blackbox = blackbox_attack(&QueryOnly::new(victim), pool, &records, &cfg.thresholds)?;
    let wb = whitebox_attack(victim, pool, &records, cfg, weights, seed_)?;
    for r in blackbox.iter().chain(std::iter::once(&wb.report)) {
        plots.attack_scores.extend(r.scores.iter().map(|s| AttackScoreRow {
            victim: victim_name.into(),
            kind: r.kind.clone(),
            threshold: r.threshold,
            id: s.id.clone(),
            score: s.score,
            member: s.truth,
        }));
    }
    Ok(AttackSection {
        victim: victim_name.into(),
        inputs: inputs(&[real]),
        pool_size: pool.entries.len(),
        n_attack_train: pool.split(true).len(),
        blackbox,
        whitebox: wb.report,
        loss_feature: "hybrid".into(),
        whitebox_selected_epoch: wb.attacker.selected_epoch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdEntry {
    pub outcome: String,
    pub attribute: Sensitive,
    pub matrix: SpdMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessSection {
    pub victim: String,
    pub inputs: BTreeMap<String, String>,
    pub split: Split,
    pub n: usize,
    /// Test images skipped for lack of demographics.
    pub n_without_demographics: usize,
    pub violence_threshold: f64,
    pub outcome_threshold: f64,
    pub min_group_count: usize,
    pub matrices: Vec<SpdEntry>,
}

/// Binary outcome `name` from a row of head probabilities.
fn outcome(name: &str, p: &[f64], cfg: &AuditConfig) -> bool {
    match name {
        "protest" => p[0] >= cfg.outcome_threshold,
        "violence" => p[1] >= cfg.violence_threshold,
        a => {
            let j = ATTRIBUTES.iter().position(|x| *x == a).expect("validated outcome");
            p[2 + j] >= cfg.outcome_threshold
        }
    }
}

/// SPD matrices of `victim`'s predicted outcomes across the sensitive
/// attributes, over the test split of `real`.
pub fn audit_fairness(
    victim_name: &str,
    victim: &Classifier<f32>,
    real: &dyn CorpusSource,
    cfg: &AuditConfig,
) -> Result<FairnessSection> {
    cfg.validate()?;
    let records = real.records();
    let test: Vec<&ImageRecord> = records.iter().copied().filter(|r| r.split == Split::Test).collect();
    let with: Vec<&ImageRecord> = test.iter().copied().filter(|r| r.annotation.demographics.is_some()).collect();
    if with.is_empty() {
        return Err(Error::Invalid("fairness audit needs test images with demographics".into()));
    }
    let probs = predict_records(victim, &with)?.probs;
    let mut matrices = Vec::new();
    for name in &cfg.outcomes {
        let y: Vec<bool> = probs.iter().map(|p| outcome(name, p, cfg)).collect();
        for attr in Sensitive::ALL {
            let groups: Vec<usize> = with
                .iter()
                .map(|r| r.annotation.demographics.expect("filtered").get(attr))
                .collect();
            matrices.push(SpdEntry {
                outcome: name.clone(),
                attribute: attr,
                matrix: metrics::spd_matrix(&y, &groups, attr.categories(), cfg.min_group_count)?,
            });
        }
    }
    Ok(FairnessSection {
        victim: victim_name.into(),
        inputs: inputs(&[real]),
        split: Split::Test,
        n: with.len(),
        n_without_demographics: test.len() - with.len(),
        violence_threshold: cfg.violence_threshold,
        outcome_threshold: cfg.outcome_threshold,
        min_group_count: cfg.min_group_count,
        matrices,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub attribute: Sensitive,
    pub categories: Vec<String>,
    pub real: Vec<usize>,
    pub synth: Vec<usize>,
    pub tv_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicsSection {
    pub inputs: BTreeMap<String, String>,
    pub sample_size: usize,
    pub n_real: usize,
    pub n_synth: usize,
    pub histograms: Vec<Histogram>,
}

/// Category histograms of both corpora and their total-variation distance.
/// Synthetic demographics are the conditioning annotations.
pub fn audit_demographic_shift(
    real: &dyn CorpusSource,
    synth: &dyn CorpusSource,
    cfg: &AuditConfig,
    seed_: u64,
) -> Result<DemographicsSection> {
    let pick = |src: &dyn CorpusSource| -> Vec<crate::corpus::Demographics> {
        let with: Vec<&ImageRecord> = src
            .records()
            .into_iter()
            .filter(|r| r.annotation.demographics.is_some())
            .collect();
        subsample(&with, cfg.demographic_sample, seed_, "audit-demographics")
            .iter()
            .map(|r| r.annotation.demographics.expect("filtered"))
            .collect()
    };
    let dr = pick(real);
    let ds = pick(synth);
    if dr.is_empty() || ds.is_empty() {
        return Err(Error::Invalid("demographic audit needs annotated images in both corpora".into()));
    }
    let mut histograms = Vec::new();
    for attr in Sensitive::ALL {
        let k = attr.categories().len();
        let count = |d: &[crate::corpus::Demographics]| {
            let mut h = vec![0usize; k];
            for x in d {
                h[x.get(attr)] += 1;
            }
            h
        };
        let (hr, hs) = (count(&dr), count(&ds));
        let to_f = |h: &[usize]| h.iter().map(|&c| c as f64).collect::<Vec<_>>();
        histograms.push(Histogram {
            attribute: attr,
            categories: attr.categories().iter().map(|s| s.to_string()).collect(),
            tv_distance: metrics::tv_distance(&to_f(&hr), &to_f(&hs))?,
            real: hr,
            synth: hs,
        });
    }
    Ok(DemographicsSection {
        inputs: inputs(&[real, synth]),
        sample_size: cfg.demographic_sample,
        n_real: dr.len(),
        n_synth: ds.len(),
        histograms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InherentDpRow {
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InherentDpSection {
    pub n_emitted: usize,
    pub m_train: usize,
    pub c: f64,
    pub rows: Vec<InherentDpRow>,
}

pub fn audit_inherent_dp(n_emitted: usize, m_train: usize, cfg: &AuditConfig) -> Result<InherentDpSection> {
    let rows = cfg
        .inherent_dp_epsilons
        .iter()
        .map(|&epsilon| {
            Ok(InherentDpRow {
                epsilon,
                delta: inherent_dp_delta(n_emitted, m_train, epsilon, cfg.inherent_dp_c)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(InherentDpSection {
        n_emitted,
        m_train,
        c: cfg.inherent_dp_c,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSection {
    pub victim: String,
    pub n_train: usize,
    pub guarantee: DpGuarantee,
}

// -------------------------------------------------------------------------
// report

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sections {
    pub generative: Option<GenerativeSection>,
    pub utility: Vec<UtilitySection>,
    pub attacks: Vec<AttackSection>,
    pub fairness: Vec<FairnessSection>,
    pub demographics: Option<DemographicsSection>,
    pub inherent_dp: Option<InherentDpSection>,
    pub dp: Vec<DpSection>,
}

impl Sections {
    fn declared_inputs(&self) -> Vec<(String, &BTreeMap<String, String>)> {
        let mut out = Vec::new();
        if let Some(g) = &self.generative {
            out.push(("generative".to_string(), &g.inputs));
        }
        for u in &self.utility {
            out.push((format!("utility[{}]", u.victim), &u.inputs));
        }
        for a in &self.attacks {
            out.push((format!("attacks[{}]", a.victim), &a.inputs));
        }
        for f in &self.fairness {
            out.push((format!("fairness[{}]", f.victim), &f.inputs));
        }
        if let Some(d) = &self.demographics {
            out.push(("demographics".to_string(), &d.inputs));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditReport {
    pub schema_version: String,
    pub tool_version: String,
    pub config_digest: String,
    pub seed: u64,
    pub corpus_digests: BTreeMap<String, String>,
    /// Absent in deterministic runs; excluded from the digest.
    pub generated_at_unix: Option<u64>,
    pub sections: Sections,
    /// SHA-256 of the report with this field empty and no timestamp.
    pub digest: String,
}

/// Merges sections into a report. Two sections that read different content
/// under the same corpus role are a conflict.
pub fn compile_report(
    config_digest: &str,
    seed_: u64,
    generated_at_unix: Option<u64>,
    sections: Sections,
) -> Result<AuditReport> {
    let mut corpus_digests: BTreeMap<String, String> = BTreeMap::new();
    let mut owner: BTreeMap<String, String> = BTreeMap::new();
    for (section, declared) in sections.declared_inputs() {
        for (role, digest) in declared {
            match corpus_digests.get(role) {
                Some(d) if d != digest => {
                    return Err(Error::Conflict(format!(
                        "corpus `{role}` is {} in {} but {} in {section}",
                        &d[..12.min(d.len())],
                        owner[role],
                        &digest[..12.min(digest.len())]
                    )));
                }
                Some(_) => {}
                None => {
                    corpus_digests.insert(role.clone(), digest.clone());
                    owner.insert(role.clone(), section.clone());
                }
            }
        }
    }
    let mut report = AuditReport {
        schema_version: SCHEMA_VERSION.into(),
        tool_version: TOOL_VERSION.into(),
        config_digest: config_digest.into(),
        seed: seed_,
        corpus_digests,
        generated_at_unix,
        sections,
        digest: String::new(),
    };
    validate_report(&report)?;
    report.digest = report_digest(&report)?;
    Ok(report)
}

/// Digest over the canonical serialization, ignoring the timestamp and the
/// stored digest.
pub fn report_digest(report: &AuditReport) -> Result<String> {
    let mut r = report.clone();
    r.digest = String::new();
    r.generated_at_unix = None;
    let bytes = serde_json::to_vec(&r).map_err(|e| Error::Serde(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("report value {what} is not finite")))
    }
}

pub fn validate_report(r: &AuditReport) -> Result<()> {
    if r.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema {
            found: r.schema_version.clone(),
            expected: SCHEMA_VERSION.into(),
        });
    }
    let s = &r.sections;
    if let Some(g) = &s.generative {
        for (k, v) in [("fid", g.fid), ("kid", g.kid), ("inception_score", g.inception_score), ("noise_fid", g.noise_fid)] {
            finite(&format!("generative.{k}"), v)?;
        }
        if g.n_real == 0 || g.n_synth == 0 || g.embedding_provenance.is_empty() {
            return Err(Error::Invalid("generative section lacks counts or provenance".into()));
        }
    }
    for u in &s.utility {
        finite(&format!("utility[{}].hybrid_loss", u.victim), u.report.hybrid_loss)?;
    }
    for a in &s.attacks {
        for rep in a.blackbox.iter().chain(std::iter::once(&a.whitebox)) {
            for (k, v) in [("auc", rep.auc), ("accuracy", rep.accuracy), ("log_loss", rep.log_loss)] {
                finite(&format!("attacks[{}].{}.{k}", a.victim, rep.kind), v)?;
            }
            if rep.n == 0 {
                return Err(Error::Invalid(format!("attacks[{}] has an empty test split", a.victim)));
            }
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for v in s.utility.iter().map(|u| ("utility", &u.victim)).chain(s.attacks.iter().map(|a| ("attacks", &a.victim))) {
        if !seen.insert(v) {
            return Err(Error::Conflict(format!("{} section for victim `{}` appears twice", v.0, v.1)));
        }
    }
    Ok(())
}

pub fn to_json(report: &AuditReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Serde(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses a report, checking its schema version and digest.
pub fn parse_report(text: &str) -> Result<AuditReport> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
    let found = v.get("schema_version").and_then(|s| s.as_str()).unwrap_or("<missing>");
    if found != SCHEMA_VERSION {
        return Err(Error::Schema {
            found: found.into(),
            expected: SCHEMA_VERSION.into(),
        });
    }
    let r: AuditReport = serde_json::from_value(v).map_err(|e| Error::Serde(e.to_string()))?;
    validate_report(&r)?;
    let d = report_digest(&r)?;
    if d != r.digest {
        return Err(Error::Invalid(format!("report digest {} does not match content {d}", r.digest)));
    }
    Ok(r)
}

pub fn read_report(path: &Path) -> Result<AuditReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text)
}

fn csv_bytes<S: Serialize>(rows: &[S], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

#[derive(Serialize)]
struct SpdCellRow<'a> {
    victim: &'a str,
    outcome: &'a str,
    attribute: &'a str,
    group_i: &'a str,
    group_j: &'a str,
    spd: f64,
    ci_lo: f64,
    ci_hi: f64,
    n_i: usize,
    n_j: usize,
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    attribute: &'a str,
    category: &'a str,
    real_count: usize,
    synth_count: usize,
    real_fraction: f64,
    synth_fraction: f64,
}

/// Writes `report.json` and the plot-data CSVs into `dir`.
pub fn write_report(report: &AuditReport, plots: &PlotData, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(REPORT_FILE), to_json(report)?.as_bytes())?;
    let s = &report.sections;

    write_atomic(&dir.join("roc.csv"), &csv_bytes(&plots.roc, &["victim", "head", "threshold", "fpr", "tpr"])?)?;
    write_atomic(
        &dir.join("scatter.csv"),
        &csv_bytes(&plots.scatter, &["victim", "id", "truth", "predicted"])?,
    )?;
    write_atomic(
        &dir.join("attack_scores.csv"),
        &csv_bytes(&plots.attack_scores, &["victim", "kind", "threshold", "id", "score", "member"])?,
    )?;

    let mut cells = Vec::new();
    for f in &s.fairness {
        for e in &f.matrices {
            let m = &e.matrix;
            for i in 0..m.groups.len() {
                for j in 0..m.groups.len() {
                    cells.push(SpdCellRow {
                        victim: &f.victim,
                        outcome: &e.outcome,
                        attribute: e.attribute.name(),
                        group_i: &m.groups[i],
                        group_j: &m.groups[j],
                        spd: m.spd[i][j],
                        ci_lo: m.ci[i][j][0],
                        ci_hi: m.ci[i][j][1],
                        n_i: m.counts[i],
                        n_j: m.counts[j],
                    });
                }
            }
        }
    }
    write_atomic(
        &dir.join("spd_cells.csv"),
        &csv_bytes(
            &cells,
            &["victim", "outcome", "attribute", "group_i", "group_j", "spd", "ci_lo", "ci_hi", "n_i", "n_j"],
        )?,
    )?;

    let mut bars = Vec::new();
    if let Some(d) = &s.demographics {
        for h in &d.histograms {
            let (tr, ts) = (h.real.iter().sum::<usize>().max(1), h.synth.iter().sum::<usize>().max(1));
            for (k, c) in h.categories.iter().enumerate() {
                bars.push(HistogramRow {
                    attribute: h.attribute.name(),
                    category: c,
                    real_count: h.real[k],
                    synth_count: h.synth[k],
                    real_fraction: h.real[k] as f64 / tr as f64,
                    synth_fraction: h.synth[k] as f64 / ts as f64,
                });
            }
        }
    }
    write_atomic(
        &dir.join("histograms.csv"),
        &csv_bytes(
            &bars,
            &["attribute", "category", "real_count", "synth_count", "real_fraction", "synth_fraction"],
        )?,
    )?;
    Ok(())
}

// -------------------------------------------------------------------------
// comparison

/// Which direction of change is an improvement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Better {
    /// Utility, inception score.
    Higher,
    /// Attack success, distribution distance, privacy loss.
    Lower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
    pub better: Better,
    /// True when `b` improves on `a` under `better`.
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<DeltaRow>,
    /// Metrics present in only one report.
    pub only_a: Vec<String>,
    pub only_b: Vec<String>,
}

/// Flattened scalar metrics keyed by path; victim names appear as the second
/// path component.
pub fn flatten_metrics(r: &AuditReport) -> BTreeMap<String, (f64, Better)> {
    use Better::*;
    let mut m = BTreeMap::new();
    let s = &r.sections;
    if let Some(g) = &s.generative {
        m.insert("generative.fid".into(), (g.fid, Lower));
        m.insert("generative.kid".into(), (g.kid, Lower));
        m.insert("generative.inception_score".into(), (g.inception_score, Higher));
    }
    for u in &s.utility {
        let v = &u.victim;
        if let Some(a) = u.report.protest.auc {
            m.insert(format!("utility.{v}.protest.auc"), (a, Higher));
        }
        for h in &u.report.attributes {
            if let Some(a) = h.auc {
                m.insert(format!("utility.{v}.{}.auc", h.head), (a, Higher));
            }
        }
        if let Some(f) = &u.report.violence {
            m.insert(format!("utility.{v}.violence.r"), (f.r, Higher));
        }
        m.insert(format!("utility.{v}.hybrid_loss"), (u.report.hybrid_loss, Lower));
    }
    for a in &s.attacks {
        let v = &a.victim;
        for rep in a.blackbox.iter().chain(std::iter::once(&a.whitebox)) {
            let key = format!("attack.{v}.{}@{}", rep.kind, rep.threshold);
            m.insert(format!("{key}.auc"), (rep.auc, Lower));
            m.insert(format!("{key}.accuracy"), (rep.accuracy, Lower));
            m.insert(format!("{key}.precision"), (rep.precision, Lower));
            m.insert(format!("{key}.recall"), (rep.recall, Lower));
        }
    }
    for f in &s.fairness {
        for e in &f.matrices {
            let worst = e.matrix.spd.iter().flatten().fold(0.0f64, |acc, x| acc.max(x.abs()));
            m.insert(
                format!("fairness.{}.{}.{}.max_abs_spd", f.victim, e.outcome, e.attribute.name()),
                (worst, Lower),
            );
        }
    }
    if let Some(d) = &s.demographics {
        for h in &d.histograms {
            m.insert(format!("demographics.{}.tv", h.attribute.name()), (h.tv_distance, Lower));
        }
    }
    if let Some(i) = &s.inherent_dp {
        for row in &i.rows {
            m.insert(format!("inherent_dp.delta@{}", row.epsilon), (row.delta, Lower));
        }
    }
    for d in &s.dp {
        if d.guarantee.epsilon.is_finite() {
            m.insert(format!("dp.{}.epsilon", d.victim), (d.guarantee.epsilon, Lower));
        }
    }
    m
}

const VICTIM_SCOPED: [&str; 4] = ["utility", "attack", "fairness", "dp"];

fn victim_of(key: &str) -> Option<&str> {
    let mut parts = key.splitn(3, '.');
    let head = parts.next()?;
    VICTIM_SCOPED.contains(&head).then(|| parts.next()).flatten()
}

/// Keeps unscoped metrics and those of `victim`, with the victim renamed `*`.
fn focus(m: BTreeMap<String, (f64, Better)>, victim: &str) -> BTreeMap<String, (f64, Better)> {
    m.into_iter()
        .filter_map(|(k, v)| match victim_of(&k) {
            None => Some((k, v)),
            Some(x) if x == victim => {
                let mut parts: Vec<&str> = k.splitn(3, '.').collect();
                parts[1] = "*";
                Some((parts.join("."), v))
            }
            Some(_) => None,
        })
        .collect()
}

/// Metric deltas `b - a`. With `victims = Some((va, vb))`, victim `va` of `a`
/// is matched against victim `vb` of `b` (the pair may come from one report).
pub fn compare(a: &AuditReport, b: &AuditReport, victims: Option<(&str, &str)>) -> Result<Comparison> {
    for r in [a, b] {
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                found: r.schema_version.clone(),
                expected: SCHEMA_VERSION.into(),
            });
        }
    }
    let mut ma = flatten_metrics(a);
    let mut mb = flatten_metrics(b);
    if let Some((va, vb)) = victims {
        ma = focus(ma, va);
        mb = focus(mb, vb);
    }
    let mut rows = Vec::new();
    let mut only_a = Vec::new();
    for (k, &(va, better)) in &ma {
        match mb.get(k) {
            Some(&(vb, _)) => {
                let delta = vb - va;
                rows.push(DeltaRow {
                    metric: k.clone(),
                    a: va,
                    b: vb,
                    delta,
                    better,
                    improved: match better {
                        Better::Higher => delta > 0.0,
                        Better::Lower => delta < 0.0,
                    },
                });
            }
            None => only_a.push(k.clone()),
        }
    }
    let only_b = mb.keys().filter(|k| !ma.contains_key(*k)).cloned().collect();
    Ok(Comparison { rows, only_a, only_b })
}

/// Plain-text table of a comparison.
pub fn format_comparison(c: &Comparison) -> String {
    let mut out = String::new();
    let w = c.rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
    let _ = writeln!(out, "{:<w$}  {:>10}  {:>10}  {:>10}  better", "metric", "a", "b", "b - a");
    for r in &c.rows {
        let mark = if r.delta == 0.0 { "" } else if r.improved { "  (b)" } else { "  (a)" };
        let dir = match r.better {
            Better::Higher => "higher",
            Better::Lower => "lower",
        };
        let _ = writeln!(out, "{:<w$}  {:>10.4}  {:>10.4}  {:>+10.4}  {dir}{mark}", r.metric, r.a, r.b, r.delta);
    }
    out
}
