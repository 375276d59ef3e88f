//! Experiment configuration and the staged pipeline that binds the modules
//! together: corpus, GAN, synthetic emission, victims, attacks, audit.
//!
//! Every stage writes into its own directory under the run directory along
//! with `stage.json` (the stage key) and `config.toml` (the resolved
//! configuration). A stage whose key matches a completed `stage.json` is
//! skipped unless forced. Keys chain the stage's own settings with the keys of
//! the stages it reads, so editing audit settings does not retrain the GAN.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthaudit_nn::{seed, Checkpoint, Model};

use crate::attacks::{AttackConfig, AttackPool};
use crate::audit::{self, AttackScoreRow, AttackSection, AuditConfig, Corpus, CorpusSource as _, PlotData, Sections};
use crate::corpus::{load_corpus, write_corpus, render_corpus, split_of, ImageRecord, ProceduralSpec, Split, MANIFEST_FILE};
use crate::downstream::{train_downstream, DownstreamConfig, DpGuarantee, DpSgdConfig, EpochLog};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::generative::{emit_synthetic, train_gan, GanData, GanEvent, GanTrainConfig};
use crate::models::{Classifier, Generator, SampleShape, GENERATOR_MODEL};

pub const OUTPUT_ROOT_ENV: &str = "SYNTHAUDIT_OUTPUT_ROOT";
pub const STAGE_FILE: &str = "stage.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimsConfig {
    /// Victim trained on the real train split.
    pub real: bool,
    /// Victim trained on the synthetic emission.
    pub synthetic: bool,
}

impl Default for VictimsConfig {
    fn default() -> Self {
        Self {
            real: true,
            synthetic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Zero wall-clock fields and omit timestamps.
    pub deterministic: bool,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub corpus: ProceduralSpec,
    pub gan: GanTrainConfig,
    pub downstream: DownstreamConfig,
    /// When present, a DP-SGD victim is trained on the real train split.
    pub dp: Option<DpSgdConfig>,
    pub victims: VictimsConfig,
    pub attack: AttackConfig,
    pub audit: AuditConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            output_dir: PathBuf::from("runs/default"),
            corpus: ProceduralSpec::default(),
            gan: GanTrainConfig::default(),
            downstream: DownstreamConfig::default(),
            dp: None,
            victims: VictimsConfig::default(),
            attack: AttackConfig::default(),
            audit: AuditConfig::default(),
        }
    }
}

fn set_dotted(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "malformed override path"));
    }
    let mut table = root;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(parts[..=i].join("."), "is not a table")),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// TOML literal if it parses as one, otherwise a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Parses TOML text with `path = value` overrides applied on top.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config("<config>", e.to_string()))?;
        for (path, raw) in overrides {
            set_dotted(&mut table, path, override_value(raw))?;
        }
        let json = serde_json::to_value(&table).map_err(|e| Error::Serde(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(json).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.gan.validate()?;
        self.downstream.validate()?;
        if let Some(d) = &self.dp {
            d.validate()?;
        }
        self.attack.validate()?;
        self.audit.validate()?;
        if self.corpus.demographic_priors.is_none() && !self.audit.outcomes.is_empty() {
            return Err(Error::config(
                "corpus.demographic_priors",
                "the fairness audit needs demographics; set audit.outcomes = [] to skip it",
            ));
        }
        if self.corpus.test_fraction == 0.0 {
            return Err(Error::config("corpus.test_fraction", "the audit needs a test split"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 over the canonical JSON form, without the output location and
    /// the deterministic flag.
    pub fn digest(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Serde(e.to_string()))?;
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
            o.remove("deterministic");
        }
        Ok(hex::encode(Sha256::digest(v.to_string().as_bytes())))
    }

    /// `output_dir`, under the output root when relative.
    pub fn run_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }
}

// -------------------------------------------------------------------------
// stages

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenCorpus,
    TrainGan,
    EmitSynth,
    TrainDownstream,
    Attack,
    Audit,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::GenCorpus,
        Stage::TrainGan,
        Stage::EmitSynth,
        Stage::TrainDownstream,
        Stage::Attack,
        Stage::Audit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainGan => "train-gan",
            Stage::EmitSynth => "emit-synth",
            Stage::TrainDownstream => "train-downstream",
            Stage::Attack => "attack",
            Stage::Audit => "audit",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenCorpus => "corpus",
            Stage::TrainGan => "gan",
            Stage::EmitSynth => "synth",
            Stage::TrainDownstream => "victims",
            Stage::Attack => "attack",
            Stage::Audit => "audit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub tool_version: String,
    pub completed_unix: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Serialize, Deserialize)]
struct GanMeta {
    shape: SampleShape,
    code_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct VictimSummary {
    name: String,
    n_train: usize,
    steps: u64,
    dp: Option<DpGuarantee>,
}

#[derive(Serialize, Deserialize)]
struct AttackArtifact {
    section: AttackSection,
    scores: Vec<AttackScoreRow>,
}

fn json_bytes<S: Serialize>(v: &S) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v).map_err(|e| Error::Serde(e.to_string()))?;
    b.push(b'\n');
    Ok(b)
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn jsonl<S: Serialize>(rows: impl IntoIterator<Item = S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r).map_err(|e| Error::Serde(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn to_json_string<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Serde(e.to_string()))
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn victim_names(cfg: &ExperimentConfig) -> Vec<&'static str> {
    let mut v = Vec::new();
    if cfg.victims.real {
        v.push("real");
    }
    if cfg.victims.synthetic {
        v.push("synthetic");
    }
    if cfg.dp.is_some() {
        v.push("dp");
    }
    v
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    root: PathBuf,
    force: bool,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.run_dir();
        Ok(Self { cfg, root, force })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join(Stage::Audit.dir()).join(audit::REPORT_FILE)
    }

    fn dir(&self, s: Stage) -> PathBuf {
        self.root.join(s.dir())
    }

    pub fn dependencies(&self, s: Stage) -> Vec<Stage> {
        match s {
            Stage::GenCorpus => vec![],
            Stage::TrainGan => vec![Stage::GenCorpus],
            Stage::EmitSynth => vec![Stage::TrainGan],
            Stage::TrainDownstream if self.cfg.victims.synthetic => vec![Stage::GenCorpus, Stage::EmitSynth],
            Stage::TrainDownstream => vec![Stage::GenCorpus],
            Stage::Attack => vec![Stage::TrainDownstream],
            Stage::Audit => vec![Stage::Attack, Stage::EmitSynth],
        }
    }

    /// Key of a stage: its own settings chained with its dependencies' keys.
    pub fn stage_key(&self, s: Stage) -> Result<String> {
        let c = &self.cfg;
        let seed_ = c.seed.to_string();
        let own = match s {
            Stage::GenCorpus => to_json_string(&c.corpus)?,
            Stage::TrainGan => to_json_string(&c.gan)? + &seed_,
            Stage::EmitSynth => seed_,
            Stage::TrainDownstream => {
                to_json_string(&(&c.downstream, &c.dp, &c.victims))? + &seed_
            }
            Stage::Attack => to_json_string(&c.attack)? + &seed_,
            Stage::Audit => to_json_string(&c.audit)? + &seed_,
        };
        let mut parts = vec![s.name().to_string(), own];
        for d in self.dependencies(s) {
            parts.push(self.stage_key(d)?);
        }
        Ok(hash_parts(&parts.iter().map(String::as_str).collect::<Vec<_>>()))
    }

    fn completed(&self, s: Stage, key: &str) -> bool {
        read_json::<StageRecord>(&self.dir(s).join(STAGE_FILE)).is_ok_and(|r| r.key == key)
    }

    fn mark(&self, s: Stage, key: &str) -> Result<()> {
        let dir = self.dir(s);
        write_atomic(&dir.join(CONFIG_SNAPSHOT), self.cfg.to_toml()?.as_bytes())?;
        let rec = StageRecord {
            stage: s.name().into(),
            key: key.into(),
            tool_version: audit::TOOL_VERSION.into(),
            completed_unix: (!self.cfg.deterministic).then(now_unix),
        };
        write_atomic(&dir.join(STAGE_FILE), &json_bytes(&rec)?)
    }

    /// Stages needed for `targets`, dependencies first.
    pub fn plan(&self, targets: &[Stage]) -> Vec<Stage> {
        let mut want = std::collections::BTreeSet::new();
        let mut stack: Vec<Stage> = targets.to_vec();
        while let Some(s) = stack.pop() {
            if want.insert(s) {
                stack.extend(self.dependencies(s));
            }
        }
        want.into_iter().collect()
    }

    /// Runs `targets` and whatever they depend on.
    pub fn run(&self, targets: &[Stage]) -> Result<Vec<(Stage, StageOutcome)>> {
        let mut out = Vec::new();
        for s in self.plan(targets) {
            out.push((s, self.run_stage(s)?));
        }
        Ok(out)
    }

    fn run_stage(&self, s: Stage) -> Result<StageOutcome> {
        let key = self.stage_key(s)?;
        if !self.force && self.completed(s, &key) {
            tracing::info!(stage = s.name(), "skipping completed stage");
            return Ok(StageOutcome::Skipped);
        }
        tracing::info!(stage = s.name(), "stage started");
        fs::create_dir_all(self.dir(s)).map_err(|e| Error::io(self.dir(s), e))?;
        // an interrupted rerun must not look complete
        let _ = fs::remove_file(self.dir(s).join(STAGE_FILE));
        match s {
            Stage::GenCorpus => self.gen_corpus()?,
            Stage::TrainGan => self.train_gan()?,
            Stage::EmitSynth => self.emit_synth()?,
            Stage::TrainDownstream => self.train_victims()?,
            Stage::Attack => self.attack()?,
            Stage::Audit => self.audit()?,
        }
        self.mark(s, &key)?;
        tracing::info!(stage = s.name(), "stage finished");
        Ok(StageOutcome::Ran)
    }

    pub fn real_corpus(&self) -> Result<Vec<ImageRecord>> {
        load_corpus(&self.dir(Stage::GenCorpus).join(MANIFEST_FILE))
    }

    pub fn synthetic_corpus(&self) -> Result<Vec<ImageRecord>> {
        load_corpus(&self.dir(Stage::EmitSynth).join(MANIFEST_FILE))
    }

    pub fn load_victim(&self, name: &str) -> Result<Classifier<f32>> {
        let path = self.dir(Stage::TrainDownstream).join(name).join("classifier.ckpt");
        let ck = Checkpoint::<f32>::load(&path)?;
        Classifier::from_params(ck.params)
    }

    fn gen_corpus(&self) -> Result<()> {
        let records = render_corpus(&self.cfg.corpus)?;
        write_corpus(&records, &self.dir(Stage::GenCorpus))
    }

    fn train_gan(&self) -> Result<()> {
        let real = self.real_corpus()?;
        let train = split_of(&real, Split::Train);
        let data = GanData::<f32>::from_records(&train)?;
        let dir = self.dir(Stage::TrainGan);
        let log_path = dir.join("train_log.jsonl");
        let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let header = serde_json::json!({
            "header": {
                "config": &self.cfg.gan,
                "seed": self.cfg.seed,
                "n_train": data.len(),
            }
        });
        writeln!(log, "{header}").map_err(|e| Error::io(&log_path, e))?;
        let deterministic = self.cfg.deterministic;
        let snapshot = dir.join("snapshot_generator.ckpt");
        let mut on_event = |ev: GanEvent<'_>| -> Result<()> {
            match ev {
                GanEvent::Log(entry) => {
                    let mut e = entry.clone();
                    if deterministic {
                        e.wall_secs = 0.0;
                    }
                    let line = serde_json::to_string(&e).map_err(|err| Error::Serde(err.to_string()))?;
                    writeln!(log, "{line}").map_err(|err| Error::io(&log_path, err))
                }
                GanEvent::Snapshot { step, generator, .. } => {
                    Checkpoint::new(generator.params().clone(), step as u64, self.cfg.seed).save(&snapshot)?;
                    Ok(())
                }
            }
        };
        let gan = train_gan(&data, &self.cfg.gan, self.cfg.seed, &mut on_event)?;
        let steps = self.cfg.gan.steps as u64;
        Checkpoint::new(gan.generator.params().clone(), steps, self.cfg.seed).save(&dir.join("generator.ckpt"))?;
        Checkpoint::new(gan.critic.params().clone(), steps, self.cfg.seed).save(&dir.join("critic.ckpt"))?;
        let meta = GanMeta {
            shape: gan.generator.shape(),
            code_dim: gan.generator.code_dim(),
        };
        write_atomic(&dir.join("meta.json"), &json_bytes(&meta)?)
    }

    fn load_generator(&self) -> Result<Generator<f32>> {
        let dir = self.dir(Stage::TrainGan);
        let meta: GanMeta = read_json(&dir.join("meta.json"))?;
        let ck = Checkpoint::<f32>::load(&dir.join("generator.ckpt"))?;
        if ck.params.descriptor().model != GENERATOR_MODEL {
            return Err(Error::Invalid("gan/generator.ckpt is not a generator".into()));
        }
        Generator::from_params(ck.params, meta.shape)
    }

    fn emit_synth(&self) -> Result<()> {
        let generator = self.load_generator()?;
        let real = self.real_corpus()?;
        let train = split_of(&real, Split::Train);
        let synth = emit_synthetic(&generator, &train, seed::derive(self.cfg.seed, "emit", 0))?;
        write_corpus(&synth, &self.dir(Stage::EmitSynth))
    }

    fn train_victims(&self) -> Result<()> {
        let real = self.real_corpus()?;
        let real_train = split_of(&real, Split::Train);
        let synth = if self.cfg.victims.synthetic {
            self.synthetic_corpus()?
        } else {
            Vec::new()
        };
        let synth_refs: Vec<&ImageRecord> = synth.iter().collect();
        for name in victim_names(&self.cfg) {
            let (train, dp) = match name {
                "real" => (&real_train, None),
                "synthetic" => (&synth_refs, None),
                _ => (&real_train, self.cfg.dp.as_ref()),
            };
            tracing::info!(victim = name, n = train.len(), "training victim");
            let trained = train_downstream(train, &self.cfg.downstream, dp, self.cfg.seed)?;
            let dir = self.dir(Stage::TrainDownstream).join(name);
            Checkpoint::new(trained.classifier.params().clone(), trained.steps, self.cfg.seed)
                .save(&{
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    dir.join("classifier.ckpt")
                })?;
            let log: Vec<EpochLog> = trained
                .log
                .iter()
                .map(|e| EpochLog {
                    wall_secs: if self.cfg.deterministic { 0.0 } else { e.wall_secs },
                    ..e.clone()
                })
                .collect();
            write_atomic(&dir.join("train_log.jsonl"), &jsonl(&log)?)?;
            let summary = VictimSummary {
                name: name.into(),
                n_train: train.len(),
                steps: trained.steps,
                dp: trained.dp,
            };
            write_atomic(&dir.join("summary.json"), &json_bytes(&summary)?)?;
        }
        Ok(())
    }

    fn pool(&self, real: &[ImageRecord]) -> Result<AttackPool> {
        let members = split_of(real, Split::Train);
        let non_members = split_of(real, Split::Test);
        AttackPool::build(&members, &non_members, &self.cfg.attack, self.cfg.seed)
    }

    fn attack(&self) -> Result<()> {
        let real = self.real_corpus()?;
        let refs: Vec<&ImageRecord> = real.iter().collect();
        let corpus = Corpus::new("real", &refs);
        let pool = self.pool(&real)?;
        let dir = self.dir(Stage::Attack);
        write_atomic(&dir.join("pool.json"), &json_bytes(&pool)?)?;
        for name in victim_names(&self.cfg) {
            let victim = self.load_victim(name)?;
            let mut plots = PlotData::default();
            let section = audit::audit_attacks(
                name,
                &victim,
                &pool,
                &corpus,
                &self.cfg.attack,
                self.cfg.downstream.weights,
                self.cfg.seed,
                &mut plots,
            )?;
            tracing::info!(
                victim = name,
                whitebox_auc = section.whitebox.auc,
                "attacks evaluated"
            );
            let art = AttackArtifact {
                section,
                scores: plots.attack_scores,
            };
            write_atomic(&dir.join(format!("{name}.json")), &json_bytes(&art)?)?;
        }
        Ok(())
    }

    fn audit(&self) -> Result<()> {
        let cfg = &self.cfg;
        let real = self.real_corpus()?;
        let synth = self.synthetic_corpus()?;
        let real_refs: Vec<&ImageRecord> = real.iter().collect();
        let synth_refs: Vec<&ImageRecord> = synth.iter().collect();
        let real_c = Corpus::new("real", &real_refs);
        let synth_c = Corpus::new("synthetic", &synth_refs);
        let real_train = Corpus::new("real_train", &split_of(&real, Split::Train));
        let mut plots = PlotData::default();
        let mut sections = Sections::default();
        let names = victim_names(cfg);
        let victims: BTreeMap<&str, Classifier<f32>> = names
            .iter()
            .map(|&n| Ok((n, self.load_victim(n)?)))
            .collect::<Result<_>>()?;

        if let Some(embedder) = victims.get("real") {
            sections.generative = Some(audit::audit_generative(
                &real_train,
                &synth_c,
                embedder,
                "victim-real",
                &cfg.audit,
                cfg.seed,
            )?);
        }
        for &name in &names {
            let v = &victims[name];
            sections
                .utility
                .push(audit::audit_utility(name, v, &real_c, cfg.downstream.weights, &mut plots)?);
            let art: AttackArtifact = read_json(&self.dir(Stage::Attack).join(format!("{name}.json")))?;
            sections.attacks.push(art.section);
            plots.attack_scores.extend(art.scores);
            if !cfg.audit.outcomes.is_empty() {
                sections.fairness.push(audit::audit_fairness(name, v, &real_c, &cfg.audit)?);
            }
            let summary: VictimSummary =
                read_json(&self.dir(Stage::TrainDownstream).join(name).join("summary.json"))?;
            if let Some(g) = summary.dp {
                sections.dp.push(audit::DpSection {
                    victim: name.into(),
                    n_train: summary.n_train,
                    guarantee: g,
                });
            }
        }
        if cfg.corpus.demographic_priors.is_some() {
            sections.demographics = Some(audit::audit_demographic_shift(&real_c, &synth_c, &cfg.audit, cfg.seed)?);
        }
        sections.inherent_dp = Some(audit::audit_inherent_dp(synth.len(), real_train.records().len(), &cfg.audit)?);

        let generated = (!cfg.deterministic).then(now_unix);
        let report = audit::compile_report(&cfg.digest()?, cfg.seed, generated, sections)?;
        audit::write_report(&report, &plots, &self.dir(Stage::Audit))?;
        tracing::info!(digest = %report.digest, "report written");
        Ok(())
    }
}
