use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synthaudit_core::audit::{
    audit_demographic_shift, audit_fairness, audit_generative, audit_inherent_dp, audit_utility, compare,
    compile_report, parse_report, to_json, AuditConfig, Corpus, PlotData, Sections, SCHEMA_VERSION,
};
use synthaudit_core::corpus::{render_corpus, DemographicPriors, ImageRecord, ProceduralSpec, Sensitive};
use synthaudit_core::downstream::HybridWeights;
use synthaudit_core::generative::emit_synthetic;
use synthaudit_core::models::{Classifier, ClassifierArch, GanArch, Generator, SampleShape, N_TARGETS};
use synthaudit_core::Error;

fn corpus(spec: ProceduralSpec) -> Vec<ImageRecord> {
    render_corpus(&spec).unwrap()
}

fn sized(n: usize) -> ProceduralSpec {
    ProceduralSpec {
        n_total: n,
        ..ProceduralSpec::default()
    }
}

fn victim(seed: u64) -> Classifier<f32> {
    Classifier::new(&ClassifierArch::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn generative_self_audit_is_near_zero_and_below_noise() {
    let records = corpus(sized(120));
    let refs: Vec<&ImageRecord> = records.iter().collect();
    let (real, same) = (Corpus::new("real", &refs), Corpus::new("synthetic", &refs));
    let embedder = victim(0);
    let cfg = AuditConfig::default();
    let s = audit_generative(&real, &same, &embedder, "real_victim", &cfg, 0).unwrap();
    assert!(s.fid.abs() < 1e-6 * (1.0 + s.noise_fid), "self fid {}", s.fid);
    assert!(s.noise_fid > 0.0);
    assert!(s.embedding_provenance.starts_with("real_victim@") && s.embedding_provenance.ends_with("/penultimate"));
    assert_eq!(s.inputs.len(), 2);

    // emissions of an untrained generator sit further away than the corpus itself
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let generator = Generator::<f32>::new(&GanArch::default(), SampleShape::Image { side: 32 }, N_TARGETS, &mut r).unwrap();
    let synth = emit_synthetic(&generator, &refs, 3).unwrap();
    let srefs: Vec<&ImageRecord> = synth.iter().collect();
    let g = audit_generative(&real, &Corpus::new("synthetic", &srefs), &embedder, "real_victim", &cfg, 0).unwrap();
    assert!(g.fid > s.fid);
    assert!((1.0..=2.0).contains(&g.inception_score));
}

#[test]
fn single_category_gives_a_one_by_one_zero_matrix() {
    let records = corpus(ProceduralSpec {
        n_total: 300,
        demographic_priors: Some(DemographicPriors {
            gender: vec![1.0, 0.0],
            ..DemographicPriors::default()
        }),
        ..ProceduralSpec::default()
    });
    let refs: Vec<&ImageRecord> = records.iter().collect();
    let cfg = AuditConfig {
        violence_threshold: 0.3,
        min_group_count: 5,
        ..AuditConfig::default()
    };
    let f = audit_fairness("v", &victim(2), &Corpus::new("real", &refs), &cfg).unwrap();
    assert_eq!(f.violence_threshold, 0.3);
    assert_eq!(f.min_group_count, 5);
    assert_eq!(f.matrices.len(), cfg.outcomes.len() * 3);
    for e in f.matrices.iter().filter(|e| e.attribute == Sensitive::Gender) {
        assert_eq!(e.matrix.spd, vec![vec![0.0]]);
        assert_eq!(e.matrix.counts, vec![f.n]);
    }
}

#[test]
fn demographic_shift_is_the_removed_mass() {
    let records = corpus(sized(400));
    let refs: Vec<&ImageRecord> = records.iter().collect();
    let real = Corpus::new("real", &refs);
    let cfg = AuditConfig::default();
    let same = audit_demographic_shift(&real, &Corpus::new("synthetic", &refs), &cfg, 0).unwrap();
    assert!(same.histograms.iter().all(|h| h.tv_distance == 0.0));

    // drop every image of the first race category from the synthetic side
    let kept: Vec<&ImageRecord> = refs
        .iter()
        .copied()
        .filter(|r| r.annotation.demographics.unwrap().get(Sensitive::Race) != 0)
        .collect();
    let shifted = audit_demographic_shift(&real, &Corpus::new("synthetic", &kept), &cfg, 0).unwrap();
    let race = shifted.histograms.iter().find(|h| h.attribute == Sensitive::Race).unwrap();
    let mass = race.real[0] as f64 / race.real.iter().sum::<usize>() as f64;
    assert!(mass > 0.1);
    assert!((race.tv_distance - mass).abs() < 1e-12, "{} vs {mass}", race.tv_distance);
    assert_eq!(race.synth[0], 0);
}

fn small_report(records: &[ImageRecord], name: &str) -> (Sections, PlotData) {
    let refs: Vec<&ImageRecord> = records.iter().collect();
    let real = Corpus::new("real", &refs);
    let mut plots = PlotData::default();
    let sections = Sections {
        utility: vec![audit_utility(name, &victim(4), &real, HybridWeights::default(), &mut plots).unwrap()],
        inherent_dp: Some(audit_inherent_dp(500, 1000, &AuditConfig::default()).unwrap()),
        ..Sections::default()
    };
    (sections, plots)
}

#[test]
fn sections_reading_different_content_under_one_role_conflict() {
    let (a, _) = small_report(&corpus(sized(60)), "one");
    let (b, _) = small_report(&corpus(ProceduralSpec { seed: 9, ..sized(60) }), "two");
    let mut merged = a.clone();
    merged.utility.extend(b.utility);
    let err = compile_report("cfg", 0, None, merged).unwrap_err();
    assert!(matches!(err, Error::Conflict(_)), "{err:?}");
    assert_eq!(err.exit_code(), 4);
    // the same victim twice is also a conflict
    let mut twice = a.clone();
    twice.utility.push(a.utility[0].clone());
    assert!(matches!(compile_report("cfg", 0, None, twice), Err(Error::Conflict(_))));
}

#[test]
fn report_round_trips_byte_for_byte() {
    let (sections, _) = small_report(&corpus(sized(60)), "one");
    let report = compile_report("cfg", 7, Some(1_700_000_000), sections.clone()).unwrap();
    let text = to_json(&report).unwrap();
    let back = parse_report(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(to_json(&back).unwrap(), text);
    // the timestamp does not enter the digest
    assert_eq!(compile_report("cfg", 7, None, sections).unwrap().digest, report.digest);

    let tampered = text.replacen("\"seed\": 7", "\"seed\": 8", 1);
    assert!(parse_report(&tampered).is_err());
    let future = text.replacen(SCHEMA_VERSION, "synthaudit.report/99", 1);
    let err = parse_report(&future).unwrap_err();
    assert!(matches!(err, Error::Schema { .. }), "{err:?}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn comparing_a_report_with_itself_changes_nothing() {
    let (sections, _) = small_report(&corpus(sized(60)), "one");
    let report = compile_report("cfg", 0, None, sections).unwrap();
    let c = compare(&report, &report, None).unwrap();
    assert!(!c.rows.is_empty());
    assert!(c.rows.iter().all(|r| r.delta == 0.0 && !r.improved));
    assert!(c.only_a.is_empty() && c.only_b.is_empty());

    let mut old = report.clone();
    old.schema_version = "synthaudit.report/0".into();
    assert!(matches!(compare(&report, &old, None), Err(Error::Schema { .. })));
}
