use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthaudit_core::attacks::{
    attacker_scores, blackbox_attack, evaluate_attack, train_whitebox_attacker, whitebox_attack, whitebox_extract,
    AttackConfig, AttackPool, QueryOnly,
};
use synthaudit_core::corpus::{render_corpus, split_of, ImageRecord, ProceduralSpec, Split};
use synthaudit_core::downstream::{train_downstream, DownstreamConfig, HybridWeights};
use synthaudit_core::metrics::auc_roc;
use synthaudit_core::models::{AttackInput, AttackerArch, Classifier, ClassifierArch, N_TARGETS};
use synthaudit_nn::Model;

fn corpus(n: usize, test_fraction: f64) -> Vec<ImageRecord> {
    render_corpus(&ProceduralSpec {
        n_total: n,
        test_fraction,
        ..ProceduralSpec::default()
    })
    .unwrap()
}

fn small_attack() -> AttackConfig {
    AttackConfig {
        last_k: 2,
        width: 4,
        arch: AttackerArch {
            conv_channels: 2,
            grid_embed: 8,
            scalar_embed: 4,
            hidden: 8,
        },
        ..AttackConfig::default()
    }
}

#[test]
fn pool_is_disjoint_balanced_and_seeded() {
    let records = corpus(300, 0.5);
    let (train, test) = (split_of(&records, Split::Train), split_of(&records, Split::Test));
    let cfg = AttackConfig::default();
    let pool = AttackPool::build(&train, &test, &cfg, 5).unwrap();
    let n_mem = pool.entries.iter().filter(|e| e.member).count();
    assert_eq!(2 * n_mem, pool.entries.len());
    assert_eq!(pool.entries.len(), 2 * train.len().min(test.len()));
    let train_ids: std::collections::HashSet<&str> = train.iter().map(|r| r.id.as_str()).collect();
    for e in &pool.entries {
        assert_eq!(e.member, train_ids.contains(e.id.as_str()));
    }
    // each class is split at the train fraction
    for member in [true, false] {
        let class: Vec<_> = pool.entries.iter().filter(|e| e.member == member).collect();
        let k = class.iter().filter(|e| e.attack_train).count();
        assert_eq!(k, (class.len() as f64 * cfg.train_fraction).round() as usize);
    }
    assert_eq!(pool, AttackPool::build(&train, &test, &cfg, 5).unwrap());
    assert_ne!(pool, AttackPool::build(&train, &test, &cfg, 6).unwrap());

    let all: Vec<&ImageRecord> = records.iter().collect();
    assert_eq!(AttackPool::resolve(&pool.split(false), &all).unwrap().len(), pool.split(false).len());
    assert!(AttackPool::resolve(&pool.split(false), &all[..1]).is_err());
    // overlapping sources and oversize pools are refused
    assert!(AttackPool::build(&train, &train, &cfg, 5).is_err());
    let big = AttackConfig {
        pool_size: Some(pool.entries.len() + 2),
        ..cfg
    };
    assert!(AttackPool::build(&train, &test, &big, 5).is_err());
}

#[test]
fn unbalanced_pools_need_permission() {
    let cfg = AttackConfig {
        member_fraction: 0.3,
        ..AttackConfig::default()
    };
    assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    let allowed = AttackConfig {
        allow_unbalanced: true,
        ..cfg
    };
    let records = corpus(200, 0.5);
    let pool = AttackPool::build(&split_of(&records, Split::Train), &split_of(&records, Split::Test), &allowed, 0).unwrap();
    assert!((pool.member_fraction - 0.3).abs() < 0.01);
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (4usize..60).prop_flat_map(|n| (prop::collection::vec(0.0f64..=1.0, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, t)| t.iter().any(|&b| b) && t.iter().any(|&b| !b))
}

proptest! {
    #[test]
    fn recall_falls_as_the_threshold_rises((scores, truth) in scored(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let ids: Vec<String> = (0..scores.len()).map(|i| i.to_string()).collect();
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let r_lo = evaluate_attack("blackbox", &ids, &scores, &truth, lo).unwrap();
        let r_hi = evaluate_attack("blackbox", &ids, &scores, &truth, hi).unwrap();
        prop_assert!(r_hi.recall <= r_lo.recall);
        prop_assert_eq!(r_lo.auc, r_hi.auc);
    }

    #[test]
    fn auc_ignores_monotone_rescaling((scores, truth) in scored()) {
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp() / 10.0).collect();
        prop_assert!((auc_roc(&scores, &truth).unwrap() - auc_roc(&squashed, &truth).unwrap()).abs() < 1e-12);
    }
}

fn noise_inputs(n: usize, r: &mut ChaCha8Rng) -> (Vec<AttackInput>, Vec<bool>) {
    let (layers, width) = (2, 4);
    let inputs = (0..n)
        .map(|_| AttackInput {
            activations: (0..layers * width).map(|_| r.random_range(-1.0..1.0)).collect(),
            gradients: (0..layers * width).map(|_| r.random_range(-1.0..1.0)).collect(),
            loss: r.random_range(-5.0..0.0),
            label: (0..N_TARGETS).map(|_| r.random_range(0.0..1.0)).collect(),
        })
        .collect();
    let truth = (0..n).map(|i| i % 2 == 0).collect();
    (inputs, truth)
}

#[test]
fn attacker_on_label_free_features_is_at_chance() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let (train, members) = noise_inputs(400, &mut r);
    let cfg = AttackConfig {
        lr: 3e-3,
        epochs: 10,
        validation_fraction: 0.0,
        ..small_attack()
    };
    let trained = train_whitebox_attacker(&train.iter().collect::<Vec<_>>(), &members, &cfg, 0).unwrap();
    assert_eq!(trained.selected_epoch, Some(9));
    let (test, truth) = noise_inputs(2000, &mut r);
    let scores = attacker_scores(&trained.attacker, &test.iter().collect::<Vec<_>>()).unwrap();
    let auc = auc_roc(&scores, &truth).unwrap();
    assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    // the attacker did fit its training set
    assert!(trained.epoch_losses.last().unwrap() < trained.epoch_losses.first().unwrap());
}

#[test]
fn uniform_victim_makes_the_blackbox_attack_call_everyone_a_member() {
    let records = corpus(200, 0.5);
    let (train, test) = (split_of(&records, Split::Train), split_of(&records, Split::Test));
    let mut victim = Classifier::<f32>::new(&ClassifierArch::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let zeros = vec![0.0; victim.params().flatten().len()];
    victim.params_mut().set_flat(&zeros).unwrap();
    let pool = AttackPool::build(&train, &test, &AttackConfig::default(), 1).unwrap();
    let all: Vec<&ImageRecord> = records.iter().collect();
    let reports = blackbox_attack(&QueryOnly::new(&victim), &pool, &all, &[0.5, 0.95]).unwrap();
    let members = reports[0].n_members as f64 / reports[0].n as f64;
    assert_eq!(reports[0].recall, 1.0);
    assert!((reports[0].precision - members).abs() < 1e-12);
    assert_eq!(reports[1].recall, 0.0);
    assert_eq!(reports[0].auc, 0.5);
}

#[test]
fn memorizing_victim_leaks_membership() {
    // annotations shuffled across records, so members can only be fit by memorizing them
    let mut records = corpus(400, 0.5);
    let mut labels: Vec<_> = records.iter().map(|r| r.annotation.clone()).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    for (r, a) in records.iter_mut().zip(labels) {
        r.annotation = a;
    }
    let (train, test) = (split_of(&records, Split::Train), split_of(&records, Split::Test));
    let cfg = DownstreamConfig {
        epochs: 60,
        ..DownstreamConfig::default()
    };
    let victim = train_downstream(&train, &cfg, None, 2).unwrap().classifier;
    let attack = AttackConfig {
        lr: 1e-3,
        ..small_attack()
    };

    let w = HybridWeights::default();
    let mean_loss = |rs: &[&ImageRecord]| {
        let f = whitebox_extract(&victim, rs, attack.last_k, attack.width, w).unwrap();
        f.iter().map(|a| a.loss.exp()).sum::<f64>() / f.len() as f64
    };
    let (member_loss, other_loss) = (mean_loss(&train), mean_loss(&test));
    assert!(member_loss < other_loss, "member {member_loss} vs non-member {other_loss}");

    let pool = AttackPool::build(&train, &test, &attack, 3).unwrap();
    let all: Vec<&ImageRecord> = records.iter().collect();
    let white = whitebox_attack(&victim, &pool, &all, &attack, w, 4).unwrap();
    // a bare loss threshold on the same split is the reference attack
    let test_e = pool.split(false);
    let f = whitebox_extract(&victim, &AttackPool::resolve(&test_e, &all).unwrap(), attack.last_k, attack.width, w).unwrap();
    let neg_loss: Vec<f64> = f.iter().map(|a| -a.loss).collect();
    let truth: Vec<bool> = test_e.iter().map(|e| e.member).collect();
    let by_loss = auc_roc(&neg_loss, &truth).unwrap();
    assert!(by_loss > 0.7, "loss-threshold auc {by_loss}");
    assert!(white.report.auc > 0.7, "white-box auc {}", white.report.auc);
    let black = blackbox_attack(&QueryOnly::new(&victim), &pool, &all, &[0.5]).unwrap();
    assert!(black[0].auc > 0.6, "black-box auc {}", black[0].auc);

    let again = whitebox_attack(&victim, &pool, &all, &attack, w, 4).unwrap();
    assert_eq!(white.attacker.attacker.params().digest(), again.attacker.attacker.params().digest());
}
