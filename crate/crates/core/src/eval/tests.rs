use super::*;
use crate::metatrain::{meta_train, MetaTrainConfig, OptimizerConfig};
use crate::nn::{Activation, LayerSpec};
use crate::tasks::{gen_synthetic, SyntheticSpec};
use crate::tensor::Tensor;

fn data(sigma: f64) -> Dataset<f64> {
    let spec = SyntheticSpec {
        n_classes: 8,
        feature_dim: 6,
        radius: 1.0,
        sigma,
        examples_per_class: 12,
    };
    gen_synthetic::<f64>(&spec, 4).unwrap().normalize_min_max()
}

fn cfg() -> EvalConfig {
    EvalConfig {
        n_episodes: 12,
        episode: EpisodeShape {
            n_way: 3,
            k_shot: 2,
            q_query: 4,
        },
        seed: 9,
        ..EvalConfig::default()
    }
}

fn model() -> (Architecture, ParameterSet<f64>) {
    let arch = Architecture::mlp(6, &[10], 3);
    let p = arch.init_params(1).unwrap();
    (arch, p)
}

fn identity(d: usize, n_way: usize) -> (Architecture, ParameterSet<f64>) {
    let arch = Architecture {
        input_shape: vec![d],
        layers: vec![LayerSpec::Dense {
            width: d,
            activation: Activation::Identity,
        }],
        n_way,
    };
    let mut p: ParameterSet<f64> = arch.init_params(0).unwrap();
    p.get_mut("backbone.0.weight").unwrap().value = Tensor::eye(d);
    (arch, p)
}

#[test]
fn stderr_values() {
    assert!(stderr_bound(150_000) < 0.0013);
    assert!((stderr_bound(150_000) - 0.001290994).abs() < 1e-9);
    assert_eq!(stderr_bound(4), 0.25);
    assert!((stderr_bound(10_000) - 0.005).abs() < 1e-15);
}

#[test]
fn zero_budget_gives_equal_accuracies() {
    let (arch, p) = model();
    let c = EvalConfig {
        attack: AttackConfig {
            eps: 0.0,
            ..AttackConfig::synthetic_eval()
        },
        ..cfg()
    };
    let m = evaluate(&arch, &p, &data(0.15), &c).unwrap();
    assert_eq!(m.a_adv, m.a_nat);
    assert_eq!(m.n_samples, 12 * 3 * 4);
    assert_eq!(m.a_nat, m.counts.nat as f64 / m.n_samples as f64);
}

#[test]
fn nearest_centre_oracle_is_perfect() {
    let ds = gen_synthetic::<f64>(
        &SyntheticSpec {
            n_classes: 8,
            feature_dim: 6,
            radius: 1.0,
            sigma: 1e-9,
            examples_per_class: 12,
        },
        4,
    )
    .unwrap();
    let (arch, p) = identity(6, 3);
    let c = EvalConfig {
        finetune: FineTuneSpec::proto(),
        ..cfg()
    };
    assert_eq!(evaluate(&arch, &p, &ds, &c).unwrap().a_nat, 1.0);
}

#[test]
fn comparisons_are_paired() {
    let (arch, p) = model();
    let ds = data(0.15);
    let cand = Candidate {
        name: "a".into(),
        arch: arch.clone(),
        params: p.clone(),
        finetune: FineTuneSpec::ridge(1.0),
    };
    let single = compare(std::slice::from_ref(&cand), &ds, &cfg()).unwrap();
    assert_eq!(single[0].1, evaluate(&arch, &p, &ds, &cfg()).unwrap());
    let twice = compare(
        &[
            cand.clone(),
            Candidate {
                name: "b".into(),
                ..cand
            },
        ],
        &ds,
        &cfg(),
    )
    .unwrap();
    assert_eq!(twice[0].1, twice[1].1);
    assert_eq!(cfg().episode(&ds, 3).unwrap(), cfg().episode(&ds, 3).unwrap());
    assert!(compare::<f64>(&[], &ds, &cfg()).is_err());
}

#[test]
fn evaluation_is_thread_count_independent() {
    let (arch, p) = model();
    let ds = data(0.15);
    let a = evaluate(&arch, &p, &ds, &cfg()).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    assert_eq!(pool.install(|| evaluate(&arch, &p, &ds, &cfg())).unwrap(), a);
}

fn trained() -> (Architecture, ParameterSet<f64>) {
    let arch = Architecture::mlp(6, &[10], 3);
    let tc = MetaTrainConfig {
        epochs: 4,
        episodes_per_epoch: 8,
        meta_batch: 4,
        optimizer: OptimizerConfig::plain(0.1),
        episode: cfg().episode,
        ..MetaTrainConfig::default()
    };
    let (p, _) = meta_train(&tc, &arch, &data(0.15)).unwrap();
    (arch, p)
}

#[test]
fn more_attack_steps_never_help() {
    let (arch, p) = trained();
    let ds = data(0.15);
    let mut prev = f64::INFINITY;
    for steps in [2, 5, 20] {
        let c = EvalConfig {
            attack: AttackConfig {
                steps,
                early_stop: false,
                ..AttackConfig::synthetic_eval()
            },
            ..cfg()
        };
        let m = evaluate(&arch, &p, &ds, &c).unwrap();
        assert!(m.a_adv <= prev, "{steps} steps: {} > {prev}", m.a_adv);
        prev = m.a_adv;
    }
}

#[test]
fn adversarial_finetuning_columns() {
    let (arch, p) = model();
    let ds = data(0.15);
    let plain = evaluate(&arch, &p, &ds, &cfg()).unwrap();
    assert!(plain.a_nat_at.is_none());
    assert!(table_at("Model", &[("x".into(), plain.clone())]).is_err());
    let maml_arch = arch.clone();
    let c = EvalConfig {
        adv_finetune: true,
        finetune: FineTuneSpec {
            inner_steps: 2,
            inner_lr: 0.1,
            ..FineTuneSpec::maml()
        },
        ..cfg()
    };
    let m = evaluate(&maml_arch, &p, &ds, &c).unwrap();
    assert!(m.a_nat_at.is_some() && m.a_adv_at.is_some());
    let t = table_at("Re-trained", &[("All layers".into(), m)]).unwrap();
    assert_eq!(t.columns, ["Re-trained", "A_nat", "A_adv", "A_nat(AT)", "A_adv(AT)"]);
}

#[test]
fn table_layouts() {
    let m = Metrics::from_counts(
        Counts {
            nat: 3,
            adv: 1,
            nat_at: 0,
            adv_at: 0,
            samples: 4,
        },
        false,
    );
    let t = table_transfer_vs_meta(&[("R2-D2".into(), m.clone(), m.clone())]);
    assert_eq!(
        t.columns,
        ["Model", "A_nat Transfer", "A_adv Transfer", "A_nat Meta", "A_adv Meta"]
    );
    assert_eq!(t.rows[0], ["R2-D2", "75.00%", "25.00%", "75.00%", "25.00%"]);
    assert_eq!(
        table_natural(&[("a".into(), m.clone())]).columns,
        ["Model", "A_nat", "A_adv"]
    );
    assert_eq!(table_heads(&[("a".into(), m)]).columns, ["Model", "A_adv"]);
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("Model,A_nat Transfer,"));
    assert!(t.to_markdown().starts_with("| Model | A_nat Transfer |"));
}

#[test]
fn attack_report_columns() {
    let (arch, p) = trained();
    let ds = data(0.15);
    let target = Candidate {
        name: "t".into(),
        arch,
        params: p,
        finetune: FineTuneSpec::ridge(1.0),
    };
    let zero = AttackSuite {
        attack: AttackConfig {
            eps: 0.0,
            ..AttackConfig::synthetic_eval()
        },
        restarts: 3,
        ..AttackSuite::default()
    };
    let r = attack_report(&target, Some(&target), &ds, &cfg(), &zero).unwrap();
    assert_eq!([r.pgd, r.pgd_restarts, r.mi_fgsm, r.transfer.unwrap()], [r.clean; 4]);
    let suite = AttackSuite {
        restarts: 4,
        ..AttackSuite::default()
    };
    let r = attack_report(&target, None, &ds, &cfg(), &suite).unwrap();
    assert!(r.pgd_restarts <= r.pgd);
    assert!(r.pgd <= r.clean);
    let t = table_attacks(&[("t".into(), r)]);
    assert_eq!(t.columns, ["Model", "A_DF", "A_MI", "A_20-PGD"]);
}

#[test]
fn shared_classes_are_rejected() {
    let ds = data(0.15);
    let (a, b) = ds.split_classes(5).unwrap();
    assert!(check_disjoint(&a, &b).is_ok());
    assert!(check_disjoint(&a, &a).is_err());
}
