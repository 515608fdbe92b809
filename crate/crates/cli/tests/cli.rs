use std::fs;
use std::path::{Path, PathBuf};

use advquery::nn::load_checkpoint;
use advquery::tasks::load_fsds;
use advquery::ParameterSet;
use advquery_cli::{cmd_attack, cmd_compare, cmd_eval, cmd_train, main_with_args, ExperimentConfig};
use tempfile::TempDir;

const TINY: &str = "seed = 11
[data]
n_classes = 9
feature_dim = 4
examples_per_class = 12
train_classes = 6
[model]
hidden = 8
[episode]
n_way = 3
k_shot = 2
q_query = 3
[train]
epochs = 2
episodes_per_epoch = 4
meta_batch = 2
[train_attack]
steps = 3
[eval]
n_episodes = 6
[suite]
restarts = 3
";

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn write_cfg(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn parse(text: &str, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_text(text, &o, Path::new(".")).unwrap()
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("advquery").chain(args.iter().copied()))
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = TempDir::new().unwrap();
    let cfg = parse(TINY, &["train.epochs=0"]);
    let out = cmd_train(&cfg, dir.path(), None).unwrap();
    let loaded: ParameterSet = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(loaded, out.arch.init_params(11).unwrap());
}

#[test]
fn train_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(&dir, "c.cfg", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let code = cli(&[
            "--threads",
            "1",
            "train",
            cfg.to_str().unwrap(),
            "--set",
            "train.regime=aq",
            "--output",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    for f in ["model.aqcp", "train_log.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("train_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["created_unix"].is_u64());
}

#[test]
fn aq_log_reports_attacks_from_the_first_epoch() {
    let dir = TempDir::new().unwrap();
    let cfg = parse(TINY, &["train.regime=aq"]);
    cmd_train(&cfg, dir.path(), None).unwrap();
    let rows = csv_rows(&dir.path().join("train_log.csv"));
    assert_eq!(
        rows[0],
        [
            "epoch",
            "loss",
            "clean_acc",
            "attack_success",
            "seconds",
            "config_hash",
            "seed"
        ]
    );
    let success: f64 = rows[1][3].parse().unwrap();
    assert!(success > 0.0);
    assert_eq!(rows[1][5], cfg.hash);
    assert_eq!(rows[1][6], "11");
}

#[test]
fn zero_budget_eval_and_metrics_files() {
    let dir = TempDir::new().unwrap();
    let cfg = parse(TINY, &[]);
    let t = cmd_train(&cfg, &dir.path().join("t"), None).unwrap();
    let eval = parse(TINY, &["eval_attack.eps=0"]);
    let m = cmd_eval(&eval, &t.checkpoint, "tiny", &dir.path().join("e"), None).unwrap();
    assert_eq!(m.a_adv, m.a_nat);
    let rows = csv_rows(&dir.path().join("e/metrics.csv"));
    assert_eq!(
        rows[0],
        [
            "model",
            "a_nat",
            "a_adv",
            "a_nat_at",
            "a_adv_at",
            "stderr_bound",
            "n_samples",
            "config_hash",
            "seed"
        ]
    );
    assert_eq!(rows[1][1], rows[1][2]);
    assert_eq!(rows[1][3], "");
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("e/metrics.json")).unwrap()).unwrap();
    assert_eq!(json["metrics"][0]["model"], "tiny");
    assert!(json["metrics"][0]["a_nat_at"].is_null());
    assert_eq!(json["config_hash"], eval.hash.as_str());
}

#[test]
fn input_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let good = write_cfg(&dir, "good.cfg", TINY);
    let bad = write_cfg(&dir, "bad.cfg", "[train]\nepochs = 1\nepochz = 2\n");
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(cli(&["train", bad.to_str().unwrap(), "--output", out]), 2);
    let err = ExperimentConfig::from_text("[train]\nepochs = 1\nepochz = 2\n", &[], Path::new(".")).unwrap_err();
    assert_eq!(err.to_string(), "line 3: unknown key 'epochz' in [train]");
    assert_eq!(cli(&["train", "/no/such.cfg"]), 2);
    assert_eq!(
        cli(&[
            "train",
            good.to_str().unwrap(),
            "--set",
            "train.regime=sometimes",
            "--output",
            out
        ]),
        2
    );
    assert_eq!(cli(&["frobnicate"]), 2);

    let junk = dir.path().join("junk.aqcp");
    fs::write(&junk, b"NOPE\x01\0\0\0").unwrap();
    assert_eq!(
        cli(&[
            "eval",
            good.to_str().unwrap(),
            "--checkpoint",
            junk.to_str().unwrap(),
            "--output",
            out
        ]),
        2
    );
    let e = cmd_eval(&parse(TINY, &[]), &junk, "j", dir.path(), None).err().unwrap();
    assert!(e.to_string().contains("magic"), "{e}");

    // checkpoint from a different architecture
    let wide = parse(TINY, &["model.hidden=5", "train.epochs=0"]);
    let t = cmd_train(&wide, &dir.path().join("wide"), None).unwrap();
    let code = cli(&[
        "eval",
        good.to_str().unwrap(),
        "--checkpoint",
        t.checkpoint.to_str().unwrap(),
        "--output",
        out,
    ]);
    assert_eq!(code, 2);
}

#[test]
fn diverging_training_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(&dir, "c.cfg", TINY);
    let out = dir.path().join("o");
    let code = cli(&[
        "train",
        cfg.to_str().unwrap(),
        "--set",
        "train.lr=1e300",
        "--set",
        "train.momentum=0",
        "--set",
        "train.nesterov=false",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
}

#[test]
fn shipped_fixture_reproduces_its_metrics() {
    let dir = TempDir::new().unwrap();
    let f = fixtures();
    let code = cli(&[
        "eval",
        f.join("synthetic.cfg").to_str().unwrap(),
        "--checkpoint",
        f.join("aq.aqcp").to_str().unwrap(),
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(
        fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
        fs::read_to_string(f.join("aq_metrics.csv")).unwrap()
    );
}

#[test]
fn compare_pairs_runs() {
    let dir = TempDir::new().unwrap();
    let t = cmd_train(&parse(TINY, &[]), &dir.path().join("t"), None).unwrap();
    let ck = t.checkpoint.display();
    let text = format!("{TINY}[compare]\ntables = natural\n[run a]\ncheckpoint = {ck}\n[run b]\ncheckpoint = {ck}\n");
    let out = cmd_compare(&parse(&text, &[]), &dir.path().join("c"), None).unwrap();
    assert_eq!(out.metrics[0].1, out.metrics[1].1);
    let rows = csv_rows(&dir.path().join("c/table_natural.csv"));
    assert_eq!(rows[0], ["Model", "A_nat", "A_adv"]);
    assert_eq!(rows[1][1..], rows[2][1..]);

    let one = format!("{TINY}[run a]\ncheckpoint = {ck}\n");
    assert!(matches!(
        cmd_compare(&parse(&one, &[]), dir.path(), None),
        Err(advquery_cli::CliError::Input(_))
    ));
}

#[test]
fn heads_share_one_backbone() {
    let dir = TempDir::new().unwrap();
    let text = format!(
        "{TINY}[compare]\ntables = heads\n[run ridge]\nlabel = R2-D2\n[run proto]\nlabel = ProtoNet\neval_finetune.head = proto\n"
    );
    let out = cmd_compare(&parse(&text, &["train.regime=aq"]), dir.path(), None).unwrap();
    let (_, table) = &out.tables[0];
    assert_eq!(table.columns, ["Model", "A_adv"]);
    assert_eq!(table.rows[0][0], "R2-D2");
    assert_eq!(table.rows[1][0], "ProtoNet");
    assert!(dir.path().join("runs/ridge.aqcp").exists());
    assert!(!dir.path().join("runs/proto.aqcp").exists());
    assert_eq!(out.attack_invocations[0].1, out.attack_invocations[1].1);
}

#[test]
fn attack_report_columns_and_trends() {
    let dir = TempDir::new().unwrap();
    let f = fixtures();
    let text = fs::read_to_string(f.join("synthetic.cfg")).unwrap();
    let cfg = ExperimentConfig::from_text(&text, &[], &f).unwrap();
    let aq = cmd_attack(
        &cfg,
        &f.join("aq.aqcp"),
        Some(&f.join("natural.aqcp")),
        &dir.path().join("aq"),
        None,
    )
    .unwrap();
    let nat = cmd_attack(&cfg, &f.join("natural.aqcp"), None, &dir.path().join("nat"), None).unwrap();
    for (a, n) in [
        (aq.pgd, nat.pgd),
        (aq.pgd_restarts, nat.pgd_restarts),
        (aq.mi_fgsm, nat.mi_fgsm),
    ] {
        assert!(a > n, "{aq:?} vs {nat:?}");
    }
    assert!(aq.pgd_restarts <= aq.pgd);
    let rows = csv_rows(&dir.path().join("aq/attack.csv"));
    assert_eq!(rows[0], ["Model", "A_DF", "A_MI", "A_20-PGD", "A_transfer"]);
    assert_eq!(
        csv_rows(&dir.path().join("nat/attack.csv"))[0],
        ["Model", "A_DF", "A_MI", "A_20-PGD"]
    );

    let zero = ExperimentConfig::from_text(&text, &["eval_attack.eps=0".into()], &f).unwrap();
    let r = cmd_attack(
        &zero,
        &f.join("aq.aqcp"),
        Some(&f.join("natural.aqcp")),
        &dir.path().join("z"),
        None,
    )
    .unwrap();
    assert_eq!([r.pgd, r.pgd_restarts, r.mi_fgsm, r.transfer.unwrap()], [r.clean; 4]);
}

#[test]
fn gen_data_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(&dir, "c.cfg", TINY);
    let out = dir.path().join("d");
    assert_eq!(
        cli(&["gen-data", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]),
        0
    );
    let ds: advquery::Dataset = load_fsds(&out.join("dataset.fsds")).unwrap();
    // features are stored in single precision
    let expect = parse(TINY, &[]).data.load(11).unwrap();
    assert_eq!(ds.classes.len(), expect.classes.len());
    for (c, e) in ds.classes.iter().zip(&expect.classes) {
        assert_eq!((c.id, c.examples.len()), (e.id, e.examples.len()));
        for (a, b) in c.examples.iter().zip(&e.examples) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-6, "{u} vs {v}");
            }
        }
    }

    // the written file can drive training in place of the generator
    let text = format!(
        "{}[data]\nsource = fsds\npath = d/dataset.fsds\ntrain_classes = 6\n",
        TINY.split("[data]").next().unwrap()
    );
    let rest = TINY.split_once("train_classes = 6\n").unwrap().1;
    let from_file = ExperimentConfig::from_text(&format!("{text}{rest}"), &[], dir.path()).unwrap();
    let a = cmd_train(&from_file, &dir.path().join("a"), Some(1)).unwrap();
    let b = cmd_train(&from_file, &dir.path().join("b"), Some(1)).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, advquery::nn::Architecture::init_params(&a.arch, 11).unwrap());
}

#[test]
fn threads_flag_is_validated() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(&dir, "c.cfg", TINY);
    assert_eq!(cli(&["--threads", "0", "train", cfg.to_str().unwrap()]), 2);
}
