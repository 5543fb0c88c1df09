use std::path::Path;
use std::process::{Command, Output};

use clfb_core::harness::{ExperimentConfig, MetricsTable};
use clfb_core::lang::PairsPerSplit;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        pool_size: 60,
        split: [0.6, 0.2, 0.2],
        pairs: PairsPerSplit { train: 80, val: 20, test: 20 },
        ..ExperimentConfig::default()
    };
    cfg.latent.d_z = 8;
    cfg.latent.hidden = vec![8];
    cfg.latent.phase1_epochs = 2;
    cfg.latent.phase2_epochs = 2;
    cfg.improve.seeds = 4;
    cfg.improve.iterations = 3;
    cfg.reward.seeds = 1;
    cfg.reward.humans.truncate(2);
    cfg.reward.learning.queries = 4;
    cfg.reward.learning.checkpoint_every = 2;
    cfg.reward.learning.epochs_per_query = 2;
    cfg.reward.learning.eval_pairs = 30;
    cfg
}

fn clfb(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clfb"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const TABLES: [&str; 5] = [
    "data_summary.csv",
    "latent_cofinetune.csv",
    "latent_frozen.csv",
    "improve.csv",
    "learn_reward.csv",
];

fn pipeline(config: &Path, out: &Path) {
    ok(clfb(config, out, &["gen-data"]));
    let printed = ok(clfb(config, out, &["train-latent"]));
    assert!(printed.starts_with("test_accuracy "), "{printed}");
    ok(clfb(config, out, &["train-latent", "--frozen-language"]));
    let printed = ok(clfb(config, out, &["improve"]));
    assert_eq!(printed.lines().count(), 4);
    let printed = ok(clfb(config, out, &["learn-reward", "--method", "language,comparison"]));
    assert_eq!(printed.lines().count(), 4);
}

#[test]
fn pipeline_writes_identical_tables_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, tiny_config().to_toml()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&config, &a);
    pipeline(&config, &b);
    for t in TABLES {
        let bytes = std::fs::read(a.join(t)).unwrap();
        assert_eq!(bytes, std::fs::read(b.join(t)).unwrap(), "{t}");
        MetricsTable::read(&a.join(t)).unwrap();
    }
    for f in ["data/pool.json", "data/triplets.json", "checkpoint.json", "checkpoint_frozen.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let reward = MetricsTable::read(&a.join("learn_reward.csv")).unwrap();
    assert!(reward.rows().iter().all(|r| r.method == "language" || r.method == "comparison"));

    // a different master seed changes the data
    let c = dir.path().join("c");
    ok(clfb(&config, &c, &["--seed", "5", "gen-data"]));
    assert_ne!(std::fs::read(a.join("data/pool.json")).unwrap(), std::fs::read(c.join("data/pool.json")).unwrap());

    // resuming continues from the saved encoders
    ok(clfb(&config, &a, &["train-latent", "--resume"]));
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, tiny_config().to_toml()).unwrap();
    let out = dir.path().join("out");

    let o = clfb(&config, &out, &["improve"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));

    ok(clfb(&config, &out, &["gen-data"]));
    let o = clfb(&config, &out, &["serve", "--port", "0"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("refusing to serve") && err.contains("train-latent"), "{err}");

    let o = clfb(&config, &out, &["learn-reward", "--method", "telepathy"]);
    assert!(!o.status.success());

    std::fs::write(&config, "pool_size = 0\n").unwrap();
    let o = clfb(&config, &out, &["gen-data"]);
    assert!(!o.status.success());
}
