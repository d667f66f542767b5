//! End-to-end checks of the experiment commands on small configs.

use std::path::Path;

use reflect_core::error::Error;
use reflect_core::experiment::{
    cmd_eval, cmd_forge, cmd_train, shortcut_experiment, ExperimentConfig, SnapshotFile,
    TrainTarget,
};
use reflect_core::forge::{Corpus, ForgeConfig};
use reflect_core::train::StageName;

fn small(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.output_dir = dir.to_path_buf();
    c.forge = ForgeConfig {
        n_causal: 30,
        n_shortcut: 30,
        n_partial: 30,
        ..Default::default()
    };
    c.pipeline.sft.epochs = 1;
    c.pipeline.grpo.steps = 3;
    c.pipeline.grpo.inputs_per_step = 2;
    c.pipeline.eval.n_observational = 20;
    c.pipeline.eval.n_interventional = 20;
    c
}

#[test]
fn staged_training_matches_file_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    cmd_forge(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    let corpus = Corpus::from_jsonl(&text).unwrap();
    assert_eq!(corpus.header.config_hash, cfg.hash());
    assert_eq!(corpus.variants.len(), 90);

    for stage in ["sft", "dpo", "grpo"] {
        cmd_train(&cfg, stage.parse().unwrap()).unwrap();
        let snap = SnapshotFile::load(&dir.path().join(format!("snapshot_{stage}.json"))).unwrap();
        assert_eq!(snap.config_hash, cfg.hash());
        let trace =
            std::fs::read_to_string(dir.path().join(format!("trace_{stage}.jsonl"))).unwrap();
        assert!(trace.lines().next().unwrap().contains(&cfg.hash()));
    }
    let report = cmd_eval(&cfg, &dir.path().join("snapshot_grpo.json")).unwrap();
    assert_eq!(report.config_hash, cfg.hash());
    assert_eq!(report.observational.n, 20);
    let csv = std::fs::read_to_string(dir.path().join("eval_grpo.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={}", cfg.hash())));
}

#[test]
fn resume_refuses_foreign_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    cmd_train(&cfg, TrainTarget::Stage(StageName::Sft)).unwrap();
    let mut other = cfg.clone();
    other.pipeline.dpo.beta = 0.2;
    // corpus hash is checked first
    assert!(matches!(
        cmd_train(&other, TrainTarget::Stage(StageName::Dpo)),
        Err(Error::HashMismatch { .. })
    ));
}

#[test]
fn eval_refuses_snapshot_from_another_world() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    cmd_train(&cfg, TrainTarget::Stage(StageName::Sft)).unwrap();
    let mut other = cfg.clone();
    other.world.noise.visual_flip = 0.1;
    let err = cmd_eval(&other, &dir.path().join("snapshot_sft.json")).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }), "{err}");
}

#[test]
fn missing_snapshot_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let err = cmd_eval(&cfg, &dir.path().join("nope.json")).unwrap_err();
    assert!(matches!(err, Error::MissingInput(_)));
}

#[test]
fn disabled_stage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.pipeline.ablation.skip_dpo = true;
    cmd_train(&cfg, TrainTarget::Stage(StageName::Sft)).unwrap();
    assert!(matches!(
        cmd_train(&cfg, TrainTarget::Stage(StageName::Dpo)),
        Err(Error::InvalidConfig(_))
    ));
    cmd_train(&cfg, TrainTarget::Stage(StageName::Grpo)).unwrap();
}

#[test]
fn shortcut_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.shortcut.seeds = vec![0, 1, 2, 3, 4];
    let s = shortcut_experiment(&cfg).unwrap();
    assert_eq!(s.rows.len(), 10);
    let csv = s.to_csv();
    // header comment, column names, 10 rows, mean and std for both conditions
    assert_eq!(csv.lines().count(), 2 + 10 + 4);
}
