use std::fs;
use std::path::Path;

use comloc::pipeline::{
    Manifest, Pipeline, PipelineConfig, Stage, CORPUS_CHECKINS, MANIFEST, PARTITIONS, REPORT_JSON, SYNTH_CHECKINS,
    SYNTH_EDGES,
};
use comloc::Error;
use sha2::{Digest, Sha256};

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml_str(
        "[synth]\nn_users = 40\n[predict]\nmodels = [\"community\", \"sample-friends\", \"psmm\"]\n",
        Vec::new(),
    )
    .unwrap();
    cfg.influence.random_users = 5;
    cfg
}

fn manifest(out: &Path) -> Manifest {
    serde_json::from_slice(&fs::read(out.join(MANIFEST)).unwrap()).unwrap()
}

#[test]
fn full_run_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(small_config(), dir.path()).unwrap();
    p.run_all().unwrap();

    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(report["models"].as_array().unwrap().len(), 3);
    assert_eq!(report["n_users_requested"], 40);

    let m = manifest(dir.path());
    let stages: Vec<&str> = m.stages.keys().map(String::as_str).collect();
    assert_eq!(stages, ["communities", "diversity", "evaluate", "influence", "ingest", "synth", "train"]);
    assert_eq!(m.config["synth"]["n_users"], 40);
    for files in m.stages.values() {
        for (rel, hash) in files {
            let bytes = fs::read(dir.path().join(rel)).unwrap();
            assert_eq!(&hex::encode(Sha256::digest(bytes)), hash, "{rel}");
        }
    }

    let header = |rel: &str| fs::read_to_string(dir.path().join(rel)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header("diversity/diversity.csv"), "user_id,n_communities,community_entropy,n_influential,influence_entropy");
    assert_eq!(header("influence/profiles.csv"), "owner_kind,owner_id,centroid_lat,centroid_lon,member_count");
    assert_eq!(header("influence/cdf.csv"), "baseline,distance_m,cdf");
    assert_eq!(header("influence/context.csv"), "user_id,sim,entropy_a,entropy_b");
    assert_eq!(header("report.csv"), "model,metric,mean,stddev,n_users");
    assert_eq!(header("entropy_buckets.csv"), "bucket_lo,bucket_hi,n_users,mean_auc");

    let before = manifest(dir.path()).stages;
    let mut again = Pipeline::new(small_config(), dir.path()).unwrap();
    for stage in [Stage::Communities, Stage::Diversity, Stage::Train] {
        again.run(stage).unwrap();
    }
    assert_eq!(manifest(dir.path()).stages, before, "re-running stages changed their outputs");
}

#[test]
fn train_before_communities_names_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(small_config(), dir.path()).unwrap();
    p.run(Stage::Synth).unwrap();
    p.run(Stage::Ingest).unwrap();
    match p.run(Stage::Train) {
        Err(e @ Error::Dependency { .. }) => {
            assert_eq!(e.exit_code(), 3);
            assert!(e.to_string().contains(PARTITIONS), "{e}");
        }
        other => panic!("expected a dependency error, got {other:?}"),
    }
}

#[test]
fn external_inputs_and_injected_partitions() {
    let gen = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(small_config(), gen.path()).unwrap();
    for stage in [Stage::Synth, Stage::Ingest, Stage::Communities] {
        p.run(stage).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.input.checkins = Some(gen.path().join(SYNTH_CHECKINS));
    cfg.input.edges = Some(gen.path().join(SYNTH_EDGES));
    cfg.input.communities_file = Some(gen.path().join(PARTITIONS));
    let mut q = Pipeline::new(cfg, dir.path()).unwrap();
    q.run(Stage::Ingest).unwrap();
    q.run(Stage::Communities).unwrap();
    for rel in [CORPUS_CHECKINS, PARTITIONS] {
        assert_eq!(fs::read(gen.path().join(rel)).unwrap(), fs::read(dir.path().join(rel)).unwrap(), "{rel}");
    }
    assert!(!dir.path().join(SYNTH_CHECKINS).exists());
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.predict.train_ratio = 1.5;
    match Pipeline::new(cfg, dir.path()) {
        Err(e @ Error::Config { .. }) => {
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains("predict.train_ratio"));
        }
        other => panic!("{:?}", other.err()),
    }
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}
