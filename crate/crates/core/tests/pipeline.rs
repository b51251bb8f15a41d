use std::path::Path;

use rflow_core::config::PipelineConfig;
use rflow_core::coupling::{regenerate, CouplingSet};
use rflow_core::pipeline::{
    checkpoint_path, couplings_path, load_field, run_pipeline, RunManifest, Runner, PIPELINE, TAG_NO_IMMISCIBLE,
    TAG_NO_INIT,
};
use rflow_core::toydata::ToyTask;
use rflow_core::training::{train_stage, TrainConfig};
use rflow_core::velocityfield::{FieldSpec, Stage, VelocityField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config(dir: &Path, extra: &str) -> PipelineConfig {
    let text = format!(
        "[run]\nseed = 3\nout_dir = {}\n\
         [model]\nhidden = 16,16\n\
         [stage.fm]\niterations = 1\nbatch_size = 32\n\
         [stage.rf1]\niterations = 1\nbatch_size = 32\n\
         [stage.rf2]\niterations = 1\nbatch_size = 32\n\
         [stage.distill]\niterations = 1\nbatch_size = 32\n\
         [couplings]\ncount = 48\nsteps = 4\nshard_size = 16\n\
         {extra}",
        dir.display()
    );
    PipelineConfig::parse(&text).unwrap()
}

#[test]
fn one_iteration_pipeline_emits_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let m = run_pipeline(&cfg).unwrap();
    for stage in [Stage::Fm, Stage::Rf1, Stage::Rf2, Stage::Distilled] {
        assert!(checkpoint_path(tmp.path(), stage).exists());
    }
    for source in [Stage::Rf1, Stage::Rf2] {
        let set = CouplingSet::load(&couplings_path(tmp.path(), source)).unwrap();
        assert_eq!(set.len(), 48);
    }
    assert_eq!(m.artifacts.len(), 6);
    m.verify(tmp.path()).unwrap();
    assert_eq!(m.digest, m.compute_digest());
    let (distilled, _) = load_field(&checkpoint_path(tmp.path(), Stage::Distilled)).unwrap();
    assert_eq!(distilled.stage, Stage::Distilled);
    assert!(m.tags().is_empty());
}

#[test]
fn reruns_match_and_resume_skips_current_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_pipeline(&tiny_config(&tmp.path().join("a"), "")).unwrap();
    let b = run_pipeline(&tiny_config(&tmp.path().join("b"), "")).unwrap();
    assert_eq!(a.digest, b.digest);

    let cfg = tiny_config(&tmp.path().join("a"), "");
    let mut runner = Runner::open(&cfg).unwrap();
    for step in PIPELINE {
        assert!(!runner.run_step(step).unwrap(), "{} reran", step.name());
    }
    assert_eq!(runner.manifest.digest, a.digest);

    // A damaged artifact is rebuilt, and the rebuilt bytes are identical.
    let rf1 = checkpoint_path(&tmp.path().join("a"), Stage::Rf1);
    std::fs::write(&rf1, b"junk").unwrap();
    let again = run_pipeline(&cfg).unwrap();
    assert_eq!(again.digest, a.digest);
    assert!(again.events.len() > a.events.len());
    again.verify(&tmp.path().join("a")).unwrap();
    let loaded = RunManifest::load(&tmp.path().join("a")).unwrap().unwrap();
    assert_eq!(loaded.digest, a.digest);
}

#[test]
fn ablations_are_tagged() {
    let tmp = tempfile::tempdir().unwrap();
    let base = run_pipeline(&tiny_config(&tmp.path().join("base"), "")).unwrap();
    let no_init = run_pipeline(&tiny_config(&tmp.path().join("no_init"), "[stage.rf1]\ninit = none\n")).unwrap();
    let no_immi = run_pipeline(&tiny_config(&tmp.path().join("no_immi"), "[stage.rf1]\nimmiscible = false\n")).unwrap();
    assert!(no_init.tags().contains(&TAG_NO_INIT.to_string()));
    assert!(no_immi.tags().contains(&TAG_NO_IMMISCIBLE.to_string()));
    assert_ne!(base.digest, no_init.digest);
    assert_ne!(base.digest, no_immi.digest);
    let (rf1, _) = load_field(&checkpoint_path(&tmp.path().join("no_init"), Stage::Rf1)).unwrap();
    assert!(rf1.has_tag(TAG_NO_INIT));
    // Tags follow the weights downstream.
    let (distilled, _) = load_field(&checkpoint_path(&tmp.path().join("no_init"), Stage::Distilled)).unwrap();
    assert!(distilled.has_tag(TAG_NO_INIT));
}

#[test]
fn coupling_files_regenerate_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    run_pipeline(&tiny_config(tmp.path(), "[anchored]\nomega = 2.5\n")).unwrap();
    for source in [Stage::Rf1, Stage::Rf2] {
        let path = couplings_path(tmp.path(), source);
        let bytes = std::fs::read(&path).unwrap();
        let set = CouplingSet::from_bytes(&bytes).unwrap();
        assert_eq!(set.meta("anchored"), Some("true"));
        let (field, _) = load_field(&checkpoint_path(tmp.path(), source)).unwrap();
        let again = regenerate(&field, &set).unwrap();
        assert_eq!(again.to_bytes().unwrap(), bytes);
    }
    // Regenerating with a different model is refused.
    let (fm, _) = load_field(&checkpoint_path(tmp.path(), Stage::Fm)).unwrap();
    let set = CouplingSet::load(&couplings_path(tmp.path(), Stage::Rf1)).unwrap();
    assert!(regenerate(&fm, &set).is_err());
}

#[test]
fn rf1_training_halves_its_ema_loss() {
    let task = ToyTask::gauss8();
    let mut cfg = TrainConfig::for_stage(Stage::Rf1, 21);
    cfg.iterations = 5000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let init = VelocityField::new(FieldSpec::default(), Stage::Rf1, &mut rng).unwrap();
    let out = train_stage(&cfg, &task, init, None).unwrap();
    let at = |it: usize| out.reports.iter().find(|r| r.iteration == it).unwrap().ema_loss;
    let (early, late) = (at(100), at(5000));
    assert!(late <= 0.5 * early, "EMA loss {early} -> {late}");
    assert_eq!(out.pairing.batches, 5000);
}
