//! Stage orchestration: fm → rf1 → couplings from rf1 → rf2 → couplings
//! from rf2 → distill, with every artifact recorded in `manifest.json`.
//!
//! Artifacts live in the run directory under fixed names (`fm.ckpt`,
//! `couplings_rf1.rfc`, ...). A step is skipped when the manifest already
//! holds its artifact, the file still hashes to the recorded value, and the
//! step's inputs (config snapshot plus upstream artifact hashes) are
//! unchanged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, PipelineConfig};
use crate::coupling::{generate_couplings, model_id, CouplingRequest, CouplingSet};
use crate::error::{Error, Result};
use crate::training::{train_stage, PairingStats};
use crate::util::sha256_hex;
use crate::velocityfield::{Stage, VelocityField};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TAG_NO_INIT: &str = "no-init";
pub const TAG_NO_IMMISCIBLE: &str = "no-immiscible";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Train(Stage),
    /// Coupling generation from the given stage's checkpoint.
    Couplings(Stage),
}

pub const PIPELINE: [Step; 6] = [
    Step::Train(Stage::Fm),
    Step::Train(Stage::Rf1),
    Step::Couplings(Stage::Rf1),
    Step::Train(Stage::Rf2),
    Step::Couplings(Stage::Rf2),
    Step::Train(Stage::Distilled),
];

impl Step {
    pub fn name(&self) -> String {
        match self {
            Step::Train(Stage::Distilled) => "distill".into(),
            Step::Train(s) => s.to_string(),
            Step::Couplings(s) => format!("couplings_{s}"),
        }
    }

    pub fn artifact(&self) -> String {
        match self {
            Step::Train(_) => format!("{}.ckpt", self.name()),
            Step::Couplings(_) => format!("{}.rfc", self.name()),
        }
    }
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(Step::Train(stage).artifact())
}

pub fn couplings_path(dir: &Path, source: Stage) -> PathBuf {
    dir.join(Step::Couplings(source).artifact())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub step: String,
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
    /// Hash of the config snapshot, step name and upstream artifact hashes.
    pub inputs_digest: String,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub final_ema_loss: Option<f64>,
    pub pairing: Option<PairingStats>,
    pub fresh_data_draws: usize,
    pub coupling_draws: usize,
    pub records: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEvent {
    pub step: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub toolkit_version: String,
    pub master_seed: u64,
    pub config: String,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    pub stats: BTreeMap<String, StageStats>,
    /// Wall-clock seconds per step; not part of the digest.
    pub timings: BTreeMap<String, f64>,
    /// Append-only record of every artifact write.
    pub events: Vec<ManifestEvent>,
    /// Log files (metrics), not hashed.
    pub logs: Vec<String>,
    /// Hash over version, seed, config snapshot and artifact records.
    pub digest: String,
}

impl RunManifest {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let snapshot = cfg.snapshot();
        let mut m = Self {
            run_id: sha256_hex(format!("{snapshot}\n{}", cfg.seed).as_bytes())[..16].to_string(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: cfg.seed,
            config: snapshot,
            artifacts: BTreeMap::new(),
            stats: BTreeMap::new(),
            timings: BTreeMap::new(),
            events: Vec::new(),
            logs: Vec::new(),
            digest: String::new(),
        };
        m.digest = m.compute_digest();
        m
    }

    pub fn compute_digest(&self) -> String {
        let body = serde_json::json!({
            "toolkit_version": self.toolkit_version,
            "master_seed": self.master_seed,
            "config": self.config,
            "artifacts": self.artifacts,
        });
        sha256_hex(body.to_string().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Checks that every recorded artifact exists with its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for rec in self.artifacts.values() {
            let bytes = std::fs::read(dir.join(&rec.file))
                .map_err(|e| Error::format(format!("artifact {} unreadable: {e}", rec.file)))?;
            if sha256_hex(&bytes) != rec.sha256 {
                return Err(Error::format(format!("artifact {} does not match its hash", rec.file)));
            }
        }
        if self.compute_digest() != self.digest {
            return Err(Error::format("manifest digest is stale"));
        }
        Ok(())
    }

    /// Union of all artifact tags.
    pub fn tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.artifacts.values().flat_map(|r| r.tags.clone()).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    fn record(&mut self, step: Step, bytes: &[u8], inputs_digest: String, tags: Vec<String>) {
        let rec = ArtifactRecord {
            step: step.name(),
            file: step.artifact(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
            inputs_digest,
            tags,
        };
        self.events.push(ManifestEvent {
            step: rec.step.clone(),
            file: rec.file.clone(),
            sha256: rec.sha256.clone(),
        });
        self.artifacts.insert(rec.step.clone(), rec);
        self.digest = self.compute_digest();
    }
}

/// Executes steps in a run directory, keeping the manifest up to date.
pub struct Runner<'a> {
    pub cfg: &'a PipelineConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    /// Skip steps whose recorded artifact is still valid.
    pub resume: bool,
}

fn read_input(path: &Path, step: Step, hint: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Config(format!(
            "step {} needs {} ({e}); {hint}",
            step.name(),
            path.display()
        ))
    })
}

impl<'a> Runner<'a> {
    /// Opens (or starts) the manifest in `cfg.out_dir`.
    pub fn open(cfg: &'a PipelineConfig) -> Result<Self> {
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(&dir)?;
        let fresh = RunManifest::new(cfg);
        let manifest = match RunManifest::load(&dir)? {
            Some(mut m) => {
                m.config = fresh.config;
                m.master_seed = cfg.seed;
                m.run_id = fresh.run_id;
                m.toolkit_version = fresh.toolkit_version;
                m.digest = m.compute_digest();
                m
            }
            None => fresh,
        };
        Ok(Self {
            cfg,
            dir,
            manifest,
            resume: true,
        })
    }

    fn inputs_digest(&self, step: Step, inputs: &[&[u8]]) -> String {
        let mut text = format!("{}\n{}\n{}\n", self.manifest.config, self.cfg.seed, step.name());
        for bytes in inputs {
            text.push_str(&sha256_hex(bytes));
            text.push('\n');
        }
        sha256_hex(text.as_bytes())
    }

    fn up_to_date(&self, step: Step, digest: &str) -> bool {
        let Some(rec) = self.manifest.artifacts.get(&step.name()) else {
            return false;
        };
        rec.inputs_digest == digest
            && std::fs::read(self.dir.join(&rec.file)).is_ok_and(|b| sha256_hex(&b) == rec.sha256)
    }

    fn load_field(&self, stage: Stage, step: Step) -> Result<(VelocityField, Vec<u8>)> {
        let path = checkpoint_path(&self.dir, stage);
        let bytes = read_input(&path, step, &format!("train stage {} first", Step::Train(stage).name()))?;
        let ck = crate::tensornet::Checkpoint::from_bytes(&bytes)?;
        Ok((VelocityField::from_checkpoint(&ck)?, bytes))
    }

    fn coupling_input(&self, stage: Stage, step: Step) -> Result<(CouplingSet, Vec<u8>)> {
        let (configured, source) = match stage {
            Stage::Rf2 => (&self.cfg.rf2_couplings, Stage::Rf1),
            _ => (&self.cfg.distill_couplings, Stage::Rf2),
        };
        let path = configured.clone().unwrap_or_else(|| couplings_path(&self.dir, source));
        let bytes = read_input(
            &path,
            step,
            &format!("missing coupling file; generate couplings from {source} first"),
        )?;
        Ok((CouplingSet::from_bytes(&bytes)?, bytes))
    }

    /// Runs one step; returns `false` when it was skipped as up to date.
    pub fn run_step(&mut self, step: Step) -> Result<bool> {
        self.run_step_inner(step).map_err(|e| e.in_stage(&step.name()))
    }

    fn run_step_inner(&mut self, step: Step) -> Result<bool> {
        let start = Instant::now();
        let cfg = self.cfg;
        match step {
            Step::Train(stage) => {
                let tcfg = cfg.train_config(stage);
                let mut tags = Vec::new();
                let (init, couplings, inputs): (VelocityField, Option<CouplingSet>, Vec<Vec<u8>>) = match stage {
                    Stage::Fm => (self.fresh_field(stage)?, None, vec![]),
                    Stage::Rf1 if cfg.rf1_init => {
                        let (f, b) = self.load_field(Stage::Fm, step)?;
                        (f, None, vec![b])
                    }
                    Stage::Rf1 => {
                        tags.push(TAG_NO_INIT.to_string());
                        (self.fresh_field(stage)?, None, vec![])
                    }
                    Stage::Rf2 | Stage::Distilled => {
                        let prev = if stage == Stage::Rf2 { Stage::Rf1 } else { Stage::Rf2 };
                        let (set, cb) = self.coupling_input(stage, step)?;
                        let (f, fb) = self.load_field(prev, step)?;
                        (f, Some(set), vec![fb, cb])
                    }
                };
                if stage == Stage::Rf1 && !tcfg.immiscible {
                    tags.push(TAG_NO_IMMISCIBLE.to_string());
                }
                let refs: Vec<&[u8]> = inputs.iter().map(Vec::as_slice).collect();
                let digest = self.inputs_digest(step, &refs);
                if self.resume && self.up_to_date(step, &digest) {
                    return Ok(false);
                }
                let mut init = init;
                for t in &tags {
                    if !init.has_tag(t) {
                        init.tags.push(t.clone());
                    }
                }
                let out = train_stage(tcfg, &cfg.task, init, couplings.as_ref())?;
                let meta = vec![
                    ("run_id".to_string(), self.manifest.run_id.clone()),
                    ("seed".to_string(), tcfg.seed.to_string()),
                    ("iterations".to_string(), tcfg.iterations.to_string()),
                    ("task".to_string(), cfg.task.name().to_string()),
                ];
                let bytes = out.field.to_checkpoint(&meta).to_bytes()?;
                std::fs::write(self.dir.join(step.artifact()), &bytes)?;
                let log = format!("metrics_{}.csv", step.name());
                std::fs::write(self.dir.join(&log), out.metrics_csv())?;
                if !self.manifest.logs.contains(&log) {
                    self.manifest.logs.push(log);
                }
                self.manifest.stats.insert(
                    step.name(),
                    StageStats {
                        iterations: tcfg.iterations,
                        final_loss: out.last().map(|r| r.loss),
                        final_ema_loss: out.last().map(|r| r.ema_loss),
                        pairing: (out.pairing.batches > 0).then_some(out.pairing),
                        fresh_data_draws: out.fresh_data_draws,
                        coupling_draws: out.coupling_draws,
                        records: None,
                    },
                );
                self.manifest.record(step, &bytes, digest, out.field.tags.clone());
            }
            Step::Couplings(source) => {
                let (field, fb) = self.load_field(source, step)?;
                let digest = self.inputs_digest(step, &[&fb]);
                if self.resume && self.up_to_date(step, &digest) {
                    return Ok(false);
                }
                let c = &cfg.couplings;
                let req = CouplingRequest {
                    task: cfg.task.name().to_string(),
                    count: c.count,
                    steps: c.steps,
                    omega: c.omega,
                    anchored: c.anchored,
                    anchor: c.anchor,
                    seed: derive_seed(cfg.seed, &step.name()),
                    shard_size: c.shard_size,
                };
                let set = generate_couplings(&field, &req)?;
                let bytes = set.to_bytes()?;
                std::fs::write(self.dir.join(step.artifact()), &bytes)?;
                self.manifest.stats.insert(
                    step.name(),
                    StageStats {
                        records: Some(set.len()),
                        ..StageStats::default()
                    },
                );
                self.manifest.record(step, &bytes, digest, field.tags.clone());
            }
        }
        self.manifest
            .timings
            .insert(step.name(), start.elapsed().as_secs_f64());
        self.manifest.save(&self.dir)?;
        Ok(true)
    }

    fn fresh_field(&self, stage: Stage) -> Result<VelocityField> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("init.{stage}")));
        VelocityField::new(self.cfg.field.clone(), stage, &mut rng)
    }

    pub fn save(&self) -> Result<()> {
        self.manifest.save(&self.dir)
    }
}

/// Runs (or resumes) the whole pipeline in `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    let mut runner = Runner::open(cfg)?;
    for step in PIPELINE {
        runner.run_step(step)?;
    }
    runner.save()?;
    Ok(runner.manifest)
}

/// Loads a checkpoint and reports its content id alongside.
pub fn load_field(path: &Path) -> Result<(VelocityField, String)> {
    let (field, _) = VelocityField::load(path)?;
    let id = model_id(&field)?;
    Ok((field, id))
}
