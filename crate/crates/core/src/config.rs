//! `key = value` configuration files with `[section]` headers.
//!
//! ```text
//! # comment
//! [run]
//! task = gauss8
//! seed = 7
//! out_dir = runs/toy
//!
//! [stage.rf1]
//! iterations = 20000
//! sampler = logit_normal
//! ```
//!
//! Recognised sections and keys:
//!
//! | section | keys |
//! |---|---|
//! | `run` | `task`, `seed`, `out_dir` |
//! | `model` | `embed_width`, `time_embed_width`, `hidden` (comma list) |
//! | `stage.fm`, `stage.rf1`, `stage.rf2`, `stage.distill` | `iterations`, `batch_size`, `lr`, `beta1`, `beta2`, `adam_eps`, `weight_decay`, `sampler` (`uniform`, `logit_normal`, `mix_exp`), `mu`, `sigma`, `a`, `mix_form` (`centered`, `literal`), `immiscible`, `immiscible_scope` (`label`, `batch`), `reflow_assign`, `cond_drop`, `ema_decay`, `log_every`, `init` (rf1: `fm` or `none`), `couplings` (rf2/distill: coupling file path) |
//! | `couplings` | `count`, `steps`, `anchored`, `shard_size`, `source` (`rf1` or `rf2`) |
//! | `anchored` | `omega`, `inner_iters`, `eps`, `lr_embed`, `line_search`, `max_step` |
//! | `eval` | `samples`, `repetitions`, `seed`, `steps` (comma list), `omegas` (comma list), `cfg_steps`, `straightness_samples`, `straightness_steps` |
//!
//! Unknown sections or keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::anchored::AnchoredConfig;
use crate::error::{Error, Result};
use crate::tensornet::AdamConfig;
use crate::timesamplers::TimestepDistribution;
use crate::toydata::ToyTask;
use crate::training::{ImmiscibleScope, TrainConfig};
use crate::velocityfield::{FieldSpec, Stage};

const STAGE_KEYS: &[&str] = &[
    "iterations",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "sampler",
    "mu",
    "sigma",
    "a",
    "mix_form",
    "immiscible",
    "immiscible_scope",
    "reflow_assign",
    "cond_drop",
    "ema_decay",
    "log_every",
    "init",
    "couplings",
];

fn known_keys(section: &str) -> Option<&'static [&'static str]> {
    Some(match section {
        "run" => &["task", "seed", "out_dir"],
        "model" => &["embed_width", "time_embed_width", "hidden"],
        "stage.fm" | "stage.rf1" | "stage.rf2" | "stage.distill" => STAGE_KEYS,
        "couplings" => &["count", "steps", "anchored", "shard_size", "source"],
        "anchored" => &["omega", "inner_iters", "eps", "lr_embed", "line_search", "max_step"],
        "eval" => &[
            "samples",
            "repetitions",
            "seed",
            "steps",
            "omegas",
            "cfg_steps",
            "straightness_samples",
            "straightness_steps",
        ],
        _ => return None,
    })
}

/// Parsed but untyped configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RawConfig::default();
        let mut section: Option<String> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", n + 1)))?
                    .trim();
                if known_keys(name).is_none() {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", n + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let section = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {}: key outside any section", n + 1)))?;
            cfg.insert(section, key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn insert(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let keys = known_keys(section).ok_or_else(|| format!("unknown section [{section}]"))?;
        if !keys.contains(&key) {
            return Err(format!("unknown key `{key}` in [{section}]"));
        }
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `section.key=value`")))?;
        let (section, key) = path
            .trim()
            .rsplit_once('.')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` lacks a section")))?;
        self.insert(section, key, value.trim()).map_err(Error::Config)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    fn typed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value `{v}` for {section}.{key}"))),
        }
    }

    fn or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.typed(section, key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Config(format!("bad list item `{s}` in {section}.{key}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Sorted `[section]` / `key = value` text. `skip` drops keys given as
    /// `section.key`.
    pub fn canonical(&self, skip: &[&str]) -> String {
        let mut out = String::new();
        for (section, keys) in &self.sections {
            let kept: Vec<_> = keys
                .iter()
                .filter(|(k, _)| !skip.contains(&format!("{section}.{k}").as_str()))
                .collect();
            if kept.is_empty() {
                continue;
            }
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in kept {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

/// Coupling generation settings shared by both generation steps.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingSettings {
    pub count: usize,
    pub steps: usize,
    pub anchored: bool,
    pub shard_size: usize,
    pub source: Stage,
    pub omega: f64,
    pub anchor: AnchoredConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub samples: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub steps: Vec<usize>,
    pub omegas: Vec<f64>,
    pub cfg_steps: usize,
    pub straightness_samples: usize,
    pub straightness_steps: usize,
}

/// Fully typed run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub raw: RawConfig,
    pub task: ToyTask,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub field: FieldSpec,
    pub fm: TrainConfig,
    pub rf1: TrainConfig,
    pub rf2: TrainConfig,
    pub distill: TrainConfig,
    /// Start 1-RF from the flow-matching checkpoint.
    pub rf1_init: bool,
    pub rf2_couplings: Option<PathBuf>,
    pub distill_couplings: Option<PathBuf>,
    pub couplings: CouplingSettings,
    pub eval: EvalSettings,
}

/// Per-purpose seed derived from the master seed.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    let digest = crate::util::sha256_hex(format!("{master}:{purpose}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

fn stage_section(stage: Stage) -> &'static str {
    match stage {
        Stage::Fm => "stage.fm",
        Stage::Rf1 => "stage.rf1",
        Stage::Rf2 => "stage.rf2",
        Stage::Distilled => "stage.distill",
    }
}

fn parse_bool(raw: &RawConfig, section: &str, key: &str, default: bool) -> Result<bool> {
    raw.or(section, key, default)
}

fn train_config(raw: &RawConfig, stage: Stage, master: u64) -> Result<TrainConfig> {
    let s = stage_section(stage);
    let mut cfg = TrainConfig::for_stage(stage, derive_seed(master, s));
    cfg.iterations = raw.or(s, "iterations", cfg.iterations)?;
    cfg.batch_size = raw.or(s, "batch_size", cfg.batch_size)?;
    let d = AdamConfig::default();
    cfg.adam = AdamConfig {
        lr: raw.or(s, "lr", d.lr)?,
        beta1: raw.or(s, "beta1", d.beta1)?,
        beta2: raw.or(s, "beta2", d.beta2)?,
        eps: raw.or(s, "adam_eps", d.eps)?,
        weight_decay: raw.or(s, "weight_decay", d.weight_decay)?,
    };
    if let Some(kind) = raw.get(s, "sampler") {
        cfg.sampler = TimestepDistribution::from_parts(
            kind,
            raw.or(s, "mu", 0.0)?,
            raw.or(s, "sigma", 1.0)?,
            raw.or(s, "a", 4.0)?,
            raw.get(s, "mix_form").unwrap_or("centered"),
        )?;
    }
    cfg.immiscible = parse_bool(raw, s, "immiscible", cfg.immiscible)?;
    cfg.reflow_assign = parse_bool(raw, s, "reflow_assign", cfg.reflow_assign)?;
    if let Some(scope) = raw.get(s, "immiscible_scope") {
        cfg.immiscible_scope = ImmiscibleScope::parse(scope)?;
    }
    cfg.cond_drop = raw.or(s, "cond_drop", cfg.cond_drop)?;
    cfg.ema_decay = raw.or(s, "ema_decay", cfg.ema_decay)?;
    cfg.log_every = raw.or(s, "log_every", cfg.log_every)?;
    cfg.validate().map_err(|e| Error::Config(format!("[{s}]: {e}")))?;
    Ok(cfg)
}

impl PipelineConfig {
    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let task = ToyTask::by_name(raw.get("run", "task").unwrap_or("gauss8"))
            .map_err(|e| Error::Config(e.to_string()))?;
        let seed: u64 = raw.or("run", "seed", 0)?;
        let out_dir = PathBuf::from(raw.get("run", "out_dir").unwrap_or("runs/default"));

        let defaults = FieldSpec::default();
        let field = FieldSpec {
            dim: task.dim,
            num_conditions: task.num_conditions,
            embed_width: raw.or("model", "embed_width", defaults.embed_width)?,
            time_embed_width: raw.or("model", "time_embed_width", defaults.time_embed_width)?,
            hidden: raw.list("model", "hidden")?.unwrap_or(defaults.hidden),
        };
        if field.embed_width == 0 {
            return Err(Error::Config("model.embed_width must be >= 1".into()));
        }

        let init = raw.get("stage.rf1", "init").unwrap_or("fm");
        let rf1_init = match init {
            "fm" => true,
            "none" => false,
            other => return Err(Error::Config(format!("stage.rf1.init must be `fm` or `none`, got `{other}`"))),
        };

        let anchor_default = AnchoredConfig::default();
        let eps = match raw.get("anchored", "eps") {
            None | Some("default") => None,
            Some(_) => raw.typed("anchored", "eps")?,
        };
        let anchor = AnchoredConfig {
            inner_iters: raw.or("anchored", "inner_iters", anchor_default.inner_iters)?,
            eps,
            lr_embed: raw.or("anchored", "lr_embed", anchor_default.lr_embed)?,
            line_search: parse_bool(&raw, "anchored", "line_search", anchor_default.line_search)?,
            max_step: raw.or("anchored", "max_step", anchor_default.max_step)?,
        };
        anchor.validate().map_err(|e| Error::Config(format!("[anchored]: {e}")))?;
        let source: Stage = raw
            .get("couplings", "source")
            .unwrap_or("rf1")
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))?;
        if !matches!(source, Stage::Rf1 | Stage::Rf2) {
            return Err(Error::Config("couplings.source must be rf1 or rf2".into()));
        }
        let couplings = CouplingSettings {
            count: raw.or("couplings", "count", 8192)?,
            steps: raw.or("couplings", "steps", 100)?,
            anchored: parse_bool(&raw, "couplings", "anchored", true)?,
            shard_size: raw.or("couplings", "shard_size", 256)?,
            source,
            omega: raw.or("anchored", "omega", 2.0)?,
            anchor,
        };
        if couplings.steps == 0 || couplings.shard_size == 0 || couplings.count == 0 {
            return Err(Error::Config("couplings.count, steps and shard_size must be >= 1".into()));
        }
        if couplings.omega < 1.0 || !couplings.omega.is_finite() {
            return Err(Error::Config("anchored.omega must be >= 1".into()));
        }

        let eval = EvalSettings {
            samples: raw.or("eval", "samples", 512)?,
            repetitions: raw.or("eval", "repetitions", 10)?,
            seed: raw.or("eval", "seed", derive_seed(seed, "eval"))?,
            steps: raw.list("eval", "steps")?.unwrap_or_else(|| vec![1, 2, 4, 8, 16]),
            omegas: raw.list("eval", "omegas")?.unwrap_or_else(|| vec![1.0, 1.5, 2.0, 3.0, 4.0]),
            cfg_steps: raw.or("eval", "cfg_steps", 100)?,
            straightness_samples: raw.or("eval", "straightness_samples", 1024)?,
            straightness_steps: raw.or("eval", "straightness_steps", 100)?,
        };

        Ok(Self {
            task,
            seed,
            out_dir,
            field,
            fm: train_config(&raw, Stage::Fm, seed)?,
            rf1: train_config(&raw, Stage::Rf1, seed)?,
            rf2: train_config(&raw, Stage::Rf2, seed)?,
            distill: train_config(&raw, Stage::Distilled, seed)?,
            rf1_init,
            rf2_couplings: raw.get("stage.rf2", "couplings").map(PathBuf::from),
            distill_couplings: raw.get("stage.distill", "couplings").map(PathBuf::from),
            couplings,
            eval,
            raw,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(RawConfig::parse(text)?)
    }

    pub fn train_config(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Fm => &self.fm,
            Stage::Rf1 => &self.rf1,
            Stage::Rf2 => &self.rf2,
            Stage::Distilled => &self.distill,
        }
    }

    /// Configuration text with run-location keys removed; equal runs in
    /// different directories share it.
    pub fn snapshot(&self) -> String {
        self.raw.canonical(&["run.out_dir"])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_overrides() {
        let mut raw = RawConfig::parse(
            "# toy\n[run]\ntask = moons2\nseed = 3\n\n[stage.rf1]\niterations = 5\nsampler = logit_normal\nmu = 0.5\n",
        )
        .unwrap();
        raw.set("stage.rf1.iterations=7").unwrap();
        let cfg = PipelineConfig::from_raw(raw).unwrap();
        assert_eq!(cfg.task.name(), "moons2");
        assert_eq!(cfg.field.num_conditions, 2);
        assert_eq!(cfg.rf1.iterations, 7);
        assert_eq!(cfg.rf1.sampler, TimestepDistribution::LogitNormal { mu: 0.5, sigma: 1.0 });
        assert!(cfg.rf1.immiscible);
        assert_eq!(cfg.fm.iterations, 20_000);
        assert_ne!(cfg.fm.seed, cfg.rf1.seed);
    }

    #[test]
    fn rejects_unknown_and_malformed_input() {
        for bad in [
            "[nope]\n",
            "[run]\ncolour = red\n",
            "seed = 1\n",
            "[run]\nseed\n",
            "[run\n",
            "[run]\nseed = x\n",
            "[stage.fm]\niterations = 0\n",
            "[stage.rf1]\ninit = maybe\n",
            "[run]\ntask = spiral\n",
        ] {
            let err = PipelineConfig::parse(bad).unwrap_err();
            assert!(err.is_usage(), "{bad:?}: {err}");
        }
        assert!(RawConfig::default().set("novalue").is_err());
    }

    #[test]
    fn snapshot_ignores_output_location() {
        let a = PipelineConfig::parse("[run]\nout_dir = a\nseed = 1\n").unwrap();
        let b = PipelineConfig::parse("[run]\nseed = 1\nout_dir = b\n").unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        assert_eq!(a.snapshot(), "[run]\nseed = 1\n");
    }
}
