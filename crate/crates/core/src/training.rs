//! Regression objectives and the per-stage training loop.
//!
//! Every objective is the same kernel, `mean_i ‖targetᵢ − v(xᵢ, tᵢ, cᵢ)‖²`,
//! fed with different inputs:
//!
//! * flow matching / 1-RF: `x = (1 − t)z₀ + t z₁`, target `z₁ − z₀`, fresh pairs;
//! * reflow: the same on fixed coupling pairs;
//! * distillation: `x = z₀`, `t = 0`, target `z₁ − z₀` (one full Euler step).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{immiscible_assign, interpolate_rows, Assignment, CouplingSet};
use crate::error::{Error, Result};
use crate::tensornet::{AdamConfig, AdamState, Tape, Tensor};
use crate::timesamplers::TimestepDistribution;
use crate::toydata::{sample_noise, ToyTask};
use crate::velocityfield::{Cond, EmbeddingInput, Stage, VelocityField};

fn check_pair(field: &VelocityField, z0: &Tensor, z1: &Tensor) -> Result<()> {
    if z0.shape() != z1.shape() || z0.shape().len() != 2 || z0.cols() != field.spec.dim {
        return Err(Error::dim(format!(
            "pair shapes {:?} / {:?} for a dim-{} field",
            z0.shape(),
            z1.shape(),
            field.spec.dim
        )));
    }
    Ok(())
}

fn chord(z0: &Tensor, z1: &Tensor) -> Tensor {
    let data = z1.data().iter().zip(z0.data()).map(|(b, a)| b - a).collect();
    Tensor::from_parts(z0.shape().to_vec(), data)
}

fn labels_to_conds(labels: &[usize]) -> Vec<Cond> {
    labels.iter().map(|&l| Cond::Label(l)).collect()
}

/// Inputs of one evaluation of the shared kernel.
pub struct LossInput {
    pub x: Tensor,
    pub ts: Vec<f64>,
    pub conds: Vec<Cond>,
    pub target: Tensor,
}

impl LossInput {
    /// Straight-path regression at per-row times `ts`.
    pub fn path(z0: &Tensor, z1: &Tensor, ts: &[f64], conds: Vec<Cond>) -> Result<Self> {
        Ok(Self {
            x: interpolate_rows(z0, z1, ts)?,
            ts: ts.to_vec(),
            conds,
            target: chord(z0, z1),
        })
    }

    /// Single full step from `z0` at `t = 0`.
    pub fn one_step(z0: &Tensor, z1: &Tensor, conds: Vec<Cond>) -> Result<Self> {
        if z0.shape() != z1.shape() {
            return Err(Error::dim("distillation endpoints differ in shape"));
        }
        Ok(Self {
            x: z0.clone(),
            ts: vec![0.0],
            conds,
            target: chord(z0, z1),
        })
    }
}

/// Loss value without gradients.
pub fn kernel_loss(field: &VelocityField, input: &LossInput) -> Result<f64> {
    let v = field.eval(&input.x, &input.ts, EmbeddingInput::Conds(&input.conds))?;
    let n = input.x.rows();
    if n == 0 {
        return Err(Error::dim("empty batch"));
    }
    let total: f64 = v
        .data()
        .iter()
        .zip(input.target.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(total / n as f64)
}

/// Loss value plus gradients in [`VelocityField::parameters`] order.
pub fn kernel_loss_and_grads(field: &VelocityField, input: &LossInput) -> Result<(f64, Vec<Tensor>)> {
    let n = input.x.rows();
    if n == 0 {
        return Err(Error::dim("empty batch"));
    }
    let mut tape = Tape::new();
    let bound = field.bind(&mut tape, true);
    let v = field.forward_tape(&mut tape, &bound, &input.x, &input.ts, &input.conds)?;
    let target = tape.constant(input.target.clone());
    let d = tape.sub(target, v)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    let loss = tape.scale(s, 1.0 / n as f64);
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let out = bound
        .vars()
        .into_iter()
        .zip(field.parameters())
        .map(|(var, p)| grads.take(var).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, out))
}

/// `mean ‖(z₁ − z₀) − v(zₜ, t, c)‖²` on freshly paired noise and data.
pub fn rf_loss(field: &VelocityField, z0: &Tensor, z1: &Tensor, ts: &[f64], labels: &[usize]) -> Result<f64> {
    check_pair(field, z0, z1)?;
    kernel_loss(field, &LossInput::path(z0, z1, ts, labels_to_conds(labels))?)
}

/// The same objective on fixed coupling pairs.
pub fn reflow_loss(field: &VelocityField, z0: &Tensor, z1: &Tensor, ts: &[f64], labels: &[usize]) -> Result<f64> {
    rf_loss(field, z0, z1, ts, labels)
}

/// `mean ‖z₁ − (z₀ + v(z₀, 0, c))‖²`.
pub fn distill_loss(field: &VelocityField, z0: &Tensor, z1: &Tensor, labels: &[usize]) -> Result<f64> {
    check_pair(field, z0, z1)?;
    kernel_loss(field, &LossInput::one_step(z0, z1, labels_to_conds(labels))?)
}

/// Which rows may exchange noise during immiscible assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImmiscibleScope {
    /// Only rows sharing a label, so each label still sees exactly Gaussian noise.
    Label,
    /// The whole batch regardless of label.
    Batch,
}

impl ImmiscibleScope {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "label" => Ok(Self::Label),
            "batch" => Ok(Self::Batch),
            other => Err(Error::Config(format!("unknown immiscible scope `{other}` (label or batch)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub iterations: usize,
    /// Ignored for distillation, which always trains at `t = 0`.
    pub sampler: TimestepDistribution,
    /// Re-pair fresh noise to data per batch (fm / rf1 only).
    pub immiscible: bool,
    /// Re-pair coupling noise within each batch (rf2 / distill); off by default.
    pub reflow_assign: bool,
    pub immiscible_scope: ImmiscibleScope,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Probability of replacing a row's label by the null condition.
    pub cond_drop: f64,
    pub ema_decay: f64,
    /// Keep a [`LossReport`] every this many iterations (and the last one).
    pub log_every: usize,
}

impl TrainConfig {
    /// Stage defaults for the toy setting.
    pub fn for_stage(stage: Stage, seed: u64) -> Self {
        let (iterations, sampler, immiscible, cond_drop) = match stage {
            Stage::Fm => (20_000, TimestepDistribution::Uniform, false, 0.1),
            Stage::Rf1 => (
                20_000,
                TimestepDistribution::LogitNormal { mu: 0.0, sigma: 1.0 },
                true,
                0.1,
            ),
            Stage::Rf2 => (
                10_000,
                TimestepDistribution::MixExp {
                    a: 4.0,
                    form: crate::timesamplers::MixExpForm::Centered,
                },
                false,
                0.1,
            ),
            Stage::Distilled => (10_000, TimestepDistribution::Uniform, false, 0.0),
        };
        Self {
            stage,
            batch_size: 256,
            iterations,
            sampler,
            immiscible,
            reflow_assign: false,
            immiscible_scope: ImmiscibleScope::Label,
            adam: AdamConfig::default(),
            seed,
            cond_drop,
            ema_decay: 0.99,
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iteration count must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::Config(format!("cond_drop {} outside [0, 1]", self.cond_drop)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        self.sampler.validate()?;
        self.adam.validate()
    }

    fn uses_couplings(&self) -> bool {
        matches!(self.stage, Stage::Rf2 | Stage::Distilled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub loss: f64,
    pub ema_loss: f64,
    pub seconds: f64,
}

/// Per-batch comparison of assigned vs. as-drawn pairing cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairingStats {
    pub batches: usize,
    /// Batches where the assignment was strictly cheaper than the draw order.
    pub improved: usize,
    pub assigned_cost: f64,
    pub drawn_cost: f64,
}

impl PairingStats {
    pub fn improved_fraction(&self) -> f64 {
        if self.batches == 0 {
            0.0
        } else {
            self.improved as f64 / self.batches as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub field: VelocityField,
    pub reports: Vec<LossReport>,
    pub pairing: PairingStats,
    /// Batches drawn fresh from the data distribution.
    pub fresh_data_draws: usize,
    /// Batches drawn from a coupling set.
    pub coupling_draws: usize,
}

impl TrainOutcome {
    pub fn last(&self) -> Option<&LossReport> {
        self.reports.last()
    }

    /// Writes `iteration,loss,ema_loss,seconds` rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("iteration,loss,ema_loss,seconds\n");
        for r in &self.reports {
            out.push_str(&format!("{},{},{},{:.3}\n", r.iteration, r.loss, r.ema_loss, r.seconds));
        }
        out
    }
}

fn drop_conds<R: Rng>(rng: &mut R, labels: &[usize], p: f64) -> Vec<Cond> {
    labels
        .iter()
        .map(|&l| {
            if p > 0.0 && rng.random::<f64>() < p {
                Cond::Null
            } else {
                Cond::Label(l)
            }
        })
        .collect()
}

fn assign(z1: &Tensor, z0: Tensor, labels: &[usize], scope: ImmiscibleScope, stats: &mut PairingStats) -> Result<Tensor> {
    let a = match scope {
        ImmiscibleScope::Batch => immiscible_assign(z1, &z0)?,
        ImmiscibleScope::Label => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                groups.entry(l).or_default().push(i);
            }
            let mut perm = vec![0; labels.len()];
            let mut cost = 0.0;
            for rows in groups.values() {
                let sub = immiscible_assign(&z1.select_rows(rows), &z0.select_rows(rows))?;
                for (k, &j) in sub.perm.iter().enumerate() {
                    perm[rows[k]] = rows[j];
                }
                cost += sub.cost;
            }
            Assignment { perm, cost }
        }
    };
    let drawn: f64 = (0..z1.rows())
        .map(|i| z1.row(i).iter().zip(z0.row(i)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    stats.batches += 1;
    stats.assigned_cost += a.cost;
    stats.drawn_cost += drawn;
    if a.cost < drawn {
        stats.improved += 1;
    }
    Ok(z0.select_rows(&a.perm))
}

/// Trains `init` for `cfg.iterations` steps. Stages `fm`/`rf1` draw fresh
/// data every batch; `rf2`/`distill` only ever read `couplings`.
pub fn train_stage(
    cfg: &TrainConfig,
    task: &ToyTask,
    init: VelocityField,
    couplings: Option<&CouplingSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut field = init;
    field.stage = cfg.stage;
    if field.spec.dim != task.dim {
        return Err(Error::dim(format!("field dim {} vs task dim {}", field.spec.dim, task.dim)));
    }
    let couplings = if cfg.uses_couplings() {
        let set = couplings.ok_or_else(|| Error::Config(format!("stage {} requires a coupling file", cfg.stage)))?;
        if set.is_empty() {
            return Err(Error::Config("coupling set is empty".into()));
        }
        if set.dim != field.spec.dim || set.num_conditions > field.spec.num_conditions {
            return Err(Error::dim("coupling set does not match the field"));
        }
        Some(set)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam, &field.parameters())?;
    let mut out = TrainOutcome {
        field: field.clone(),
        reports: Vec::with_capacity(cfg.iterations / cfg.log_every + 1),
        pairing: PairingStats::default(),
        fresh_data_draws: 0,
        coupling_draws: 0,
    };
    let start = Instant::now();
    let mut ema = None;
    let b = cfg.batch_size;

    for it in 1..=cfg.iterations {
        let (z0, z1, labels) = match couplings {
            Some(set) => {
                let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..set.len())).collect();
                out.coupling_draws += 1;
                let z1 = set.z1.select_rows(&idx);
                let mut z0 = set.z0.select_rows(&idx);
                if cfg.reflow_assign {
                    let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
                    z0 = assign(&z1, z0, &labels, cfg.immiscible_scope, &mut out.pairing)?;
                }
                (z0, z1, idx.iter().map(|&i| set.labels[i]).collect::<Vec<_>>())
            }
            None => {
                let (z1, labels) = task.sample_data(&mut rng, b)?;
                out.fresh_data_draws += 1;
                let mut z0 = sample_noise(&mut rng, b, task.dim);
                if cfg.immiscible {
                    z0 = assign(&z1, z0, &labels, cfg.immiscible_scope, &mut out.pairing)?;
                }
                (z0, z1, labels)
            }
        };
        let conds = drop_conds(&mut rng, &labels, cfg.cond_drop);
        let input = if cfg.stage == Stage::Distilled {
            LossInput::one_step(&z0, &z1, conds)?
        } else {
            let ts = cfg.sampler.sample(&mut rng, b)?;
            LossInput::path(&z0, &z1, &ts, conds)?
        };
        let (loss, grads) = kernel_loss_and_grads(&field, &input)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        adam.step(&mut field.parameters_mut(), &grad_refs)?;

        let e = match ema {
            None => loss,
            Some(prev) => cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * loss,
        };
        ema = Some(e);
        if it % cfg.log_every == 0 || it == cfg.iterations {
            out.reports.push(LossReport {
                iteration: it,
                loss,
                ema_loss: e,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    out.field = field;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocityfield::FieldSpec;

    fn spec() -> FieldSpec {
        FieldSpec {
            dim: 2,
            num_conditions: 8,
            embed_width: 4,
            time_embed_width: 4,
            hidden: vec![16],
        }
    }

    fn rows(v: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_field_loss_is_squared_chord() {
        let f = VelocityField::constant(spec(), &[0.0, 0.0]).unwrap();
        let z0 = rows(&[[0.0, 0.0], [1.0, 1.0]]);
        let z1 = rows(&[[3.0, 4.0], [4.0, 5.0]]);
        assert_eq!(rf_loss(&f, &z0, &z1, &[0.2, 0.7], &[0, 1]).unwrap(), 25.0);
        assert_eq!(distill_loss(&f, &z0, &z1, &[0, 1]).unwrap(), 25.0);
    }

    #[test]
    fn label_scope_only_swaps_within_labels() {
        let z1 = rows(&[[0.0, 0.0], [10.0, 0.0], [0.0, 0.1], [10.0, 0.1]]);
        // Noise drawn next to the "wrong" label's data.
        let z0 = rows(&[[10.0, 0.0], [0.0, 0.0], [0.0, 0.2], [10.0, 0.2]]);
        let labels = [0, 1, 0, 1];
        let mut stats = PairingStats::default();
        let scoped = assign(&z1, z0.clone(), &labels, ImmiscibleScope::Label, &mut stats).unwrap();
        // Rows of label 0 can only receive noise rows 0 and 2.
        let mut got0 = [scoped.row(0).to_vec(), scoped.row(2).to_vec()];
        got0.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        assert_eq!(got0, [vec![0.0, 0.2], vec![10.0, 0.0]]);
        assert!(stats.assigned_cost <= stats.drawn_cost + 1e-9);

        let mut batch_stats = PairingStats::default();
        let global = assign(&z1, z0, &labels, ImmiscibleScope::Batch, &mut batch_stats).unwrap();
        assert_eq!(global.row(0), &[0.0, 0.0]);
        assert!(batch_stats.assigned_cost < stats.assigned_cost);
        assert!(ImmiscibleScope::parse("row").is_err());
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let f = VelocityField::constant(spec(), &[3.0, 4.0]).unwrap();
        let z0 = rows(&[[0.0, 0.0], [1.0, -1.0]]);
        let z1 = rows(&[[3.0, 4.0], [4.0, 3.0]]);
        assert_eq!(rf_loss(&f, &z0, &z1, &[0.5, 0.1], &[2, 3]).unwrap(), 0.0);
        assert_eq!(reflow_loss(&f, &z0, &z1, &[0.5, 0.1], &[2, 3]).unwrap(), 0.0);
        assert_eq!(distill_loss(&f, &z0, &z1, &[2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f = VelocityField::constant(spec(), &[0.0, 0.0]).unwrap();
        let z0 = rows(&[[0.0, 0.0]]);
        let z1 = Tensor::zeros(&[1, 3]);
        assert!(rf_loss(&f, &z0, &z1, &[0.5], &[0]).is_err());
    }

    #[test]
    fn coupling_stages_need_couplings() {
        let f = VelocityField::constant(spec(), &[0.0, 0.0]).unwrap();
        let cfg = TrainConfig {
            iterations: 1,
            ..TrainConfig::for_stage(Stage::Rf2, 0)
        };
        let err = train_stage(&cfg, &ToyTask::gauss8(), f, None).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let f = VelocityField::new(spec(), Stage::Fm, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut cfg = TrainConfig::for_stage(Stage::Rf1, 3);
        cfg.iterations = 1;
        cfg.batch_size = 16;
        cfg.adam.lr = 0.0;
        let out = train_stage(&cfg, &ToyTask::gauss8(), f.clone(), None).unwrap();
        assert_eq!(out.field.parameters(), f.parameters());
        assert_eq!(out.field.stage, Stage::Rf1);
    }

    #[test]
    fn training_is_deterministic_and_tracks_draws() {
        let f = VelocityField::new(spec(), Stage::Fm, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut cfg = TrainConfig::for_stage(Stage::Rf1, 5);
        cfg.iterations = 20;
        cfg.batch_size = 32;
        cfg.log_every = 5;
        let a = train_stage(&cfg, &ToyTask::gauss8(), f.clone(), None).unwrap();
        let b = train_stage(&cfg, &ToyTask::gauss8(), f, None).unwrap();
        assert_eq!(a.field, b.field);
        assert_eq!(a.fresh_data_draws, 20);
        assert_eq!(a.coupling_draws, 0);
        assert_eq!(a.pairing.batches, 20);
        assert!(a.pairing.assigned_cost <= a.pairing.drawn_cost);
        assert_eq!(a.reports.len(), 4);
        assert!(a.reports.iter().all(|r| r.loss >= 0.0));
    }
}
