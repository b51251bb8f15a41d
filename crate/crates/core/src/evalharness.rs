//! Sample-quality metrics and the sweeps built on them.
//!
//! Every sweep repetition `r` draws its noise, labels and reference data
//! from ChaCha stream `r` of the report seed, so a report is reproducible
//! from `(seed, repetitions, samples)` alone. Labels are assigned
//! round-robin, which gives generated and reference sets identical label
//! counts and lets W₂ be computed per label and averaged.

use serde::{Deserialize, Serialize};

use crate::anchored::{anchored_generate, AnchoredConfig};
use crate::coupling::{hungarian, pairwise_cost, shard_rng};
use crate::error::{Error, Result};
use crate::solver::{euler_final, euler_simulate, straightness, Guided, StraightnessSummary, VelocityModel};
use crate::tensornet::Tensor;
use crate::toydata::{sample_noise, ToyTask};
use crate::util::map_ordered;
use crate::velocityfield::{GuidanceSpec, VelocityField};

/// Exact empirical 2-Wasserstein distance between equal-size point sets.
pub fn wasserstein2(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::dim(format!("W2 between {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 {
        return Err(Error::param("W2 needs at least one point"));
    }
    let assignment = hungarian(&pairwise_cost(a, b)?)?;
    Ok((assignment.cost.max(0.0) / a.rows() as f64).sqrt())
}

fn mean_pair_distance(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let x = a.row(i);
        for j in 0..b.rows() {
            total += x.iter().zip(b.row(j)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// `2·E‖A − B‖ − E‖A − A′‖ − E‖B − B′‖`, all expectations taken over every
/// ordered pair (diagonal included), which keeps the estimate non-negative.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::dim(format!("energy distance between {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::param("energy distance needs at least two points per set"));
    }
    let d = 2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b);
    Ok(d.max(0.0))
}

/// W₂ per label, averaged over the labels present.
pub fn conditional_w2(samples: &Tensor, reference: &Tensor, labels: &[usize]) -> Result<f64> {
    if samples.rows() != labels.len() || reference.rows() != labels.len() {
        return Err(Error::dim("labels do not match sample counts"));
    }
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut total = 0.0;
    let mut groups = 0;
    for l in 0..=max {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == l).collect();
        if idx.is_empty() {
            continue;
        }
        total += wasserstein2(&samples.select_rows(&idx), &reference.select_rows(&idx))?;
        groups += 1;
    }
    if groups == 0 {
        return Err(Error::param("no samples to evaluate"));
    }
    Ok(total / groups as f64)
}

/// Mean and standard error over repetitions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_values(values: &[f64]) -> Self {
        let s = StraightnessSummary::from_values(values);
        Self {
            mean: s.mean,
            std_err: s.std_err,
        }
    }

    pub fn upper(&self, k: f64) -> f64 {
        self.mean + k * self.std_err
    }

    pub fn lower(&self, k: f64) -> f64 {
        self.mean - k * self.std_err
    }
}

/// One `(model, T, ω, repetition)` measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub sweep: String,
    pub steps: usize,
    pub omega: f64,
    pub anchored: bool,
    pub repetition: usize,
    pub w2: f64,
    pub energy: f64,
}

/// Aggregate over repetitions for one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub steps: usize,
    pub omega: f64,
    pub anchored: bool,
    pub w2: Estimate,
    pub energy: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub repetitions: usize,
    pub samples: usize,
    pub few_step: Vec<SweepPoint>,
    pub cfg: Vec<SweepPoint>,
    pub straightness: Option<StraightnessSummary>,
    pub straightness_steps: Option<usize>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(model: &str, spec: &EvalSpec) -> Self {
        Self {
            model: model.to_string(),
            seed: spec.seed,
            repetitions: spec.repetitions,
            samples: spec.samples,
            few_step: Vec::new(),
            cfg: Vec::new(),
            straightness: None,
            straightness_steps: None,
            rows: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Tidy CSV, one row per `(model, T, ω, repetition)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,sweep,steps,omega,anchored,repetition,w2,energy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.model, r.sweep, r.steps, r.omega, r.anchored, r.repetition, r.w2, r.energy
            ));
        }
        out
    }

    pub fn point(&self, steps: usize) -> Option<&SweepPoint> {
        self.few_step.iter().find(|p| p.steps == steps)
    }

    pub fn cfg_point(&self, omega: f64, anchored: bool) -> Option<&SweepPoint> {
        self.cfg.iter().find(|p| p.omega == omega && p.anchored == anchored)
    }
}

/// Shared sweep settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub samples: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            samples: 512,
            repetitions: 10,
            seed: 0,
        }
    }
}

impl EvalSpec {
    fn validate(&self, task: &ToyTask) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::param("at least one repetition is required"));
        }
        if self.samples < 2 * task.num_conditions {
            return Err(Error::param(format!(
                "need at least {} samples (two per label)",
                2 * task.num_conditions
            )));
        }
        Ok(())
    }

    /// Noise, round-robin labels and matching reference data for repetition `r`.
    pub fn draw(&self, task: &ToyTask, r: usize) -> Result<(Tensor, Vec<usize>, Tensor)> {
        let mut rng = shard_rng(self.seed, r);
        let labels: Vec<usize> = (0..self.samples).map(|i| i % task.num_conditions).collect();
        let z0 = sample_noise(&mut rng, self.samples, task.dim);
        let reference = task.sample_conditioned(&mut rng, &labels)?;
        Ok((z0, labels, reference))
    }
}

fn aggregate(rows: &[EvalRow], steps: usize, omega: f64, anchored: bool) -> SweepPoint {
    let w2: Vec<f64> = rows.iter().map(|r| r.w2).collect();
    let energy: Vec<f64> = rows.iter().map(|r| r.energy).collect();
    SweepPoint {
        steps,
        omega,
        anchored,
        w2: Estimate::from_values(&w2),
        energy: Estimate::from_values(&energy),
    }
}

fn measure(samples: &Tensor, reference: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    Ok((conditional_w2(samples, reference, labels)?, energy_distance(samples, reference)?))
}

/// W₂ and energy distance of `T`-step samples for every `T` in `steps`.
pub fn few_step_sweep(
    model: &dyn VelocityModel,
    model_id: &str,
    task: &ToyTask,
    steps: &[usize],
    spec: &EvalSpec,
) -> Result<(Vec<SweepPoint>, Vec<EvalRow>)> {
    spec.validate(task)?;
    let per_rep = map_ordered(spec.repetitions, |r| -> Result<Vec<(f64, f64)>> {
        let (z0, labels, reference) = spec.draw(task, r)?;
        steps
            .iter()
            .map(|&t| measure(&euler_final(model, &z0, &labels, t)?, &reference, &labels))
            .collect()
    });
    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(steps.len());
    let mut rows = Vec::new();
    for (s, &t) in steps.iter().enumerate() {
        let group: Vec<EvalRow> = per_rep
            .iter()
            .enumerate()
            .map(|(r, m)| EvalRow {
                model: model_id.to_string(),
                sweep: "few_step".into(),
                steps: t,
                omega: 1.0,
                anchored: false,
                repetition: r,
                w2: m[s].0,
                energy: m[s].1,
            })
            .collect();
        points.push(aggregate(&group, t, 1.0, false));
        rows.extend(group);
    }
    Ok((points, rows))
}

/// Guided sampling at each `ω`, plain and (when `anchor` is given) anchored.
pub fn cfg_sweep(
    field: &VelocityField,
    model_id: &str,
    task: &ToyTask,
    omegas: &[f64],
    steps: usize,
    anchor: Option<&AnchoredConfig>,
    spec: &EvalSpec,
) -> Result<(Vec<SweepPoint>, Vec<EvalRow>)> {
    spec.validate(task)?;
    let mut variants: Vec<(f64, bool)> = omegas.iter().map(|&w| (w, false)).collect();
    if anchor.is_some() {
        variants.extend(omegas.iter().map(|&w| (w, true)));
    }
    let per_rep = map_ordered(spec.repetitions, |r| -> Result<Vec<(f64, f64)>> {
        let (z0, labels, reference) = spec.draw(task, r)?;
        variants
            .iter()
            .map(|&(omega, anchored)| {
                let samples = match anchor {
                    Some(cfg) if anchored => anchored_generate(field, &z0, &labels, steps, omega, cfg)?.final_state,
                    _ => {
                        let g = GuidanceSpec::new(omega)?;
                        euler_final(&Guided { field, spec: &g }, &z0, &labels, steps)?
                    }
                };
                measure(&samples, &reference, &labels)
            })
            .collect()
    });
    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(variants.len());
    let mut rows = Vec::new();
    for (v, &(omega, anchored)) in variants.iter().enumerate() {
        let group: Vec<EvalRow> = per_rep
            .iter()
            .enumerate()
            .map(|(r, m)| EvalRow {
                model: model_id.to_string(),
                sweep: "cfg".into(),
                steps,
                omega,
                anchored,
                repetition: r,
                w2: m[v].0,
                energy: m[v].1,
            })
            .collect();
        points.push(aggregate(&group, steps, omega, anchored));
        rows.extend(group);
    }
    Ok((points, rows))
}

/// Mean straightness over `n` seeded trajectories of `steps` Euler steps.
pub fn straightness_eval(
    model: &dyn VelocityModel,
    task: &ToyTask,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<StraightnessSummary> {
    if n == 0 {
        return Err(Error::param("straightness needs at least one trajectory"));
    }
    let mut rng = shard_rng(seed, 0);
    let labels: Vec<usize> = (0..n).map(|i| i % task.num_conditions).collect();
    let z0 = sample_noise(&mut rng, n, task.dim);
    let traj = euler_simulate(model, &z0, &labels, steps)?;
    Ok(StraightnessSummary::from_values(&straightness(&traj)?))
}
