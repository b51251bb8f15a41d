//! Fixed-step Euler integration of `dz/dt = v(z, t)` from `t = 0` to `t = 1`,
//! trajectory recording, and the straightness measure
//! `S = (1/T) Σ_k ‖(z₁ − z₀) − v(z_{t_k}, t_k)‖²`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensornet::Tensor;
use crate::velocityfield::{eval_cfg, GuidanceSpec, VelocityField};

/// Anything that yields velocities for a batch of states at a shared time.
pub trait VelocityModel: Sync {
    fn dim(&self) -> usize;

    /// Velocities for `z: [n, dim]` at time `t`; `step` is the solver step
    /// index (used by guidance with per-step embeddings).
    fn velocity(&self, z: &Tensor, t: f64, step: usize, labels: &[usize]) -> Result<Tensor>;
}

impl VelocityModel for VelocityField {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn velocity(&self, z: &Tensor, t: f64, _step: usize, labels: &[usize]) -> Result<Tensor> {
        self.eval_labels(z, t, labels)
    }
}

/// A field combined with classifier-free guidance.
pub struct Guided<'a> {
    pub field: &'a VelocityField,
    pub spec: &'a GuidanceSpec,
}

impl VelocityModel for Guided<'_> {
    fn dim(&self) -> usize {
        self.field.spec.dim
    }

    fn velocity(&self, z: &Tensor, t: f64, step: usize, labels: &[usize]) -> Result<Tensor> {
        eval_cfg(self.field, self.spec, z, t, labels, step)
    }
}

/// Analytic field defined row by row: `f(z_row, t, label) -> v_row`.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VelocityModel for FnField<F>
where
    F: Fn(&[f64], f64, usize) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, z: &Tensor, t: f64, _step: usize, labels: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(z.len());
        for i in 0..z.rows() {
            let label = labels.get(i).copied().unwrap_or(0);
            let v = (self.f)(z.row(i), t, label);
            if v.len() != self.dim {
                return Err(Error::dim("analytic field returned wrong width"));
            }
            data.extend(v);
        }
        // Non-finite rows are left for the solver to report with their index.
        Ok(Tensor::from_parts(vec![z.rows(), self.dim], data))
    }
}

/// Recorded Euler simulation of a batch: `states[k + 1] = states[k] + dt·velocities[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `T + 1` tensors of shape `[n, dim]`.
    pub states: Vec<Tensor>,
    /// `T` tensors of shape `[n, dim]`, evaluated at the left endpoint of each step.
    pub velocities: Vec<Tensor>,
    /// `t_k = k / T` for `k < T`.
    pub timesteps: Vec<f64>,
    pub dt: f64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.velocities.len()
    }

    pub fn final_state(&self) -> &Tensor {
        self.states.last().expect("trajectory has at least one state")
    }

    /// The trajectory of a single batch row.
    pub fn row(&self, i: usize) -> Trajectory {
        Trajectory {
            states: self.states.iter().map(|s| s.select_rows(&[i])).collect(),
            velocities: self.velocities.iter().map(|v| v.select_rows(&[i])).collect(),
            timesteps: self.timesteps.clone(),
            dt: self.dt,
        }
    }

    /// Writes one CSV per batch row: `step,t,z0..,v0..`. The final row carries
    /// `t = 1` and empty velocity cells. `{i}` in `pattern` is replaced by the
    /// row index.
    pub fn write_csv(&self, pattern: &str) -> Result<Vec<String>> {
        let n = self.final_state().rows();
        let dim = self.final_state().cols();
        let mut paths = Vec::with_capacity(n);
        for i in 0..n {
            let path = if pattern.contains("{i}") {
                pattern.replace("{i}", &i.to_string())
            } else {
                format!("{pattern}.{i}.csv")
            };
            let mut out = String::from("step,t");
            for d in 0..dim {
                out.push_str(&format!(",z{d}"));
            }
            for d in 0..dim {
                out.push_str(&format!(",v{d}"));
            }
            out.push('\n');
            for (k, state) in self.states.iter().enumerate() {
                let t = self.timesteps.get(k).copied().unwrap_or(1.0);
                out.push_str(&format!("{k},{t}"));
                for x in state.row(i) {
                    out.push_str(&format!(",{x}"));
                }
                match self.velocities.get(k) {
                    Some(v) => {
                        for x in v.row(i) {
                            out.push_str(&format!(",{x}"));
                        }
                    }
                    None => out.push_str(&",".repeat(dim)),
                }
                out.push('\n');
            }
            if let Some(parent) = Path::new(&path).parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&path, out)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// One Euler update `z + dt·v`, the single expression every caller shares.
pub fn euler_step(z: &Tensor, v: &Tensor, dt: f64) -> Tensor {
    let data = z.data().iter().zip(v.data()).map(|(a, b)| a + dt * b).collect();
    Tensor::from_parts(z.shape().to_vec(), data)
}

pub(crate) fn first_non_finite_row(t: &Tensor) -> Option<usize> {
    (0..t.rows()).find(|&i| t.row(i).iter().any(|v| !v.is_finite()))
}

fn check_inputs(model: &dyn VelocityModel, z0: &Tensor, labels: &[usize], steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::param("Euler simulation needs at least one step"));
    }
    if z0.shape().len() != 2 || z0.cols() != model.dim() {
        return Err(Error::dim(format!("initial state {:?} for dim {}", z0.shape(), model.dim())));
    }
    if labels.len() != z0.rows() {
        return Err(Error::dim(format!("{} labels for {} rows", labels.len(), z0.rows())));
    }
    if let Some(row) = first_non_finite_row(z0) {
        return Err(Error::Divergence { step: 0, row });
    }
    Ok(())
}

fn integrate(
    model: &dyn VelocityModel,
    z0: &Tensor,
    labels: &[usize],
    steps: usize,
    mut record: impl FnMut(&Tensor, Tensor),
) -> Result<Tensor> {
    check_inputs(model, z0, labels, steps)?;
    let dt = 1.0 / steps as f64;
    let mut z = z0.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = model
            .velocity(&z, t, k, labels)
            .map_err(|e| match e {
                Error::Domain(_) => match first_non_finite_row(&z) {
                    Some(row) => Error::Divergence { step: k, row },
                    None => e,
                },
                e => e,
            })?;
        if let Some(row) = first_non_finite_row(&v) {
            return Err(Error::Divergence { step: k, row });
        }
        let next = euler_step(&z, &v, dt);
        if let Some(row) = first_non_finite_row(&next) {
            return Err(Error::Divergence { step: k + 1, row });
        }
        record(&z, v);
        z = next;
    }
    Ok(z)
}

/// Simulates `steps` Euler steps from `z0`, recording every state and velocity.
pub fn euler_simulate(model: &dyn VelocityModel, z0: &Tensor, labels: &[usize], steps: usize) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps);
    let last = integrate(model, z0, labels, steps, |z, v| {
        states.push(z.clone());
        velocities.push(v);
    })?;
    states.push(last);
    Ok(Trajectory {
        states,
        velocities,
        timesteps: (0..steps).map(|k| k as f64 / steps as f64).collect(),
        dt: 1.0 / steps as f64,
    })
}

/// Like [`euler_simulate`] but keeps only the final state.
pub fn euler_final(model: &dyn VelocityModel, z0: &Tensor, labels: &[usize], steps: usize) -> Result<Tensor> {
    integrate(model, z0, labels, steps, |_, _| {})
}

/// Per-row straightness `S` of a recorded trajectory.
pub fn straightness(traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.velocities.is_empty() || traj.states.len() != traj.velocities.len() + 1 {
        return Err(Error::contract("straightness needs a complete, non-empty trajectory"));
    }
    let z0 = &traj.states[0];
    let z1 = traj.final_state();
    let n = z0.rows();
    let steps = traj.velocities.len() as f64;
    let mut out = vec![0.0; n];
    for v in &traj.velocities {
        for (i, s) in out.iter_mut().enumerate() {
            *s += z1
                .row(i)
                .iter()
                .zip(z0.row(i))
                .zip(v.row(i))
                .map(|((a, b), vi)| {
                    let d = (a - b) - vi;
                    d * d
                })
                .sum::<f64>();
        }
    }
    for s in &mut out {
        *s /= steps;
    }
    Ok(out)
}

/// Batch mean of `S` with its Monte-Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StraightnessSummary {
    pub mean: f64,
    pub std_err: f64,
    /// `ln(mean)`, absent when the mean is exactly zero.
    pub log_mean: Option<f64>,
    pub count: usize,
}

impl StraightnessSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n.max(1) as f64).sqrt(),
            log_mean: (mean > 0.0).then(|| mean.ln()),
            count: n,
        }
    }
}
