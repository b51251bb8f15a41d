//! Synthetic conditional 2-D datasets and the Gaussian noise source.
//!
//! Every sample carries a discrete label that plays the role of a prompt.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensornet::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Eight Gaussian modes on a circle; the label picks the mode.
    Gauss8,
    /// Eight dark cells of a 4×4 board on `[-4, 4]²`; the label picks the cell.
    Checkerboard,
    /// Two interleaved half circles; the label picks the moon.
    Moons2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub dim: usize,
    pub num_conditions: usize,
    /// Circle radius for `gauss8`; overall scale for `moons2`.
    pub radius: f64,
    /// Per-mode standard deviation (`gauss8`) or jitter (`moons2`).
    pub std: f64,
}

impl ToyTask {
    pub fn gauss8() -> Self {
        Self {
            kind: TaskKind::Gauss8,
            dim: 2,
            num_conditions: 8,
            radius: 4.0,
            std: 0.15,
        }
    }

    pub fn checkerboard() -> Self {
        Self {
            kind: TaskKind::Checkerboard,
            dim: 2,
            num_conditions: 8,
            radius: 4.0,
            std: 0.0,
        }
    }

    pub fn moons2() -> Self {
        Self {
            kind: TaskKind::Moons2,
            dim: 2,
            num_conditions: 2,
            radius: 2.0,
            std: 0.1,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gauss8" => Ok(Self::gauss8()),
            "checkerboard" => Ok(Self::checkerboard()),
            "moons2" => Ok(Self::moons2()),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::Gauss8 => "gauss8",
            TaskKind::Checkerboard => "checkerboard",
            TaskKind::Moons2 => "moons2",
        }
    }

    pub fn with_std(mut self, std: f64) -> Self {
        self.std = std;
        self
    }

    /// Centre of mode `k` for `gauss8`.
    pub fn mode_center(&self, k: usize) -> [f64; 2] {
        let angle = 2.0 * PI * k as f64 / self.num_conditions as f64;
        [self.radius * angle.cos(), self.radius * angle.sin()]
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_conditions {
            return Err(Error::Domain(format!(
                "label {label} outside [0, {})",
                self.num_conditions
            )));
        }
        Ok(())
    }

    /// Draws one point from the component selected by `label`.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, label: usize) -> [f64; 2] {
        match self.kind {
            TaskKind::Gauss8 => {
                let c = self.mode_center(label);
                let e0: f64 = StandardNormal.sample(rng);
                let e1: f64 = StandardNormal.sample(rng);
                [c[0] + self.std * e0, c[1] + self.std * e1]
            }
            TaskKind::Checkerboard => {
                // Dark cells are (row + col) even on a 4×4 grid of side 2.
                let row = label / 2;
                let col = 2 * (label % 2) + row % 2;
                let x0 = -self.radius + 2.0 * col as f64;
                let y0 = -self.radius + 2.0 * row as f64;
                [x0 + 2.0 * rng.random::<f64>(), y0 + 2.0 * rng.random::<f64>()]
            }
            TaskKind::Moons2 => {
                let theta = PI * rng.random::<f64>();
                let (x, y) = if label == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let e0: f64 = StandardNormal.sample(rng);
                let e1: f64 = StandardNormal.sample(rng);
                [
                    self.radius * (x - 0.5) + self.std * e0,
                    self.radius * (y - 0.25) + self.std * e1,
                ]
            }
        }
    }

    /// Draws `n` labelled points with uniformly distributed labels.
    pub fn sample_data<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<(Tensor, Vec<usize>)> {
        if n == 0 {
            return Err(Error::param("sample count must be >= 1"));
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.num_conditions)).collect();
        let points = self.sample_conditioned(rng, &labels)?;
        Ok((points, labels))
    }

    /// Draws one point per entry of `labels`, from that label's component.
    pub fn sample_conditioned<R: Rng + ?Sized>(&self, rng: &mut R, labels: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(labels.len() * self.dim);
        for &l in labels {
            self.check_label(l)?;
            data.extend_from_slice(&self.draw(rng, l));
        }
        Tensor::new(vec![labels.len(), self.dim], data)
    }

    /// Mixture density of `gauss8` at `x` (uniform weights over modes).
    pub fn gauss8_density(&self, x: [f64; 2]) -> Result<f64> {
        if self.kind != TaskKind::Gauss8 || self.std <= 0.0 {
            return Err(Error::contract("analytic density is only defined for gauss8 with std > 0"));
        }
        let var = self.std * self.std;
        let norm = 1.0 / (2.0 * PI * var);
        let sum: f64 = (0..self.num_conditions)
            .map(|k| {
                let c = self.mode_center(k);
                let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
                norm * (-0.5 * d2 / var).exp()
            })
            .sum();
        Ok(sum / self.num_conditions as f64)
    }
}

/// `n × dim` matrix of i.i.d. standard normal draws.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_parts(vec![n, dim], data)
}

/// Learnable per-label embeddings plus a separate null ("unconditional") vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    /// `[K, E]`
    pub table: Tensor,
    /// `[1, E]`
    pub null: Tensor,
}

impl ConditionEmbedding {
    pub fn new<R: Rng + ?Sized>(num_conditions: usize, width: usize, rng: &mut R) -> Result<Self> {
        if num_conditions == 0 || width == 0 {
            return Err(Error::param("embedding needs at least one condition and width >= 1"));
        }
        let table = (0..num_conditions * width).map(|_| StandardNormal.sample(rng)).collect();
        let null = (0..width).map(|_| StandardNormal.sample(rng)).collect();
        Ok(Self {
            table: Tensor::from_parts(vec![num_conditions, width], table),
            null: Tensor::from_parts(vec![1, width], null),
        })
    }

    pub fn zeros(num_conditions: usize, width: usize) -> Self {
        Self {
            table: Tensor::zeros(&[num_conditions, width]),
            null: Tensor::zeros(&[1, width]),
        }
    }

    pub fn num_conditions(&self) -> usize {
        self.table.rows()
    }

    pub fn width(&self) -> usize {
        self.null.cols()
    }
}
