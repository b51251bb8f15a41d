//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rflow_core::tensornet::Tensor;
use rflow_core::training::{kernel_loss, kernel_loss_and_grads, LossInput};
use rflow_core::velocityfield::{Cond, FieldSpec, Stage, VelocityField};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, d: usize, scale: f64) -> Tensor {
    let data = (0..n * d).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

/// Calls `f` once per permutation of `0..n` (Heap's algorithm).
pub fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    f(&p);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            f(&p);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Minimum of `Σ cost[i][p(i)]` over all permutations.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for_each_permutation(cost.len(), |p| {
        let s: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        best = best.min(s);
    });
    best
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn naive_cost(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| (0..b.rows()).map(|j| sq_dist(a.row(i), b.row(j))).collect())
        .collect()
}

pub fn naive_w2(a: &Tensor, b: &Tensor) -> f64 {
    (brute_force_min(&naive_cost(a, b)) / a.rows() as f64).sqrt()
}

pub fn naive_energy(a: &Tensor, b: &Tensor) -> f64 {
    let mean_dist = |x: &Tensor, y: &Tensor| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                s += sq_dist(x.row(i), y.row(j)).sqrt();
            }
        }
        s / (x.rows() * y.rows()) as f64
    };
    2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
}

/// Per-sample loop form of the regression loss.
pub fn loop_loss(field: &VelocityField, x: &Tensor, ts: &[f64], conds: &[Cond], target: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let row = Tensor::new(vec![1, x.cols()], x.row(i).to_vec()).unwrap();
        let t = if ts.len() == 1 { ts[0] } else { ts[i] };
        let v = field.eval_velocity(&row, t, &conds[i..i + 1]).unwrap();
        total += sq_dist(v.row(0), target.row(i));
    }
    total / x.rows() as f64
}

/// A small randomly shaped field with randomised weights.
pub fn random_small_field<R: Rng>(rng: &mut R) -> VelocityField {
    let spec = FieldSpec {
        dim: rng.random_range(1..=3),
        num_conditions: rng.random_range(1..=4),
        embed_width: rng.random_range(1..=4),
        time_embed_width: 2 * rng.random_range(1..=3),
        hidden: (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=6)).collect(),
    };
    VelocityField::new(spec, Stage::Fm, rng).unwrap()
}

/// Largest elementwise relative error between tape gradients and central
/// differences (h = 1e-5) of the loss, over `nets` random fields. Errors
/// are measured relative to `max(|analytic|, |numeric|, 1e-6)`.
pub fn fd_gradient_check(nets: usize, seed: u64) -> (f64, usize) {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..nets {
        let mut field = random_small_field(&mut rng);
        let n = rng.random_range(1..=5);
        let d = field.spec.dim;
        let k = field.spec.num_conditions;
        let z0 = random_points(&mut rng, n, d, 1.5);
        let z1 = random_points(&mut rng, n, d, 1.5);
        let ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let conds: Vec<Cond> = (0..n)
            .map(|_| {
                if rng.random_bool(0.25) {
                    Cond::Null
                } else {
                    Cond::Label(rng.random_range(0..k))
                }
            })
            .collect();
        let input = LossInput::path(&z0, &z1, &ts, conds).unwrap();
        let (_, grads) = kernel_loss_and_grads(&field, &input).unwrap();
        let h = 1e-5;
        let count = field.parameters().len();
        for p in 0..count {
            for e in 0..field.parameters()[p].len() {
                let orig = field.parameters()[p].data()[e];
                field.parameters_mut()[p].data_mut()[e] = orig + h;
                let up = kernel_loss(&field, &input).unwrap();
                field.parameters_mut()[p].data_mut()[e] = orig - h;
                let down = kernel_loss(&field, &input).unwrap();
                field.parameters_mut()[p].data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[p].data()[e];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    (worst, checked)
}
