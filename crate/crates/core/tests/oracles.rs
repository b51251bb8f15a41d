mod common;

use std::time::Instant;

use common::*;
use rand::Rng;
use rflow_core::coupling::{hungarian, pairwise_cost};
use rflow_core::evalharness::{energy_distance, wasserstein2};
use rflow_core::tensornet::Tensor;
use rflow_core::toydata::ToyTask;
use rflow_core::training::{distill_loss, reflow_loss, rf_loss};
use rflow_core::velocityfield::{Cond, FieldSpec, Stage, VelocityField};

#[test]
fn tape_gradients_match_finite_differences() {
    let start = Instant::now();
    let (worst, checked) = fd_gradient_check(120, 11);
    let secs = start.elapsed().as_secs_f64();
    assert!(checked > 5000, "only {checked} entries checked");
    assert!(worst < 1e-4, "worst relative error {worst:e}");
    assert!(secs < 30.0, "took {secs:.1} s");
}

#[test]
fn cost_matrix_matches_double_loop() {
    let mut r = rng(1);
    for _ in 0..20 {
        let a = random_points(&mut r, 4, 3, 2.0);
        let b = random_points(&mut r, 4, 3, 2.0);
        let c = pairwise_cost(&a, &b).unwrap();
        let naive = naive_cost(&a, &b);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(c.row(i)[j], naive[i][j]);
            }
        }
    }
}

#[test]
fn w2_matches_permutation_search() {
    let mut r = rng(2);
    for _ in 0..200 {
        let n = r.random_range(1..=7);
        let d = r.random_range(1..=3);
        let a = random_points(&mut r, n, d, 3.0);
        let b = random_points(&mut r, n, d, 3.0);
        let got = wasserstein2(&a, &b).unwrap();
        let want = naive_w2(&a, &b);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn energy_matches_double_loop() {
    let mut r = rng(3);
    for _ in 0..200 {
        let n = r.random_range(2..=8);
        let m = r.random_range(2..=8);
        let d = r.random_range(1..=3);
        let a = random_points(&mut r, n, d, 3.0);
        let b = random_points(&mut r, m, d, 3.0);
        let got = energy_distance(&a, &b).unwrap();
        let want = naive_energy(&a, &b).max(0.0);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn hungarian_cost_equals_sum_over_permutation() {
    let mut r = rng(4);
    for _ in 0..50 {
        let n = r.random_range(1..=8);
        let a = random_points(&mut r, n, 2, 1.0);
        let b = random_points(&mut r, n, 2, 1.0);
        let asg = hungarian(&pairwise_cost(&a, &b).unwrap()).unwrap();
        let c = naive_cost(&a, &b);
        let s: f64 = asg.perm.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
        assert!((s - asg.cost).abs() < 1e-12);
        assert!((asg.cost - brute_force_min(&c)).abs() < 1e-10);
    }
}

fn small_field(seed: u64) -> VelocityField {
    let spec = FieldSpec {
        dim: 2,
        num_conditions: 3,
        embed_width: 4,
        time_embed_width: 4,
        hidden: vec![8, 8],
    };
    VelocityField::new(spec, Stage::Fm, &mut rng(seed)).unwrap()
}

#[test]
fn losses_match_per_sample_loops() {
    let field = small_field(5);
    let mut r = rng(6);
    let n = 9;
    let z0 = random_points(&mut r, n, 2, 2.0);
    let z1 = random_points(&mut r, n, 2, 2.0);
    let ts: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let conds: Vec<Cond> = labels.iter().map(|&l| Cond::Label(l)).collect();
    let target = Tensor::new(
        vec![n, 2],
        z1.data().iter().zip(z0.data()).map(|(a, b)| a - b).collect(),
    )
    .unwrap();
    let x = Tensor::new(
        vec![n, 2],
        (0..n)
            .flat_map(|i| {
                let t = ts[i];
                (0..2).map(move |j| (t, i, j))
            })
            .map(|(t, i, j)| (1.0 - t) * z0.row(i)[j] + t * z1.row(i)[j])
            .collect(),
    )
    .unwrap();
    let path_oracle = loop_loss(&field, &x, &ts, &conds, &target);
    let rf = rf_loss(&field, &z0, &z1, &ts, &labels).unwrap();
    let reflow = reflow_loss(&field, &z0, &z1, &ts, &labels).unwrap();
    assert!((rf - path_oracle).abs() < 1e-12);
    assert_eq!(rf, reflow);
    let one_step_oracle = loop_loss(&field, &z0, &[0.0], &conds, &target);
    let distill = distill_loss(&field, &z0, &z1, &labels).unwrap();
    assert!((distill - one_step_oracle).abs() < 1e-12);
}

#[test]
fn label_histogram_is_multinomial() {
    let task = ToyTask::gauss8();
    let n = 100_000;
    let (_, labels) = task.sample_data(&mut rng(7), n).unwrap();
    let mut counts = [0usize; 8];
    for l in labels {
        counts[l] += 1;
    }
    let p = 1.0 / 8.0;
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
    }
}
