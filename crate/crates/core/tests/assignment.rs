use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rflow_core::coupling::{hungarian, immiscible_assign, pairwise_cost};
use rflow_core::tensornet::Tensor;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                rec(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn brute_force(cost: &Tensor) -> f64 {
    let n = cost.rows();
    permutations(n)
        .iter()
        .map(|p| (0..n).map(|i| cost.data()[i * n + p[i]]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

#[test]
fn matches_exhaustive_search_up_to_eight() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let perms: Vec<Vec<Vec<usize>>> = (0..=8).map(permutations).collect();
    for instance in 0..240 {
        let n = 1 + instance % 8;
        let d = 1 + instance % 3;
        let z1 = random_batch(&mut rng, n, d);
        let z0 = random_batch(&mut rng, n, d);
        let cost = pairwise_cost(&z1, &z0).unwrap();
        let a = immiscible_assign(&z1, &z0).unwrap();
        let best = perms[n]
            .iter()
            .map(|p| (0..n).map(|i| cost.data()[i * n + p[i]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.cost, best, "instance {instance} (n = {n})");
    }
}

#[test]
fn integer_costs_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(1..=7);
        let data = (0..n * n).map(|_| rng.random_range(0..4) as f64).collect();
        let cost = Tensor::new(vec![n, n], data).unwrap();
        assert_eq!(hungarian(&cost).unwrap().cost, brute_force(&cost));
    }
}

#[test]
fn naive_cost_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z1 = random_batch(&mut rng, 4, 3);
    let z0 = random_batch(&mut rng, 4, 3);
    let c = pairwise_cost(&z1, &z0).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..3 {
                let d = z1.row(i)[k] - z0.row(j)[k];
                s += d * d;
            }
            assert_eq!(c.data()[i * 4 + j], s);
        }
    }
}

proptest! {
    #[test]
    fn assignment_is_a_cheaper_bijection(seed in any::<u64>(), n in 1usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z1 = random_batch(&mut rng, n, 2);
        let z0 = random_batch(&mut rng, n, 2);
        let cost = pairwise_cost(&z1, &z0).unwrap();
        let a = immiscible_assign(&z1, &z0).unwrap();
        let mut seen = vec![false; n];
        for &j in &a.perm {
            prop_assert!(!seen[j]);
            seen[j] = true;
        }
        let identity: f64 = (0..n).map(|i| cost.data()[i * n + i]).sum();
        prop_assert!(a.cost <= identity + 1e-9 * identity.max(1.0));
        let recomputed: f64 = (0..n).map(|i| cost.data()[i * n + a.perm[i]]).sum();
        prop_assert_eq!(recomputed, a.cost);
    }

    #[test]
    fn reassignment_preserves_the_noise_multiset(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z1 = random_batch(&mut rng, n, 2);
        let z0 = random_batch(&mut rng, n, 2);
        let a = immiscible_assign(&z1, &z0).unwrap();
        let paired = z0.select_rows(&a.perm);
        let key = |t: &Tensor| {
            let mut rows: Vec<Vec<u64>> = (0..t.rows()).map(|i| t.row(i).iter().map(|x| x.to_bits()).collect()).collect();
            rows.sort();
            rows
        };
        prop_assert_eq!(key(&paired), key(&z0));
    }

    #[test]
    fn identical_batches_pair_with_themselves(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_batch(&mut rng, n, 2);
        let a = immiscible_assign(&z, &z).unwrap();
        prop_assert_eq!(a.cost, 0.0);
    }
}
