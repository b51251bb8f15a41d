//! Anchored optimization of the unconditional embedding.
//!
//! A pivot trajectory is simulated with `ω = 1`. The guided (`ω > 1`)
//! trajectory then starts from the same `z₀` and, at every step `k`, the
//! per-sample null embedding is tuned so that
//! `‖z*_{k+1} − (z_k + Δt·v_cfg(z_k, t_k))‖²` is small before the state is
//! advanced. Network weights and label embeddings stay frozen.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{euler_simulate, euler_step};
use crate::tensornet::{Tape, Tensor};
use crate::velocityfield::{combine_cfg, VelocityField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchoredConfig {
    /// Maximum gradient steps per solver step.
    pub inner_iters: usize,
    /// Early-stop threshold on the residual; `None` means `1e-6 · dim`.
    pub eps: Option<f64>,
    /// Plain descent step, or the probe length in embedding space when
    /// `line_search` is on.
    pub lr_embed: f64,
    /// Pick each step length by fitting a quadratic along the gradient.
    pub line_search: bool,
    /// Longest line-search move of an embedding in one inner iteration.
    pub max_step: f64,
}

impl Default for AnchoredConfig {
    fn default() -> Self {
        Self {
            inner_iters: 10,
            eps: None,
            lr_embed: 1e-2,
            line_search: true,
            max_step: 1.0,
        }
    }
}

impl AnchoredConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_embed >= 0.0 && self.lr_embed.is_finite()) {
            return Err(Error::param(format!("lr_embed must be >= 0, got {}", self.lr_embed)));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::param(format!("max_step must be > 0, got {}", self.max_step)));
        }
        if let Some(eps) = self.eps {
            if !(eps >= 0.0) {
                return Err(Error::param(format!("eps must be >= 0, got {eps}")));
            }
        }
        Ok(())
    }

    pub fn threshold(&self, dim: usize) -> f64 {
        self.eps.unwrap_or(1e-6 * dim as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchoredResult {
    /// One `[n, E]` tensor per step: the embedding used to advance that step.
    pub embeddings: Vec<Tensor>,
    pub final_state: Tensor,
    pub pivot_final: Tensor,
    /// `[T][n]` residual at the warm-started embedding, before any update.
    /// Rows where the global null embedding does better restart from it.
    pub initial_residuals: Vec<Vec<f64>>,
    /// `[T][n]` best residual reached (the one the state advanced with).
    pub residuals: Vec<Vec<f64>>,
    /// `[T][n]` gradient steps taken.
    pub inner_iterations: Vec<Vec<usize>>,
}

struct Probe {
    next: Tensor,
    residual: Vec<f64>,
}

struct StepCtx<'a> {
    field: &'a VelocityField,
    omega: f64,
    dt: f64,
    t: f64,
}

impl StepCtx<'_> {
    /// Unconditional velocity at `emb`, the resulting next state and its
    /// residual against `target`, for the rows in `z`.
    fn probe(&self, z: &Tensor, vc: &Tensor, emb: &Tensor, target: &Tensor) -> Result<Probe> {
        let vu = self.field.eval(z, &[self.t], crate::velocityfield::EmbeddingInput::Rows(emb))?;
        Ok(self.finish(z, vc, vu, target))
    }

    fn finish(&self, z: &Tensor, vc: &Tensor, vu: Tensor, target: &Tensor) -> Probe {
        let next = euler_step(z, &combine_cfg(self.omega, vc, &vu), self.dt);
        let residual = (0..z.rows())
            .map(|i| sq_dist(target.row(i), next.row(i)))
            .collect();
        Probe { next, residual }
    }

    /// Same as [`probe`](Self::probe) plus the gradient of each row's
    /// residual with respect to that row's embedding.
    fn probe_with_grad(&self, z: &Tensor, vc: &Tensor, emb: &Tensor, target: &Tensor) -> Result<(Probe, Tensor)> {
        let mut tape = Tape::new();
        let net = self.field.net.bind(&mut tape, false);
        let e = tape.leaf(emb.clone().tracked());
        let vu = self.field.forward_tape_with(&mut tape, &net, z, &[self.t], e)?;
        let vu_value = tape.value(vu).clone();
        // d = (z* − z − Δt·ω·v_c) − Δt·(1 − ω)·v_u
        let mut offset = target.clone();
        for ((o, zi), ci) in offset.data_mut().iter_mut().zip(z.data()).zip(vc.data()) {
            *o -= zi + self.dt * self.omega * ci;
        }
        let offset = tape.constant(offset);
        let scaled = tape.scale(vu, self.dt * (1.0 - self.omega));
        let d = tape.sub(offset, scaled)?;
        let sq = tape.square(d);
        let loss = tape.sum(sq);
        let mut grads = tape.backward(loss)?;
        let g = grads
            .take(e)
            .ok_or_else(|| Error::contract("embedding gradient missing"))?;
        Ok((self.finish(z, vc, vu_value, target), g))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn non_finite(step: usize, residual: &[f64], rows: &[usize]) -> Result<()> {
    match residual.iter().position(|r| !r.is_finite()) {
        Some(j) => Err(Error::AnchoredResidual { step, row: rows[j] }),
        None => Ok(()),
    }
}

/// Runs anchored guided simulation for a batch `z0: [n, dim]`; every row
/// optimizes its own embeddings independently.
pub fn anchored_generate(
    field: &VelocityField,
    z0: &Tensor,
    labels: &[usize],
    steps: usize,
    omega: f64,
    cfg: &AnchoredConfig,
) -> Result<AnchoredResult> {
    if !(omega >= 1.0 && omega.is_finite()) {
        return Err(Error::param(format!("anchored guidance needs omega >= 1, got {omega}")));
    }
    cfg.validate()?;
    let pivot = euler_simulate(field, z0, labels, steps)?;
    let n = z0.rows();
    let width = field.spec.embed_width;
    let null_rows = Tensor::from_parts(vec![n, width], field.cond.null.data().repeat(n));
    let mut emb = null_rows.clone();

    if omega == 1.0 {
        return Ok(AnchoredResult {
            embeddings: vec![emb; steps],
            final_state: pivot.final_state().clone(),
            pivot_final: pivot.final_state().clone(),
            initial_residuals: vec![vec![0.0; n]; steps],
            residuals: vec![vec![0.0; n]; steps],
            inner_iterations: vec![vec![0; n]; steps],
        });
    }

    let eps = cfg.threshold(field.spec.dim);
    let dt = 1.0 / steps as f64;
    let mut z = z0.clone();
    let mut out = AnchoredResult {
        embeddings: Vec::with_capacity(steps),
        final_state: Tensor::zeros(&[0]),
        pivot_final: pivot.final_state().clone(),
        initial_residuals: Vec::with_capacity(steps),
        residuals: Vec::with_capacity(steps),
        inner_iterations: Vec::with_capacity(steps),
    };

    for k in 0..steps {
        let ctx = StepCtx {
            field,
            omega,
            dt,
            t: k as f64 / steps as f64,
        };
        let target = &pivot.states[k + 1];
        let vc = field.eval_labels(&z, ctx.t, labels)?;

        let mut best_emb = emb.clone();
        let mut best_next = Tensor::zeros(&[n, field.spec.dim]);
        let mut best_r = vec![f64::INFINITY; n];
        let mut iters = vec![0usize; n];
        let mut cur = emb.clone();
        let warm = ctx.probe(&z, &vc, &emb, target)?;
        let all: Vec<usize> = (0..n).collect();
        non_finite(k, &warm.residual, &all)?;
        let initial = warm.residual;
        if k > 0 {
            let null = ctx.probe(&z, &vc, &null_rows, target)?;
            non_finite(k, &null.residual, &all)?;
            for i in 0..n {
                if null.residual[i] < initial[i] {
                    cur.row_mut(i).copy_from_slice(null_rows.row(i));
                }
            }
        }
        let mut active: Vec<usize> = (0..n).collect();

        for it in 0..=cfg.inner_iters {
            if active.is_empty() {
                break;
            }
            let za = z.select_rows(&active);
            let vca = vc.select_rows(&active);
            let ea = cur.select_rows(&active);
            let ta = target.select_rows(&active);
            let want_grad = it < cfg.inner_iters;
            let (probe, grad) = if want_grad {
                let (p, g) = ctx.probe_with_grad(&za, &vca, &ea, &ta)?;
                (p, Some(g))
            } else {
                (ctx.probe(&za, &vca, &ea, &ta)?, None)
            };
            non_finite(k, &probe.residual, &active)?;

            for (j, &i) in active.iter().enumerate() {
                let r = probe.residual[j];
                if r < best_r[i] {
                    best_r[i] = r;
                    best_emb.row_mut(i).copy_from_slice(ea.row(j));
                    best_next.row_mut(i).copy_from_slice(probe.next.row(j));
                }
            }
            let Some(grad) = grad else { break };

            let keep: Vec<usize> = (0..active.len()).filter(|&j| best_r[active[j]] >= eps).collect();
            if keep.is_empty() {
                break;
            }
            let mut alphas = vec![cfg.lr_embed; keep.len()];
            if cfg.line_search {
                let rows: Vec<usize> = keep.iter().map(|&j| active[j]).collect();
                let mut trial = cur.select_rows(&rows);
                let mut gnorm2 = vec![0.0; keep.len()];
                for (q, &j) in keep.iter().enumerate() {
                    let g = grad.row(j);
                    gnorm2[q] = g.iter().map(|x| x * x).sum();
                    let a1 = if gnorm2[q] > 0.0 { cfg.lr_embed / gnorm2[q].sqrt() } else { 0.0 };
                    alphas[q] = a1;
                    for (e, gi) in trial.row_mut(q).iter_mut().zip(g) {
                        *e -= a1 * gi;
                    }
                }
                let sub = |t: &Tensor| t.select_rows(&keep);
                let p1 = ctx.probe(&sub(&za), &sub(&vca), &trial, &sub(&ta))?;
                non_finite(k, &p1.residual, &rows)?;
                for (q, &j) in keep.iter().enumerate() {
                    let a1 = alphas[q];
                    if a1 == 0.0 {
                        continue;
                    }
                    let f0 = probe.residual[j];
                    let f1 = p1.residual[q];
                    // f(α) ≈ f0 − α‖g‖² + c·α²
                    let c = (f1 - f0 + a1 * gnorm2[q]) / (a1 * a1);
                    if c > 0.0 {
                        alphas[q] = gnorm2[q] / (2.0 * c);
                    }
                    alphas[q] = alphas[q].min(cfg.max_step / gnorm2[q].sqrt());
                }
            }
            for (q, &j) in keep.iter().enumerate() {
                let i = active[j];
                iters[i] += 1;
                let g = grad.row(j);
                for (e, gi) in cur.row_mut(i).iter_mut().zip(g) {
                    *e -= alphas[q] * gi;
                }
            }
            active = keep.iter().map(|&j| active[j]).collect();
        }

        out.embeddings.push(best_emb.clone());
        out.initial_residuals.push(initial);
        out.residuals.push(best_r);
        out.inner_iterations.push(iters);
        emb = best_emb;
        z = best_next;
    }
    out.final_state = z;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::solver::{euler_final, Guided};
    use crate::tensornet::{Activation, Linear, MlpNet};
    use crate::toydata::{sample_noise, ConditionEmbedding};
    use crate::velocityfield::{FieldSpec, GuidanceSpec, Stage};

    fn spec() -> FieldSpec {
        FieldSpec {
            dim: 2,
            num_conditions: 3,
            embed_width: 4,
            time_embed_width: 4,
            hidden: vec![16, 16],
        }
    }

    fn field(seed: u64) -> VelocityField {
        VelocityField::new(spec(), Stage::Rf1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch(n: usize) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (sample_noise(&mut rng, n, 2), (0..n).map(|i| i % 3).collect())
    }

    #[test]
    fn omega_one_returns_pivot() {
        let f = field(1);
        let (z0, labels) = batch(5);
        let res = anchored_generate(&f, &z0, &labels, 8, 1.0, &AnchoredConfig::default()).unwrap();
        let plain = euler_final(&f, &z0, &labels, 8).unwrap();
        assert_eq!(res.final_state, plain);
        assert!(res.residuals.iter().flatten().all(|&r| r == 0.0));
        assert!(res.inner_iterations.iter().flatten().all(|&k| k == 0));
        assert_eq!(res.embeddings.len(), 8);
    }

    #[test]
    fn residuals_never_increase_and_anchor_pulls_toward_pivot() {
        let f = field(2);
        let (z0, labels) = batch(6);
        let res = anchored_generate(&f, &z0, &labels, 10, 3.0, &AnchoredConfig::default()).unwrap();
        for (init, fin) in res.initial_residuals.iter().zip(&res.residuals) {
            for (a, b) in init.iter().zip(fin) {
                assert!(b <= a);
            }
        }
        let guided = GuidanceSpec::new(3.0).unwrap();
        let plain = euler_final(&Guided { field: &f, spec: &guided }, &z0, &labels, 10).unwrap();
        for i in 0..6 {
            let anchored = sq_dist(res.final_state.row(i), res.pivot_final.row(i));
            let unanchored = sq_dist(plain.row(i), res.pivot_final.row(i));
            assert!(anchored <= unanchored, "row {i}: {anchored} > {unanchored}");
        }
    }

    #[test]
    fn replaying_embeddings_reproduces_final_state() {
        let f = field(3);
        let (z0, labels) = batch(4);
        let res = anchored_generate(&f, &z0, &labels, 6, 2.0, &AnchoredConfig::default()).unwrap();
        let guided = GuidanceSpec::new(2.0).unwrap().with_step_embeddings(res.embeddings.clone());
        let replay = euler_final(&Guided { field: &f, spec: &guided }, &z0, &labels, 6).unwrap();
        assert_eq!(replay, res.final_state);
    }

    #[test]
    fn embedding_free_field_runs_to_the_iteration_cap() {
        let mut f = field(4);
        // Zero the first-layer rows fed by the embedding.
        let input = f.spec.dim + f.spec.time_embed_width;
        let w = &mut f.net.layers_mut()[0].weight;
        let cols = w.cols();
        for r in input..w.rows() {
            for c in 0..cols {
                w.data_mut()[r * cols + c] = 0.0;
            }
        }
        let (z0, labels) = batch(3);
        let cfg = AnchoredConfig {
            eps: Some(0.0),
            ..AnchoredConfig::default()
        };
        let res = anchored_generate(&f, &z0, &labels, 4, 2.0, &cfg).unwrap();
        for k in 0..4 {
            assert_eq!(res.initial_residuals[k], res.residuals[k]);
            assert!(res.inner_iterations[k].iter().all(|&n| n == cfg.inner_iters));
        }
    }

    /// 1-D field whose output is `w·e + b` in the null embedding: the residual
    /// is quadratic in `e`, so one exact line-search step solves it.
    #[test]
    fn exact_line_search_solves_affine_case() {
        let spec = FieldSpec {
            dim: 1,
            num_conditions: 1,
            embed_width: 2,
            time_embed_width: 0,
            hidden: vec![],
        };
        // Input layout is [z, e0, e1]; output = 0.3·z + 0.7·e0 − 0.4·e1 + 0.1.
        let layer = Linear {
            weight: Tensor::new(vec![3, 1], vec![0.3, 0.7, -0.4]).unwrap(),
            bias: Tensor::new(vec![1], vec![0.1]).unwrap(),
        };
        let net = MlpNet::from_layers(vec![layer], Activation::Identity).unwrap();
        let cond = ConditionEmbedding {
            table: Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap(),
            null: Tensor::new(vec![1, 2], vec![-0.5, 0.2]).unwrap(),
        };
        let f = VelocityField::from_parts(net, cond, spec, Stage::Rf1).unwrap();
        let z0 = Tensor::new(vec![1, 1], vec![0.8]).unwrap();
        let cfg = AnchoredConfig {
            inner_iters: 1,
            eps: Some(0.0),
            lr_embed: 1e-2,
            line_search: true,
            max_step: f64::INFINITY,
        };
        let res = anchored_generate(&f, &z0, &[0], 1, 2.5, &cfg).unwrap();
        assert!(res.initial_residuals[0][0] > 1e-3);
        assert!(res.residuals[0][0] < 1e-10, "{}", res.residuals[0][0]);
        assert_eq!(res.inner_iterations[0][0], 1);
    }

    #[test]
    fn embedding_moves_stay_inside_the_step_cap() {
        let f = field(9);
        let (z0, labels) = batch(6);
        let cfg = AnchoredConfig {
            max_step: 0.05,
            ..AnchoredConfig::default()
        };
        let res = anchored_generate(&f, &z0, &labels, 6, 3.0, &cfg).unwrap();
        let null = f.cond.null.row(0);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let bound = cfg.inner_iters as f64 * cfg.max_step + 1e-12;
        for k in 0..6 {
            for i in 0..z0.rows() {
                let e = res.embeddings[k].row(i);
                let from_null = dist(e, null);
                let from_prev = if k == 0 { from_null } else { dist(e, res.embeddings[k - 1].row(i)) };
                assert!(from_null.min(from_prev) <= bound, "step {k} row {i}");
            }
        }
    }

    #[test]
    fn deterministic() {
        let f = field(5);
        let (z0, labels) = batch(4);
        let a = anchored_generate(&f, &z0, &labels, 5, 2.0, &AnchoredConfig::default()).unwrap();
        let b = anchored_generate(&f, &z0, &labels, 5, 2.0, &AnchoredConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_omega_below_one() {
        let f = field(6);
        let (z0, labels) = batch(2);
        assert!(anchored_generate(&f, &z0, &labels, 3, 0.5, &AnchoredConfig::default()).is_err());
    }
}
