//! Shared training machinery: Adam with cosine decay, the batched
//! per-sample-tape training loop used by every trainable component, and the
//! tape-level denoising loss.
//!
//! Each batch item builds its own tape (parameters enter as shared `Arc`s, so
//! no copies), items run in parallel, and gradients reduce in index order so
//! runs are bit-reproducible.

use crate::backbone::{forward_tokens, patchify, BackboneConfig, BackboneVars, ForwardExtras};
use crate::data::Dataset;
use crate::diffusion::{q_sample, standard_normal_grid, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{Tape, Var};
use ndarray::{Array2, Array3};
use rand::Rng;
use rayon::prelude::*;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 disables.
    pub checkpoint_interval: usize,
    /// Print a progress line every this many steps; 0 disables.
    pub log_every: usize,
    pub label: String,
}

pub struct TrainResult {
    pub params: Vec<Arc<Array2<f64>>>,
    pub curve: Vec<(usize, f64)>,
}

/// One training example as seen by a loss builder.
pub struct BatchItem<'a> {
    pub z_0: &'a Array3<f64>,
    pub label: usize,
    pub y: Option<&'a Array2<f64>>,
    pub t: usize,
    pub eps: Array3<f64>,
}

pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = step as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &[Arc<Array2<f64>>]) -> Self {
        Self {
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [Arc<Array2<f64>>], grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let target = Arc::make_mut(p);
            ndarray::Zip::from(target)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|pv, &gv, mv, vv| {
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Abort once the loss has exceeded 10x its initial value for 500
/// consecutive steps.
pub struct DivergenceGuard {
    initial: Option<f64>,
    consecutive: usize,
}

impl DivergenceGuard {
    pub fn new() -> Self {
        Self {
            initial: None,
            consecutive: 0,
        }
    }

    pub fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if loss > 10.0 * initial {
            self.consecutive += 1;
            if self.consecutive >= 500 {
                return Err(Error::Diverged { step, loss });
            }
        } else {
            self.consecutive = 0;
        }
        Ok(())
    }
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self::new()
    }
}

/// Builds the per-item squared-error loss on the tape: noise the clean input,
/// run the denoiser, compare against the drawn noise in patch space (the
/// patch rearrangement is an isometry, so the sum of squares is unchanged).
pub fn denoising_loss_node(
    tape: &mut Tape,
    vars: &BackboneVars,
    cfg: &BackboneConfig,
    sched: &DiffusionSchedule,
    item: &BatchItem<'_>,
    extras: &ForwardExtras<'_>,
) -> Var {
    let noisy = q_sample(item.z_0, item.t, &item.eps, sched).expect("fixed shapes");
    let patches = tape.constant(patchify(&noisy.z_t, cfg.patch_size));
    let out = forward_tokens(tape, vars, cfg, patches, item.t, item.label, extras);
    let target = tape.constant(patchify(&item.eps, cfg.patch_size));
    let diff = tape.sub(out, target);
    tape.sum_sq(diff)
}

/// Generic training loop. `build_loss` receives the tape, the trainable
/// parameters (pushed in the same order as `params`), and one batch item, and
/// returns the scalar loss node.
pub fn run_training<F, C>(
    mut params: Vec<Arc<Array2<f64>>>,
    opts: &TrainOptions,
    build_loss: F,
    data: &Dataset,
    sched: &DiffusionSchedule,
    with_condition: bool,
    mut on_checkpoint: C,
) -> Result<TrainResult>
where
    F: Fn(&mut Tape, &[Var], &BatchItem<'_>) -> Var + Sync,
    C: FnMut(usize, &[Arc<Array2<f64>>]) -> Result<()>,
{
    assert!(!data.is_empty(), "training data must not be empty");
    let mut rng = rng_from(opts.seed);
    let mut adam = Adam::new(&params);
    let mut guard = DivergenceGuard::new();
    let mut curve = Vec::with_capacity(opts.steps);
    let dim = data.samples[0].image.dim();

    for step in 0..opts.steps {
        let lr = cosine_lr(opts.lr, step, opts.steps);

        // sequential draws keep runs reproducible
        let mut drawn = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let idx = rng.random_range(0..data.len());
            let t = rng.random_range(0..sched.timesteps);
            let eps = standard_normal_grid(&mut rng, dim);
            drawn.push((idx, t, eps));
        }
        let items: Vec<BatchItem<'_>> = drawn
            .into_iter()
            .map(|(idx, t, eps)| {
                let s = &data.samples[idx];
                BatchItem {
                    z_0: &s.image,
                    label: s.label,
                    y: if with_condition { Some(&s.depth) } else { None },
                    t,
                    eps,
                }
            })
            .collect();

        let params_ref = &params;
        let results: Vec<Result<(f64, Vec<Array2<f64>>)>> = items
            .par_iter()
            .map(|item| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = params_ref.iter().map(|p| tape.param(p.clone())).collect();
                let loss_var = build_loss(&mut tape, &vars, item);
                let loss = tape.scalar(loss_var);
                let grads = tape.backward(loss_var);
                let gs = vars
                    .iter()
                    .zip(params_ref.iter())
                    .map(|(v, p)| {
                        grads
                            .get(*v)
                            .cloned()
                            .unwrap_or_else(|| Array2::zeros(p.raw_dim()))
                    })
                    .collect();
                Ok((loss, gs))
            })
            .collect();

        let mut mean_loss = 0.0;
        let mut grad_sum: Option<Vec<Array2<f64>>> = None;
        for (i, r) in results.into_iter().enumerate() {
            let (loss, gs) = r?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: format!("{} step {step}", opts.label),
                    index: i,
                });
            }
            mean_loss += loss;
            match &mut grad_sum {
                None => grad_sum = Some(gs),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(gs) {
                        *a += &g;
                    }
                }
            }
        }
        mean_loss /= opts.batch_size as f64;
        let mut grads = grad_sum.expect("non-empty batch");
        for g in &mut grads {
            *g /= opts.batch_size as f64;
        }

        adam.step(&mut params, &grads, lr);
        curve.push((step, mean_loss));
        guard.check(step, mean_loss)?;

        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            eprintln!(
                "[{}] step {}/{} loss {:.5}",
                opts.label,
                step + 1,
                opts.steps,
                mean_loss
            );
        }
        if opts.checkpoint_interval > 0 && (step + 1) % opts.checkpoint_interval == 0 {
            on_checkpoint(step + 1, &params)?;
        }
    }

    Ok(TrainResult { params, curve })
}

/// Count singular values above `1e-9 * sigma_max`.
pub fn numerical_rank(m: &Array2<f64>) -> usize {
    let (r, c) = m.dim();
    let dm = nalgebra::DMatrix::from_fn(r, c, |i, j| m[[i, j]]);
    let svd = dm.svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > 1e-9 * smax)
        .count()
}

/// Frobenius norm of a matrix.
pub fn fro_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100), 1.0);
        let end = cosine_lr(1.0, 99, 100);
        assert!(end < 0.001);
        let mid = cosine_lr(1.0, 50, 100);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize sum((p - 3)^2)
        let mut params = vec![Arc::new(Array2::from_elem((2, 2), 0.0))];
        let mut adam = Adam::new(&params);
        for _ in 0..2000 {
            let g = (&*params[0] - 3.0) * 2.0;
            adam.step(&mut params, &[g], 0.05);
        }
        for &v in params[0].iter() {
            assert!((v - 3.0).abs() < 1e-3, "got {v}");
        }
    }

    #[test]
    fn divergence_guard_trips_after_500() {
        let mut g = DivergenceGuard::new();
        g.check(0, 1.0).unwrap();
        for step in 1..500 {
            g.check(step, 100.0).unwrap();
        }
        assert!(matches!(
            g.check(500, 100.0),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn divergence_guard_resets_on_recovery() {
        let mut g = DivergenceGuard::new();
        g.check(0, 1.0).unwrap();
        for step in 1..499 {
            g.check(step, 100.0).unwrap();
        }
        g.check(499, 1.0).unwrap();
        for step in 500..999 {
            g.check(step, 100.0).unwrap();
        }
        assert!(g.check(999, 100.0).is_ok());
    }

    #[test]
    fn numerical_rank_of_outer_product() {
        let a = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let b = Array2::from_shape_vec((1, 4), vec![1.0, 0.5, -1.0, 2.0]).unwrap();
        assert_eq!(numerical_rank(&a.dot(&b)), 1);
        assert_eq!(numerical_rank(&Array2::zeros((3, 3))), 0);
        let eye = Array2::from_diag_elem(4, 1.0);
        assert_eq!(numerical_rank(&eye), 4);
    }
}
