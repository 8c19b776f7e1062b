//! DDPM machinery: linear-beta schedule, forward noising, the epsilon
//! prediction loss, and the reverse ancestral sampler.

use crate::error::{Error, Result};
use crate::rng::rng_from;
use ndarray::{Array2, Array3};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub timesteps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NoisyState {
    pub z_t: Array3<f64>,
    pub t: usize,
    pub eps: Array3<f64>,
}

/// Anything that predicts epsilon from `(z_t, t, c, y)`. The backbone ignores
/// `y`; conditioning wrappers consume it.
pub trait Denoiser {
    fn predict(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        label: usize,
        y: Option<&Array2<f64>>,
    ) -> Result<Array3<f64>>;
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if timesteps < 2 {
        return Err(Error::Config("schedule needs at least 2 timesteps".into()));
    }
    if !beta_start.is_finite() || !beta_end.is_finite() {
        return Err(Error::Config("schedule betas must be finite".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config("require 0 < beta_start <= beta_end < 1".into()));
    }
    let step = (beta_end - beta_start) / (timesteps - 1) as f64;
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| beta_start + step * i as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule {
        timesteps,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Forward noising: `z_t = sqrt(abar_t) z_0 + sqrt(1-abar_t) eps`. The caller
/// supplies `eps` so draws stay reproducible.
pub fn q_sample(
    z_0: &Array3<f64>,
    t: usize,
    eps: &Array3<f64>,
    sched: &DiffusionSchedule,
) -> Result<NoisyState> {
    if z_0.dim() != eps.dim() {
        return Err(Error::ShapeMismatch {
            context: "q_sample".into(),
            expected: format!("{:?}", z_0.dim()),
            actual: format!("{:?}", eps.dim()),
        });
    }
    assert!(t < sched.timesteps, "t out of schedule range");
    let ab = sched.alpha_bars[t];
    let z_t = z_0 * ab.sqrt() + eps * (1.0 - ab).sqrt();
    Ok(NoisyState {
        z_t,
        t,
        eps: eps.clone(),
    })
}

/// One batch item for the denoising loss.
pub struct LossItem<'a> {
    pub z_0: &'a Array3<f64>,
    pub label: usize,
    pub y: Option<&'a Array2<f64>>,
    pub t: usize,
    pub eps: Array3<f64>,
}

/// Mean over the batch of the squared L2 norm between the drawn noise and the
/// model prediction on the noised input. This is the forward-only evaluation;
/// training builds the same quantity on the autodiff tape.
pub fn denoising_loss(
    model: &dyn Denoiser,
    batch: &[LossItem<'_>],
    sched: &DiffusionSchedule,
) -> Result<f64> {
    assert!(!batch.is_empty());
    let mut total = 0.0;
    for (i, item) in batch.iter().enumerate() {
        let state = q_sample(item.z_0, item.t, &item.eps, sched)?;
        let pred = model.predict(&state.z_t, item.t, item.label, item.y)?;
        let l: f64 = item
            .eps
            .iter()
            .zip(pred.iter())
            .map(|(e, p)| (e - p) * (e - p))
            .sum();
        if !l.is_finite() {
            return Err(Error::NonFinite {
                stage: "denoising_loss".into(),
                index: i,
            });
        }
        total += l;
    }
    Ok(total / batch.len() as f64)
}

pub fn standard_normal_grid(
    rng: &mut rand_chacha::ChaCha12Rng,
    dim: (usize, usize, usize),
) -> Array3<f64> {
    Array3::from_shape_fn(dim, |_| StandardNormal.sample(rng))
}

/// DDPM ancestral sampling from `t = T-1` down to 0. Posterior mean uses the
/// epsilon prediction, variance is `beta_t`, no noise is added at t = 0. The
/// final state is clamped to [-0.1, 1.1]; metric consumers clamp to [0, 1].
pub fn ancestral_sample(
    model: &dyn Denoiser,
    label: usize,
    y: Option<&Array2<f64>>,
    sched: &DiffusionSchedule,
    dim: (usize, usize, usize),
    rng_seed: u64,
) -> Result<Array3<f64>> {
    let mut rng = rng_from(rng_seed);
    let mut z = standard_normal_grid(&mut rng, dim);
    for t in (0..sched.timesteps).rev() {
        let eps_pred = model.predict(&z, t, label, y)?;
        let beta = sched.betas[t];
        let coef = beta / (1.0 - sched.alpha_bars[t]).sqrt();
        let mut mean = (&z - &(&eps_pred * coef)) / sched.alphas[t].sqrt();
        if t > 0 {
            let noise = standard_normal_grid(&mut rng, dim);
            mean = mean + noise * beta.sqrt();
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { step: t });
        }
        z = mean;
    }
    Ok(z.mapv(|v| v.clamp(-0.1, 1.1)))
}

/// Clamp a sampled grid into [0,1] for metric use.
pub fn clamp01(grid: &Array3<f64>) -> Array3<f64> {
    grid.mapv(|v| v.clamp(0.0, 1.0))
}
