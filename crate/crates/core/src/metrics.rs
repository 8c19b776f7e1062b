//! Alignment metrics (si-MSE, NMSE), the conditioned-sampler wrapper for every
//! method, and evaluation over the held-out split.

use crate::adapter::{AdapterSet, TimeScaledAdapter};
use crate::backbone::{denoiser_forward, DenoiserHandle};
use crate::baseline::{forward_with_branch, ActivationBranch};
use crate::config::{Ablation, IMG_CHANNELS, IMG_SIZE};
use crate::data::{extract_depth, Dataset};
use crate::diffusion::{ancestral_sample, clamp01, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::hyper::{generate_adapter_set, HyperNetParams};
use crate::rng::derive_seed;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct DepthPair<'a> {
    pub predicted: &'a Array2<f64>,
    pub reference: &'a Array2<f64>,
    pub eps_floor: f64,
}

pub const DEFAULT_EPS_FLOOR: f64 = 1e-3;

impl<'a> DepthPair<'a> {
    pub fn new(predicted: &'a Array2<f64>, reference: &'a Array2<f64>) -> Result<Self> {
        if predicted.dim() != reference.dim() {
            return Err(Error::ShapeMismatch {
                context: "depth pair".into(),
                expected: format!("{:?}", reference.dim()),
                actual: format!("{:?}", predicted.dim()),
            });
        }
        Ok(Self {
            predicted,
            reference,
            eps_floor: DEFAULT_EPS_FLOOR,
        })
    }
}

/// Scale-invariant MSE: variance of the pointwise log-depth error. Adding a
/// constant to every log error (a global multiplicative depth shift) leaves
/// it unchanged.
pub fn si_mse(p: &DepthPair<'_>) -> f64 {
    let n = p.predicted.len() as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for (a, b) in p.predicted.iter().zip(p.reference.iter()) {
        let e = (a + p.eps_floor).ln() - (b + p.eps_floor).ln();
        sum += e;
        sum_sq += e * e;
    }
    let mean = sum / n;
    sum_sq / n - mean * mean
}

/// Normalized MSE: squared error energy over reference energy.
pub fn nmse(p: &DepthPair<'_>) -> Result<f64> {
    let ref_energy: f64 = p.reference.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::Config("nmse needs a non-zero reference".into()));
    }
    let err: f64 = p
        .predicted
        .iter()
        .zip(p.reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(err / ref_energy)
}

/// Conditioning mechanism used when sampling.
pub enum Conditioning<'a> {
    None,
    StaticLora(&'a AdapterSet),
    TimeScaled(&'a TimeScaledAdapter),
    Activation(&'a ActivationBranch),
    TcLora {
        params: &'a HyperNetParams,
        ablation: Ablation,
    },
}

impl Conditioning<'_> {
    pub fn method_name(&self) -> String {
        match self {
            Conditioning::None => "none".into(),
            Conditioning::StaticLora(_) => "static_lora".into(),
            Conditioning::TimeScaled(_) => "time_scaled".into(),
            Conditioning::Activation(_) => "activation".into(),
            Conditioning::TcLora { ablation, .. } => match ablation {
                Ablation::TAndY => "tclora".into(),
                Ablation::TOnly => "tclora_t_only".into(),
                Ablation::YOnly => "tclora_y_only".into(),
            },
        }
    }
}

/// A frozen backbone paired with one conditioning mechanism.
pub struct ConditionedModel<'a> {
    pub handle: &'a DenoiserHandle,
    pub conditioning: Conditioning<'a>,
}

impl Denoiser for ConditionedModel<'_> {
    fn predict(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        label: usize,
        y: Option<&Array2<f64>>,
    ) -> Result<Array3<f64>> {
        match &self.conditioning {
            Conditioning::None => denoiser_forward(self.handle, z_t, t, label, None),
            Conditioning::StaticLora(set) => {
                denoiser_forward(self.handle, z_t, t, label, Some(set))
            }
            Conditioning::TimeScaled(ts) => {
                let set = ts.adapter_set_at(t);
                denoiser_forward(self.handle, z_t, t, label, Some(&set))
            }
            Conditioning::Activation(branch) => {
                let y = y.ok_or_else(|| {
                    Error::Config("activation conditioning requires a depth map".into())
                })?;
                forward_with_branch(self.handle, branch, z_t, t, label, y)
            }
            Conditioning::TcLora { params, ablation } => {
                let descs = self.handle.descriptors();
                let set = generate_adapter_set(params, t, y, &descs, *ablation)?;
                denoiser_forward(self.handle, z_t, t, label, Some(&set))
            }
        }
    }
}

/// Per-sample metric values for one checkpoint / sampling-seed combination.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalSamples {
    pub si: Vec<f64>,
    pub nmse: Vec<f64>,
    pub excluded_nonfinite: usize,
}

/// Sample one image per eval item and score both metrics against the
/// reference depth. Per-item sampling seeds derive from `seed_base`.
pub fn evaluate_samples(
    model: &ConditionedModel<'_>,
    eval_data: &Dataset,
    sched: &DiffusionSchedule,
    n_samples: usize,
    seed_base: u64,
) -> Result<EvalSamples> {
    let n = n_samples.min(eval_data.len());
    let results: Vec<Result<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = &eval_data.samples[i];
            let img = ancestral_sample(
                model,
                s.label,
                Some(&s.depth),
                sched,
                (IMG_CHANNELS, IMG_SIZE, IMG_SIZE),
                derive_seed(seed_base, i as u64),
            )?;
            let img = clamp01(&img);
            let pred = extract_depth(&img);
            let pair = DepthPair::new(&pred, &s.depth)?;
            Ok((si_mse(&pair), nmse(&pair)?))
        })
        .collect();

    let mut out = EvalSamples::default();
    for r in results {
        let (si, nm) = r?;
        if si.is_finite() && nm.is_finite() {
            out.si.push(si);
            out.nmse.push(nm);
        } else {
            out.excluded_nonfinite += 1;
        }
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// One row of the comparison report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub si_mse_mean: f64,
    pub si_mse_std: f64,
    pub nmse_mean: f64,
    pub nmse_std: f64,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub excluded_nonfinite: usize,
    /// Per-seed means, aligned with `seeds`; used for seed-level analysis.
    pub per_seed_si_mse: Vec<f64>,
    pub per_seed_nmse: Vec<f64>,
}

/// Combine per-seed sample sets into one method row.
pub fn aggregate_method(method: &str, parts: &[(u64, EvalSamples)]) -> MethodReport {
    let mut all_si = Vec::new();
    let mut all_nmse = Vec::new();
    let mut excluded = 0;
    let mut per_seed_si = Vec::new();
    let mut per_seed_nmse = Vec::new();
    for (_, es) in parts {
        all_si.extend_from_slice(&es.si);
        all_nmse.extend_from_slice(&es.nmse);
        excluded += es.excluded_nonfinite;
        per_seed_si.push(mean(&es.si));
        per_seed_nmse.push(mean(&es.nmse));
    }
    MethodReport {
        method: method.to_string(),
        si_mse_mean: mean(&all_si),
        si_mse_std: stddev(&all_si),
        nmse_mean: mean(&all_nmse),
        nmse_std: stddev(&all_nmse),
        n_samples: all_si.len(),
        seeds: parts.iter().map(|(s, _)| *s).collect(),
        excluded_nonfinite: excluded,
        per_seed_si_mse: per_seed_si,
        per_seed_nmse: per_seed_nmse,
    }
}

/// Evaluate one method with one checkpoint across several sampling seeds.
pub fn evaluate_method(
    handle: &DenoiserHandle,
    conditioning: Conditioning<'_>,
    eval_data: &Dataset,
    sched: &DiffusionSchedule,
    n_samples: usize,
    seeds: &[u64],
) -> Result<MethodReport> {
    let model = ConditionedModel {
        handle,
        conditioning,
    };
    let mut parts = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let es = evaluate_samples(&model, eval_data, sched, n_samples, derive_seed(seed, 0xe7a1))?;
        parts.push((seed, es));
    }
    Ok(aggregate_method(&model.conditioning.method_name(), &parts))
}

/// Canonical row order for reports: the four methods then the ablations.
pub const METHOD_ORDER: [&str; 7] = [
    "none",
    "static_lora",
    "time_scaled",
    "activation",
    "tclora",
    "tclora_t_only",
    "tclora_y_only",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MethodReport>,
    pub sample_count: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub wall_time_s: f64,
}

impl EvalReport {
    pub fn assemble(
        mut rows: Vec<MethodReport>,
        seeds: Vec<u64>,
        config_hash: String,
        wall_time_s: f64,
    ) -> Result<Self> {
        rows.sort_by_key(|r| {
            METHOD_ORDER
                .iter()
                .position(|m| *m == r.method)
                .unwrap_or(METHOD_ORDER.len())
        });
        let sample_count = rows.first().map(|r| r.n_samples).unwrap_or(0);
        for r in &rows {
            if r.n_samples != sample_count {
                return Err(Error::Config(format!(
                    "method {} has {} samples, expected {}",
                    r.method, r.n_samples, sample_count
                )));
            }
            for v in [r.si_mse_mean, r.si_mse_std, r.nmse_mean, r.nmse_std] {
                if !v.is_finite() {
                    return Err(Error::Config(format!(
                        "non-finite statistic in method {}",
                        r.method
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            sample_count,
            seeds,
            config_hash,
            wall_time_s,
        })
    }

    pub fn row(&self, method: &str) -> Option<&MethodReport> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// CSV with the pinned column header set.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,si_mse_mean,si_mse_std,nmse_mean,nmse_std,n_samples,seeds\n");
        for r in &self.rows {
            let seeds = r
                .seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method, r.si_mse_mean, r.si_mse_std, r.nmse_mean, r.nmse_std, r.n_samples, seeds
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(vals: &[f64], rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_vec((rows, cols), vals.to_vec()).unwrap()
    }

    #[test]
    fn si_mse_zero_for_equal() {
        let a = grid(&[0.1, 0.5, 0.9, 0.3], 2, 2);
        let p = DepthPair::new(&a, &a).unwrap();
        assert_eq!(si_mse(&p), 0.0);
    }

    #[test]
    fn si_mse_zero_for_constant_log_shift() {
        // predicted + eps = 2 (reference + eps) pointwise -> e_i constant
        let reference = grid(&[0.1, 0.5, 0.9, 0.3], 2, 2);
        let eps = DEFAULT_EPS_FLOOR;
        let predicted = reference.mapv(|r| 2.0 * (r + eps) - eps);
        let p = DepthPair::new(&predicted, &reference).unwrap();
        assert!(si_mse(&p).abs() < 1e-10);
    }

    #[test]
    fn si_mse_frozen_oracle_value() {
        let predicted = grid(&[0.1, 0.2, 0.3, 0.4], 2, 2);
        let reference = grid(&[0.4, 0.3, 0.2, 0.1], 2, 2);
        let p = DepthPair::new(&predicted, &reference).unwrap();
        // frozen from a scripted direct evaluation of the formula
        assert!((si_mse(&p) - 1.0321305112).abs() < 5e-11);
    }

    #[test]
    fn si_mse_shape_mismatch() {
        let a = grid(&[0.1, 0.5], 1, 2);
        let b = grid(&[0.1, 0.5, 0.2, 0.2], 2, 2);
        assert!(DepthPair::new(&a, &b).is_err());
    }

    #[test]
    fn nmse_identities() {
        let a = grid(&[0.1, 0.5, 0.9, 0.3], 2, 2);
        let p = DepthPair::new(&a, &a).unwrap();
        assert_eq!(nmse(&p).unwrap(), 0.0);

        let zeros = Array2::zeros((2, 2));
        let p = DepthPair::new(&zeros, &a).unwrap();
        assert!((nmse(&p).unwrap() - 1.0).abs() < 1e-15);

        // all-zero reference rejected
        let p = DepthPair::new(&a, &zeros).unwrap();
        assert!(nmse(&p).is_err());
    }

    #[test]
    fn nmse_scale_invariance() {
        let a = grid(&[0.1, 0.5, 0.9, 0.3], 2, 2);
        let b = grid(&[0.2, 0.4, 0.7, 0.1], 2, 2);
        let p1 = DepthPair::new(&a, &b).unwrap();
        let a2 = a.mapv(|v| v * 2.0);
        let b2 = b.mapv(|v| v * 2.0);
        let p2 = DepthPair::new(&a2, &b2).unwrap();
        assert!((nmse(&p1).unwrap() - nmse(&p2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_nonnegative_random_pairs() {
        let mut rng = crate::rng::rng_from(9);
        for _ in 0..50 {
            let a = crate::rng::normal_array(&mut rng, 4, 4, 1.0).mapv(|v| v.abs().min(1.0));
            let b = crate::rng::normal_array(&mut rng, 4, 4, 1.0).mapv(|v| v.abs().min(1.0).max(1e-6));
            let p = DepthPair::new(&a, &b).unwrap();
            assert!(si_mse(&p) >= 0.0);
            assert!(nmse(&p).unwrap() >= 0.0);
        }
    }

    #[test]
    fn csv_header_and_order() {
        let mk = |name: &str| MethodReport {
            method: name.into(),
            si_mse_mean: 1.0,
            si_mse_std: 0.1,
            nmse_mean: 0.5,
            nmse_std: 0.05,
            n_samples: 4,
            seeds: vec![1, 2],
            excluded_nonfinite: 0,
            per_seed_si_mse: vec![1.0, 1.0],
            per_seed_nmse: vec![0.5, 0.5],
        };
        let report = EvalReport::assemble(
            vec![mk("tclora"), mk("none"), mk("activation"), mk("static_lora"), mk("time_scaled")],
            vec![1, 2],
            "hash".into(),
            0.0,
        )
        .unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "method,si_mse_mean,si_mse_std,nmse_mean,nmse_std,n_samples,seeds"
        );
        assert!(lines[1].starts_with("none,"));
        assert!(lines[2].starts_with("static_lora,"));
        assert!(lines[3].starts_with("time_scaled,"));
        assert!(lines[4].starts_with("activation,"));
        assert!(lines[5].starts_with("tclora,"));
    }

    #[test]
    fn assemble_rejects_uneven_counts() {
        let mk = |name: &str, n: usize| MethodReport {
            method: name.into(),
            si_mse_mean: 1.0,
            si_mse_std: 0.1,
            nmse_mean: 0.5,
            nmse_std: 0.05,
            n_samples: n,
            seeds: vec![1],
            excluded_nonfinite: 0,
            per_seed_si_mse: vec![1.0],
            per_seed_nmse: vec![0.5],
        };
        assert!(EvalReport::assemble(
            vec![mk("none", 4), mk("tclora", 3)],
            vec![1],
            "h".into(),
            0.0
        )
        .is_err());
    }
}
