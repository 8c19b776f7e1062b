//! LoRA mechanics: factor containers, effective-weight computation, archive
//! serialization, and the static / time-scaled baseline adapters trained
//! directly against the frozen backbone.

use crate::archive::TensorArchive;
use crate::backbone::{DenoiserHandle, LayerDescriptor};
use crate::config::hex_string;
use crate::data::Dataset;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::rng::{normal_array, rng_from};
use crate::tensor::{Tape, Var};
use crate::train::{self, TrainOptions, TrainResult};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::sync::Arc;

/// One (B, A) pair for a single layer at a single context.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub layer_index: usize,
    /// d×r
    pub b: Array2<f64>,
    /// r×k
    pub a: Array2<f64>,
    pub rank: usize,
    pub scale: f64,
}

impl LoraFactors {
    pub fn check_against(&self, desc: &LayerDescriptor) -> Result<()> {
        let (bd, br) = self.b.dim();
        let (ar, ak) = self.a.dim();
        if br != self.rank || ar != self.rank {
            return Err(Error::AdapterShape {
                layer: self.layer_index,
                detail: format!(
                    "rank field {} disagrees with B {}×{} / A {}×{}",
                    self.rank, bd, br, ar, ak
                ),
            });
        }
        if self.rank > desc.d.min(desc.k) {
            return Err(Error::AdapterShape {
                layer: self.layer_index,
                detail: format!("rank {} exceeds min(d,k)={}", self.rank, desc.d.min(desc.k)),
            });
        }
        if bd != desc.d || ak != desc.k {
            return Err(Error::AdapterShape {
                layer: self.layer_index,
                detail: format!(
                    "expected B {}×{} and A {}×{}, got B {}×{} / A {}×{}",
                    desc.d, self.rank, self.rank, desc.k, bd, br, ar, ak
                ),
            });
        }
        Ok(())
    }

    /// The dense update `scale · B · A`.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale
    }
}

/// Effective weight per the low-rank update: `W0 + scale·(B·A)`.
pub fn effective_weight(w0: &Array2<f64>, f: &LoraFactors) -> Result<Array2<f64>> {
    let (d, k) = w0.dim();
    if f.b.nrows() != d || f.a.ncols() != k || f.b.ncols() != f.a.nrows() {
        return Err(Error::AdapterShape {
            layer: f.layer_index,
            detail: format!(
                "W0 {}×{} vs B {}×{} · A {}×{}",
                d,
                k,
                f.b.nrows(),
                f.b.ncols(),
                f.a.nrows(),
                f.a.ncols()
            ),
        });
    }
    Ok(w0 + &f.delta())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Static,
    TimeScaled,
    HyperDynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextStamp {
    pub t: usize,
    pub cond_hash: Option<String>,
}

/// Multiplier applied to a LoRA update inside a forward pass.
pub enum AdapterScale {
    Const(f64),
    Node(Var),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub factors: BTreeMap<usize, LoraFactors>,
    pub provenance: Provenance,
    pub context_stamp: Option<ContextStamp>,
}

pub fn depth_hash(y: &Array2<f64>) -> String {
    let mut hasher = Sha256::new();
    for v in y.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex_string(&hasher.finalize())
}

impl AdapterSet {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            factors: BTreeMap::new(),
            provenance,
            context_stamp: None,
        }
    }

    pub fn insert(&mut self, f: LoraFactors) {
        self.factors.insert(f.layer_index, f);
    }

    /// Push every factor pair onto a tape as constants.
    pub fn to_vars(&self, tape: &mut Tape) -> crate::backbone::AdapterVars {
        let mut map = BTreeMap::new();
        for (&idx, f) in &self.factors {
            let b = tape.constant(f.b.clone());
            let a = tape.constant(f.a.clone());
            map.insert(idx, (b, a, AdapterScale::Const(f.scale)));
        }
        crate::backbone::AdapterVars { map }
    }

    pub fn to_archive(&self, mut meta: serde_json::Map<String, serde_json::Value>) -> TensorArchive {
        meta.insert(
            "provenance".into(),
            serde_json::to_value(self.provenance).expect("serializes"),
        );
        if let Some(stamp) = &self.context_stamp {
            meta.insert(
                "context_stamp".into(),
                serde_json::to_value(stamp).expect("serializes"),
            );
        }
        let scales: BTreeMap<String, f64> = self
            .factors
            .iter()
            .map(|(i, f)| (i.to_string(), f.scale))
            .collect();
        meta.insert("scales".into(), serde_json::to_value(scales).expect("serializes"));
        let mut arc = TensorArchive::new(serde_json::Value::Object(meta));
        for (&idx, f) in &self.factors {
            arc.insert_array2(format!("adapter/{idx}/B"), &f.b);
            arc.insert_array2(format!("adapter/{idx}/A"), &f.a);
        }
        arc
    }

    pub fn from_archive(arc: &TensorArchive) -> Result<Self> {
        let provenance: Provenance = serde_json::from_value(
            arc.meta
                .get("provenance")
                .cloned()
                .unwrap_or(serde_json::Value::Null),
        )
        .map_err(|e| Error::ArchiveHeader(format!("provenance: {e}")))?;
        let context_stamp = arc
            .meta
            .get("context_stamp")
            .filter(|v| !v.is_null())
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()
            .map_err(|e| Error::ArchiveHeader(format!("context_stamp: {e}")))?;
        let scales: BTreeMap<String, f64> = serde_json::from_value(
            arc.meta
                .get("scales")
                .cloned()
                .unwrap_or(serde_json::Value::Null),
        )
        .map_err(|e| Error::ArchiveHeader(format!("scales: {e}")))?;

        let mut set = Self {
            factors: BTreeMap::new(),
            provenance,
            context_stamp,
        };
        for (key, scale) in scales {
            let idx: usize = key
                .parse()
                .map_err(|_| Error::ArchiveHeader(format!("bad layer index {key}")))?;
            let b = arc.get_array2(&format!("adapter/{idx}/B"))?;
            let a = arc.get_array2(&format!("adapter/{idx}/A"))?;
            let rank = b.ncols();
            set.insert(LoraFactors {
                layer_index: idx,
                b,
                a,
                rank,
                scale,
            });
        }
        Ok(set)
    }

    /// Canonical bytes; used for the input-agnosticism byte-identity check.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.to_archive(serde_json::Map::new()).to_bytes()
    }
}

/// Baseline adapter with a learnable per-timestep magnitude: the factor pairs
/// are constant in t and y, only `sigmoid(lambda_table[t])` rescales them.
#[derive(Debug, Clone)]
pub struct TimeScaledAdapter {
    /// Base factors; `scale` holds the alpha/r base multiplier.
    pub factors: BTreeMap<usize, LoraFactors>,
    /// Raw (pre-sigmoid) per-timestep scalars.
    pub lambda_table: Vec<f64>,
}

impl TimeScaledAdapter {
    pub fn adapter_set_at(&self, t: usize) -> AdapterSet {
        let gate = sigmoid(self.lambda_table[t]);
        let mut set = AdapterSet::new(Provenance::TimeScaled);
        for f in self.factors.values() {
            let mut f = f.clone();
            f.scale *= gate;
            set.insert(f);
        }
        set.context_stamp = Some(ContextStamp {
            t,
            cond_hash: None,
        });
        set
    }

    pub fn to_archive(&self, mut meta: serde_json::Map<String, serde_json::Value>) -> TensorArchive {
        meta.insert("provenance".into(), serde_json::json!("time_scaled"));
        let scales: BTreeMap<String, f64> = self
            .factors
            .iter()
            .map(|(i, f)| (i.to_string(), f.scale))
            .collect();
        meta.insert("scales".into(), serde_json::to_value(scales).expect("serializes"));
        let mut arc = TensorArchive::new(serde_json::Value::Object(meta));
        for (&idx, f) in &self.factors {
            arc.insert_array2(format!("adapter/{idx}/B"), &f.b);
            arc.insert_array2(format!("adapter/{idx}/A"), &f.a);
        }
        let t = self.lambda_table.len();
        arc.insert(
            "adapter/lambda_table",
            vec![t],
            self.lambda_table.iter().map(|&v| v as f32).collect(),
        );
        arc
    }

    pub fn from_archive(arc: &TensorArchive) -> Result<Self> {
        let scales: BTreeMap<String, f64> = serde_json::from_value(
            arc.meta
                .get("scales")
                .cloned()
                .unwrap_or(serde_json::Value::Null),
        )
        .map_err(|e| Error::ArchiveHeader(format!("scales: {e}")))?;
        let mut factors = BTreeMap::new();
        for (key, scale) in scales {
            let idx: usize = key
                .parse()
                .map_err(|_| Error::ArchiveHeader(format!("bad layer index {key}")))?;
            let b = arc.get_array2(&format!("adapter/{idx}/B"))?;
            let a = arc.get_array2(&format!("adapter/{idx}/A"))?;
            let rank = b.ncols();
            factors.insert(
                idx,
                LoraFactors {
                    layer_index: idx,
                    b,
                    a,
                    rank,
                    scale,
                },
            );
        }
        let (_, lam) = arc.get("adapter/lambda_table")?;
        Ok(Self {
            factors,
            lambda_table: lam.iter().map(|&v| v as f64).collect(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zero-B / Gaussian-A starting factors for directly trained adapters.
pub fn init_factor_params(
    descs: &[LayerDescriptor],
    rank: usize,
    scale: f64,
    seed: u64,
) -> BTreeMap<usize, LoraFactors> {
    let mut rng = rng_from(seed);
    let mut out = BTreeMap::new();
    for desc in descs {
        let a_std = 1.0 / (desc.k as f64).sqrt();
        out.insert(
            desc.layer_index,
            LoraFactors {
                layer_index: desc.layer_index,
                b: Array2::zeros((desc.d, rank)),
                a: normal_array(&mut rng, rank, desc.k, a_std),
                rank,
                scale,
            },
        );
    }
    out
}

pub struct StaticLoraOutcome {
    pub set: AdapterSet,
    pub curve: Vec<(usize, f64)>,
}

/// Train one fixed (B, A) per layer with the denoising objective. This
/// baseline has no conditioning pathway: it never sees y.
pub fn train_static_lora(
    h: &DenoiserHandle,
    data: &Dataset,
    sched: &DiffusionSchedule,
    rank: usize,
    scale: f64,
    opts: &TrainOptions,
    mut on_checkpoint: impl FnMut(usize, &AdapterSet) -> Result<()>,
) -> Result<StaticLoraOutcome> {
    if !h.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let descs = h.descriptors();
    let factors = init_factor_params(&descs, rank, scale, rng_seed_for(opts.seed, 1));

    // flat param order: layer0 B, layer0 A, layer1 B, ...
    let mut params: Vec<Arc<Array2<f64>>> = Vec::new();
    let order: Vec<usize> = factors.keys().cloned().collect();
    for idx in &order {
        let f = &factors[idx];
        params.push(Arc::new(f.b.clone()));
        params.push(Arc::new(f.a.clone()));
    }

    let theta_before = h.checksum();
    let build_set = |params: &[Arc<Array2<f64>>]| {
        let mut set = AdapterSet::new(Provenance::Static);
        for (pos, idx) in order.iter().enumerate() {
            set.insert(LoraFactors {
                layer_index: *idx,
                b: (*params[2 * pos]).clone(),
                a: (*params[2 * pos + 1]).clone(),
                rank,
                scale,
            });
        }
        set
    };

    let result: TrainResult = train::run_training(
        params,
        opts,
        |tape, param_vars, item| {
            let vars = crate::backbone::BackboneVars::new(tape, &h.params, false);
            let mut map = BTreeMap::new();
            for (pos, idx) in order.iter().enumerate() {
                map.insert(
                    *idx,
                    (
                        param_vars[2 * pos],
                        param_vars[2 * pos + 1],
                        AdapterScale::Const(scale),
                    ),
                );
            }
            let adapters = crate::backbone::AdapterVars { map };
            let extras = crate::backbone::ForwardExtras {
                adapters: Some(&adapters),
                branch: None,
            };
            train::denoising_loss_node(tape, &vars, &h.cfg, sched, item, &extras)
        },
        data,
        sched,
        false,
        |step, params| on_checkpoint(step, &build_set(params)),
    )?;

    if h.checksum() != theta_before {
        return Err(Error::ChecksumViolation {
            stage: "train_static_lora".into(),
        });
    }

    Ok(StaticLoraOutcome {
        set: build_set(&result.params),
        curve: result.curve,
    })
}

pub struct TimeScaledOutcome {
    pub adapter: TimeScaledAdapter,
    pub curve: Vec<(usize, f64)>,
}

/// Train base factors jointly with a per-timestep magnitude table. Still no
/// y pathway.
pub fn train_time_scaled_lora(
    h: &DenoiserHandle,
    data: &Dataset,
    sched: &DiffusionSchedule,
    rank: usize,
    scale: f64,
    opts: &TrainOptions,
    mut on_checkpoint: impl FnMut(usize, &TimeScaledAdapter) -> Result<()>,
) -> Result<TimeScaledOutcome> {
    if !h.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let descs = h.descriptors();
    let factors = init_factor_params(&descs, rank, scale, rng_seed_for(opts.seed, 2));
    let order: Vec<usize> = factors.keys().cloned().collect();

    let mut params: Vec<Arc<Array2<f64>>> = Vec::new();
    for idx in &order {
        let f = &factors[idx];
        params.push(Arc::new(f.b.clone()));
        params.push(Arc::new(f.a.clone()));
    }
    // lambda table last, stored T×1, initialized at 0 -> gate 0.5
    params.push(Arc::new(Array2::zeros((sched.timesteps, 1))));

    let theta_before = h.checksum();
    let build = |params: &[Arc<Array2<f64>>]| {
        let mut fs = BTreeMap::new();
        for (pos, idx) in order.iter().enumerate() {
            fs.insert(
                *idx,
                LoraFactors {
                    layer_index: *idx,
                    b: (*params[2 * pos]).clone(),
                    a: (*params[2 * pos + 1]).clone(),
                    rank,
                    scale,
                },
            );
        }
        TimeScaledAdapter {
            factors: fs,
            lambda_table: params.last().unwrap().column(0).to_vec(),
        }
    };

    let n_factor_params = order.len() * 2;
    let result = train::run_training(
        params,
        opts,
        |tape, param_vars, item| {
            let vars = crate::backbone::BackboneVars::new(tape, &h.params, false);
            let lam = tape.row(param_vars[n_factor_params], item.t);
            let gate = tape.sigmoid(lam);
            let gate = tape.scale(gate, scale);
            let mut map = BTreeMap::new();
            for (pos, idx) in order.iter().enumerate() {
                map.insert(
                    *idx,
                    (
                        param_vars[2 * pos],
                        param_vars[2 * pos + 1],
                        AdapterScale::Node(gate),
                    ),
                );
            }
            let adapters = crate::backbone::AdapterVars { map };
            let extras = crate::backbone::ForwardExtras {
                adapters: Some(&adapters),
                branch: None,
            };
            train::denoising_loss_node(tape, &vars, &h.cfg, sched, item, &extras)
        },
        data,
        sched,
        false,
        |step, params| on_checkpoint(step, &build(params)),
    )?;

    if h.checksum() != theta_before {
        return Err(Error::ChecksumViolation {
            stage: "train_time_scaled_lora".into(),
        });
    }

    Ok(TimeScaledOutcome {
        adapter: build(&result.params),
        curve: result.curve,
    })
}

fn rng_seed_for(seed: u64, label: u64) -> u64 {
    crate::rng::derive_seed(seed, 0x4000 + label)
}
