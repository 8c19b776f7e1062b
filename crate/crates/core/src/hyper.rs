//! The shared hypernetwork: encodes (timestep, spatial condition, layer
//! identity) into a context vector and emits per-layer LoRA factor pairs.
//! One trunk is shared across all target layers; the 24 layer contexts run
//! through it as rows of a single batch. The head that emits B is
//! zero-initialized so an untrained hypernetwork is an exact no-op.

use crate::adapter::{depth_hash, AdapterScale, AdapterSet, LoraFactors, Provenance};
use crate::archive::TensorArchive;
use crate::backbone::{
    sinusoidal_time_embed, AttnKind, DenoiserHandle, LayerDescriptor, ProjKind, TIME_EMBED_DIM,
};
use crate::config::Ablation;
use crate::data::Dataset;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::rng::{rng_from, xavier_array};
use crate::tensor::{Tape, Var};
use crate::train::{self, TrainOptions};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

pub const LAYER_EMBED_DIM: usize = 128;
pub const COND_POOL_SIDE: usize = 8;
pub const COND_POOL_DIM: usize = COND_POOL_SIDE * COND_POOL_SIDE;
const COND_HIDDEN: usize = 256;
const LAYER_ID_INPUT_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    pub cond_dim: usize,
    pub hidden: usize,
    pub res_blocks: usize,
    pub rank: usize,
    /// Output dims of every target layer (uniform across the backbone).
    pub d: usize,
    pub k: usize,
    pub n_layers: usize,
    pub scale: f64,
}

impl HyperNetConfig {
    pub fn fused_dim(&self) -> usize {
        TIME_EMBED_DIM + self.cond_dim + LAYER_EMBED_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.res_blocks < 2 {
            return Err(Error::Config(
                "hypernetwork needs at least 2 residual blocks (skips tap blocks 1 and 2)".into(),
            ));
        }
        if self.rank == 0 || self.rank > self.d.min(self.k) {
            return Err(Error::Config("invalid adapter rank".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HyperNetParams {
    pub cfg: HyperNetConfig,
    // condition encoder: 64 -> 256 -> 256 -> cond_dim
    pub cond_w1: Arc<Array2<f64>>,
    pub cond_b1: Arc<Array2<f64>>,
    pub cond_w2: Arc<Array2<f64>>,
    pub cond_b2: Arc<Array2<f64>>,
    pub cond_w3: Arc<Array2<f64>>,
    pub cond_b3: Arc<Array2<f64>>,
    // layer-ID encoder: 6 -> 128, then two residual blocks
    pub lid_in_w: Arc<Array2<f64>>,
    pub lid_in_b: Arc<Array2<f64>>,
    pub lid_r1_w: Arc<Array2<f64>>,
    pub lid_r1_b: Arc<Array2<f64>>,
    pub lid_r2_w: Arc<Array2<f64>>,
    pub lid_r2_b: Arc<Array2<f64>>,
    // trunk
    pub trunk_in_w: Arc<Array2<f64>>,
    pub trunk_in_b: Arc<Array2<f64>>,
    pub res: Vec<(Arc<Array2<f64>>, Arc<Array2<f64>>)>,
    pub skip1_w: Arc<Array2<f64>>,
    pub skip1_b: Arc<Array2<f64>>,
    pub skip2_w: Arc<Array2<f64>>,
    pub skip2_b: Arc<Array2<f64>>,
    // output heads
    pub head_a_w: Arc<Array2<f64>>,
    pub head_a_b: Arc<Array2<f64>>,
    pub head_b_w: Arc<Array2<f64>>,
    pub head_b_b: Arc<Array2<f64>>,
}

impl HyperNetParams {
    pub fn init(cfg: HyperNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(seed);
        let zeros = |r: usize, c: usize| Arc::new(Array2::zeros((r, c)));
        let h = cfg.hidden;
        let fused = cfg.fused_dim();
        let res = (0..cfg.res_blocks)
            .map(|_| {
                (
                    Arc::new(xavier_array(&mut rng, h, h)),
                    zeros(1, h),
                )
            })
            .collect();
        Ok(Self {
            cond_w1: Arc::new(xavier_array(&mut rng, COND_HIDDEN, COND_POOL_DIM)),
            cond_b1: zeros(1, COND_HIDDEN),
            cond_w2: Arc::new(xavier_array(&mut rng, COND_HIDDEN, COND_HIDDEN)),
            cond_b2: zeros(1, COND_HIDDEN),
            cond_w3: Arc::new(xavier_array(&mut rng, cfg.cond_dim, COND_HIDDEN)),
            cond_b3: zeros(1, cfg.cond_dim),
            lid_in_w: Arc::new(xavier_array(&mut rng, LAYER_EMBED_DIM, LAYER_ID_INPUT_DIM)),
            lid_in_b: zeros(1, LAYER_EMBED_DIM),
            lid_r1_w: Arc::new(xavier_array(&mut rng, LAYER_EMBED_DIM, LAYER_EMBED_DIM)),
            lid_r1_b: zeros(1, LAYER_EMBED_DIM),
            lid_r2_w: Arc::new(xavier_array(&mut rng, LAYER_EMBED_DIM, LAYER_EMBED_DIM)),
            lid_r2_b: zeros(1, LAYER_EMBED_DIM),
            trunk_in_w: Arc::new(xavier_array(&mut rng, h, fused)),
            trunk_in_b: zeros(1, h),
            res,
            skip1_w: Arc::new(xavier_array(&mut rng, h, h)),
            skip1_b: zeros(1, h),
            skip2_w: Arc::new(xavier_array(&mut rng, h, h)),
            skip2_b: zeros(1, h),
            head_a_w: Arc::new(xavier_array(&mut rng, cfg.rank * cfg.k, h)),
            head_a_b: zeros(1, cfg.rank * cfg.k),
            // zero-initialized: emitted B is exactly 0 before training
            head_b_w: zeros(cfg.d * cfg.rank, h),
            head_b_b: zeros(1, cfg.d * cfg.rank),
        })
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Arc<Array2<f64>>)) {
        f("hypernet/cond/w1".into(), &self.cond_w1);
        f("hypernet/cond/b1".into(), &self.cond_b1);
        f("hypernet/cond/w2".into(), &self.cond_w2);
        f("hypernet/cond/b2".into(), &self.cond_b2);
        f("hypernet/cond/w3".into(), &self.cond_w3);
        f("hypernet/cond/b3".into(), &self.cond_b3);
        f("hypernet/layer_id/in_w".into(), &self.lid_in_w);
        f("hypernet/layer_id/in_b".into(), &self.lid_in_b);
        f("hypernet/layer_id/r1_w".into(), &self.lid_r1_w);
        f("hypernet/layer_id/r1_b".into(), &self.lid_r1_b);
        f("hypernet/layer_id/r2_w".into(), &self.lid_r2_w);
        f("hypernet/layer_id/r2_b".into(), &self.lid_r2_b);
        f("hypernet/trunk/in_w".into(), &self.trunk_in_w);
        f("hypernet/trunk/in_b".into(), &self.trunk_in_b);
        for (i, (w, b)) in self.res.iter().enumerate() {
            f(format!("hypernet/trunk/res{i}/w"), w);
            f(format!("hypernet/trunk/res{i}/b"), b);
        }
        f("hypernet/trunk/skip1_w".into(), &self.skip1_w);
        f("hypernet/trunk/skip1_b".into(), &self.skip1_b);
        f("hypernet/trunk/skip2_w".into(), &self.skip2_w);
        f("hypernet/trunk/skip2_b".into(), &self.skip2_b);
        f("hypernet/head_a/w".into(), &self.head_a_w);
        f("hypernet/head_a/b".into(), &self.head_a_b);
        f("hypernet/head_b/w".into(), &self.head_b_w);
        f("hypernet/head_b/b".into(), &self.head_b_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Arc<Array2<f64>>)) {
        f("hypernet/cond/w1".into(), &mut self.cond_w1);
        f("hypernet/cond/b1".into(), &mut self.cond_b1);
        f("hypernet/cond/w2".into(), &mut self.cond_w2);
        f("hypernet/cond/b2".into(), &mut self.cond_b2);
        f("hypernet/cond/w3".into(), &mut self.cond_w3);
        f("hypernet/cond/b3".into(), &mut self.cond_b3);
        f("hypernet/layer_id/in_w".into(), &mut self.lid_in_w);
        f("hypernet/layer_id/in_b".into(), &mut self.lid_in_b);
        f("hypernet/layer_id/r1_w".into(), &mut self.lid_r1_w);
        f("hypernet/layer_id/r1_b".into(), &mut self.lid_r1_b);
        f("hypernet/layer_id/r2_w".into(), &mut self.lid_r2_w);
        f("hypernet/layer_id/r2_b".into(), &mut self.lid_r2_b);
        f("hypernet/trunk/in_w".into(), &mut self.trunk_in_w);
        f("hypernet/trunk/in_b".into(), &mut self.trunk_in_b);
        for (i, (w, b)) in self.res.iter_mut().enumerate() {
            f(format!("hypernet/trunk/res{i}/w"), w);
            f(format!("hypernet/trunk/res{i}/b"), b);
        }
        f("hypernet/trunk/skip1_w".into(), &mut self.skip1_w);
        f("hypernet/trunk/skip1_b".into(), &mut self.skip1_b);
        f("hypernet/trunk/skip2_w".into(), &mut self.skip2_w);
        f("hypernet/trunk/skip2_b".into(), &mut self.skip2_b);
        f("hypernet/head_a/w".into(), &mut self.head_a_w);
        f("hypernet/head_a/b".into(), &mut self.head_a_b);
        f("hypernet/head_b/w".into(), &mut self.head_b_w);
        f("hypernet/head_b/b".into(), &mut self.head_b_b);
    }

    pub fn collect(&self) -> Vec<Arc<Array2<f64>>> {
        let mut out = Vec::new();
        self.visit(&mut |_, arr| out.push(arr.clone()));
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[Arc<Array2<f64>>]) {
        let mut cursor = 0;
        self.visit_mut(&mut |_, arr| {
            *arr = flat[cursor].clone();
            cursor += 1;
        });
        assert_eq!(cursor, flat.len(), "flat param count mismatch");
    }

    pub fn to_archive(&self, mut meta: serde_json::Map<String, serde_json::Value>) -> TensorArchive {
        meta.insert(
            "hyper_config".into(),
            serde_json::to_value(self.cfg).expect("serializes"),
        );
        let mut arc = TensorArchive::new(serde_json::Value::Object(meta));
        self.visit(&mut |name, arr| arc.insert_array2(name, arr));
        arc
    }

    pub fn from_archive(arc: &TensorArchive) -> Result<Self> {
        let cfg: HyperNetConfig = serde_json::from_value(
            arc.meta
                .get("hyper_config")
                .cloned()
                .unwrap_or(serde_json::Value::Null),
        )
        .map_err(|e| Error::ArchiveHeader(format!("hyper_config: {e}")))?;
        let mut p = HyperNetParams::init(cfg, 0)?;
        let mut err = None;
        p.visit_mut(&mut |name, arr| {
            if err.is_some() {
                return;
            }
            match arc.get_array2(&name) {
                Ok(loaded) if loaded.dim() == arr.dim() => *arr = Arc::new(loaded),
                Ok(loaded) => {
                    err = Some(Error::ShapeMismatch {
                        context: name.clone(),
                        expected: format!("{:?}", arr.dim()),
                        actual: format!("{:?}", loaded.dim()),
                    })
                }
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(p),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, arr| n += arr.len());
        n
    }
}

/// Structured identity of one target layer as fed to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerIdentityInput {
    pub normalized_index: f64,
    pub attn_kind_onehot: [f64; 2],
    pub proj_kind_onehot: [f64; 3],
}

impl LayerIdentityInput {
    pub fn from_descriptor(desc: &LayerDescriptor, n_layers: usize) -> Self {
        let attn = match desc.attn_kind {
            AttnKind::SelfAttn => [1.0, 0.0],
            AttnKind::Cross => [0.0, 1.0],
        };
        let proj = match desc.proj_kind {
            ProjKind::Query => [1.0, 0.0, 0.0],
            ProjKind::Key => [0.0, 1.0, 0.0],
            ProjKind::Value => [0.0, 0.0, 1.0],
        };
        Self {
            normalized_index: desc.layer_index as f64 / (n_layers - 1).max(1) as f64,
            attn_kind_onehot: attn,
            proj_kind_onehot: proj,
        }
    }

    pub fn to_row(&self) -> [f64; LAYER_ID_INPUT_DIM] {
        [
            self.normalized_index,
            self.attn_kind_onehot[0],
            self.attn_kind_onehot[1],
            self.proj_kind_onehot[0],
            self.proj_kind_onehot[1],
            self.proj_kind_onehot[2],
        ]
    }
}

/// Average-pool a depth map down to 8×8 and flatten to a 1×64 row.
pub fn pool_depth(y: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = y.dim();
    if h % COND_POOL_SIDE != 0 || w % COND_POOL_SIDE != 0 {
        return Err(Error::ShapeMismatch {
            context: "pool_depth".into(),
            expected: format!("dims divisible by {COND_POOL_SIDE}"),
            actual: format!("{h}×{w}"),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "pool_depth".into(),
            index: 0,
        });
    }
    let by = h / COND_POOL_SIDE;
    let bx = w / COND_POOL_SIDE;
    let mut out = Array2::zeros((1, COND_POOL_DIM));
    for py in 0..COND_POOL_SIDE {
        for px in 0..COND_POOL_SIDE {
            let mut acc = 0.0;
            for iy in 0..by {
                for ix in 0..bx {
                    acc += y[[py * by + iy, px * bx + ix]];
                }
            }
            out[[0, py * COND_POOL_SIDE + px]] = acc / (by * bx) as f64;
        }
    }
    Ok(out)
}

/// Tape handles for the hypernetwork parameters.
pub struct HyperVars {
    pub cond_w1: Var,
    pub cond_b1: Var,
    pub cond_w2: Var,
    pub cond_b2: Var,
    pub cond_w3: Var,
    pub cond_b3: Var,
    pub lid_in_w: Var,
    pub lid_in_b: Var,
    pub lid_r1_w: Var,
    pub lid_r1_b: Var,
    pub lid_r2_w: Var,
    pub lid_r2_b: Var,
    pub trunk_in_w: Var,
    pub trunk_in_b: Var,
    pub res: Vec<(Var, Var)>,
    pub skip1_w: Var,
    pub skip1_b: Var,
    pub skip2_w: Var,
    pub skip2_b: Var,
    pub head_a_w: Var,
    pub head_a_b: Var,
    pub head_b_w: Var,
    pub head_b_b: Var,
}

impl HyperVars {
    pub fn new(tape: &mut Tape, p: &HyperNetParams, trainable: bool) -> Self {
        let flat: Vec<Var> = p
            .collect()
            .into_iter()
            .map(|arr| {
                if trainable {
                    tape.param(arr)
                } else {
                    tape.constant_shared(arr)
                }
            })
            .collect();
        Self::from_flat(&flat, p.cfg.res_blocks)
    }

    pub fn from_flat(flat: &[Var], res_blocks: usize) -> Self {
        let mut c = 0usize;
        let mut next = || {
            let v = flat[c];
            c += 1;
            v
        };
        let out = Self {
            cond_w1: next(),
            cond_b1: next(),
            cond_w2: next(),
            cond_b2: next(),
            cond_w3: next(),
            cond_b3: next(),
            lid_in_w: next(),
            lid_in_b: next(),
            lid_r1_w: next(),
            lid_r1_b: next(),
            lid_r2_w: next(),
            lid_r2_b: next(),
            trunk_in_w: next(),
            trunk_in_b: next(),
            res: (0..res_blocks).map(|_| (next(), next())).collect(),
            skip1_w: next(),
            skip1_b: next(),
            skip2_w: next(),
            skip2_b: next(),
            head_a_w: next(),
            head_a_b: next(),
            head_b_w: next(),
            head_b_b: next(),
        };
        assert_eq!(c, flat.len(), "flat var count mismatch");
        out
    }
}

fn res_block(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let l = tape.linear(x, w, b);
    let g = tape.gelu(l);
    tape.add(x, g)
}

/// 3-layer condition MLP on the tape; input is a pooled 1×64 row node.
pub fn cond_embed_node(tape: &mut Tape, hv: &HyperVars, y_row: Var) -> Var {
    let u = tape.linear(y_row, hv.cond_w1, hv.cond_b1);
    let u = tape.gelu(u);
    let u = tape.linear(u, hv.cond_w2, hv.cond_b2);
    let u = tape.gelu(u);
    tape.linear(u, hv.cond_w3, hv.cond_b3)
}

/// Layer-ID encoder on the tape; input rows are 6-wide identity vectors.
pub fn layer_embed_node(tape: &mut Tape, hv: &HyperVars, ids: Var) -> Var {
    let x = tape.linear(ids, hv.lid_in_w, hv.lid_in_b);
    let x = res_block(tape, x, hv.lid_r1_w, hv.lid_r1_b);
    res_block(tape, x, hv.lid_r2_w, hv.lid_r2_b)
}

/// Per-layer factor nodes for one (t, y) context; a row per descriptor runs
/// through the shared trunk in a single batch. Ablations zero the respective
/// component of the fused context.
pub fn factors_nodes(
    tape: &mut Tape,
    hv: &HyperVars,
    cfg: &HyperNetConfig,
    t: usize,
    y: Option<&Array2<f64>>,
    descs: &[LayerDescriptor],
    ablation: Ablation,
) -> Result<Vec<(Var, Var)>> {
    let n = descs.len();

    let time_row = if ablation == Ablation::YOnly {
        tape.constant(Array2::zeros((1, TIME_EMBED_DIM)))
    } else {
        let te = sinusoidal_time_embed(t, TIME_EMBED_DIM)?;
        tape.constant(te)
    };

    let cond_row = if ablation == Ablation::TOnly {
        tape.constant(Array2::zeros((1, cfg.cond_dim)))
    } else {
        let y = y.ok_or_else(|| Error::Config("hypernetwork requires a condition map".into()))?;
        let pooled = pool_depth(y)?;
        let y_row = tape.constant(pooled);
        cond_embed_node(tape, hv, y_row)
    };

    let mut id_rows = Array2::zeros((n, LAYER_ID_INPUT_DIM));
    for (i, desc) in descs.iter().enumerate() {
        let row = LayerIdentityInput::from_descriptor(desc, n).to_row();
        for (j, v) in row.iter().enumerate() {
            id_rows[[i, j]] = *v;
        }
    }
    let ids = tape.constant(id_rows);
    let layer_rows = layer_embed_node(tape, hv, ids);

    let time_all = tape.broadcast_rows(time_row, n);
    let cond_all = tape.broadcast_rows(cond_row, n);
    let fused = tape.concat_cols(&[time_all, cond_all, layer_rows]);

    let u = tape.linear(fused, hv.trunk_in_w, hv.trunk_in_b);
    let mut x = tape.gelu(u);
    let mut taps = Vec::with_capacity(2);
    for (i, (w, b)) in hv.res.iter().enumerate() {
        x = res_block(tape, x, *w, *b);
        if i < 2 {
            taps.push(x);
        }
    }
    let skip1 = tape.linear(taps[0], hv.skip1_w, hv.skip1_b);
    let skip2 = tape.linear(taps[1], hv.skip2_w, hv.skip2_b);
    let x = tape.add(x, skip1);
    let stage = tape.add(x, skip2);

    let a_all = tape.linear(stage, hv.head_a_w, hv.head_a_b);
    let b_all = tape.linear(stage, hv.head_b_w, hv.head_b_b);

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a_row = tape.row(a_all, i);
        let b_row = tape.row(b_all, i);
        let a = tape.reshape(a_row, cfg.rank, cfg.k);
        let b = tape.reshape(b_row, cfg.d, cfg.rank);
        out.push((b, a));
    }
    Ok(out)
}

/// The fused context for one (t, y, layer); exposed for inspection and tests.
#[derive(Debug, Clone)]
pub struct HyperContext {
    pub time_emb: Array2<f64>,
    pub cond_emb: Array2<f64>,
    pub layer_emb: Array2<f64>,
    pub fused: Array2<f64>,
}

pub fn build_context(
    p: &HyperNetParams,
    t: usize,
    y: &Array2<f64>,
    desc: &LayerDescriptor,
    n_layers: usize,
) -> Result<HyperContext> {
    let mut tape = Tape::new();
    let hv = HyperVars::new(&mut tape, p, false);
    let time_emb = sinusoidal_time_embed(t, TIME_EMBED_DIM)?;
    let pooled = pool_depth(y)?;
    let y_row = tape.constant(pooled);
    let cond = cond_embed_node(&mut tape, &hv, y_row);
    let mut ids = Array2::zeros((1, LAYER_ID_INPUT_DIM));
    for (j, v) in LayerIdentityInput::from_descriptor(desc, n_layers)
        .to_row()
        .iter()
        .enumerate()
    {
        ids[[0, j]] = *v;
    }
    let idv = tape.constant(ids);
    let layer = layer_embed_node(&mut tape, &hv, idv);
    let cond_emb = tape.value(cond).clone();
    let layer_emb = tape.value(layer).clone();
    let fused = ndarray::concatenate(
        ndarray::Axis(1),
        &[time_emb.view(), cond_emb.view(), layer_emb.view()],
    )
    .expect("context dims");
    Ok(HyperContext {
        time_emb,
        cond_emb,
        layer_emb,
        fused,
    })
}

/// Forward-only condition embedding.
pub fn encode_condition(p: &HyperNetParams, y: &Array2<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let hv = HyperVars::new(&mut tape, p, false);
    let pooled = pool_depth(y)?;
    let y_row = tape.constant(pooled);
    let e = cond_embed_node(&mut tape, &hv, y_row);
    Ok(tape.value(e).clone())
}

/// Forward-only layer-ID embedding.
pub fn encode_layer_id(p: &HyperNetParams, input: &LayerIdentityInput) -> Array2<f64> {
    let mut tape = Tape::new();
    let hv = HyperVars::new(&mut tape, p, false);
    let mut ids = Array2::zeros((1, LAYER_ID_INPUT_DIM));
    for (j, v) in input.to_row().iter().enumerate() {
        ids[[0, j]] = *v;
    }
    let idv = tape.constant(ids);
    let e = layer_embed_node(&mut tape, &hv, idv);
    tape.value(e).clone()
}

/// Generate the full adapter set for one (t, y) context.
pub fn generate_adapter_set(
    p: &HyperNetParams,
    t: usize,
    y: Option<&Array2<f64>>,
    descs: &[LayerDescriptor],
    ablation: Ablation,
) -> Result<AdapterSet> {
    let mut tape = Tape::new();
    let hv = HyperVars::new(&mut tape, p, false);
    let nodes = factors_nodes(&mut tape, &hv, &p.cfg, t, y, descs, ablation)?;
    let mut set = AdapterSet::new(Provenance::HyperDynamic);
    for (desc, (b, a)) in descs.iter().zip(nodes) {
        set.insert(LoraFactors {
            layer_index: desc.layer_index,
            b: tape.value(b).clone(),
            a: tape.value(a).clone(),
            rank: p.cfg.rank,
            scale: p.cfg.scale,
        });
    }
    set.context_stamp = Some(crate::adapter::ContextStamp {
        t,
        cond_hash: y.map(depth_hash),
    });
    Ok(set)
}

/// Factors for a single layer; computed through the same batched path the
/// full set uses, so values are bit-identical to `generate_adapter_set`.
pub fn generate_factors(
    p: &HyperNetParams,
    t: usize,
    y: Option<&Array2<f64>>,
    descs: &[LayerDescriptor],
    layer: &LayerDescriptor,
    ablation: Ablation,
) -> Result<LoraFactors> {
    let set = generate_adapter_set(p, t, y, descs, ablation)?;
    set.factors
        .get(&layer.layer_index)
        .cloned()
        .ok_or(Error::UnknownLayer(layer.layer_index))
}

pub struct HyperTrainOutcome {
    pub params: HyperNetParams,
    pub curve: Vec<(usize, f64)>,
}

/// Train the hypernetwork against the frozen backbone. Adapters are
/// regenerated from the current parameters for every drawn (t, y).
pub fn train_hypernetwork(
    h: &DenoiserHandle,
    p: HyperNetParams,
    data: &Dataset,
    sched: &DiffusionSchedule,
    opts: &TrainOptions,
    ablation: Ablation,
    mut on_checkpoint: impl FnMut(usize, &HyperNetParams) -> Result<()>,
) -> Result<HyperTrainOutcome> {
    if !h.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let theta_before = h.checksum();
    let descs = h.descriptors();
    let cfg = p.cfg;
    let flat = p.collect();
    let template = p.clone();

    let rebuild = |flat: &[Arc<Array2<f64>>]| {
        let mut np = template.clone();
        np.assign_from_flat(flat);
        np
    };

    let result = train::run_training(
        flat,
        opts,
        |tape, param_vars, item| {
            let hv = HyperVars::from_flat(param_vars, cfg.res_blocks);
            let nodes = factors_nodes(tape, &hv, &cfg, item.t, item.y, &descs, ablation)
                .expect("validated inputs");
            let mut map = BTreeMap::new();
            for (desc, (b, a)) in descs.iter().zip(nodes) {
                map.insert(desc.layer_index, (b, a, AdapterScale::Const(cfg.scale)));
            }
            let adapters = crate::backbone::AdapterVars { map };
            let vars = crate::backbone::BackboneVars::new(tape, &h.params, false);
            let extras = crate::backbone::ForwardExtras {
                adapters: Some(&adapters),
                branch: None,
            };
            train::denoising_loss_node(tape, &vars, &h.cfg, sched, item, &extras)
        },
        data,
        sched,
        true,
        |step, flat| on_checkpoint(step, &rebuild(flat)),
    )?;

    if h.checksum() != theta_before {
        return Err(Error::ChecksumViolation {
            stage: "train_hypernetwork".into(),
        });
    }

    Ok(HyperTrainOutcome {
        params: rebuild(&result.params),
        curve: result.curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, denoiser_forward, BackboneConfig};
    use crate::config::{IMG_CHANNELS, IMG_SIZE};
    use crate::diffusion::standard_normal_grid;

    fn tiny_backbone_cfg() -> BackboneConfig {
        BackboneConfig {
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            class_count: 4,
            timesteps: 10,
        }
    }

    fn tiny_hyper_cfg() -> HyperNetConfig {
        HyperNetConfig {
            cond_dim: 32,
            hidden: 48,
            res_blocks: 3,
            rank: 2,
            d: 16,
            k: 16,
            n_layers: 12,
            scale: 1.0,
        }
    }

    fn sample_depth(seed: u64) -> Array2<f64> {
        crate::data::render_scene(seed, 4).depth
    }

    #[test]
    fn pool_constant_map_is_constant() {
        let y = Array2::from_elem((IMG_SIZE, IMG_SIZE), 0.37);
        let p = pool_depth(&y).unwrap();
        assert_eq!(p.dim(), (1, 64));
        for &v in p.iter() {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_rejects_non_finite() {
        let mut y = Array2::zeros((IMG_SIZE, IMG_SIZE));
        y[[3, 3]] = f64::NAN;
        assert!(pool_depth(&y).is_err());
    }

    #[test]
    fn condition_embedding_determinism_and_distinctness() {
        let p = HyperNetParams::init(tiny_hyper_cfg(), 11).unwrap();
        let y0 = Array2::zeros((IMG_SIZE, IMG_SIZE));
        let y1 = Array2::from_elem((IMG_SIZE, IMG_SIZE), 1.0);
        let a = encode_condition(&p, &y0).unwrap();
        let b = encode_condition(&p, &y0).unwrap();
        assert_eq!(a, b);
        let c = encode_condition(&p, &y1).unwrap();
        let dist: f64 = a
            .iter()
            .zip(c.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn layer_embeddings_pairwise_distinct() {
        let bcfg = tiny_backbone_cfg();
        let descs = crate::backbone::descriptors(&bcfg);
        let p = HyperNetParams::init(tiny_hyper_cfg(), 12).unwrap();
        let embs: Vec<Array2<f64>> = descs
            .iter()
            .map(|d| encode_layer_id(&p, &LayerIdentityInput::from_descriptor(d, descs.len())))
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let d: f64 = embs[i]
                    .iter()
                    .zip(embs[j].iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 0.0, "layer embeddings collapse: {min_dist}");
        // same descriptor twice -> identical
        let again =
            encode_layer_id(&p, &LayerIdentityInput::from_descriptor(&descs[0], descs.len()));
        assert_eq!(embs[0], again);
    }

    #[test]
    fn zeroed_res_blocks_pass_through_projection() {
        let mut p = HyperNetParams::init(tiny_hyper_cfg(), 13).unwrap();
        p.lid_r1_w = Arc::new(Array2::zeros((LAYER_EMBED_DIM, LAYER_EMBED_DIM)));
        p.lid_r2_w = Arc::new(Array2::zeros((LAYER_EMBED_DIM, LAYER_EMBED_DIM)));
        let input = LayerIdentityInput {
            normalized_index: 0.5,
            attn_kind_onehot: [1.0, 0.0],
            proj_kind_onehot: [0.0, 1.0, 0.0],
        };
        let out = encode_layer_id(&p, &input);
        // expected: just the input projection
        let row = input.to_row();
        let mut expect = Array2::zeros((1, LAYER_EMBED_DIM));
        for i in 0..LAYER_EMBED_DIM {
            let mut acc = p.lid_in_b[[0, i]];
            for (j, v) in row.iter().enumerate() {
                acc += p.lid_in_w[[i, j]] * v;
            }
            expect[[0, i]] = acc;
        }
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn untrained_emits_exactly_zero_b() {
        let bcfg = tiny_backbone_cfg();
        let descs = crate::backbone::descriptors(&bcfg);
        let p = HyperNetParams::init(tiny_hyper_cfg(), 14).unwrap();
        let y = sample_depth(5);
        for t in [0usize, 4, 9] {
            let set = generate_adapter_set(&p, t, Some(&y), &descs, Ablation::TAndY).unwrap();
            assert_eq!(set.factors.len(), descs.len());
            for f in set.factors.values() {
                assert!(f.b.iter().all(|&v| v == 0.0));
                assert!(f.delta().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn fixed_context_is_bit_deterministic() {
        let bcfg = tiny_backbone_cfg();
        let descs = crate::backbone::descriptors(&bcfg);
        let mut p = HyperNetParams::init(tiny_hyper_cfg(), 15).unwrap();
        // jitter head_b so factors are non-trivial
        let mut rng = rng_from(16);
        p.head_b_w = Arc::new(crate::rng::normal_array(
            &mut rng,
            p.cfg.d * p.cfg.rank,
            p.cfg.hidden,
            0.01,
        ));
        let y = sample_depth(6);
        let s1 = generate_adapter_set(&p, 3, Some(&y), &descs, Ablation::TAndY).unwrap();
        let s2 = generate_adapter_set(&p, 3, Some(&y), &descs, Ablation::TAndY).unwrap();
        assert_eq!(s1.canonical_bytes(), s2.canonical_bytes());
        // single-layer route matches the set
        let f = generate_factors(&p, 3, Some(&y), &descs, &descs[7], Ablation::TAndY).unwrap();
        assert_eq!(f, s1.factors[&7]);
    }

    #[test]
    fn input_agnosticism_under_varied_activations() {
        // fixed (t, y): generating adapters while unrelated forward passes
        // with different z_t run in between must give byte-identical sets
        let bcfg = tiny_backbone_cfg();
        let h = build_backbone(&bcfg, 17).unwrap();
        let descs = h.descriptors();
        let mut p = HyperNetParams::init(tiny_hyper_cfg(), 18).unwrap();
        let mut rng = rng_from(19);
        p.head_b_w = Arc::new(crate::rng::normal_array(
            &mut rng,
            p.cfg.d * p.cfg.rank,
            p.cfg.hidden,
            0.01,
        ));
        let y = sample_depth(7);

        let z1 = standard_normal_grid(&mut rng, (IMG_CHANNELS, IMG_SIZE, IMG_SIZE));
        let s1 = generate_adapter_set(&p, 5, Some(&y), &descs, Ablation::TAndY).unwrap();
        let _ = denoiser_forward(&h, &z1, 5, 0, Some(&s1)).unwrap();

        let z2 = standard_normal_grid(&mut rng, (IMG_CHANNELS, IMG_SIZE, IMG_SIZE));
        let s2 = generate_adapter_set(&p, 5, Some(&y), &descs, Ablation::TAndY).unwrap();
        let _ = denoiser_forward(&h, &z2, 5, 0, Some(&s2)).unwrap();

        assert_eq!(s1.canonical_bytes(), s2.canonical_bytes());
    }

    #[test]
    fn context_is_concat_in_order() {
        let bcfg = tiny_backbone_cfg();
        let descs = crate::backbone::descriptors(&bcfg);
        let p = HyperNetParams::init(tiny_hyper_cfg(), 20).unwrap();
        let y = sample_depth(8);
        let ctx = build_context(&p, 2, &y, &descs[3], descs.len()).unwrap();
        assert_eq!(ctx.fused.ncols(), p.cfg.fused_dim());
        let td = TIME_EMBED_DIM;
        let cd = p.cfg.cond_dim;
        for j in 0..td {
            assert_eq!(ctx.fused[[0, j]], ctx.time_emb[[0, j]]);
        }
        for j in 0..cd {
            assert_eq!(ctx.fused[[0, td + j]], ctx.cond_emb[[0, j]]);
        }
        for j in 0..LAYER_EMBED_DIM {
            assert_eq!(ctx.fused[[0, td + cd + j]], ctx.layer_emb[[0, j]]);
        }
        assert!(ctx.fused.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ablation_zeroing() {
        let bcfg = tiny_backbone_cfg();
        let descs = crate::backbone::descriptors(&bcfg);
        let mut p = HyperNetParams::init(tiny_hyper_cfg(), 21).unwrap();
        let mut rng = rng_from(22);
        p.head_b_w = Arc::new(crate::rng::normal_array(
            &mut rng,
            p.cfg.d * p.cfg.rank,
            p.cfg.hidden,
            0.01,
        ));
        let y1 = sample_depth(9);
        let y2 = sample_depth(10);
        // t_only: condition has no influence
        let a = generate_adapter_set(&p, 3, Some(&y1), &descs, Ablation::TOnly).unwrap();
        let b = generate_adapter_set(&p, 3, Some(&y2), &descs, Ablation::TOnly).unwrap();
        let a_nostamp: Vec<u8> = {
            let mut s = a.clone();
            s.context_stamp = None;
            s.canonical_bytes()
        };
        let b_nostamp: Vec<u8> = {
            let mut s = b.clone();
            s.context_stamp = None;
            s.canonical_bytes()
        };
        assert_eq!(a_nostamp, b_nostamp);
        // y_only: time has no influence
        let c = generate_adapter_set(&p, 0, Some(&y1), &descs, Ablation::YOnly).unwrap();
        let d = generate_adapter_set(&p, 9, Some(&y1), &descs, Ablation::YOnly).unwrap();
        assert_eq!(c.canonical_bytes(), d.canonical_bytes());
        // full mode: both matter
        let e = generate_adapter_set(&p, 0, Some(&y1), &descs, Ablation::TAndY).unwrap();
        let f = generate_adapter_set(&p, 9, Some(&y1), &descs, Ablation::TAndY).unwrap();
        assert_ne!(e.factors[&0].a, f.factors[&0].a);
    }
}
