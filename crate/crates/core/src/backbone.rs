//! Toy diffusion-transformer denoiser. Patch-embeds the 2-channel image into
//! tokens, runs pre-LN blocks of self-attention, cross-attention over a single
//! class token, and an MLP, then un-patchifies to an epsilon prediction.
//! The q/k/v projections of both attention kinds are the adapter targets.
//!
//! Tokens carry learned positional embeddings; without them the network is
//! permutation-equivariant and no input-agnostic weight update could express a
//! spatially structured condition.

use crate::adapter::{AdapterScale, AdapterSet};
use crate::archive::TensorArchive;
use crate::config::{hex_string, IMG_CHANNELS, IMG_SIZE};
use crate::error::{Error, Result};
use crate::rng::{normal_array, rng_from, xavier_array};
use crate::tensor::{Tape, Var};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::sync::Arc;

pub const TIME_EMBED_DIM: usize = 64;
pub const LN_EPS: f64 = 1e-5;
/// Adapted projections per transformer block: self q,k,v then cross q,k,v.
pub const PROJS_PER_BLOCK: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub class_count: usize,
    pub timesteps: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.depth == 0 || self.patch_size == 0 {
            return Err(Error::Config("backbone dims must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config("embed_dim must be divisible by heads".into()));
        }
        if IMG_SIZE % self.patch_size != 0 {
            return Err(Error::Config(
                "image size must be divisible by patch_size".into(),
            ));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be >= 2".into()));
        }
        Ok(())
    }

    pub fn tokens_per_side(&self) -> usize {
        IMG_SIZE / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        self.tokens_per_side() * self.tokens_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        IMG_CHANNELS * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    SelfAttn,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjKind {
    Query,
    Key,
    Value,
}

/// Identity and shape of one frozen weight matrix targeted for adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub layer_index: usize,
    pub block_index: usize,
    pub attn_kind: AttnKind,
    pub proj_kind: ProjKind,
    pub d: usize,
    pub k: usize,
}

/// Exhaustive, ordered enumeration: per block, self q,k,v then cross q,k,v.
pub fn descriptors(cfg: &BackboneConfig) -> Vec<LayerDescriptor> {
    let mut out = Vec::with_capacity(cfg.depth * PROJS_PER_BLOCK);
    for block in 0..cfg.depth {
        for (slot, (attn, proj)) in [
            (AttnKind::SelfAttn, ProjKind::Query),
            (AttnKind::SelfAttn, ProjKind::Key),
            (AttnKind::SelfAttn, ProjKind::Value),
            (AttnKind::Cross, ProjKind::Query),
            (AttnKind::Cross, ProjKind::Key),
            (AttnKind::Cross, ProjKind::Value),
        ]
        .into_iter()
        .enumerate()
        {
            out.push(LayerDescriptor {
                layer_index: block * PROJS_PER_BLOCK + slot,
                block_index: block,
                attn_kind: attn,
                proj_kind: proj,
                d: cfg.embed_dim,
                k: cfg.embed_dim,
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: Arc<Array2<f64>>,
    pub ln1_b: Arc<Array2<f64>>,
    pub wq: Arc<Array2<f64>>,
    pub bq: Arc<Array2<f64>>,
    pub wk: Arc<Array2<f64>>,
    pub bk: Arc<Array2<f64>>,
    pub wv: Arc<Array2<f64>>,
    pub bv: Arc<Array2<f64>>,
    pub wo: Arc<Array2<f64>>,
    pub bo: Arc<Array2<f64>>,
    pub ln2_g: Arc<Array2<f64>>,
    pub ln2_b: Arc<Array2<f64>>,
    pub cwq: Arc<Array2<f64>>,
    pub cbq: Arc<Array2<f64>>,
    pub cwk: Arc<Array2<f64>>,
    pub cbk: Arc<Array2<f64>>,
    pub cwv: Arc<Array2<f64>>,
    pub cbv: Arc<Array2<f64>>,
    pub cwo: Arc<Array2<f64>>,
    pub cbo: Arc<Array2<f64>>,
    pub ln3_g: Arc<Array2<f64>>,
    pub ln3_b: Arc<Array2<f64>>,
    pub w1: Arc<Array2<f64>>,
    pub b1: Arc<Array2<f64>>,
    pub w2: Arc<Array2<f64>>,
    pub b2: Arc<Array2<f64>>,
}

impl BlockParams {
    fn init(rng: &mut rand_chacha::ChaCha12Rng, d: usize) -> Self {
        let hidden = 4 * d;
        let ones = || Arc::new(Array2::from_elem((1, d), 1.0));
        let zeros_row = |n: usize| Arc::new(Array2::zeros((1, n)));
        Self {
            ln1_g: ones(),
            ln1_b: zeros_row(d),
            wq: Arc::new(xavier_array(rng, d, d)),
            bq: zeros_row(d),
            wk: Arc::new(xavier_array(rng, d, d)),
            bk: zeros_row(d),
            wv: Arc::new(xavier_array(rng, d, d)),
            bv: zeros_row(d),
            wo: Arc::new(xavier_array(rng, d, d)),
            bo: zeros_row(d),
            ln2_g: ones(),
            ln2_b: zeros_row(d),
            cwq: Arc::new(xavier_array(rng, d, d)),
            cbq: zeros_row(d),
            cwk: Arc::new(xavier_array(rng, d, d)),
            cbk: zeros_row(d),
            cwv: Arc::new(xavier_array(rng, d, d)),
            cbv: zeros_row(d),
            cwo: Arc::new(xavier_array(rng, d, d)),
            cbo: zeros_row(d),
            ln3_g: ones(),
            ln3_b: zeros_row(d),
            w1: Arc::new(xavier_array(rng, hidden, d)),
            b1: zeros_row(hidden),
            w2: Arc::new(xavier_array(rng, d, hidden)),
            b2: zeros_row(d),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Arc<Array2<f64>>)) {
        let fields: [(&str, &Arc<Array2<f64>>); 26] = [
            ("ln1/g", &self.ln1_g),
            ("ln1/b", &self.ln1_b),
            ("self_q/w", &self.wq),
            ("self_q/b", &self.bq),
            ("self_k/w", &self.wk),
            ("self_k/b", &self.bk),
            ("self_v/w", &self.wv),
            ("self_v/b", &self.bv),
            ("self_o/w", &self.wo),
            ("self_o/b", &self.bo),
            ("ln2/g", &self.ln2_g),
            ("ln2/b", &self.ln2_b),
            ("cross_q/w", &self.cwq),
            ("cross_q/b", &self.cbq),
            ("cross_k/w", &self.cwk),
            ("cross_k/b", &self.cbk),
            ("cross_v/w", &self.cwv),
            ("cross_v/b", &self.cbv),
            ("cross_o/w", &self.cwo),
            ("cross_o/b", &self.cbo),
            ("ln3/g", &self.ln3_g),
            ("ln3/b", &self.ln3_b),
            ("mlp1/w", &self.w1),
            ("mlp1/b", &self.b1),
            ("mlp2/w", &self.w2),
            ("mlp2/b", &self.b2),
        ];
        for (name, arr) in fields {
            f(format!("{prefix}/{name}"), arr);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Arc<Array2<f64>>)) {
        let fields: [(&str, &mut Arc<Array2<f64>>); 26] = [
            ("ln1/g", &mut self.ln1_g),
            ("ln1/b", &mut self.ln1_b),
            ("self_q/w", &mut self.wq),
            ("self_q/b", &mut self.bq),
            ("self_k/w", &mut self.wk),
            ("self_k/b", &mut self.bk),
            ("self_v/w", &mut self.wv),
            ("self_v/b", &mut self.bv),
            ("self_o/w", &mut self.wo),
            ("self_o/b", &mut self.bo),
            ("ln2/g", &mut self.ln2_g),
            ("ln2/b", &mut self.ln2_b),
            ("cross_q/w", &mut self.cwq),
            ("cross_q/b", &mut self.cbq),
            ("cross_k/w", &mut self.cwk),
            ("cross_k/b", &mut self.cbk),
            ("cross_v/w", &mut self.cwv),
            ("cross_v/b", &mut self.cbv),
            ("cross_o/w", &mut self.cwo),
            ("cross_o/b", &mut self.cbo),
            ("ln3/g", &mut self.ln3_g),
            ("ln3/b", &mut self.ln3_b),
            ("mlp1/w", &mut self.w1),
            ("mlp1/b", &mut self.b1),
            ("mlp2/w", &mut self.w2),
            ("mlp2/b", &mut self.b2),
        ];
        for (name, arr) in fields {
            f(format!("{prefix}/{name}"), arr);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub patch_w: Arc<Array2<f64>>,
    pub patch_b: Arc<Array2<f64>>,
    pub pos: Arc<Array2<f64>>,
    pub time_w: Arc<Array2<f64>>,
    pub time_b: Arc<Array2<f64>>,
    pub class_emb: Arc<Array2<f64>>,
    pub blocks: Vec<BlockParams>,
    pub out_w: Arc<Array2<f64>>,
    pub out_b: Arc<Array2<f64>>,
}

impl BackboneParams {
    fn init(cfg: &BackboneConfig, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let d = cfg.embed_dim;
        let pdim = cfg.patch_dim();
        let n = cfg.token_count();
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams::init(&mut rng, d))
            .collect();
        Self {
            patch_w: Arc::new(xavier_array(&mut rng, d, pdim)),
            patch_b: Arc::new(Array2::zeros((1, d))),
            pos: Arc::new(normal_array(&mut rng, n, d, 0.02)),
            time_w: Arc::new(xavier_array(&mut rng, d, TIME_EMBED_DIM)),
            time_b: Arc::new(Array2::zeros((1, d))),
            class_emb: Arc::new(normal_array(&mut rng, cfg.class_count, d, 0.02)),
            blocks,
            // zero-initialized head keeps the initial prediction at zero
            out_w: Arc::new(Array2::zeros((pdim, d))),
            out_b: Arc::new(Array2::zeros((1, pdim))),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Arc<Array2<f64>>)) {
        f("backbone/patch/w".into(), &self.patch_w);
        f("backbone/patch/b".into(), &self.patch_b);
        f("backbone/pos/emb".into(), &self.pos);
        f("backbone/time/w".into(), &self.time_w);
        f("backbone/time/b".into(), &self.time_b);
        f("backbone/class/emb".into(), &self.class_emb);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit(&format!("backbone/{i}"), f);
        }
        f("backbone/head/w".into(), &self.out_w);
        f("backbone/head/b".into(), &self.out_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Arc<Array2<f64>>)) {
        f("backbone/patch/w".into(), &mut self.patch_w);
        f("backbone/patch/b".into(), &mut self.patch_b);
        f("backbone/pos/emb".into(), &mut self.pos);
        f("backbone/time/w".into(), &mut self.time_w);
        f("backbone/time/b".into(), &mut self.time_b);
        f("backbone/class/emb".into(), &mut self.class_emb);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_mut(&format!("backbone/{i}"), f);
        }
        f("backbone/head/w".into(), &mut self.out_w);
        f("backbone/head/b".into(), &mut self.out_b);
    }

    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, arr| {
            hasher.update(name.as_bytes());
            for v in arr.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        hex_string(&hasher.finalize())
    }
}

/// The denoiser: parameter store, config, and an optional attached adapter
/// set. After freezing, no operation mutates the parameters.
#[derive(Debug, Clone)]
pub struct DenoiserHandle {
    pub params: BackboneParams,
    pub cfg: BackboneConfig,
    frozen: bool,
    registry: Option<AdapterSet>,
}

pub fn build_backbone(cfg: &BackboneConfig, init_seed: u64) -> Result<DenoiserHandle> {
    cfg.validate()?;
    Ok(DenoiserHandle {
        params: BackboneParams::init(cfg, init_seed),
        cfg: *cfg,
        frozen: false,
        registry: None,
    })
}

impl DenoiserHandle {
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn descriptors(&self) -> Vec<LayerDescriptor> {
        descriptors(&self.cfg)
    }

    pub fn attached(&self) -> Option<&AdapterSet> {
        self.registry.as_ref()
    }

    /// Bind an adapter set; subsequent forwards use effective weights.
    pub fn attach(&mut self, set: AdapterSet) -> Result<()> {
        let descs = self.descriptors();
        for (&idx, f) in set.factors.iter() {
            let Some(desc) = descs.get(idx) else {
                return Err(Error::UnknownLayer(idx));
            };
            f.check_against(desc)?;
            if let Some(existing) = &self.registry {
                if existing.factors.contains_key(&idx) {
                    return Err(Error::DoubleAttach(idx));
                }
            }
        }
        match &mut self.registry {
            Some(existing) => existing.factors.extend(set.factors),
            None => self.registry = Some(set),
        }
        Ok(())
    }

    /// Remove all attached adapters, restoring base behavior exactly.
    pub fn detach(&mut self) -> Option<AdapterSet> {
        self.registry.take()
    }

    /// Guard used by training loops: parameter updates require an unfrozen
    /// handle.
    pub fn require_mutable(&self) -> Result<()> {
        if self.frozen {
            Err(Error::Frozen)
        } else {
            Ok(())
        }
    }
}

/// Standard sinusoidal embedding: sin block then cos block, frequencies
/// `10000^(-2j/dim)`.
pub fn sinusoidal_time_embed(t: usize, dim: usize) -> Result<Array2<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "time embedding dim must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for j in 0..half {
        let freq = 10_000f64.powf(-2.0 * j as f64 / dim as f64);
        out[[0, j]] = (t as f64 * freq).sin();
        out[[0, half + j]] = (t as f64 * freq).cos();
    }
    Ok(out)
}

/// Rearrange a C×H×W grid into a token matrix of patch vectors
/// (channel-major within each patch; tokens in row-major grid order).
pub fn patchify(img: &Array3<f64>, patch: usize) -> Array2<f64> {
    let (c, h, w) = img.dim();
    let gy = h / patch;
    let gx = w / patch;
    let mut out = Array2::zeros((gy * gx, c * patch * patch));
    for ty in 0..gy {
        for tx in 0..gx {
            let tok = ty * gx + tx;
            for ch in 0..c {
                for iy in 0..patch {
                    for ix in 0..patch {
                        out[[tok, ch * patch * patch + iy * patch + ix]] =
                            img[[ch, ty * patch + iy, tx * patch + ix]];
                    }
                }
            }
        }
    }
    out
}

pub fn unpatchify(tokens: &Array2<f64>, patch: usize, c: usize, h: usize, w: usize) -> Array3<f64> {
    let gx = w / patch;
    let mut out = Array3::zeros((c, h, w));
    for (tok, row) in tokens.rows().into_iter().enumerate() {
        let ty = tok / gx;
        let tx = tok % gx;
        for ch in 0..c {
            for iy in 0..patch {
                for ix in 0..patch {
                    out[[ch, ty * patch + iy, tx * patch + ix]] =
                        row[ch * patch * patch + iy * patch + ix];
                }
            }
        }
    }
    out
}

/// Tape handles for one block's parameters.
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub cwq: Var,
    pub cbq: Var,
    pub cwk: Var,
    pub cbk: Var,
    pub cwv: Var,
    pub cbv: Var,
    pub cwo: Var,
    pub cbo: Var,
    pub ln3_g: Var,
    pub ln3_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BlockVars {
    pub fn new(tape: &mut Tape, p: &BlockParams, trainable: bool, list: &mut Vec<Var>) -> Self {
        let mut push = |arr: &Arc<Array2<f64>>| {
            let v = if trainable {
                tape.param(arr.clone())
            } else {
                tape.constant_shared(arr.clone())
            };
            list.push(v);
            v
        };
        Self {
            ln1_g: push(&p.ln1_g),
            ln1_b: push(&p.ln1_b),
            wq: push(&p.wq),
            bq: push(&p.bq),
            wk: push(&p.wk),
            bk: push(&p.bk),
            wv: push(&p.wv),
            bv: push(&p.bv),
            wo: push(&p.wo),
            bo: push(&p.bo),
            ln2_g: push(&p.ln2_g),
            ln2_b: push(&p.ln2_b),
            cwq: push(&p.cwq),
            cbq: push(&p.cbq),
            cwk: push(&p.cwk),
            cbk: push(&p.cbk),
            cwv: push(&p.cwv),
            cbv: push(&p.cbv),
            cwo: push(&p.cwo),
            cbo: push(&p.cbo),
            ln3_g: push(&p.ln3_g),
            ln3_b: push(&p.ln3_b),
            w1: push(&p.w1),
            b1: push(&p.b1),
            w2: push(&p.w2),
            b2: push(&p.b2),
        }
    }
}

/// Tape handles for the whole backbone, plus a flat list aligned with
/// `BackboneParams::visit` order for optimizers.
pub struct BackboneVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub pos: Var,
    pub time_w: Var,
    pub time_b: Var,
    pub class_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub out_w: Var,
    pub out_b: Var,
    pub flat: Vec<Var>,
}

impl BackboneVars {
    pub fn new(tape: &mut Tape, p: &BackboneParams, trainable: bool) -> Self {
        let mut flat = Vec::new();
        let mut push = |tape: &mut Tape, arr: &Arc<Array2<f64>>, flat: &mut Vec<Var>| {
            let v = if trainable {
                tape.param(arr.clone())
            } else {
                tape.constant_shared(arr.clone())
            };
            flat.push(v);
            v
        };
        let patch_w = push(tape, &p.patch_w, &mut flat);
        let patch_b = push(tape, &p.patch_b, &mut flat);
        let pos = push(tape, &p.pos, &mut flat);
        let time_w = push(tape, &p.time_w, &mut flat);
        let time_b = push(tape, &p.time_b, &mut flat);
        let class_emb = push(tape, &p.class_emb, &mut flat);
        let blocks = p
            .blocks
            .iter()
            .map(|b| BlockVars::new(tape, b, trainable, &mut flat))
            .collect();
        let out_w = push(tape, &p.out_w, &mut flat);
        let out_b = push(tape, &p.out_b, &mut flat);
        Self {
            patch_w,
            patch_b,
            pos,
            time_w,
            time_b,
            class_emb,
            blocks,
            out_w,
            out_b,
            flat,
        }
    }
}

/// Per-layer adapter factors as tape nodes. The scale is either a plain
/// constant or a node (the time-scaled variant trains it).
pub struct AdapterVars {
    pub map: BTreeMap<usize, (Var, Var, AdapterScale)>,
}

/// Optional extra wiring for a forward pass.
pub struct ForwardExtras<'a> {
    pub adapters: Option<&'a AdapterVars>,
    /// Activation-injection branch: (vars, pooled condition row 1×64).
    pub branch: Option<(&'a crate::baseline::BranchVars, Var)>,
}

impl Default for ForwardExtras<'_> {
    fn default() -> Self {
        Self {
            adapters: None,
            branch: None,
        }
    }
}

fn lin_adapted(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    adapter: Option<&(Var, Var, AdapterScale)>,
) -> Var {
    let base = tape.linear(x, w, b);
    match adapter {
        None => base,
        Some((bm, am, scale)) => {
            let at = tape.transpose(*am);
            let u = tape.matmul(x, at);
            let bt = tape.transpose(*bm);
            let lo = tape.matmul(u, bt);
            let scaled = match scale {
                AdapterScale::Const(s) => tape.scale(lo, *s),
                AdapterScale::Node(v) => tape.scale_var(lo, *v),
            };
            tape.add(base, scaled)
        }
    }
}

fn multihead(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    head_dim: usize,
) -> Var {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qh = tape.cols(q, lo, hi);
        let kh = tape.cols(k, lo, hi);
        let vh = tape.cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt);
        let logits = tape.scale(logits, scale);
        let probs = tape.softmax(logits);
        outs.push(tape.matmul(probs, vh));
    }
    tape.concat_cols(&outs)
}

/// One transformer block: pre-LN self-attention, cross-attention over the
/// class context, and MLP, each with a residual add.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    blk: &BlockVars,
    ctx: Var,
    heads: usize,
    head_dim: usize,
    adapters: [Option<&(Var, Var, AdapterScale)>; PROJS_PER_BLOCK],
) -> Var {
    // self-attention
    let h = tape.layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS);
    let q = lin_adapted(tape, h, blk.wq, blk.bq, adapters[0]);
    let k = lin_adapted(tape, h, blk.wk, blk.bk, adapters[1]);
    let v = lin_adapted(tape, h, blk.wv, blk.bv, adapters[2]);
    let attn = multihead(tape, q, k, v, heads, head_dim);
    let attn = tape.linear(attn, blk.wo, blk.bo);
    let x = tape.add(x, attn);

    // cross-attention over the single class token
    let h = tape.layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS);
    let q = lin_adapted(tape, h, blk.cwq, blk.cbq, adapters[3]);
    let k = lin_adapted(tape, ctx, blk.cwk, blk.cbk, adapters[4]);
    let v = lin_adapted(tape, ctx, blk.cwv, blk.cbv, adapters[5]);
    let attn = multihead(tape, q, k, v, heads, head_dim);
    let attn = tape.linear(attn, blk.cwo, blk.cbo);
    let x = tape.add(x, attn);

    // MLP
    let h = tape.layer_norm(x, blk.ln3_g, blk.ln3_b, LN_EPS);
    let u = tape.linear(h, blk.w1, blk.b1);
    let u = tape.gelu(u);
    let o = tape.linear(u, blk.w2, blk.b2);
    tape.add(x, o)
}

/// Full forward pass on the tape. `z_patches` is the patchified noisy input;
/// returns the token matrix of the epsilon prediction (n × patch_dim).
pub fn forward_tokens(
    tape: &mut Tape,
    vars: &BackboneVars,
    cfg: &BackboneConfig,
    z_patches: Var,
    t: usize,
    label: usize,
    extras: &ForwardExtras<'_>,
) -> Var {
    let head_dim = cfg.embed_dim / cfg.heads;
    let te = sinusoidal_time_embed(t, TIME_EMBED_DIM).expect("even dim");
    let te = tape.constant(te);
    let time_row = tape.linear(te, vars.time_w, vars.time_b);

    let mut x = tape.linear(z_patches, vars.patch_w, vars.patch_b);
    x = tape.add(x, vars.pos);
    x = tape.add_row(x, time_row);
    let tokens_in = x;

    let ctx = tape.row(vars.class_emb, label);

    for (bi, blk) in vars.blocks.iter().enumerate() {
        let mut slots: [Option<&(Var, Var, AdapterScale)>; PROJS_PER_BLOCK] =
            [None, None, None, None, None, None];
        if let Some(ad) = extras.adapters {
            for (slot, s) in slots.iter_mut().enumerate() {
                *s = ad.map.get(&(bi * PROJS_PER_BLOCK + slot));
            }
        }
        x = block_forward(tape, x, blk, ctx, cfg.heads, head_dim, slots);

        if bi == 0 {
            if let Some((branch, y_row)) = &extras.branch {
                x = crate::baseline::branch_apply(
                    tape, branch, tokens_in, x, ctx, *y_row, cfg, head_dim,
                );
            }
        }
    }
    tape.linear(x, vars.out_w, vars.out_b)
}

/// Forward-only epsilon prediction. Adapter shapes are validated against the
/// descriptors; explicit adapters take precedence over the attached registry.
pub fn denoiser_forward(
    h: &DenoiserHandle,
    z_t: &Array3<f64>,
    t: usize,
    label: usize,
    adapters: Option<&AdapterSet>,
) -> Result<Array3<f64>> {
    let set = adapters.or(h.registry.as_ref());
    let descs = h.descriptors();
    if let Some(set) = set {
        for (&idx, f) in set.factors.iter() {
            let Some(desc) = descs.get(idx) else {
                return Err(Error::UnknownLayer(idx));
            };
            f.check_against(desc)?;
        }
    }
    let mut tape = Tape::new();
    let vars = BackboneVars::new(&mut tape, &h.params, false);
    let adapter_vars = set.map(|s| s.to_vars(&mut tape));
    let patches = tape.constant(patchify(z_t, h.cfg.patch_size));
    let extras = ForwardExtras {
        adapters: adapter_vars.as_ref(),
        branch: None,
    };
    let out = forward_tokens(&mut tape, &vars, &h.cfg, patches, t, label, &extras);
    Ok(unpatchify(
        tape.value(out),
        h.cfg.patch_size,
        IMG_CHANNELS,
        IMG_SIZE,
        IMG_SIZE,
    ))
}

impl crate::diffusion::Denoiser for DenoiserHandle {
    fn predict(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        label: usize,
        _y: Option<&Array2<f64>>,
    ) -> Result<Array3<f64>> {
        denoiser_forward(self, z_t, t, label, None)
    }
}

impl BackboneParams {
    /// Flatten parameters in canonical visit order.
    pub fn collect(&self) -> Vec<Arc<Array2<f64>>> {
        let mut out = Vec::new();
        self.visit(&mut |_, arr| out.push(arr.clone()));
        out
    }

    /// Rebuild a params struct from a flat list in canonical visit order.
    pub fn assign_from_flat(&mut self, flat: &[Arc<Array2<f64>>]) {
        let mut cursor = 0;
        self.visit_mut(&mut |_, arr| {
            *arr = flat[cursor].clone();
            cursor += 1;
        });
        assert_eq!(cursor, flat.len(), "flat param count mismatch");
    }

    pub fn to_archive(&self, mut meta: serde_json::Map<String, serde_json::Value>) -> TensorArchive {
        meta.insert("kind".into(), serde_json::json!("backbone"));
        let mut arc = TensorArchive::new(serde_json::Value::Object(meta));
        self.visit(&mut |name, arr| arc.insert_array2(name, arr));
        arc
    }

    pub fn from_archive(cfg: &BackboneConfig, arc: &TensorArchive) -> Result<Self> {
        let mut params = BackboneParams::init(cfg, 0);
        let mut err = None;
        params.visit_mut(&mut |name, arr| {
            if err.is_some() {
                return;
            }
            match arc.get_array2(&name) {
                Ok(loaded) => {
                    if loaded.dim() != arr.dim() {
                        err = Some(Error::ShapeMismatch {
                            context: name.clone(),
                            expected: format!("{:?}", arr.dim()),
                            actual: format!("{:?}", loaded.dim()),
                        });
                    } else {
                        *arr = Arc::new(loaded);
                    }
                }
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }
}

impl BackboneVars {
    /// Wrap a flat var list (pushed in canonical order) into named handles.
    pub fn from_flat(flat: &[Var], depth: usize) -> Self {
        let mut c = 0usize;
        let mut next = || {
            let v = flat[c];
            c += 1;
            v
        };
        let patch_w = next();
        let patch_b = next();
        let pos = next();
        let time_w = next();
        let time_b = next();
        let class_emb = next();
        let mut blocks = Vec::with_capacity(depth);
        for _ in 0..depth {
            blocks.push(BlockVars {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_g: next(),
                ln2_b: next(),
                cwq: next(),
                cbq: next(),
                cwk: next(),
                cbk: next(),
                cwv: next(),
                cbv: next(),
                cwo: next(),
                cbo: next(),
                ln3_g: next(),
                ln3_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
        }
        let out_w = next();
        let out_b = next();
        assert_eq!(c, flat.len(), "flat var count mismatch");
        Self {
            patch_w,
            patch_b,
            pos,
            time_w,
            time_b,
            class_emb,
            blocks,
            out_w,
            out_b,
            flat: flat.to_vec(),
        }
    }
}

pub struct PretrainOutcome {
    pub handle: DenoiserHandle,
    pub curve: Vec<(usize, f64)>,
}

/// Stage-1 pretraining of the backbone itself on (image, label) pairs; the
/// returned handle is frozen.
pub fn pretrain_stage1(
    mut h: DenoiserHandle,
    data: &crate::data::Dataset,
    sched: &crate::diffusion::DiffusionSchedule,
    opts: &crate::train::TrainOptions,
    mut on_checkpoint: impl FnMut(usize, &BackboneParams) -> Result<()>,
) -> Result<PretrainOutcome> {
    h.require_mutable()?;
    if h.attached().is_some() {
        return Err(Error::Config(
            "pretraining requires no attached adapters".into(),
        ));
    }
    if opts.steps == 0 {
        h.freeze();
        return Ok(PretrainOutcome {
            handle: h,
            curve: Vec::new(),
        });
    }
    let params = h.params.collect();
    let cfg = h.cfg;
    let depth = cfg.depth;
    let result = crate::train::run_training(
        params,
        opts,
        |tape, flat, item| {
            let vars = BackboneVars::from_flat(flat, depth);
            let extras = ForwardExtras::default();
            crate::train::denoising_loss_node(tape, &vars, &cfg, sched, item, &extras)
        },
        data,
        sched,
        false,
        |step, flat| {
            let mut snapshot = h.params.clone();
            snapshot.assign_from_flat(flat);
            on_checkpoint(step, &snapshot)
        },
    )?;
    h.params.assign_from_flat(&result.params);
    h.freeze();
    Ok(PretrainOutcome {
        handle: h,
        curve: result.curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            class_count: 4,
            timesteps: 10,
        }
    }

    #[test]
    fn descriptor_enumeration() {
        let cfg = BackboneConfig {
            patch_size: 4,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            class_count: 4,
            timesteps: 200,
        };
        let d = descriptors(&cfg);
        assert_eq!(d.len(), 24);
        assert_eq!(d[0].attn_kind, AttnKind::SelfAttn);
        assert_eq!(d[0].proj_kind, ProjKind::Query);
        assert_eq!(d[3].attn_kind, AttnKind::Cross);
        assert_eq!(d[5].proj_kind, ProjKind::Value);
        for (i, desc) in d.iter().enumerate() {
            assert_eq!(desc.layer_index, i);
            assert_eq!(desc.d, 128);
            assert_eq!(desc.k, 128);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny_cfg();
        let a = build_backbone(&cfg, 7).unwrap();
        let b = build_backbone(&cfg, 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = build_backbone(&cfg, 8).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = tiny_cfg();
        let h = build_backbone(&cfg, 1).unwrap();
        let mut rng = rng_from(2);
        let z = crate::diffusion::standard_normal_grid(&mut rng, (IMG_CHANNELS, IMG_SIZE, IMG_SIZE));
        let a = denoiser_forward(&h, &z, 3, 1, None).unwrap();
        assert_eq!(a.dim(), z.dim());
        let b = denoiser_forward(&h, &z, 3, 1, None).unwrap();
        assert_eq!(a, b);
        // different label changes output
        let c = denoiser_forward(&h, &z, 3, 2, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sinusoid_t0() {
        let e = sinusoidal_time_embed(0, 8).unwrap();
        for j in 0..4 {
            assert_eq!(e[[0, j]], 0.0);
            assert_eq!(e[[0, 4 + j]], 1.0);
        }
    }

    #[test]
    fn sinusoid_direct_eval() {
        let e = sinusoidal_time_embed(1, 4).unwrap();
        assert!((e[[0, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((e[[0, 1]] - 0.01f64.sin()).abs() < 1e-15);
        assert!((e[[0, 2]] - 1f64.cos()).abs() < 1e-15);
        assert!((e[[0, 3]] - 0.01f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn sinusoid_bounds_and_odd_dim() {
        assert!(sinusoidal_time_embed(5, 7).is_err());
        for t in [0usize, 1, 57, 199] {
            let e = sinusoidal_time_embed(t, TIME_EMBED_DIM).unwrap();
            for &v in e.iter() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn patchify_roundtrip() {
        let mut rng = rng_from(3);
        let img = crate::diffusion::standard_normal_grid(&mut rng, (2, 8, 8));
        let p = patchify(&img, 4);
        assert_eq!(p.dim(), (4, 32));
        let back = unpatchify(&p, 4, 2, 8, 8);
        assert_eq!(img, back);
    }

    #[test]
    fn frozen_handle_rejects_updates() {
        let cfg = tiny_cfg();
        let mut h = build_backbone(&cfg, 1).unwrap();
        assert!(h.require_mutable().is_ok());
        h.freeze();
        assert!(matches!(h.require_mutable(), Err(Error::Frozen)));
    }
}
