//! Context → memory states → generated LoRA.
//!
//! 1. **Memory extraction.** The backbone, with Meta-LoRA installed, reads
//!    `[context; m]` where `m` are `M` learnable memory embeddings. The hidden
//!    states of the memory positions after each of the `L` blocks are stacked
//!    into an `L×M×H` memory tensor.
//! 2. **M2P transformer.** Learned layer and token position tables are added,
//!    then `L'` post-norm blocks alternate column attention (each memory token
//!    attends across layers) and row attention (each layer attends across
//!    memory tokens). All blocks share one 2-layer MLP.
//! 3. **Reshape.** Slice `i` of the output is flattened row-major and cut
//!    sequentially into `A` (`I·r` values) and `B` (`r·O` values) for every
//!    target of backbone layer `i`.
//!
//! `M = ⌈rD/H⌉` guarantees `M·H ≥ r·D`; the tail of each slice is unused.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterRole, AdapterSet, LoraPair};
use crate::backbone::{Backbone, BoundAdapters, BoundBackbone, BoundLora, LayerSpec, Target};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::{AttnLayout, AttnMask, Graph, Var};
use crate::tensor::Matrix;

/// `M = ⌈r·D / H⌉`.
pub fn memory_length(r: usize, d: usize, h: usize) -> usize {
    assert!(h > 0, "hidden width must be positive");
    (r * d).div_ceil(h)
}

/// Orientation of the flat slices that become `A` and `B`.
///
/// `r` marks a slice reshaped in its natural orientation (`A: I×r`,
/// `B: r×O`), `l` a slice reshaped transposed and then flipped back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReshapeMode {
    /// `A = reshape(I×r)`, `B = reshape(r×O)`.
    #[default]
    Rl,
    /// `A = reshape(I×r)`, `Bᵀ = reshape(O×r)`.
    Rr,
    /// `Aᵀ = reshape(r×I)`, `Bᵀ = reshape(O×r)`.
    Lr,
    /// `Aᵀ = reshape(r×I)`, `B = reshape(r×O)`.
    Ll,
}

impl ReshapeMode {
    pub const ALL: [ReshapeMode; 4] = [ReshapeMode::Rl, ReshapeMode::Rr, ReshapeMode::Lr, ReshapeMode::Ll];

    pub fn a_transposed(self) -> bool {
        matches!(self, ReshapeMode::Lr | ReshapeMode::Ll)
    }

    pub fn b_transposed(self) -> bool {
        matches!(self, ReshapeMode::Rr | ReshapeMode::Lr)
    }
}

impl FromStr for ReshapeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rl" => Ok(ReshapeMode::Rl),
            "rr" => Ok(ReshapeMode::Rr),
            "lr" => Ok(ReshapeMode::Lr),
            "ll" => Ok(ReshapeMode::Ll),
            _ => Err(Error::Invalid(format!("unknown reshape mode {s:?}"))),
        }
    }
}

/// Which row-attention blocks use the coupled A↔B mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Coupling {
    #[default]
    Off,
    /// Every row-attention block is coupled.
    Full,
    /// The last `k` row-attention blocks are coupled.
    Mixed(usize),
}

impl fmt::Display for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coupling::Off => f.write_str("off"),
            Coupling::Full => f.write_str("full"),
            Coupling::Mixed(k) => write!(f, "mixed:{k}"),
        }
    }
}

impl FromStr for Coupling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Coupling::Off),
            "full" => Ok(Coupling::Full),
            _ => s
                .strip_prefix("mixed:")
                .and_then(|k| k.parse().ok())
                .map(Coupling::Mixed)
                .ok_or_else(|| Error::Invalid(format!("unknown coupling {s:?} (off, full, mixed:<k>)"))),
        }
    }
}

impl TryFrom<String> for Coupling {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Coupling> for String {
    fn from(c: Coupling) -> String {
        c.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypernetConfig {
    /// Rank of the generated adapters.
    pub r_gen: usize,
    /// Rank of the Meta-LoRA used during memory extraction.
    pub r_meta: usize,
    /// M2P depth `L'`; must be even.
    pub m2p_layers: usize,
    pub m2p_heads: usize,
    pub mode: ReshapeMode,
    pub coupling: Coupling,
    pub meta_init_std: f64,
    pub memory_init_std: f64,
    pub pos_init_std: f64,
    /// Initial gain of the final layer norm, which sets the generated LoRA scale.
    pub out_gain_init: f64,
    pub ln_eps: f64,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self {
            r_gen: 2,
            r_meta: 8,
            m2p_layers: 2,
            m2p_heads: 1,
            mode: ReshapeMode::Rl,
            coupling: Coupling::Off,
            meta_init_std: 0.02,
            memory_init_std: 0.1,
            pos_init_std: 0.1,
            out_gain_init: 0.05,
            ln_eps: 1e-5,
        }
    }
}

impl HypernetConfig {
    pub fn validate(&self, hidden: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.r_gen == 0 || self.r_meta == 0 {
            return fail("LoRA ranks must be at least 1".into());
        }
        if self.m2p_layers == 0 || !self.m2p_layers.is_multiple_of(2) {
            return fail(format!(
                "M2P depth must be a positive even number, got {}",
                self.m2p_layers
            ));
        }
        if self.m2p_heads == 0 || !hidden.is_multiple_of(self.m2p_heads) {
            return fail(format!(
                "M2P heads {} must divide hidden width {hidden}",
                self.m2p_heads
            ));
        }
        if let Coupling::Mixed(k) = self.coupling {
            if k > self.m2p_layers / 2 {
                return fail(format!(
                    "mixed coupling of {k} blocks exceeds the {} row-attention blocks",
                    self.m2p_layers / 2
                ));
            }
        }
        Ok(())
    }

    /// Whether M2P block `i` (0-based) is a row block with the coupled mask.
    fn coupled(&self, i: usize) -> bool {
        if i.is_multiple_of(2) {
            return false;
        }
        let row_index = i / 2;
        let rows = self.m2p_layers / 2;
        match self.coupling {
            Coupling::Off => false,
            Coupling::Full => true,
            Coupling::Mixed(k) => row_index >= rows - k,
        }
    }
}

/// Stacked memory states; row `layer·M + token` of `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryTensor {
    pub layers: usize,
    pub tokens: usize,
    pub data: Matrix,
}

impl MemoryTensor {
    pub fn new(layers: usize, tokens: usize, data: Matrix) -> Result<Self> {
        if data.rows() != layers * tokens {
            return Err(Error::Shape {
                target: "memory tensor".into(),
                detail: format!("{} rows for {layers}x{tokens}", data.rows()),
            });
        }
        Ok(Self { layers, tokens, data })
    }

    pub fn hidden(&self) -> usize {
        self.data.cols()
    }

    /// `(L, M, H)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.layers, self.tokens, self.hidden())
    }

    pub fn slice(&self, layer: usize) -> Matrix {
        self.data.slice_rows(layer * self.tokens, self.tokens)
    }
}

#[derive(Clone, Debug)]
pub struct M2PBlock {
    pub wq: Arc<Matrix>,
    pub wk: Arc<Matrix>,
    pub wv: Arc<Matrix>,
    pub wo: Arc<Matrix>,
    pub ln1_gain: Arc<Matrix>,
    pub ln1_bias: Arc<Matrix>,
    pub ln2_gain: Arc<Matrix>,
    pub ln2_bias: Arc<Matrix>,
}

/// M2P transformer weights (`Θ_T`).
#[derive(Clone, Debug)]
pub struct M2PParams {
    /// `L×H`, broadcast over memory tokens.
    pub p_layer: Arc<Matrix>,
    /// `M×H`, broadcast over layers.
    pub p_token: Arc<Matrix>,
    pub blocks: Vec<M2PBlock>,
    /// Shared MLP `H → 2H → H`.
    pub mlp_w1: Arc<Matrix>,
    pub mlp_b1: Arc<Matrix>,
    pub mlp_w2: Arc<Matrix>,
    pub mlp_b2: Arc<Matrix>,
}

/// Trainable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// M2P transformer.
    Transformer,
    /// Meta-LoRA.
    MetaLora,
    /// Initial memory embeddings.
    Memory,
}

/// Everything the hypernetwork trains: `Θ_T`, `Θ_M` and `m`.
#[derive(Clone, Debug)]
pub struct Hypernet {
    pub cfg: HypernetConfig,
    pub spec: LayerSpec,
    pub num_layers: usize,
    pub hidden: usize,
    pub memory_tokens: usize,
    /// Meta-LoRA `A` factors, layer-major in target order.
    pub meta_a: Vec<Arc<Matrix>>,
    pub meta_b: Vec<Arc<Matrix>>,
    /// `M×H`.
    pub memory: Arc<Matrix>,
    pub m2p: M2PParams,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln1_gain: Var,
    ln1_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
}

/// Hypernetwork parameters as graph leaves.
#[derive(Clone, Debug)]
pub struct BoundHypernet {
    pub meta: BoundAdapters,
    pub memory: Var,
    p_layer: Var,
    p_token: Var,
    blocks: Vec<BoundBlock>,
    mlp: [Var; 4],
    vars: Vec<Var>,
}

impl BoundHypernet {
    /// Leaves in [`Hypernet::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Hypernet {
    pub fn init(cfg: HypernetConfig, backbone: &Backbone, seed: u64) -> Result<Self> {
        let h = backbone.cfg.hidden;
        cfg.validate(h)?;
        let spec = backbone.layer_spec();
        let num_layers = backbone.cfg.layers;
        let m = memory_length(cfg.r_gen, spec.d(), h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut meta_a = Vec::new();
        let mut meta_b = Vec::new();
        for _ in 0..num_layers {
            for t in &spec.targets {
                meta_a.push(Arc::new(Matrix::randn(t.input, cfg.r_meta, cfg.meta_init_std, &mut rng)));
                meta_b.push(Arc::new(Matrix::zeros(cfg.r_meta, t.output)));
            }
        }
        let memory = Arc::new(Matrix::randn(m, h, cfg.memory_init_std, &mut rng));
        let std = 1.0 / (h as f64).sqrt();
        let blocks = (0..cfg.m2p_layers)
            .map(|i| {
                let last = i + 1 == cfg.m2p_layers;
                M2PBlock {
                    wq: Arc::new(Matrix::randn(h, h, std, &mut rng)),
                    wk: Arc::new(Matrix::randn(h, h, std, &mut rng)),
                    wv: Arc::new(Matrix::randn(h, h, std, &mut rng)),
                    wo: Arc::new(Matrix::randn(h, h, std, &mut rng)),
                    ln1_gain: Arc::new(Matrix::filled(1, h, 1.0)),
                    ln1_bias: Arc::new(Matrix::zeros(1, h)),
                    ln2_gain: Arc::new(Matrix::filled(1, h, if last { cfg.out_gain_init } else { 1.0 })),
                    ln2_bias: Arc::new(Matrix::zeros(1, h)),
                }
            })
            .collect();
        let m2p = M2PParams {
            p_layer: Arc::new(Matrix::randn(num_layers, h, cfg.pos_init_std, &mut rng)),
            p_token: Arc::new(Matrix::randn(m, h, cfg.pos_init_std, &mut rng)),
            blocks,
            mlp_w1: Arc::new(Matrix::randn(h, 2 * h, std, &mut rng)),
            mlp_b1: Arc::new(Matrix::zeros(1, 2 * h)),
            mlp_w2: Arc::new(Matrix::randn(2 * h, h, 1.0 / (2.0 * h as f64).sqrt(), &mut rng)),
            mlp_b2: Arc::new(Matrix::zeros(1, h)),
        };
        Ok(Self {
            cfg,
            spec,
            num_layers,
            hidden: h,
            memory_tokens: m,
            meta_a,
            meta_b,
            memory,
            m2p,
        })
    }

    pub fn meta_scale(&self) -> f64 {
        1.0 / self.cfg.r_meta as f64
    }

    /// The Meta-LoRA as a plain adapter set.
    pub fn meta_lora(&self) -> AdapterSet {
        let n = self.spec.targets.len();
        AdapterSet {
            rank: self.cfg.r_meta,
            role: AdapterRole::Meta,
            layers: (0..self.num_layers)
                .map(|l| {
                    (0..n)
                        .map(|t| LoraPair {
                            a: self.meta_a[l * n + t].as_ref().clone(),
                            b: self.meta_b[l * n + t].as_ref().clone(),
                            scale: self.meta_scale(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Named parameters with their group, in a fixed order.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Arc<Matrix>)> {
        let mut out = Vec::new();
        let n = self.spec.targets.len();
        for (i, (a, b)) in self.meta_a.iter().zip(&self.meta_b).enumerate() {
            let name = format!("meta.layers.{}.{}", i / n, self.spec.targets[i % n].target.name());
            out.push((format!("{name}.a"), ParamGroup::MetaLora, a));
            out.push((format!("{name}.b"), ParamGroup::MetaLora, b));
        }
        out.push(("memory".into(), ParamGroup::Memory, &self.memory));
        let t = ParamGroup::Transformer;
        out.push(("m2p.p_layer".into(), t, &self.m2p.p_layer));
        out.push(("m2p.p_token".into(), t, &self.m2p.p_token));
        for (i, b) in self.m2p.blocks.iter().enumerate() {
            out.push((format!("m2p.blocks.{i}.wq"), t, &b.wq));
            out.push((format!("m2p.blocks.{i}.wk"), t, &b.wk));
            out.push((format!("m2p.blocks.{i}.wv"), t, &b.wv));
            out.push((format!("m2p.blocks.{i}.wo"), t, &b.wo));
            out.push((format!("m2p.blocks.{i}.ln1_gain"), t, &b.ln1_gain));
            out.push((format!("m2p.blocks.{i}.ln1_bias"), t, &b.ln1_bias));
            out.push((format!("m2p.blocks.{i}.ln2_gain"), t, &b.ln2_gain));
            out.push((format!("m2p.blocks.{i}.ln2_bias"), t, &b.ln2_bias));
        }
        out.push(("m2p.mlp_w1".into(), t, &self.m2p.mlp_w1));
        out.push(("m2p.mlp_b1".into(), t, &self.m2p.mlp_b1));
        out.push(("m2p.mlp_w2".into(), t, &self.m2p.mlp_w2));
        out.push(("m2p.mlp_b2".into(), t, &self.m2p.mlp_b2));
        out
    }

    /// Mutable parameters in [`Self::params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Arc<Matrix>> {
        let mut out = Vec::new();
        for (a, b) in self.meta_a.iter_mut().zip(self.meta_b.iter_mut()) {
            out.push(a);
            out.push(b);
        }
        out.push(&mut self.memory);
        out.push(&mut self.m2p.p_layer);
        out.push(&mut self.m2p.p_token);
        for b in self.m2p.blocks.iter_mut() {
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
        }
        out.push(&mut self.m2p.mlp_w1);
        out.push(&mut self.m2p.mlp_b1);
        out.push(&mut self.m2p.mlp_w2);
        out.push(&mut self.m2p.mlp_b2);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHypernet {
        let mut vars = Vec::new();
        let mut leaf = |g: &mut Graph, m: &Arc<Matrix>| {
            let v = g.param(m.clone(), trainable);
            vars.push(v);
            v
        };
        let n = self.spec.targets.len();
        let mut meta_layers = vec![Vec::with_capacity(n); self.num_layers];
        for (i, (a, b)) in self.meta_a.iter().zip(&self.meta_b).enumerate() {
            let a = leaf(g, a);
            let b = leaf(g, b);
            meta_layers[i / n].push(BoundLora {
                a,
                b,
                scale: self.meta_scale(),
            });
        }
        let memory = leaf(g, &self.memory);
        let p_layer = leaf(g, &self.m2p.p_layer);
        let p_token = leaf(g, &self.m2p.p_token);
        let blocks = self
            .m2p
            .blocks
            .iter()
            .map(|b| BoundBlock {
                wq: leaf(g, &b.wq),
                wk: leaf(g, &b.wk),
                wv: leaf(g, &b.wv),
                wo: leaf(g, &b.wo),
                ln1_gain: leaf(g, &b.ln1_gain),
                ln1_bias: leaf(g, &b.ln1_bias),
                ln2_gain: leaf(g, &b.ln2_gain),
                ln2_bias: leaf(g, &b.ln2_bias),
            })
            .collect();
        let mlp = [
            leaf(g, &self.m2p.mlp_w1),
            leaf(g, &self.m2p.mlp_b1),
            leaf(g, &self.m2p.mlp_w2),
            leaf(g, &self.m2p.mlp_b2),
        ];
        BoundHypernet {
            meta: BoundAdapters { layers: meta_layers },
            memory,
            p_layer,
            p_token,
            blocks,
            mlp,
            vars,
        }
    }

    fn check_backbone(&self, backbone: &Backbone) -> Result<()> {
        if backbone.cfg.layers != self.num_layers || backbone.cfg.hidden != self.hidden {
            return Err(Error::Config(format!(
                "hypernetwork built for L={} H={}, backbone has L={} H={}",
                self.num_layers, self.hidden, backbone.cfg.layers, backbone.cfg.hidden
            )));
        }
        Ok(())
    }

    /// Memory extraction as graph nodes; returns the `(L·M)×H` stack.
    pub fn extract_memory_graph(
        &self,
        g: &mut Graph,
        backbone: &Backbone,
        bb: &BoundBackbone,
        bh: &BoundHypernet,
        context: &[u32],
    ) -> Result<Var> {
        self.check_backbone(backbone)?;
        let n = context.len();
        let m = self.memory_tokens;
        backbone.check_len(n + m, "; truncate the context to fit the memory tokens")?;
        backbone.check_tokens(context)?;
        let input = if n == 0 {
            bh.memory
        } else {
            let x = backbone.embed_tokens(g, bb, context);
            g.concat_rows(&[x, bh.memory])
        };
        let hidden = backbone.forward_hidden(g, bb, input, Some(&bh.meta), true)?;
        let slices: Vec<Var> = hidden
            .per_layer
            .iter()
            .map(|h| g.slice_rows(*h, n, m))
            .collect();
        Ok(g.concat_rows(&slices))
    }

    fn layout(&self, block: usize, coupling_mask: Option<&Arc<Vec<bool>>>) -> AttnLayout {
        let (l, m) = (self.num_layers, self.memory_tokens);
        if block.is_multiple_of(2) {
            AttnLayout {
                groups: (0..m).map(|j| (0..l).map(|i| i * m + j).collect()).collect(),
                mask: AttnMask::Full,
            }
        } else {
            AttnLayout {
                groups: (0..l).map(|i| (i * m..(i + 1) * m).collect()).collect(),
                mask: match coupling_mask {
                    Some(mask) if self.cfg.coupled(block) => AttnMask::Custom(mask.clone()),
                    _ => AttnMask::Full,
                },
            }
        }
    }

    /// M2P transformer as graph nodes over an `(L·M)×H` stack.
    pub fn m2p_graph(&self, g: &mut Graph, bh: &BoundHypernet, mem: Var) -> Result<Var> {
        let (l, m) = (self.num_layers, self.memory_tokens);
        if g.shape(mem) != (l * m, self.hidden) {
            return Err(Error::Shape {
                target: "memory tensor".into(),
                detail: format!("{:?}, expected ({}, {})", g.shape(mem), l * m, self.hidden),
            });
        }
        let layer_ids: Vec<usize> = (0..l * m).map(|r| r / m).collect();
        let token_ids: Vec<usize> = (0..l * m).map(|r| r % m).collect();
        let pl = g.gather(bh.p_layer, &layer_ids);
        let pt = g.gather(bh.p_token, &token_ids);
        let z = g.add(mem, pl);
        let mut z = g.add(z, pt);
        let coupling = if self.cfg.coupling == Coupling::Off {
            None
        } else {
            Some(Arc::new(
                build_coupling_mask(&self.spec, self.cfg.r_gen, m, self.hidden)?.mask,
            ))
        };
        let heads = self.cfg.m2p_heads;
        let eps = self.cfg.ln_eps;
        let [w1, b1, w2, b2] = bh.mlp;
        for (i, blk) in bh.blocks.iter().enumerate() {
            let layout = Arc::new(self.layout(i, coupling.as_ref()));
            let q = g.matmul(z, blk.wq);
            let k = g.matmul(z, blk.wk);
            let v = g.matmul(z, blk.wv);
            let att = g.attention(q, k, v, heads, heads, layout);
            let att = g.matmul(att, blk.wo);
            let res = g.add(z, att);
            let x1 = g.layer_norm(res, blk.ln1_gain, blk.ln1_bias, eps);
            let hmid = g.matmul(x1, w1);
            let hmid = g.add_row(hmid, b1);
            let hmid = g.silu(hmid);
            let ff = g.matmul(hmid, w2);
            let ff = g.add_row(ff, b2);
            let res = g.add(x1, ff);
            z = g.layer_norm(res, blk.ln2_gain, blk.ln2_bias, eps);
        }
        Ok(z)
    }

    /// Cuts the M2P output into graph-level adapters, one slice per layer.
    pub fn reshape_graph(&self, g: &mut Graph, out: Var) -> Result<BoundAdapters> {
        let (m, h, r) = (self.memory_tokens, self.hidden, self.cfg.r_gen);
        check_capacity(&self.spec, r, m, h)?;
        let layers = (0..self.num_layers)
            .map(|layer| {
                let mut t = layer * m * h;
                self.spec
                    .targets
                    .iter()
                    .map(|spec| {
                        let mode = self.cfg.mode;
                        let a = if mode.a_transposed() {
                            let v = g.flat_view(out, t, r, spec.input);
                            g.transpose(v)
                        } else {
                            g.flat_view(out, t, spec.input, r)
                        };
                        t += spec.input * r;
                        let b = if mode.b_transposed() {
                            let v = g.flat_view(out, t, spec.output, r);
                            g.transpose(v)
                        } else {
                            g.flat_view(out, t, r, spec.output)
                        };
                        t += r * spec.output;
                        BoundLora { a, b, scale: 1.0 }
                    })
                    .collect()
            })
            .collect();
        Ok(BoundAdapters { layers })
    }

    /// Full generation pipeline as graph nodes.
    pub fn generate_lora_graph(
        &self,
        g: &mut Graph,
        backbone: &Backbone,
        bb: &BoundBackbone,
        bh: &BoundHypernet,
        context: &[u32],
    ) -> Result<BoundAdapters> {
        let mem = self.extract_memory_graph(g, backbone, bb, bh, context)?;
        let out = self.m2p_graph(g, bh, mem)?;
        self.reshape_graph(g, out)
    }

    pub fn extract_memory(&self, backbone: &Backbone, context: &[u32]) -> Result<MemoryTensor> {
        let mut g = Graph::new();
        let bb = backbone.bind(&mut g, false);
        let bh = self.bind(&mut g, false);
        let mem = self.extract_memory_graph(&mut g, backbone, &bb, &bh, context)?;
        MemoryTensor::new(self.num_layers, self.memory_tokens, g.value(mem).clone())
    }

    pub fn m2p_forward(&self, mem: &MemoryTensor) -> Result<MemoryTensor> {
        let mut g = Graph::new();
        let bh = self.bind(&mut g, false);
        let input = g.constant(mem.data.clone());
        let out = self.m2p_graph(&mut g, &bh, input)?;
        MemoryTensor::new(mem.layers, mem.tokens, g.value(out).clone())
    }

    /// `f(context) → AdapterSet`; deterministic for fixed parameters.
    pub fn generate_lora(&self, backbone: &Backbone, context: &[u32]) -> Result<AdapterSet> {
        let mem = self.extract_memory(backbone, context)?;
        let out = self.m2p_forward(&mem)?;
        let layers = (0..self.num_layers)
            .map(|l| reshape_to_lora(&out.slice(l), &self.spec, self.cfg.r_gen, self.cfg.mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterSet {
            rank: self.cfg.r_gen,
            role: AdapterRole::Generated,
            layers,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_with_meta(dir, BTreeMap::new())
    }

    pub fn save_with_meta(&self, dir: &Path, mut meta: BTreeMap<String, String>) -> Result<()> {
        meta.insert("kind".into(), "hypernet".into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        meta.insert("backbone_layers".into(), self.num_layers.to_string());
        meta.insert("backbone_hidden".into(), self.hidden.to_string());
        let named: Vec<(String, &Matrix)> = self
            .params()
            .into_iter()
            .map(|(n, _, m)| (n, m.as_ref()))
            .collect();
        checkpoint::save(dir, &meta, &named)
    }

    /// Loads parameters saved for `backbone`'s architecture.
    pub fn load(dir: &Path, backbone: &Backbone) -> Result<(Self, BTreeMap<String, String>)> {
        let ck = Checkpoint::load(dir)?;
        let cfg: HypernetConfig = serde_json::from_str(
            ck.meta
                .get("config")
                .ok_or_else(|| Error::checkpoint(dir, "missing hypernet config"))?,
        )?;
        let mut hn = Self::init(cfg, backbone, 0)?;
        hn.load_tensors(&ck, dir)?;
        Ok((hn, ck.meta))
    }

    pub(crate) fn load_tensors(&mut self, ck: &Checkpoint, dir: &Path) -> Result<()> {
        let names: Vec<String> = self.params().into_iter().map(|(n, _, _)| n).collect();
        for (name, slot) in names.iter().zip(self.params_mut()) {
            let t = ck.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::checkpoint(
                    dir,
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = Arc::new(t.clone());
        }
        Ok(())
    }
}

fn check_capacity(spec: &LayerSpec, r: usize, m: usize, h: usize) -> Result<()> {
    let required = r * spec.d();
    if m * h < required {
        return Err(Error::InsufficientMemory {
            available: m * h,
            required,
            rank: r,
        });
    }
    Ok(())
}

/// Cuts one `M×H` memory slice into the adapters of one backbone layer.
pub fn reshape_to_lora(slice: &Matrix, spec: &LayerSpec, r: usize, mode: ReshapeMode) -> Result<Vec<LoraPair>> {
    check_capacity(spec, r, slice.rows(), slice.cols())?;
    let v = slice.data();
    let mut t = 0;
    let mut take = |rows: usize, cols: usize, transposed: bool| {
        let m = Matrix::from_vec(rows, cols, v[t..t + rows * cols].to_vec());
        t += rows * cols;
        if transposed {
            m.transpose()
        } else {
            m
        }
    };
    Ok(spec
        .targets
        .iter()
        .map(|s| {
            let a = if mode.a_transposed() {
                take(r, s.input, true)
            } else {
                take(s.input, r, false)
            };
            let b = if mode.b_transposed() {
                take(s.output, r, true)
            } else {
                take(r, s.output, false)
            };
            LoraPair { a, b, scale: 1.0 }
        })
        .collect())
}

/// The flat block of one target's `A` or `B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Block {
    pub target: Target,
    pub is_a: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CouplingMask {
    /// Owning block of each memory token; `None` for tokens mostly in the unused tail.
    pub assignment: Vec<Option<Block>>,
    /// Row-major `M×M`.
    pub mask: Vec<bool>,
}

/// Flat ranges `[start, end)` of each `A`/`B` block inside one layer slice.
pub fn block_ranges(spec: &LayerSpec, r: usize) -> Vec<(Block, usize, usize)> {
    let mut out = Vec::new();
    let mut t = 0;
    for s in &spec.targets {
        out.push((Block { target: s.target, is_a: true }, t, t + s.input * r));
        t += s.input * r;
        out.push((Block { target: s.target, is_a: false }, t, t + r * s.output));
        t += r * s.output;
    }
    out
}

/// Mask for coupled row attention: token `p` may attend to token `q` iff their
/// blocks are the `A` and `B` of the same target. Each token owns `H`
/// consecutive values and is assigned to the block holding most of them
/// (earliest block on ties).
pub fn build_coupling_mask(spec: &LayerSpec, r: usize, m: usize, h: usize) -> Result<CouplingMask> {
    check_capacity(spec, r, m, h)?;
    let ranges = block_ranges(spec, r);
    let assignment: Vec<Option<Block>> = (0..m)
        .map(|p| {
            let (lo, hi) = (p * h, (p + 1) * h);
            let mut best: Option<(Block, usize)> = None;
            for &(block, s, e) in &ranges {
                let overlap = hi.min(e).saturating_sub(lo.max(s));
                if overlap > 0 && best.is_none_or(|(_, o)| overlap > o) {
                    best = Some((block, overlap));
                }
            }
            let used = hi.min(r * spec.d()).saturating_sub(lo);
            best.filter(|(_, o)| *o >= h - used).map(|(b, _)| b)
        })
        .collect();
    let mut mask = vec![false; m * m];
    for p in 0..m {
        for q in 0..m {
            if let (Some(a), Some(b)) = (assignment[p], assignment[q]) {
                mask[p * m + q] = a.target == b.target && a.is_a != b.is_a;
            }
        }
    }
    Ok(CouplingMask { assignment, mask })
}
