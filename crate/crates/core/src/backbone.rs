//! Toy decoder-only language model.
//!
//! Pre-norm blocks with grouped-query attention (key/value width `H/4`), rotary
//! positions and a SwiGLU MLP of inner width `3H`. Every linear projection is a
//! LoRA injection point: `y = xW + scale·(xA)B`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnLayout, AttnMask, Graph, Var};
use crate::tensor::Matrix;
use crate::tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub vocab: usize,
    pub max_pos: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            kv_heads: 1,
            vocab: 512,
            max_pos: 512,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim()
    }

    pub fn mlp_inner(&self) -> usize {
        3 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.kv_heads == 0 {
            return fail("backbone dimensions must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail("rotary encoding needs an even head dimension".into());
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return fail("heads must be a multiple of kv_heads".into());
        }
        if !self.hidden.is_multiple_of(4) || self.kv_width() != self.hidden / 4 {
            return fail(format!(
                "key/value width must be exactly hidden/4 ({}), got {}",
                self.hidden / 4,
                self.kv_width()
            ));
        }
        if self.vocab < tokenizer::RESERVED_END as usize {
            return fail(format!(
                "vocab {} smaller than the tokenizer's {} ids",
                self.vocab,
                tokenizer::RESERVED_END
            ));
        }
        Ok(())
    }
}

/// The seven linear projections of one block, in adapter order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Target {
    pub const ALL: [Target; 7] = [
        Target::Q,
        Target::K,
        Target::V,
        Target::O,
        Target::Gate,
        Target::Up,
        Target::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
            Target::Gate => "gate",
            Target::Up => "up",
            Target::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TargetSpec {
    pub target: Target,
    pub input: usize,
    pub output: usize,
}

/// Ordered LoRA targets of one block. `D = Σ (I + O)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerSpec {
    pub targets: Vec<TargetSpec>,
}

impl LayerSpec {
    pub fn for_config(cfg: &BackboneConfig) -> Self {
        Self::for_hidden(cfg.hidden)
    }

    /// The GQA/SwiGLU layout: q `H→H`, k/v `H→H/4`, o `H→H`, gate/up `H→3H`,
    /// down `3H→H`.
    pub fn for_hidden(h: usize) -> Self {
        let kv = h / 4;
        let inner = 3 * h;
        let dims = [(h, h), (h, kv), (h, kv), (h, h), (h, inner), (h, inner), (inner, h)];
        Self {
            targets: Target::ALL
                .iter()
                .zip(dims)
                .map(|(&target, (input, output))| TargetSpec {
                    target,
                    input,
                    output,
                })
                .collect(),
        }
    }

    /// Sum of input and output widths over all targets.
    pub fn d(&self) -> usize {
        self.targets.iter().map(|t| t.input + t.output).sum()
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub attn_norm: Arc<Matrix>,
    pub mlp_norm: Arc<Matrix>,
    /// Indexed by [`Target::index`]; each is `I×O`.
    pub proj: Vec<Arc<Matrix>>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed: Arc<Matrix>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Arc<Matrix>,
    pub lm_head: Arc<Matrix>,
}

/// One LoRA pair as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct BoundLora {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Adapters for every `(layer, target)` as graph nodes.
#[derive(Clone, Debug)]
pub struct BoundAdapters {
    pub layers: Vec<Vec<BoundLora>>,
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub mlp_norm: Var,
    pub proj: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub embed: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl BoundBackbone {
    /// Leaves in the same order as [`Backbone::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.push(l.attn_norm);
            out.push(l.mlp_norm);
            out.extend(&l.proj);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }
}

/// Output of a forward pass through the blocks.
pub struct Hidden {
    /// Residual stream after the last block (before the final norm).
    pub last: Var,
    /// `h_i` for `i = 1..L` when capture was requested.
    pub per_layer: Vec<Var>,
}

impl Backbone {
    pub fn init(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let spec = LayerSpec::for_config(&cfg);
        let out_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let embed = Matrix::randn(cfg.vocab, h, 1.0, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                attn_norm: Arc::new(Matrix::filled(1, h, 1.0)),
                mlp_norm: Arc::new(Matrix::filled(1, h, 1.0)),
                proj: spec
                    .targets
                    .iter()
                    .map(|t| {
                        let mut std = 1.0 / (t.input as f64).sqrt();
                        if matches!(t.target, Target::O | Target::Down) {
                            std *= out_scale;
                        }
                        Arc::new(Matrix::randn(t.input, t.output, std, &mut rng))
                    })
                    .collect(),
            })
            .collect();
        let lm_head = Matrix::randn(h, cfg.vocab, 1.0 / (h as f64).sqrt(), &mut rng);
        Ok(Self {
            embed: Arc::new(embed),
            layers,
            final_norm: Arc::new(Matrix::filled(1, h, 1.0)),
            lm_head: Arc::new(lm_head),
            cfg,
        })
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("kind".to_string(), "backbone".to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.cfg)?);
        let named: Vec<(String, &Matrix)> =
            self.params().into_iter().map(|(n, m)| (n, m.as_ref())).collect();
        crate::checkpoint::save(dir, &meta, &named)?;
        std::fs::write(dir.join("tokenizer.txt"), tokenizer::manifest())?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let ck = crate::checkpoint::Checkpoint::load(dir)?;
        let cfg: BackboneConfig = serde_json::from_str(
            ck.meta
                .get("config")
                .ok_or_else(|| Error::checkpoint(dir, "missing backbone config"))?,
        )?;
        let mut bb = Self::init(cfg, 0)?;
        let names: Vec<String> = bb.params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(bb.params_mut()) {
            let t = ck.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::checkpoint(
                    dir,
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = Arc::new(t.clone());
        }
        Ok(bb)
    }

    pub fn layer_spec(&self) -> LayerSpec {
        LayerSpec::for_config(&self.cfg)
    }

    /// Named tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Arc<Matrix>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            for t in Target::ALL {
                out.push((format!("layers.{i}.{}", t.name()), &l.proj[t.index()]));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arc<Matrix>> {
        let mut out = vec![&mut self.embed];
        for l in self.layers.iter_mut() {
            out.push(&mut l.attn_norm);
            out.push(&mut l.mlp_norm);
            out.extend(l.proj.iter_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBackbone {
        BoundBackbone {
            embed: g.param(self.embed.clone(), trainable),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    attn_norm: g.param(l.attn_norm.clone(), trainable),
                    mlp_norm: g.param(l.mlp_norm.clone(), trainable),
                    proj: l.proj.iter().map(|p| g.param(p.clone(), trainable)).collect(),
                })
                .collect(),
            final_norm: g.param(self.final_norm.clone(), trainable),
            lm_head: g.param(self.lm_head.clone(), trainable),
        }
    }

    pub fn check_len(&self, len: usize, hint: &'static str) -> Result<()> {
        if len > self.cfg.max_pos {
            return Err(Error::SequenceOverflow {
                len,
                max: self.cfg.max_pos,
                hint,
            });
        }
        Ok(())
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab
            )));
        }
        Ok(())
    }

    pub fn embed_tokens(&self, g: &mut Graph, bb: &BoundBackbone, tokens: &[u32]) -> Var {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        g.gather(bb.embed, &ids)
    }

    fn linear(
        g: &mut Graph,
        x: Var,
        w: Var,
        lora: Option<&BoundLora>,
    ) -> Var {
        let base = g.matmul(x, w);
        match lora {
            None => base,
            Some(l) => {
                let xa = g.matmul(x, l.a);
                let xab = g.matmul(xa, l.b);
                let scaled = if l.scale == 1.0 { xab } else { g.scale(xab, l.scale) };
                g.add(base, scaled)
            }
        }
    }

    /// Runs the blocks over already-embedded inputs at positions `0..n`.
    pub fn forward_hidden(
        &self,
        g: &mut Graph,
        bb: &BoundBackbone,
        input: Var,
        adapters: Option<&BoundAdapters>,
        capture: bool,
    ) -> Result<Hidden> {
        let n = g.shape(input).0;
        self.check_len(n, "")?;
        if let Some(a) = adapters {
            if a.layers.len() != self.cfg.layers {
                return Err(Error::Shape {
                    target: "adapters".into(),
                    detail: format!("{} layers vs backbone {}", a.layers.len(), self.cfg.layers),
                });
            }
        }
        let positions: Vec<usize> = (0..n).collect();
        let layout = Arc::new(AttnLayout::sequence(n, AttnMask::Causal));
        let hd = self.cfg.head_dim();
        let eps = self.cfg.norm_eps;
        let mut x = input;
        let mut per_layer = Vec::new();
        for (li, layer) in bb.layers.iter().enumerate() {
            let lora = |t: Target| adapters.map(|a| &a.layers[li][t.index()]);
            let hn = g.rms_norm(x, layer.attn_norm, eps);
            let q = Self::linear(g, hn, layer.proj[0], lora(Target::Q));
            let k = Self::linear(g, hn, layer.proj[1], lora(Target::K));
            let v = Self::linear(g, hn, layer.proj[2], lora(Target::V));
            let q = g.rope(q, &positions, hd, self.cfg.rope_theta);
            let k = g.rope(k, &positions, hd, self.cfg.rope_theta);
            let att = g.attention(q, k, v, self.cfg.heads, self.cfg.kv_heads, layout.clone());
            let o = Self::linear(g, att, layer.proj[3], lora(Target::O));
            x = g.add(x, o);
            let hn = g.rms_norm(x, layer.mlp_norm, eps);
            let gate = Self::linear(g, hn, layer.proj[4], lora(Target::Gate));
            let up = Self::linear(g, hn, layer.proj[5], lora(Target::Up));
            let act = g.silu(gate);
            let act = g.mul(act, up);
            let down = Self::linear(g, act, layer.proj[6], lora(Target::Down));
            x = g.add(x, down);
            if capture {
                per_layer.push(x);
            }
        }
        Ok(Hidden { last: x, per_layer })
    }

    /// Final norm and vocabulary projection of the given hidden rows.
    pub fn logits(&self, g: &mut Graph, bb: &BoundBackbone, hidden: Var) -> Var {
        let hn = g.rms_norm(hidden, bb.final_norm, self.cfg.norm_eps);
        g.matmul(hn, bb.lm_head)
    }

    /// Token-level forward pass. Returns `seq×V` logits and, on request, the
    /// per-layer hidden states.
    pub fn forward_lm(
        &self,
        tokens: &[u32],
        adapters: Option<&crate::adapters::AdapterSet>,
        capture_hidden: bool,
    ) -> Result<LmOutput> {
        self.check_len(tokens.len(), "")?;
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        let bb = self.bind(&mut g, false);
        let bound = adapters.map(|a| a.bind(&mut g, false)).transpose()?;
        let x = self.embed_tokens(&mut g, &bb, tokens);
        let hidden = self.forward_hidden(&mut g, &bb, x, bound.as_ref(), capture_hidden)?;
        let logits = self.logits(&mut g, &bb, hidden.last);
        Ok(LmOutput {
            logits: g.value(logits).clone(),
            hidden: hidden
                .per_layer
                .iter()
                .map(|v| g.value(*v).clone())
                .collect(),
        })
    }

    /// Logits of the final position only.
    pub fn next_token_logits(
        &self,
        tokens: &[u32],
        adapters: Option<&crate::adapters::AdapterSet>,
    ) -> Result<Vec<f64>> {
        self.check_len(tokens.len(), "")?;
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        let bb = self.bind(&mut g, false);
        let bound = adapters.map(|a| a.bind(&mut g, false)).transpose()?;
        let x = self.embed_tokens(&mut g, &bb, tokens);
        let hidden = self.forward_hidden(&mut g, &bb, x, bound.as_ref(), false)?;
        let last = g.slice_rows(hidden.last, tokens.len() - 1, 1);
        let logits = self.logits(&mut g, &bb, last);
        Ok(g.value(logits).data().to_vec())
    }

    /// Greedy decoding. Returns only the continuation, excluding the stop id.
    pub fn generate(
        &self,
        prompt: &[u32],
        adapters: Option<&crate::adapters::AdapterSet>,
        max_new: usize,
        stop: &[u32],
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Invalid("generation prompt must be non-empty".into()));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.cfg.max_pos {
                break;
            }
            let logits = self.next_token_logits(&seq, adapters)?;
            let next = argmax(&logits) as u32;
            if stop.contains(&next) {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

pub struct LmOutput {
    pub logits: Matrix,
    pub hidden: Vec<Matrix>,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_layer_spec_sums_to_18_5_h() {
        let spec = LayerSpec::for_hidden(64);
        assert_eq!(spec.d(), 1184);
        for h in [4, 8, 16, 64, 128, 4096] {
            assert_eq!(LayerSpec::for_hidden(h).d() * 2, 37 * h);
        }
        assert_eq!(LayerSpec::for_hidden(4096).d(), 75_776);
    }

    #[test]
    fn config_rejects_bad_kv_width() {
        let cfg = BackboneConfig {
            kv_heads: 2,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(BackboneConfig::default().validate().is_ok());
        assert_eq!(BackboneConfig::default().kv_width(), 16);
        assert_eq!(BackboneConfig::default().mlp_inner(), 192);
    }

    fn tiny() -> Backbone {
        Backbone::init(
            BackboneConfig {
                layers: 2,
                hidden: 16,
                heads: 4,
                kv_heads: 1,
                vocab: 300,
                max_pos: 32,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn logits_shape_and_hidden_capture() {
        let bb = tiny();
        let out = bb.forward_lm(&[1, 2, 3, 4, 5], None, true).unwrap();
        assert_eq!(out.logits.shape(), (5, 300));
        assert_eq!(out.hidden.len(), 2);
        assert!(out.hidden.iter().all(|h| h.shape() == (5, 16)));
    }

    #[test]
    fn overflow_is_an_error() {
        let bb = tiny();
        let tokens = vec![1u32; 33];
        assert!(matches!(
            bb.forward_lm(&tokens, None, false),
            Err(Error::SequenceOverflow { len: 33, max: 32, .. })
        ));
    }

    #[test]
    fn appending_tokens_leaves_prefix_logits_unchanged() {
        let bb = tiny();
        let short = bb.forward_lm(&[10, 20, 30, 40], None, false).unwrap();
        let long = bb.forward_lm(&[10, 20, 30, 40, 7, 8, 9], None, false).unwrap();
        let prefix = long.logits.slice_rows(0, 4);
        assert!(prefix.max_abs_diff(&short.logits) <= 1e-6);
    }

    #[test]
    fn suffix_perturbation_only_affects_later_positions() {
        let bb = tiny();
        let a = bb.forward_lm(&[5, 6, 7, 8, 9, 10], None, false).unwrap();
        let b = bb.forward_lm(&[5, 6, 7, 99, 9, 10], None, false).unwrap();
        assert!(a.logits.slice_rows(0, 3).max_abs_diff(&b.logits.slice_rows(0, 3)) <= 1e-12);
        assert!(a.logits.slice_rows(3, 3).max_abs_diff(&b.logits.slice_rows(3, 3)) > 1e-6);
    }

    #[test]
    fn save_load_round_trip() {
        let bb = tiny();
        let dir = tempfile::tempdir().unwrap();
        bb.save(dir.path()).unwrap();
        let back = Backbone::load(dir.path()).unwrap();
        assert_eq!(back.cfg, bb.cfg);
        for ((_, a), (_, b)) in back.params().iter().zip(bb.params()) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
    }

    #[test]
    fn generation_edge_cases() {
        let bb = tiny();
        assert!(bb.generate(&[1, 2], None, 0, &[]).unwrap().is_empty());
        assert!(bb.generate(&[], None, 3, &[]).is_err());
        let a = bb.generate(&[1, 2, 3], None, 6, &[]).unwrap();
        let b = bb.generate(&[1, 2, 3], None, 6, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }
}
