//! LoRA adapters shared by the Meta-LoRA and generated adapters.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BoundAdapters, BoundLora, LayerSpec, Target};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Matrix;

/// `ΔW = scale · A·B` with `A: I×r`, `B: r×O`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

impl LoraPair {
    pub fn new(a: Matrix, b: Matrix, scale: f64) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::Shape {
                target: "lora".into(),
                detail: format!("A is {:?} but B is {:?}", a.shape(), b.shape()),
            });
        }
        if !a.all_finite() || !b.all_finite() || !scale.is_finite() {
            return Err(Error::Invalid("LoRA entries must be finite".into()));
        }
        Ok(Self { a, b, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b).scale(self.scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterRole {
    Meta,
    Generated,
    Sft,
}

impl AdapterRole {
    fn as_str(self) -> &'static str {
        match self {
            AdapterRole::Meta => "meta",
            AdapterRole::Generated => "generated",
            AdapterRole::Sft => "sft",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "meta" => Some(AdapterRole::Meta),
            "generated" => Some(AdapterRole::Generated),
            "sft" => Some(AdapterRole::Sft),
            _ => None,
        }
    }
}

/// One [`LoraPair`] per `(layer, target)`, uniform rank.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub role: AdapterRole,
    /// `layers[l][t]` follows the [`LayerSpec`] target order.
    pub layers: Vec<Vec<LoraPair>>,
}

impl AdapterSet {
    /// Checks rank uniformity and per-target dimensions against `spec`.
    pub fn validate(&self, spec: &LayerSpec, num_layers: usize) -> Result<()> {
        if self.layers.len() != num_layers {
            return Err(Error::Shape {
                target: "adapter set".into(),
                detail: format!("{} layers, expected {num_layers}", self.layers.len()),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.len() != spec.targets.len() {
                return Err(Error::Shape {
                    target: format!("layer {l}"),
                    detail: format!("{} targets, expected {}", layer.len(), spec.targets.len()),
                });
            }
            for (pair, t) in layer.iter().zip(&spec.targets) {
                let ok = pair.a.shape() == (t.input, self.rank)
                    && pair.b.shape() == (self.rank, t.output);
                if !ok {
                    return Err(Error::Shape {
                        target: format!("layers.{l}.{}", t.target.name()),
                        detail: format!(
                            "A {:?} B {:?}, expected A ({}, {}) B ({}, {})",
                            pair.a.shape(),
                            pair.b.shape(),
                            t.input,
                            self.rank,
                            self.rank,
                            t.output
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, layer: usize, target: Target) -> &LoraPair {
        &self.layers[layer][target.index()]
    }

    pub fn target_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundAdapters> {
        Ok(BoundAdapters {
            layers: self
                .layers
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|p| BoundLora {
                            a: g.param(Arc::new(p.a.clone()), trainable),
                            b: g.param(Arc::new(p.b.clone()), trainable),
                            scale: p.scale,
                        })
                        .collect()
                })
                .collect(),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (t, pair) in Target::ALL.iter().zip(layer) {
                out.push((format!("layers.{l}.{}.a", t.name()), &pair.a));
                out.push((format!("layers.{l}.{}.b", t.name()), &pair.b));
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "adapter_set".to_string());
        meta.insert("rank".to_string(), self.rank.to_string());
        meta.insert("role".to_string(), self.role.as_str().to_string());
        meta.insert("layers".to_string(), self.layers.len().to_string());
        // Per-pair scales are uniform within a set.
        let scale = self.layers.first().and_then(|l| l.first()).map_or(1.0, |p| p.scale);
        meta.insert("scale".to_string(), format!("{:?}", scale));
        checkpoint::save(dir, &meta, &self.named_tensors())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        Self::from_checkpoint(&ck, dir)
    }

    pub(crate) fn from_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<Self> {
        let bad = |m: &str| Error::checkpoint(dir, m.to_string());
        let rank: usize = ck.meta_parse("rank").ok_or_else(|| bad("missing rank"))?;
        let layers: usize = ck.meta_parse("layers").ok_or_else(|| bad("missing layers"))?;
        let scale: f64 = ck.meta_parse("scale").ok_or_else(|| bad("missing scale"))?;
        let role = ck
            .meta
            .get("role")
            .and_then(|r| AdapterRole::parse(r))
            .ok_or_else(|| bad("missing role"))?;
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut layer = Vec::with_capacity(Target::ALL.len());
            for t in Target::ALL {
                let a = ck.tensor(&format!("layers.{l}.{}.a", t.name()))?.clone();
                let b = ck.tensor(&format!("layers.{l}.{}.b", t.name()))?.clone();
                layer.push(LoraPair::new(a, b, scale)?);
            }
            out.push(layer);
        }
        Ok(Self {
            rank,
            role,
            layers: out,
        })
    }
}

/// Fresh Meta-LoRA: `A ~ N(0, std²)`, `B = 0`, `scale = 1/r`.
pub fn init_meta_lora<R: Rng + ?Sized>(
    spec: &LayerSpec,
    num_layers: usize,
    rank: usize,
    std: f64,
    rng: &mut R,
) -> Result<AdapterSet> {
    init_lora(spec, num_layers, rank, std, 1.0 / rank as f64, AdapterRole::Meta, rng)
}

/// Gaussian `A`, zero `B`; used for Meta-LoRA and the fine-tuning baseline.
pub fn init_lora<R: Rng + ?Sized>(
    spec: &LayerSpec,
    num_layers: usize,
    rank: usize,
    std: f64,
    scale: f64,
    role: AdapterRole,
    rng: &mut R,
) -> Result<AdapterSet> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    let layers = (0..num_layers)
        .map(|_| {
            spec.targets
                .iter()
                .map(|t| LoraPair {
                    a: Matrix::randn(t.input, rank, std, rng),
                    b: Matrix::zeros(rank, t.output),
                    scale,
                })
                .collect()
        })
        .collect();
    Ok(AdapterSet { rank, role, layers })
}

/// `W' = W + scale·A·B` for every target; the input backbone is left untouched.
pub fn merge_lora(weights: &Backbone, adapters: &AdapterSet) -> Result<Backbone> {
    if adapters.layers.len() != weights.layers.len() {
        return Err(Error::Shape {
            target: "adapter set".into(),
            detail: format!(
                "{} adapter layers vs {} backbone layers",
                adapters.layers.len(),
                weights.layers.len()
            ),
        });
    }
    let mut merged = weights.clone();
    for (l, (layer, pairs)) in merged.layers.iter_mut().zip(&adapters.layers).enumerate() {
        for (t, pair) in Target::ALL.iter().zip(pairs) {
            let w = &layer.proj[t.index()];
            let expected = (w.rows(), w.cols());
            if pair.a.rows() != expected.0 || pair.b.cols() != expected.1 || pair.a.cols() != pair.b.rows() {
                return Err(Error::Shape {
                    target: format!("layers.{l}.{}", t.name()),
                    detail: format!(
                        "weight {:?} vs A {:?} B {:?}",
                        expected,
                        pair.a.shape(),
                        pair.b.shape()
                    ),
                });
            }
            layer.proj[t.index()] = Arc::new(w.add(&pair.delta()));
        }
    }
    Ok(merged)
}

/// LoRA parameter count `r·D` of one layer.
pub fn lora_params_per_layer(spec: &LayerSpec, rank: usize) -> usize {
    rank * spec.d()
}

/// LoRA parameter count over all `layers`.
pub fn total_lora_params(spec: &LayerSpec, rank: usize, layers: usize) -> usize {
    lora_params_per_layer(spec, rank) * layers
}
