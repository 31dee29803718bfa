//! Analytic FLOPs and peak-memory accounting.
//!
//! Conventions: one multiply-accumulate is two FLOPs; a dense `d_in → d_out`
//! map over `n` tokens costs `2·n·d_in·d_out`. The backbone uses GQA with
//! key/value width `H/4` and a SwiGLU MLP of width `3H`, giving `23NH²`
//! projection FLOPs per layer. The hypernetwork transformer uses full-width
//! key/value projections and an MLP of width `2H`, giving `20NH²`.
//!
//! All quantities are exact integers (`u128`).

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Memory tokens for rank `r` when `D = 18.5·H`: `⌈37r/2⌉`.
pub fn memory_tokens_for_rank(r: u128) -> u128 {
    (37 * r).div_ceil(2)
}

/// Backbone forward over `n` tokens without a KV cache:
/// `L(23NH² + 4N²H) + 2HV`. The vocabulary head runs on the last position only.
pub fn llm_flops_no_kv(n: u128, h: u128, l: u128, v: u128) -> u128 {
    l * (23 * n * h * h + 4 * n * n * h) + 2 * h * v
}

/// One decoding step attending to `n` cached tokens: `L(23H² + 4NH) + 2HV`.
pub fn llm_flops_kv_step(n: u128, h: u128, l: u128, v: u128) -> u128 {
    l * (23 * h * h + 4 * n * h) + 2 * h * v
}

/// Hypernetwork-style transformer blocks over `n` tokens: `L(20NH² + 4N²H)`.
pub fn m2p_block_flops(n: u128, h: u128, layers: u128) -> u128 {
    layers * (20 * n * h * h + 4 * n * n * h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AmortizedFlops {
    /// Backbone pass over context plus memory tokens.
    pub memory_states: u128,
    /// Alternating column/row transformer.
    pub m2p: u128,
    pub total: u128,
}

/// One-off cost of generating adapters for a `c`-token context, with
/// `M = ⌈18.5 r⌉` memory tokens.
///
/// Memory extraction: `L(23(C+M)H² + 4(C+M)²H)`.
/// M2P: `½L'·M·(20LH² + 4L²H) + ½L'·L·(20MH² + 4M²H)`, i.e. half the layers
/// attend along columns (`M` groups of `L`) and half along rows (`L` groups
/// of `M`).
pub fn shine_amortized_flops(c: u128, r: u128, h: u128, l: u128, l_prime: u128) -> AmortizedFlops {
    shine_amortized_flops_with_memory(c, memory_tokens_for_rank(r), h, l, l_prime)
}

pub fn shine_amortized_flops_with_memory(
    c: u128,
    m: u128,
    h: u128,
    l: u128,
    l_prime: u128,
) -> AmortizedFlops {
    let memory_states = l * (23 * (c + m) * h * h + 4 * (c + m) * (c + m) * h);
    // Both products are even, so halving is exact.
    let column = l_prime * m * (20 * l * h * h + 4 * l * l * h);
    let row = l_prime * l * (20 * m * h * h + 4 * m * m * h);
    let m2p = column / 2 + row / 2;
    AmortizedFlops {
        memory_states,
        m2p,
        total: memory_states + m2p,
    }
}

/// Fine-tuning for `t` iterations over a `c`-token context, counting backward
/// as twice the forward: `3T[L(23CH² + 4C²H) + 2CHV]`.
pub fn sft_amortized_flops(c: u128, t: u128, h: u128, l: u128, v: u128) -> u128 {
    3 * t * (l * (23 * c * h * h + 4 * c * c * h) + 2 * c * h * v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    InContext,
    Sft,
    /// Context compressed into generated adapters.
    #[serde(alias = "shine")]
    Hypernet,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Naive, Method::InContext, Method::Sft, Method::Hypernet];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::InContext => "in_context",
            Method::Sft => "sft",
            Method::Hypernet => "hypernet",
        }
    }

    /// Whether the raw context is part of the generation input.
    pub fn sees_context(self) -> bool {
        matches!(self, Method::InContext)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "naive" => Ok(Method::Naive),
            "in_context" | "incontext" | "icl" => Ok(Method::InContext),
            "sft" => Ok(Method::Sft),
            "hypernet" | "shine" => Ok(Method::Hypernet),
            other => Err(Error::Invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Effective sequence length at generation time.
pub fn generation_length(method: Method, i: u128, c: u128) -> u128 {
    if method.sees_context() {
        i + c
    } else {
        i
    }
}

/// Per-step generation cost; only in-context pays for the extra `C` tokens.
pub fn generation_flops(method: Method, i: u128, c: u128, kv: bool, h: u128, l: u128, v: u128) -> u128 {
    let n = generation_length(method, i, c);
    if kv {
        llm_flops_kv_step(n, h, l, v)
    } else {
        llm_flops_no_kv(n, h, l, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryRegime {
    /// Flash-style attention: `4LNH`.
    Efficient,
    /// Materialised attention matrix: `4LNH + LN²`.
    StandardAttention,
    /// Decoding with a KV cache of width `H/4` per K and V: `½LNH`.
    KvCache,
}

/// Peak extra memory in scalars. The KV-cache figure rounds up when `LNH` is
/// odd, which cannot happen for `H` divisible by 4.
pub fn peak_memory(n: u128, h: u128, l: u128, regime: MemoryRegime) -> u128 {
    match regime {
        MemoryRegime::Efficient => 4 * l * n * h,
        MemoryRegime::StandardAttention => 4 * l * n * h + l * n * n,
        MemoryRegime::KvCache => (l * n * h).div_ceil(2),
    }
}

/// Attention-matmul FLOPs of one column layer plus one row layer over an
/// `L×M×H` tensor: `4ML²H + 4LM²H`.
pub fn axial_attention_pair_flops(l: u128, m: u128, h: u128) -> u128 {
    4 * m * l * l * h + 4 * l * m * m * h
}

/// Attention-matmul FLOPs of two full-attention layers over all `L·M` tokens.
pub fn full_attention_pair_flops(l: u128, m: u128, h: u128) -> u128 {
    2 * 4 * (l * m) * (l * m) * h
}

/// Axial-to-full attention cost as an exact fraction `(L+M) / (2LM)`.
pub fn axial_ratio(l: u128, m: u128) -> (u128, u128) {
    (l + m, 2 * l * m)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInputs {
    pub h: u128,
    pub l: u128,
    pub v: u128,
    /// Hypernetwork depth.
    pub l_prime: u128,
    /// Generated LoRA rank.
    pub r: u128,
    /// Memory tokens; must equal `⌈18.5 r⌉`.
    pub m: u128,
    /// Context tokens.
    pub c: u128,
    /// Generation input tokens (prompt, history and question).
    pub i: u128,
    /// Fine-tuning iterations.
    pub t: u128,
}

impl CostInputs {
    pub fn new(h: u128, l: u128, v: u128, l_prime: u128, r: u128, c: u128, i: u128, t: u128) -> Self {
        Self {
            h,
            l,
            v,
            l_prime,
            r,
            m: memory_tokens_for_rank(r),
            c,
            i,
            t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("H", self.h),
            ("L", self.l),
            ("V", self.v),
            ("L'", self.l_prime),
            ("r", self.r),
            ("I", self.i),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be positive")));
        }
        let expected = memory_tokens_for_rank(self.r);
        if self.m != expected {
            return Err(Error::Invalid(format!(
                "memory length {} inconsistent with rank {} (expected {expected})",
                self.m, self.r
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MethodCost {
    pub method: Method,
    pub amortizable_flops: u128,
    pub generation_flops_no_kv: u128,
    pub generation_flops_kv: u128,
    pub peak_memory_efficient: u128,
    pub peak_memory_standard: u128,
    pub peak_memory_kv_cache: u128,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub inputs: CostInputs,
    pub hypernet_amortized: AmortizedFlops,
    pub axial_attention_pair_flops: u128,
    pub full_attention_pair_flops: u128,
    pub methods: Vec<MethodCost>,
}

impl CostReport {
    pub fn compute(inputs: &CostInputs) -> Result<Self> {
        inputs.validate()?;
        let CostInputs {
            h, l, v, l_prime, m, c, i, t, ..
        } = *inputs;
        let hyper = shine_amortized_flops_with_memory(c, m, h, l, l_prime);
        let methods = Method::ALL
            .iter()
            .map(|&method| {
                let n = generation_length(method, i, c);
                MethodCost {
                    method,
                    amortizable_flops: match method {
                        Method::Naive | Method::InContext => 0,
                        Method::Sft => sft_amortized_flops(c, t, h, l, v),
                        Method::Hypernet => hyper.total,
                    },
                    generation_flops_no_kv: generation_flops(method, i, c, false, h, l, v),
                    generation_flops_kv: generation_flops(method, i, c, true, h, l, v),
                    peak_memory_efficient: peak_memory(n, h, l, MemoryRegime::Efficient),
                    peak_memory_standard: peak_memory(n, h, l, MemoryRegime::StandardAttention),
                    peak_memory_kv_cache: peak_memory(n, h, l, MemoryRegime::KvCache),
                }
            })
            .collect();
        Ok(Self {
            inputs: inputs.clone(),
            hypernet_amortized: hyper,
            axial_attention_pair_flops: axial_attention_pair_flops(l, m, h),
            full_attention_pair_flops: full_attention_pair_flops(l, m, h),
            methods,
        })
    }

    pub fn method(&self, method: Method) -> &MethodCost {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .expect("report covers every method")
    }

    pub fn to_table(&self) -> String {
        let p = &self.inputs;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "H={} L={} V={} L'={} r={} M={} C={} I={} T={}",
            p.h, p.l, p.v, p.l_prime, p.r, p.m, p.c, p.i, p.t
        );
        let _ = writeln!(
            s,
            "hypernet amortized: memory states {} + m2p {} = {}",
            self.hypernet_amortized.memory_states,
            self.hypernet_amortized.m2p,
            self.hypernet_amortized.total
        );
        let (num, den) = axial_ratio(p.l, p.m);
        let _ = writeln!(
            s,
            "axial vs full attention matmuls per layer pair: {} vs {} (ratio {}/{} = {:.4})",
            self.axial_attention_pair_flops,
            self.full_attention_pair_flops,
            num,
            den,
            num as f64 / den as f64
        );
        let _ = writeln!(
            s,
            "{:<11} {:>18} {:>18} {:>14} {:>14} {:>14} {:>12}",
            "method", "amortizable", "gen (no kv)", "gen (kv)", "mem eff", "mem std", "mem kv"
        );
        for m in &self.methods {
            let _ = writeln!(
                s,
                "{:<11} {:>18} {:>18} {:>14} {:>14} {:>14} {:>12}",
                m.method.name(),
                m.amortizable_flops,
                m.generation_flops_no_kv,
                m.generation_flops_kv,
                m.peak_memory_efficient,
                m.peak_memory_standard,
                m.peak_memory_kv_cache
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backbone_formulas() {
        assert_eq!(llm_flops_no_kv(10, 64, 4, 256), 3_903_488);
        assert_eq!(llm_flops_no_kv(0, 64, 4, 256), 32_768);
        assert_eq!(llm_flops_kv_step(10, 64, 4, 256), 419_840);
        let block = |n| llm_flops_no_kv(n, 64, 4, 256) - 32_768;
        assert!(block(20) > 2 * block(10));
        for n in 1..50 {
            assert_eq!(llm_flops_kv_step(n + 1, 64, 4, 256) - llm_flops_kv_step(n, 64, 4, 256), 4 * 4 * 64);
        }
        for n in 2..=100 {
            assert!(llm_flops_kv_step(n, 64, 4, 256) < llm_flops_no_kv(n, 64, 4, 256));
        }
    }

    #[test]
    fn amortized_components() {
        let a = shine_amortized_flops(50, 2, 64, 4, 2);
        assert_eq!(a.memory_states, 40_535_040);
        assert_eq!(a.m2p, 25_801_728);
        assert_eq!(a.total, 66_336_768);
        assert!(shine_amortized_flops(0, 2, 64, 4, 2).total > 0);
        assert_eq!(sft_amortized_flops(50, 10, 64, 4, 256), 691_200_000);
        assert_eq!(sft_amortized_flops(50, 0, 64, 4, 256), 0);
    }

    #[test]
    fn component_sum_matches_collapsed_form_only_when_depths_agree() {
        // LH(23(C+M)H + 4(C+M)² + 20ML'H + 2LL'M + 2L'M²) is the exact sum.
        let exact = |c: u128, m: u128, h: u128, l: u128, lp: u128| {
            l * h * (23 * (c + m) * h + 4 * (c + m) * (c + m) + 20 * m * lp * h + 2 * l * lp * m + 2 * lp * m * m)
        };
        let collapsed_as_printed = |c: u128, m: u128, h: u128, l: u128, lp: u128| {
            l * h * (23 * (c + m) * h + 4 * (c + m) * (c + m) + 20 * m * lp * h + 2 * l * lp * m + 2 * l * m * m)
        };
        for (c, r, h, l, lp) in [(50, 2, 64, 4, 2), (1150, 8, 4096, 36, 4), (7, 1, 8, 3, 3)] {
            let m = memory_tokens_for_rank(r);
            let sum = shine_amortized_flops(c, r, h, l, lp).total;
            assert_eq!(sum, exact(c, m, h, l, lp));
            assert_eq!(sum == collapsed_as_printed(c, m, h, l, lp), l == lp);
        }
    }

    #[test]
    fn generation_dispatch() {
        for kv in [false, true] {
            for c in [1, 5, 50] {
                let naive = generation_flops(Method::Naive, 10, c, kv, 64, 4, 256);
                assert_eq!(generation_flops(Method::Hypernet, 10, c, kv, 64, 4, 256), naive);
                assert_eq!(generation_flops(Method::Sft, 10, c, kv, 64, 4, 256), naive);
                assert!(generation_flops(Method::InContext, 10, c, kv, 64, 4, 256) > naive);
            }
        }
        assert_eq!(generation_flops(Method::Naive, 10, 50, true, 64, 4, 256), 419_840);
        // N = 60: 4·(23·64² + 4·60·64) + 2·64·256
        let n60 = 4 * (23 * 64 * 64 + 4 * 60 * 64) + 2 * 64 * 256;
        assert_eq!(n60, 471_040);
        assert_eq!(generation_flops(Method::InContext, 10, 50, true, 64, 4, 256), n60);
        assert!("bogus".parse::<Method>().is_err());
        assert_eq!("shine".parse::<Method>().unwrap(), Method::Hypernet);
    }

    #[test]
    fn memory_regimes() {
        assert_eq!(peak_memory(60, 64, 4, MemoryRegime::Efficient), 61_440);
        assert_eq!(peak_memory(60, 64, 4, MemoryRegime::StandardAttention), 75_840);
        assert_eq!(peak_memory(60, 64, 4, MemoryRegime::KvCache), 7_680);
    }

    #[test]
    fn axial_saving() {
        let (num, den) = axial_ratio(36, 148);
        assert!(num * 10 <= den);
        for (l, m) in [(4, 37), (36, 148), (2, 2), (1, 9)] {
            let (n, d) = axial_ratio(l, m);
            assert_eq!(axial_attention_pair_flops(l, m, 8) * d, full_attention_pair_flops(l, m, 8) * n);
        }
    }

    #[test]
    fn inconsistent_memory_length_is_rejected() {
        let mut inputs = CostInputs::new(64, 4, 256, 2, 2, 50, 10, 10);
        assert_eq!(inputs.m, 37);
        assert!(CostReport::compute(&inputs).is_ok());
        inputs.m = 36;
        assert!(CostReport::compute(&inputs).is_err());
    }
}
