//! Answer metrics, the hidden-context conversation protocol and the
//! four-way comparison harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_lora, AdapterRole, AdapterSet, LoraPair};
use crate::backbone::Backbone;
use crate::corpus::QAExample;
use crate::costmodel::Method;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hypernet::Hypernet;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::template;
use crate::tensor::Matrix;
use crate::tokenizer::{self, CTX, EOT};

/// Lowercase, drop punctuation and the articles a/an/the, split on whitespace.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Token-overlap F1 between normalized prediction and gold.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `exp` of the mean cross-entropy of `target` following `prompt`.
pub fn perplexity(
    backbone: &Backbone,
    adapters: Option<&AdapterSet>,
    prompt: &[u32],
    target: &[u32],
) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Invalid("perplexity needs a non-empty target".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Invalid("perplexity needs a non-empty prompt".into()));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend(target);
    let out = backbone.forward_lm(&tokens, adapters, false)?;
    let mut nll = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let row = out.logits.row(prompt.len() - 1 + i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        nll += lse - row[t as usize];
    }
    Ok((nll / target.len() as f64).exp())
}

/// What each method is allowed to use at answer time.
#[derive(Clone, Debug)]
pub enum Assets {
    Naive,
    InContext,
    Sft(AdapterSet),
    Hypernet(AdapterSet),
}

impl Assets {
    pub fn method(&self) -> Method {
        match self {
            Assets::Naive => Method::Naive,
            Assets::InContext => Method::InContext,
            Assets::Sft(_) => Method::Sft,
            Assets::Hypernet(_) => Method::Hypernet,
        }
    }

    fn adapters(&self) -> Option<&AdapterSet> {
        match self {
            Assets::Sft(a) | Assets::Hypernet(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub example: String,
    pub method: Method,
    pub turn: usize,
    pub question: String,
    pub prediction: String,
    pub gold: String,
    pub f1: f64,
    /// Token ids fed to the model when generating this answer.
    #[serde(skip)]
    pub input: Vec<u32>,
}

impl EvalRow {
    /// Whether the raw context appears in the generation input.
    pub fn input_contains(&self, context: &[u32]) -> bool {
        self.input.contains(&CTX) || (!context.is_empty() && self.input.windows(context.len()).any(|w| w == context))
    }
}

/// Answers all turns in order. The history holds the model's own earlier
/// answers, never the gold ones. Only the in-context method sees the context.
pub fn run_conversation(
    backbone: &Backbone,
    method: Method,
    assets: &Assets,
    example: &QAExample,
    max_new: usize,
) -> Result<Vec<EvalRow>> {
    if assets.method() != method {
        return Err(Error::Invalid(format!(
            "method {} was given assets for {}",
            method.name(),
            assets.method().name()
        )));
    }
    let prefix = if method.sees_context() {
        template::context_block(&example.context.tokens)
    } else {
        Vec::new()
    };
    let mut history: Vec<(String, String)> = Vec::new();
    let mut rows = Vec::with_capacity(example.turns.len());
    for (i, turn) in example.turns.iter().enumerate() {
        let mut input = prefix.clone();
        input.extend(template::chat_prompt(&history, &turn.question));
        let out = backbone.generate(&input, assets.adapters(), max_new, &[EOT])?;
        let prediction = tokenizer::decode(&out);
        rows.push(EvalRow {
            example: example.context.id.clone(),
            method,
            turn: i + 1,
            question: turn.question.clone(),
            f1: token_f1(&prediction, &turn.answer),
            gold: turn.answer.clone(),
            prediction: prediction.clone(),
            input,
        });
        history.push((turn.question.clone(), prediction));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub rank: usize,
    pub epochs: usize,
    /// Number of leading QA turns trained on; `None` uses every turn.
    pub turns: Option<usize>,
    pub lr: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            epochs: 10,
            turns: Some(5),
            lr: 1e-3,
            init_std: 0.02,
            seed: 0,
        }
    }
}

/// Fine-tunes a fresh LoRA on single QA turns of one context, without the context in the input.
pub fn sft_baseline(backbone: &Backbone, example: &QAExample, cfg: &SftConfig) -> Result<AdapterSet> {
    let turns_used = cfg.turns.unwrap_or(example.turns.len());
    if turns_used == 0 || turns_used > example.turns.len() {
        return Err(Error::Invalid(format!(
            "fine-tuning needs {turns_used} QA turns but example {} has {}",
            example.context.id,
            example.turns.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = backbone.layer_spec();
    let mut set = init_lora(&spec, backbone.cfg.layers, cfg.rank, cfg.init_std, 1.0, AdapterRole::Sft, &mut rng)?;
    let mut params: Vec<Arc<Matrix>> = set
        .layers
        .iter()
        .flatten()
        .flat_map(|p| [Arc::new(p.a.clone()), Arc::new(p.b.clone())])
        .collect();
    let mut opt = AdamW::new(AdamWConfig::default(), &params);
    let convs: Vec<_> = example.turns[..turns_used]
        .iter()
        .map(|t| template::chat_conversation(&[], &[(t.question.clone(), t.answer.clone())]))
        .collect();
    for _ in 0..cfg.epochs {
        for (tokens, targets) in &convs {
            let mut g = Graph::new();
            let bb = backbone.bind(&mut g, false);
            let vars: Vec<_> = params.iter().map(|p| g.param(p.clone(), true)).collect();
            let n = spec.targets.len();
            let bound = crate::backbone::BoundAdapters {
                layers: (0..backbone.cfg.layers)
                    .map(|l| {
                        (0..n)
                            .map(|t| crate::backbone::BoundLora {
                                a: vars[2 * (l * n + t)],
                                b: vars[2 * (l * n + t) + 1],
                                scale: 1.0,
                            })
                            .collect()
                    })
                    .collect(),
            };
            let x = backbone.embed_tokens(&mut g, &bb, tokens);
            let hidden = backbone.forward_hidden(&mut g, &bb, x, Some(&bound), false)?;
            let logits = backbone.logits(&mut g, &bb, hidden.last);
            let loss = g.cross_entropy(logits, targets);
            let gr = g.backward(loss);
            let mut grads: Vec<Matrix> = vars
                .iter()
                .zip(&params)
                .map(|(v, p)| gr.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
                .collect();
            clip_grad_norm(&mut grads, 1.0);
            opt.step(params.iter_mut().collect(), &grads, cfg.lr)?;
        }
    }
    let mut it = params.into_iter();
    for pair in set.layers.iter_mut().flatten() {
        let a = it.next().expect("a");
        let b = it.next().expect("b");
        *pair = LoraPair::new(a.as_ref().clone(), b.as_ref().clone(), 1.0)?;
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub max_new: usize,
    pub sft: SftConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            max_new: 16,
            sft: SftConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_f1: f64,
    /// Mean F1 by turn index (1-based order).
    pub per_turn: Vec<f64>,
    pub rows: usize,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summaries: Vec<MethodSummary>,
}

impl EvalReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    fn summarize(rows: &[EvalRow], methods: &[Method]) -> Vec<MethodSummary> {
        methods
            .iter()
            .map(|&m| {
                let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.method == m).collect();
                let turns = mine.iter().map(|r| r.turn).max().unwrap_or(0);
                let per_turn = (1..=turns)
                    .map(|t| {
                        let f: Vec<f64> = mine.iter().filter(|r| r.turn == t).map(|r| r.f1).collect();
                        f.iter().sum::<f64>() / f.len().max(1) as f64
                    })
                    .collect();
                MethodSummary {
                    method: m,
                    mean_f1: mine.iter().map(|r| r.f1).sum::<f64>() / mine.len().max(1) as f64,
                    per_turn,
                    rows: mine.len(),
                }
            })
            .collect()
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>6}  per-turn F1\n", "method", "mean F1", "rows");
        for m in &self.summaries {
            let turns: Vec<String> = m.per_turn.iter().map(|f| format!("{f:.3}")).collect();
            let _ = writeln!(s, "{:<12} {:>8.3} {:>6}  {}", m.method.name(), m.mean_f1, m.rows, turns.join(" "));
        }
        s
    }

    /// `results.jsonl`, `summary.txt`, `summary.json` and `f1_by_turn.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for r in &self.rows {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        fs::write(dir.join("results.jsonl"), out)?;
        fs::write(dir.join("summary.txt"), self.table())?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summaries)?)?;
        let mut csv = String::from("turn,method,mean_f1\n");
        for m in &self.summaries {
            for (t, f) in m.per_turn.iter().enumerate() {
                let _ = writeln!(csv, "{},{},{f:.6}", t + 1, m.method.name());
            }
        }
        fs::write(dir.join("f1_by_turn.csv"), csv)?;
        Ok(())
    }
}

/// Evaluates every requested method on every example.
pub fn run_eval(
    backbone: &Backbone,
    hypernet: Option<&Hypernet>,
    examples: &[QAExample],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for ex in examples {
        for &method in &cfg.methods {
            let assets = match method {
                Method::Naive => Assets::Naive,
                Method::InContext => Assets::InContext,
                Method::Sft => {
                    let mut sft = cfg.sft.clone();
                    sft.turns = sft.turns.map(|t| t.min(ex.turns.len()));
                    Assets::Sft(sft_baseline(backbone, ex, &sft)?)
                }
                Method::Hypernet => {
                    let hn = hypernet.ok_or_else(|| {
                        Error::Invalid("hypernetwork evaluation needs a hypernetwork checkpoint".into())
                    })?;
                    Assets::Hypernet(hn.generate_lora(backbone, &ex.context.tokens)?)
                }
            };
            rows.extend(run_conversation(backbone, method, &assets, ex, cfg.max_new)?);
        }
    }
    let summaries = EvalReport::summarize(&rows, &cfg.methods);
    Ok(EvalReport { rows, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::corpus::{ContextDoc, QaTurn};

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("Paris, France", "Paris, France"), 1.0);
        assert_eq!(token_f1("x b", "b c"), 0.5);
        assert_eq!(token_f1("The cat sat", "cat sat"), 1.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("the", "cat"), 0.0);
        assert_eq!(token_f1("cat", ""), 0.0);
    }

    #[test]
    fn f1_counts_multiset_overlap() {
        // prediction "b b", gold "b": one common token, P = 1/2, R = 1
        assert!((token_f1("b b", "b") - 2.0 / 3.0).abs() < 1e-12);
    }

    fn tiny() -> Backbone {
        Backbone::init(
            BackboneConfig {
                layers: 1,
                hidden: 16,
                heads: 4,
                kv_heads: 1,
                vocab: 300,
                max_pos: 128,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn example() -> QAExample {
        QAExample::new(
            ContextDoc::new("e", "bo's pet is owl.").unwrap(),
            vec![
                QaTurn { question: "what is bo's pet?".into(), answer: "owl".into() },
                QaTurn { question: "again?".into(), answer: "owl".into() },
            ],
        )
        .unwrap()
    }

    #[test]
    fn perplexity_of_zero_head_is_vocab_size() {
        let mut bb = tiny();
        bb.lm_head = Arc::new(Matrix::zeros(16, 300));
        let ppl = perplexity(&bb, None, &[1, 2], &[3, 4, 5]).unwrap();
        assert!((ppl - 300.0).abs() < 1e-9);
        assert!(perplexity(&bb, None, &[1], &[]).is_err());
    }

    #[test]
    fn conversation_protocol() {
        let bb = tiny();
        let ex = example();
        let naive = run_conversation(&bb, Method::Naive, &Assets::Naive, &ex, 4).unwrap();
        assert_eq!(naive.len(), 2);
        assert!(naive.iter().all(|r| !r.input_contains(&ex.context.tokens)));
        let icl = run_conversation(&bb, Method::InContext, &Assets::InContext, &ex, 4).unwrap();
        assert!(icl.iter().all(|r| r.input_contains(&ex.context.tokens)));
        // the second prompt carries the model's own first answer
        let first = tokenizer::encode(&naive[0].prediction);
        assert!(first.is_empty() || naive[1].input.windows(first.len()).any(|w| w == first));
        assert!(run_conversation(&bb, Method::Sft, &Assets::Naive, &ex, 4).is_err());
        // turn 1 does not depend on later turns
        let mut shorter = ex.clone();
        shorter.turns.truncate(1);
        let one = run_conversation(&bb, Method::Naive, &Assets::Naive, &shorter, 4).unwrap();
        assert_eq!(one[0], naive[0]);
    }

    #[test]
    fn sft_with_zero_epochs_is_naive() {
        let bb = tiny();
        let ex = example();
        let cfg = SftConfig { epochs: 0, turns: Some(2), ..Default::default() };
        let set = sft_baseline(&bb, &ex, &cfg).unwrap();
        assert_eq!(set.rank, 2);
        assert!(set.layers.iter().flatten().all(|p| p.b.max_abs() == 0.0));
        let a = run_conversation(&bb, Method::Sft, &Assets::Sft(set), &ex, 4).unwrap();
        let b = run_conversation(&bb, Method::Naive, &Assets::Naive, &ex, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.prediction, y.prediction);
        }
        let too_many = SftConfig { turns: Some(3), ..Default::default() };
        assert!(sft_baseline(&bb, &ex, &too_many).is_err());
    }
}
