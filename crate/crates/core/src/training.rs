//! Objectives and the training loop.
//!
//! Reconstruction: the hypernetwork reads the whole context and the adapted
//! backbone must reproduce it after `<USR> <RECON> <ASSISTANT>`.
//! Completion: the hypernetwork reads a prefix (10–30% of the tail dropped)
//! and the adapted backbone must produce the full context after `<COMP>`.
//! Instruction tuning: the adapted backbone answers questions about a context
//! it never sees; loss on answer tokens only.
//!
//! The backbone is frozen throughout; only the hypernetwork parameters move.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BoundBackbone};
use crate::checkpoint::{self, Checkpoint};
use crate::corpus::{self, ContextDoc, Corpus, PackWarning, PackedItem, QAExample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hypernet::{BoundHypernet, Hypernet};
use crate::optim::{clip_grad_norm, lr_at, AdamW, AdamWConfig};
use crate::template;
use crate::tensor::Matrix;
use crate::tokenizer::{self, COMP, EOT, RECON};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Ift,
    Backbone,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Ift => "ift",
            Stage::Backbone => "backbone",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Probability of the reconstruction task per packed segment.
    pub lambda: f64,
    pub lr: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Packing length for pretraining.
    pub max_len: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Save a checkpoint every this many steps; 0 saves only the final state.
    pub checkpoint_every: usize,
    /// Optional cap on the number of steps in the plan.
    pub max_steps: Option<usize>,
    pub adam: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            lambda: 0.5,
            lr: 5e-5,
            warmup_frac: 0.05,
            epochs: 1,
            batch_size: 1,
            max_len: 256,
            seed: 0,
            grad_clip: 1.0,
            checkpoint_every: 0,
            max_steps: None,
            adam: AdamWConfig::default(),
        }
    }

    pub fn ift() -> Self {
        Self {
            stage: Stage::Ift,
            lr: 3e-5,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1]", self.warmup_frac)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// One scalar training objective.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Recon {
        context: &'a [u32],
    },
    /// The hypernetwork sees `context[..keep]`; the target is the full context.
    Comp {
        context: &'a [u32],
        keep: usize,
    },
    /// `λ·recon + (1−λ)·comp`; `keep = None` falls back to reconstruction.
    Total {
        context: &'a [u32],
        lambda: f64,
        keep: Option<usize>,
    },
    Packed(&'a PackedItem),
    /// All turns of one example as a single conversation.
    Ift {
        context: &'a [u32],
        turns: &'a [(String, String)],
    },
}

pub struct LossOutput {
    pub loss: f64,
    /// Gradients in [`Hypernet::params`] order when requested.
    pub grads: Option<Vec<Matrix>>,
    /// Number of supervised target tokens.
    pub supervised: usize,
}

struct Ctx<'a> {
    backbone: &'a Backbone,
    hn: &'a Hypernet,
    bb: BoundBackbone,
    bh: BoundHypernet,
}

impl Ctx<'_> {
    /// Adapted cross-entropy: adapters from `visible`, loss on `targets` of `tokens`.
    fn adapted_ce(&self, g: &mut Graph, visible: &[u32], tokens: &[u32], targets: &[Option<usize>]) -> Result<Var> {
        self.backbone.check_len(tokens.len(), "")?;
        self.backbone.check_tokens(tokens)?;
        let adapters = self.hn.generate_lora_graph(g, self.backbone, &self.bb, &self.bh, visible)?;
        let x = self.backbone.embed_tokens(g, &self.bb, tokens);
        let hidden = self.backbone.forward_hidden(g, &self.bb, x, Some(&adapters), false)?;
        let logits = self.backbone.logits(g, &self.bb, hidden.last);
        Ok(g.cross_entropy(logits, targets))
    }

    fn task(&self, g: &mut Graph, visible: &[u32], task: u32, target: &[u32]) -> Result<(Var, usize)> {
        let (tokens, targets) = template::task_turn(task, target);
        let n = targets.iter().flatten().count();
        Ok((self.adapted_ce(g, visible, &tokens, &targets)?, n))
    }
}

fn check_context(context: &[u32]) -> Result<()> {
    if context.is_empty() {
        return Err(Error::Invalid("context must contain at least one token".into()));
    }
    Ok(())
}

/// Evaluates an objective, optionally with gradients for every hypernetwork parameter.
pub fn evaluate(backbone: &Backbone, hn: &Hypernet, objective: Objective<'_>, grads: bool) -> Result<LossOutput> {
    let mut g = Graph::new();
    let bb = backbone.bind(&mut g, false);
    let bh = hn.bind(&mut g, grads);
    let cx = Ctx { backbone, hn, bb, bh };
    let (loss, supervised) = match objective {
        Objective::Recon { context } => {
            check_context(context)?;
            cx.task(&mut g, context, RECON, context)?
        }
        Objective::Comp { context, keep } => {
            check_context(context)?;
            if keep == 0 || keep > context.len() {
                return Err(Error::Invalid(format!(
                    "completion prefix {keep} outside 1..={}",
                    context.len()
                )));
            }
            cx.task(&mut g, &context[..keep], COMP, context)?
        }
        Objective::Total { context, lambda, keep } => {
            check_context(context)?;
            let (recon, n1) = cx.task(&mut g, context, RECON, context)?;
            let (comp, n2) = match keep {
                Some(k) if k > 0 && k <= context.len() => cx.task(&mut g, &context[..k], COMP, context)?,
                _ => cx.task(&mut g, context, RECON, context)?,
            };
            let a = g.scale(recon, lambda);
            let b = g.scale(comp, 1.0 - lambda);
            (g.add(a, b), n1 + n2)
        }
        Objective::Packed(item) => {
            let (tokens, targets) = item.conversation();
            let n = targets.iter().flatten().count();
            (cx.adapted_ce(&mut g, &item.input(), &tokens, &targets)?, n)
        }
        Objective::Ift { context, turns } => {
            check_context(context)?;
            if turns.is_empty() {
                return Err(Error::Invalid("instruction example has no turns".into()));
            }
            if let Some((q, _)) = turns.iter().find(|(_, a)| a.is_empty()) {
                return Err(Error::Invalid(format!("empty answer to {q:?}")));
            }
            let (tokens, targets) = template::chat_conversation(&[], turns);
            let n = targets.iter().flatten().count();
            (cx.adapted_ce(&mut g, context, &tokens, &targets)?, n)
        }
    };
    let value = g.scalar(loss);
    let grads = grads.then(|| {
        let gr = g.backward(loss);
        cx.bh
            .vars()
            .iter()
            .zip(hn.params())
            .map(|(v, (_, _, p))| gr.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect()
    });
    Ok(LossOutput {
        loss: value,
        grads,
        supervised,
    })
}

pub fn recon_loss(backbone: &Backbone, hn: &Hypernet, context: &[u32]) -> Result<f64> {
    Ok(evaluate(backbone, hn, Objective::Recon { context }, false)?.loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompLoss {
    pub loss: f64,
    /// Visible prefix length; equals the context length after a fallback.
    pub keep: usize,
    /// The context was too short to truncate and was scored as reconstruction.
    pub fell_back: bool,
}

/// Prefix length for a completion draw, or `None` for contexts shorter than 10 tokens.
pub fn draw_keep<R: rand::Rng + ?Sized>(context: &[u32], rng: &mut R) -> Option<usize> {
    corpus::truncate_for_completion(context, rng).map(|c| c.partial.len())
}

pub fn comp_loss<R: rand::Rng + ?Sized>(
    backbone: &Backbone,
    hn: &Hypernet,
    context: &[u32],
    rng: &mut R,
) -> Result<CompLoss> {
    match draw_keep(context, rng) {
        Some(keep) => Ok(CompLoss {
            loss: evaluate(backbone, hn, Objective::Comp { context, keep }, false)?.loss,
            keep,
            fell_back: false,
        }),
        None => Ok(CompLoss {
            loss: recon_loss(backbone, hn, context)?,
            keep: context.len(),
            fell_back: true,
        }),
    }
}

pub fn total_loss<R: rand::Rng + ?Sized>(
    backbone: &Backbone,
    hn: &Hypernet,
    context: &[u32],
    lambda: f64,
    rng: &mut R,
) -> Result<f64> {
    let keep = draw_keep(context, rng);
    Ok(evaluate(backbone, hn, Objective::Total { context, lambda, keep }, false)?.loss)
}

pub fn turns_of(example: &QAExample) -> Vec<(String, String)> {
    example
        .turns
        .iter()
        .map(|t| (t.question.clone(), t.answer.clone()))
        .collect()
}

pub fn ift_loss(backbone: &Backbone, hn: &Hypernet, example: &QAExample) -> Result<f64> {
    let turns = turns_of(example);
    Ok(evaluate(
        backbone,
        hn,
        Objective::Ift {
            context: &example.context.tokens,
            turns: &turns,
        },
        false,
    )?
    .loss)
}

/// Hypernetwork parameters, optimizer moments and progress.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub hn: Hypernet,
    pub opt: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(hn: Hypernet, adam: AdamWConfig) -> Self {
        let opt = AdamW::new(adam, hn.params().into_iter().map(|(_, _, p)| p));
        Self { hn, opt, step: 0 }
    }

    pub fn save(&self, dir: &Path, stage: Stage) -> Result<()> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("stage".into(), stage.name().into());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("opt_t".into(), self.opt.t.to_string());
        meta.insert("adam".into(), serde_json::to_string(&self.opt.cfg)?);
        self.hn.save_with_meta(dir, meta)?;
        let names: Vec<String> = self.hn.params().into_iter().map(|(n, _, _)| n).collect();
        let moments: Vec<(String, &Matrix)> = names
            .iter()
            .zip(&self.opt.m)
            .map(|(n, m)| (format!("{n}.m"), m))
            .chain(names.iter().zip(&self.opt.v).map(|(n, v)| (format!("{n}.v"), v)))
            .collect();
        checkpoint::save(&dir.join("optimizer"), &std::collections::BTreeMap::new(), &moments)
    }

    pub fn load(dir: &Path, backbone: &Backbone) -> Result<(Self, Stage)> {
        let (hn, meta) = Hypernet::load(dir, backbone)?;
        let stage = match meta.get("stage").map(String::as_str) {
            Some("pretrain") => Stage::Pretrain,
            Some("ift") => Stage::Ift,
            other => return Err(Error::checkpoint(dir, format!("unknown training stage {other:?}"))),
        };
        let parse = |k: &str| {
            meta.get(k)
                .and_then(|v| v.parse::<u64>().ok())
                .ok_or_else(|| Error::checkpoint(dir, format!("missing {k}")))
        };
        let step = parse("step")? as usize;
        let t = parse("opt_t")?;
        let adam: AdamWConfig = serde_json::from_str(
            meta.get("adam")
                .ok_or_else(|| Error::checkpoint(dir, "missing optimizer config"))?,
        )?;
        let ck = Checkpoint::load(&dir.join("optimizer"))?;
        let names: Vec<String> = hn.params().into_iter().map(|(n, _, _)| n).collect();
        let take = |suffix: &str| -> Result<Vec<Matrix>> {
            names.iter().map(|n| ck.tensor(&format!("{n}.{suffix}")).cloned()).collect()
        };
        let opt = AdamW {
            cfg: adam,
            t,
            m: take("m")?,
            v: take("v")?,
        };
        Ok((Self { hn, opt, step }, stage))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WorkItem {
    Packed(PackedItem),
    Example(usize),
}

#[derive(Clone, Debug, Default)]
pub struct Plan {
    pub batches: Vec<Vec<WorkItem>>,
    pub warnings: Vec<PackWarning>,
    pub comp_fallbacks: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn chunk(items: Vec<WorkItem>, size: usize, out: &mut Vec<Vec<WorkItem>>) {
    let mut it = items.into_iter().peekable();
    while it.peek().is_some() {
        out.push(it.by_ref().take(size).collect());
    }
}

/// Per-epoch shuffle and packing, fully determined by the seed.
pub fn plan_pretrain(docs: &[ContextDoc], cfg: &TrainConfig) -> Result<Plan> {
    let mut plan = Plan::default();
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<ContextDoc> = order.iter().map(|&i| docs[i].clone()).collect();
        let packing = corpus::pack_contexts(&shuffled, cfg.max_len, cfg.lambda, &mut rng)?;
        if epoch == 0 {
            plan.warnings = packing.warnings;
        }
        plan.comp_fallbacks += packing.comp_fallbacks;
        chunk(
            packing.items.into_iter().map(WorkItem::Packed).collect(),
            cfg.batch_size,
            &mut plan.batches,
        );
    }
    if let Some(cap) = cfg.max_steps {
        plan.batches.truncate(cap);
    }
    Ok(plan)
}

pub fn plan_ift(examples: usize, cfg: &TrainConfig) -> Plan {
    let mut plan = Plan::default();
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..examples).collect();
        order.shuffle(&mut rng);
        chunk(order.into_iter().map(WorkItem::Example).collect(), cfg.batch_size, &mut plan.batches);
    }
    if let Some(cap) = cfg.max_steps {
        plan.batches.truncate(cap);
    }
    plan
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
    pub ppl: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Metrics and checkpoints go here when set.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many steps in total even if the plan is longer.
    pub stop_after: Option<usize>,
    pub quiet: bool,
    /// Print a progress line every this many steps; 0 disables.
    pub log_every: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn append_metrics(dir: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("metrics.jsonl"))?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}"))
}

/// Data for one hypernetwork training stage.
pub enum TrainData<'a> {
    Pretrain(&'a [ContextDoc]),
    Ift(&'a [QAExample]),
}

/// Runs (or resumes, from `state.step`) a hypernetwork training stage.
pub fn train(
    backbone: &Backbone,
    state: &mut TrainState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    let plan = match data {
        TrainData::Pretrain(docs) => plan_pretrain(docs, cfg)?,
        TrainData::Ift(examples) => plan_ift(examples.len(), cfg),
    };
    if !opts.quiet {
        for w in &plan.warnings {
            eprintln!(
                "warning: context {} has {} tokens, truncated to {}",
                w.doc_id, w.original_len, w.truncated_to
            );
        }
    }
    let ift_turns: Vec<Vec<(String, String)>> = match data {
        TrainData::Ift(examples) => examples.iter().map(turns_of).collect(),
        TrainData::Pretrain(_) => Vec::new(),
    };
    let total = plan.batches.len();
    let warmup = (cfg.warmup_frac * total as f64).round() as usize;
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut report = TrainReport::default();
    while state.step < end {
        let batch = &plan.batches[state.step];
        let mut sum: Option<Vec<Matrix>> = None;
        let mut loss = 0.0;
        for item in batch {
            let out = match item {
                WorkItem::Packed(p) => evaluate(backbone, &state.hn, Objective::Packed(p), true)?,
                WorkItem::Example(i) => {
                    let TrainData::Ift(examples) = data else { unreachable!() };
                    evaluate(
                        backbone,
                        &state.hn,
                        Objective::Ift {
                            context: &examples[*i].context.tokens,
                            turns: &ift_turns[*i],
                        },
                        true,
                    )?
                }
            };
            if !out.loss.is_finite() {
                return Err(Error::Invalid(format!("non-finite loss at step {}", state.step)));
            }
            loss += out.loss;
            let grads = out.grads.expect("requested");
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        let mut grads = sum.expect("non-empty batch");
        if batch.len() > 1 {
            grads.iter_mut().for_each(|g| *g = g.scale(1.0 / n));
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(state.step, total, warmup, cfg.lr);
        state.opt.step(state.hn.params_mut(), &grads, lr)?;
        state.step += 1;
        let rec = StepRecord {
            step: state.step,
            stage: cfg.stage,
            loss,
            lr,
            ppl: loss.exp(),
            grad_norm,
        };
        if let Some(dir) = &opts.out_dir {
            append_metrics(dir, std::slice::from_ref(&rec))?;
            let due = cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every);
            if due || state.step == end {
                let ck = checkpoint_dir(dir, state.step);
                state.save(&ck, cfg.stage)?;
                report.checkpoints.push(ck);
            }
        }
        log_progress(opts, &rec, total);
        report.records.push(rec);
    }
    Ok(report)
}

fn log_progress(opts: &TrainOptions, rec: &StepRecord, total: usize) {
    if !opts.quiet && opts.log_every > 0 && (rec.step.is_multiple_of(opts.log_every) || rec.step == total) {
        eprintln!(
            "[{}] step {}/{} loss {:.4} lr {:.2e}",
            rec.stage.name(),
            rec.step,
            total,
            rec.loss,
            rec.lr
        );
    }
}

/// Language-modeling sequences for backbone pretraining: each document
/// followed by EOT, and each example as an in-context conversation.
pub fn lm_sequences(corpus: &Corpus) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for ex in &corpus.qa {
        let mut doc = ex.context.tokens.clone();
        doc.push(EOT);
        out.push(doc);
        let prefix = template::context_block(&ex.context.tokens);
        out.push(template::chat_conversation(&prefix, &turns_of(ex)).0);
    }
    out
}

/// Mean next-token cross-entropy over the whole sequence, with optional backbone gradients.
pub fn lm_loss(backbone: &Backbone, tokens: &[u32], grads: bool) -> Result<(f64, Option<Vec<Matrix>>)> {
    if tokens.len() < 2 {
        return Err(Error::Invalid("language-model sequence needs at least two tokens".into()));
    }
    backbone.check_len(tokens.len(), "")?;
    backbone.check_tokens(tokens)?;
    let mut g = Graph::new();
    let bb = backbone.bind(&mut g, grads);
    let x = backbone.embed_tokens(&mut g, &bb, tokens);
    let hidden = backbone.forward_hidden(&mut g, &bb, x, None, false)?;
    let logits = backbone.logits(&mut g, &bb, hidden.last);
    let targets: Vec<Option<usize>> = (0..tokens.len())
        .map(|p| tokens.get(p + 1).map(|&t| t as usize))
        .collect();
    let loss = g.cross_entropy(logits, &targets);
    let value = g.scalar(loss);
    let grads = grads.then(|| {
        let gr = g.backward(loss);
        bb.vars()
            .iter()
            .zip(backbone.params())
            .map(|(v, (_, p))| gr.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect()
    });
    Ok((value, grads))
}

/// Plain language-model pretraining of the backbone itself.
pub fn train_backbone(
    backbone: &mut Backbone,
    sequences: &[Vec<u32>],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    let plan = plan_ift(sequences.len(), cfg);
    let total = plan.batches.len();
    let warmup = (cfg.warmup_frac * total as f64).round() as usize;
    let params: Vec<Arc<Matrix>> = backbone.params().into_iter().map(|(_, p)| p.clone()).collect();
    let mut opt = AdamW::new(cfg.adam, &params);
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut report = TrainReport::default();
    for (step, batch) in plan.batches.iter().enumerate().take(end) {
        let mut sum: Option<Vec<Matrix>> = None;
        let mut loss = 0.0;
        for item in batch {
            let WorkItem::Example(i) = item else { unreachable!() };
            let (l, g) = lm_loss(backbone, &sequences[*i], true)?;
            loss += l;
            let g = g.expect("requested");
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        let mut grads: Vec<Matrix> = sum.expect("non-empty batch").iter().map(|g| g.scale(1.0 / n)).collect();
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(step, total, warmup, cfg.lr);
        opt.step(backbone.params_mut(), &grads, lr)?;
        let rec = StepRecord {
            step: step + 1,
            stage: Stage::Backbone,
            loss,
            lr,
            ppl: loss.exp(),
            grad_norm,
        };
        if let Some(dir) = &opts.out_dir {
            append_metrics(dir, std::slice::from_ref(&rec))?;
        }
        log_progress(opts, &rec, total);
        report.records.push(rec);
    }
    Ok(report)
}

/// Decoded reconstruction of `context` from its generated adapters (greedy, up to EOT).
pub fn reconstruct(backbone: &Backbone, hn: &Hypernet, context: &[u32]) -> Result<Vec<u32>> {
    let adapters = hn.generate_lora(backbone, context)?;
    let prompt = [tokenizer::USR, RECON, tokenizer::ASSISTANT];
    backbone.generate(&prompt, Some(&adapters), context.len() + 8, &[EOT])
}
