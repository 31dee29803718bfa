//! Command-line entry point.
//!
//! Run layout under the output directory:
//!
//! ```text
//! config.resolved.toml
//! data/train.jsonl, data/lm.jsonl
//! backbone/                 frozen base model
//! pretrain/{metrics.jsonl, checkpoints/, final/}
//! ift/{metrics.jsonl, checkpoints/, final/}
//! eval/{results.jsonl, summary.txt, summary.json, f1_by_turn.csv}
//! cost_report.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapters::AdapterSet;
use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::corpus::{self, CorpusSpec, QAExample};
use crate::costmodel::{CostInputs, CostReport, Method};
use crate::error::{Error, Result};
use crate::eval;
use crate::hypernet::{Coupling, Hypernet, ReshapeMode};
use crate::template;
use crate::tokenizer::{self, EOT};
use crate::training::{self, TrainData, TrainOptions, TrainState};

#[derive(Debug, Parser)]
#[command(name = "ctxlora", version, about = "Compress a context into LoRA adapters with a hypernetwork")]
struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts of this run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic fact datasets.
    SynthData(SynthArgs),
    /// Pretrain the base language model on the language-model corpus.
    TrainBackbone(BackboneArgs),
    /// Reconstruction/completion pretraining of the hypernetwork.
    Pretrain(StageArgs),
    /// Instruction tuning of the hypernetwork on QA data.
    Ift(StageArgs),
    /// Generate an adapter checkpoint from a context file.
    GenLora(GenLoraArgs),
    /// Answer a question with an adapter checkpoint (the context is not shown to the model).
    Answer(AnswerArgs),
    /// Compare naive, in-context, fine-tuned and generated-adapter answering.
    Eval(EvalArgs),
    /// Analytic FLOPs and memory report.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    num_docs: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    turns: Option<usize>,
    /// Documents in the separate language-model corpus.
    #[arg(long, default_value_t = 512)]
    lm_docs: usize,
}

#[derive(Debug, Args)]
struct BackboneArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct StageArgs {
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Hypernetwork to start from (default: fresh for pretrain, pretrain/final for ift).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Resume from a training checkpoint.
    #[arg(long, conflicts_with = "init")]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    coupling: Option<String>,
    #[arg(long)]
    r_meta: Option<usize>,
}

#[derive(Debug, Args)]
struct GenLoraArgs {
    #[arg(long)]
    context_file: PathBuf,
    #[arg(long)]
    hypernet: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Adapter output directory (default: <out>/adapter).
    #[arg(long)]
    adapter_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnswerArgs {
    #[arg(long)]
    question: String,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    hypernet: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated: naive,in_context,sft,hypernet.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long = "H", default_value_t = 4096)]
    h: u128,
    #[arg(long = "L", default_value_t = 36)]
    l: u128,
    #[arg(long = "V", default_value_t = 512)]
    v: u128,
    #[arg(long = "C", default_value_t = 1150)]
    c: u128,
    #[arg(long = "I", default_value_t = 64)]
    i: u128,
    #[arg(long = "r", default_value_t = 8)]
    r: u128,
    #[arg(long = "Lp", default_value_t = 4)]
    lp: u128,
    #[arg(long = "T", default_value_t = 50)]
    t: u128,
}

/// Parses `argv` (including the program name) and runs; returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train_path(cfg: &RunConfig) -> PathBuf {
    cfg.data.train.clone().unwrap_or_else(|| cfg.out_dir.join("data/train.jsonl"))
}

fn backbone_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.out_dir.join("backbone"))
}

fn load_backbone(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<Backbone> {
    let dir = backbone_dir(cfg, flag);
    Backbone::load(&dir).map_err(|e| match e {
        Error::Checkpoint { .. } if !dir.exists() => Error::Invalid(format!(
            "no backbone at {}; run `train-backbone` first or pass --backbone",
            dir.display()
        )),
        other => other,
    })
}

fn opts(dir: PathBuf) -> TrainOptions {
    TrainOptions {
        out_dir: Some(dir),
        stop_after: None,
        quiet: false,
        log_every: 50,
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli)?;
    match cli.command {
        Command::SynthData(a) => synth(&mut cfg, a),
        Command::TrainBackbone(a) => train_backbone(&mut cfg, a),
        Command::Pretrain(a) => stage(&mut cfg, a, true),
        Command::Ift(a) => stage(&mut cfg, a, false),
        Command::GenLora(a) => gen_lora(&cfg, a),
        Command::Answer(a) => answer(&cfg, a),
        Command::Eval(a) => evaluate(&mut cfg, a),
        Command::Cost(a) => cost(&cfg, a),
    }
}

fn synth(cfg: &mut RunConfig, a: SynthArgs) -> Result<()> {
    let spec = &mut cfg.corpus;
    spec.num_docs = a.num_docs.unwrap_or(spec.num_docs);
    spec.min_len = a.min_len.unwrap_or(spec.min_len);
    spec.max_len = a.max_len.unwrap_or(spec.max_len);
    spec.turns = a.turns.unwrap_or(spec.turns);
    cfg.write_resolved(&cfg.out_dir)?;
    let train = corpus::gen_synthetic_corpus(&cfg.corpus, cfg.seed)?;
    let lm_spec = CorpusSpec {
        num_docs: a.lm_docs,
        ..cfg.corpus.clone()
    };
    let mut lm = corpus::gen_synthetic_corpus(&lm_spec, cfg.seed.wrapping_add(0x5eed))?;
    lm.qa.retain(|ex| train.docs.iter().all(|d| d.raw != ex.context.raw));
    let dir = cfg.out_dir.join("data");
    corpus::save_dataset(&dir.join("train.jsonl"), &train.qa)?;
    corpus::save_dataset(&dir.join("lm.jsonl"), &lm.qa)?;
    println!(
        "wrote {} training examples and {} language-model documents to {}",
        train.qa.len(),
        lm.qa.len(),
        dir.display()
    );
    Ok(())
}

fn corpus_of(examples: Vec<QAExample>) -> corpus::Corpus {
    corpus::Corpus {
        docs: examples.iter().map(|e| e.context.clone()).collect(),
        qa: examples,
    }
}

fn train_backbone(cfg: &mut RunConfig, a: BackboneArgs) -> Result<()> {
    cfg.lm.epochs = a.epochs.unwrap_or(cfg.lm.epochs);
    cfg.lm.lr = a.lr.unwrap_or(cfg.lm.lr);
    cfg.lm.seed = cfg.seed;
    if let Some(d) = a.data {
        cfg.data.lm = Some(d);
    }
    cfg.write_resolved(&cfg.out_dir)?;
    let path = cfg.data.lm.clone().unwrap_or_else(|| cfg.out_dir.join("data/lm.jsonl"));
    let examples = corpus::load_dataset(&path)?;
    let seqs = training::lm_sequences(&corpus_of(examples));
    let mut backbone = Backbone::init(cfg.backbone.clone(), cfg.seed)?;
    let report = training::train_backbone(&mut backbone, &seqs, &cfg.lm, &opts(cfg.out_dir.join("lm")))?;
    let dir = cfg.out_dir.join("backbone");
    backbone.save(&dir)?;
    if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
        println!("backbone: loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, report.records.len());
    }
    println!("saved backbone to {}", dir.display());
    Ok(())
}

fn stage(cfg: &mut RunConfig, a: StageArgs, pretrain: bool) -> Result<()> {
    if let Some(m) = &a.mode {
        cfg.hypernet.mode = m.parse::<ReshapeMode>()?;
    }
    if let Some(c) = &a.coupling {
        cfg.hypernet.coupling = c.parse::<Coupling>()?;
    }
    cfg.hypernet.r_meta = a.r_meta.unwrap_or(cfg.hypernet.r_meta);
    if let Some(d) = a.data {
        cfg.data.train = Some(d);
    }
    let seed = cfg.seed;
    let tc = if pretrain { &mut cfg.pretrain } else { &mut cfg.ift };
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.lambda = a.lambda.unwrap_or(tc.lambda);
    tc.max_steps = a.max_steps.or(tc.max_steps);
    tc.checkpoint_every = a.checkpoint_every.unwrap_or(tc.checkpoint_every);
    tc.seed = seed;
    cfg.validate()?;
    let name = if pretrain { "pretrain" } else { "ift" };
    let stage_dir = cfg.out_dir.join(name);
    cfg.write_resolved(&stage_dir)?;

    let backbone = load_backbone(cfg, &a.backbone)?;
    let examples = corpus::load_dataset(&train_path(cfg))?;
    let tc = if pretrain { cfg.pretrain.clone() } else { cfg.ift.clone() };
    let mut state = if let Some(r) = &a.resume {
        let (state, stage) = TrainState::load(r, &backbone)?;
        if stage != tc.stage {
            return Err(Error::Invalid(format!(
                "checkpoint {} belongs to stage {}, not {name}",
                r.display(),
                stage.name()
            )));
        }
        state
    } else {
        let init = a
            .init
            .clone()
            .or_else(|| (!pretrain).then(|| cfg.out_dir.join("pretrain/final")));
        let hn = match init {
            Some(dir) => Hypernet::load(&dir, &backbone)?.0,
            None => Hypernet::init(cfg.hypernet.clone(), &backbone, seed)?,
        };
        TrainState::new(hn, tc.adam)
    };
    let docs: Vec<_> = examples.iter().map(|e| e.context.clone()).collect();
    let data = if pretrain {
        TrainData::Pretrain(&docs)
    } else {
        TrainData::Ift(&examples)
    };
    let report = training::train(&backbone, &mut state, &data, &tc, &opts(stage_dir.clone()))?;
    let final_dir = stage_dir.join("final");
    state.hn.save(&final_dir)?;
    if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
        println!("{name}: loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, report.records.len());
    }
    println!("saved hypernetwork to {}", final_dir.display());
    Ok(())
}

fn default_hypernet(cfg: &RunConfig) -> PathBuf {
    let ift = cfg.out_dir.join("ift/final");
    if ift.exists() {
        ift
    } else {
        cfg.out_dir.join("pretrain/final")
    }
}

fn gen_lora(cfg: &RunConfig, a: GenLoraArgs) -> Result<()> {
    cfg.write_resolved(&cfg.out_dir)?;
    let backbone = load_backbone(cfg, &a.backbone)?;
    let hn_dir = a.hypernet.unwrap_or_else(|| default_hypernet(cfg));
    let (hn, _) = Hypernet::load(&hn_dir, &backbone)?;
    let text = fs::read_to_string(&a.context_file)?;
    let text = text.trim_end_matches('\n');
    let context = tokenizer::encode(text);
    if context.is_empty() {
        return Err(Error::Invalid(format!("{} is empty", a.context_file.display())));
    }
    let adapters = hn.generate_lora(&backbone, &context)?;
    let dir = a.adapter_out.unwrap_or_else(|| cfg.out_dir.join("adapter"));
    adapters.save(&dir)?;
    println!(
        "generated rank-{} adapters for {} targets from {} context tokens -> {}",
        adapters.rank,
        adapters.target_count(),
        context.len(),
        dir.display()
    );
    Ok(())
}

fn answer(cfg: &RunConfig, a: AnswerArgs) -> Result<()> {
    cfg.write_resolved(&cfg.out_dir)?;
    let backbone = load_backbone(cfg, &a.backbone)?;
    let adapters = AdapterSet::load(&a.adapter.unwrap_or_else(|| cfg.out_dir.join("adapter")))?;
    let prompt = template::chat_prompt(&[], &a.question);
    let out = backbone.generate(&prompt, Some(&adapters), a.max_new, &[EOT])?;
    let text = tokenizer::decode(&out);
    let record = serde_json::json!({
        "question": a.question,
        "answer": text,
        "input_tokens": prompt,
    });
    fs::write(cfg.out_dir.join("answer.json"), serde_json::to_string_pretty(&record)?)?;
    println!("{text}");
    Ok(())
}

fn evaluate(cfg: &mut RunConfig, a: EvalArgs) -> Result<()> {
    if let Some(ms) = &a.methods {
        cfg.eval.methods = ms.iter().map(|m| m.parse::<Method>()).collect::<Result<_>>()?;
    }
    if let Some(d) = a.data {
        cfg.data.eval = Some(d);
    }
    let dir = cfg.out_dir.join("eval");
    cfg.write_resolved(&dir)?;
    let backbone = load_backbone(cfg, &a.backbone)?;
    let path = cfg.data.eval.clone().unwrap_or_else(|| train_path(cfg));
    let mut examples = corpus::load_dataset(&path)?;
    if let Some(n) = a.limit {
        examples.truncate(n);
    }
    let hn = if cfg.eval.methods.contains(&Method::Hypernet) {
        let hn_dir = a.hypernet.clone().unwrap_or_else(|| default_hypernet(cfg));
        Some(Hypernet::load(&hn_dir, &backbone)?.0)
    } else {
        None
    };
    let report = eval::run_eval(&backbone, hn.as_ref(), &examples, &cfg.eval)?;
    report.write(&dir)?;
    print!("{}", report.table());
    Ok(())
}

fn cost(cfg: &RunConfig, a: CostArgs) -> Result<()> {
    let inputs = CostInputs::new(a.h, a.l, a.v, a.lp, a.r, a.c, a.i, a.t);
    let report = CostReport::compute(&inputs)?;
    write_cost(&cfg.out_dir, cfg, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn write_cost(dir: &Path, cfg: &RunConfig, report: &CostReport) -> Result<()> {
    cfg.write_resolved(dir)?;
    fs::write(dir.join("cost_report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["ctxlora", "frobnicate"]), 2);
        assert_eq!(run(["ctxlora", "cost", "--bogus"]), 2);
        assert_eq!(run(["ctxlora", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["ctxlora", "--out", out, "pretrain"]), 1);
        assert_eq!(run(["ctxlora", "--out", out, "cost", "--r", "0"]), 1);
    }
}
