//! Acceptance suite. Runs every criterion in order and prints one line each;
//! exits non-zero if any hard criterion fails. Criterion 9 only warns.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxlora::adapters::merge_lora;
use ctxlora::backbone::{Backbone, BackboneConfig, LayerSpec};
use ctxlora::corpus::{gen_synthetic_corpus, pack_contexts, Corpus, CorpusSpec};
use ctxlora::costmodel::*;
use ctxlora::eval::{perplexity, run_eval, EvalConfig};
use ctxlora::graph::Graph;
use ctxlora::hypernet::{
    block_ranges, build_coupling_mask, memory_length, reshape_to_lora, Hypernet, HypernetConfig, ReshapeMode,
};
use ctxlora::tokenizer::{encode, ASSISTANT, EOT, RECON, USR};
use ctxlora::training::*;
use ctxlora::Matrix;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1 to 4

fn memory_sizing() -> Outcome {
    let big = memory_length(8, 75_776, 4096);
    let mut bad = Vec::new();
    for r in 1..=16usize {
        for h in [16usize, 64, 4096] {
            // 18.5H = 37H/2; ⌈18.5r⌉ = ⌈37r/2⌉.
            let want = (37 * r).div_ceil(2);
            if memory_length(r, 37 * h / 2, h) != want {
                bad.push((r, h));
            }
        }
    }
    outcome(big == 148 && bad.is_empty(), format!("M(8, 75776, 4096) = {big}, mismatches {bad:?}"))
}

fn cost_oracle() -> Outcome {
    let toy = shine_amortized_flops(50, 2, 64, 4, 2);
    let got = [
        llm_flops_no_kv(10, 64, 4, 256),
        llm_flops_kv_step(10, 64, 4, 256),
        toy.memory_states,
        toy.m2p,
        toy.total,
        sft_amortized_flops(50, 10, 64, 4, 256),
        peak_memory(60, 64, 4, MemoryRegime::Efficient),
        peak_memory(60, 64, 4, MemoryRegime::StandardAttention),
        peak_memory(60, 64, 4, MemoryRegime::KvCache),
    ];
    // Values re-derived by scripts/cost_oracle.py.
    let want = [
        3_903_488, 419_840, 40_535_040, 25_801_728, 66_336_768, 691_200_000, 61_440, 75_840, 7_680,
    ];
    outcome(got == want, format!("got {got:?}"))
}

fn efficiency() -> Outcome {
    let toy = shine_amortized_flops(50, 2, 64, 4, 2).total < sft_amortized_flops(50, 10, 64, 4, 256);
    let v = 151_936;
    let large_hn = shine_amortized_flops(1150, 8, 4096, 36, 4).total;
    let large_sft = sft_amortized_flops(1150, 50, 4096, 36, v);
    let mut gen_ok = true;
    for c in 1..=2048u128 {
        for kv in [false, true] {
            let ic = generation_flops(Method::InContext, 10, c, kv, 64, 4, 256);
            let hn = generation_flops(Method::Hypernet, 10, c, kv, 64, 4, 256);
            gen_ok &= ic > hn;
        }
    }
    outcome(
        toy && large_hn < large_sft && gen_ok,
        format!("toy {toy}, 8B-scale {large_hn} < {large_sft}, in-context > hypernet for C in 1..=2048: {gen_ok}"),
    )
}

fn axial_saving() -> Outcome {
    let (num, den) = axial_ratio(36, 148);
    let pair = (axial_attention_pair_flops(36, 148, 4096), full_attention_pair_flops(36, 148, 4096));
    // ratio ≤ 1/10 ⟺ 10·num ≤ den, and the FLOPs terms have the same ratio.
    let ok = 10 * num <= den && pair.0 * den == pair.1 * num;
    outcome(ok, format!("(L+M)/(2LM) = {num}/{den} = {:.4}", num as f64 / den as f64))
}

// ---------------------------------------------------------------- 5

fn micro_setup() -> (Backbone, Hypernet, Vec<u32>) {
    let cfg = BackboneConfig {
        layers: 2,
        hidden: 16,
        heads: 4,
        kv_heads: 1,
        ..Default::default()
    };
    let bb = Backbone::init(cfg, 11).unwrap();
    let hcfg = HypernetConfig {
        r_gen: 1,
        r_meta: 2,
        ..Default::default()
    };
    let mut hn = Hypernet::init(hcfg, &bb, 12).unwrap();
    // Move away from the zero-B / small-gain initialization so every
    // parameter has a non-trivial gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for p in hn.params_mut() {
        let m = Arc::make_mut(p);
        for x in m.data_mut() {
            *x += 0.2 * (rng.random::<f64>() - 0.5);
        }
    }
    let ctx = encode("ab's is.");
    (bb, hn, ctx)
}

fn gradient_check() -> Outcome {
    let (bb, hn, ctx) = micro_setup();
    assert_eq!(ctx.len(), 8);
    assert_eq!(hn.memory_tokens, 19);
    let turns = vec![("q?".to_string(), "ok".to_string())];
    let objectives: [(&str, Objective); 2] = [
        (
            "total",
            Objective::Total {
                context: &ctx,
                lambda: 0.3,
                keep: Some(6),
            },
        ),
        (
            "ift",
            Objective::Ift {
                context: &ctx,
                turns: &turns,
            },
        ),
    ];
    let h = 1e-5;
    let mut worst = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (name, obj) in &objectives {
        let analytic = evaluate(&bb, &hn, *obj, true).unwrap().grads.unwrap();
        let names: Vec<_> = hn.params().iter().map(|(n, g, _)| (n.clone(), *g)).collect();
        for (pi, ((pname, group), grad)) in names.iter().zip(&analytic).enumerate() {
            let len = grad.len();
            // Every entry of small tensors, a random sample of larger ones.
            let idx: Vec<usize> = if len <= 24 {
                (0..len).collect()
            } else {
                (0..24).map(|_| rng.random_range(0..len)).collect()
            };
            let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
            for &i in &idx {
                let mut plus = hn.clone();
                Arc::make_mut(plus.params_mut().swap_remove(pi)).data_mut()[i] += h;
                let mut minus = hn.clone();
                Arc::make_mut(minus.params_mut().swap_remove(pi)).data_mut()[i] -= h;
                let fp = evaluate(&bb, &plus, *obj, false).unwrap().loss;
                let fm = evaluate(&bb, &minus, *obj, false).unwrap().loss;
                let num = (fp - fm) / (2.0 * h);
                diff += (num - grad.data()[i]).powi(2);
                na += grad.data()[i].powi(2);
                nn += num.powi(2);
            }
            // ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over the sampled entries.
            let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12);
            let key = format!("{name}/{group:?}");
            let e = worst.entry(key).or_insert((0.0f64, String::new()));
            if rel > e.0 {
                *e = (rel, pname.clone());
            }
        }
    }
    let max = worst.values().map(|v| v.0).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(k, (e, _))| format!("{k} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(max <= 1e-4, detail)
}

// ---------------------------------------------------------------- 6

fn structural() -> Outcome {
    let mut fails = Vec::new();
    let bb = Backbone::init(BackboneConfig::default(), 21).unwrap();
    let mut hn = Hypernet::init(HypernetConfig::default(), &bb, 22).unwrap();
    for p in hn.params_mut() {
        let m = Arc::make_mut(p);
        let mut rng = ChaCha8Rng::seed_from_u64(m.len() as u64);
        for x in m.data_mut() {
            *x += 0.05 * (rng.random::<f64>() - 0.5);
        }
    }
    let ctx = encode("lu's pet is 263. mi's job is drum.");

    let mem = hn.extract_memory(&bb, &ctx).unwrap();
    if mem.shape() != (4, 37, 64) {
        fails.push(format!("memory shape {:?}", mem.shape()));
    }

    // Reshape: distinct values, every mode uses exactly the first rD once.
    let spec = LayerSpec::for_hidden(64);
    let rd = 2 * spec.d();
    let slice = Matrix::from_vec(37, 64, (0..37 * 64).map(|i| i as f64).collect());
    let flat = |m: &Matrix, transposed: bool| {
        if transposed {
            m.transpose().data().to_vec()
        } else {
            m.data().to_vec()
        }
    };
    let mut canonical: Option<Vec<f64>> = None;
    for mode in ReshapeMode::ALL {
        let pairs = reshape_to_lora(&slice, &spec, 2, mode).unwrap();
        let mut used: Vec<f64> = pairs
            .iter()
            .flat_map(|p| p.a.data().iter().chain(p.b.data()).copied())
            .collect();
        used.sort_by(f64::total_cmp);
        if used != (0..rd).map(|i| i as f64).collect::<Vec<_>>() {
            fails.push(format!("{mode:?} does not consume exactly rD"));
        }
        // Undoing the mode's transposes recovers the same flat blocks.
        let blocks: Vec<f64> = pairs
            .iter()
            .flat_map(|p| {
                let mut v = flat(&p.a, mode.a_transposed());
                v.extend(flat(&p.b, mode.b_transposed()));
                v
            })
            .collect();
        match &canonical {
            None => canonical = Some(blocks),
            Some(c) if *c != blocks => fails.push(format!("{mode:?} disagrees with rl on flat layout")),
            _ => {}
        }
        for (p, t) in pairs.iter().zip(&spec.targets) {
            let a_shape = (t.input, 2);
            let b_shape = (2, t.output);
            if p.a.shape() != a_shape || p.b.shape() != b_shape {
                fails.push(format!("{mode:?} {:?} shapes", t.target));
            }
        }
    }

    // Appending memory tokens leaves the context logits unchanged.
    let meta = hn.meta_lora();
    let plain = bb.forward_lm(&ctx, Some(&meta), false).unwrap().logits;
    let mut g = Graph::new();
    let b = bb.bind(&mut g, false);
    let bh = hn.bind(&mut g, false);
    let x = bb.embed_tokens(&mut g, &b, &ctx);
    let input = g.concat_rows(&[x, bh.memory]);
    let hidden = bb.forward_hidden(&mut g, &b, input, Some(&bh.meta), false).unwrap();
    let first = g.slice_rows(hidden.last, 0, ctx.len());
    let logits = bb.logits(&mut g, &b, first);
    let drift = max_abs_diff(g.value(logits), &plain);
    if drift > 1e-6 {
        fails.push(format!("prefix logit drift {drift:.2e}"));
    }

    // Merged weights and applied adapters agree.
    let lora = hn.generate_lora(&bb, &ctx).unwrap();
    let applied = bb.forward_lm(&ctx, Some(&lora), false).unwrap().logits;
    let merged = merge_lora(&bb, &lora).unwrap().forward_lm(&ctx, None, false).unwrap().logits;
    let merge_diff = max_abs_diff(&applied, &merged);
    if merge_diff > 1e-5 {
        fails.push(format!("merge vs apply {merge_diff:.2e}"));
    }

    // Purity.
    if hn.generate_lora(&bb, &ctx).unwrap() != lora {
        fails.push("generate_lora not bit-identical on repeat".into());
    }

    // Coupling mask: every edge joins the A and B of one target, so the
    // graph is bipartite with parts {A tokens} and {B tokens}.
    let mut edges = 0;
    for (h, r) in [(64usize, 2usize), (16, 1), (64, 4), (32, 3)] {
        let spec = LayerSpec::for_hidden(h);
        let m = memory_length(r, spec.d(), h);
        let cm = build_coupling_mask(&spec, r, m, h).unwrap();
        let ranges = block_ranges(&spec, r);
        for p in 0..m {
            for q in 0..m {
                if !cm.mask[p * m + q] {
                    continue;
                }
                edges += 1;
                let (a, b) = (cm.assignment[p].unwrap(), cm.assignment[q].unwrap());
                if a.target != b.target || a.is_a == b.is_a || !cm.mask[q * m + p] {
                    fails.push(format!("H={h} r={r}: bad edge {p}-{q}"));
                }
            }
        }
        // Odd cycles would need an edge inside a part; check every triangle too.
        for p in 0..m {
            for q in 0..m {
                for s in 0..m {
                    if cm.mask[p * m + q] && cm.mask[q * m + s] && cm.mask[s * m + p] {
                        fails.push(format!("H={h} r={r}: triangle {p}-{q}-{s}"));
                    }
                }
            }
        }
        // Majority assignment agrees with the flat ranges.
        for (p, own) in cm.assignment.iter().enumerate() {
            if let Some(bl) = own {
                let (_, s, e) = ranges.iter().find(|(b, _, _)| b == bl).unwrap();
                if p * h >= *e || (p + 1) * h <= *s {
                    fails.push(format!("token {p} assigned to disjoint block"));
                }
            }
        }
    }
    fails.dedup();
    fails.truncate(5);
    outcome(
        fails.is_empty(),
        format!("drift {drift:.1e}, merge {merge_diff:.1e}, {edges} coupled edges; {}", fails.join("; ")),
    )
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 7 to 9

/// Toy backbone pretrained as a language model on documents disjoint from the
/// evaluation corpus.
fn toy_backbone(eval: &Corpus) -> Backbone {
    let spec = CorpusSpec {
        num_docs: 512,
        min_len: 30,
        max_len: 60,
        ..Default::default()
    };
    let mut lm = gen_synthetic_corpus(&spec, 1000).unwrap();
    lm.qa.retain(|ex| eval.docs.iter().all(|d| d.raw != ex.context.raw));
    let seqs = lm_sequences(&lm);
    let mut bb = Backbone::init(BackboneConfig::default(), 0).unwrap();
    let cfg = TrainConfig {
        stage: Stage::Backbone,
        lr: 3e-3,
        epochs: 4,
        ..TrainConfig::pretrain()
    };
    train_backbone(&mut bb, &seqs, &cfg, &quiet()).unwrap();
    bb
}

fn quiet() -> TrainOptions {
    TrainOptions {
        quiet: true,
        ..Default::default()
    }
}

fn eval_corpus() -> Corpus {
    let spec = CorpusSpec {
        min_len: 30,
        max_len: 60,
        ..Default::default()
    };
    gen_synthetic_corpus(&spec, 1).unwrap()
}

fn mean_comp_loss(bb: &Backbone, hn: &Hypernet, corpus: &Corpus) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let total: f64 = corpus
        .docs
        .iter()
        .map(|d| comp_loss(bb, hn, &d.tokens, &mut rng).unwrap().loss)
        .sum();
    total / corpus.docs.len() as f64
}

fn memorization(bb: &Backbone, corpus: &Corpus) -> (Outcome, Hypernet) {
    let hn = Hypernet::init(HypernetConfig::default(), bb, 1).unwrap();
    let mut st = TrainState::new(hn, Default::default());
    let cfg = TrainConfig {
        lr: 2e-3,
        lambda: 0.6,
        batch_size: 4,
        epochs: 1001,
        max_len: 60,
        max_steps: Some(2000),
        warmup_frac: 0.05,
        ..TrainConfig::pretrain()
    };
    let data = TrainData::Pretrain(&corpus.docs);
    train(
        bb,
        &mut st,
        &data,
        &cfg,
        &TrainOptions {
            stop_after: Some(10),
            ..quiet()
        },
    )
    .unwrap();
    let comp10 = mean_comp_loss(bb, &st.hn, corpus);
    train(bb, &mut st, &data, &cfg, &quiet()).unwrap();
    let comp_end = mean_comp_loss(bb, &st.hn, corpus);
    let steps = st.step;
    let mut exact = 0;
    let mut ppls = Vec::new();
    for d in &corpus.docs {
        if reconstruct(bb, &st.hn, &d.tokens).unwrap() == d.tokens {
            exact += 1;
        }
        let lora = st.hn.generate_lora(bb, &d.tokens).unwrap();
        let target = [d.tokens.as_slice(), &[EOT]].concat();
        ppls.push(perplexity(bb, Some(&lora), &[USR, RECON, ASSISTANT], &target).unwrap());
    }
    let worst = ppls.iter().copied().fold(0.0, f64::max);
    let drop = 1.0 - comp_end / comp10;
    let pass = steps <= 2000 && exact >= 7 && worst < 1.05 && drop >= 0.3;
    (
        outcome(
            pass,
            format!(
                "{steps} steps, exact {exact}/8, max ppl {worst:.4}, completion loss {comp10:.3} -> {comp_end:.3} ({:.0}% drop)",
                100.0 * drop
            ),
        ),
        st.hn,
    )
}

fn qa_ordering(bb: &Backbone, corpus: &Corpus, pretrained: Hypernet) -> Outcome {
    let mut st = TrainState::new(pretrained, Default::default());
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 30,
        warmup_frac: 0.05,
        ..TrainConfig::ift()
    };
    train(bb, &mut st, &TrainData::Ift(&corpus.qa), &cfg, &quiet()).unwrap();
    let ecfg = EvalConfig {
        methods: vec![Method::Naive, Method::Hypernet],
        ..Default::default()
    };
    let report = run_eval(bb, Some(&st.hn), &corpus.qa, &ecfg).unwrap();
    let naive = report.summary(Method::Naive).unwrap().mean_f1;
    let hyper = report.summary(Method::Hypernet).unwrap().mean_f1;
    let leaks = report
        .rows
        .iter()
        .filter(|r| r.method == Method::Hypernet)
        .filter(|r| {
            let ex = corpus.qa.iter().find(|e| e.context.id == r.example).unwrap();
            r.input_contains(&ex.context.tokens)
        })
        .count();
    outcome(
        hyper > naive && leaks == 0,
        format!("F1 hypernet {hyper:.3} vs naive {naive:.3}; generation inputs containing context: {leaks}"),
    )
}

fn meta_rank_trend(bb: &Backbone) -> Outcome {
    let spec = CorpusSpec {
        num_docs: 272,
        min_len: 30,
        max_len: 60,
        ..Default::default()
    };
    let corpus = gen_synthetic_corpus(&spec, 7).unwrap();
    let (train_docs, val) = corpus.docs.split_at(256);
    let mut ppl = Vec::new();
    for r_meta in [2, 8] {
        let hn = Hypernet::init(HypernetConfig { r_meta, ..Default::default() }, bb, 3).unwrap();
        let mut st = TrainState::new(hn, Default::default());
        let cfg = TrainConfig {
            lr: 1e-3,
            lambda: 0.6,
            epochs: 10,
            max_len: 60,
            max_steps: Some(1000),
            warmup_frac: 0.05,
            ..TrainConfig::pretrain()
        };
        train(bb, &mut st, &TrainData::Pretrain(train_docs), &cfg, &quiet()).unwrap();
        let nll: f64 = val
            .iter()
            .map(|d| {
                let lora = st.hn.generate_lora(bb, &d.tokens).unwrap();
                let target = [d.tokens.as_slice(), &[EOT]].concat();
                perplexity(bb, Some(&lora), &[USR, RECON, ASSISTANT], &target).unwrap().ln()
            })
            .sum();
        ppl.push((nll / val.len() as f64).exp());
    }
    outcome(ppl[1] <= ppl[0], format!("validation ppl r_meta=2 {:.3}, r_meta=8 {:.3}", ppl[0], ppl[1]))
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let mut fails = Vec::new();
    let spec = CorpusSpec::default();
    let (c1, c2) = (gen_synthetic_corpus(&spec, 5).unwrap(), gen_synthetic_corpus(&spec, 5).unwrap());
    if c1.docs != c2.docs || c1.qa != c2.qa {
        fails.push("corpus differs under equal seeds".to_string());
    }
    let p1 = pack_contexts(&c1.docs, 128, 0.5, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let p2 = pack_contexts(&c2.docs, 128, 0.5, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    if p1.items != p2.items {
        fails.push("packing differs under equal seeds".into());
    }

    let bb = Backbone::init(BackboneConfig::default(), 31).unwrap();
    let hn = Hypernet::init(HypernetConfig::default(), &bb, 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 20,
        batch_size: 2,
        max_len: 128,
        checkpoint_every: 5,
        ..TrainConfig::pretrain()
    };
    let data = TrainData::Pretrain(&c1.docs);
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(15),
        quiet: true,
        log_every: 0,
    };
    let mut st = TrainState::new(hn, Default::default());
    let first = train(&bb, &mut st, &data, &cfg, &opts).unwrap();
    let (mut resumed, _) = TrainState::load(&checkpoint_dir(dir.path(), 5), &bb).unwrap();
    let replay_dir = tempfile::tempdir().unwrap();
    let second = train(
        &bb,
        &mut resumed,
        &data,
        &cfg,
        &TrainOptions {
            out_dir: Some(replay_dir.path().to_path_buf()),
            ..opts
        },
    )
    .unwrap();
    let a: Vec<u64> = first.records[5..15].iter().map(|r| r.loss.to_bits()).collect();
    let b: Vec<u64> = second.records.iter().map(|r| r.loss.to_bits()).collect();
    if a.len() != 10 || a != b {
        fails.push(format!("resume replay mismatch ({} vs {} losses)", a.len(), b.len()));
    }
    if resumed.hn.params().iter().zip(st.hn.params()).any(|(x, y)| x.2 != y.2) {
        fails.push("parameters differ after replay".into());
    }
    outcome(fails.is_empty(), format!("10 replayed losses bit-identical: {}; {}", a == b, fails.join("; ")))
}

fn main() {
    // Accept and ignore libtest flags passed by `cargo test`.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut hard_fail = 0;
    let mut report = |id: u32, name: &str, soft: bool, started: Instant, o: Outcome| {
        let status = match (o.pass, soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        if !o.pass && !soft {
            hard_fail += 1;
        }
        println!(
            "[{status}] {id:>2} {name:<24} {:>7.1}s  {}",
            started.elapsed().as_secs_f64(),
            o.detail
        );
    };

    let t = Instant::now();
    report(1, "memory sizing", false, t, memory_sizing());
    let t = Instant::now();
    report(2, "cost model oracle", false, t, cost_oracle());
    let t = Instant::now();
    report(3, "efficiency inequality", false, t, efficiency());
    let t = Instant::now();
    report(4, "axial attention saving", false, t, axial_saving());
    let t = Instant::now();
    report(5, "gradient check", false, t, gradient_check());
    let t = Instant::now();
    report(6, "structural invariants", false, t, structural());

    let t = Instant::now();
    let corpus = eval_corpus();
    let bb = toy_backbone(&corpus);
    println!("       toy backbone trained in {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let (o7, pretrained) = memorization(&bb, &corpus);
    report(7, "memorization", false, t, o7);
    let t = Instant::now();
    report(8, "qa ordering", false, t, qa_ordering(&bb, &corpus, pretrained));
    let t = Instant::now();
    report(9, "meta rank trend (soft)", true, t, meta_rank_trend(&bb));
    let t = Instant::now();
    report(10, "determinism", false, t, determinism());

    if hard_fail > 0 {
        println!("{hard_fail} criteria failed");
        std::process::exit(1);
    }
}
