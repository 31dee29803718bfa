//! Context documents, QA datasets, synthetic fact corpora and packing.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextDoc {
    pub id: String,
    pub raw: String,
    pub tokens: Vec<u32>,
}

impl ContextDoc {
    pub fn new(id: impl Into<String>, raw: impl Into<String>) -> Result<Self> {
        let raw = raw.into();
        let tokens = tokenizer::encode(&raw);
        if tokens.is_empty() {
            return Err(Error::Invalid("context must contain at least one token".into()));
        }
        Ok(Self {
            id: id.into(),
            raw,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaTurn {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QAExample {
    pub context: ContextDoc,
    pub turns: Vec<QaTurn>,
}

impl QAExample {
    pub fn new(context: ContextDoc, turns: Vec<QaTurn>) -> Result<Self> {
        if turns.is_empty() {
            return Err(Error::Invalid(format!("example {} has no QA turns", context.id)));
        }
        if let Some(t) = turns.iter().find(|t| t.answer.is_empty()) {
            return Err(Error::Invalid(format!(
                "example {}: empty answer to {:?}",
                context.id, t.question
            )));
        }
        Ok(Self { context, turns })
    }
}

/// Value vocabulary of the synthetic facts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabProfile {
    /// Short words and numbers.
    #[default]
    Mixed,
    /// Short words only.
    Words,
    /// Two- and three-digit numbers only.
    Numbers,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_docs: usize,
    /// Document length bounds in tokens, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    pub turns: usize,
    pub profile: VocabProfile,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_docs: 8,
            min_len: 20,
            max_len: 60,
            turns: 3,
            profile: VocabProfile::Mixed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<ContextDoc>,
    pub qa: Vec<QAExample>,
}

const ATTRS: [&str; 10] = ["pet", "hue", "job", "age", "car", "toy", "gem", "cup", "pin", "key"];
const WORDS: [&str; 24] = [
    "owl", "fox", "yak", "emu", "elk", "ram", "red", "tan", "teal", "gold", "jade", "rose", "chef",
    "monk", "poet", "sage", "kite", "drum", "lamp", "bell", "oak", "fig", "ivy", "moss",
];
const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn name<R: Rng>(rng: &mut R) -> String {
    let syllables = rng.random_range(1..=2);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(ONSETS.choose(rng).expect("non-empty"));
        s.push_str(VOWELS.choose(rng).expect("non-empty"));
    }
    s
}

fn value<R: Rng>(profile: VocabProfile, rng: &mut R) -> String {
    let numeric = match profile {
        VocabProfile::Numbers => true,
        VocabProfile::Words => false,
        VocabProfile::Mixed => rng.random_bool(0.4),
    };
    if numeric {
        rng.random_range(10..1000).to_string()
    } else {
        WORDS.choose(rng).expect("non-empty").to_string()
    }
}

struct Fact {
    name: String,
    attr: &'static str,
    value: String,
}

impl Fact {
    fn sentence(&self) -> String {
        format!("{}'s {} is {}.", self.name, self.attr, self.value)
    }

    fn question(&self) -> String {
        format!("what is {}'s {}?", self.name, self.attr)
    }
}

fn try_doc<R: Rng>(spec: &CorpusSpec, rng: &mut R) -> Option<(String, Vec<Fact>)> {
    let mut facts: Vec<Fact> = Vec::new();
    let mut text = String::new();
    let target = rng.random_range(spec.min_len..=spec.max_len);
    for _ in 0..64 {
        let fact = Fact {
            name: name(rng),
            attr: ATTRS.choose(rng).expect("non-empty"),
            value: value(spec.profile, rng),
        };
        if facts.iter().any(|f| f.name == fact.name && f.attr == fact.attr) {
            continue;
        }
        let s = fact.sentence();
        let extra = s.len() + usize::from(!text.is_empty());
        if text.len() + extra > spec.max_len {
            if facts.len() >= spec.turns && text.len() >= spec.min_len {
                break;
            }
            continue;
        }
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(&s);
        facts.push(fact);
        if facts.len() >= spec.turns && text.len() >= target {
            break;
        }
    }
    (facts.len() >= spec.turns && text.len() >= spec.min_len).then_some((text, facts))
}

/// Deterministic fact documents; every answer occurs verbatim in its context.
pub fn gen_synthetic_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    if spec.num_docs == 0 {
        return Err(Error::Config("corpus needs at least one document".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "invalid length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    if spec.turns == 0 {
        return Err(Error::Config("corpus needs at least one QA turn per document".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(spec.num_docs);
    let mut qa = Vec::with_capacity(spec.num_docs);
    for i in 0..spec.num_docs {
        let (text, facts) = (0..200)
            .find_map(|_| try_doc(spec, &mut rng))
            .ok_or_else(|| {
                Error::Config(format!(
                    "cannot fit {} facts into {}..={} tokens",
                    spec.turns, spec.min_len, spec.max_len
                ))
            })?;
        let doc = ContextDoc::new(format!("doc-{seed}-{i}"), text)?;
        let mut chosen: Vec<&Fact> = facts.iter().collect();
        chosen.shuffle(&mut rng);
        let turns = chosen[..spec.turns]
            .iter()
            .map(|f| QaTurn {
                question: f.question(),
                answer: f.value.clone(),
            })
            .collect();
        qa.push(QAExample::new(doc.clone(), turns)?);
        docs.push(doc);
    }
    Ok(Corpus { docs, qa })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub partial: Vec<u32>,
    pub full: Vec<u32>,
    pub k: usize,
}

/// Drops the last `k ∈ [⌈0.1N⌉, ⌊0.3N⌋]` tokens. `None` when `N < 10`.
pub fn truncate_for_completion<R: Rng + ?Sized>(tokens: &[u32], rng: &mut R) -> Option<Completion> {
    let n = tokens.len();
    if n < 10 {
        return None;
    }
    let lo = n.div_ceil(10);
    let hi = 3 * n / 10;
    let k = rng.random_range(lo..=hi);
    Some(Completion {
        partial: tokens[..n - k].to_vec(),
        full: tokens.to_vec(),
        k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Recon,
    Comp,
}

impl Task {
    pub fn token(self) -> u32 {
        match self {
            Task::Recon => tokenizer::RECON,
            Task::Comp => tokenizer::COMP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    /// Index into the document list given to [`pack_contexts`].
    pub doc: usize,
    pub task: Task,
    /// Tokens of the document visible to the hypernetwork.
    pub visible: Vec<u32>,
    /// Supervision target (the full, possibly length-capped document).
    pub target: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedItem {
    pub segments: Vec<Segment>,
    /// Supervision order: a permutation of segment indices.
    pub order: Vec<usize>,
}

impl PackedItem {
    /// `A ⟨EOT⟩ B ⟨EOT⟩ C` over the visible parts.
    pub fn input(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, s) in self.segments.iter().enumerate() {
            if i > 0 {
                out.push(tokenizer::EOT);
            }
            out.extend(&s.visible);
        }
        out
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.visible.len()).sum::<usize>() + self.segments.len().saturating_sub(1)
    }

    /// Supervision conversation and per-position targets. Only assistant
    /// content and its closing EOT carry a target.
    pub fn conversation(&self) -> (Vec<u32>, Vec<Option<usize>>) {
        let mut tokens = Vec::new();
        let mut supervised = Vec::new();
        for &i in &self.order {
            let s = &self.segments[i];
            tokens.extend([tokenizer::USR, s.task.token(), tokenizer::ASSISTANT]);
            supervised.extend([false, false, false]);
            tokens.extend(&s.target);
            supervised.extend(std::iter::repeat_n(true, s.target.len()));
            tokens.push(tokenizer::EOT);
            supervised.push(true);
        }
        let targets = shifted_targets(&tokens, &supervised);
        (tokens, targets)
    }
}

/// Next-token targets: position `p` predicts `tokens[p+1]` when that token is supervised.
pub fn shifted_targets(tokens: &[u32], supervised: &[bool]) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|p| {
            (p + 1 < tokens.len() && supervised[p + 1]).then(|| tokens[p + 1] as usize)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackWarning {
    pub doc_id: String,
    pub original_len: usize,
    pub truncated_to: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packing {
    pub items: Vec<PackedItem>,
    pub warnings: Vec<PackWarning>,
    /// Documents that were too short to truncate and fell back to reconstruction.
    pub comp_fallbacks: usize,
}

/// Greedy in-order packing. Each segment is a reconstruction task with
/// probability `lambda`, otherwise a completion task on a truncated prefix.
pub fn pack_contexts<R: Rng + ?Sized>(
    docs: &[ContextDoc],
    max_len: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<Packing> {
    if max_len == 0 {
        return Err(Error::Config("packing length must be positive".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut warnings = Vec::new();
    let mut groups: Vec<Vec<(usize, Vec<u32>)>> = Vec::new();
    let mut current: Vec<(usize, Vec<u32>)> = Vec::new();
    let mut used = 0;
    for (i, doc) in docs.iter().enumerate() {
        let mut tokens = doc.tokens.clone();
        if tokens.len() > max_len {
            warnings.push(PackWarning {
                doc_id: doc.id.clone(),
                original_len: tokens.len(),
                truncated_to: max_len,
            });
            tokens.truncate(max_len);
        }
        let need = tokens.len() + usize::from(!current.is_empty());
        if used + need > max_len {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        used += tokens.len() + usize::from(!current.is_empty());
        current.push((i, tokens));
    }
    if !current.is_empty() {
        groups.push(current);
    }
    let mut comp_fallbacks = 0;
    let items = groups
        .into_iter()
        .map(|group| {
            let segments: Vec<Segment> = group
                .into_iter()
                .map(|(doc, tokens)| {
                    let recon = rng.random_bool(lambda);
                    if !recon {
                        if let Some(c) = truncate_for_completion(&tokens, rng) {
                            return Segment {
                                doc,
                                task: Task::Comp,
                                visible: c.partial,
                                target: c.full,
                            };
                        }
                        comp_fallbacks += 1;
                    }
                    Segment {
                        doc,
                        task: Task::Recon,
                        visible: tokens.clone(),
                        target: tokens,
                    }
                })
                .collect();
            let mut order: Vec<usize> = (0..segments.len()).collect();
            order.shuffle(rng);
            PackedItem { segments, order }
        })
        .collect();
    Ok(Packing {
        items,
        warnings,
        comp_fallbacks,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QaRecord {
    q: String,
    a: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    context: String,
    qa: Vec<QaRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

fn parse_record(line: &str, lineno: usize) -> std::result::Result<QAExample, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.qa.is_empty() {
        return Err("field `qa` must list at least one turn".into());
    }
    if let Some(i) = rec.qa.iter().position(|t| t.a.is_empty()) {
        return Err(format!("field `qa[{i}].a` is empty"));
    }
    let id = rec.id.unwrap_or_else(|| format!("line-{lineno}"));
    let doc = ContextDoc::new(id, rec.context).map_err(|_| "field `context` is empty".to_string())?;
    let turns = rec
        .qa
        .into_iter()
        .map(|t| QaTurn {
            question: t.q,
            answer: t.a,
        })
        .collect();
    QAExample::new(doc, turns).map_err(|e| e.to_string())
}

fn read_records(path: &Path) -> Result<Vec<(usize, std::result::Result<QAExample, String>)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, parse_record(l, i + 1)))
        .collect())
}

/// Strict loading: the first malformed line is an error.
pub fn load_dataset(path: &Path) -> Result<Vec<QAExample>> {
    read_records(path)?
        .into_iter()
        .map(|(line, r)| {
            r.map_err(|message| Error::Dataset {
                path: path.to_path_buf(),
                line,
                message,
            })
        })
        .collect()
}

/// Lenient loading: malformed lines become diagnostics.
pub fn load_dataset_lenient(path: &Path) -> Result<(Vec<QAExample>, Vec<Diagnostic>)> {
    let mut ok = Vec::new();
    let mut diags = Vec::new();
    for (line, r) in read_records(path)? {
        match r {
            Ok(ex) => ok.push(ex),
            Err(message) => diags.push(Diagnostic { line, message }),
        }
    }
    Ok((ok, diags))
}

pub fn save_dataset(path: &Path, examples: &[QAExample]) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        let rec = Record {
            id: Some(ex.context.id.clone()),
            context: ex.context.raw.clone(),
            qa: ex
                .turns
                .iter()
                .map(|t| QaRecord {
                    q: t.question.clone(),
                    a: t.answer.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc_of_len(id: usize, n: usize) -> ContextDoc {
        ContextDoc::new(format!("d{id}"), "x".repeat(n)).unwrap()
    }

    #[test]
    fn synthetic_corpus_contract() {
        let spec = CorpusSpec::default();
        let c = gen_synthetic_corpus(&spec, 1).unwrap();
        assert_eq!(c.docs.len(), 8);
        for ex in &c.qa {
            assert_eq!(ex.turns.len(), 3);
            assert!((20..=60).contains(&ex.context.len()), "{}", ex.context.raw);
            for t in &ex.turns {
                assert!(ex.context.raw.contains(&t.answer));
            }
        }
        assert_eq!(c, gen_synthetic_corpus(&spec, 1).unwrap());
        assert_ne!(c.docs, gen_synthetic_corpus(&spec, 2).unwrap().docs);
    }

    #[test]
    fn synthetic_corpus_rejects_bad_specs() {
        let zero = CorpusSpec { num_docs: 0, ..Default::default() };
        assert!(gen_synthetic_corpus(&zero, 1).is_err());
        let tiny = CorpusSpec { min_len: 1, max_len: 5, ..Default::default() };
        assert!(gen_synthetic_corpus(&tiny, 1).is_err());
    }

    #[test]
    fn truncation_bounds() {
        let tokens: Vec<u32> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let c = truncate_for_completion(&tokens, &mut rng).unwrap();
            assert!((70..=90).contains(&c.partial.len()));
            assert_eq!(&c.full[..c.partial.len()], &c.partial[..]);
        }
        assert!(truncate_for_completion(&tokens[..9], &mut rng).is_none());
        let a = truncate_for_completion(&tokens, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = truncate_for_completion(&tokens, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.k, b.k);
    }

    #[test]
    fn packing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let docs: Vec<_> = [3, 4, 5].iter().enumerate().map(|(i, &n)| doc_of_len(i, n)).collect();
        let p = pack_contexts(&docs, 20, 1.0, &mut rng).unwrap();
        assert_eq!(p.items.len(), 1);
        assert_eq!(p.items[0].total_len(), 14);
        assert_eq!(p.items[0].input().len(), 14);
        let docs: Vec<_> = [15, 10].iter().enumerate().map(|(i, &n)| doc_of_len(i, n)).collect();
        assert_eq!(pack_contexts(&docs, 20, 0.5, &mut rng).unwrap().items.len(), 2);
    }

    #[test]
    fn oversize_documents_are_truncated_with_warning() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let docs = vec![doc_of_len(0, 30)];
        let p = pack_contexts(&docs, 20, 1.0, &mut rng).unwrap();
        assert_eq!(p.warnings.len(), 1);
        assert_eq!(p.warnings[0].truncated_to, 20);
        assert_eq!(p.items[0].total_len(), 20);
    }

    #[test]
    fn conversation_supervises_assistant_content_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let docs = vec![doc_of_len(0, 3), doc_of_len(1, 2)];
        let p = pack_contexts(&docs, 20, 1.0, &mut rng).unwrap();
        let (tokens, targets) = p.items[0].conversation();
        assert_eq!(tokens.len(), 2 * 4 + 5);
        let supervised = targets.iter().filter(|t| t.is_some()).count();
        assert_eq!(supervised, 3 + 1 + 2 + 1);
        for (p, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                assert_eq!(*t as u32, tokens[p + 1]);
                assert!(![tokenizer::USR, tokenizer::RECON, tokenizer::ASSISTANT].contains(&tokens[p + 1]));
            }
        }
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let c = gen_synthetic_corpus(&CorpusSpec::default(), 5).unwrap();
        save_dataset(&path, &c.qa).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), c.qa);

        fs::write(&path, "{\"context\": \"abc\"}\n").unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains(":1:") && err.contains("qa"), "{err}");

        let good = r#"{"context": "x is 1.", "qa": [{"q": "x?", "a": "1"}]}"#;
        fs::write(&path, format!("{good}\n{good}\n{{\"qa\": []}}\n{good}\n")).unwrap();
        let (ok, diags) = load_dataset_lenient(&path).unwrap();
        assert_eq!(ok.len(), 3);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].line, 3);
    }
}
