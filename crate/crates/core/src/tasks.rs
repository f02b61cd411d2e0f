//! Synthetic sequence tasks, JSONL ingestion and train/test leakage checks.
//!
//! Source layouts use the reserved markers of [`crate::vocab`]:
//!
//! ```text
//! sum     w w w w w w w w w w w w          target: top-k frequent
//! qa      <m3> w w w w w <m9> w w w w w    query <m9>, target: first w after it
//! qfs     <m3> w w w w w <m9> w w w w w    query <m9>, target: top-k of that segment
//! copy    w w w w w                        target: the source
//! denoise w <mask> <m2> w <mask> w          target: the uncorrupted text
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{self, Vocab, CONTENT_BASE, MASK, SEP};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub query: Vec<usize>,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    /// `prompt ⊕ query ⊕ [<sep>] ⊕ source`; the separator only appears with a query.
    pub fn input_tokens(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.input_len());
        out.extend_from_slice(&self.prompt);
        if !self.query.is_empty() {
            out.extend_from_slice(&self.query);
            out.push(SEP);
        }
        out.extend_from_slice(&self.source);
        out
    }

    pub fn input_len(&self) -> usize {
        let q = if self.query.is_empty() { 0 } else { self.query.len() + 1 };
        self.prompt.len() + q + self.source.len()
    }

    pub fn with_prompt(&self, prompt: &[usize]) -> Self {
        Self {
            prompt: prompt.to_vec(),
            ..self.clone()
        }
    }

    /// Cut the source tail and target tail so the input fits `max_src` and
    /// the target plus its end-of-sequence token fits `max_tgt`.
    pub fn truncated(&self, max_src: usize, max_tgt: usize) -> Result<Self> {
        let fixed = self.input_len() - self.source.len();
        if fixed >= max_src || max_tgt < 2 {
            return Err(Error::Length(format!(
                "prompt and query take {fixed} of {max_src} source slots"
            )));
        }
        let mut out = self.clone();
        out.source.truncate(max_src - fixed);
        out.target.truncate(max_tgt - 1);
        Ok(out)
    }

    /// Length error unless the example fits without truncation.
    pub fn check_fits(&self, max_src: usize, max_tgt: usize) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::Length("empty target".into()));
        }
        if self.input_len() > max_src || self.target.len() + 1 > max_tgt {
            return Err(Error::Length(format!(
                "example has input {} / target {}+1, limits {max_src} / {max_tgt}",
                self.input_len(),
                self.target.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Sum,
    Qa,
    Qfs,
    Copy,
    Denoise,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Sum => "sum",
            TaskKind::Qa => "qa",
            TaskKind::Qfs => "qfs",
            TaskKind::Copy => "copy",
            TaskKind::Denoise => "denoise",
        }
    }

    /// Literal prompt words. The composite task uses the concatenation of the
    /// summarization and question-answering prompts.
    pub fn prompt(self) -> Vec<usize> {
        use crate::vocab::*;
        match self {
            TaskKind::Sum => vec![PROMPT_SUMMARIZE],
            TaskKind::Qa => vec![PROMPT_ANSWER, PROMPT_THE, PROMPT_QUESTION],
            TaskKind::Qfs => vec![
                PROMPT_SUMMARIZE,
                PROMPT_AND,
                PROMPT_ANSWER,
                PROMPT_THE,
                PROMPT_QUESTION,
            ],
            TaskKind::Copy => vec![PROMPT_COPY],
            TaskKind::Denoise => vec![PROMPT_DENOISE],
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(TaskKind::Sum),
            "qa" => Ok(TaskKind::Qa),
            "qfs" => Ok(TaskKind::Qfs),
            "copy" => Ok(TaskKind::Copy),
            "denoise" => Ok(TaskKind::Denoise),
            _ => Err(Error::Config(format!("unknown task kind {s:?}"))),
        }
    }
}

/// Knobs shared by the synthetic generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    /// Content ids are drawn from `CONTENT_BASE..vocab_size`.
    pub vocab_size: usize,
    /// Source length for sum and copy; window length for denoise.
    pub src_len: usize,
    /// Distinct words a sum source (or one qfs segment) is sampled from.
    pub pool: usize,
    /// Summary length.
    pub k: usize,
    /// Answer length.
    pub answer_len: usize,
    pub n_segments: usize,
    /// Content words per segment, marker excluded.
    pub seg_len: usize,
    pub mask_prob: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            src_len: 12,
            pool: 5,
            k: 2,
            answer_len: 2,
            n_segments: 3,
            seg_len: 6,
            mask_prob: 0.25,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let content = self.vocab_size.saturating_sub(CONTENT_BASE);
        if content < self.pool.max(self.n_segments * self.pool).max(self.src_len) {
            return Err(Error::Config(format!(
                "vocab {} too small for these generator params",
                self.vocab_size
            )));
        }
        if self.k == 0 || self.answer_len == 0 || self.src_len == 0 || self.seg_len == 0 {
            return Err(Error::Config("generator lengths must be positive".into()));
        }
        if self.pool < self.k || self.n_segments == 0 || self.n_segments > vocab::N_MARKERS {
            return Err(Error::Config(format!(
                "need k <= pool and 1..={} segments",
                vocab::N_MARKERS
            )));
        }
        if self.answer_len >= self.seg_len {
            return Err(Error::Config("answer_len must be below seg_len".into()));
        }
        Ok(())
    }

    fn content(&self) -> std::ops::Range<usize> {
        CONTENT_BASE..self.vocab_size
    }
}

/// The `k` most frequent content tokens of `tokens`, by descending count,
/// ties broken by first occurrence. Non-content tokens are ignored.
pub fn top_k_frequent(tokens: &[usize], k: usize) -> Vec<usize> {
    let mut first: HashMap<usize, usize> = HashMap::new();
    let mut count: HashMap<usize, usize> = HashMap::new();
    for (i, &t) in tokens.iter().enumerate() {
        if vocab::is_content(t) {
            first.entry(t).or_insert(i);
            *count.entry(t).or_default() += 1;
        }
    }
    let mut distinct: Vec<usize> = first.keys().copied().collect();
    distinct.sort_by(|a, b| count[b].cmp(&count[a]).then(first[a].cmp(&first[b])));
    distinct.truncate(k);
    distinct
}

/// The `w` tokens right after the first occurrence of `marker`, if all present.
pub fn answer_after_marker(tokens: &[usize], marker: usize, w: usize) -> Option<Vec<usize>> {
    let pos = tokens.iter().position(|&t| t == marker)?;
    let span = tokens.get(pos + 1..pos + 1 + w)?;
    Some(span.to_vec())
}

/// Tokens of the segment opened by `marker`, up to the next marker.
pub fn segment_of(tokens: &[usize], marker: usize) -> Option<&[usize]> {
    let start = tokens.iter().position(|&t| t == marker)? + 1;
    let len = tokens[start..]
        .iter()
        .position(|&t| vocab::is_marker(t))
        .unwrap_or(tokens.len() - start);
    Some(&tokens[start..start + len])
}

/// Sample `len` tokens from `pool` with weights `1, 1/2, 1/3, ...` so that a
/// few words dominate.
fn skewed(pool: &[usize], len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let weights: Vec<f64> = (1..=pool.len()).map(|i| 1.0 / i as f64).collect();
    let total: f64 = weights.iter().sum();
    (0..len)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            for (w, &t) in weights.iter().zip(pool) {
                if u < *w {
                    return t;
                }
                u -= w;
            }
            *pool.last().expect("non-empty pool")
        })
        .collect()
}

fn distinct_content(p: &GenParams, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let all: Vec<usize> = p.content().collect();
    all.choose_multiple(rng, n).copied().collect()
}

fn random_content(p: &GenParams, len: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(p.content())).collect()
}

fn markers(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let all: Vec<usize> = (0..vocab::N_MARKERS).map(vocab::marker).collect();
    all.choose_multiple(rng, n).copied().collect()
}

fn example(kind: TaskKind, query: Vec<usize>, source: Vec<usize>, target: Vec<usize>) -> Example {
    Example {
        prompt: kind.prompt(),
        query,
        source,
        target,
    }
}

/// Frequency "summary" of a skewed random sequence. `None` when the sampled
/// source has fewer than `k` distinct words.
pub fn gen_sum(p: &GenParams, rng: &mut impl Rng) -> Option<Example> {
    let pool = distinct_content(p, p.pool, rng);
    let source = skewed(&pool, p.src_len, rng);
    let target = top_k_frequent(&source, p.k);
    (target.len() == p.k).then(|| example(TaskKind::Sum, vec![], source, target))
}

/// Marker-delimited segments of uniform random words; the query names one
/// marker and the answer is the `answer_len` words following it.
pub fn gen_qa(p: &GenParams, rng: &mut impl Rng) -> Option<Example> {
    let ms = markers(p.n_segments, rng);
    let mut source = Vec::with_capacity(p.n_segments * (p.seg_len + 1));
    for &m in &ms {
        source.push(m);
        source.extend(random_content(p, p.seg_len, rng));
    }
    let q = *ms.choose(rng)?;
    let target = answer_after_marker(&source, q, p.answer_len)?;
    Some(example(TaskKind::Qa, vec![q], source, target))
}

/// Marker-delimited skewed segments over disjoint word pools; the target is
/// the frequency summary of the queried segment only.
pub fn gen_qfs(p: &GenParams, rng: &mut impl Rng) -> Option<Example> {
    let ms = markers(p.n_segments, rng);
    let words = distinct_content(p, p.n_segments * p.pool, rng);
    let mut source = Vec::with_capacity(p.n_segments * (p.seg_len + 1));
    for (i, &m) in ms.iter().enumerate() {
        source.push(m);
        source.extend(skewed(&words[i * p.pool..(i + 1) * p.pool], p.seg_len, rng));
    }
    let q = *ms.choose(rng)?;
    let target = top_k_frequent(segment_of(&source, q)?, p.k);
    (target.len() == p.k).then(|| example(TaskKind::Qfs, vec![q], source, target))
}

pub fn gen_copy(p: &GenParams, rng: &mut impl Rng) -> Option<Example> {
    let source = random_content(p, p.src_len, rng);
    Some(example(TaskKind::Copy, vec![], source.clone(), source))
}

/// Unlabeled text shaped like the task sources: either one skewed run or
/// marker-delimited segments, cropped to `src_len` at a random offset.
fn in_domain_text(p: &GenParams, rng: &mut impl Rng) -> Vec<usize> {
    let text = if rng.random::<bool>() {
        let pool = distinct_content(p, p.pool, rng);
        skewed(&pool, p.src_len, rng)
    } else {
        let ms = markers(p.n_segments, rng);
        let words = distinct_content(p, p.n_segments * p.pool, rng);
        let mut t = Vec::with_capacity(p.n_segments * (p.seg_len + 1));
        for (i, &m) in ms.iter().enumerate() {
            t.push(m);
            t.extend(skewed(&words[i * p.pool..(i + 1) * p.pool], p.seg_len, rng));
        }
        t
    };
    let start = rng.random_range(0..=text.len().saturating_sub(p.src_len));
    text[start..(start + p.src_len).min(text.len())].to_vec()
}

/// In-domain text with each word replaced by `<mask>` with probability
/// `mask_prob`; the target is the clean text.
pub fn gen_denoise(p: &GenParams, rng: &mut impl Rng) -> Option<Example> {
    let target = in_domain_text(p, rng);
    let source = target
        .iter()
        .map(|&t| if rng.random::<f64>() < p.mask_prob { MASK } else { t })
        .collect();
    Some(example(TaskKind::Denoise, vec![], source, target))
}

const MAX_ATTEMPTS: usize = 1000;

/// `n` examples of `kind`, deterministic in `seed`. Rejected draws are
/// regenerated.
pub fn generate(kind: TaskKind, p: &GenParams, seed: u64, n: usize) -> Result<Vec<Example>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen: fn(&GenParams, &mut ChaCha8Rng) -> Option<Example> = match kind {
        TaskKind::Sum => gen_sum,
        TaskKind::Qa => gen_qa,
        TaskKind::Qfs => gen_qfs,
        TaskKind::Copy => gen_copy,
        TaskKind::Denoise => gen_denoise,
    };
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let ex = (0..MAX_ATTEMPTS)
            .find_map(|_| gen(p, &mut rng))
            .ok_or_else(|| Error::Config(format!("{} generator keeps rejecting", kind.name())))?;
        out.push(ex);
    }
    Ok(out)
}

/// Field names of a JSONL record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMap {
    pub input: String,
    pub query: String,
    pub target: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            input: "input".into(),
            query: "query".into(),
            target: "target".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic { seed: u64, size: usize },
    Jsonl {
        path: PathBuf,
        #[serde(default)]
        field_map: FieldMap,
    },
}

/// A named task: prompt words plus where its examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub kind: TaskKind,
    pub prompt: Vec<usize>,
    pub source: DataSource,
}

impl TaskSpec {
    pub fn synthetic(task_id: usize, kind: TaskKind, seed: u64, size: usize) -> Self {
        Self {
            task_id,
            name: kind.name().into(),
            kind,
            prompt: kind.prompt(),
            source: DataSource::Synthetic { seed, size },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&bad) = self.prompt.iter().find(|t| !vocab::PROMPT_RANGE.contains(t)) {
            return Err(Error::Config(format!(
                "task {}: prompt token {bad} outside the reserved prompt range",
                self.name
            )));
        }
        Ok(())
    }

    /// Materialize the dataset with this spec's prompt applied.
    pub fn load(&self, params: &GenParams, vocab: &Vocab) -> Result<Vec<Example>> {
        self.validate()?;
        let examples = match &self.source {
            DataSource::Synthetic { seed, size } => generate(self.kind, params, *seed, *size)?,
            DataSource::Jsonl { path, field_map } => load_jsonl(path, field_map, vocab)?.examples,
        };
        Ok(examples.into_iter().map(|e| e.with_prompt(&self.prompt)).collect())
    }
}

/// Distinct tasks must have distinct prompts.
pub fn check_distinct_prompts(tasks: &[TaskSpec]) -> Result<()> {
    for (i, a) in tasks.iter().enumerate() {
        for b in &tasks[i + 1..] {
            if a.prompt == b.prompt && a.kind != b.kind {
                return Err(Error::Config(format!(
                    "tasks {} and {} share a prompt",
                    a.name, b.name
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct JsonlData {
    pub examples: Vec<Example>,
    /// Records skipped for a missing or non-string field.
    pub skipped: usize,
}

/// One example per line. Examples come back with an empty prompt.
pub fn load_jsonl(path: &Path, fields: &FieldMap, vocab: &Vocab) -> Result<JsonlData> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let field = |name: &str| rec.get(name).and_then(|v| v.as_str());
        let (Some(input), Some(target)) = (field(&fields.input), field(&fields.target)) else {
            log::warn!("{}:{}: missing input or target, skipped", path.display(), i + 1);
            skipped += 1;
            continue;
        };
        let target = vocab.encode(target);
        if target.is_empty() {
            skipped += 1;
            continue;
        }
        examples.push(Example {
            prompt: vec![],
            query: field(&fields.query).map(|q| vocab.encode(q)).unwrap_or_default(),
            source: vocab.encode(input),
            target,
        });
    }
    Ok(JsonlData { examples, skipped })
}

pub fn export_jsonl(examples: &[Example], vocab: &Vocab, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for e in examples {
        let mut rec = serde_json::Map::new();
        rec.insert("input".into(), vocab.decode(&e.source).into());
        if !e.query.is_empty() {
            rec.insert("query".into(), vocab.decode(&e.query).into());
        }
        rec.insert("target".into(), vocab.decode(&e.target).into());
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Word-level Levenshtein distance.
pub fn word_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakagePair {
    pub test_idx: usize,
    pub train_idx: usize,
    pub word_diff: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub n_test: usize,
    pub n_leaked: usize,
    pub ratio: f64,
    pub max_word_diff: usize,
    pub pairs: Vec<LeakagePair>,
}

/// A test target leaks when some train target lies strictly within
/// `max_word_diff` word edits. Each leaked test target reports its closest
/// train target (lowest index on ties).
pub fn leakage_check(train: &[String], test: &[String], max_word_diff: usize) -> Result<LeakageReport> {
    if test.is_empty() {
        return Err(Error::Contract("leakage check needs a non-empty test set".into()));
    }
    let train_words: Vec<Vec<&str>> = train.iter().map(|s| s.split_whitespace().collect()).collect();
    let mut pairs = Vec::new();
    for (test_idx, t) in test.iter().enumerate() {
        let tw: Vec<&str> = t.split_whitespace().collect();
        let best = train_words
            .iter()
            .enumerate()
            .filter(|(_, w)| w.len().abs_diff(tw.len()) < max_word_diff)
            .map(|(j, w)| (word_edit_distance(&tw, w), j))
            .min();
        if let Some((word_diff, train_idx)) = best.filter(|(d, _)| *d < max_word_diff) {
            pairs.push(LeakagePair {
                test_idx,
                train_idx,
                word_diff,
            });
        }
    }
    Ok(LeakageReport {
        n_test: test.len(),
        n_leaked: pairs.len(),
        ratio: pairs.len() as f64 / test.len() as f64,
        max_word_diff,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_summary_by_hand() {
        // a a b b b c with k=2 → b a
        let (a, b, c) = (40, 41, 42);
        assert_eq!(top_k_frequent(&[a, a, b, b, b, c], 2), vec![b, a]);
        assert_eq!(top_k_frequent(&[c, a, b], 1), vec![c]);
        assert_eq!(top_k_frequent(&[c, a, b, a], 3), vec![a, c, b]);
    }

    #[test]
    fn answer_and_segment_lookup() {
        let (m1, m2) = (vocab::marker(1), vocab::marker(2));
        let src = [m1, 40, 41, 42, m2, 50, 51, 52];
        assert_eq!(answer_after_marker(&src, m2, 2), Some(vec![50, 51]));
        assert_eq!(answer_after_marker(&src, m2, 4), None);
        assert_eq!(answer_after_marker(&src, vocab::marker(3), 1), None);
        assert_eq!(segment_of(&src, m1), Some(&src[1..4]));
        assert_eq!(segment_of(&src, m2), Some(&src[5..]));
    }

    #[test]
    fn generators_are_deterministic() {
        let p = GenParams::default();
        for kind in [TaskKind::Sum, TaskKind::Qa, TaskKind::Qfs, TaskKind::Copy, TaskKind::Denoise] {
            let a = generate(kind, &p, 9, 20).unwrap();
            assert_eq!(a, generate(kind, &p, 9, 20).unwrap());
            assert_ne!(a, generate(kind, &p, 10, 20).unwrap());
            for e in &a {
                assert_eq!(e.prompt, kind.prompt());
                assert!(!e.target.is_empty());
                assert!(e.source.iter().chain(&e.target).all(|t| !vocab::PROMPT_RANGE.contains(t)));
            }
        }
    }

    #[test]
    fn input_layout() {
        let e = Example {
            prompt: vec![6],
            query: vec![vocab::marker(0)],
            source: vec![40, 41],
            target: vec![40],
        };
        assert_eq!(e.input_tokens(), vec![6, vocab::marker(0), SEP, 40, 41]);
        assert_eq!(e.input_len(), 5);
        let t = e.truncated(4, 12).unwrap();
        assert_eq!(t.source, vec![40]);
        assert!(e.truncated(3, 12).is_err());
        assert!(e.check_fits(4, 12).is_err());
    }

    #[test]
    fn edit_distance_by_hand() {
        assert_eq!(word_edit_distance(&["the", "cat", "sat"], &["the", "cat", "sits"]), 1);
        assert_eq!(word_edit_distance::<&str>(&[], &["a", "b"]), 2);
        assert_eq!(word_edit_distance(&["a", "b", "c"], &["b", "c", "a"]), 2);
    }

    #[test]
    fn leakage_cases() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let r = leakage_check(&s(&["the cat sat"]), &s(&["the cat sits", "dog runs far"]), 2).unwrap();
        assert_eq!(r.n_leaked, 1);
        assert_eq!(r.pairs[0].word_diff, 1);
        assert_eq!(r.ratio, 0.5);
        let same = s(&["a b", "c d"]);
        assert_eq!(leakage_check(&same, &same, 2).unwrap().ratio, 1.0);
        assert_eq!(leakage_check(&s(&["x y"]), &s(&["p q"]), 2).unwrap().ratio, 0.0);
        assert!(matches!(leakage_check(&same, &[], 2), Err(Error::Contract(_))));
    }
}
