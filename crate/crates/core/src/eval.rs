//! ROUGE scoring and prefix-attention profiles.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionTrace, DecodeOptions, ForwardTraces, Site, Transformer};
use crate::prefix::{PrefixMatrix, Region};
use crate::tasks::Example;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hits: usize, n_cand: usize, n_ref: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(hits, n_cand), ratio(hits, n_ref));
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Self {
            precision: p,
            recall: r,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap. Sequences shorter than `n` score 0.
pub fn rouge_n<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> Prf {
    let (c, r) = (ngram_counts(cand, n), ngram_counts(reference, n));
    let hits = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |m: &HashMap<&[T], usize>| m.values().sum();
    Prf::from_counts(hits, total(&c), total(&r))
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: PartialEq>(cand: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(cand, reference), cand.len(), reference.len())
}

/// Lowercased whitespace words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn rouge_tokens<T: Eq + Hash>(cand: &[T], reference: &[T]) -> RougeScore {
    RougeScore {
        r1: rouge_n(cand, reference, 1),
        r2: rouge_n(cand, reference, 2),
        rl: rouge_l(cand, reference),
    }
}

pub fn rouge(cand: &str, reference: &str) -> RougeScore {
    rouge_tokens(&tokenize(cand), &tokenize(reference))
}

/// Componentwise mean; zero for an empty slice.
pub fn mean_rouge(scores: &[RougeScore]) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::default();
    }
    let n = scores.len() as f64;
    let avg = |f: &dyn Fn(&RougeScore) -> Prf| {
        let (p, r, f1) = scores.iter().map(f).fold((0.0, 0.0, 0.0), |acc, x| {
            (acc.0 + x.precision, acc.1 + x.recall, acc.2 + x.f1)
        });
        Prf {
            precision: p / n,
            recall: r / n,
            f1: f1 / n,
        }
    };
    RougeScore {
        r1: avg(&|s| s.r1),
        r2: avg(&|s| s.r2),
        rl: avg(&|s| s.rl),
    }
}

/// Strip a trailing end-of-sequence token before scoring.
pub fn strip_eos(tokens: &[usize], eos: usize) -> &[usize] {
    match tokens.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => tokens,
    }
}

/// Normalized attention mass per prefix row at one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub site: Site,
    /// Prefix row behind each score.
    pub rows: Vec<usize>,
    pub regions: Vec<Region>,
    pub scores: Vec<f64>,
    pub n_samples: usize,
}

impl AttentionProfile {
    /// Score summed per region label.
    pub fn region_totals(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (r, s) in self.regions.iter().zip(&self.scores) {
            *out.entry(r.to_string()).or_insert(0.0) += s;
        }
        out
    }
}

/// Attention restricted to the first `prefix_len` columns, each query row
/// renormalized over them, then averaged over queries, heads and layers.
pub fn prefix_attention(trace: &AttentionTrace) -> Result<Vec<f64>> {
    let lp = trace.prefix_len;
    if lp == 0 {
        return Err(Error::Contract("no prefix to profile".into()));
    }
    if trace.weights.is_empty() {
        return Err(Error::EmptyData("attention trace has no layers".into()));
    }
    let mut by_layer = vec![0.0; lp];
    for heads in &trace.weights {
        let mut by_head = vec![0.0; lp];
        for w in heads {
            let (tq, cols) = w.dims2()?;
            if cols < lp {
                return Err(Error::Shape(format!("trace has {cols} columns, prefix {lp}")));
            }
            let mut by_query = vec![0.0; lp];
            for q in 0..tq {
                let row = &w.row(q)[..lp];
                let mass: f64 = row.iter().sum();
                if !(mass > 0.0) {
                    return Err(Error::Numeric(format!("query {q} puts no mass on the prefix")));
                }
                for (acc, x) in by_query.iter_mut().zip(row) {
                    *acc += x / mass;
                }
            }
            for (acc, x) in by_head.iter_mut().zip(&by_query) {
                *acc += x / tq as f64;
            }
        }
        for (acc, x) in by_layer.iter_mut().zip(&by_head) {
            *acc += x / heads.len() as f64;
        }
    }
    Ok(by_layer.iter().map(|x| x / trace.weights.len() as f64).collect())
}

/// Average of [`prefix_attention`] over samples.
pub fn profile_from_traces(
    site: Site,
    traces: &[&AttentionTrace],
    rows: &[usize],
    regions: &[Region],
) -> Result<AttentionProfile> {
    if traces.is_empty() {
        return Err(Error::EmptyData("no samples to profile".into()));
    }
    if rows.len() != regions.len() {
        return Err(Error::Shape("one region label per row required".into()));
    }
    let mut scores = vec![0.0; rows.len()];
    for t in traces {
        let p = prefix_attention(t)?;
        if p.len() != rows.len() {
            return Err(Error::Shape(format!(
                "trace covers {} prefix rows, expected {}",
                p.len(),
                rows.len()
            )));
        }
        for (acc, x) in scores.iter_mut().zip(&p) {
            *acc += x;
        }
    }
    let n = traces.len() as f64;
    scores.iter_mut().for_each(|s| *s /= n);
    Ok(AttentionProfile {
        site,
        rows: rows.to_vec(),
        regions: regions.to_vec(),
        scores,
        n_samples: traces.len(),
    })
}

fn site_trace(t: &ForwardTraces, site: Site) -> &AttentionTrace {
    match site {
        Site::EncoderSelf => &t.encoder_self,
        Site::DecoderSelf => &t.decoder_self,
        Site::DecoderCross => &t.decoder_cross,
    }
}

/// Profiles for the encoder self-attention and decoder cross-attention over
/// the first `n_samples` examples, decoding greedily with prefix rows `rows`.
pub fn attention_profile(
    model: &Transformer,
    prefix: &PrefixMatrix,
    rows: &[usize],
    data: &[Example],
    n_samples: usize,
    opts: DecodeOptions,
) -> Result<Vec<AttentionProfile>> {
    if rows.is_empty() {
        return Err(Error::Contract("no prefix to profile".into()));
    }
    let view = prefix.view(rows);
    let mut all = Vec::new();
    for ex in data.iter().take(n_samples) {
        let (_, traces) = model.greedy_decode_traced(&ex.input_tokens(), Some(&view), opts)?;
        all.push(traces);
    }
    let regions: Vec<Region> = rows.iter().map(|&r| prefix.region_of(r)).collect();
    [Site::EncoderSelf, Site::DecoderCross]
        .into_iter()
        .map(|site| {
            let ts: Vec<&AttentionTrace> = all.iter().map(|t| site_trace(t, site)).collect();
            profile_from_traces(site, &ts, rows, &regions)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ProfileRow {
    site: String,
    row_index: usize,
    region: String,
    score: f64,
}

/// CSV with columns `site,row_index,region,score`.
pub fn export_profile(profiles: &[AttentionProfile], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in profiles {
        for ((&row_index, region), &score) in p.rows.iter().zip(&p.regions).zip(&p.scores) {
            w.serialize(ProfileRow {
                site: p.site.name().into(),
                row_index,
                region: region.to_string(),
                score,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse an exported profile back, one profile per site in file order.
/// Sample counts are not stored and come back as 0.
pub fn read_profile(path: &Path) -> Result<Vec<AttentionProfile>> {
    let mut out: Vec<AttentionProfile> = Vec::new();
    for rec in csv::Reader::from_path(path)?.deserialize() {
        let row: ProfileRow = rec?;
        let site = Site::ALL
            .into_iter()
            .find(|s| s.name() == row.site)
            .ok_or_else(|| Error::Config(format!("unknown site {:?}", row.site)))?;
        if out.last().is_none_or(|p| p.site != site) {
            out.push(AttentionProfile {
                site,
                rows: vec![],
                regions: vec![],
                scores: vec![],
                n_samples: 0,
            });
        }
        let p = out.last_mut().expect("pushed above");
        p.rows.push(row.row_index);
        p.regions.push(row.region.parse()?);
        p.scores.push(row.score);
    }
    Ok(out)
}

pub fn export_metrics<T: Serialize>(metrics: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(metrics)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::tensor::Tensor;

    fn w(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn rouge_by_hand() {
        let r = rouge_n(&w("a b c"), &w("b c d"), 1);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15 && (r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_n(&w("a b c"), &w("b c d"), 2).f1, 0.5);
        let l = rouge_l(&w("a x b y c"), &w("a b c"));
        assert_eq!((l.recall, l.precision), (1.0, 0.6));
        assert_eq!(rouge("The Cat", "the cat").r2.f1, 1.0);
        assert_eq!(rouge_n(&w("a"), &w("a"), 2), Prf::default());
        assert_eq!(rouge_l(&w(""), &w("a")), Prf::default());
        assert_eq!(rouge("x y", "p q").r1.f1, 0.0);
    }

    #[test]
    fn clipping() {
        let r = rouge_n(&w("a a a"), &w("a b"), 1);
        assert_eq!((r.precision, r.recall), (1.0 / 3.0, 0.5));
    }

    fn trace(lp: usize, rows: Vec<Vec<f64>>) -> AttentionTrace {
        let n = rows.len();
        let cols = rows[0].len();
        let t = Tensor::new(vec![n, cols], rows.concat()).unwrap();
        AttentionTrace {
            prefix_len: lp,
            weights: vec![vec![Arc::new(t)]],
        }
    }

    #[test]
    fn stub_profiles() {
        let uniform = trace(4, vec![vec![0.1; 4].into_iter().chain([0.6]).collect()]);
        assert_eq!(prefix_attention(&uniform).unwrap(), vec![0.25; 4]);
        let onehot = trace(3, vec![vec![0.4, 0.0, 0.0, 0.6], vec![0.9, 0.0, 0.0, 0.1]]);
        assert_eq!(prefix_attention(&onehot).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(prefix_attention(&trace(0, vec![vec![1.0]])), Err(Error::Contract(_))));
    }

    #[test]
    fn profile_csv_round_trip() {
        let t = trace(2, vec![vec![0.3, 0.1, 0.6]]);
        let p = profile_from_traces(Site::EncoderSelf, &[&t, &t], &[4, 7], &[Region::Shared, Region::Unique(1)]).unwrap();
        assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        export_profile(std::slice::from_ref(&p), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("site,row_index,region,score\nencoder-self,4,shared,"));
        let back = read_profile(&path).unwrap();
        assert_eq!(back[0].scores, p.scores);
        assert_eq!(back[0].regions, p.regions);
    }
}
