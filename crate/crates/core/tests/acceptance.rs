//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness; pass criterion numbers as arguments to run a subset.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prefixmerge::eval::{attention_profile, lcs_len, prefix_attention, profile_from_traces, rouge_l, rouge_n, Prf};
use prefixmerge::fisher::{FisherAccumulator, FisherReport};
use prefixmerge::model::{AttentionTrace, DecodeOptions, ModelConfig, Site, Transformer};
use prefixmerge::pipeline::{compare_initializations, grad_check, load_or_build_backbone, run_pipeline, ExperimentConfig};
use prefixmerge::prefix::{PrefixDesign, PrefixMatrix, Region, PREFIX_PARAM};
use prefixmerge::tasks::{generate, leakage_check, TaskKind};
use prefixmerge::tensor::{Graph, Tensor, DEFAULT_FD_EPS};
use prefixmerge::trainer::{merge_train, self_adaptive_train, StepInfo, TrainConfig};
use prefixmerge::{Error, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn toy(layers: usize, heads: usize, d: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        n_heads: heads,
        d_model: d,
        d_ff: 2 * d,
        vocab_size: vocab,
        max_src_len: 40,
        max_tgt_len: 16,
    }
}

fn small_gen(vocab: usize) -> prefixmerge::tasks::GenParams {
    prefixmerge::tasks::GenParams {
        vocab_size: vocab,
        ..Default::default()
    }
}

fn c1_gradients() -> Result<Outcome> {
    const TOL: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0f64, String::new());
    let n = 20;
    for i in 0..n {
        let layers = 1 + i % 2;
        let d = [4, 8, 12, 16, 32][i % 5];
        let heads = if d % 4 == 0 && rng.random_bool(0.5) { 4 } else { 2 };
        let cfg = ModelConfig {
            n_layers: layers,
            n_heads: heads,
            d_model: d,
            d_ff: d + 4 * rng.random_range(1..4),
            vocab_size: rng.random_range(8..20),
            max_src_len: 6,
            max_tgt_len: 4,
        };
        let r = grad_check(&cfg, 1000 + i as u64, DEFAULT_FD_EPS)?;
        for (name, e) in &r.per_param {
            if *e > worst.0 {
                worst = (*e, format!("config {i} {name}"));
            }
        }
    }
    outcome(
        worst.0 <= TOL,
        format!("{n} configs, max rel error {:.2e} at {} (tol {TOL:.0e})", worst.0, worst.1),
    )
}

fn c2_frozen() -> Result<Outcome> {
    let cfg = toy(2, 4, 32, 120);
    let mut model = Transformer::new(cfg.clone(), 3)?;
    let lm_before = model.checksum();
    let mut prefix = PrefixMatrix::new(PrefixDesign::manual(4, 2, 2)?, &cfg, 5)?;
    let p_before = prefix.checksum();
    let gen = small_gen(cfg.vocab_size);
    let data = vec![generate(TaskKind::Sum, &gen, 1, 64)?, generate(TaskKind::Qa, &gen, 2, 64)?];
    let tc = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        steps: 100,
        ..Default::default()
    };
    merge_train(&mut model, &mut prefix, &data, &tc, None)?;
    let lm_same = model.checksum() == lm_before;
    let p_moved = prefix.checksum() != p_before;
    outcome(
        lm_same && p_moved,
        format!("100 steps: LM checksum identical {lm_same}, prefix checksum changed {p_moved}"),
    )
}

fn c3_index_maps() -> Result<Outcome> {
    let cfg = toy(1, 2, 8, 40);
    let p = PrefixMatrix::new(PrefixDesign::manual(2, 2, 2)?, &cfg, 0)?;
    let one_based = |t| -> Result<Vec<usize>> { Ok(p.task_map(t)?.iter().map(|i| i + 1).collect()) };
    let (a, b) = (one_based(0)?, one_based(1)?);
    outcome(
        a == [1, 2, 3, 4] && b == [1, 2, 5, 6],
        format!("1-based maps {a:?} / {b:?}"),
    )
}

fn logistic_grad(theta: f64, x: f64, y: usize) -> Result<f64> {
    let mut g = Graph::new();
    let th = g.leaf(Tensor::new(vec![1, 1], vec![theta])?, true);
    let xv = g.constant(Tensor::new(vec![1, 1], vec![x])?);
    let z = g.matmul(xv, th)?;
    let zero = g.constant(Tensor::zeros(&[1, 1]));
    let logits = g.concat(&[zero, z], 1)?;
    let nll = g.cross_entropy(logits, &[y])?;
    let grads = g.backward(nll)?;
    Ok(-grads.wrt(th).expect("leaf requires grad").item())
}

fn c4_fisher() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let theta = 0.7;
    let samples: Vec<(f64, usize)> = (0..50)
        .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(0..2)))
        .collect();
    let mut acc = FisherAccumulator::new(1, 1);
    for &(x, y) in &samples {
        acc.add_sample(&Tensor::new(vec![1, 1], vec![logistic_grad(theta, x, y)?])?)?;
    }
    let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
    let closed = samples
        .iter()
        .map(|&(x, y)| ((y as f64 - sigma(theta * x)) * x).powi(2))
        .sum::<f64>()
        / samples.len() as f64;
    let got = acc.finalize(0)?.scores[0];
    let closed_err = (got - closed).abs();

    let (rows, p, n, top) = (12, 5, 30, 4);
    let grads: Vec<Tensor> = (0..n)
        .map(|_| Tensor::new(vec![rows, p], (0..rows * p).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect::<Result<_>>()?;
    let fisher = |c: f64| -> Result<FisherReport> {
        let mut acc = FisherAccumulator::new(rows, p);
        for g in &grads {
            let mut s = g.clone();
            s.scale_in_place(c);
            acc.add_sample(&s)?;
        }
        acc.finalize(0)
    };
    let base = fisher(1.0)?;
    let mut scale_ok = true;
    let mut worst = 0.0f64;
    for c in [0.5, 3.0, 1e3] {
        let f = fisher(c)?;
        for (a, b) in f.scores.iter().zip(&base.scores) {
            let rel = (a - c * c * b).abs() / (c * c * b).abs();
            worst = worst.max(rel);
        }
        let mut x = f.top_n(top);
        let mut y = base.top_n(top);
        x.sort_unstable();
        y.sort_unstable();
        scale_ok &= x == y;
    }
    outcome(
        closed_err <= 1e-10 && worst <= 1e-12 && scale_ok,
        format!(
            "closed form |F-F*| {closed_err:.1e} (tol 1e-10); c^2 scaling rel err {worst:.1e}; top-{top} set unchanged {scale_ok}"
        ),
    )
}

fn c5_masking() -> Result<Outcome> {
    let cfg = toy(1, 2, 16, 80);
    let mut model = Transformer::new(cfg.clone(), 8)?;
    let mut prefix = PrefixMatrix::new(PrefixDesign::self_adaptive(10, 3, 2)?, &cfg, 9)?;
    let gen = small_gen(cfg.vocab_size);
    let data = vec![generate(TaskKind::Sum, &gen, 1, 16)?, generate(TaskKind::Qa, &gen, 2, 16)?];
    let tc = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        steps: 500,
        stage: prefixmerge::trainer::Stage::MergeSelfAdaptive,
        ..Default::default()
    };
    let mut checked = 0usize;
    let mut nonzero = 0usize;
    let mut inactive_rows = 0usize;
    let mut obs = |s: &StepInfo| -> Result<()> {
        let p = s.prefix.ok_or_else(|| Error::Contract("no prefix in step".into()))?;
        let g = s
            .grads
            .get(PREFIX_PARAM)
            .ok_or_else(|| Error::Contract("no prefix gradient".into()))?;
        let inactive: Vec<usize> = (0..p.n_rows()).filter(|&r| !p.active_mask()[r]).collect();
        inactive_rows = inactive.len();
        nonzero += inactive.iter().flat_map(|&r| g.row(r)).filter(|x| **x != 0.0).count();
        checked += 1;
        Ok(())
    };
    self_adaptive_train(&mut model, &mut prefix, &data, &tc, Some(&mut obs))?;
    outcome(
        checked == 500 && inactive_rows > 0 && nonzero == 0,
        format!("{checked} steps checked, {inactive_rows} inactive rows, {nonzero} nonzero inactive gradient entries"),
    )
}

fn lcs_oracle(a: &[u8], b: &[u8], memo: &mut [[u8; 9]; 9]) -> u8 {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let (i, j) = (a.len(), b.len());
    if memo[i][j] != u8::MAX {
        return memo[i][j];
    }
    let v = if a[i - 1] == b[j - 1] {
        1 + lcs_oracle(&a[..i - 1], &b[..j - 1], memo)
    } else {
        lcs_oracle(&a[..i - 1], b, memo).max(lcs_oracle(a, &b[..j - 1], memo))
    };
    memo[i][j] = v;
    v
}

fn prf_from(matched: f64, n_cand: usize, n_ref: usize) -> Prf {
    let p = if n_cand == 0 { 0.0 } else { matched / n_cand as f64 };
    let r = if n_ref == 0 { 0.0 } else { matched / n_ref as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Prf {
        precision: p,
        recall: r,
        f1: f,
    }
}

fn prf_close(a: &Prf, b: &Prf) -> bool {
    (a.precision - b.precision).abs() <= 1e-12 && (a.recall - b.recall).abs() <= 1e-12 && (a.f1 - b.f1).abs() <= 1e-12
}

fn brute_ngram_matches(c: &[u8], r: &[u8], n: usize) -> (f64, usize, usize) {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> {
        if s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let (gc, gr) = (grams(c), grams(r));
    let mut seen: Vec<&Vec<u8>> = Vec::new();
    let mut matched = 0;
    for g in &gc {
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        let a = gc.iter().filter(|x| *x == g).count();
        let b = gr.iter().filter(|x| *x == g).count();
        matched += a.min(b);
    }
    (matched as f64, gc.len(), gr.len())
}

fn c6_rouge() -> Result<Outcome> {
    let mut seqs: Vec<Vec<u8>> = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..8 {
        let mut next = Vec::new();
        for s in &frontier {
            for t in 0..3u8 {
                let mut v: Vec<u8> = s.clone();
                v.push(t);
                next.push(v);
            }
        }
        seqs.extend(next.iter().cloned());
        frontier = next;
    }
    let mut pairs = 0u64;
    let mut lcs_bad = 0u64;
    let mut prf_bad = 0u64;
    let mut memo = [[u8::MAX; 9]; 9];
    for a in &seqs {
        for b in &seqs {
            for row in memo.iter_mut().take(a.len() + 1) {
                row[..=b.len()].fill(u8::MAX);
            }
            let oracle = lcs_oracle(a, b, &mut memo) as usize;
            if lcs_len(a, b) != oracle {
                lcs_bad += 1;
            }
            if !prf_close(&rouge_l(a, b), &prf_from(oracle as f64, a.len(), b.len())) {
                prf_bad += 1;
            }
            pairs += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ngram_bad = 0;
    for _ in 0..1000 {
        let la = rng.random_range(0..15);
        let lb = rng.random_range(0..15);
        let a: Vec<u8> = (0..la).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<u8> = (0..lb).map(|_| rng.random_range(0..4)).collect();
        for n in 1..=3 {
            let (m, nc, nr) = brute_ngram_matches(&a, &b, n);
            if !prf_close(&rouge_n(&a, &b, n), &prf_from(m, nc, nr)) {
                ngram_bad += 1;
            }
        }
    }
    outcome(
        lcs_bad == 0 && prf_bad == 0 && ngram_bad == 0,
        format!(
            "{pairs} exhaustive pairs: {lcs_bad} LCS and {prf_bad} ROUGE-L mismatches; 1000 random pairs x n=1..3: {ngram_bad} ROUGE-N mismatches"
        ),
    )
}

fn stub_trace(lp: usize, rows: Vec<Vec<f64>>) -> Result<AttentionTrace> {
    let mut t = AttentionTrace::new(lp);
    t.weights.push(vec![Arc::new(Tensor::from_rows(&rows)?)]);
    Ok(t)
}

fn c9_profiles() -> Result<Outcome> {
    let cfg = toy(2, 2, 16, 80);
    let model = Transformer::new(cfg.clone(), 21)?;
    let prefix = PrefixMatrix::new(PrefixDesign::manual(3, 2, 2)?, &cfg, 22)?;
    let data = generate(TaskKind::Qfs, &small_gen(cfg.vocab_size), 5, 20)?;
    let rows = prefix.merge_for_target();
    let profiles = attention_profile(&model, &prefix, &rows, &data, 20, DecodeOptions::new(6, 1))?;
    let worst = profiles
        .iter()
        .map(|p| (p.scores.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    // Uniform over prefix and source columns: the renormalized prefix share is uniform.
    let uniform = prefix_attention(&stub_trace(4, vec![vec![1.0 / 6.0; 6]; 3])?)?;
    let uniform_ok = uniform == vec![0.25; 4];
    let one_hot = prefix_attention(&stub_trace(3, vec![vec![0.0, 0.5, 0.0, 0.5], vec![0.0, 1.0, 0.0, 0.0]])?)?;
    let one_hot_ok = one_hot == vec![0.0, 1.0, 0.0];
    let traces = [stub_trace(2, vec![vec![1.0, 0.0]])?, stub_trace(2, vec![vec![0.0, 1.0]])?];
    let refs: Vec<&AttentionTrace> = traces.iter().collect();
    let avg = profile_from_traces(Site::EncoderSelf, &refs, &[0, 1], &[Region::Shared, Region::Shared])?;
    let avg_ok = avg.scores == vec![0.5, 0.5];
    outcome(
        worst <= 1e-9 && uniform_ok && one_hot_ok && avg_ok,
        format!(
            "{} exported profiles, max |sum-1| {worst:.1e}; uniform stub exact {uniform_ok}, one-hot exact {one_hot_ok}, sample mean exact {avg_ok}",
            profiles.len()
        ),
    )
}

fn c10_leakage() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sentence = |rng: &mut ChaCha8Rng, prefix: &str| -> Vec<String> {
        (0..8).map(|_| format!("{prefix}{}", rng.random_range(0..1000))).collect()
    };
    let train: Vec<Vec<String>> = (0..100).map(|_| sentence(&mut rng, "a")).collect();
    let mut test = Vec::new();
    for (i, src) in train.iter().take(64).enumerate() {
        let mut t = src.clone();
        match i % 4 {
            0 => {}
            1 => t[3] = "zz".into(),
            2 => {
                t.remove(5);
            }
            _ => t.insert(2, "yy".into()),
        }
        test.push(t.join(" "));
    }
    for _ in 0..36 {
        test.push(sentence(&mut rng, "b").join(" "));
    }
    let train: Vec<String> = train.iter().map(|t| t.join(" ")).collect();
    // Leaked means strictly fewer than 2 word edits, i.e. distance <= 1.
    let r = leakage_check(&train, &test, 2)?;
    outcome(
        r.ratio == 0.64 && r.n_leaked == 64,
        format!("{} of {} leaked, ratio {}", r.n_leaked, r.n_test, r.ratio),
    )
}

/// The toy harness for the directional replication.
fn harness_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.checkpoint = std::env::var_os("PREFIXMERGE_BACKBONE").map(Into::into);
    cfg.stage1.learning_rate = 5e-3;
    cfg.stage1.batch_size = 16;
    cfg.stage1.steps = 1500;
    cfg.stage2.learning_rate = 5e-3;
    cfg.stage2.steps = 100;
    cfg.eval.max_len = 4;
    cfg
}

fn c7_c8_replication() -> Result<(Outcome, Outcome)> {
    let cfg = harness_config();
    let backbone = load_or_build_backbone(&cfg.model, &cfg.backbone, &cfg.data.gen)?;
    let cmp = compare_initializations(&cfg, &backbone)?;
    let mean = |k: &str| cmp.variants[k].mean["rouge1"];
    let seeds = |k: &str| &cmp.per_seed_rouge1[k];
    let merged = seeds("merged");
    let singles: Vec<String> = cmp.variants.keys().filter(|k| k.starts_with("only-")).cloned().collect();
    let wins = (0..merged.len())
        .filter(|&i| singles.iter().all(|s| merged[i] >= seeds(s)[i]))
        .count();
    let singles_desc: Vec<String> = singles.iter().map(|s| format!("{s} {:.4}", mean(s))).collect();
    let c7 = Outcome {
        pass: mean("merged") > mean("random") && wins >= 4,
        detail: format!(
            "mean R-1 merged {:.4} vs random {:.4}; {}; merged >= singles in {wins}/{} seeds",
            mean("merged"),
            mean("random"),
            singles_desc.join(", "),
            merged.len()
        ),
    };
    let c8 = Outcome {
        pass: mean("merged-no-prefix") < mean("merged"),
        detail: format!(
            "mean R-1 no-prefix {:.4} vs full {:.4}; no-prompt {:.4} (reported only)",
            mean("merged-no-prefix"),
            mean("merged"),
            mean("merged-no-prompt")
        ),
    };
    Ok((c7, c8))
}

fn c11_determinism() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::default();
    cfg.model = toy(1, 2, 16, 80);
    cfg.data.gen = small_gen(80);
    cfg.backbone.pretrain_steps = 30;
    cfg.backbone.corpus_size = 64;
    cfg.data.aux_size = 32;
    cfg.data.target_test = 10;
    cfg.stage1.learning_rate = 1e-3;
    cfg.stage1.batch_size = 8;
    cfg.stage1.steps = 30;
    cfg.stage2.steps = 10;
    cfg.eval.profile_samples = 5;
    cfg.seeds = vec![0, 1];
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    for d in &dirs {
        run_pipeline(&cfg, d.path())?;
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f));
    let prefix_same = read(&dirs[0], "prefix.bin")? == read(&dirs[1], "prefix.bin")?;
    let metrics_same = read(&dirs[0], "metrics.json")? == read(&dirs[1], "metrics.json")?;
    outcome(
        prefix_same && metrics_same,
        format!("prefix.bin identical {prefix_same}, metrics.json identical {metrics_same}"),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(usize, Result<Outcome>, f64)> = Vec::new();
    let single: [(usize, fn() -> Result<Outcome>); 9] = [
        (1, c1_gradients),
        (2, c2_frozen),
        (3, c3_index_maps),
        (4, c4_fisher),
        (5, c5_masking),
        (6, c6_rouge),
        (9, c9_profiles),
        (10, c10_leakage),
        (11, c11_determinism),
    ];
    let timed = |n: usize, f: &dyn Fn() -> Result<Outcome>, results: &mut Vec<_>| {
        let t = Instant::now();
        let r = f();
        results.push((n, r, t.elapsed().as_secs_f64()));
    };
    for (n, f) in single {
        if run(n) {
            timed(n, &f, &mut results);
        }
    }
    if run(7) || run(8) {
        let t = Instant::now();
        let (a, b) = match c7_c8_replication() {
            Ok((a, b)) => (Ok(a), Ok(b)),
            Err(e) => (Err(Error::Contract(e.to_string())), Err(e)),
        };
        let s = t.elapsed().as_secs_f64();
        results.push((7, a, s));
        results.push((8, b, s));
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, r, secs) in &results {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("criterion {n:>2}: {} ({secs:.1}s) {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
