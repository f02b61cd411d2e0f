//! Two-stage training: prefix-merging on auxiliary tasks, then few-shot
//! prefix-tuning on the target task. Fine-tuning variants and multi-seed
//! reporting live here too.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mean_rouge, rouge_tokens, strip_eos, RougeScore};
use crate::fisher::{FisherAccumulator, FisherReport};
use crate::model::{DecodeOptions, Transformer};
use crate::prefix::{PrefixDesign, PrefixMatrix, PREFIX_PARAM};
use crate::tasks::Example;
use crate::tensor::{GradientMap, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    MergeManual,
    MergeSelfAdaptive,
    Transfer,
    FineTune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    PrefixOnly,
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_prefix: bool,
    pub no_prompt: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub stage: Stage,
    pub scope: Scope,
    pub ablations: Ablations,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 48,
            steps: 1000,
            seed: 0,
            stage: Stage::MergeManual,
            scope: Scope::PrefixOnly,
            ablations: Ablations::default(),
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn fine_tune_default() -> Self {
        Self {
            learning_rate: 2e-5,
            stage: Stage::FineTune,
            scope: Scope::All,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < n_tasks.max(1) {
            return Err(Error::Config(format!(
                "batch size {} below task count {n_tasks}",
                self.batch_size
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay and bias correction. Moment buffers are
/// keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every `(name, value)` pair that has a gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &GradientMap,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, value) in params {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != value.shape() {
                return Err(Error::Dimension {
                    op: "optimizer step",
                    lhs: value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let n = value.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((x, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x = *x * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Examples of one task plus the prefix rows they are routed through.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub examples: Vec<Example>,
    pub indices: Vec<usize>,
}

/// Equal-share batches: `⌊b/n⌋` examples per task, the remainder handed out
/// round-robin. Each task cycles through its own reshuffled order.
#[derive(Clone, Debug)]
pub struct MixedBatcher {
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    next_extra: usize,
    rng: ChaCha8Rng,
}

impl MixedBatcher {
    pub fn new(task_sizes: &[usize], seed: u64) -> Result<Self> {
        if task_sizes.is_empty() {
            return Err(Error::Config("no tasks to batch".into()));
        }
        if let Some(t) = task_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("task {t} has an empty dataset")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orders = task_sizes
            .iter()
            .map(|&n| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        Ok(Self {
            orders,
            cursors: vec![0; task_sizes.len()],
            next_extra: 0,
            rng,
        })
    }

    fn draw(&mut self, task: usize) -> usize {
        if self.cursors[task] == self.orders[task].len() {
            self.orders[task].shuffle(&mut self.rng);
            self.cursors[task] = 0;
        }
        let i = self.orders[task][self.cursors[task]];
        self.cursors[task] += 1;
        i
    }

    /// `(task, example index)` pairs, grouped by task.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<(usize, usize)> {
        let n = self.orders.len();
        let mut counts = vec![batch_size / n; n];
        for _ in 0..batch_size % n {
            counts[self.next_extra] += 1;
            self.next_extra = (self.next_extra + 1) % n;
        }
        let mut out = Vec::with_capacity(batch_size);
        for (t, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.push((t, self.draw(t)));
            }
        }
        out
    }
}

fn routed_input(ex: &Example, ab: Ablations) -> Vec<usize> {
    if ab.no_prompt {
        ex.with_prompt(&[]).input_tokens()
    } else {
        ex.input_tokens()
    }
}

/// Summed sequence cross-entropy of a batch and its gradients for every
/// trainable parameter (LM parameters by name, P_θ as [`PREFIX_PARAM`]).
/// Returns the mean per-example loss.
pub fn batch_gradients(
    model: &Transformer,
    prefix: Option<&PrefixMatrix>,
    tasks: &[TaskData],
    batch: &[(usize, usize)],
    ab: Ablations,
) -> Result<(f64, GradientMap)> {
    let mut g = Graph::new();
    let bp = model.bind(&mut g);
    let leaf = match prefix {
        Some(p) if !ab.no_prefix => Some(p.bind(&mut g)),
        _ => None,
    };
    let mut losses = Vec::with_capacity(batch.len());
    for &(t, i) in batch {
        let task = &tasks[t];
        let ex = &task.examples[i];
        let acts = match (prefix, leaf) {
            (Some(p), Some(l)) if !task.indices.is_empty() => Some(p.gather_from(&mut g, l, &task.indices)?),
            _ => None,
        };
        losses.push(model.sequence_loss(&mut g, &bp, &routed_input(ex, ab), &ex.target, acts.as_ref())?);
    }
    let total = g.add_all(&losses)?;
    let value = g.value(total).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite batch loss {value}")));
    }
    let grads = g.backward(total)?.param_grads();
    Ok((value / batch.len() as f64, grads))
}

/// Per-step view handed to a training observer.
pub struct StepInfo<'a> {
    pub step: usize,
    pub loss: f64,
    pub grads: &'a GradientMap,
    pub prefix: Option<&'a PrefixMatrix>,
}

pub type Observer<'o> = dyn FnMut(&StepInfo) -> Result<()> + 'o;

/// The shared loop behind every stage: mixed batches, one AdamW step on
/// everything trainable per batch. Returns the per-step mean losses.
pub fn train_loop(
    model: &mut Transformer,
    mut prefix: Option<&mut PrefixMatrix>,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    observer: Option<&mut Observer>,
) -> Result<Vec<f64>> {
    cfg.validate(tasks.len())?;
    let sizes: Vec<usize> = tasks.iter().map(|t| t.examples.len()).collect();
    let mut batcher = MixedBatcher::new(&sizes, cfg.seed)?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay)?;
    let mut observer = observer;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = batcher.next_batch(cfg.batch_size);
        let (loss, grads) = batch_gradients(model, prefix.as_deref(), tasks, &batch, cfg.ablations)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
        if let Some(obs) = observer.as_deref_mut() {
            obs(&StepInfo {
                step,
                loss,
                grads: &grads,
                prefix: prefix.as_deref(),
            })?;
        }
        let mut params = model.params_mut().trainable_mut();
        if let Some(p) = prefix.as_deref_mut() {
            if p.is_trainable() && !cfg.ablations.no_prefix {
                params.push((PREFIX_PARAM, p.rows_mut()));
            }
        }
        opt.step(params, &grads)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Applies the scope to the LM's trainable flags.
fn apply_scope(model: &mut Transformer, prefix: Option<&mut PrefixMatrix>, scope: Scope) {
    model.set_trainable(scope == Scope::All);
    if let Some(p) = prefix {
        p.set_trainable(true);
    }
}

fn routed(prefix: &PrefixMatrix, data: &[Vec<Example>]) -> Result<Vec<TaskData>> {
    data.iter()
        .enumerate()
        .map(|(t, ex)| {
            Ok(TaskData {
                examples: ex.clone(),
                indices: prefix.task_map(t)?.to_vec(),
            })
        })
        .collect()
}

/// Prefix-merging with a manual shared/unique design: each example goes
/// through its task's index map and prompt; only P_θ is updated.
pub fn merge_train(
    model: &mut Transformer,
    prefix: &mut PrefixMatrix,
    data: &[Vec<Example>],
    cfg: &TrainConfig,
    observer: Option<&mut Observer>,
) -> Result<Vec<f64>> {
    if !matches!(prefix.design(), PrefixDesign::Manual { .. }) {
        return Err(Error::Design("merge_train needs a manual design".into()));
    }
    if data.len() != prefix.design().n_tasks() {
        return Err(Error::Config(format!(
            "{} datasets for a {}-task design",
            data.len(),
            prefix.design().n_tasks()
        )));
    }
    prefix.check_compatible(model.config())?;
    apply_scope(model, Some(prefix), cfg.scope);
    let tasks = routed(prefix, data)?;
    train_loop(model, Some(prefix), &tasks, cfg, observer)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfAdaptiveOutcome {
    pub warmup_losses: Vec<f64>,
    pub reports: Vec<FisherReport>,
    pub losses: Vec<f64>,
    /// `(shared, unique, partial, inactive)` rows after selection.
    pub split: (usize, usize, usize, usize),
}

/// Steps for one pass over the largest task at `⌊b/n⌋` examples per task.
pub fn epoch_steps(sizes: &[usize], batch_size: usize) -> usize {
    let per_task = (batch_size / sizes.len().max(1)).max(1);
    sizes.iter().map(|n| n.div_ceil(per_task)).max().unwrap_or(0)
}

/// Fisher report per task over its whole dataset, no parameter updates.
pub fn fisher_pass(
    model: &Transformer,
    prefix: &PrefixMatrix,
    data: &[Vec<Example>],
) -> Result<Vec<FisherReport>> {
    data.iter()
        .enumerate()
        .map(|(t, examples)| {
            let indices = prefix.task_map(t)?.to_vec();
            let mut acc = FisherAccumulator::for_prefix(prefix);
            for ex in examples {
                acc.accumulate(model, prefix, &indices, ex)?;
            }
            acc.finalize(t)
        })
        .collect()
}

/// Self-adaptive prefix-merging:
/// A. one epoch with every row shared by all tasks;
/// B. one Fisher pass per task;
/// C. per-task top-n selection, unselected rows masked;
/// D. `cfg.steps` further mixed steps with the selected maps.
pub fn self_adaptive_train(
    model: &mut Transformer,
    prefix: &mut PrefixMatrix,
    data: &[Vec<Example>],
    cfg: &TrainConfig,
    observer: Option<&mut Observer>,
) -> Result<SelfAdaptiveOutcome> {
    let PrefixDesign::SelfAdaptive { top_n, n_tasks, .. } = *prefix.design() else {
        return Err(Error::Design("self_adaptive_train needs a self-adaptive design".into()));
    };
    if data.len() != n_tasks {
        return Err(Error::Config(format!("{} datasets for {n_tasks} tasks", data.len())));
    }
    prefix.check_compatible(model.config())?;
    apply_scope(model, Some(prefix), cfg.scope);
    let tasks = routed(prefix, data)?;
    let sizes: Vec<usize> = data.iter().map(Vec::len).collect();
    let warm = TrainConfig {
        steps: epoch_steps(&sizes, cfg.batch_size),
        ..cfg.clone()
    };
    let warmup_losses = train_loop(model, Some(prefix), &tasks, &warm, None)?;
    let reports = fisher_pass(model, prefix, data)?;
    prefix.apply_selection(&reports, top_n)?;
    let tasks = routed(prefix, data)?;
    let cont = TrainConfig {
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    let losses = train_loop(model, Some(prefix), &tasks, &cont, observer)?;
    Ok(SelfAdaptiveOutcome {
        warmup_losses,
        reports,
        losses,
        split: prefix.split_counts(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub rouge: RougeScore,
    pub mean_loss: f64,
}

/// Greedy decoding plus ROUGE against the references, and the mean
/// teacher-forced loss.
pub fn evaluate(
    model: &Transformer,
    prefix: Option<&PrefixMatrix>,
    indices: &[usize],
    data: &[Example],
    ab: Ablations,
    opts: DecodeOptions,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyData("nothing to evaluate".into()));
    }
    let indices: &[usize] = if ab.no_prefix || prefix.is_none() { &[] } else { indices };
    let mut scores = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for ex in data {
        let input = routed_input(ex, ab);
        let out = match prefix {
            Some(p) if !indices.is_empty() => model.greedy_decode(&input, Some(&p.view(indices)), opts)?,
            _ => model.greedy_decode(&input, None, opts)?,
        };
        scores.push(rouge_tokens(strip_eos(&out, opts.eos), &ex.target));
        let mut g = Graph::new();
        let bp = model.bind_frozen(&mut g);
        let acts = match prefix {
            Some(p) if !indices.is_empty() => Some(p.gather(&mut g, indices)?),
            _ => None,
        };
        let l = model.sequence_loss(&mut g, &bp, &input, &ex.target, acts.as_ref())?;
        loss += g.value(l).item();
    }
    Ok(EvalReport {
        n: data.len(),
        rouge: mean_rouge(&scores),
        mean_loss: loss / data.len() as f64,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferReport {
    pub indices: Vec<usize>,
    pub losses: Vec<f64>,
    pub before: EvalReport,
    pub after: EvalReport,
}

/// Few-shot prefix-tuning on the target task over the rows
/// [`PrefixMatrix::merge_for_target`] selects. With `no_prefix` and a frozen
/// LM nothing is trainable, so only the evaluation runs.
pub fn transfer(
    model: &mut Transformer,
    prefix: &mut PrefixMatrix,
    train: &[Example],
    test: &[Example],
    cfg: &TrainConfig,
    opts: DecodeOptions,
) -> Result<TransferReport> {
    prefix.check_compatible(model.config())?;
    apply_scope(model, Some(prefix), cfg.scope);
    let indices = if cfg.ablations.no_prefix {
        vec![]
    } else {
        prefix.merge_for_target()
    };
    let before = evaluate(model, Some(prefix), &indices, test, cfg.ablations, opts)?;
    let nothing_trainable = indices.is_empty() && cfg.scope == Scope::PrefixOnly;
    let losses = if nothing_trainable || cfg.steps == 0 {
        vec![]
    } else {
        let tasks = [TaskData {
            examples: train.to_vec(),
            indices: indices.clone(),
        }];
        let stage2 = TrainConfig {
            batch_size: cfg.batch_size.min(train.len()).max(1),
            ..cfg.clone()
        };
        train_loop(model, Some(prefix), &tasks, &stage2, None)?
    };
    let after = evaluate(model, Some(prefix), &indices, test, cfg.ablations, opts)?;
    Ok(TransferReport {
        indices,
        losses,
        before,
        after,
    })
}

/// LM fine-tuning on one or more datasets, optionally with a prefix routed as
/// in [`merge_train`]. `prefix = None` trains the plain model.
pub fn fine_tune(
    model: &mut Transformer,
    prefix: Option<&mut PrefixMatrix>,
    data: &[Vec<Example>],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    model.set_trainable(true);
    match prefix {
        Some(p) => {
            p.check_compatible(model.config())?;
            p.set_trainable(true);
            let tasks = if data.len() == p.design().n_tasks() {
                routed(p, data)?
            } else {
                let rows = p.merge_for_target();
                data.iter()
                    .map(|ex| TaskData {
                        examples: ex.clone(),
                        indices: rows.clone(),
                    })
                    .collect()
            };
            train_loop(model, Some(p), &tasks, cfg, None)
        }
        None => {
            let tasks: Vec<TaskData> = data
                .iter()
                .map(|ex| TaskData {
                    examples: ex.clone(),
                    indices: vec![],
                })
                .collect();
            train_loop(model, None, &tasks, cfg, None)
        }
    }
}

/// Stage-1 / stage-2 method pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combination {
    FineFine,
    FinePrefix,
    PrefixFine,
    PrefixPrefix,
}

impl Combination {
    pub const ALL: [Combination; 4] = [
        Combination::FineFine,
        Combination::FinePrefix,
        Combination::PrefixFine,
        Combination::PrefixPrefix,
    ];
}

/// Run one combination. Fine-tuning stages train every LM parameter (and the
/// prefix, when one is in play); prefix stages keep the LM frozen. A fine
/// stage 1 uses no prefix, so `FineFine` never touches P_θ.
#[allow(clippy::too_many_arguments)]
pub fn run_combination(
    combo: Combination,
    model: &mut Transformer,
    prefix: &mut PrefixMatrix,
    aux: &[Vec<Example>],
    target_train: &[Example],
    target_test: &[Example],
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    opts: DecodeOptions,
) -> Result<EvalReport> {
    match combo {
        Combination::FineFine | Combination::FinePrefix => {
            fine_tune(model, None, aux, stage1)?;
        }
        Combination::PrefixFine | Combination::PrefixPrefix => {
            let cfg = TrainConfig {
                scope: Scope::PrefixOnly,
                ..stage1.clone()
            };
            merge_train(model, prefix, aux, &cfg, None)?;
        }
    }
    match combo {
        Combination::FineFine => {
            fine_tune(model, None, &[target_train.to_vec()], stage2)?;
            evaluate(model, None, &[], target_test, stage2.ablations, opts)
        }
        Combination::PrefixFine => {
            fine_tune(model, Some(prefix), &[target_train.to_vec()], stage2)?;
            let rows = prefix.merge_for_target();
            evaluate(model, Some(prefix), &rows, target_test, stage2.ablations, opts)
        }
        Combination::FinePrefix | Combination::PrefixPrefix => {
            let cfg = TrainConfig {
                scope: Scope::PrefixOnly,
                ..stage2.clone()
            };
            Ok(transfer(model, prefix, target_train, target_test, &cfg, opts)?.after)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub diverged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seeds: Vec<SeedRow>,
    pub mean: BTreeMap<String, f64>,
    /// Population standard deviation over the non-diverged seeds.
    pub std: BTreeMap<String, f64>,
    pub excluded: Vec<u64>,
}

/// Run `run` per seed. A run that fails with a numeric error or returns a
/// non-finite metric is flagged as diverged and left out of mean and std;
/// any other error aborts the report.
pub fn multi_seed_report<F>(seeds: &[u64], mut run: F) -> Result<RunReport>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    if seeds.len() < 2 {
        return Err(Error::Config("multi-seed report needs at least two seeds".into()));
    }
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let row = match run(seed) {
            Ok(metrics) => {
                let diverged = metrics.values().any(|v| !v.is_finite());
                SeedRow {
                    seed,
                    error: diverged.then(|| "non-finite metric".to_string()),
                    metrics,
                    diverged,
                }
            }
            Err(Error::Numeric(msg)) => {
                log::warn!("seed {seed} diverged: {msg}");
                SeedRow {
                    seed,
                    metrics: BTreeMap::new(),
                    diverged: true,
                    error: Some(msg),
                }
            }
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    let kept: Vec<&SeedRow> = rows.iter().filter(|r| !r.diverged).collect();
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    if let Some(first) = kept.first() {
        for key in first.metrics.keys() {
            let vals: Vec<f64> = kept.iter().filter_map(|r| r.metrics.get(key).copied()).collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.insert(key.clone(), m);
            std.insert(key.clone(), var.sqrt());
        }
    }
    Ok(RunReport {
        excluded: rows.iter().filter(|r| r.diverged).map(|r| r.seed).collect(),
        seeds: rows,
        mean,
        std,
    })
}

/// CSV with columns `step,loss`.
pub fn write_loss_csv(losses: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_by_hand() {
        let mut opt = AdamW::new(0.1, 0.0).unwrap();
        let mut x = Tensor::scalar(1.0);
        let mut g = GradientMap::new();
        g.insert("x", Tensor::scalar(1.0));
        opt.step([("x", &mut x)], &g).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = 0.1 / (1 + 1e-8)
        assert!((x.item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!(matches!(AdamW::new(0.0, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn adamw_zero_grad_is_noop() {
        let mut opt = AdamW::new(0.1, 0.0).unwrap();
        let mut x = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let mut g = GradientMap::new();
        g.insert("x", Tensor::zeros(&[2]));
        for _ in 0..3 {
            opt.step([("x", &mut x)], &g).unwrap();
        }
        assert_eq!(x.data(), &[0.5, -2.0]);
    }

    #[test]
    fn batches_mix_tasks_equally() {
        let mut b = MixedBatcher::new(&[7, 3, 5], 1).unwrap();
        let mut per_task = [0usize; 3];
        for _ in 0..10 {
            let batch = b.next_batch(8);
            assert_eq!(batch.len(), 8);
            let mut c = [0usize; 3];
            batch.iter().for_each(|(t, _)| c[*t] += 1);
            assert!(c.iter().all(|&k| k == 2 || k == 3));
            (0..3).for_each(|t| per_task[t] += c[t]);
        }
        let (lo, hi) = (per_task.iter().min().unwrap(), per_task.iter().max().unwrap());
        assert!(hi - lo <= 3);
        assert!(MixedBatcher::new(&[3, 0], 0).is_err());
    }

    #[test]
    fn batcher_covers_each_task_per_cycle() {
        let mut b = MixedBatcher::new(&[4], 3).unwrap();
        let mut seen: Vec<usize> = b.next_batch(4).into_iter().map(|x| x.1).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn report_mean_and_population_std() {
        let vals = [1.0, 2.0, 3.0];
        let r = multi_seed_report(&[0, 1, 2], |s| Ok(BTreeMap::from([("m".into(), vals[s as usize])]))).unwrap();
        assert_eq!(r.mean["m"], 2.0);
        assert!((r.std["m"] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let same = multi_seed_report(&[0, 1], |_| Ok(BTreeMap::from([("m".into(), 0.3)]))).unwrap();
        assert_eq!(same.std["m"], 0.0);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<RunReport>(&json).unwrap(), r);
    }

    #[test]
    fn diverged_seed_is_excluded() {
        let r = multi_seed_report(&[0, 1, 2], |s| {
            if s == 1 {
                Err(Error::Numeric("nan loss".into()))
            } else {
                Ok(BTreeMap::from([("m".into(), s as f64)]))
            }
        })
        .unwrap();
        assert_eq!(r.excluded, vec![1]);
        assert_eq!(r.mean["m"], 1.0);
        assert!(multi_seed_report(&[0], |_| Ok(BTreeMap::new())).is_err());
    }

    #[test]
    fn epoch_steps_cover_largest_task() {
        assert_eq!(epoch_steps(&[10, 4], 4), 5);
        assert_eq!(epoch_steps(&[9], 4), 3);
    }
}
