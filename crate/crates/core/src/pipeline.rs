//! Experiment configuration and the end-to-end runs built from it: backbone
//! preparation, stage-1 merging, stage-2 transfer and the initialization
//! comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecodeOptions, ModelConfig, Transformer};
use crate::prefix::{PrefixDesign, PrefixMatrix};
use crate::tasks::{generate, Example, GenParams, TaskKind};
use crate::trainer::{
    fine_tune, merge_train, multi_seed_report, self_adaptive_train, transfer, Ablations, RunReport,
    Scope, SelfAdaptiveOutcome, Stage, TrainConfig, TransferReport,
};

/// How the frozen LM is obtained: random init, optionally followed by full
/// training on generic tasks that never include the auxiliary or target
/// tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub seed: u64,
    pub pretrain_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub corpus_size: usize,
    pub tasks: Vec<TaskKind>,
    /// Reused when present and compatible, written otherwise.
    pub checkpoint: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_steps: 2000,
            learning_rate: 1e-3,
            batch_size: 16,
            corpus_size: 4000,
            tasks: vec![TaskKind::Denoise, TaskKind::Copy],
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub gen: GenParams,
    pub auxiliary: Vec<TaskKind>,
    pub aux_size: usize,
    pub aux_seed: u64,
    pub target: TaskKind,
    pub target_train: usize,
    pub target_test: usize,
    pub target_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            gen: GenParams::default(),
            auxiliary: vec![TaskKind::Sum, TaskKind::Qa],
            aux_size: 2000,
            aux_seed: 100,
            target: TaskKind::Qfs,
            target_train: 32,
            target_test: 100,
            target_seed: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefixConfig {
    pub design: PrefixDesign,
    pub seed: u64,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        Self {
            design: PrefixDesign::Manual {
                shared: 20,
                unique_per_task: 5,
                n_tasks: 2,
            },
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_len: usize,
    pub min_len: usize,
    pub profile_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_len: 8,
            min_len: 1,
            profile_samples: 100,
        }
    }
}

impl EvalConfig {
    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions::new(self.max_len, self.min_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub prefix: PrefixConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            backbone: BackboneConfig::default(),
            data: DataConfig::default(),
            prefix: PrefixConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig {
                batch_size: 16,
                steps: 100,
                stage: Stage::Transfer,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prefix.design.validate()?;
        self.data.gen.validate()?;
        if self.data.gen.vocab_size > self.model.vocab_size {
            return Err(Error::Config(format!(
                "generators use {} words, model vocab is {}",
                self.data.gen.vocab_size, self.model.vocab_size
            )));
        }
        if self.prefix.design.n_tasks() != self.data.auxiliary.len() {
            return Err(Error::Config(format!(
                "prefix design has {} tasks, {} auxiliary tasks configured",
                self.prefix.design.n_tasks(),
                self.data.auxiliary.len()
            )));
        }
        if self.eval.max_len > self.model.max_tgt_len {
            return Err(Error::Config("eval.max_len exceeds model.max_tgt_len".into()));
        }
        Ok(())
    }
}

fn kind_offset(kind: TaskKind) -> u64 {
    match kind {
        TaskKind::Sum => 0,
        TaskKind::Qa => 1,
        TaskKind::Qfs => 2,
        TaskKind::Copy => 3,
        TaskKind::Denoise => 4,
    }
}

fn fit(examples: Vec<Example>, model: &ModelConfig) -> Result<Vec<Example>> {
    examples
        .into_iter()
        .map(|e| e.truncated(model.max_src_len, model.max_tgt_len))
        .collect()
}

/// Random init, then (if configured) full training on the backbone tasks,
/// then frozen. A compatible checkpoint short-circuits the build.
pub fn load_or_build_backbone(model: &ModelConfig, bb: &BackboneConfig, gen: &GenParams) -> Result<Transformer> {
    if let Some(path) = &bb.checkpoint {
        if path.exists() {
            let m = Transformer::load(path)?;
            if m.config() != model {
                return Err(Error::Compatibility(format!(
                    "backbone checkpoint {} has a different model config",
                    path.display()
                )));
            }
            return Ok(m);
        }
    }
    let mut m = Transformer::new(model.clone(), bb.seed)?;
    if bb.pretrain_steps > 0 {
        let data = bb
            .tasks
            .iter()
            .map(|&k| fit(generate(k, gen, bb.seed.wrapping_add(1000 + kind_offset(k)), bb.corpus_size)?, model))
            .collect::<Result<Vec<_>>>()?;
        let cfg = TrainConfig {
            learning_rate: bb.learning_rate,
            batch_size: bb.batch_size,
            steps: bb.pretrain_steps,
            seed: bb.seed,
            stage: Stage::FineTune,
            scope: Scope::All,
            ..TrainConfig::default()
        };
        let losses = fine_tune(&mut m, None, &data, &cfg)?;
        log::info!(
            "backbone pretrained {} steps, loss {:.4} -> {:.4}",
            losses.len(),
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    m.set_trainable(false);
    if let Some(path) = &bb.checkpoint {
        m.save(path)?;
    }
    Ok(m)
}

/// Training data per auxiliary task, seeded per task kind so a single-task
/// run sees the same examples as the merged run.
pub fn auxiliary_data(cfg: &ExperimentConfig, kinds: &[TaskKind]) -> Result<Vec<Vec<Example>>> {
    kinds
        .iter()
        .map(|&k| {
            let seed = cfg.data.aux_seed.wrapping_add(kind_offset(k));
            fit(generate(k, &cfg.data.gen, seed, cfg.data.aux_size)?, &cfg.model)
        })
        .collect()
}

/// Few-shot target training split for `seed` and the fixed test split.
pub fn target_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    let d = &cfg.data;
    let train = generate(d.target, &d.gen, d.target_seed.wrapping_add(1 + seed), d.target_train)?;
    let test = generate(d.target, &d.gen, d.target_seed, d.target_test)?;
    Ok((fit(train, &cfg.model)?, fit(test, &cfg.model)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage1Report {
    pub design: String,
    pub tasks: Vec<TaskKind>,
    pub losses: Vec<f64>,
    pub self_adaptive: Option<SelfAdaptiveOutcome>,
    pub lm_checksum: String,
    pub prefix_checksum: String,
}

/// Stage 1 on `kinds` with `design`; the LM stays frozen.
pub fn run_stage1(
    cfg: &ExperimentConfig,
    model: &mut Transformer,
    design: PrefixDesign,
    kinds: &[TaskKind],
) -> Result<(PrefixMatrix, Stage1Report)> {
    let data = auxiliary_data(cfg, kinds)?;
    let mut prefix = PrefixMatrix::new(design.clone(), &cfg.model, cfg.prefix.seed)?;
    let tc = TrainConfig {
        scope: Scope::PrefixOnly,
        ..cfg.stage1.clone()
    };
    let (losses, sa) = match design {
        PrefixDesign::Manual { .. } => (merge_train(model, &mut prefix, &data, &tc, None)?, None),
        PrefixDesign::SelfAdaptive { .. } => {
            let out = self_adaptive_train(model, &mut prefix, &data, &tc, None)?;
            (out.losses.clone(), Some(out))
        }
    };
    let report = Stage1Report {
        design: design.to_string(),
        tasks: kinds.to_vec(),
        losses,
        self_adaptive: sa,
        lm_checksum: model.checksum(),
        prefix_checksum: prefix.checksum(),
    };
    Ok((prefix, report))
}

/// A fresh prefix the size of the merged target prefix.
pub fn random_prefix(cfg: &ExperimentConfig, rows: usize, seed: u64) -> Result<PrefixMatrix> {
    PrefixMatrix::new(PrefixDesign::manual(rows, 0, 1)?, &cfg.model, cfg.prefix.seed ^ (seed << 16) ^ 0x5eed)
}

/// Stage 2 for one seed, starting from a copy of `init`.
pub fn run_stage2(
    cfg: &ExperimentConfig,
    model: &mut Transformer,
    init: &PrefixMatrix,
    seed: u64,
    ablations: Ablations,
) -> Result<(PrefixMatrix, TransferReport)> {
    let (train, test) = target_data(cfg, seed)?;
    let mut prefix = init.clone();
    let tc = TrainConfig {
        seed: cfg.stage2.seed.wrapping_add(seed),
        scope: Scope::PrefixOnly,
        ablations,
        ..cfg.stage2.clone()
    };
    let report = transfer(model, &mut prefix, &train, &test, &tc, cfg.eval.decode_options())?;
    Ok((prefix, report))
}

fn metrics_of(r: &TransferReport) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("rouge1".into(), r.after.rouge.r1.f1),
        ("rouge2".into(), r.after.rouge.r2.f1),
        ("rougeL".into(), r.after.rouge.rl.f1),
        ("test_loss".into(), r.after.mean_loss),
    ])
}

/// Stage-1 initializations compared on the target task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub stage1: Vec<Stage1Report>,
    /// Keyed by variant name: `random`, `merged`, `only-<task>`,
    /// `merged-no-prefix`, `merged-no-prompt`.
    pub variants: BTreeMap<String, RunReport>,
    pub per_seed_rouge1: BTreeMap<String, Vec<f64>>,
}

/// Random init vs. merged init vs. single-auxiliary inits, plus the two
/// ablations of the merged variant, each over `cfg.seeds`. Stage 1 runs once
/// per initialization; seeds vary the few-shot split and stage-2 batching
/// (and the random init itself).
pub fn compare_initializations(cfg: &ExperimentConfig, backbone: &Transformer) -> Result<Comparison> {
    let aux = cfg.data.auxiliary.clone();
    let mut stage1 = Vec::new();
    let mut inits: Vec<(String, PrefixMatrix)> = Vec::new();
    let mut model = backbone.clone();
    let (merged, rep) = run_stage1(cfg, &mut model, cfg.prefix.design.clone(), &aux)?;
    let rows = merged.merge_for_target().len();
    stage1.push(rep);
    if aux.len() > 1 {
        for &k in &aux {
            let mut model = backbone.clone();
            let (p, rep) = run_stage1(cfg, &mut model, PrefixDesign::manual(rows, 0, 1)?, &[k])?;
            stage1.push(rep);
            inits.push((format!("only-{}", k.name()), p));
        }
    }
    let mut variants = BTreeMap::new();
    let mut per_seed = BTreeMap::new();
    let mut record = |name: &str, rep: RunReport| {
        per_seed.insert(
            name.to_string(),
            rep.seeds.iter().map(|s| s.metrics.get("rouge1").copied().unwrap_or(f64::NAN)).collect(),
        );
        variants.insert(name.to_string(), rep);
    };
    let run = |init: &dyn Fn(u64) -> Result<PrefixMatrix>, ab: Ablations| {
        multi_seed_report(&cfg.seeds, |seed| {
            let mut model = backbone.clone();
            let (_, r) = run_stage2(cfg, &mut model, &init(seed)?, seed, ab)?;
            Ok(metrics_of(&r))
        })
    };
    record("random", run(&|s| random_prefix(cfg, rows, s), Ablations::default())?);
    record("merged", run(&|_| Ok(merged.clone()), Ablations::default())?);
    for (name, p) in &inits {
        record(name, run(&|_| Ok(p.clone()), Ablations::default())?);
    }
    let no_prefix = Ablations {
        no_prefix: true,
        no_prompt: false,
    };
    record("merged-no-prefix", run(&|_| Ok(merged.clone()), no_prefix)?);
    let no_prompt = Ablations {
        no_prefix: false,
        no_prompt: true,
    };
    record("merged-no-prompt", run(&|_| Ok(merged.clone()), no_prompt)?);
    Ok(Comparison {
        stage1,
        variants,
        per_seed_rouge1: per_seed,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub stage1: Stage1Report,
    pub transfer: RunReport,
}

/// Backbone, stage 1 with the configured design, stage 2 per seed. Writes
/// `prefix.bin`, `stage1_loss.csv` and `metrics.json` into `out_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let backbone = load_or_build_backbone(&cfg.model, &cfg.backbone, &cfg.data.gen)?;
    let mut model = backbone.clone();
    let (prefix, stage1) = run_stage1(cfg, &mut model, cfg.prefix.design.clone(), &cfg.data.auxiliary)?;
    prefix.save(&out_dir.join("prefix.bin"))?;
    crate::trainer::write_loss_csv(&stage1.losses, &out_dir.join("stage1_loss.csv"))?;
    let transfer = multi_seed_report(&cfg.seeds, |seed| {
        let mut m = backbone.clone();
        let (_, r) = run_stage2(cfg, &mut m, &prefix, seed, cfg.stage2.ablations)?;
        Ok(metrics_of(&r))
    })?;
    let outcome = PipelineOutcome { stage1, transfer };
    crate::eval::export_metrics(&outcome, &out_dir.join("metrics.json"))?;
    Ok(outcome)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: ModelConfig,
    pub seed: u64,
    /// Tensor-wise relative error per parameter, the prefix included.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
}

/// Backward gradients of a random model-plus-prefix loss against central
/// differences, for every LM parameter and P_θ.
pub fn grad_check(config: &ModelConfig, seed: u64, eps: f64) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};

    let mut model = Transformer::new(config.clone(), seed)?;
    let mut prefix = PrefixMatrix::new(PrefixDesign::manual(2, 1, 1)?, config, seed ^ 0xabc)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // A larger prefix scale than the training init so its gradients are not tiny.
    for x in prefix.rows_mut().data_mut() {
        *x = rng.random_range(-0.5..0.5);
    }
    let src: Vec<usize> = (0..config.max_src_len.min(5))
        .map(|_| rng.random_range(0..config.vocab_size))
        .collect();
    let tgt: Vec<usize> = (0..config.max_tgt_len.saturating_sub(1).clamp(1, 3))
        .map(|_| rng.random_range(0..config.vocab_size))
        .collect();
    let rows = [0, 1, 2];
    let loss = |m: &Transformer, p: &PrefixMatrix| -> Result<f64> {
        let mut g = crate::tensor::Graph::new();
        let bp = m.bind(&mut g);
        let acts = p.gather(&mut g, &rows)?;
        let l = m.sequence_loss(&mut g, &bp, &src, &tgt, Some(&acts))?;
        Ok(g.value(l).item())
    };
    model.set_trainable(true);
    let analytic = {
        let mut g = crate::tensor::Graph::new();
        let bp = model.bind(&mut g);
        let acts = prefix.gather(&mut g, &rows)?;
        let l = model.sequence_loss(&mut g, &bp, &src, &tgt, Some(&acts))?;
        g.backward(l)?.param_grads()
    };
    let missing = |name: &str| Error::Contract(format!("no gradient for {name}"));
    let mut per_param = BTreeMap::new();
    for idx in 0..model.params().len() {
        let name = model.params().get(idx).name.clone();
        let orig = (*model.params().get(idx).value).clone();
        let fd = crate::tensor::finite_diff_grad(
            |t| {
                *model.params_mut().value_mut(idx) = t.clone();
                loss(&model, &prefix)
            },
            &orig,
            eps,
        )?;
        *model.params_mut().value_mut(idx) = orig;
        let bp = analytic.get(&name).ok_or_else(|| missing(&name))?;
        per_param.insert(name, crate::tensor::tensor_relative_error(bp, &fd, 1e-8));
    }
    let orig = prefix.rows().clone();
    let fd = crate::tensor::finite_diff_grad(
        |t| {
            *prefix.rows_mut() = t.clone();
            loss(&model, &prefix)
        },
        &orig,
        eps,
    )?;
    *prefix.rows_mut() = orig;
    let name = crate::prefix::PREFIX_PARAM;
    let bp = analytic.get(name).ok_or_else(|| missing(name))?;
    per_param.insert(name.into(), crate::tensor::tensor_relative_error(bp, &fd, 1e-8));
    let max_rel_error = per_param.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        config: config.clone(),
        seed,
        per_param,
        max_rel_error,
    })
}
