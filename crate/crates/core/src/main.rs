use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use prefixmerge::eval::{attention_profile, export_metrics, export_profile};
use prefixmerge::fisher::write_reports_csv;
use prefixmerge::model::{ModelConfig, Transformer};
use prefixmerge::pipeline::{
    grad_check, load_or_build_backbone, random_prefix, run_stage1, run_stage2, target_data,
    ExperimentConfig,
};
use prefixmerge::prefix::{PrefixDesign, PrefixMatrix};
use prefixmerge::tasks::leakage_check;
use prefixmerge::trainer::{evaluate, multi_seed_report, write_loss_csv};
use prefixmerge::{Error, Result};

#[derive(Parser)]
#[command(name = "prefixmerge", version, about = "Prefix-merging experiments on a toy encoder-decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to anything it omits.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set stage1.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Artifact directory.
    #[arg(long, short, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1 with a manual shared/unique design.
    MergeTrain(Common),
    /// Stage 1 with the self-adaptive (Fisher-selected) design.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init_len: Option<usize>,
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Stage 2 few-shot prefix-tuning on the target task, over all seeds.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Stage-1 prefix; a fresh random prefix of `--random-rows` rows otherwise.
        #[arg(long)]
        prefix: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        random_rows: usize,
        #[arg(long)]
        no_prefix: bool,
        #[arg(long)]
        no_prompt: bool,
    },
    /// Greedy decoding plus ROUGE of a prefix on the target test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prefix: PathBuf,
    },
    /// Export prefix attention profiles as CSV.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prefix: PathBuf,
    },
    /// Near-duplicate check between two target files (one per line).
    LeakageCheck {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 2)]
        max_word_diff: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Backward vs. finite differences on random toy models.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        configs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key {key:?}")))?;
    let mut table = root;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} in {key:?} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// The value parses as a TOML literal when it can, as a bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    ExperimentConfig::from_toml_str(&text)
}

fn backbone(cfg: &ExperimentConfig, out: &Path) -> Result<Transformer> {
    let mut bb = cfg.backbone.clone();
    bb.checkpoint.get_or_insert_with(|| out.join("backbone.bin"));
    load_or_build_backbone(&cfg.model, &bb, &cfg.data.gen)
}

fn load_prefix(path: &Path, model: &ModelConfig) -> Result<PrefixMatrix> {
    let p = PrefixMatrix::load(path)?;
    p.check_compatible(model)?;
    Ok(p)
}

fn stage1(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value> {
    std::fs::create_dir_all(out)?;
    let mut model = backbone(cfg, out)?;
    let (prefix, report) = run_stage1(cfg, &mut model, cfg.prefix.design.clone(), &cfg.data.auxiliary)?;
    prefix.save(&out.join("prefix.bin"))?;
    write_loss_csv(&report.losses, &out.join("stage1_loss.csv"))?;
    if let Some(sa) = &report.self_adaptive {
        write_reports_csv(&sa.reports, &out.join("fisher.csv"))?;
    }
    export_metrics(&report, &out.join("stage1.json"))?;
    let last = report.losses.last().copied();
    Ok(json!({
        "design": report.design,
        "prefix": out.join("prefix.bin"),
        "final_loss": last,
        "split": report.self_adaptive.as_ref().map(|s| s.split),
        "lm_checksum": report.lm_checksum,
    }))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::MergeTrain(c) => {
            let cfg = load_config(&c)?;
            if !matches!(cfg.prefix.design, PrefixDesign::Manual { .. }) {
                return Err(Error::Config("merge-train needs a manual prefix design; use adapt".into()));
            }
            stage1(&cfg, &c.out)
        }
        Command::Adapt {
            common,
            init_len,
            top_n,
        } => {
            let mut cfg = load_config(&common)?;
            let n = cfg.data.auxiliary.len();
            let (il, tn) = match cfg.prefix.design {
                PrefixDesign::SelfAdaptive { init_len, top_n, .. } => (init_len, top_n),
                PrefixDesign::Manual { .. } => (40, 25),
            };
            cfg.prefix.design = PrefixDesign::self_adaptive(init_len.unwrap_or(il), top_n.unwrap_or(tn), n)?;
            stage1(&cfg, &common.out)
        }
        Command::Transfer {
            common,
            prefix,
            random_rows,
            no_prefix,
            no_prompt,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.stage2.ablations.no_prefix |= no_prefix;
            cfg.stage2.ablations.no_prompt |= no_prompt;
            std::fs::create_dir_all(&common.out)?;
            let model = backbone(&cfg, &common.out)?;
            let init = prefix.as_deref().map(|p| load_prefix(p, &cfg.model)).transpose()?;
            let report = multi_seed_report(&cfg.seeds, |seed| {
                let start = match &init {
                    Some(p) => p.clone(),
                    None => random_prefix(&cfg, random_rows, seed)?,
                };
                let mut m = model.clone();
                let (trained, r) = run_stage2(&cfg, &mut m, &start, seed, cfg.stage2.ablations)?;
                trained.save(&common.out.join(format!("prefix_seed{seed}.bin")))?;
                write_loss_csv(&r.losses, &common.out.join(format!("stage2_loss_seed{seed}.csv")))?;
                Ok([
                    ("rouge1".to_string(), r.after.rouge.r1.f1),
                    ("rouge2".to_string(), r.after.rouge.r2.f1),
                    ("rougeL".to_string(), r.after.rouge.rl.f1),
                    ("test_loss".to_string(), r.after.mean_loss),
                ]
                .into())
            })?;
            export_metrics(&report, &common.out.join("metrics.json"))?;
            Ok(serde_json::to_value(&report)?)
        }
        Command::Eval { common, prefix } => {
            let cfg = load_config(&common)?;
            let model = backbone(&cfg, &common.out)?;
            let p = load_prefix(&prefix, &cfg.model)?;
            let (_, test) = target_data(&cfg, 0)?;
            let rows = p.merge_for_target();
            let r = evaluate(&model, Some(&p), &rows, &test, cfg.stage2.ablations, cfg.eval.decode_options())?;
            std::fs::create_dir_all(&common.out)?;
            export_metrics(&r, &common.out.join("eval.json"))?;
            Ok(serde_json::to_value(&r)?)
        }
        Command::Viz { common, prefix } => {
            let cfg = load_config(&common)?;
            let model = backbone(&cfg, &common.out)?;
            let p = load_prefix(&prefix, &cfg.model)?;
            let (_, test) = target_data(&cfg, 0)?;
            let rows = p.merge_for_target();
            let profiles = attention_profile(&model, &p, &rows, &test, cfg.eval.profile_samples, cfg.eval.decode_options())?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("profile.csv");
            export_profile(&profiles, &path)?;
            let totals: Vec<_> = profiles
                .iter()
                .map(|p| json!({"site": p.site.name(), "n_samples": p.n_samples, "regions": p.region_totals()}))
                .collect();
            Ok(json!({"profile": path, "sites": totals}))
        }
        Command::LeakageCheck {
            train,
            test,
            max_word_diff,
            out,
        } => {
            let read = |p: &Path| -> Result<Vec<String>> {
                Ok(std::fs::read_to_string(p)?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(str::to_string)
                    .collect())
            };
            let report = leakage_check(&read(&train)?, &read(&test)?, max_word_diff)?;
            if let Some(o) = out {
                export_metrics(&report, &o)?;
            }
            Ok(serde_json::to_value(&report)?)
        }
        Command::GradCheck {
            configs,
            seed,
            tolerance,
        } => {
            let mut worst = 0.0f64;
            let mut rows = Vec::new();
            for i in 0..configs {
                let s = seed.wrapping_add(i);
                let cfg = ModelConfig {
                    n_layers: 1 + (s % 2) as usize,
                    n_heads: 1 + (s % 3 == 0) as usize,
                    d_model: 8,
                    d_ff: 12,
                    vocab_size: 16,
                    max_src_len: 6,
                    max_tgt_len: 4,
                };
                let r = grad_check(&cfg, s, prefixmerge::tensor::DEFAULT_FD_EPS)?;
                worst = worst.max(r.max_rel_error);
                rows.push(json!({"seed": s, "max_rel_error": r.max_rel_error}));
            }
            if !(worst <= tolerance) {
                return Err(Error::Oracle(format!(
                    "max relative error {worst:e} exceeds {tolerance:e}"
                )));
            }
            Ok(json!({"configs": rows, "max_rel_error": worst, "tolerance": tolerance}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(2)
        }
    }
}
