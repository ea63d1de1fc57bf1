use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sentry_core::attention::top_u;
use sentry_core::checkpoint::Checkpoint;
use sentry_core::harness::{
    accuracy_with_mask, evaluate, export_attention, generate, platform_mask, rows_to_csv, run_sweep, score_units,
    train_run,
};
use sentry_core::pruner::{materialize, model_flops, model_memory, select_by_budget};
use sentry_core::{Backbone, ExperimentConfig, GateSet, ModalityMask, Sample, Scorer};

#[derive(Parser)]
#[command(name = "sentry", version, about = "Modality-aware zero-shot pruning of multimodal time-series transformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML or JSON); defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed. For `sweep`, the first of the grid's consecutive seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen,
    /// Train a backbone with its gates.
    Train,
    /// Prune a trained model for a platform mask.
    Prune {
        /// Training run directory or model checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.23)]
        ratio: f64,
        /// Number of absent modalities; the platform mask is drawn from the seed.
        #[arg(long, default_value_t = 0, conflicts_with = "mask")]
        missing: usize,
        /// Explicit platform mask such as `110111`.
        #[arg(long)]
        mask: Option<String>,
        #[arg(long, default_value = "sentrygate")]
        scorer: Scorer,
    },
    /// Evaluate a model on the held-out split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Modalities dropped per sample, resampled for every sample.
        #[arg(long, default_value_t = 0, conflicts_with = "mask")]
        missing: usize,
        /// Fixed mask for every sample instead of random drops.
        #[arg(long)]
        mask: Option<String>,
        /// Number of evaluation seeds for random drops.
        #[arg(long, default_value_t = 5)]
        repeats: u64,
    },
    /// Train every seed of the grid and prune with every scorer.
    Sweep,
    /// Dense versus sparse attention FLOP counts.
    Flops {
        /// Count this model instead of the configured architecture.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Write every head's attention matrix for one test sample.
    ExportAttn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mask: Option<String>,
        /// Index into the held-out split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

/// Stored in every checkpoint this tool writes.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Provenance {
    experiment: ExperimentConfig,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prune: Option<Value>,
}

fn load_config(path: Option<&Path>) -> Result<Option<ExperimentConfig>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text)?,
        _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    };
    Ok(Some(cfg))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text).with_context(|| format!("writing {name}"))
}

fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.sgck")
    } else {
        p.to_path_buf()
    }
}

fn load_model(p: &Path) -> Result<(Backbone, Option<Provenance>)> {
    let path = model_path(p);
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let (model, prov) = Backbone::from_checkpoint(&ck)?;
    Ok((model, prov.map(serde_json::from_value).transpose()?))
}

fn load_gates(p: &Path, model: &Backbone) -> Result<GateSet> {
    let dir = if p.is_dir() { p.to_path_buf() } else { p.parent().unwrap_or(Path::new(".")).to_path_buf() };
    let path = dir.join("gates.json");
    let table = serde_json::from_str(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
    Ok(GateSet::from_table(&table, &model.layout())?)
}

fn parse_mask(bits: &str, m: usize) -> Result<ModalityMask> {
    let mask = ModalityMask::parse(bits)?;
    mask.check_len(m)?;
    if !mask.any_present() {
        bail!("mask {bits} has no modality present");
    }
    Ok(mask)
}

/// Resolves (config, seed): the config file wins, then the model's record, then defaults.
fn resolve(common: &Common, recorded: Option<&Provenance>) -> Result<(ExperimentConfig, u64)> {
    let file = load_config(common.config.as_deref())?;
    let cfg = file.or_else(|| recorded.map(|p| p.experiment.clone())).unwrap_or_default();
    let seed = common.seed.or(recorded.map(|p| p.seed)).unwrap_or(cfg.train.seed);
    cfg.validate()?;
    Ok((cfg, seed))
}

fn held_out(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Sample>> {
    Ok(generate(&cfg.for_seed(seed).0)?.test)
}

fn sample_json(s: &Sample) -> Value {
    let streams: Vec<Value> = s
        .streams
        .iter()
        .map(|x| match x {
            Some(t) => json!((0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect::<Vec<_>>()),
            None => Value::Null,
        })
        .collect();
    json!({ "label": s.label, "streams": streams })
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let out = &common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Gen => {
            let (cfg, seed) = resolve(common, None)?;
            let (spec, _) = cfg.for_seed(seed);
            let data = generate(&spec)?;
            write_json(out, "config.json", &json!({ "experiment": cfg, "seed": seed }))?;
            write_json(
                out,
                "dataset.json",
                &json!({
                    "spec": spec,
                    "train": data.train.iter().map(sample_json).collect::<Vec<_>>(),
                    "test": data.test.iter().map(sample_json).collect::<Vec<_>>(),
                }),
            )?;
            println!("wrote {} train and {} test samples to {}", data.train.len(), data.test.len(), out.display());
        }
        Command::Train => {
            let (cfg, seed) = resolve(common, None)?;
            let run = train_run(&cfg, seed)?;
            let prov = Provenance { experiment: cfg.clone(), seed, prune: None };
            run.model.to_checkpoint(Some(serde_json::to_value(&prov)?))?.save(out.join("model.sgck"))?;
            let masks = ModalityMask::all_nonempty(cfg.backbone.n_modalities);
            write_json(out, "gates.json", &run.gates.table(&masks)?)?;
            write_json(out, "report.json", &run.report)?;
            write_json(out, "config.json", &json!({ "experiment": cfg, "seed": seed }))?;
            let last = run.report.epochs.last();
            println!(
                "trained seed {seed}: train accuracy {:.4}, {} backbone and {} gate parameters -> {}",
                last.map_or(0.0, |e| e.train_accuracy),
                run.report.backbone_params,
                run.report.gate_params,
                out.display()
            );
        }
        Command::Prune { model, ratio, missing, mask, scorer } => {
            let (backbone, prov) = load_model(model)?;
            let (cfg, seed) = resolve(common, prov.as_ref())?;
            let m = backbone.config.n_modalities;
            let mask = match mask {
                Some(bits) => parse_mask(bits, m)?,
                None => platform_mask(seed, m, *missing)?,
            };
            let gates = match scorer {
                Scorer::Sentrygate => load_gates(model, &backbone)?,
                _ => GateSet::new(&backbone.layout(), m, 0)?,
            };
            let train = match scorer {
                Scorer::Taylor => generate(&cfg.for_seed(seed).0)?.train,
                _ => Vec::new(),
            };
            let scores = score_units(*scorer, &backbone, &gates, &mask, &train, seed)?;
            let plan = select_by_budget(&scores, &backbone.layout(), *ratio)?;
            let pruned = materialize(&backbone, &plan)?;
            let summary = json!({
                "scorer": scorer,
                "ratio": ratio,
                "mask": mask.bits(),
                "seed": seed,
                "total_units": plan.total_units,
                "dropped_units": plan.dropped_units,
                "floor_restored": plan.floor_restored,
                "params_before": backbone.param_count(),
                "params_after": pruned.param_count(),
                "flops_before": model_flops(&backbone, None),
                "flops_after": model_flops(&pruned, None),
                "memory_before": model_memory(&backbone)?,
                "memory_after": model_memory(&pruned)?,
            });
            let prov = Provenance { experiment: cfg.clone(), seed, prune: Some(summary.clone()) };
            pruned.to_checkpoint(Some(serde_json::to_value(&prov)?))?.save(out.join("model.sgck"))?;
            write_json(out, "plan.json", &plan)?;
            write_json(out, "scores.json", &scores.entries(&backbone.layout()))?;
            write_json(out, "prune.json", &summary)?;
            write_json(out, "config.json", &json!({ "experiment": cfg, "seed": seed }))?;
            println!(
                "{scorer} pruned {} of {} units for mask {}: {} -> {} parameters",
                plan.dropped_units,
                plan.total_units,
                mask.bits(),
                backbone.param_count(),
                pruned.param_count()
            );
        }
        Command::Eval { model, missing, mask, repeats } => {
            let (backbone, prov) = load_model(model)?;
            let (cfg, seed) = resolve(common, prov.as_ref())?;
            let test = held_out(&cfg, seed)?;
            let result = match mask {
                Some(bits) => {
                    let mask = parse_mask(bits, backbone.config.n_modalities)?;
                    let acc = accuracy_with_mask(&backbone, &test, &mask)?;
                    json!({ "mask": mask.bits(), "accuracy": acc, "seed": seed })
                }
                None => {
                    let seeds: Vec<u64> = (0..*repeats).map(|i| seed + i).collect();
                    let r = evaluate(&backbone, &test, *missing, &seeds)?;
                    json!({ "missing": r.missing, "per_seed": r.per_seed, "accuracy": r.mean, "std": r.std, "seed": seed })
                }
            };
            write_json(out, "eval.json", &result)?;
            println!("{}", serde_json::to_string(&result)?);
        }
        Command::Sweep => {
            let (mut cfg, _) = resolve(common, None)?;
            if let Some(s) = common.seed {
                let n = cfg.grid.seeds.len() as u64;
                cfg.grid.seeds = (s..s + n).collect();
            }
            let report = run_sweep(&cfg)?;
            fs::write(out.join("sweep.csv"), rows_to_csv(&report.rows)?)?;
            write_json(out, "summary.json", &report.summary)?;
            write_json(out, "runs.json", &report.runs)?;
            write_json(out, "config.json", &json!({ "experiment": cfg, "seeds": cfg.grid.seeds }))?;
            for (scorer, acc) in &report.summary.overall {
                println!("{scorer:>10} mean accuracy {acc:.4}");
            }
            println!("{} rows -> {}", report.rows.len(), out.join("sweep.csv").display());
        }
        Command::Flops { model } => {
            let backbone = match model {
                Some(p) => load_model(p)?.0,
                None => {
                    let (cfg, seed) = resolve(common, None)?;
                    Backbone::new(cfg.backbone.clone(), seed)?
                }
            };
            let dense = model_flops(&backbone, Some(false));
            let sparse = model_flops(&backbone, Some(true));
            let c = &backbone.config;
            let report = json!({
                "dense": dense,
                "sparse": sparse,
                "total_ratio": sparse.total / dense.total,
                "attention_ratio": sparse.attention / dense.attention,
                "top_u": top_u(c.seq_len, c.sparsity_const),
                "seq_len": c.seq_len,
            });
            write_json(out, "flops.json", &report)?;
            println!("dense  total {:.0} (attention {:.0})", dense.total, dense.attention);
            println!("sparse total {:.0} (attention {:.0})", sparse.total, sparse.attention);
            println!("ratio  total {:.4} (attention {:.4})", sparse.total / dense.total, sparse.attention / dense.attention);
        }
        Command::ExportAttn { model, mask, sample } => {
            let (backbone, prov) = load_model(model)?;
            let (cfg, seed) = resolve(common, prov.as_ref())?;
            let test = held_out(&cfg, seed)?;
            let s = test.get(*sample).ok_or_else(|| anyhow!("sample {sample} out of range (0..{})", test.len()))?;
            let mask = match mask {
                Some(bits) => parse_mask(bits, backbone.config.n_modalities)?,
                None => ModalityMask::all_present(backbone.config.n_modalities),
            };
            let ck = export_attention(&backbone, s, &mask)?;
            ck.save(out.join("attention.sgck"))?;
            println!("wrote {} attention matrices to {}", ck.entries.len(), out.join("attention.sgck").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
