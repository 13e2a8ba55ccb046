//! Command-line experiment driver.
//!
//! Every stage reads and writes plain JSON/CSV under one run directory:
//!
//! ```text
//! run_config.json   resolved configuration
//! benchmark/        splits (JSON lines) and benchmark.json
//! base.json         trained base checkpoint
//! pool.json         frozen LoRA modules
//! memory.json       key memory
//! records.jsonl     one record per applied edit
//! metrics.json      evaluation report (metrics.csv holds the CSV row)
//! timing.json       wall-clock seconds per stage
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapters::LoraPool;
use crate::drift::{drift_csv, drift_experiment};
use crate::editor::{EditRecord, Editor, TrainRecipe};
use crate::error::{Result, SolaError};
use crate::evalkit::{
    compute_metrics, gen_benchmark, io_err, read_json, read_jsonl, rectify, write_json, write_jsonl, Benchmark,
    BenchmarkParams, MetricsReport, RectifyReport,
};
use crate::model::{accuracy, train_base, BaseModel, BaseTrainConfig, LayerId, ModelConfig};
use crate::numerics::SeededRng;
use crate::routing::{DistanceMetric, KeyMemory, DEFAULT_ALPHA};

pub const DEFAULT_RADIUS_GRID: [f64; 4] = [0.005, 0.02, 0.05, 0.1];
pub const DEFAULT_RANKS: [usize; 6] = [1, 2, 3, 4, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub base_train: BaseTrainConfig,
    pub recipe: TrainRecipe,
    pub alpha: f64,
    pub metric: String,
    pub benchmark: BenchmarkParams,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 7,
            model: ModelConfig::default(),
            base_train: BaseTrainConfig::default(),
            recipe: TrainRecipe::default(),
            alpha: DEFAULT_ALPHA,
            metric: "cosine".into(),
            benchmark: BenchmarkParams::default(),
            out: PathBuf::from("runs/default"),
        };
        cfg.set_seed(7);
        cfg
    }
}

impl RunConfig {
    /// The top-level seed drives every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.base_train.seed = seed;
        self.benchmark.seed = seed;
    }

    pub fn distance_metric(&self) -> Result<DistanceMetric> {
        DistanceMetric::parse(&self.metric)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distance_metric()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(SolaError::Param(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SolaError::MissingArtifact {
                path: path.to_path_buf(),
                what: "run config",
            });
        }
        read_json(path)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn require(path: PathBuf, what: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(SolaError::MissingArtifact { path, what })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn record_time(cfg: &RunConfig, stage: &str, secs: f64) -> Result<()> {
    let path = cfg.path("timing.json");
    let mut t: BTreeMap<String, f64> = if path.exists() {
        read_json(&path)?
    } else {
        BTreeMap::new()
    };
    t.insert(stage.to_string(), secs);
    write_json(&path, &t)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    write_json(&cfg.path("run_config.json"), cfg)
}

fn load_base(cfg: &RunConfig) -> Result<BaseModel> {
    let path = require(cfg.path("base.json"), "base checkpoint")?;
    let s = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    BaseModel::from_json(&s)
}

fn load_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    let dir = cfg.path("benchmark");
    require(dir.join("benchmark.json"), "benchmark")?;
    Benchmark::read_dir(&dir)
}

fn load_editor(cfg: &RunConfig) -> Result<Editor> {
    let model = load_base(cfg)?;
    let pool: LoraPool = read_json(&require(cfg.path("pool.json"), "LoRA pool")?)?;
    let memory: KeyMemory = read_json(&require(cfg.path("memory.json"), "key memory")?)?;
    let records: Vec<EditRecord> = read_jsonl(&require(cfg.path("records.jsonl"), "edit records")?)?;
    Ok(Editor {
        model,
        pool,
        memory,
        recipe: cfg.recipe.clone(),
        seed: cfg.seed,
        records,
    })
}

fn save_editor(cfg: &RunConfig, ed: &Editor) -> Result<()> {
    write_json(&cfg.path("pool.json"), &ed.pool)?;
    write_json(&cfg.path("memory.json"), &ed.memory)?;
    write_jsonl(&cfg.path("records.jsonl"), &ed.records)
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<Benchmark> {
    prepare_out(cfg)?;
    let bench = gen_benchmark(&cfg.benchmark, &cfg.model)?;
    bench.write_dir(&cfg.path("benchmark"))?;
    Ok(bench)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub param_count: usize,
    pub rectify: RectifyReport,
}

/// Trains the base model, then rectifies the benchmark against it so that
/// every edit changes a prediction and holdout queries stay clear of keys.
pub fn cmd_train_base(cfg: &RunConfig) -> Result<BaseSummary> {
    prepare_out(cfg)?;
    let mut bench = load_benchmark(cfg)?;
    let start = Instant::now();
    let model = BaseModel::build(cfg.model.clone(), &mut SeededRng::derive(cfg.model.seed, 0xB0DE))?;
    let (model, report) = train_base(model, &bench.base_train, &cfg.base_train)?;
    record_time(cfg, "train_base", start.elapsed().as_secs_f64())?;
    let rect = rectify(&mut bench, &model, cfg.alpha, cfg.distance_metric()?)?;
    bench.write_dir(&cfg.path("benchmark"))?;
    write_text(&cfg.path("base.json"), &model.to_json()?)?;
    let summary = BaseSummary {
        epochs: report.epochs,
        final_loss: report.final_loss,
        train_accuracy: report.train_accuracy,
        test_accuracy: accuracy(&model, &bench.base_test)?,
        param_count: model.param_count(),
        rectify: rect,
    };
    write_json(&cfg.path("base_summary.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_edit(cfg: &RunConfig) -> Result<Editor> {
    prepare_out(cfg)?;
    let model = load_base(cfg)?;
    let bench = load_benchmark(cfg)?;
    let mut ed = Editor::new(
        model,
        KeyMemory::new(cfg.alpha, cfg.distance_metric()?),
        cfg.recipe.clone(),
        cfg.seed,
    );
    let start = Instant::now();
    for task in &bench.edits {
        ed.apply_edit(task)?;
    }
    record_time(cfg, "edit", start.elapsed().as_secs_f64())?;
    save_editor(cfg, &ed)?;
    Ok(ed)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    prepare_out(cfg)?;
    let ed = load_editor(cfg)?;
    let bench = load_benchmark(cfg)?;
    let report = compute_metrics(&ed, &bench)?;
    write_json(&cfg.path("metrics.json"), &report)?;
    write_text(
        &cfg.path("metrics.csv"),
        &format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollbackEntry {
    pub edit_id: usize,
    pub keys_removed: usize,
}

/// Deletes the keys of the given edits. Repeating a rollback removes nothing.
pub fn cmd_rollback(cfg: &RunConfig, edit_ids: &[usize]) -> Result<Vec<RollbackEntry>> {
    prepare_out(cfg)?;
    let mut ed = load_editor(cfg)?;
    for &id in edit_ids {
        if !ed.records.iter().any(|r| r.edit_id == id) {
            return Err(SolaError::Param(format!("edit {id} was never applied")));
        }
    }
    let entries: Vec<RollbackEntry> = edit_ids
        .iter()
        .map(|&edit_id| RollbackEntry {
            edit_id,
            keys_removed: ed.rollback(edit_id),
        })
        .collect();
    write_json(&cfg.path("memory.json"), &ed.memory)?;
    let log = cfg.path("rollback.json");
    let mut all: Vec<RollbackEntry> = if log.exists() { read_json(&log)? } else { Vec::new() };
    all.extend(entries.iter().cloned());
    write_json(&log, &all)?;
    Ok(entries)
}

pub fn cmd_drift(cfg: &RunConfig, radius_grid: &[f64]) -> Result<Vec<crate::drift::DriftRow>> {
    prepare_out(cfg)?;
    let model = load_base(cfg)?;
    let bench = load_benchmark(cfg)?;
    let start = Instant::now();
    let rows = drift_experiment(
        &model,
        &bench.edits,
        &bench.holdout,
        radius_grid,
        cfg.distance_metric()?,
        &cfg.recipe,
        cfg.seed,
    )?;
    record_time(cfg, "drift", start.elapsed().as_secs_f64())?;
    write_text(&cfg.path("drift.csv"), &drift_csv(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: MetricsReport,
    pub unresolved_conflicts: usize,
    pub edit_time_min: f64,
}

fn run_variant(
    model: BaseModel,
    bench: &Benchmark,
    cfg: &RunConfig,
    recipe: TrainRecipe,
) -> Result<(MetricsReport, f64)> {
    let mut ed = Editor::new(
        model,
        KeyMemory::new(cfg.alpha, cfg.distance_metric()?),
        recipe,
        cfg.seed,
    );
    let start = Instant::now();
    for task in &bench.edits {
        ed.apply_edit(task)?;
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    Ok((compute_metrics(&ed, bench)?, minutes))
}

fn ablation_csv(first: &str, rows: &[AblationRow]) -> String {
    let mut s = format!("{first},es,err,trr,trr_base,mismatches,trainable_params,unresolved_conflicts,edit_time_min\n");
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6}\n",
            r.label,
            m.es_rate,
            m.err,
            m.trr,
            m.trr_base,
            m.mismatches,
            m.trainable_params_per_edit,
            r.unresolved_conflicts,
            r.edit_time_min
        ));
    }
    s
}

pub fn cmd_ablate_rank(cfg: &RunConfig, ranks: &[usize]) -> Result<Vec<AblationRow>> {
    prepare_out(cfg)?;
    let model = load_base(cfg)?;
    let bench = load_benchmark(cfg)?;
    let mut rows = Vec::new();
    for &rank in ranks {
        let recipe = TrainRecipe {
            rank,
            ..cfg.recipe.clone()
        };
        let (metrics, edit_time_min) = run_variant(model.clone(), &bench, cfg, recipe)?;
        rows.push(AblationRow {
            label: rank.to_string(),
            metrics,
            unresolved_conflicts: 0,
            edit_time_min,
        });
    }
    write_text(&cfg.path("ablate_rank.csv"), &ablation_csv("rank", &rows))?;
    Ok(rows)
}

/// Parses `"0-1,1-2"` into contiguous block windows.
pub fn parse_layer_windows(s: &str) -> Result<Vec<Vec<LayerId>>> {
    s.split(',')
        .map(|w| {
            let (a, b) = w
                .trim()
                .split_once('-')
                .ok_or_else(|| SolaError::Param(format!("layer window {w:?} is not of the form a-b")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| SolaError::Param(format!("bad layer index {x:?}")))
            };
            let (a, b) = (parse(a)?, parse(b)?);
            if a > b {
                return Err(SolaError::Param(format!("layer window {w:?} is reversed")));
            }
            Ok((a..=b).map(LayerId).collect())
        })
        .collect()
}

pub fn default_layer_windows(n_blocks: usize) -> Vec<Vec<LayerId>> {
    (0..n_blocks.saturating_sub(1))
        .map(|i| vec![LayerId(i), LayerId(i + 1)])
        .collect()
}

/// Re-targets the trained base to each window of edited layers. The
/// benchmark is re-rectified per window because the query moves with the
/// master layer; conflicts that cannot be removed are reported per row.
pub fn cmd_ablate_layers(cfg: &RunConfig, windows: &[Vec<LayerId>]) -> Result<Vec<AblationRow>> {
    prepare_out(cfg)?;
    let base = load_base(cfg)?;
    let bench = load_benchmark(cfg)?;
    let mut rows = Vec::new();
    for window in windows {
        let mut model_cfg = base.config().clone();
        model_cfg.edited_layers = window.clone();
        let model = BaseModel::from_weights(model_cfg, base.weights().clone())?;
        let mut b = bench.clone();
        let rect = rectify(&mut b, &model, cfg.alpha, cfg.distance_metric()?)?;
        let (metrics, edit_time_min) = run_variant(model, &b, cfg, cfg.recipe.clone())?;
        let label = format!("{}-{}", window[0].0, window[window.len() - 1].0);
        rows.push(AblationRow {
            label,
            metrics,
            unresolved_conflicts: rect.unresolved_edits + rect.unresolved_holdout,
            edit_time_min,
        });
    }
    write_text(&cfg.path("ablate_layers.csv"), &ablation_csv("layers", &rows))?;
    Ok(rows)
}

/// Writes every stored key as a CSV row for external visualization.
pub fn cmd_dump_keys(cfg: &RunConfig) -> Result<usize> {
    prepare_out(cfg)?;
    let memory: KeyMemory = read_json(&require(cfg.path("memory.json"), "key memory")?)?;
    let dim = memory.entries().first().map_or(0, |e| e.key.len());
    let mut s = String::from("edit_id,instance_id,lora_id");
    for j in 0..dim {
        s.push_str(&format!(",k{j}"));
    }
    s.push('\n');
    for e in memory.entries() {
        s.push_str(&format!("{},{},{}", e.edit_id, e.instance_id, e.lora_id));
        for v in &e.key {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    write_text(&cfg.path("keys.csv"), &s)?;
    Ok(memory.len())
}

/// gen → train-base → edit → eval.
pub fn cmd_run(cfg: &RunConfig) -> Result<MetricsReport> {
    cmd_gen(cfg)?;
    cmd_train_base(cfg)?;
    cmd_edit(cfg)?;
    cmd_eval(cfg)
}

#[derive(Debug, Parser)]
#[command(
    name = "sola",
    version,
    about = "Reversible lifelong model editing with routed LoRA modules"
)]
pub struct Cli {
    /// Run configuration (JSON). Defaults to `<out>/run_config.json` when it exists.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stage; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory. The SOLA_OUT environment variable takes precedence.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    Gen,
    /// Train the base model and rectify the benchmark against it.
    TrainBase,
    /// Apply the edit stream.
    Edit,
    /// Compute metrics for the current editing state.
    Eval,
    /// Remove the keys of the given edits.
    Rollback {
        #[arg(long, value_delimiter = ',', required = true)]
        edit_ids: Vec<usize>,
    },
    /// Cluster-router baseline over a radius grid.
    Drift {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RADIUS_GRID)]
        radius_grid: Vec<f64>,
    },
    /// Edited-layer windows, e.g. `0-1,1-2,2-3`.
    AblateLayers {
        #[arg(long)]
        layers: Option<String>,
    },
    /// LoRA ranks to compare.
    AblateRank {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RANKS)]
        ranks: Vec<usize>,
    },
    /// Export the key memory as CSV.
    DumpKeys,
    /// Full pipeline: gen, train-base, edit, eval.
    Run,
}

/// Resolves the configuration from flags, `SOLA_OUT` and any saved config.
pub fn resolve_config(cli: &Cli, env_out: Option<PathBuf>) -> Result<RunConfig> {
    let out = env_out.or_else(|| cli.out.clone());
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let saved = out
                .clone()
                .unwrap_or_else(|| RunConfig::default().out)
                .join("run_config.json");
            if saved.exists() {
                RunConfig::load(&saved)?
            } else {
                RunConfig::default()
            }
        }
    };
    if let Some(out) = out {
        cfg.out = out;
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    Ok(cfg)
}

pub fn execute(cli: &Cli, cfg: &RunConfig) -> Result<String> {
    Ok(match &cli.command {
        Command::Gen => {
            let b = cmd_gen(cfg)?;
            format!("generated {} edits, {} holdout items", b.edits.len(), b.holdout.len())
        }
        Command::TrainBase => {
            let s = cmd_train_base(cfg)?;
            format!(
                "base: train acc {:.3}, test acc {:.3}, {} edits replaced, {} holdout resampled",
                s.train_accuracy,
                s.test_accuracy,
                s.rectify.replaced_edits.len(),
                s.rectify.resampled_holdout.len()
            )
        }
        Command::Edit => {
            let ed = cmd_edit(cfg)?;
            format!("applied {} edits", ed.records.len())
        }
        Command::Eval | Command::Run => {
            let m = if matches!(cli.command, Command::Run) {
                cmd_run(cfg)?
            } else {
                cmd_eval(cfg)?
            };
            format!(
                "ES {:.4} ERR {:.4} TRR {:.4} (base {:.4}) mismatches {}",
                m.es_rate, m.err, m.trr, m.trr_base, m.mismatches
            )
        }
        Command::Rollback { edit_ids } => {
            let e = cmd_rollback(cfg, edit_ids)?;
            let removed: usize = e.iter().map(|x| x.keys_removed).sum();
            format!("rolled back {} edits, {removed} keys removed", e.len())
        }
        Command::Drift { radius_grid } => drift_csv(&cmd_drift(cfg, radius_grid)?),
        Command::AblateLayers { layers } => {
            let windows = match layers {
                Some(s) => parse_layer_windows(s)?,
                None => default_layer_windows(cfg.model.n_blocks),
            };
            ablation_csv("layers", &cmd_ablate_layers(cfg, &windows)?)
        }
        Command::AblateRank { ranks } => ablation_csv("rank", &cmd_ablate_rank(cfg, ranks)?),
        Command::DumpKeys => format!("wrote {} keys", cmd_dump_keys(cfg)?),
    })
}
