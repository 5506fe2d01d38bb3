//! Experiment harness: subcommands for data generation, training,
//! evaluation, baselines, oracle suites, and seed sweeps. Every run leaves a
//! manifest (config echo, seed, version, output list) next to its outputs.

use crate::config::{load_config, DatasetSource, ExperimentConfig};
use crate::data::{generate_synthetic, load_dataset, save_dataset, split_indices, Dataset};
use crate::encoders::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::eval::{
    class_prototypes, classify_dataset, compute_metrics, format_mean_std, mean_std,
    write_metrics_csv, Metrics,
};
use crate::graph::GraphKind;
use crate::oracle;
use crate::trainer::{train, unimodal_baseline, TrainState, TrainingReport};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "graphbind", version, about = "Graph-scheduled multimodal contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset and write it as manifest + tables.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the configured dataset; writes checkpoint, reports, and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint under the configured protocol.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate supervised single-modality baselines.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict to one modality index; all modalities when absent.
        #[arg(long)]
        modality: Option<usize>,
    },
    /// Run the brute-force verification suites and write their reports.
    Oracle {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full seed sweep: tree and fully connected variants plus unimodal
    /// baselines, aggregated as mean and std per metric.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point used by `main`; returns the process exit code.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(&config, out, seed),
        Command::Train { config, out, seed } => cmd_train(&config, out, seed),
        Command::Eval {
            config,
            checkpoint,
            out,
            seed,
        } => cmd_eval(&config, &checkpoint, out, seed),
        Command::Baseline {
            config,
            out,
            seed,
            modality,
        } => cmd_baseline(&config, out, seed, modality),
        Command::Oracle { out, seed } => cmd_oracle(out, seed),
        Command::Sweep { config, out } => cmd_sweep(&config, out),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Materialize the configured dataset for one run seed.
pub fn build_dataset(cfg: &ExperimentConfig, run_seed: u64) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic { spec, seed } => generate_synthetic(spec, seed.unwrap_or(run_seed)),
        DatasetSource::Manifest { path } => load_dataset(path),
    }
}

#[derive(serde::Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    outputs: Vec<String>,
}

fn write_run_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    outputs: &[&str],
) -> Result<()> {
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config: cfg,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let path = dir.join("run_manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Which model a single run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Graph(GraphKind),
    Baseline(usize),
}

impl Variant {
    pub fn dir_name(&self, ds: &Dataset) -> String {
        match self {
            Variant::Graph(kind) => kind.to_string(),
            Variant::Baseline(m) => format!("unimodal-{}", ds.modalities[*m].name),
        }
    }
}

/// Train one variant on one seed, evaluate on the held-out split, and write
/// checkpoint, training report, graph log, metrics, confusion, and manifest
/// into `dir`.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    dir: &Path,
) -> Result<Metrics> {
    ensure_dir(dir)?;
    let ds = build_dataset(cfg, seed)?;
    let (train_idx, eval_idx) = split_indices(ds.n_instances(), cfg.eval_fraction, seed)?;
    let train_ds = ds.restrict(&train_idx);
    let mut eval_ds = ds.restrict(&eval_idx);
    if let Variant::Baseline(modality) = variant {
        // A single-modality model can only be scored where its modality
        // exists; restricting to that subset favors the baseline, so the
        // multimodal comparison stays conservative.
        let present: Vec<usize> = eval_ds.modalities[modality].present_indices();
        eval_ds = eval_ds.restrict(&present);
    }

    let mut train_cfg = cfg.with_run_seed(seed);
    let (state, report): (TrainState, TrainingReport) = match variant {
        Variant::Graph(kind) => {
            train_cfg.graph_kind = kind;
            if kind == GraphKind::Fcg {
                train_cfg.prune_count = 0;
            }
            train(&train_ds, &train_cfg)?
        }
        Variant::Baseline(modality) => unimodal_baseline(&train_ds, modality, &train_cfg)?,
    };

    save_checkpoint(&dir.join("checkpoint.bin"), &state.checkpoint_entries())?;
    report.write_csv(&dir.join("training_report.csv"))?;
    report.write_snapshots(&dir.join("graph_log.jsonl"))?;

    let protos = class_prototypes(&state, &train_ds)?;
    let preds = classify_dataset(&protos, &state, &eval_ds)?;
    let labels = eval_ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Eval("evaluation needs labels".to_string()))?;
    let metrics = compute_metrics(&preds, labels)?;
    write_metrics_csv(&dir.join("metrics.csv"), &[(seed, metrics.clone())])?;
    metrics.write_confusion_csv(&dir.join("confusion.csv"))?;
    write_run_manifest(
        dir,
        cfg,
        seed,
        &[
            "checkpoint.bin",
            "training_report.csv",
            "graph_log.jsonl",
            "metrics.csv",
            "confusion.csv",
        ],
    )?;
    Ok(metrics)
}

fn cmd_generate(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let run_seed = seed.unwrap_or(cfg.seeds[0]);
    let out = out.unwrap_or_else(|| cfg.output_dir.clone()).join("dataset");
    let ds = build_dataset(&cfg, run_seed)?;
    ensure_dir(&out)?;
    let manifest = save_dataset(&ds, &out)?;
    write_run_manifest(out.parent().unwrap(), &cfg, run_seed, &["dataset"])?;
    println!(
        "wrote {} instances x {} modalities to {}",
        ds.n_instances(),
        ds.n_modalities(),
        manifest.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let run_seed = seed.unwrap_or(cfg.seeds[0]);
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let metrics = run_variant(&cfg, Variant::Graph(cfg.train.graph_kind), run_seed, &out)?;
    println!(
        "{} seed {run_seed}: accuracy {:.3} precision {:.3} recall {:.3}",
        cfg.train.graph_kind, metrics.accuracy, metrics.macro_precision, metrics.macro_recall
    );
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let run_seed = seed.unwrap_or(cfg.seeds[0]);
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    ensure_dir(&out)?;

    let state = TrainState::from_checkpoint(load_checkpoint(checkpoint)?);
    let ds = build_dataset(&cfg, run_seed)?;
    if state.modality_names != ds.modality_names() {
        return Err(Error::Eval(format!(
            "checkpoint modalities {:?} do not match dataset modalities {:?}",
            state.modality_names,
            ds.modality_names()
        )));
    }
    let (train_idx, eval_idx) = split_indices(ds.n_instances(), cfg.eval_fraction, run_seed)?;
    let protos = class_prototypes(&state, &ds.restrict(&train_idx))?;
    let eval_ds = ds.restrict(&eval_idx);
    let preds = classify_dataset(&protos, &state, &eval_ds)?;
    let labels = eval_ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Eval("evaluation needs labels".to_string()))?;
    let metrics = compute_metrics(&preds, labels)?;
    write_metrics_csv(&out.join("metrics.csv"), &[(run_seed, metrics.clone())])?;
    metrics.write_confusion_csv(&out.join("confusion.csv"))?;
    write_run_manifest(&out, &cfg, run_seed, &["metrics.csv", "confusion.csv"])?;
    println!(
        "eval seed {run_seed}: accuracy {:.3} precision {:.3} recall {:.3}",
        metrics.accuracy, metrics.macro_precision, metrics.macro_recall
    );
    Ok(())
}

fn cmd_baseline(
    config: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    modality: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let run_seed = seed.unwrap_or(cfg.seeds[0]);
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let ds = build_dataset(&cfg, run_seed)?;
    let targets: Vec<usize> = match modality {
        Some(m) if m >= ds.n_modalities() => {
            return Err(Error::Config(format!(
                "modality {m} out of range for {} modalities",
                ds.n_modalities()
            )))
        }
        Some(m) => vec![m],
        None => (0..ds.n_modalities()).collect(),
    };
    for m in targets {
        let variant = Variant::Baseline(m);
        let dir = out.join(variant.dir_name(&ds));
        let metrics = run_variant(&cfg, variant, run_seed, &dir)?;
        println!(
            "unimodal {} seed {run_seed}: accuracy {:.3} precision {:.3} recall {:.3}",
            ds.modalities[m].name, metrics.accuracy, metrics.macro_precision, metrics.macro_recall
        );
    }
    Ok(())
}

// ── Oracle suites ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub suite: String,
    pub pass: bool,
    pub detail: String,
}

/// Run every brute-force suite; write a summary table plus the per-draw
/// arrangement table into `dir`.
pub fn run_oracle_suites(dir: &Path, seed: u64) -> Result<Vec<OracleOutcome>> {
    ensure_dir(dir)?;
    let mut outcomes = Vec::new();

    let err = oracle::edge_loss_gradient_error(8, 5, 4, 1e-5, seed.wrapping_add(100))?;
    outcomes.push(OracleOutcome {
        suite: "gradient-check".to_string(),
        pass: err < 1e-4,
        detail: format!("max relative error {err:.3e} (bound 1e-4)"),
    });

    let mut mst_failures = 0usize;
    let mut checked = 0usize;
    use rand::Rng;
    let mut rng = crate::numerics::seeded_rng(seed, crate::numerics::rng::streams::DATA);
    for m in 3..=7usize {
        for _ in 0..100 {
            let mut w = crate::graph::EdgeWeights::new(m);
            for i in 0..m {
                for j in (i + 1)..m {
                    w.set_edge(i, j, rng.gen_range(-0.99..0.99))?;
                }
            }
            let active = vec![true; m];
            let mst = crate::graph::kruskal_mst(&w, &active)?;
            let mut mst_edges: Vec<(usize, usize)> =
                mst.edges.iter().map(|e| (e.i, e.j)).collect();
            mst_edges.sort_unstable();
            let mst_total: f64 = mst_edges
                .iter()
                .map(|&(i, j)| w.distance(i, j).expect("edge set"))
                .sum();
            let enumeration = oracle::enumerate_spanning_trees(&w, &active)?;
            let best = enumeration
                .minimum()
                .ok_or_else(|| Error::Size("no spanning tree enumerated".to_string()))?;
            checked += 1;
            if mst_edges != best.edges || mst_total.to_bits() != best.total_distance.to_bits() {
                mst_failures += 1;
            }
        }
    }
    outcomes.push(OracleOutcome {
        suite: "mst-exactness".to_string(),
        pass: mst_failures == 0,
        detail: format!("{mst_failures} mismatches over {checked} random matrices, m in 3..=7"),
    });

    let trials = oracle::arrangement_trials(100, 0.1, seed.wrapping_add(200))?;
    let hits = trials.iter().filter(|t| t.grouped < t.mixed).count();
    let mut table = String::from("draw,grouped,mixed,gap\n");
    for t in &trials {
        let _ = writeln!(table, "{},{},{},{}", t.draw, t.grouped, t.mixed, t.mixed - t.grouped);
    }
    let trials_path = dir.join("arrangement_trials.csv");
    std::fs::write(&trials_path, table)
        .map_err(|e| Error::io(trials_path.display().to_string(), e))?;
    outcomes.push(OracleOutcome {
        suite: "grouped-vs-mixed".to_string(),
        pass: hits >= 95,
        detail: format!("grouped < mixed in {hits}/100 draws (need >= 95)"),
    });

    let mut summary = String::from("suite,status,detail\n");
    for o in &outcomes {
        let _ = writeln!(
            summary,
            "{},{},{}",
            o.suite,
            if o.pass { "pass" } else { "fail" },
            o.detail
        );
    }
    let summary_path = dir.join("oracle_report.csv");
    std::fs::write(&summary_path, summary)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    Ok(outcomes)
}

fn cmd_oracle(out: Option<PathBuf>, seed: u64) -> Result<()> {
    let dir = out.unwrap_or_else(|| PathBuf::from("runs/oracle"));
    let outcomes = run_oracle_suites(&dir, seed)?;
    let mut all_pass = true;
    for o in &outcomes {
        println!(
            "{} {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.suite,
            o.detail
        );
        all_pass &= o.pass;
    }
    if !all_pass {
        return Err(Error::Train("one or more oracle suites failed".to_string()));
    }
    Ok(())
}

// ── Seed sweep ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub variant: String,
    pub per_seed: Vec<(u64, Metrics)>,
}

impl SweepRow {
    pub fn accuracies(&self) -> Vec<f64> {
        self.per_seed.iter().map(|(_, m)| m.accuracy).collect()
    }

    pub fn mean_accuracy(&self) -> f64 {
        mean_std(&self.accuracies()).0
    }
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn row(&self, variant: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn best_unimodal_mean_accuracy(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant.starts_with("unimodal-"))
            .map(|r| r.mean_accuracy())
            .max_by(f64::total_cmp)
    }

    /// Table-style rendering: one row per variant, mean and std per metric.
    pub fn render(&self) -> String {
        let mut text = String::new();
        let _ = writeln!(
            text,
            "{:<24} {:>16} {:>16} {:>16}",
            "model", "accuracy", "precision", "recall"
        );
        for row in &self.rows {
            let acc: Vec<f64> = row.per_seed.iter().map(|(_, m)| m.accuracy).collect();
            let prec: Vec<f64> = row.per_seed.iter().map(|(_, m)| m.macro_precision).collect();
            let rec: Vec<f64> = row.per_seed.iter().map(|(_, m)| m.macro_recall).collect();
            let (ma, sa) = mean_std(&acc);
            let (mp, sp) = mean_std(&prec);
            let (mr, sr) = mean_std(&rec);
            let _ = writeln!(
                text,
                "{:<24} {:>16} {:>16} {:>16}",
                row.variant,
                format_mean_std(ma, sa),
                format_mean_std(mp, sp),
                format_mean_std(mr, sr)
            );
        }
        text
    }

    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from(
            "variant,accuracy_mean,accuracy_std,precision_mean,precision_std,recall_mean,recall_std\n",
        );
        for row in &self.rows {
            let acc: Vec<f64> = row.per_seed.iter().map(|(_, m)| m.accuracy).collect();
            let prec: Vec<f64> = row.per_seed.iter().map(|(_, m)| m.macro_precision).collect();
            let rec: Vec<f64> = row.per_seed.iter().map(|(_, m)| m.macro_recall).collect();
            let (ma, sa) = mean_std(&acc);
            let (mp, sp) = mean_std(&prec);
            let (mr, sr) = mean_std(&rec);
            let _ = writeln!(text, "{},{ma},{sa},{mp},{sp},{mr},{sr}", row.variant);
        }
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Train MST, FCG, and every unimodal baseline for each seed; seeds run as
/// independent parallel jobs, each owning its own output subdirectory.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepSummary> {
    ensure_dir(out)?;
    let probe = build_dataset(cfg, cfg.seeds[0])?;
    let mut variants = vec![Variant::Graph(GraphKind::Mst), Variant::Graph(GraphKind::Fcg)];
    variants.extend((0..probe.n_modalities()).map(Variant::Baseline));
    let names: Vec<String> = variants.iter().map(|v| v.dir_name(&probe)).collect();

    let per_seed_results: Vec<Vec<(u64, Metrics)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(u64, Metrics)>> {
            let seed_dir = out.join(format!("seed{seed}"));
            variants
                .iter()
                .zip(&names)
                .map(|(variant, name)| {
                    let dir = seed_dir.join(name);
                    Ok((seed, run_variant(cfg, *variant, seed, &dir)?))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let rows: Vec<SweepRow> = names
        .iter()
        .enumerate()
        .map(|(v_idx, name)| SweepRow {
            variant: name.clone(),
            per_seed: per_seed_results.iter().map(|seed_row| seed_row[v_idx].clone()).collect(),
        })
        .collect();

    let summary = SweepSummary { rows };
    summary.write_csv(&out.join("sweep_summary.csv"))?;
    for row in &summary.rows {
        write_metrics_csv(
            &out.join(format!("metrics_{}.csv", row.variant)),
            &row.per_seed,
        )?;
    }
    Ok(summary)
}

fn cmd_sweep(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let summary = run_sweep(&cfg, &out)?;
    print!("{}", summary.render());
    Ok(())
}
