//! Command implementations. Each writes machine-parseable artifacts into the
//! run directory; anything nondeterministic (wall-clock) stays out of
//! metrics.txt so identical manifests reproduce identical metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gnnmoe::data::{generate_synthetic, load_dataset, DatasetOnDisk, SyntheticSpec};
use gnnmoe::error::{Error, Result};
use gnnmoe::graph::Graph;
use gnnmoe::model::{load_checkpoint, save_checkpoint, GnnMoeModel};
use gnnmoe::seeded_rng;
use gnnmoe::train::{evaluate, make_splits, run_seeds_hooked, Summary};

use crate::cli::{EvalArgs, GenArgs, RunArgs, SweepDepthArgs};
use crate::config::{dataset_fingerprint, write_manifest, RunSettings};

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_nodes: args.nodes,
        num_classes: args.classes,
        feature_dim: args.dim,
        edge_homophily: args.homophily,
        mean_degree: args.degree,
        feature_noise: args.noise,
        seed: args.seed,
    };
    let graph = generate_synthetic(&spec)?;
    gnnmoe::data::write_dataset(&graph, &args.out)?;
    let echo = format!(
        "nodes={}\nclasses={}\ndim={}\nhomophily={}\ndegree={}\nnoise={}\nseed={}\n",
        spec.num_nodes,
        spec.num_classes,
        spec.feature_dim,
        spec.edge_homophily,
        spec.mean_degree,
        spec.feature_noise,
        spec.seed
    );
    let spec_path = args.out.join("spec.txt");
    fs::write(&spec_path, echo).map_err(|e| Error::io(&spec_path, e))?;
    println!(
        "wrote {} nodes, {} undirected edges to {}",
        graph.num_nodes(),
        graph.edges_once().len(),
        args.out.display()
    );
    Ok(())
}

/// Merge defaults, config file, and flags into final settings.
pub fn resolve_settings(args: &RunArgs) -> Result<RunSettings> {
    let mut settings = RunSettings::default();
    if let Some(config) = &args.config {
        settings.apply_file(config)?;
    }
    settings.apply_sets(&args.sets)?;
    if let Some(data) = &args.data {
        settings.data = Some(data.clone());
    }
    if let Some(out) = &args.out {
        settings.out = Some(out.clone());
    }
    if let Some(seeds) = &args.seeds {
        settings.apply("seeds", seeds, "--seeds")?;
    }
    if let Some(jobs) = args.jobs {
        settings.jobs = jobs;
    }
    for ablation in &args.ablate {
        match ablation.as_str() {
            "ffn" => settings.ablate_ffn = true,
            "residual" | "air" | "ar" => settings.ablate_residual = true,
            other => {
                return Err(Error::contract(
                    "config",
                    format!("--ablate expects ffn or residual, got {other:?}"),
                ))
            }
        }
    }
    Ok(settings)
}

fn require_data(settings: &RunSettings) -> Result<PathBuf> {
    settings
        .data
        .clone()
        .ok_or_else(|| Error::contract("config", "no dataset: pass --data or set data= in the config"))
}

fn require_out(settings: &RunSettings) -> Result<PathBuf> {
    settings
        .out
        .clone()
        .ok_or_else(|| Error::contract("config", "no output directory: pass --out or set out="))
}

fn load_graph(dir: &Path) -> Result<Graph> {
    load_dataset(&DatasetOnDisk::in_dir(dir))
}

fn variant_label(settings: &RunSettings) -> String {
    let mut parts = Vec::new();
    if settings.ablate_ffn {
        parts.push("w/o FFN");
    }
    if settings.ablate_residual {
        parts.push("w/o AIR/AR");
    }
    if let Some(forced) = settings.force_expert {
        return format!("forced {}", forced.name());
    }
    if parts.is_empty() {
        "full".to_string()
    } else {
        parts.join(" + ")
    }
}

/// Deterministic, machine-first metric lines.
fn metrics_lines(summary: &Summary) -> String {
    let mut out = String::new();
    out.push_str(&format!("mean_test_acc={}\n", summary.mean_test_acc));
    out.push_str(&format!("std_test_acc={}\n", summary.std_test_acc));
    for run in &summary.runs {
        out.push_str(&format!(
            "seed{}_test_acc={}\nseed{}_best_val_acc={}\nseed{}_best_epoch={}\nseed{}_epochs_run={}\n",
            run.seed, run.test_acc, run.seed, run.best_val_acc, run.seed, run.best_epoch,
            run.seed, run.epochs_run
        ));
    }
    out
}

/// Train over all configured seeds into the run directory; returns the
/// summary for callers that post-process (sweeps, bench).
pub fn cmd_train(settings: &RunSettings) -> Result<Summary> {
    let data_dir = require_data(settings)?;
    let out_dir = require_out(settings)?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let graph = load_graph(&data_dir)?;

    let fingerprint = dataset_fingerprint(&data_dir)?;
    write_manifest(settings, &fingerprint, &out_dir.join("manifest.txt"))?;

    let model_cfg = settings.model_config(graph.feature_dim(), graph.num_classes());
    let train_cfg = settings.train_config();
    let ckpt_dir = out_dir.clone();
    let hook = move |seed: u64, model: &GnnMoeModel| -> Result<()> {
        save_checkpoint(model, &ckpt_dir.join(format!("ckpt_seed{seed}")))
    };
    let started = Instant::now();
    let summary = run_seeds_hooked(&graph, &model_cfg, &train_cfg, settings.jobs, Some(&hook))?;
    let total_ms = started.elapsed().as_secs_f64() * 1e3;

    let metrics_path = out_dir.join("metrics.txt");
    fs::write(&metrics_path, metrics_lines(&summary)).map_err(|e| Error::io(&metrics_path, e))?;

    for run in &summary.runs {
        let history_path = out_dir.join(format!("history_seed{}.log", run.seed));
        let mut lines = String::new();
        for record in &run.history {
            lines.push_str(&record.log_line());
            lines.push('\n');
        }
        fs::write(&history_path, lines).map_err(|e| Error::io(&history_path, e))?;
    }

    let mut human = String::new();
    human.push_str(&format!("variant={}\n", variant_label(settings)));
    human.push_str(&format!(
        "test accuracy: {:.4} ± {:.4} over {} seeds\n",
        summary.mean_test_acc,
        summary.std_test_acc,
        summary.runs.len()
    ));
    for run in &summary.runs {
        human.push_str(&format!(
            "seed {}: test_acc={:.4} best_val_acc={:.4} best_epoch={} epochs_run={} wall_ms={:.0}\n",
            run.seed, run.test_acc, run.best_val_acc, run.best_epoch, run.epochs_run, run.wall_ms
        ));
    }
    human.push_str(&format!("total_wall_ms={total_ms:.0}\n"));
    let summary_path = out_dir.join("summary.txt");
    fs::write(&summary_path, &human).map_err(|e| Error::io(&summary_path, e))?;
    print!("{human}");
    Ok(summary)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<f64> {
    let manifest = args.run.join("manifest.txt");
    let mut settings = RunSettings::default();
    settings.apply_file(&manifest)?;
    if let Some(data) = &args.data {
        settings.data = Some(data.clone());
    }
    let data_dir = require_data(&settings)?;
    let graph = load_graph(&data_dir)?;
    let seed = args.seed.unwrap_or(settings.seeds[0]);

    let model_cfg = settings.model_config(graph.feature_dim(), graph.num_classes());
    let model = GnnMoeModel::new(model_cfg, &mut seeded_rng(seed))?;
    load_checkpoint(&model, &args.run.join(format!("ckpt_seed{seed}")))?;

    let mask: Vec<usize> = match args.split.as_str() {
        "all" => (0..graph.num_nodes()).collect(),
        name => {
            let splits = make_splits(&graph, settings.fractions, seed)?;
            match name {
                "train" => splits.train,
                "val" => splits.val,
                "test" => splits.test,
                other => {
                    return Err(Error::contract(
                        "eval",
                        format!("--split expects train|val|test|all, got {other:?}"),
                    ))
                }
            }
        }
    };
    let acc = evaluate(&model, &graph, &mask)?;
    println!("seed={seed} split={} accuracy={acc}", args.split);
    Ok(acc)
}

/// One sweep row: the trained variant at one depth.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub depth: usize,
    pub variant: &'static str,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// Train the full model and the degraded baseline (gate frozen to PP,
/// residuals ablated) at each depth; emit a CSV table.
pub fn cmd_sweep_depth(args: &SweepDepthArgs) -> Result<Vec<SweepRow>> {
    let base = resolve_settings(&args.run)?;
    let out_dir = require_out(&base)?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let depths: Vec<usize> = args
        .depths
        .split(',')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|_| Error::contract("sweep-depth", format!("bad depth {d:?}")))
        })
        .collect::<Result<_>>()?;
    if depths.is_empty() {
        return Err(Error::contract("sweep-depth", "empty depth list"));
    }

    let mut rows = Vec::new();
    for &depth in &depths {
        for variant in ["gnnmoe", "baseline"] {
            let mut settings = base.clone();
            settings.num_blocks = depth;
            if variant == "baseline" {
                settings.force_expert = Some(gnnmoe::experts::ExpertKind::PP);
                settings.ablate_residual = true;
            }
            settings.out = Some(out_dir.join(format!("{variant}_depth{depth}")));
            let summary = cmd_train(&settings)?;
            rows.push(SweepRow {
                depth,
                variant,
                mean_acc: summary.mean_test_acc,
                std_acc: summary.std_test_acc,
            });
        }
    }

    let mut csv = String::from("depth,variant,mean_test_acc,std_test_acc\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.depth, row.variant, row.mean_acc, row.std_acc
        ));
    }
    let csv_path = out_dir.join("sweep.csv");
    fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    print!("{csv}");
    Ok(rows)
}

/// Efficiency record: epochs needed to trigger early stopping and total
/// training wall-clock.
pub fn cmd_bench(settings: &RunSettings) -> Result<()> {
    let out_dir = require_out(settings)?;
    let started = Instant::now();
    let summary = cmd_train(settings)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let mut record = String::new();
    for run in &summary.runs {
        record.push_str(&format!("seed{}_epochs={}\n", run.seed, run.epochs_run));
    }
    let mean_epochs: f64 =
        summary.runs.iter().map(|r| r.epochs_run as f64).sum::<f64>() / summary.runs.len() as f64;
    record.push_str(&format!("mean_epochs={mean_epochs}\n"));
    record.push_str(&format!("total_wall_ms={wall_ms:.0}\n"));
    let bench_path = out_dir.join("bench.txt");
    fs::write(&bench_path, &record).map_err(|e| Error::io(&bench_path, e))?;
    print!("{record}");
    Ok(())
}
