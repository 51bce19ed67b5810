//! `ablate`: train every forecaster variant with shared seeds and compare
//! them on a held-out split.

use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;
use spagnn_core::eval::{evaluate, write_metrics_csv, EvalConfig, MetricsReport};
use spagnn_core::scenes::read_dataset;
use spagnn_core::spagnn::Variant;

use crate::config::{ModelPreset, ResolvedRun, RunFileConfig};
use crate::eval_cmd::forward_dataset;
use crate::manifest::{dir_manifest_path, RunManifest};
use crate::train_cmd::train_into;
use crate::AblateArgs;

#[derive(Serialize)]
struct AblateConfigEcho {
    split: f64,
    eval: EvalConfig,
    runs: Vec<ResolvedRun>,
}

pub fn run(args: &AblateArgs) -> anyhow::Result<()> {
    let overlay = RunFileConfig::load(args.config.as_deref())?;
    let dataset = read_dataset(&args.data)
        .with_context(|| format!("reading dataset {}", args.data.display()))?;

    // Deterministic split: leading fraction trains, remainder evaluates.
    let split = overlay.resolve(ModelPreset::ForecasterOnly, Variant::Full, args.seed).split;
    if !(split > 0.0 && split < 1.0) {
        anyhow::bail!("split must lie strictly between 0 and 1, got {split}");
    }
    let cut = ((dataset.len() as f64) * split).ceil() as usize;
    let cut = cut.min(dataset.len().saturating_sub(1)).max(1);
    if dataset.len() < 2 {
        anyhow::bail!("ablation needs at least 2 scenarios, got {}", dataset.len());
    }
    let (train_split, held_out) = dataset.split_at(cut);

    let eval_config = EvalConfig::default();
    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut runs: Vec<ResolvedRun> = Vec::new();
    let mut artifacts: Vec<PathBuf> = Vec::new();

    for &variant in Variant::ALL.iter() {
        let resolved = overlay.resolve(ModelPreset::ForecasterOnly, variant, args.seed);
        let checkpoint_name = format!("checkpoint-{variant}.bin");
        let trace_name = format!("trace-{variant}.csv");
        train_into(&resolved, train_split, &args.out, &checkpoint_name, &trace_name)?;

        // Re-load through the written checkpoint so the comparison always
        // reflects the artifacts on disk.
        let (model, store) =
            crate::eval_cmd::load_model(&args.out.join(&checkpoint_name), resolved.model.clone())?;
        let (scenes, _) = forward_dataset(&model, &store, held_out)?;
        let report = evaluate(&scenes, variant, &eval_config)?;
        println!(
            "{variant}: mAP {:.3}, collision {:?} permille, final L2 {:.1} cm",
            report.map,
            report.collision_permille,
            report.l2_cm.last().copied().unwrap_or(f64::NAN)
        );
        reports.push(report);
        runs.push(resolved);
        artifacts.push(args.out.join(&checkpoint_name));
        artifacts.push(args.out.join(&trace_name));
    }

    let comparison = args.out.join("ablation.csv");
    write_metrics_csv(&comparison, &reports)?;
    artifacts.insert(0, comparison.clone());

    let echo = AblateConfigEcho { split, eval: eval_config, runs };
    let paths: Vec<&std::path::Path> = artifacts.iter().map(|p| p.as_path()).collect();
    let manifest = RunManifest::new(serde_json::to_value(&echo)?, Some(args.seed), &paths);
    manifest.write(&dir_manifest_path(&args.out))?;

    println!(
        "compared {} variants on {} held-out scenes: {}",
        reports.len(),
        held_out.len(),
        comparison.display()
    );
    Ok(())
}
