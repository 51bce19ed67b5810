//! `train`: fit one model variant and write checkpoint + loss trace.

use std::path::Path;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spagnn_core::nn::ParamStore;
use spagnn_core::scenes::read_dataset;
use spagnn_core::train::{save_checkpoint, train_loop, write_trace_csv, Model, TraceRow};

use crate::config::{parse_variant, ModelPreset, ResolvedRun, RunFileConfig};
use crate::manifest::{dir_manifest_path, RunManifest};
use crate::TrainArgs;

/// Run one training job and write its artifacts into `out_dir`. Shared
/// with `ablate`, which calls it once per variant.
pub fn train_into(
    resolved: &ResolvedRun,
    dataset: &[spagnn_core::scenes::Scenario],
    out_dir: &Path,
    checkpoint_name: &str,
    trace_name: &str,
) -> anyhow::Result<Vec<TraceRow>> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(resolved.train.seed);
    let model = Model::new(&mut store, &mut rng, resolved.model.clone())?;
    let trace = train_loop(&model, &mut store, &resolved.train, dataset)?;
    save_checkpoint(&store, &out_dir.join(checkpoint_name))?;
    write_trace_csv(&out_dir.join(trace_name), &trace)?;
    Ok(trace)
}

pub fn run(args: &TrainArgs) -> anyhow::Result<()> {
    let variant = parse_variant(&args.variant)?;
    let overlay = RunFileConfig::load(args.config.as_deref())?;
    let resolved = overlay.resolve(ModelPreset::Joint, variant, args.seed);

    let dataset = read_dataset(&args.data)
        .with_context(|| format!("reading dataset {}", args.data.display()))?;
    let trace = train_into(&resolved, &dataset, &args.out, "checkpoint.bin", "trace.csv")?;

    let checkpoint = args.out.join("checkpoint.bin");
    let trace_csv = args.out.join("trace.csv");
    let manifest = RunManifest::new(
        serde_json::to_value(&resolved)?,
        Some(args.seed),
        &[&checkpoint, &trace_csv],
    );
    manifest.write(&dir_manifest_path(&args.out))?;

    let last = trace.last().expect("config validation rejects zero iterations");
    println!(
        "trained {} for {} steps on {} scenarios; final loss {:.6}",
        variant,
        trace.len(),
        dataset.len(),
        last.total
    );
    println!("checkpoint: {}", checkpoint.display());
    Ok(())
}
