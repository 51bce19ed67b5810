//! `eval`: run a trained checkpoint over a dataset and write metrics.
//!
//! Besides the metrics CSV, the command writes a sibling detail file
//! (`metrics.detail.json`) carrying the full PR curve and the first few
//! scenes' forecast distributions, which is what `plot` renders. The model
//! architecture is recovered from the manifest `train` wrote next to the
//! checkpoint, so a checkpoint directory is self-describing.

use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spagnn_core::detector::OracleNoise;
use spagnn_core::eval::{evaluable_labels, evaluate, tracks_from_forecast, write_metrics_csv, EvalConfig, EvalScene, MetricsReport, OperatingThreshold, PrCurve};
use spagnn_core::nn::{ParamStore, Tape};
use spagnn_core::scenes::{read_dataset, Scenario, SceneLabel};
use spagnn_core::spagnn::ActorForecast;
use spagnn_core::train::{featurize, load_checkpoint, BoxSource, Model, ModelConfig};

use crate::config::ResolvedRun;
use crate::manifest::{dir_manifest_path, RunManifest};
use crate::EvalArgs;

/// Scenes whose full forecast distributions are kept for plotting.
const DETAIL_SCENES: usize = 4;

/// Schema tag for the plot detail file.
pub const DETAIL_SCHEMA: &str = "pd1";

/// One scene's renderable evaluation state.
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneDetail {
    /// Every forecast the model produced for the scene (world frame).
    pub actors: Vec<ActorForecast>,
    pub labels: Vec<SceneLabel>,
}

/// Everything `plot` needs, written next to the metrics CSV.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalDetail {
    pub schema: String,
    pub variant: String,
    pub map: f64,
    pub pr: PrCurve,
    pub threshold: OperatingThreshold,
    pub scenes: Vec<SceneDetail>,
}

/// Detail path for a given metrics CSV: `<stem>.detail.json` next to it.
pub fn detail_path(metrics_csv: &Path) -> PathBuf {
    metrics_csv.with_extension("detail.json")
}

/// Load the model architecture recorded by `train` next to `checkpoint`.
fn model_config_for(checkpoint: &Path) -> anyhow::Result<ModelConfig> {
    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).with_context(|| {
        format!(
            "reading {} (the checkpoint's training manifest describes the model architecture)",
            manifest_path.display()
        )
    })?;
    let manifest: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
    let resolved: ResolvedRun = serde_json::from_value(manifest["config"].clone())
        .with_context(|| format!("reading model config from {}", manifest_path.display()))?;
    Ok(resolved.model)
}

/// Rebuild a model and its parameters from a checkpoint file.
pub fn load_model(checkpoint: &Path, config: ModelConfig) -> anyhow::Result<(Model, ParamStore)> {
    let mut store = ParamStore::new();
    // Parameter values are immediately overwritten by the checkpoint; the
    // seed only fixes the registration pass.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(&mut store, &mut rng, config)?;
    load_checkpoint(&mut store, checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok((model, store))
}

/// Forward every scenario and assemble evaluable scenes plus renderable
/// detail for the first few.
pub fn forward_dataset(
    model: &Model,
    store: &ParamStore,
    dataset: &[Scenario],
) -> anyhow::Result<(Vec<EvalScene>, Vec<SceneDetail>)> {
    let mut scenes = Vec::with_capacity(dataset.len());
    let mut details = Vec::new();
    for scenario in dataset {
        let features = featurize(scenario, &model.config().bev)?;
        let source = if model.has_detector() {
            BoxSource::Detector
        } else {
            BoxSource::Oracle { noise: OracleNoise::none(), seed: scenario.seed }
        };
        // Metrics only cover vehicles the sensor currently sees inside the
        // model's operating region; forward passes use the same set so
        // oracle-fed runs predict exactly the vehicles they are scored on.
        let labels = evaluable_labels(scenario, model.roi());
        let label_boxes: Vec<_> = labels.iter().map(|l| l.bbox).collect();
        let mut tape = Tape::new();
        let forward = model.forward_scene(&mut tape, store, &features, &label_boxes, &source)?;
        if details.len() < DETAIL_SCENES {
            details.push(SceneDetail {
                actors: forward.forecast.actors.clone(),
                labels: labels.clone(),
            });
        }
        scenes.push(EvalScene { tracks: tracks_from_forecast(&forward.forecast), labels });
    }
    Ok((scenes, details))
}

#[derive(Serialize)]
struct EvalConfigEcho {
    model: ModelConfig,
    eval: EvalConfig,
}

pub fn run(args: &EvalArgs) -> anyhow::Result<()> {
    let model_config = model_config_for(&args.checkpoint)?;
    let (model, store) = load_model(&args.checkpoint, model_config.clone())?;
    let dataset = read_dataset(&args.data)
        .with_context(|| format!("reading dataset {}", args.data.display()))?;

    let eval_config = EvalConfig { operating_recall: args.recall, ..EvalConfig::default() };
    let (scenes, details) = forward_dataset(&model, &store, &dataset)?;
    let variant = model.config().forecaster.variant;
    let report: MetricsReport = evaluate(&scenes, variant, &eval_config)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let metrics_csv = args.out.join("metrics.csv");
    write_metrics_csv(&metrics_csv, &[report.clone()])?;

    let detail = EvalDetail {
        schema: DETAIL_SCHEMA.to_string(),
        variant: variant.to_string(),
        map: report.map,
        pr: report.pr.clone(),
        threshold: report.threshold,
        scenes: details,
    };
    let detail_file = detail_path(&metrics_csv);
    let mut text = serde_json::to_string_pretty(&detail)?;
    text.push('\n');
    std::fs::write(&detail_file, text)
        .with_context(|| format!("writing {}", detail_file.display()))?;

    let manifest = RunManifest::new(
        serde_json::to_value(&EvalConfigEcho { model: model_config, eval: eval_config })?,
        None,
        &[&metrics_csv, &detail_file],
    );
    manifest.write(&dir_manifest_path(&args.out))?;

    println!(
        "evaluated {} on {} scenes: mAP {:.3}, {} true positives at recall {:.2}",
        variant,
        scenes.len(),
        report.map,
        report.num_true_positives,
        report.operating_recall
    );
    println!("metrics: {}", metrics_csv.display());
    Ok(())
}
