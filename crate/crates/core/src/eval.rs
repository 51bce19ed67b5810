//! Detection and forecasting metrics.
//!
//! Three metric families over completed predictions: precision-recall with
//! average precision for detection quality, centroid and heading errors for
//! forecast accuracy (computed over true positives at a common recall
//! point), and the cumulative space-time collision rate for social
//! consistency. Everything here is a pure function over finished
//! predictions.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{box_intersection_area, box_iou, wrap_angle, OrientedBox, Pose2};
use crate::raster::GroundGrid;
use crate::scenes::{Scenario, SceneLabel};
use crate::spagnn::{ForecastOutput, Variant, FORECAST_DT};

// ---------------------------------------------------------------------------
// Matching and precision-recall.
// ---------------------------------------------------------------------------

/// Outcome of greedy one-to-one matching between detections and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub iou_threshold: f64,
    /// Per detection, in input order: the label it claimed, if any.
    pub detection_to_label: Vec<Option<usize>>,
    /// Per label: whether any detection claimed it.
    pub label_matched: Vec<bool>,
    /// Detection indices in visit order (descending score, ties by index).
    pub order: Vec<usize>,
}

/// One precision-recall sample; `score` is the lowest detection score
/// included at this point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// A precision-recall curve with its all-point-interpolated average
/// precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
    pub num_labels: usize,
}

/// Visit order for greedy matching: descending score, ties by input index
/// so the result is deterministic.
fn score_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order
}

/// Greedily match detections to labels (one-to-one, descending score, each
/// detection taking the highest-overlap unclaimed label at or above the
/// threshold) and build the precision-recall curve with its average
/// precision.
pub fn match_and_pr(
    detections: &[Detection],
    labels: &[OrientedBox],
    iou_threshold: f64,
) -> (MatchResult, PrCurve) {
    let order = score_order(detections);
    let mut detection_to_label = vec![None; detections.len()];
    let mut label_matched = vec![false; labels.len()];
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (l, label) in labels.iter().enumerate() {
            if label_matched[l] {
                continue;
            }
            let iou = box_iou(&detections[d].bbox, label);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((l, iou));
            }
        }
        if let Some((l, _)) = best {
            detection_to_label[d] = Some(l);
            label_matched[l] = true;
        }
    }
    let ranked: Vec<(f64, bool)> = order
        .iter()
        .map(|&d| (detections[d].score, detection_to_label[d].is_some()))
        .collect();
    let curve = pr_from_ranked(&ranked, labels.len());
    let result = MatchResult { iou_threshold, detection_to_label, label_matched, order };
    (result, curve)
}

/// Build the curve from `(score, is_true_positive)` pairs already in
/// descending-score order. With no labels every recall is 0 and the
/// average precision is 0.
fn pr_from_ranked(ranked: &[(f64, bool)], num_labels: usize) -> PrCurve {
    let mut points = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, &(score, is_tp)) in ranked.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = if num_labels == 0 { 0.0 } else { tp as f64 / num_labels as f64 };
        points.push(PrPoint { score, precision, recall });
    }
    // All-point interpolation: integrate the precision envelope
    // max_{recall' >= recall} precision(recall') over recall.
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for i in (0..points.len()).rev() {
        envelope = envelope.max(points[i].precision);
        let prev_recall = if i == 0 { 0.0 } else { points[i - 1].recall };
        ap += (points[i].recall - prev_recall) * envelope;
    }
    PrCurve { points, ap, num_labels }
}

/// One scene's detections and ground-truth boxes for pooled evaluation.
#[derive(Debug, Clone)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    pub labels: Vec<OrientedBox>,
}

/// Detections ranked across the whole dataset, with their provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
struct RankedDetection {
    score: f64,
    is_tp: bool,
    scene: usize,
    index: usize,
    label: Option<usize>,
}

/// Match each scene independently, then rank all detections globally by
/// descending score (ties by scene then index).
fn rank_dataset(scenes: &[DetectionSet], iou_threshold: f64) -> (Vec<RankedDetection>, usize) {
    let mut ranked = Vec::new();
    let mut num_labels = 0;
    for (s, scene) in scenes.iter().enumerate() {
        num_labels += scene.labels.len();
        let (matches, _) = match_and_pr(&scene.detections, &scene.labels, iou_threshold);
        for (i, det) in scene.detections.iter().enumerate() {
            ranked.push(RankedDetection {
                score: det.score,
                is_tp: matches.detection_to_label[i].is_some(),
                scene: s,
                index: i,
                label: matches.detection_to_label[i],
            });
        }
    }
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.scene.cmp(&b.scene))
            .then(a.index.cmp(&b.index))
    });
    (ranked, num_labels)
}

/// Pooled precision-recall over many scenes: matching runs within each
/// scene, the curve over the globally score-ranked detections.
pub fn dataset_pr(scenes: &[DetectionSet], iou_threshold: f64) -> PrCurve {
    let (ranked, num_labels) = rank_dataset(scenes, iou_threshold);
    let pairs: Vec<(f64, bool)> = ranked.iter().map(|r| (r.score, r.is_tp)).collect();
    pr_from_ranked(&pairs, num_labels)
}

// ---------------------------------------------------------------------------
// Operating point.
// ---------------------------------------------------------------------------

/// The smallest score-ranked prefix of the curve achieving a target
/// recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingThreshold {
    /// Score of the last detection included.
    pub score_threshold: f64,
    pub achieved_recall: f64,
    /// Detections included, counted along the ranked order.
    pub prefix: usize,
}

/// Choose the smallest score threshold whose recall reaches `target`.
/// Errors when the curve never gets there, stating the maximum achievable
/// recall.
pub fn operating_threshold(curve: &PrCurve, target: f64) -> Result<OperatingThreshold> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Config(format!("operating recall must lie in (0, 1], got {target}")));
    }
    for (i, p) in curve.points.iter().enumerate() {
        if p.recall >= target {
            return Ok(OperatingThreshold {
                score_threshold: p.score,
                achieved_recall: p.recall,
                prefix: i + 1,
            });
        }
    }
    let max = curve.points.last().map_or(0.0, |p| p.recall);
    Err(Error::OperatingPoint(format!(
        "recall {target} is unreachable; maximum achievable recall is {max}"
    )))
}

// ---------------------------------------------------------------------------
// Forecast tracks.
// ---------------------------------------------------------------------------

/// One predicted actor: detection score, detected box, and the predicted
/// mean pose per future step in the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastTrack {
    pub score: f64,
    pub bbox: OrientedBox,
    pub waypoints: Vec<Pose2>,
}

/// One evaluated scene: predicted tracks and ground-truth labels (already
/// restricted to observable agents).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScene {
    pub tracks: Vec<ForecastTrack>,
    pub labels: Vec<SceneLabel>,
}

/// Labels a model is held accountable for at evaluation time: the vehicle
/// received at least one point in the current (latest) sweep, and its
/// center lies inside the model's operating region. Vehicles the sensor
/// cannot currently see, or that sit outside the region the model predicts
/// over, are ignored rather than counted as misses.
pub fn evaluable_labels(scenario: &Scenario, roi: &GroundGrid) -> Vec<SceneLabel> {
    let current = scenario.sweeps.last().map(Vec::as_slice).unwrap_or(&[]);
    scenario
        .labels
        .iter()
        .filter(|label| {
            if roi.cell_index(label.bbox.center[0], label.bbox.center[1]).is_none() {
                return false;
            }
            // Tolerate returns that land exactly on the outline: test
            // against a hair-inflated footprint.
            let probe = OrientedBox::new(
                label.bbox.center[0],
                label.bbox.center[1],
                label.bbox.length + 1e-6,
                label.bbox.width + 1e-6,
                label.bbox.heading,
            );
            current.iter().any(|p| probe.contains([p[0], p[1]]))
        })
        .cloned()
        .collect()
}

/// One actor's forecast as an evaluable track: the detection score and box
/// plus the mean of every waypoint distribution.
pub fn track_from_actor(actor: &crate::spagnn::ActorForecast) -> ForecastTrack {
    ForecastTrack {
        score: actor.node.score,
        bbox: actor.node.bbox,
        waypoints: actor
            .waypoints
            .iter()
            .map(|w| Pose2::new(w.position.mean[0], w.position.mean[1], w.heading.eta))
            .collect(),
    }
}

/// Flatten a forecaster output into evaluable tracks.
pub fn tracks_from_forecast(output: &ForecastOutput) -> Vec<ForecastTrack> {
    output.actors.iter().map(track_from_actor).collect()
}

fn detection_view(tracks: &[ForecastTrack]) -> Vec<Detection> {
    tracks
        .iter()
        .map(|t| Detection { score: t.score, bbox: t.bbox, source_label: None })
        .collect()
}

// ---------------------------------------------------------------------------
// Displacement metrics.
// ---------------------------------------------------------------------------

/// Forecast errors over the true positives at the operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementReport {
    pub horizons_s: Vec<f64>,
    /// Mean centroid distance per horizon, in centimeters.
    pub l2_cm: Vec<f64>,
    /// Mean absolute heading error per horizon, in degrees.
    pub heading_deg: Vec<f64>,
    pub num_true_positives: usize,
    pub threshold: OperatingThreshold,
}

fn horizon_step(horizon_s: f64, dt: f64) -> Result<usize> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Config(format!("timestep must be positive, got {dt}")));
    }
    let k = (horizon_s / dt).round();
    if !(horizon_s.is_finite() && horizon_s >= 0.0) || (k * dt - horizon_s).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "horizon {horizon_s} s does not lie on the {dt} s timestep grid"
        )));
    }
    Ok(k as usize)
}

/// Mean centroid L2 error (centimeters) and mean absolute heading error
/// (degrees) per horizon, over the true positives at the smallest score
/// threshold achieving `operating_recall` on the pooled curve.
pub fn displacement_metrics(
    scenes: &[EvalScene],
    iou_threshold: f64,
    operating_recall: f64,
    dt: f64,
    horizons_s: &[f64],
) -> Result<DisplacementReport> {
    let sets: Vec<DetectionSet> = scenes
        .iter()
        .map(|s| DetectionSet {
            detections: detection_view(&s.tracks),
            labels: s.labels.iter().map(|l| l.bbox).collect(),
        })
        .collect();
    let (ranked, num_labels) = rank_dataset(&sets, iou_threshold);
    let pairs: Vec<(f64, bool)> = ranked.iter().map(|r| (r.score, r.is_tp)).collect();
    let curve = pr_from_ranked(&pairs, num_labels);
    let threshold = operating_threshold(&curve, operating_recall)?;
    let steps: Vec<usize> = horizons_s.iter().map(|&h| horizon_step(h, dt)).collect::<Result<_>>()?;

    let mut l2_sums = vec![0.0; horizons_s.len()];
    let mut heading_sums = vec![0.0; horizons_s.len()];
    let mut num_true_positives = 0usize;
    for r in &ranked[..threshold.prefix] {
        let Some(label_index) = r.label else { continue };
        let track = &scenes[r.scene].tracks[r.index];
        let label = &scenes[r.scene].labels[label_index];
        num_true_positives += 1;
        for (h, &k) in steps.iter().enumerate() {
            let (pred, truth) = match (track.waypoints.get(k), label.waypoints.get(k)) {
                (Some(p), Some(t)) => (p, t),
                _ => {
                    return Err(Error::domain(
                        "displacement_metrics",
                        format!(
                            "horizon {} s needs step {k} but the trajectory has {} steps",
                            horizons_s[h],
                            track.waypoints.len().min(label.waypoints.len())
                        ),
                    ));
                }
            };
            l2_sums[h] += ((pred.x - truth.x).powi(2) + (pred.y - truth.y).powi(2)).sqrt() * 100.0;
            heading_sums[h] += wrap_angle(pred.theta - truth.theta).abs().to_degrees();
        }
    }
    let n = num_true_positives.max(1) as f64;
    Ok(DisplacementReport {
        horizons_s: horizons_s.to_vec(),
        l2_cm: l2_sums.iter().map(|s| s / n).collect(),
        heading_deg: heading_sums.iter().map(|s| s / n).collect(),
        num_true_positives,
        threshold,
    })
}

// ---------------------------------------------------------------------------
// Space-time collision rate.
// ---------------------------------------------------------------------------

/// One trajectory entering the collision test: box dimensions from the
/// detection, mean pose per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionTrack {
    pub length: f64,
    pub width: f64,
    pub waypoints: Vec<Pose2>,
}

fn track_box(track: &CollisionTrack, step: usize) -> OrientedBox {
    let p = &track.waypoints[step];
    OrientedBox::new(p.x, p.y, track.length, track.width, p.theta)
}

/// Strict positive-area overlap of two oriented boxes.
fn boxes_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    box_intersection_area(a, b) > 0.0
}

/// Fraction of trajectories (per mille) overlapping any other trajectory
/// of the same scene at any shared timestep with `step * dt <= window_end_s`.
/// Boxes sit at the predicted mean pose with the detected dimensions; both
/// members of an overlapping pair count. All trajectories must share one
/// timestep grid.
pub fn collision_rate(scenes: &[Vec<CollisionTrack>], dt: f64, window_end_s: f64) -> Result<f64> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Config(format!("timestep must be positive, got {dt}")));
    }
    if !(window_end_s.is_finite() && window_end_s >= 0.0) {
        return Err(Error::Config(format!("window end must be >= 0, got {window_end_s}")));
    }
    let mut steps: Option<usize> = None;
    for track in scenes.iter().flatten() {
        match steps {
            None => steps = Some(track.waypoints.len()),
            Some(n) if n != track.waypoints.len() => {
                return Err(Error::domain(
                    "collision_rate",
                    format!(
                        "trajectories on different timestep grids: {n} vs {} steps",
                        track.waypoints.len()
                    ),
                ));
            }
            Some(_) => {}
        }
    }
    let Some(steps) = steps else { return Ok(0.0) };
    let last_step = ((window_end_s + 1e-9) / dt).floor() as usize;
    let window: Vec<usize> = (0..steps).filter(|&k| k <= last_step).collect();

    let mut total = 0usize;
    let mut colliding = 0usize;
    for scene in scenes {
        total += scene.len();
        let mut hit = vec![false; scene.len()];
        for i in 0..scene.len() {
            for j in (i + 1)..scene.len() {
                if hit[i] && hit[j] {
                    continue;
                }
                let overlap = window
                    .iter()
                    .any(|&k| boxes_overlap(&track_box(&scene[i], k), &track_box(&scene[j], k)));
                if overlap {
                    hit[i] = true;
                    hit[j] = true;
                }
            }
        }
        colliding += hit.iter().filter(|&&h| h).count();
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(colliding as f64 / total as f64 * 1000.0)
}

// ---------------------------------------------------------------------------
// Full evaluation.
// ---------------------------------------------------------------------------

/// Evaluation settings: matching threshold, the common recall point, the
/// forecast timestep, error horizons, and collision windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub operating_recall: f64,
    pub dt: f64,
    pub horizons_s: Vec<f64>,
    pub collision_windows_s: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            operating_recall: 0.8,
            dt: FORECAST_DT,
            horizons_s: vec![0.0, 1.0, 3.0],
            collision_windows_s: vec![1.0, 3.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "matching overlap threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if !(self.operating_recall > 0.0 && self.operating_recall <= 1.0) {
            return Err(Error::Config(format!(
                "operating recall must lie in (0, 1], got {}",
                self.operating_recall
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("timestep must be positive, got {}", self.dt)));
        }
        for &h in self.horizons_s.iter().chain(self.collision_windows_s.iter()) {
            horizon_step(h, self.dt)?;
        }
        Ok(())
    }
}

/// Complete metrics for one model variant over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub map: f64,
    pub pr: PrCurve,
    pub operating_recall: f64,
    pub threshold: OperatingThreshold,
    pub horizons_s: Vec<f64>,
    pub l2_cm: Vec<f64>,
    pub heading_deg: Vec<f64>,
    pub collision_windows_s: Vec<f64>,
    pub collision_permille: Vec<f64>,
    pub num_true_positives: usize,
}

/// Evaluate one variant's predictions: pooled precision-recall and average
/// precision, displacement errors over true positives at the operating
/// point, and collision rates over the trajectories kept at that point.
pub fn evaluate(scenes: &[EvalScene], variant: Variant, config: &EvalConfig) -> Result<MetricsReport> {
    config.validate()?;
    let sets: Vec<DetectionSet> = scenes
        .iter()
        .map(|s| DetectionSet {
            detections: detection_view(&s.tracks),
            labels: s.labels.iter().map(|l| l.bbox).collect(),
        })
        .collect();
    let curve = dataset_pr(&sets, config.iou_threshold);
    let displacement = displacement_metrics(
        scenes,
        config.iou_threshold,
        config.operating_recall,
        config.dt,
        &config.horizons_s,
    )?;

    // Collision runs over every trajectory kept at the operating point,
    // matched or not: social consistency is a property of what the model
    // predicts, not only of what it predicts correctly.
    let (ranked, _) = rank_dataset(&sets, config.iou_threshold);
    let mut kept: Vec<Vec<CollisionTrack>> = vec![Vec::new(); scenes.len()];
    for r in &ranked[..displacement.threshold.prefix] {
        let track = &scenes[r.scene].tracks[r.index];
        kept[r.scene].push(CollisionTrack {
            length: track.bbox.length,
            width: track.bbox.width,
            waypoints: track.waypoints.clone(),
        });
    }
    let collision_permille = config
        .collision_windows_s
        .iter()
        .map(|&w| collision_rate(&kept, config.dt, w))
        .collect::<Result<Vec<f64>>>()?;

    Ok(MetricsReport {
        variant,
        map: curve.ap,
        pr: curve,
        operating_recall: config.operating_recall,
        threshold: displacement.threshold,
        horizons_s: displacement.horizons_s,
        l2_cm: displacement.l2_cm,
        heading_deg: displacement.heading_deg,
        collision_windows_s: config.collision_windows_s.clone(),
        collision_permille,
        num_true_positives: displacement.num_true_positives,
    })
}

/// Write reports as CSV, one row per (variant, horizon). Collision columns
/// are filled on the rows whose horizon equals a collision window end and
/// left empty elsewhere; `map` and `operating_recall` repeat on every row
/// of their variant.
pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut out = String::from(
        "variant,horizon_s,map,l2_cm,heading_deg,collision_window_s,collision_permille,operating_recall\n",
    );
    for report in reports {
        for (h, &horizon) in report.horizons_s.iter().enumerate() {
            let collision = report
                .collision_windows_s
                .iter()
                .position(|&w| w == horizon)
                .map(|i| (w_str(horizon), report.collision_permille[i].to_string()))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                report.variant,
                horizon,
                report.map,
                report.l2_cm[h],
                report.heading_deg[h],
                collision.0,
                collision.1,
                report.operating_recall,
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn w_str(w: f64) -> String {
    w.to_string()
}
