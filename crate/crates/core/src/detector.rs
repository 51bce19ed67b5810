//! Anchor-based single-stage detection over bird's-eye-view feature grids.
//!
//! One anchor sits at every feature-cell center, sharing a single size prior
//! (the fleet here is vehicles only). A small convolutional head regresses,
//! per anchor, a confidence logit plus six box offsets: `(dx, dy,
//! dlog_length, dlog_width, sin_heading, cos_heading)`. Training uses binary
//! cross entropy with hard-negative mining (three mined negatives per
//! positive) and a smooth-L1 box loss on positive anchors only. Inference
//! thresholds on confidence, keeps the top 200 anchors, and prunes overlaps
//! with greedy non-maximum suppression at IoU 0.1.
//!
//! An `oracle_detector` fabricates detections directly from ground-truth
//! boxes under controllable noise and false-positive/negative rates. It lets
//! the forecaster be trained and evaluated in isolation from detection
//! quality, and drives the scheduled-sampling curriculum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, OrientedBox};
use crate::nn::{standard_normal, Conv2dLayer, NdArray, ParamStore, Tape, Var};
use crate::raster::GroundGrid;

/// Channels regressed per anchor: confidence logit plus six box offsets.
pub const RAW_CHANNELS: usize = 7;
/// Mined negatives per positive anchor in the classification loss.
pub const NEGATIVES_PER_POSITIVE: usize = 3;
/// Mined-negative floor when a scene has no positive anchors, so an empty
/// scene still produces a classification signal.
pub const MIN_MINED_NEGATIVES: usize = 3;
/// Candidates kept after confidence ranking, before overlap pruning.
pub const TOP_K: usize = 200;
/// Greedy NMS overlap threshold: survivors are pairwise IoU <= this.
pub const NMS_IOU: f64 = 0.1;
/// Default confidence threshold applied before top-K ranking.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.1;
/// Confidence reported for a true (possibly perturbed) oracle detection.
pub const ORACLE_TRUE_SCORE: f64 = 1.0;
/// Confidence reported for a spurious oracle detection.
pub const ORACLE_SPURIOUS_SCORE: f64 = 0.6;

/// A scored oriented box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Confidence in `[0, 1]`.
    pub score: f64,
    pub bbox: OrientedBox,
    /// Index of the ground-truth label this detection originated from, when
    /// produced by [`oracle_detector`]; `None` for spurious boxes and for
    /// model output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_label: Option<usize>,
}

impl Detection {
    pub fn new(score: f64, bbox: OrientedBox) -> Self {
        Detection { score, bbox, source_label: None }
    }
}

/// Anchor geometry: one anchor per feature cell, centered in the cell, all
/// sharing one size prior.
///
/// The raw head output for a layout with `rows x cols` cells is a
/// `[RAW_CHANNELS, rows, cols]` tensor; anchors are indexed row-major as
/// `a = ix * cols + iy` to match the flattened spatial layout of the
/// feature tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLayout {
    /// Feature-cell geometry the anchors are pinned to. This is the grid of
    /// the feature map the head runs on, which may be coarser than the
    /// input voxel grid if the backbone downsamples.
    pub grid: GroundGrid,
    pub prior_length: f64,
    pub prior_width: f64,
}

impl AnchorLayout {
    pub fn new(grid: GroundGrid, prior_length: f64, prior_width: f64) -> Result<Self> {
        let layout = AnchorLayout { grid, prior_length, prior_width };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.prior_length > 0.0 && self.prior_width > 0.0)
            || !(self.prior_length.is_finite() && self.prior_width.is_finite())
        {
            return Err(Error::domain(
                "AnchorLayout",
                format!(
                    "size prior must be positive and finite, got {} x {}",
                    self.prior_length, self.prior_width
                ),
            ));
        }
        Ok(())
    }

    /// Anchor rows = cells along x (the first spatial axis of feature maps).
    pub fn rows(&self) -> usize {
        self.grid.len_cells()
    }

    /// Anchor cols = cells along y (the second spatial axis).
    pub fn cols(&self) -> usize {
        self.grid.wid_cells()
    }

    pub fn num_anchors(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Center of anchor `a` (row-major flat index).
    pub fn anchor_center(&self, a: usize) -> (f64, f64) {
        let cols = self.cols();
        self.grid.cell_center(a / cols, a % cols)
    }

    /// The anchor whose center is nearest to `(x, y)`, or `None` when the
    /// point falls outside the grid. Anchors tile the grid at cell centers,
    /// so the nearest anchor to an interior point is the one in the cell
    /// containing it.
    pub fn nearest_anchor(&self, x: f64, y: f64) -> Option<usize> {
        self.grid.cell_index(x, y).map(|(ix, iy)| ix * self.cols() + iy)
    }

    /// Expected raw-output shape `[RAW_CHANNELS, rows, cols]`.
    pub fn raw_shape(&self) -> [usize; 3] {
        [RAW_CHANNELS, self.rows(), self.cols()]
    }

    fn check_raw_shape(&self, raw: &NdArray) -> Result<()> {
        if raw.shape() != self.raw_shape() {
            return Err(Error::domain(
                "AnchorLayout",
                format!(
                    "raw output shape {:?} does not match anchor layout {:?}",
                    raw.shape(),
                    self.raw_shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Convolutional detection head: hidden 3x3 stride-1 same-padding layers
/// with ReLU, then a linear 1x1 projection to [`RAW_CHANNELS`]. Spatial
/// dimensions are preserved, so the anchor grid equals the feature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHeadConfig {
    pub in_channels: usize,
    pub hidden_channels: Vec<usize>,
}

impl DetectorHeadConfig {
    pub fn new(in_channels: usize, hidden_channels: &[usize]) -> Self {
        DetectorHeadConfig { in_channels, hidden_channels: hidden_channels.to_vec() }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorHead {
    config: DetectorHeadConfig,
    convs: Vec<Conv2dLayer>,
}

impl DetectorHead {
    /// Register freshly initialized parameters under `name` and build the
    /// head. Layer `i` owns parameters `"{name}.conv{i}.w"` / `".b"`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        config: DetectorHeadConfig,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(config.hidden_channels.len() + 1);
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.hidden_channels.iter().enumerate() {
            convs.push(Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.conv{i}"),
                c_in,
                c_out,
                3,
                1,
                1,
            )?);
            c_in = c_out;
        }
        let last = config.hidden_channels.len();
        convs.push(Conv2dLayer::new(
            store,
            rng,
            &format!("{name}.conv{last}"),
            c_in,
            RAW_CHANNELS,
            1,
            1,
            0,
        )?);
        Ok(DetectorHead { config, convs })
    }

    /// Rebuild the head from parameters already present in the store (e.g.
    /// after loading a checkpoint).
    pub fn from_store(store: &ParamStore, name: &str, config: DetectorHeadConfig) -> Result<Self> {
        let mut convs = Vec::with_capacity(config.hidden_channels.len() + 1);
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.hidden_channels.iter().enumerate() {
            convs.push(Conv2dLayer::from_store(
                store,
                &format!("{name}.conv{i}"),
                c_in,
                c_out,
                3,
                1,
                1,
            )?);
            c_in = c_out;
        }
        let last = config.hidden_channels.len();
        convs.push(Conv2dLayer::from_store(
            store,
            &format!("{name}.conv{last}"),
            c_in,
            RAW_CHANNELS,
            1,
            1,
            0,
        )?);
        Ok(DetectorHead { config, convs })
    }

    pub fn config(&self) -> &DetectorHeadConfig {
        &self.config
    }

    /// Dense per-anchor raw outputs `[RAW_CHANNELS, rows, cols]` from a
    /// feature tensor `[in_channels, rows, cols]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let shape = tape.value(features).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.config.in_channels {
            return Err(Error::domain(
                "DetectorHead",
                format!(
                    "expected features [{}, rows, cols], got {:?}",
                    self.config.in_channels, shape
                ),
            ));
        }
        let mut h = features;
        let n = self.convs.len();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, store, h);
            if i + 1 < n {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decode one anchor's six offset channels into a box.
fn decode_offsets(layout: &AnchorLayout, a: usize, off: [f64; 6]) -> OrientedBox {
    let (ax, ay) = layout.anchor_center(a);
    OrientedBox::new(
        ax + off[0],
        ay + off[1],
        layout.prior_length * off[2].exp(),
        layout.prior_width * off[3].exp(),
        // atan2 normalizes, so unnormalized (sin, cos) pairs such as (2, 0)
        // still give the right heading.
        off[4].atan2(off[5]),
    )
}

/// Decode every anchor of a raw head output into a scored box.
///
/// Per anchor: `center = anchor center + (dx, dy)`,
/// `size = prior * exp(dlog)`, `heading = atan2(sin, cos)`,
/// `score = sigmoid(logit)`. Output is in anchor order.
pub fn decode_boxes(raw: &NdArray, layout: &AnchorLayout) -> Result<Vec<Detection>> {
    layout.check_raw_shape(raw)?;
    let spatial = layout.num_anchors();
    let data = raw.data();
    let mut out = Vec::with_capacity(spatial);
    for a in 0..spatial {
        let ch = |c: usize| data[c * spatial + a];
        let bbox = decode_offsets(layout, a, [ch(1), ch(2), ch(3), ch(4), ch(5), ch(6)]);
        out.push(Detection::new(sigmoid(ch(0)), bbox));
    }
    Ok(out)
}

/// Inverse of the per-anchor decoding: the offsets that reproduce `label`
/// at its nearest anchor. Errors when the label center lies outside the
/// anchor grid (callers are expected to restrict labels to the ROI).
pub fn encode_box(label: &OrientedBox, layout: &AnchorLayout) -> Result<(usize, [f64; 6])> {
    let a = layout.nearest_anchor(label.center[0], label.center[1]).ok_or_else(|| {
        Error::domain(
            "encode_box",
            format!(
                "label center ({}, {}) outside the anchor grid",
                label.center[0], label.center[1]
            ),
        )
    })?;
    let (ax, ay) = layout.anchor_center(a);
    Ok((
        a,
        [
            label.center[0] - ax,
            label.center[1] - ay,
            (label.length / layout.prior_length).ln(),
            (label.width / layout.prior_width).ln(),
            label.heading.sin(),
            label.heading.cos(),
        ],
    ))
}

/// Anchor-to-label assignment for one scene: each label claims the anchor
/// nearest its center. When two labels map to the same anchor, the earlier
/// label keeps it and the later one is dropped from the targets (a rare
/// event at sane resolutions, since vehicles are larger than feature cells).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignment {
    /// `(anchor index, encoded offsets)` per assigned label, in label order.
    pub positives: Vec<(usize, [f64; 6])>,
}

pub fn assign_anchors(labels: &[OrientedBox], layout: &AnchorLayout) -> Result<AnchorAssignment> {
    let mut positives: Vec<(usize, [f64; 6])> = Vec::with_capacity(labels.len());
    for label in labels {
        let (a, offsets) = encode_box(label, layout)?;
        if positives.iter().any(|&(p, _)| p == a) {
            continue;
        }
        positives.push((a, offsets));
    }
    Ok(AnchorAssignment { positives })
}

/// Differentiable detection loss for one scene.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    /// `classification + regression`.
    pub total: Var,
    /// Binary cross entropy, summed over positive anchors and mined
    /// negatives.
    pub classification: Var,
    /// Smooth L1 (beta = 1), summed over the six offset channels of the
    /// positive anchors. Zero (constant) when the scene has no positives.
    pub regression: Var,
    pub num_positives: usize,
    pub num_mined_negatives: usize,
}

/// Build the detection loss graph on `tape`.
///
/// Positives come from [`assign_anchors`]. Negatives are every other anchor;
/// of those, only the `NEGATIVES_PER_POSITIVE * |positives|` with the
/// highest classification loss (equivalently, the highest logits) enter the
/// cross entropy — hard-negative mining. Scenes without labels fall back to
/// [`MIN_MINED_NEGATIVES`] mined negatives and contribute no regression
/// term.
pub fn detection_loss(
    tape: &mut Tape,
    raw: Var,
    layout: &AnchorLayout,
    labels: &[OrientedBox],
) -> Result<DetectionLoss> {
    layout.check_raw_shape(tape.value(raw))?;
    let spatial = layout.num_anchors();
    let assignment = assign_anchors(labels, layout)?;
    let positives = assignment.positives;

    let mut is_positive = vec![false; spatial];
    for &(a, _) in &positives {
        is_positive[a] = true;
    }

    // Mining ranks negatives by their loss under target 0, which is
    // softplus(logit) — monotone in the logit, so rank by raw logit with
    // index order breaking ties deterministically.
    let logit_data: Vec<f64> = tape.value(raw).data()[..spatial].to_vec();
    let mut negatives: Vec<usize> = (0..spatial).filter(|&a| !is_positive[a]).collect();
    negatives.sort_by(|&i, &j| {
        logit_data[j].total_cmp(&logit_data[i]).then_with(|| i.cmp(&j))
    });
    let quota = if positives.is_empty() {
        MIN_MINED_NEGATIVES
    } else {
        NEGATIVES_PER_POSITIVE * positives.len()
    };
    negatives.truncate(quota.min(negatives.len()));

    let mut bce_items: Vec<(usize, f64)> = Vec::with_capacity(positives.len() + negatives.len());
    for &(a, _) in &positives {
        bce_items.push((a, 1.0));
    }
    for &a in &negatives {
        bce_items.push((a, 0.0));
    }

    let logits = tape.slice_channel(raw, 0);
    let classification = tape.bce_selected(logits, bce_items);
    let regression = if positives.is_empty() {
        tape.constant(NdArray::scalar(0.0))
    } else {
        let offsets = tape.channels_as_cols(raw, 1);
        tape.smooth_l1_selected(offsets, positives.clone())
    };
    let total = tape.add(classification, regression);
    Ok(DetectionLoss {
        total,
        classification,
        regression,
        num_positives: positives.len(),
        num_mined_negatives: negatives.len(),
    })
}

/// Post-processing configuration: confidence threshold, candidate cap, and
/// overlap threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    /// Candidates with `score >= score_threshold` survive the filter.
    pub score_threshold: f64,
    pub top_k: usize,
    pub nms_iou: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig { score_threshold: DEFAULT_SCORE_THRESHOLD, top_k: TOP_K, nms_iou: NMS_IOU }
    }
}

/// Threshold filter, then keep the `top_k` highest-confidence candidates,
/// then greedy NMS. The result is in descending score order, never exceeds
/// `top_k`, and is pairwise IoU `<= nms_iou`.
pub fn select_detections(candidates: &[Detection], config: &SelectConfig) -> Vec<Detection> {
    let mut kept: Vec<&Detection> =
        candidates.iter().filter(|d| d.score >= config.score_threshold).collect();
    // Stable sort: equal scores keep their candidate order.
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(config.top_k);
    let boxes: Vec<OrientedBox> = kept.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
    nms(&boxes, &scores, config.nms_iou).into_iter().map(|i| *kept[i]).collect()
}

/// Noise model for [`oracle_detector`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleNoise {
    /// Std-dev of the Gaussian jitter on each center coordinate, meters.
    pub sigma_xy: f64,
    /// Std-dev of the Gaussian jitter on heading, radians.
    pub sigma_heading: f64,
    /// Std-dev of the Gaussian jitter on log-size; length and width are
    /// scaled by `exp(sigma_size * n)` so they stay positive.
    pub sigma_size: f64,
    /// Expected spurious detections per ground-truth label.
    pub fp_rate: f64,
    /// Probability that a label is missed entirely.
    pub fn_rate: f64,
}

impl OracleNoise {
    /// Pass-through: detections exactly equal labels.
    pub fn none() -> Self {
        OracleNoise { sigma_xy: 0.0, sigma_heading: 0.0, sigma_size: 0.0, fp_rate: 0.0, fn_rate: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let rates_ok = (0.0..=1.0).contains(&self.fp_rate) && (0.0..=1.0).contains(&self.fn_rate);
        let sigmas_ok = self.sigma_xy >= 0.0
            && self.sigma_heading >= 0.0
            && self.sigma_size >= 0.0
            && self.sigma_xy.is_finite()
            && self.sigma_heading.is_finite()
            && self.sigma_size.is_finite();
        if !rates_ok || !sigmas_ok {
            return Err(Error::domain(
                "OracleNoise",
                format!("rates must lie in [0, 1] and sigmas be finite and >= 0, got {self:?}"),
            ));
        }
        Ok(())
    }
}

/// Footprint range for spurious oracle boxes (plausible vehicle sizes).
const SPURIOUS_LENGTH: std::ops::Range<f64> = 3.5..5.5;
const SPURIOUS_WIDTH: std::ops::Range<f64> = 1.6..2.4;

/// Fabricate detections from ground-truth boxes.
///
/// Each label is independently dropped with probability `fn_rate`;
/// survivors are perturbed by Gaussian noise on center, heading, and
/// log-size and reported with score [`ORACLE_TRUE_SCORE`] and their source
/// label index. Then `round(fp_rate * |labels|)` spurious boxes with score
/// [`ORACLE_SPURIOUS_SCORE`] are placed uniformly in the ROI with uniform
/// heading. Output order: surviving labels in label order, then spurious
/// boxes. Deterministic for a fixed seed.
pub fn oracle_detector(
    labels: &[OrientedBox],
    noise: &OracleNoise,
    roi: &GroundGrid,
    seed: u64,
) -> Result<Vec<Detection>> {
    noise.validate()?;
    roi.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        if rng.gen::<f64>() < noise.fn_rate {
            continue;
        }
        let dx = noise.sigma_xy * standard_normal(&mut rng);
        let dy = noise.sigma_xy * standard_normal(&mut rng);
        let dh = noise.sigma_heading * standard_normal(&mut rng);
        let sl = (noise.sigma_size * standard_normal(&mut rng)).exp();
        let sw = (noise.sigma_size * standard_normal(&mut rng)).exp();
        out.push(Detection {
            score: ORACLE_TRUE_SCORE,
            bbox: OrientedBox::new(
                label.center[0] + dx,
                label.center[1] + dy,
                label.length * sl,
                label.width * sw,
                label.heading + dh,
            ),
            source_label: Some(i),
        });
    }
    let spurious = (noise.fp_rate * labels.len() as f64).round() as usize;
    for _ in 0..spurious {
        let x = rng.gen_range(roi.min_x()..roi.min_x() + roi.length);
        let y = rng.gen_range(roi.min_y()..roi.min_y() + roi.width);
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let length = rng.gen_range(SPURIOUS_LENGTH);
        let width = rng.gen_range(SPURIOUS_WIDTH);
        out.push(Detection {
            score: ORACLE_SPURIOUS_SCORE,
            bbox: OrientedBox::new(x, y, length, width, heading),
            source_label: None,
        });
    }
    Ok(out)
}

/// Training-target visibility: a vehicle is a target when it has at least
/// one simulated return in the current sweep, or at least two returns
/// across the two previous sweeps.
pub fn is_visible_target(points_current: usize, points_prev_two: usize) -> bool {
    points_current >= 1 || points_prev_two >= 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_iou, wrap_angle};
    use crate::nn::check_gradients;
    use rand::SeedableRng;

    const TOL: f64 = 1e-9;

    fn small_layout() -> AnchorLayout {
        AnchorLayout::new(GroundGrid::new(8.0, 8.0, 1.0).unwrap(), 4.0, 2.0).unwrap()
    }

    fn zero_params(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }

    /// Raw grid with given logit everywhere and zero offsets.
    fn raw_grid(layout: &AnchorLayout, logit: f64) -> NdArray {
        let mut raw = NdArray::zeros(&layout.raw_shape());
        raw.data_mut()[..layout.num_anchors()].fill(logit);
        raw
    }

    fn set_channel(raw: &mut NdArray, layout: &AnchorLayout, c: usize, a: usize, v: f64) {
        let spatial = layout.num_anchors();
        raw.data_mut()[c * spatial + a] = v;
    }

    #[test]
    fn zero_head_gives_uniform_scores_and_prior_boxes() {
        let layout = small_layout();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = DetectorHead::new(
            &mut store,
            &mut rng,
            "det",
            DetectorHeadConfig::new(3, &[8]),
        )
        .unwrap();
        zero_params(&mut store);

        let mut tape = Tape::new();
        let features =
            tape.constant(NdArray::randn(&mut rng, &[3, layout.rows(), layout.cols()], 1.0));
        let raw = head.forward(&mut tape, &store, features).unwrap();
        let raw_value = tape.value(raw);
        assert_eq!(raw_value.shape(), layout.raw_shape());
        assert!(raw_value.data().iter().all(|&v| v == 0.0));

        let detections = decode_boxes(raw_value, &layout).unwrap();
        assert_eq!(detections.len(), layout.num_anchors());
        for (a, d) in detections.iter().enumerate() {
            let (ax, ay) = layout.anchor_center(a);
            assert_eq!(d.score, 0.5);
            assert!((d.bbox.center[0] - ax).abs() < TOL);
            assert!((d.bbox.center[1] - ay).abs() < TOL);
            assert!((d.bbox.length - layout.prior_length).abs() < TOL);
            assert!((d.bbox.width - layout.prior_width).abs() < TOL);
            assert_eq!(d.bbox.heading, 0.0);
        }
    }

    #[test]
    fn head_rejects_mismatched_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head =
            DetectorHead::new(&mut store, &mut rng, "det", DetectorHeadConfig::new(3, &[4]))
                .unwrap();
        let mut tape = Tape::new();
        let bad = tape.constant(NdArray::zeros(&[2, 4, 4]));
        assert!(head.forward(&mut tape, &store, bad).is_err());
    }

    #[test]
    fn heading_decodes_via_atan2() {
        let layout = small_layout();
        let mut raw = raw_grid(&layout, 0.0);
        set_channel(&mut raw, &layout, 5, 0, 1.0); // sin
        set_channel(&mut raw, &layout, 6, 0, 0.0); // cos
        set_channel(&mut raw, &layout, 5, 1, 2.0); // unnormalized pair
        set_channel(&mut raw, &layout, 6, 1, 0.0);
        let dets = decode_boxes(&raw, &layout).unwrap();
        assert!((dets[0].bbox.heading - std::f64::consts::FRAC_PI_2).abs() < TOL);
        assert!((dets[1].bbox.heading - std::f64::consts::FRAC_PI_2).abs() < TOL);
    }

    #[test]
    fn decode_encode_identity_on_random_boxes() {
        let layout = small_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let label = OrientedBox::new(
                rng.gen_range(-3.9..3.9),
                rng.gen_range(-3.9..3.9),
                rng.gen_range(2.0..6.0),
                rng.gen_range(1.0..3.0),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            let (a, offsets) = encode_box(&label, &layout).unwrap();
            let decoded = decode_offsets(&layout, a, offsets);
            assert!((decoded.center[0] - label.center[0]).abs() < TOL);
            assert!((decoded.center[1] - label.center[1]).abs() < TOL);
            assert!((decoded.length - label.length).abs() < TOL);
            assert!((decoded.width - label.width).abs() < TOL);
            assert!(wrap_angle(decoded.heading - label.heading).abs() < TOL);
        }
    }

    #[test]
    fn encode_rejects_labels_outside_grid() {
        let layout = small_layout();
        let outside = OrientedBox::new(10.0, 0.0, 4.0, 2.0, 0.0);
        assert!(encode_box(&outside, &layout).is_err());
    }

    #[test]
    fn mining_selects_three_negatives_per_positive() {
        // 12 x 10 cells: 120 anchors, 2 positives, 118 negatives -> 6 mined.
        let layout =
            AnchorLayout::new(GroundGrid::new(12.0, 10.0, 1.0).unwrap(), 4.0, 2.0).unwrap();
        let labels =
            [OrientedBox::new(-3.2, -2.1, 4.0, 2.0, 0.3), OrientedBox::new(2.7, 3.4, 4.2, 1.8, -1.0)];

        // Background logits -2; plant six hot negatives with known logits.
        let mut raw = raw_grid(&layout, -2.0);
        let positive_anchors: Vec<usize> = labels
            .iter()
            .map(|l| layout.nearest_anchor(l.center[0], l.center[1]).unwrap())
            .collect();
        let hot: Vec<usize> =
            (0..120).filter(|a| !positive_anchors.contains(a)).take(6).collect();
        for (k, &a) in hot.iter().enumerate() {
            set_channel(&mut raw, &layout, 0, a, 1.0 + k as f64 * 0.25);
        }
        for &a in &positive_anchors {
            set_channel(&mut raw, &layout, 0, a, 0.5);
        }

        let mut tape = Tape::new();
        let raw_var = tape.constant(raw);
        let loss = detection_loss(&mut tape, raw_var, &layout, &labels).unwrap();
        assert_eq!(loss.num_positives, 2);
        assert_eq!(loss.num_mined_negatives, 6);

        // The classification value must equal BCE over exactly the two
        // positives (logit 0.5, y = 1) and the six planted negatives.
        let softplus = |x: f64| x.exp().ln_1p();
        let mut expected = 2.0 * softplus(-0.5);
        for k in 0..6 {
            expected += softplus(1.0 + k as f64 * 0.25);
        }
        let got = tape.value(loss.classification).item();
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
    }

    #[test]
    fn duplicate_anchor_keeps_first_label() {
        let layout = small_layout();
        // Both centers fall in the same 1 m cell.
        let labels =
            [OrientedBox::new(0.2, 0.2, 4.0, 2.0, 0.0), OrientedBox::new(0.3, 0.3, 4.0, 2.0, 0.0)];
        let assignment = assign_anchors(&labels, &layout).unwrap();
        assert_eq!(assignment.positives.len(), 1);
        let (a, offsets) = assignment.positives[0];
        assert_eq!(a, layout.nearest_anchor(0.2, 0.2).unwrap());
        assert!((offsets[0] - (0.2 - layout.anchor_center(a).0)).abs() < TOL);
    }

    #[test]
    fn empty_scene_mines_floor_and_skips_regression() {
        let layout = small_layout();
        let mut tape = Tape::new();
        let raw_var = tape.constant(raw_grid(&layout, 0.4));
        let loss = detection_loss(&mut tape, raw_var, &layout, &[]).unwrap();
        assert_eq!(loss.num_positives, 0);
        assert_eq!(loss.num_mined_negatives, MIN_MINED_NEGATIVES);
        assert_eq!(tape.value(loss.regression).item(), 0.0);
        let softplus = |x: f64| f64::ln_1p(f64::exp(x));
        let expected = 3.0 * softplus(0.4);
        assert!((tape.value(loss.classification).item() - expected).abs() < 1e-12);
        assert!(
            (tape.value(loss.total).item() - tape.value(loss.classification).item()).abs() < 1e-15
        );
    }

    #[test]
    fn perfect_offsets_give_zero_regression() {
        let layout = small_layout();
        let labels =
            [OrientedBox::new(-1.3, 2.2, 4.4, 2.1, 0.7), OrientedBox::new(2.6, -0.9, 3.6, 1.9, -2.0)];
        let mut raw = raw_grid(&layout, 0.0);
        for label in &labels {
            let (a, offsets) = encode_box(label, &layout).unwrap();
            for (c, v) in offsets.iter().enumerate() {
                set_channel(&mut raw, &layout, 1 + c, a, *v);
            }
        }
        let mut tape = Tape::new();
        let raw_var = tape.constant(raw.clone());
        let loss = detection_loss(&mut tape, raw_var, &layout, &labels).unwrap();
        assert_eq!(tape.value(loss.regression).item(), 0.0);

        // A residual of 0.5 on a single channel contributes 0.5 * d^2 = 0.125.
        let (a0, offsets0) = encode_box(&labels[0], &layout).unwrap();
        set_channel(&mut raw, &layout, 3, a0, offsets0[2] + 0.5);
        let mut tape = Tape::new();
        let raw_var = tape.constant(raw);
        let loss = detection_loss(&mut tape, raw_var, &layout, &labels).unwrap();
        assert!((tape.value(loss.regression).item() - 0.125).abs() < 1e-12);
    }

    fn spread_detection(i: usize, score: f64) -> Detection {
        Detection::new(
            score,
            OrientedBox::new((i as f64) * 20.0, (i / 50) as f64 * 20.0, 4.0, 2.0, 0.0),
        )
    }

    #[test]
    fn select_keeps_few_candidates_intact() {
        let candidates: Vec<Detection> =
            (0..5).map(|i| spread_detection(i, 0.3 + 0.1 * i as f64)).collect();
        let out = select_detections(&candidates, &SelectConfig::default());
        assert_eq!(out.len(), 5);
        // Descending score order.
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn select_prunes_near_duplicates() {
        let a = Detection::new(0.9, OrientedBox::new(0.0, 0.0, 4.0, 2.0, 0.0));
        let b = Detection::new(0.8, OrientedBox::new(0.1, 0.0, 4.0, 2.0, 0.0));
        let out = select_detections(&[a, b], &SelectConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn select_filters_below_threshold() {
        let candidates: Vec<Detection> = (0..4).map(|i| spread_detection(i, 0.05)).collect();
        assert!(select_detections(&candidates, &SelectConfig::default()).is_empty());
    }

    #[test]
    fn select_caps_at_top_k_and_low_overlap() {
        let candidates: Vec<Detection> =
            (0..250).map(|i| spread_detection(i, 0.2 + (i as f64) * 1e-3)).collect();
        let out = select_detections(&candidates, &SelectConfig::default());
        assert_eq!(out.len(), TOP_K);
        // The 50 lowest-scoring candidates were cut by the top-K cap.
        let min_kept = out.iter().map(|d| d.score).fold(f64::INFINITY, f64::min);
        assert!(min_kept >= 0.2 + 50.0 * 1e-3 - 1e-12);
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                assert!(box_iou(&out[i].bbox, &out[j].bbox) <= NMS_IOU + 1e-12);
            }
        }
    }

    fn sample_labels() -> Vec<OrientedBox> {
        vec![
            OrientedBox::new(-10.0, -5.0, 4.5, 2.0, 0.2),
            OrientedBox::new(4.0, 8.0, 4.0, 1.8, -1.1),
            OrientedBox::new(12.0, -9.0, 5.0, 2.2, 2.8),
            OrientedBox::new(-18.0, 14.0, 4.2, 2.0, 1.5),
        ]
    }

    #[test]
    fn oracle_passthrough_matches_labels() {
        let roi = GroundGrid::new(100.0, 100.0, 0.5).unwrap();
        let labels = sample_labels();
        let dets = oracle_detector(&labels, &OracleNoise::none(), &roi, 3).unwrap();
        assert_eq!(dets.len(), labels.len());
        for (i, (d, l)) in dets.iter().zip(&labels).enumerate() {
            assert_eq!(d.score, ORACLE_TRUE_SCORE);
            assert_eq!(d.source_label, Some(i));
            assert_eq!(d.bbox, *l);
        }
    }

    #[test]
    fn oracle_fn_rate_one_drops_everything() {
        let roi = GroundGrid::new(100.0, 100.0, 0.5).unwrap();
        let noise = OracleNoise { fn_rate: 1.0, ..OracleNoise::none() };
        let dets = oracle_detector(&sample_labels(), &noise, &roi, 3).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn oracle_is_deterministic_per_seed() {
        let roi = GroundGrid::new(100.0, 100.0, 0.5).unwrap();
        let noise = OracleNoise {
            sigma_xy: 0.3,
            sigma_heading: 0.1,
            sigma_size: 0.05,
            fp_rate: 0.5,
            fn_rate: 0.25,
        };
        let labels = sample_labels();
        let a = oracle_detector(&labels, &noise, &roi, 42).unwrap();
        let b = oracle_detector(&labels, &noise, &roi, 42).unwrap();
        assert_eq!(a, b);
        let c = oracle_detector(&labels, &noise, &roi, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oracle_spurious_boxes_land_in_roi_with_fixed_score() {
        let roi = GroundGrid::new(100.0, 100.0, 0.5).unwrap();
        let noise = OracleNoise { fp_rate: 0.5, ..OracleNoise::none() };
        let labels = sample_labels();
        let dets = oracle_detector(&labels, &noise, &roi, 9).unwrap();
        // 4 true survivors plus round(0.5 * 4) = 2 spurious.
        assert_eq!(dets.len(), 6);
        let spurious: Vec<&Detection> = dets.iter().filter(|d| d.source_label.is_none()).collect();
        assert_eq!(spurious.len(), 2);
        for d in spurious {
            assert_eq!(d.score, ORACLE_SPURIOUS_SCORE);
            assert!(d.bbox.center[0].abs() <= 50.0 && d.bbox.center[1].abs() <= 50.0);
            assert!(d.bbox.length > 0.0 && d.bbox.width > 0.0);
        }
    }

    #[test]
    fn oracle_noise_perturbs_but_preserves_positivity() {
        let roi = GroundGrid::new(100.0, 100.0, 0.5).unwrap();
        let noise = OracleNoise {
            sigma_xy: 0.5,
            sigma_heading: 0.2,
            sigma_size: 0.3,
            fp_rate: 0.0,
            fn_rate: 0.0,
        };
        let labels = sample_labels();
        let dets = oracle_detector(&labels, &noise, &roi, 5).unwrap();
        assert_eq!(dets.len(), labels.len());
        let mut moved = false;
        for (d, l) in dets.iter().zip(&labels) {
            assert!(d.bbox.length > 0.0 && d.bbox.width > 0.0);
            moved |= (d.bbox.center[0] - l.center[0]).abs() > 1e-6;
        }
        assert!(moved, "noise should actually perturb centers");
    }

    #[test]
    fn oracle_rejects_invalid_rates() {
        let roi = GroundGrid::new(10.0, 10.0, 1.0).unwrap();
        let noise = OracleNoise { fn_rate: 1.5, ..OracleNoise::none() };
        assert!(oracle_detector(&[], &noise, &roi, 0).is_err());
    }

    #[test]
    fn visibility_rule_matches_point_counts() {
        assert!(is_visible_target(1, 0));
        assert!(is_visible_target(0, 2));
        assert!(!is_visible_target(0, 1));
        assert!(!is_visible_target(0, 0));
    }

    /// Finite differences through head convolutions and both loss terms.
    #[test]
    fn gradient_check_through_head_and_loss() {
        let layout = AnchorLayout::new(GroundGrid::new(5.0, 5.0, 1.0).unwrap(), 4.0, 2.0).unwrap();
        let labels = [OrientedBox::new(0.7, -1.2, 4.4, 2.1, 0.4)];
        let mut viable = 0;
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let head = DetectorHead::new(
                &mut store,
                &mut rng,
                "det",
                DetectorHeadConfig::new(2, &[4]),
            )
            .unwrap();
            let feat = NdArray::randn(&mut rng, &[2, 5, 5], 0.8);
            store.add("features", feat).unwrap();
            let report = match check_gradients(&mut store, |tape, store| {
                let features = tape.param(store, store.id("features").unwrap());
                let raw = head.forward(tape, store, features).unwrap();
                detection_loss(tape, raw, &layout, &labels).unwrap().total
            }) {
                Ok(r) => r,
                Err(_) => continue,
            };
            assert!(
                report.max_rel_err < 1e-6,
                "seed {seed}: max rel err {}",
                report.max_rel_err
            );
            viable += 1;
            if viable >= 10 {
                return;
            }
        }
        panic!("fewer than 10 viable seeds for the detector gradient check");
    }

    #[test]
    fn gradients_reach_only_selected_anchors() {
        let layout = small_layout();
        let labels = [OrientedBox::new(0.7, -1.2, 4.4, 2.1, 0.4)];
        let mut store = ParamStore::new();
        store.add("raw", raw_grid(&layout, -1.0)).unwrap();
        let mut tape = Tape::new();
        let raw = tape.param(&store, store.id("raw").unwrap());
        let loss = detection_loss(&mut tape, raw, &layout, &labels).unwrap();
        let grads = tape.backward(loss.total);
        let g = grads.of(&tape, raw);

        let spatial = layout.num_anchors();
        let positive = layout.nearest_anchor(0.7, -1.2).unwrap();
        // Logit plane: the positive plus exactly three mined negatives get
        // gradient; all other anchors stay at zero.
        let logit_grads = &g.data()[..spatial];
        let touched: Vec<usize> =
            (0..spatial).filter(|&a| logit_grads[a] != 0.0).collect();
        assert_eq!(touched.len(), 1 + 3);
        assert!(touched.contains(&positive));
        // Offset planes: only the positive anchor's six channels are hit.
        for c in 1..RAW_CHANNELS {
            let plane = &g.data()[c * spatial..(c + 1) * spatial];
            for (a, &v) in plane.iter().enumerate() {
                if a == positive {
                    continue;
                }
                assert_eq!(v, 0.0, "channel {c} anchor {a}");
            }
        }
    }
}
