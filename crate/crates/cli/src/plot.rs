//! `plot`: render an evaluation run as a self-contained SVG.
//!
//! Left panel: the pooled precision-recall curve with its average
//! precision. Right panels: per-scene trajectory rollouts — ground-truth
//! boxes and future tracks in gray, forecast waypoint means connected per
//! actor, and a one-standard-deviation ellipse per waypoint whose axes are
//! the square roots of the covariance eigenvalues. Waypoint color fades
//! from blue to pink over the forecast horizon. The file carries no
//! timestamps, so identical inputs render to identical bytes.

use std::fmt::Write as _;

use anyhow::Context;
use serde::Serialize;
use spagnn_core::distributions::Gauss2;

use crate::eval_cmd::{detail_path, EvalDetail, SceneDetail, DETAIL_SCHEMA};
use crate::manifest::{sibling_manifest_path, RunManifest};
use crate::PlotArgs;

const WIDTH: f64 = 980.0;
const HEIGHT: f64 = 600.0;
/// Earliest-waypoint color (blue).
const COLOR_START: [f64; 3] = [31.0, 119.0, 224.0];
/// Final-waypoint color (pink).
const COLOR_END: [f64; 3] = [232.0, 62.0, 156.0];
/// Smallest world-extent (meters) a rollout panel will zoom into.
const MIN_SPAN_M: f64 = 20.0;

/// Header the metrics CSV must carry (sanity check that `--eval-csv`
/// really points at an evaluation run).
const METRICS_HEADER: &str =
    "variant,horizon_s,map,l2_cm,heading_deg,collision_window_s,collision_permille,operating_recall";

fn lerp_color(t: f64) -> String {
    let c: Vec<String> = (0..3)
        .map(|i| {
            let v = COLOR_START[i] + (COLOR_END[i] - COLOR_START[i]) * t;
            format!("{}", v.round() as i64)
        })
        .collect();
    format!("rgb({},{},{})", c[0], c[1], c[2])
}

/// Principal axes of a 2x2 covariance: (major std, minor std, major-axis
/// angle in radians).
fn covariance_axes(g: &Gauss2) -> (f64, f64, f64) {
    let a = g.sigma[0] * g.sigma[0];
    let c = g.sigma[1] * g.sigma[1];
    let b = g.rho * g.sigma[0] * g.sigma[1];
    let half_trace = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let major = (half_trace + disc).max(0.0).sqrt();
    let minor = (half_trace - disc).max(0.0).sqrt();
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    (major, minor, angle)
}

/// Affine world-to-panel mapping (isotropic scale, y flipped).
struct PanelMap {
    cx: f64,
    cy: f64,
    scale: f64,
    ox: f64,
    oy: f64,
}

impl PanelMap {
    /// Fit `points` into a `size` x `size` panel whose top-left corner is
    /// `(ox, oy)`.
    fn fit(points: &[[f64; 2]], size: f64, ox: f64, oy: f64) -> PanelMap {
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            min_x = min_x.min(p[0]);
            max_x = max_x.max(p[0]);
            min_y = min_y.min(p[1]);
            max_y = max_y.max(p[1]);
        }
        if points.is_empty() {
            (min_x, max_x, min_y, max_y) = (-1.0, 1.0, -1.0, 1.0);
        }
        let span = (max_x - min_x).max(max_y - min_y).max(MIN_SPAN_M) * 1.15;
        PanelMap {
            cx: 0.5 * (min_x + max_x),
            cy: 0.5 * (min_y + max_y),
            scale: size / span,
            ox: ox + 0.5 * size,
            oy: oy + 0.5 * size,
        }
    }

    fn x(&self, wx: f64) -> f64 {
        self.ox + (wx - self.cx) * self.scale
    }

    fn y(&self, wy: f64) -> f64 {
        self.oy - (wy - self.cy) * self.scale
    }

    fn point(&self, p: [f64; 2]) -> (f64, f64) {
        (self.x(p[0]), self.y(p[1]))
    }
}

fn polyline(points: impl Iterator<Item = (f64, f64)>, style: &str) -> String {
    let coords: Vec<String> =
        points.map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    if coords.len() < 2 {
        return String::new();
    }
    format!("<polyline points=\"{}\" fill=\"none\" {style}/>\n", coords.join(" "))
}

fn pr_panel(svg: &mut String, detail: &EvalDetail, x0: f64, y0: f64, size: f64) {
    let _ = write!(
        svg,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"#888\"/>\n"
    );
    for i in 1..4 {
        let f = i as f64 / 4.0;
        let gx = x0 + f * size;
        let gy = y0 + f * size;
        let _ = write!(
            svg,
            "<line x1=\"{gx:.1}\" y1=\"{y0}\" x2=\"{gx:.1}\" y2=\"{}\" stroke=\"#ddd\"/>\n<line x1=\"{x0}\" y1=\"{gy:.1}\" x2=\"{}\" y2=\"{gy:.1}\" stroke=\"#ddd\"/>\n",
            y0 + size,
            x0 + size
        );
    }
    let map_x = |recall: f64| x0 + recall * size;
    let map_y = |precision: f64| y0 + (1.0 - precision) * size;
    if detail.pr.points.is_empty() {
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" fill=\"#666\">no detections</text>\n",
            x0 + 0.5 * size,
            y0 + 0.5 * size
        );
    } else {
        // Anchor the curve at recall 0 with the first point's precision.
        let first = &detail.pr.points[0];
        let mut pts = vec![(map_x(0.0), map_y(first.precision))];
        pts.extend(detail.pr.points.iter().map(|p| (map_x(p.recall), map_y(p.precision))));
        svg.push_str(&polyline(pts.into_iter(), "stroke=\"#1f77e0\" stroke-width=\"1.8\""));
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">recall</text>\n",
        x0 + 0.5 * size,
        y0 + size + 28.0
    );
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 {:.1} {:.1})\">precision</text>\n",
        x0 - 28.0,
        y0 + 0.5 * size,
        x0 - 28.0,
        y0 + 0.5 * size
    );
    for (v, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{label}</text>\n",
            map_x(v),
            y0 + size + 14.0
        );
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{label}</text>\n",
            x0 - 6.0,
            map_y(v) + 3.5
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{x0}\" y=\"{:.1}\" font-size=\"13\">precision-recall, AP {:.3}</text>\n",
        y0 - 10.0,
        detail.pr.ap
    );
}

fn rollout_panel(
    svg: &mut String,
    scene: &SceneDetail,
    score_threshold: f64,
    index: usize,
    x0: f64,
    y0: f64,
    size: f64,
) {
    let kept: Vec<_> =
        scene.actors.iter().filter(|a| a.node.score >= score_threshold).collect();

    let mut extent: Vec<[f64; 2]> = Vec::new();
    for label in &scene.labels {
        extent.extend(label.bbox.corners());
        extent.extend(label.waypoints.iter().map(|p| [p.x, p.y]));
    }
    for actor in &kept {
        extent.extend(actor.node.bbox.corners());
        extent.extend(actor.waypoints.iter().map(|w| w.position.mean));
    }
    let map = PanelMap::fit(&extent, size, x0, y0);

    let _ = write!(
        svg,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{size}\" height=\"{size}\" fill=\"#fcfcfc\" stroke=\"#888\"/>\n"
    );
    let _ = write!(
        svg,
        "<text x=\"{x0}\" y=\"{:.1}\" font-size=\"12\">scene {index}</text>\n",
        y0 - 6.0
    );
    let _ = write!(svg, "<clipPath id=\"clip{index}\"><rect x=\"{x0}\" y=\"{y0}\" width=\"{size}\" height=\"{size}\"/></clipPath>\n");
    let _ = write!(svg, "<g clip-path=\"url(#clip{index})\">\n");

    // Ground truth: box footprints and future tracks.
    for label in &scene.labels {
        let corners = label.bbox.corners();
        let pts: Vec<String> = corners
            .iter()
            .map(|p| {
                let (x, y) = map.point(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = write!(
            svg,
            "<polygon points=\"{}\" fill=\"#bbb\" fill-opacity=\"0.35\" stroke=\"#777\" stroke-width=\"0.8\"/>\n",
            pts.join(" ")
        );
        svg.push_str(&polyline(
            label.waypoints.iter().map(|p| map.point([p.x, p.y])),
            "stroke=\"#999\" stroke-width=\"1\" stroke-dasharray=\"3,2\"",
        ));
    }

    // Forecasts: per-waypoint one-sigma ellipses and mean tracks.
    for actor in &kept {
        svg.push_str(&polyline(
            actor.waypoints.iter().map(|w| map.point(w.position.mean)),
            "stroke=\"#555\" stroke-width=\"0.9\"",
        ));
        let steps = actor.waypoints.len();
        for (i, w) in actor.waypoints.iter().enumerate() {
            let t = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
            let color = lerp_color(t);
            let (mx, my) = map.point(w.position.mean);
            let (major, minor, angle) = covariance_axes(&w.position);
            let rx = (major * map.scale).max(0.4);
            let ry = (minor * map.scale).max(0.4);
            // The y-axis flip mirrors angles.
            let degrees = -angle.to_degrees();
            let _ = write!(
                svg,
                "<ellipse cx=\"0\" cy=\"0\" rx=\"{rx:.2}\" ry=\"{ry:.2}\" transform=\"translate({mx:.2} {my:.2}) rotate({degrees:.1})\" fill=\"{color}\" fill-opacity=\"0.12\" stroke=\"{color}\" stroke-opacity=\"0.6\" stroke-width=\"0.8\"/>\n"
            );
            let _ = write!(
                svg,
                "<circle cx=\"{mx:.2}\" cy=\"{my:.2}\" r=\"1.6\" fill=\"{color}\"/>\n"
            );
        }
    }
    svg.push_str("</g>\n");
}

fn render(detail: &EvalDetail) -> String {
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = write!(
        svg,
        "<text x=\"40\" y=\"34\" font-size=\"16\">{} — mAP {:.3}, operating score threshold {:.3}</text>\n",
        detail.variant, detail.map, detail.threshold.score_threshold
    );

    pr_panel(&mut svg, detail, 60.0, 80.0, 400.0);

    let panel = 210.0;
    let gap = 30.0;
    for (i, scene) in detail.scenes.iter().enumerate().take(4) {
        let col = (i % 2) as f64;
        let row = (i / 2) as f64;
        rollout_panel(
            &mut svg,
            scene,
            detail.threshold.score_threshold,
            i,
            520.0 + col * (panel + gap),
            80.0 + row * (panel + gap + 14.0),
            panel,
        );
    }
    if detail.scenes.is_empty() {
        svg.push_str(
            "<text x=\"640\" y=\"260\" font-size=\"13\" fill=\"#666\">no rollout scenes recorded</text>\n",
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Serialize)]
struct PlotConfigEcho {
    eval_csv: String,
    detail: String,
}

pub fn run(args: &PlotArgs) -> anyhow::Result<()> {
    let csv_text = std::fs::read_to_string(&args.eval_csv)
        .with_context(|| format!("reading {}", args.eval_csv.display()))?;
    let header = csv_text.lines().next().unwrap_or_default();
    if header != METRICS_HEADER {
        anyhow::bail!(
            "{} does not look like an evaluation metrics CSV (unexpected header)",
            args.eval_csv.display()
        );
    }
    let detail_file = detail_path(&args.eval_csv);
    let detail_text = std::fs::read_to_string(&detail_file)
        .with_context(|| format!("reading {}", detail_file.display()))?;
    let detail: EvalDetail = serde_json::from_str(&detail_text)
        .with_context(|| format!("parsing {}", detail_file.display()))?;
    if detail.schema != DETAIL_SCHEMA {
        anyhow::bail!(
            "{}: unsupported detail schema {:?} (expected {DETAIL_SCHEMA:?})",
            detail_file.display(),
            detail.schema
        );
    }

    let svg = render(&detail);
    std::fs::write(&args.out, svg)
        .with_context(|| format!("writing {}", args.out.display()))?;

    let echo = PlotConfigEcho {
        eval_csv: args.eval_csv.display().to_string(),
        detail: detail_file.display().to_string(),
    };
    let manifest = RunManifest::new(serde_json::to_value(&echo)?, None, &[&args.out]);
    manifest.write(&sibling_manifest_path(&args.out))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
