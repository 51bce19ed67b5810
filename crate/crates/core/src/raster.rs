//! Bird's-eye-view input rasterization: multi-sweep occupancy voxelization,
//! binary map channels, rotated-RoI feature extraction, and the
//! nearest-cell feature-indexing baseline.
//!
//! All grids share one [`GroundGrid`] geometry: an axis-aligned rectangle
//! centered on the ego vehicle, `x` forward, square cells. Cell `(ix, iy)`
//! covers `[min_x + ix*cell, min_x + (ix+1)*cell) × [min_y + iy*cell, ...)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::OrientedBox;
use crate::nn::{BilinearTaps, NdArray};

const DIVISIBILITY_TOL: f64 = 1e-9;

/// Ground-plane grid geometry shared by occupancy, map, and feature grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundGrid {
    /// Extent along x (meters); the grid spans `[-length/2, length/2)`.
    pub length: f64,
    /// Extent along y (meters); the grid spans `[-width/2, width/2)`.
    pub width: f64,
    /// Square cell edge (meters).
    pub cell: f64,
}

impl GroundGrid {
    pub fn new(length: f64, width: f64, cell: f64) -> Result<Self> {
        let grid = GroundGrid { length, width, cell };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0 && self.length > 0.0 && self.width > 0.0)
            || !(self.cell.is_finite() && self.length.is_finite() && self.width.is_finite())
        {
            return Err(Error::domain(
                "GroundGrid",
                format!(
                    "extents and cell must be positive finite, got {} x {} at {}",
                    self.length, self.width, self.cell
                ),
            ));
        }
        for (what, extent) in [("length", self.length), ("width", self.width)] {
            let cells = extent / self.cell;
            if (cells - cells.round()).abs() > DIVISIBILITY_TOL || cells.round() < 1.0 {
                return Err(Error::domain(
                    "GroundGrid",
                    format!("cell {} does not divide {what} {extent}", self.cell),
                ));
            }
        }
        Ok(())
    }

    pub fn len_cells(&self) -> usize {
        (self.length / self.cell).round() as usize
    }

    pub fn wid_cells(&self) -> usize {
        (self.width / self.cell).round() as usize
    }

    pub fn min_x(&self) -> f64 {
        -0.5 * self.length
    }

    pub fn min_y(&self) -> f64 {
        -0.5 * self.width
    }

    /// Cell containing a point, if inside the grid.
    pub fn cell_index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let ix = ((x - self.min_x()) / self.cell).floor();
        let iy = ((y - self.min_y()) / self.cell).floor();
        if ix >= 0.0
            && iy >= 0.0
            && (ix as usize) < self.len_cells()
            && (iy as usize) < self.wid_cells()
        {
            Some((ix as usize, iy as usize))
        } else {
            None
        }
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.min_x() + (ix as f64 + 0.5) * self.cell,
            self.min_y() + (iy as f64 + 0.5) * self.cell,
        )
    }

    /// Continuous cell-center coordinates of a world point: `(0, 0)` is the
    /// center of cell `(0, 0)`, units of cells.
    pub fn grid_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.min_x()) / self.cell - 0.5,
            (y - self.min_y()) / self.cell - 0.5,
        )
    }
}

/// Voxelization settings: ground grid plus height binning and sweep count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevConfig {
    pub ground: GroundGrid,
    pub height_min: f64,
    pub height_max: f64,
    pub height_cell: f64,
    /// Number of sweep slots (fewer sweeps leave trailing channels empty).
    pub sweeps: usize,
}

impl BevConfig {
    /// Desk-scale default: 100 m x 100 m at 0.5 m, one height bin, 3 sweeps.
    pub fn toy() -> Self {
        BevConfig {
            ground: GroundGrid { length: 100.0, width: 100.0, cell: 0.5 },
            height_min: -2.5,
            height_max: 2.5,
            height_cell: 5.0,
            sweeps: 3,
        }
    }

    /// Full-scale reference configuration (for shape arithmetic only).
    pub fn full_scale() -> Self {
        BevConfig {
            ground: GroundGrid { length: 140.0, width: 80.0, cell: 0.2 },
            height_min: -2.5,
            height_max: 2.5,
            height_cell: 0.2,
            sweeps: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ground.validate()?;
        let h = self.height_max - self.height_min;
        if !(self.height_cell > 0.0) || h <= 0.0 {
            return Err(Error::domain(
                "BevConfig",
                format!("height range {h} and bin {} must be positive", self.height_cell),
            ));
        }
        let bins = h / self.height_cell;
        if (bins - bins.round()).abs() > DIVISIBILITY_TOL || bins.round() < 1.0 {
            return Err(Error::domain(
                "BevConfig",
                format!("height bin {} does not divide range {h}", self.height_cell),
            ));
        }
        if self.sweeps == 0 {
            return Err(Error::domain("BevConfig", "at least one sweep slot required"));
        }
        Ok(())
    }

    pub fn height_bins(&self) -> usize {
        ((self.height_max - self.height_min) / self.height_cell).round() as usize
    }

    pub fn channels(&self) -> usize {
        self.height_bins() * self.sweeps
    }
}

/// Binary occupancy grid with height and time folded into channels:
/// channel `s * height_bins + h` holds sweep `s`, height bin `h`.
#[derive(Debug, Clone)]
pub struct BevGrid {
    config: BevConfig,
    /// Channel-major `[channel][ix][iy]`.
    data: Vec<u8>,
}

impl BevGrid {
    /// Logical shape `(length cells, width cells, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.config.ground.len_cells(), self.config.ground.wid_cells(), self.config.channels())
    }

    pub fn config(&self) -> &BevConfig {
        &self.config
    }

    pub fn occupied(&self, ix: usize, iy: usize, channel: usize) -> bool {
        let (l, w, _) = self.shape();
        debug_assert!(ix < l && iy < w);
        self.data[(channel * l + ix) * w + iy] != 0
    }

    pub fn count_occupied(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    /// Dense float view `[channels, length cells, width cells]` for the
    /// convolutional backbone.
    pub fn to_features(&self) -> NdArray {
        let (l, w, c) = self.shape();
        NdArray::from_vec(&[c, l, w], self.data.iter().map(|&v| v as f64).collect())
    }
}

/// Rasterize point sweeps (already expressed in the current ego frame)
/// into a binary occupancy grid. A cell is 1 iff at least one point of
/// that sweep falls into it for that height bin; out-of-extent points are
/// dropped silently.
pub fn voxelize(sweeps: &[Vec<[f64; 3]>], config: &BevConfig) -> Result<BevGrid> {
    config.validate()?;
    if sweeps.len() > config.sweeps {
        return Err(Error::shape(
            "voxelize",
            format!("{} sweeps exceed the configured {}", sweeps.len(), config.sweeps),
        ));
    }
    let (l, w) = (config.ground.len_cells(), config.ground.wid_cells());
    let h_bins = config.height_bins();
    let mut data = vec![0u8; config.channels() * l * w];
    for (s, sweep) in sweeps.iter().enumerate() {
        for (p_idx, p) in sweep.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "point",
                    name: format!("sweep {s} point {p_idx}"),
                });
            }
            let Some((ix, iy)) = config.ground.cell_index(p[0], p[1]) else {
                continue;
            };
            let hb = ((p[2] - config.height_min) / config.height_cell).floor();
            if hb < 0.0 || hb as usize >= h_bins {
                continue;
            }
            let channel = s * h_bins + hb as usize;
            data[(channel * l + ix) * w + iy] = 1;
        }
    }
    Ok(BevGrid { config: *config, data })
}

/// Registry mapping semantic class names to map channels, in channel order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapChannelSet {
    names: Vec<String>,
}

impl MapChannelSet {
    /// Toy channel set used by the synthetic scenes.
    pub fn toy() -> Self {
        MapChannelSet {
            names: ["lane_centerline", "road_polygon", "intersection_polygon"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    /// Full-scale channel registry (17 semantic classes).
    pub fn full_scale() -> Self {
        MapChannelSet {
            names: [
                "lane_centerline",
                "road_polygon",
                "intersection_polygon",
                "crosswalk_polygon",
                "lane_boundary_solid",
                "lane_boundary_dashed",
                "bike_lane",
                "parking_area",
                "stop_line",
                "yield_line",
                "speed_bump",
                "driveway",
                "turn_lane_left",
                "turn_lane_right",
                "bus_lane",
                "rail_crossing",
                "traffic_island",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn channel(&self, semantic: &str) -> Result<usize> {
        self.names.iter().position(|n| n == semantic).ok_or_else(|| {
            Error::domain("MapChannelSet", format!("unknown semantic class `{semantic}`"))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|n| n.as_str())
    }
}

/// One map element: a polyline (painted 1 cell wide) or a polygon ring
/// (filled), tagged with its semantic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub semantic: String,
    /// Vertices in the ego frame. Polygons are closed implicitly.
    pub points: Vec<[f64; 2]>,
    /// Filled region if true, 1-cell-wide polyline otherwise.
    pub filled: bool,
}

/// Binary semantic channels over a ground grid.
#[derive(Debug, Clone)]
pub struct MapRaster {
    grid: GroundGrid,
    channels: usize,
    /// Channel-major `[channel][ix][iy]`.
    data: Vec<u8>,
}

impl MapRaster {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.grid.len_cells(), self.grid.wid_cells(), self.channels)
    }

    pub fn value(&self, ix: usize, iy: usize, channel: usize) -> bool {
        let (l, w, _) = self.shape();
        self.data[(channel * l + ix) * w + iy] != 0
    }

    pub fn channel_count(&self, channel: usize) -> usize {
        let (l, w, _) = self.shape();
        self.data[channel * l * w..(channel + 1) * l * w].iter().filter(|&&v| v != 0).count()
    }

    /// Dense float view `[channels, length cells, width cells]`.
    pub fn to_features(&self) -> NdArray {
        let (l, w, c) = self.shape();
        NdArray::from_vec(&[c, l, w], self.data.iter().map(|&v| v as f64).collect())
    }
}

/// Paint map elements into their semantic channels.
pub fn rasterize_map(
    elements: &[MapElement],
    grid: &GroundGrid,
    channels: &MapChannelSet,
) -> Result<MapRaster> {
    grid.validate()?;
    let (l, w) = (grid.len_cells(), grid.wid_cells());
    let mut raster =
        MapRaster { grid: *grid, channels: channels.len(), data: vec![0u8; channels.len() * l * w] };
    for element in elements {
        let channel = channels.channel(&element.semantic)?;
        if element.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite { what: "vertex", name: element.semantic.clone() });
        }
        let plane = &mut raster.data[channel * l * w..(channel + 1) * l * w];
        if element.filled {
            fill_polygon(&element.points, grid, plane);
        } else {
            for pair in element.points.windows(2) {
                paint_segment(pair[0], pair[1], grid, plane);
            }
        }
    }
    Ok(raster)
}

/// Mark every cell a segment passes through (1-cell-wide line) by marching
/// at quarter-cell steps; step size below the cell edge guarantees no cell
/// on the path is skipped.
fn paint_segment(a: [f64; 2], b: [f64; 2], grid: &GroundGrid, plane: &mut [u8]) {
    let w = grid.wid_cells();
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let dist = dx.hypot(dy);
    let steps = ((dist / (0.25 * grid.cell)).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        if let Some((ix, iy)) = grid.cell_index(a[0] + t * dx, a[1] + t * dy) {
            plane[ix * w + iy] = 1;
        }
    }
}

/// Even-odd scanline fill sampled at cell centers.
fn fill_polygon(ring: &[[f64; 2]], grid: &GroundGrid, plane: &mut [u8]) {
    if ring.len() < 3 {
        return;
    }
    let w = grid.wid_cells();
    for iy in 0..w {
        let (_, y) = grid.cell_center(0, iy);
        let mut crossings = Vec::new();
        for i in 0..ring.len() {
            let p = ring[i];
            let q = ring[(i + 1) % ring.len()];
            // Half-open vertical interval avoids double counting vertices.
            if (p[1] <= y && q[1] > y) || (q[1] <= y && p[1] > y) {
                let t = (y - p[1]) / (q[1] - p[1]);
                crossings.push(p[0] + t * (q[0] - p[0]));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
        for pair in crossings.chunks_exact(2) {
            let (x0, x1) = (pair[0], pair[1]);
            for ix in 0..grid.len_cells() {
                let (x, _) = grid.cell_center(ix, iy);
                if x >= x0 && x <= x1 {
                    plane[ix * w + iy] = 1;
                }
            }
        }
    }
}

/// Rotated region-of-interest geometry: an oriented rectangle around an
/// actor, `x` along the actor's heading, extending `front` meters ahead of
/// the box center and `length - front` behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RroiConfig {
    pub length: f64,
    pub width: f64,
    /// Meters of the region ahead of the box center (`back = length - front`).
    pub front: f64,
    /// Output resolution (meters per cell).
    pub resolution: f64,
}

impl RroiConfig {
    /// Desk-scale default: 16 m x 10 m at 1 m/cell, 12 m ahead.
    pub fn toy() -> Self {
        RroiConfig { length: 16.0, width: 10.0, front: 12.0, resolution: 1.0 }
    }

    /// Full-scale reference: 41 m x 25 m at 1 m/cell, 31 m ahead.
    pub fn full_scale() -> Self {
        RroiConfig { length: 41.0, width: 25.0, front: 31.0, resolution: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.length > 0.0 && self.width > 0.0) {
            return Err(Error::domain(
                "RroiConfig",
                format!(
                    "degenerate region {} x {} at {} m/cell",
                    self.length, self.width, self.resolution
                ),
            ));
        }
        if !(0.0..=self.length).contains(&self.front) {
            return Err(Error::domain(
                "RroiConfig",
                format!("front offset {} outside region length {}", self.front, self.length),
            ));
        }
        for (what, extent) in [("length", self.length), ("width", self.width)] {
            let cells = extent / self.resolution;
            if (cells - cells.round()).abs() > DIVISIBILITY_TOL || cells.round() < 1.0 {
                return Err(Error::domain(
                    "RroiConfig",
                    format!("resolution {} does not divide {what} {extent}", self.resolution),
                ));
            }
        }
        Ok(())
    }

    pub fn back(&self) -> f64 {
        self.length - self.front
    }

    /// Output rows (lateral cells).
    pub fn rows(&self) -> usize {
        (self.width / self.resolution).round() as usize
    }

    /// Output columns (longitudinal cells).
    pub fn cols(&self) -> usize {
        (self.length / self.resolution).round() as usize
    }
}

/// Bilinear sample taps for every cell of a rotated region, row-major
/// `(rows, cols)`: one sample at each cell center, out-of-bounds taps
/// dropped (zero padding). Feed to
/// [`Tape::bilinear_gather`](crate::nn::Tape::bilinear_gather) or
/// [`rroi_align`].
pub fn rroi_taps(
    grid: &GroundGrid,
    anchor: &OrientedBox,
    config: &RroiConfig,
) -> Result<Vec<BilinearTaps>> {
    config.validate()?;
    grid.validate()?;
    if grid.cell_index(anchor.center[0], anchor.center[1]).is_none() {
        return Err(Error::domain(
            "rroi_taps",
            format!(
                "box center ({}, {}) outside the {} x {} m feature extent",
                anchor.center[0], anchor.center[1], grid.length, grid.width
            ),
        ));
    }
    let (rows, cols) = (config.rows(), config.cols());
    let (sin_h, cos_h) = anchor.heading.sin_cos();
    let (l_cells, w_cells) = (grid.len_cells() as isize, grid.wid_cells() as isize);
    let mut samples = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        // Lateral offset in the box frame (left positive).
        let v = -0.5 * config.width + (r as f64 + 0.5) * config.resolution;
        for c in 0..cols {
            // Longitudinal offset in the box frame.
            let u = -config.back() + (c as f64 + 0.5) * config.resolution;
            let px = anchor.center[0] + cos_h * u - sin_h * v;
            let py = anchor.center[1] + sin_h * u + cos_h * v;
            let (gx, gy) = grid.grid_coords(px, py);
            let x0 = gx.floor();
            let y0 = gy.floor();
            let fx = gx - x0;
            let fy = gy - y0;
            let mut taps = BilinearTaps::default();
            for (ox, oy, weight) in [
                (0isize, 0isize, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                let cx = x0 as isize + ox;
                let cy = y0 as isize + oy;
                if cx >= 0 && cx < l_cells && cy >= 0 && cy < w_cells && weight != 0.0 {
                    taps.taps[taps.count] = ((cx * w_cells + cy) as usize, weight);
                    taps.count += 1;
                }
            }
            samples.push(taps);
        }
    }
    Ok(samples)
}

/// Standalone rotated-RoI extraction over a `[C, H, W]` feature map,
/// returning `[C, rows, cols]`.
pub fn rroi_align(
    features: &NdArray,
    grid: &GroundGrid,
    anchor: &OrientedBox,
    config: &RroiConfig,
) -> Result<NdArray> {
    check_feature_shape(features, grid)?;
    let samples = rroi_taps(grid, anchor, config)?;
    let (rows, cols) = (config.rows(), config.cols());
    let channels = features.shape()[0];
    let spatial = grid.len_cells() * grid.wid_cells();
    let mut out = NdArray::zeros(&[channels, rows, cols]);
    for ch in 0..channels {
        let plane = &features.data()[ch * spatial..(ch + 1) * spatial];
        let out_plane = &mut out.data_mut()[ch * rows * cols..(ch + 1) * rows * cols];
        for (cell, s) in samples.iter().enumerate() {
            out_plane[cell] = s.taps[..s.count].iter().map(|&(i, w)| w * plane[i]).sum();
        }
    }
    Ok(out)
}

/// Ablation baseline: the feature column at the grid cell nearest the box
/// center (round-half-up on both axes); the heading is ignored by design.
pub fn feature_index(
    features: &NdArray,
    grid: &GroundGrid,
    anchor: &OrientedBox,
) -> Result<NdArray> {
    check_feature_shape(features, grid)?;
    if grid.cell_index(anchor.center[0], anchor.center[1]).is_none() {
        return Err(Error::domain(
            "feature_index",
            format!(
                "box center ({}, {}) outside the feature extent",
                anchor.center[0], anchor.center[1]
            ),
        ));
    }
    let (gx, gy) = grid.grid_coords(anchor.center[0], anchor.center[1]);
    let ix = ((gx + 0.5).floor() as usize).min(grid.len_cells() - 1);
    let iy = ((gy + 0.5).floor() as usize).min(grid.wid_cells() - 1);
    let channels = features.shape()[0];
    let spatial = grid.len_cells() * grid.wid_cells();
    let mut out = NdArray::zeros(&[channels]);
    for ch in 0..channels {
        out.data_mut()[ch] = features.data()[ch * spatial + ix * grid.wid_cells() + iy];
    }
    Ok(out)
}

fn check_feature_shape(features: &NdArray, grid: &GroundGrid) -> Result<()> {
    if features.rank() != 3
        || features.shape()[1] != grid.len_cells()
        || features.shape()[2] != grid.wid_cells()
    {
        return Err(Error::shape(
            "raster",
            format!(
                "feature map {:?} does not cover a {} x {} cell grid",
                features.shape(),
                grid.len_cells(),
                grid.wid_cells()
            ),
        ));
    }
    Ok(())
}
