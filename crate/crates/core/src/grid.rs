//! BEV grid geometry: the metric footprint, world↔cell mapping,
//! rasterization, set metrics, connected components and occlusion masks.
//!
//! Conventions (fixed for the whole crate):
//!
//! * The camera sits at the midpoint of the near (bottom) grid edge.
//! * Forward coordinate `z ∈ [0, extent_forward)`, lateral
//!   `x ∈ [−extent_lateral/2, extent_lateral/2)`.
//! * Row 0 is the band farthest from the camera; the last row touches it.
//! * Values are occupancy in `[0, 1]`; a grid is *binary* when every value
//!   is exactly 0 or 1. Binarization threshold defaults to 0.5.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::{Error, Result};

/// Default binarization threshold used throughout evaluation.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Geometry of the BEV footprint and its discretization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    /// Forward extent of the footprint in meters.
    pub extent_forward: f64,
    /// Lateral extent of the footprint in meters.
    pub extent_lateral: f64,
    /// Number of rows (forward bands).
    pub rows: usize,
    /// Number of columns (lateral bands).
    pub cols: usize,
    /// Height of the camera above the ground plane in meters.
    pub camera_height: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            extent_forward: 40.0,
            extent_lateral: 40.0,
            rows: 128,
            cols: 128,
            camera_height: 1.65,
        }
    }
}

impl GridSpec {
    /// A square footprint of `extent` meters at `cells`×`cells` resolution.
    pub fn square(extent: f64, cells: usize, camera_height: f64) -> Self {
        GridSpec {
            extent_forward: extent,
            extent_lateral: extent,
            rows: cells,
            cols: cells,
            camera_height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("grid must have nonzero rows and cols".into()));
        }
        if !(self.extent_forward > 0.0) || !(self.extent_lateral > 0.0) {
            return Err(Error::Config("grid extents must be positive".into()));
        }
        Ok(())
    }

    /// Meters per row band.
    pub fn cell_size_forward(&self) -> f64 {
        self.extent_forward / self.rows as f64
    }

    /// Meters per column band.
    pub fn cell_size_lateral(&self) -> f64 {
        self.extent_lateral / self.cols as f64
    }

    /// Map a ground-plane point (x lateral, z forward, meters) to its cell.
    ///
    /// Returns `None` when the point falls outside the footprint. The near
    /// edge `z = 0` belongs to the last row, so the whole half-open domain
    /// maps onto valid indices.
    pub fn world_to_cell(&self, x: f64, z: f64) -> Option<CellIndex> {
        let half = self.extent_lateral / 2.0;
        if !(z >= 0.0 && z < self.extent_forward && x >= -half && x < half) {
            return None;
        }
        let row = ((self.extent_forward - z) / self.cell_size_forward()).floor() as usize;
        let col = ((x + half) / self.cell_size_lateral()).floor() as usize;
        Some(CellIndex {
            row: row.min(self.rows - 1),
            col: col.min(self.cols - 1),
        })
    }

    /// World coordinates (x lateral, z forward) of a cell's center.
    pub fn cell_center(&self, cell: CellIndex) -> (f64, f64) {
        let x = -self.extent_lateral / 2.0 + (cell.col as f64 + 0.5) * self.cell_size_lateral();
        let z = self.extent_forward - (cell.row as f64 + 0.5) * self.cell_size_forward();
        (x, z)
    }

    pub fn same_geometry(&self, other: &GridSpec) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.extent_forward == other.extent_forward
            && self.extent_lateral == other.extent_lateral
    }
}

/// A (row, col) grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

/// Axis-aligned rectangle of cells, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl CellRect {
    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }

    /// IoU of two inclusive cell rectangles.
    pub fn iou(&self, other: &CellRect) -> f64 {
        let r0 = self.row_min.max(other.row_min);
        let c0 = self.col_min.max(other.col_min);
        let r1 = self.row_max.min(other.row_max);
        let c1 = self.col_max.min(other.col_max);
        if r1 < r0 || c1 < c0 {
            return 0.0;
        }
        let inter = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        inter / union
    }
}

/// Per-channel BEV occupancy over a [`GridSpec`] footprint.
///
/// Stored channel-first (`[channels, rows, cols]`); the `.bevg` file format
/// is channel-last and 32-bit, conversion happens on I/O.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutGrid {
    spec: GridSpec,
    values: Array3<f64>,
}

impl LayoutGrid {
    /// All-zero grid with the given channel count.
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        LayoutGrid {
            spec,
            values: Array3::zeros((channels, spec.rows, spec.cols)),
        }
    }

    /// Wrap a `[channels, rows, cols]` array; every value must be finite
    /// and in `[0, 1]`.
    pub fn from_values(spec: GridSpec, values: Array3<f64>) -> Result<Self> {
        if values.shape()[1] != spec.rows || values.shape()[2] != spec.cols {
            return Err(Error::Shape(format!(
                "grid values {:?} do not match spec {}x{}",
                values.shape(),
                spec.rows,
                spec.cols
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidValue(format!("grid value {bad} outside [0,1]")));
        }
        Ok(LayoutGrid { spec, values })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn get(&self, channel: usize, cell: CellIndex) -> f64 {
        self.values[[channel, cell.row, cell.col]]
    }

    pub fn set(&mut self, channel: usize, cell: CellIndex, value: f64) {
        debug_assert!((0.0..=1.0).contains(&value));
        self.values[[channel, cell.row, cell.col]] = value;
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Binarize at `threshold` (cell on iff value ≥ threshold).
    pub fn binarize(&self, threshold: f64) -> LayoutGrid {
        LayoutGrid {
            spec: self.spec,
            values: self.values.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }),
        }
    }

    /// Single-channel view: cell-wise max over channels.
    pub fn union_channels(&self) -> LayoutGrid {
        let (_, rows, cols) = self.values.dim();
        let mut out = Array3::<f64>::zeros((1, rows, cols));
        for ch in self.values.outer_iter() {
            for (o, v) in out.index_axis_mut(ndarray::Axis(0), 0).iter_mut().zip(ch.iter()) {
                *o = o.max(*v);
            }
        }
        LayoutGrid { spec: self.spec, values: out }
    }

    /// Extract one channel as a single-channel grid.
    pub fn channel(&self, ch: usize) -> LayoutGrid {
        let view = self.values.index_axis(ndarray::Axis(0), ch).to_owned();
        LayoutGrid {
            spec: self.spec,
            values: view.insert_axis(ndarray::Axis(0)),
        }
    }

    /// Flip every channel along the lateral (column) axis.
    pub fn flip_lateral(&self) -> LayoutGrid {
        let mut v = self.values.clone();
        v.invert_axis(ndarray::Axis(2));
        LayoutGrid { spec: self.spec, values: v }
    }

    /// Number of cells at or above `threshold` in one channel.
    pub fn count_on(&self, channel: usize, threshold: f64) -> usize {
        self.values
            .index_axis(ndarray::Axis(0), channel)
            .iter()
            .filter(|&&v| v >= threshold)
            .count()
    }

    fn check_same_geometry(&self, other: &LayoutGrid) -> Result<()> {
        if !self.spec.same_geometry(&other.spec) {
            return Err(Error::SpecMismatch(format!(
                "{}x{} {:.3}m vs {}x{} {:.3}m",
                self.spec.rows,
                self.spec.cols,
                self.spec.extent_forward,
                other.spec.rows,
                other.spec.cols,
                other.spec.extent_forward
            )));
        }
        Ok(())
    }
}

/// Oriented rectangle on the ground plane. `yaw` is measured from the
/// forward (+z) axis toward +x; `length` runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundBox {
    pub center_x: f64,
    pub center_z: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl GroundBox {
    /// Whether a ground point lies inside the (closed) rectangle.
    pub fn contains(&self, x: f64, z: f64) -> bool {
        if self.length <= 0.0 || self.width <= 0.0 {
            return false;
        }
        let dx = x - self.center_x;
        let dz = z - self.center_z;
        let (s, c) = self.yaw.sin_cos();
        // longitudinal along heading, lateral across it
        let lon = dx * s + dz * c;
        let lat = dx * c - dz * s;
        lon.abs() <= self.length / 2.0 && lat.abs() <= self.width / 2.0
    }
}

/// Rasterize an oriented ground rectangle into a binary single-channel grid.
///
/// A cell is on iff its center lies inside the rectangle; zero-area
/// rectangles rasterize to an empty grid.
pub fn rasterize_box(b: &GroundBox, spec: &GridSpec) -> LayoutGrid {
    let mut g = LayoutGrid::zeros(*spec, 1);
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let (x, z) = spec.cell_center(CellIndex { row, col });
            if b.contains(x, z) {
                g.values[[0, row, col]] = 1.0;
            }
        }
    }
    g
}

/// Per-channel IoU of two grids binarized at `threshold`, restricted to the
/// cells where `mask` (binarized at 0.5) is on when given.
///
/// An empty union counts as perfect agreement (IoU 1.0).
pub fn grid_iou(
    a: &LayoutGrid,
    b: &LayoutGrid,
    threshold: f64,
    mask: Option<&LayoutGrid>,
) -> Result<Vec<f64>> {
    a.check_same_geometry(b)?;
    if a.channels() != b.channels() {
        return Err(Error::SpecMismatch(format!(
            "channel count {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    if let Some(m) = mask {
        a.check_same_geometry(m)?;
    }
    let rows = a.spec.rows;
    let cols = a.spec.cols;
    let mut out = Vec::with_capacity(a.channels());
    for ch in 0..a.channels() {
        let mut inter = 0usize;
        let mut union = 0usize;
        for r in 0..rows {
            for c in 0..cols {
                if let Some(m) = mask {
                    // single-channel masks apply to every channel
                    let mc = if m.channels() == 1 { 0 } else { ch };
                    if m.values[[mc, r, c]] < 0.5 {
                        continue;
                    }
                }
                let av = a.values[[ch, r, c]] >= threshold;
                let bv = b.values[[ch, r, c]] >= threshold;
                if av && bv {
                    inter += 1;
                }
                if av || bv {
                    union += 1;
                }
            }
        }
        out.push(if union == 0 { 1.0 } else { inter as f64 / union as f64 });
    }
    Ok(out)
}

/// A connected region of on-cells.
#[derive(Debug, Clone)]
pub struct Blob {
    pub cells: Vec<CellIndex>,
    pub bbox: CellRect,
    /// World-frame centroid (x, z): mean of member cell centers.
    pub centroid_world: (f64, f64),
}

/// 8-connected components of a single-channel grid binarized at `threshold`.
///
/// Blobs are reported in scan order of their first cell; cells within a blob
/// are sorted (row-major). The blobs partition exactly the on-cell set.
pub fn connected_components(g: &LayoutGrid, threshold: f64) -> Result<Vec<Blob>> {
    if g.channels() != 1 {
        return Err(Error::Shape(format!(
            "connected_components expects a single channel, got {}",
            g.channels()
        )));
    }
    let rows = g.spec.rows;
    let cols = g.spec.cols;
    let on = |r: usize, c: usize| g.values[[0, r, c]] >= threshold;
    let mut seen = vec![false; rows * cols];
    let mut blobs = Vec::new();
    for r0 in 0..rows {
        for c0 in 0..cols {
            if seen[r0 * cols + c0] || !on(r0, c0) {
                continue;
            }
            // flood fill
            let mut stack = vec![(r0, c0)];
            seen[r0 * cols + c0] = true;
            let mut cells = Vec::new();
            while let Some((r, c)) = stack.pop() {
                cells.push(CellIndex { row: r, col: c });
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let nr = r as i64 + dr;
                        let nc = c as i64 + dc;
                        if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if !seen[nr * cols + nc] && on(nr, nc) {
                            seen[nr * cols + nc] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            cells.sort();
            let bbox = CellRect {
                row_min: cells.iter().map(|c| c.row).min().unwrap(),
                col_min: cells.iter().map(|c| c.col).min().unwrap(),
                row_max: cells.iter().map(|c| c.row).max().unwrap(),
                col_max: cells.iter().map(|c| c.col).max().unwrap(),
            };
            let (mut sx, mut sz) = (0.0, 0.0);
            for &c in &cells {
                let (x, z) = g.spec.cell_center(c);
                sx += x;
                sz += z;
            }
            let n = cells.len() as f64;
            blobs.push(Blob {
                cells,
                bbox,
                centroid_world: (sx / n, sz / n),
            });
        }
    }
    Ok(blobs)
}

/// Cells present in the fused ground truth but not in the single-frame
/// visible projection: the region a predictor must hallucinate.
pub fn occlusion_mask(visible: &LayoutGrid, fused_gt: &LayoutGrid) -> Result<LayoutGrid> {
    visible.check_same_geometry(fused_gt)?;
    if visible.channels() != 1 || fused_gt.channels() != 1 {
        return Err(Error::Shape(format!(
            "occlusion_mask expects single-channel grids, got {} and {}",
            visible.channels(),
            fused_gt.channels()
        )));
    }
    let mut out = LayoutGrid::zeros(visible.spec, 1);
    for r in 0..visible.spec.rows {
        for c in 0..visible.spec.cols {
            let f = fused_gt.values[[0, r, c]] >= 0.5;
            let v = visible.values[[0, r, c]] >= 0.5;
            if f && !v {
                out.values[[0, r, c]] = 1.0;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// .bevg file format
//
// magic "BEVG", u8 version = 1, u32le rows, cols, channels, f64le
// extent_forward, extent_lateral, camera_height, reserved(=0), then
// rows·cols·channels f32le values, row-major, channel-last.
// ---------------------------------------------------------------------------

const BEVG_MAGIC: &[u8; 4] = b"BEVG";
const BEVG_VERSION: u8 = 1;

impl LayoutGrid {
    pub fn save_bevg(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(29 + self.values.len() * 4);
        buf.extend_from_slice(BEVG_MAGIC);
        buf.push(BEVG_VERSION);
        for v in [self.spec.rows as u32, self.spec.cols as u32, self.channels() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.spec.extent_forward, self.spec.extent_lateral, self.spec.camera_height, 0.0]
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for r in 0..self.spec.rows {
            for c in 0..self.spec.cols {
                for ch in 0..self.channels() {
                    buf.extend_from_slice(&(self.values[[ch, r, c]] as f32).to_le_bytes());
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_bevg(path: &Path) -> Result<LayoutGrid> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 49 || &bytes[0..4] != BEVG_MAGIC {
            return Err(Error::format(path, "not a BEVG file"));
        }
        if bytes[4] != BEVG_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (rows, cols, channels) = (u32_at(5), u32_at(9), u32_at(13));
        let spec = GridSpec {
            extent_forward: f64_at(17),
            extent_lateral: f64_at(25),
            rows,
            cols,
            camera_height: f64_at(33),
        };
        spec.validate().map_err(|e| Error::format(path, e.to_string()))?;
        let expected = 49 + rows * cols * channels * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {} bytes, found {}", expected, bytes.len()),
            ));
        }
        let mut values = Array3::zeros((channels, rows, cols));
        let mut off = 49;
        for r in 0..rows {
            for c in 0..cols {
                for ch in 0..channels {
                    let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
                    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                        return Err(Error::format(path, format!("value {v} outside [0,1]")));
                    }
                    values[[ch, r, c]] = v;
                    off += 4;
                }
            }
        }
        Ok(LayoutGrid { spec, values })
    }

    /// Export one channel as an 8-bit grayscale image (value = round(255·v)).
    pub fn save_channel_png(&self, channel: usize, path: &Path) -> Result<()> {
        let mut img = image::GrayImage::new(self.spec.cols as u32, self.spec.rows as u32);
        for r in 0..self.spec.rows {
            for c in 0..self.spec.cols {
                let v = (self.values[[channel, r, c]] * 255.0).round() as u8;
                img.put_pixel(c as u32, r as u32, image::Luma([v]));
            }
        }
        img.save(path).map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })
    }

    /// Import an 8-bit grayscale image as a single-channel grid (v = px/255).
    pub fn load_channel_png(path: &Path, spec: GridSpec) -> Result<LayoutGrid> {
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })?
            .into_luma8();
        if img.height() as usize != spec.rows || img.width() as usize != spec.cols {
            return Err(Error::Shape(format!(
                "image {}x{} does not match spec {}x{}",
                img.height(),
                img.width(),
                spec.rows,
                spec.cols
            )));
        }
        let mut g = LayoutGrid::zeros(spec, 1);
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                g.values[[0, r, c]] = img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0;
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_spec() -> GridSpec {
        GridSpec::default()
    }

    #[test]
    fn world_to_cell_spec_examples() {
        let spec = default_spec();
        // cell size 0.3125 m
        assert_eq!(spec.cell_size_forward(), 0.3125);
        assert_eq!(
            spec.world_to_cell(0.0, 20.0),
            Some(CellIndex { row: 64, col: 64 })
        );
        assert_eq!(
            spec.world_to_cell(-20.0, 0.0),
            Some(CellIndex { row: 127, col: 0 })
        );
        assert_eq!(spec.world_to_cell(0.0, 45.0), None);
        assert_eq!(spec.world_to_cell(20.0, 10.0), None); // x = +L/2 is outside
        assert_eq!(spec.world_to_cell(0.0, -0.001), None);
    }

    #[test]
    fn cell_center_round_trip_all_cells() {
        let spec = GridSpec::square(40.0, 32, 1.5);
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let c = CellIndex { row, col };
                let (x, z) = spec.cell_center(c);
                assert_eq!(spec.world_to_cell(x, z), Some(c));
            }
        }
    }

    #[test]
    fn rasterize_full_and_degenerate() {
        let spec = default_spec();
        let full = GroundBox {
            center_x: 0.0,
            center_z: 20.0,
            length: 100.0,
            width: 100.0,
            yaw: 0.0,
        };
        let g = rasterize_box(&full, &spec);
        assert_eq!(g.count_on(0, 0.5), 128 * 128);

        let zero = GroundBox { length: 0.0, width: 0.0, ..full };
        assert_eq!(rasterize_box(&zero, &spec).count_on(0, 0.5), 0);
    }

    #[test]
    fn rasterize_matches_brute_force_center_test() {
        // axis-aligned 2 m × 2 m box at (0, 20), brute force over every center
        let spec = default_spec();
        let b = GroundBox {
            center_x: 0.0,
            center_z: 20.0,
            length: 2.0,
            width: 2.0,
            yaw: 0.0,
        };
        let g = rasterize_box(&b, &spec);
        let mut expected = 0;
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let (x, z) = spec.cell_center(CellIndex { row, col });
                if (x - 0.0).abs() <= 1.0 && (z - 20.0).abs() <= 1.0 {
                    expected += 1;
                    assert_eq!(g.get(0, CellIndex { row, col }), 1.0);
                }
            }
        }
        assert_eq!(g.count_on(0, 0.5), expected);
        assert!(expected > 0);
    }

    #[test]
    fn rasterize_rotated_matches_brute_force() {
        let spec = GridSpec::square(40.0, 64, 1.5);
        let b = GroundBox {
            center_x: 3.0,
            center_z: 17.0,
            length: 4.5,
            width: 1.8,
            yaw: 0.7,
        };
        let g = rasterize_box(&b, &spec);
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let (x, z) = spec.cell_center(CellIndex { row, col });
                let dx = x - b.center_x;
                let dz = z - b.center_z;
                let lon = dx * b.yaw.sin() + dz * b.yaw.cos();
                let lat = dx * b.yaw.cos() - dz * b.yaw.sin();
                let inside = lon.abs() <= b.length / 2.0 && lat.abs() <= b.width / 2.0;
                assert_eq!(g.get(0, CellIndex { row, col }) == 1.0, inside);
            }
        }
    }

    #[test]
    fn iou_identity_disjoint_and_brute_force() {
        let spec = GridSpec::square(8.0, 16, 1.5);
        let mut a = LayoutGrid::zeros(spec, 1);
        for r in 0..4 {
            for c in 0..4 {
                a.set(0, CellIndex { row: r, col: c }, 1.0);
            }
        }
        assert_eq!(grid_iou(&a, &a, 0.5, None).unwrap(), vec![1.0]);

        let mut b = LayoutGrid::zeros(spec, 1);
        b.set(0, CellIndex { row: 10, col: 10 }, 1.0);
        assert_eq!(grid_iou(&a, &b, 0.5, None).unwrap(), vec![0.0]);

        // random 16×16 against double-loop brute force
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let mut a = LayoutGrid::zeros(spec, 1);
            let mut b = LayoutGrid::zeros(spec, 1);
            for r in 0..16 {
                for c in 0..16 {
                    a.set(0, CellIndex { row: r, col: c }, if next() < 0.4 { 1.0 } else { 0.0 });
                    b.set(0, CellIndex { row: r, col: c }, if next() < 0.4 { 1.0 } else { 0.0 });
                }
            }
            let (mut inter, mut union) = (0usize, 0usize);
            for r in 0..16 {
                for c in 0..16 {
                    let av = a.get(0, CellIndex { row: r, col: c }) >= 0.5;
                    let bv = b.get(0, CellIndex { row: r, col: c }) >= 0.5;
                    if av && bv {
                        inter += 1;
                    }
                    if av || bv {
                        union += 1;
                    }
                }
            }
            let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            assert_eq!(grid_iou(&a, &b, 0.5, None).unwrap()[0], want);
        }
    }

    #[test]
    fn iou_empty_union_is_one() {
        let spec = GridSpec::square(8.0, 16, 1.5);
        let a = LayoutGrid::zeros(spec, 1);
        assert_eq!(grid_iou(&a, &a, 0.5, None).unwrap(), vec![1.0]);
    }

    #[test]
    fn iou_spec_mismatch_is_error() {
        let a = LayoutGrid::zeros(GridSpec::square(8.0, 16, 1.5), 1);
        let b = LayoutGrid::zeros(GridSpec::square(8.0, 8, 1.5), 1);
        assert!(grid_iou(&a, &b, 0.5, None).is_err());
    }

    #[test]
    fn components_empty_block_and_diagonal() {
        let spec = GridSpec::square(8.0, 16, 1.5);
        let g = LayoutGrid::zeros(spec, 1);
        assert!(connected_components(&g, 0.5).unwrap().is_empty());

        // solid 4×4 block starting at (2, 3)
        let mut g = LayoutGrid::zeros(spec, 1);
        for r in 2..6 {
            for c in 3..7 {
                g.set(0, CellIndex { row: r, col: c }, 1.0);
            }
        }
        let blobs = connected_components(&g, 0.5).unwrap();
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].cells.len(), 16);
        // centroid = mean of the 16 cell centers = center of the block
        let mut sx = 0.0;
        let mut sz = 0.0;
        for r in 2..6 {
            for c in 3..7 {
                let (x, z) = spec.cell_center(CellIndex { row: r, col: c });
                sx += x;
                sz += z;
            }
        }
        assert!((blobs[0].centroid_world.0 - sx / 16.0).abs() < 1e-12);
        assert!((blobs[0].centroid_world.1 - sz / 16.0).abs() < 1e-12);

        // two blocks touching only diagonally form one 8-connected blob
        let mut g = LayoutGrid::zeros(spec, 1);
        for r in 0..2 {
            for c in 0..2 {
                g.set(0, CellIndex { row: r, col: c }, 1.0);
            }
        }
        for r in 2..4 {
            for c in 2..4 {
                g.set(0, CellIndex { row: r, col: c }, 1.0);
            }
        }
        assert_eq!(connected_components(&g, 0.5).unwrap().len(), 1);
    }

    #[test]
    fn occlusion_mask_cases() {
        let spec = GridSpec::square(8.0, 16, 1.5);
        let mut fused = LayoutGrid::zeros(spec, 1);
        for r in 0..8 {
            for c in 0..16 {
                fused.set(0, CellIndex { row: r, col: c }, 1.0);
            }
        }
        // visible == fused → empty mask
        let m = occlusion_mask(&fused, &fused).unwrap();
        assert_eq!(m.count_on(0, 0.5), 0);

        // visible empty → mask == fused
        let empty = LayoutGrid::zeros(spec, 1);
        let m = occlusion_mask(&empty, &fused).unwrap();
        assert_eq!(m.values(), fused.values());

        // rectangular hole in the visible band → mask equals the hole
        let mut visible = fused.clone();
        for r in 2..5 {
            for c in 4..9 {
                visible.set(0, CellIndex { row: r, col: c }, 0.0);
            }
        }
        let m = occlusion_mask(&visible, &fused).unwrap();
        let mut hole = 0;
        for r in 0..16 {
            for c in 0..16 {
                let expected = (2..5).contains(&r) && (4..9).contains(&c);
                assert_eq!(m.get(0, CellIndex { row: r, col: c }) == 1.0, expected);
                if expected {
                    hole += 1;
                }
            }
        }
        assert_eq!(m.count_on(0, 0.5), hole);
    }

    #[test]
    fn bevg_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::square(20.0, 16, 1.1);
        let mut g = LayoutGrid::zeros(spec, 2);
        for r in 0..16 {
            for c in 0..16 {
                // f32-exact values so the 32-bit file round-trips bit-for-bit
                g.set(0, CellIndex { row: r, col: c }, (r % 2) as f64);
                g.set(1, CellIndex { row: r, col: c }, (c % 5) as f64 / 8.0);
            }
        }
        let path = dir.path().join("g.bevg");
        g.save_bevg(&path).unwrap();
        let back = LayoutGrid::load_bevg(&path).unwrap();
        assert_eq!(back.values(), g.values());
        assert_eq!(back.spec(), g.spec());
    }

    #[test]
    fn bevg_layout_is_channel_last_f32() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::square(2.0, 2, 1.0);
        let mut g = LayoutGrid::zeros(spec, 2);
        g.set(0, CellIndex { row: 0, col: 1 }, 0.5);
        g.set(1, CellIndex { row: 0, col: 1 }, 1.0);
        let path = dir.path().join("g.bevg");
        g.save_bevg(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"BEVG");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes.len(), 49 + 2 * 2 * 2 * 4);
        // (row 0, col 1) starts at value index 2 (channel-last)
        let f32_at = |i: usize| {
            f32::from_le_bytes(bytes[49 + 4 * i..49 + 4 * i + 4].try_into().unwrap())
        };
        assert_eq!(f32_at(2), 0.5);
        assert_eq!(f32_at(3), 1.0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::square(8.0, 16, 1.5);
        let mut g = LayoutGrid::zeros(spec, 1);
        for r in 0..16 {
            g.set(0, CellIndex { row: r, col: r }, r as f64 * 17.0 / 255.0);
        }
        let path = dir.path().join("ch0.png");
        g.save_channel_png(0, &path).unwrap();
        let back = LayoutGrid::load_channel_png(&path, spec).unwrap();
        for r in 0..16 {
            let v = back.get(0, CellIndex { row: r, col: r });
            assert!((v - r as f64 * 17.0 / 255.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn prop_world_cell_round_trip(row in 0usize..64, col in 0usize..64) {
            let spec = GridSpec::square(37.0, 64, 1.4);
            let c = CellIndex { row, col };
            let (x, z) = spec.cell_center(c);
            prop_assert_eq!(spec.world_to_cell(x, z), Some(c));
        }

        #[test]
        fn prop_iou_symmetric_and_bounded(seed in 0u64..500) {
            let spec = GridSpec::square(8.0, 8, 1.5);
            let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
            let mut next = move || {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            let mut a = LayoutGrid::zeros(spec, 1);
            let mut b = LayoutGrid::zeros(spec, 1);
            for r in 0..8 {
                for c in 0..8 {
                    a.set(0, CellIndex { row: r, col: c }, next());
                    b.set(0, CellIndex { row: r, col: c }, next());
                }
            }
            let ab = grid_iou(&a, &b, 0.5, None).unwrap()[0];
            let ba = grid_iou(&b, &a, 0.5, None).unwrap()[0];
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(grid_iou(&a, &a, 0.5, None).unwrap()[0], 1.0);
        }

        #[test]
        fn prop_rasterize_monotone_in_nested_boxes(
            len in 0.5f64..6.0, wid in 0.5f64..6.0, grow in 0.0f64..3.0, yaw in -1.5f64..1.5
        ) {
            let spec = GridSpec::square(40.0, 32, 1.5);
            let inner = GroundBox { center_x: 1.0, center_z: 20.0, length: len, width: wid, yaw };
            let outer = GroundBox { length: len + grow, width: wid + grow, ..inner };
            let ci = rasterize_box(&inner, &spec).count_on(0, 0.5);
            let co = rasterize_box(&outer, &spec).count_on(0, 0.5);
            prop_assert!(co >= ci);
        }

        #[test]
        fn prop_components_partition_on_set(seed in 0u64..200) {
            let spec = GridSpec::square(8.0, 12, 1.5);
            let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(7);
            let mut next = move || {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            let mut g = LayoutGrid::zeros(spec, 1);
            let mut on = std::collections::BTreeSet::new();
            for r in 0..12 {
                for c in 0..12 {
                    if next() < 0.35 {
                        g.set(0, CellIndex { row: r, col: c }, 1.0);
                        on.insert(CellIndex { row: r, col: c });
                    }
                }
            }
            let blobs = connected_components(&g, 0.5).unwrap();
            let mut covered = std::collections::BTreeSet::new();
            let mut total = 0usize;
            for b in &blobs {
                total += b.cells.len();
                for &c in &b.cells {
                    prop_assert!(covered.insert(c), "cell in two blobs");
                }
            }
            prop_assert_eq!(total, on.len());
            prop_assert_eq!(covered, on);
        }

        #[test]
        fn prop_occlusion_mask_subset_and_disjoint(seed in 0u64..200) {
            let spec = GridSpec::square(8.0, 10, 1.5);
            let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(3);
            let mut next = move || {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            let mut fused = LayoutGrid::zeros(spec, 1);
            let mut vis = LayoutGrid::zeros(spec, 1);
            for r in 0..10 {
                for c in 0..10 {
                    let f = next() < 0.5;
                    if f {
                        fused.set(0, CellIndex { row: r, col: c }, 1.0);
                        if next() < 0.5 {
                            vis.set(0, CellIndex { row: r, col: c }, 1.0);
                        }
                    }
                }
            }
            let m = occlusion_mask(&vis, &fused).unwrap();
            for r in 0..10 {
                for c in 0..10 {
                    let idx = CellIndex { row: r, col: c };
                    // mask ∧ visible = 0 and mask ⊆ fused
                    prop_assert!(!(m.get(0, idx) == 1.0 && vis.get(0, idx) == 1.0));
                    prop_assert!(m.get(0, idx) <= fused.get(0, idx));
                }
            }
        }
    }
}
