//! Grid and geometry value types shared by every stage of the pipeline.
//!
//! Conventions: cell `(0, 0)` is the top-left cell, `x` grows to the right
//! and `y` grows downward. Metric coordinates are meters relative to the
//! metric center of the grid, with the same axis directions, so the cell
//! `(x, y)` has its center at
//! `((x + 0.5 - W/2) * cell_size, (y + 0.5 - H/2) * cell_size)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and resolution of a BEV grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub cell_size: f64,
    /// Feature channels per cell.
    pub channels: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, cell_size: f64, channels: usize) -> Result<Self> {
        let spec = GridSpec {
            height,
            width,
            cell_size,
            channels,
        };
        spec.validate("grid")?;
        Ok(spec)
    }

    /// Checks the invariants, naming fields relative to `prefix`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.height < 1 {
            return Err(Error::config(format!("{prefix}.height"), "must be >= 1"));
        }
        if self.width < 1 {
            return Err(Error::config(format!("{prefix}.width"), "must be >= 1"));
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(Error::config(
                format!("{prefix}.cell_size"),
                "must be finite and > 0",
            ));
        }
        if self.channels < 1 {
            return Err(Error::config(format!("{prefix}.channels"), "must be >= 1"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Same grid with a different channel count.
    pub fn with_channels(&self, channels: usize) -> GridSpec {
        GridSpec { channels, ..*self }
    }

    /// Same geometry (height, width, cell size), channels ignored.
    pub fn same_geometry(&self, other: &GridSpec) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.cell_size == other.cell_size
    }

    pub fn contains(&self, c: GridCoord) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    /// Row-major cell index. Caller guarantees `contains(c)`.
    pub fn index(&self, c: GridCoord) -> usize {
        debug_assert!(self.contains(c));
        c.y as usize * self.width + c.x as usize
    }

    pub fn coord(&self, index: usize) -> GridCoord {
        GridCoord::new((index % self.width) as i32, (index / self.width) as i32)
    }

    /// Metric center of a cell.
    pub fn cell_center(&self, c: GridCoord) -> [f64; 2] {
        self.cell_to_metric([c.x as f64, c.y as f64])
    }

    /// Continuous cell coordinates to meters.
    pub fn cell_to_metric(&self, cell: [f64; 2]) -> [f64; 2] {
        [
            (cell[0] + 0.5 - self.width as f64 / 2.0) * self.cell_size,
            (cell[1] + 0.5 - self.height as f64 / 2.0) * self.cell_size,
        ]
    }

    /// Meters to continuous cell coordinates (cell centers are integers).
    pub fn metric_to_cell(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] / self.cell_size + self.width as f64 / 2.0 - 0.5,
            p[1] / self.cell_size + self.height as f64 / 2.0 - 0.5,
        ]
    }

    /// Cell containing a metric point. May lie outside the grid.
    pub fn nearest_cell(&self, p: [f64; 2]) -> GridCoord {
        let c = self.metric_to_cell(p);
        GridCoord::new(c[0].round() as i32, c[1].round() as i32)
    }
}

/// Integer cell coordinate. Signed so that window cells hanging off the grid
/// can still be named.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCoord {
    pub x: i32,
    pub y: i32,
}

impl GridCoord {
    pub const fn new(x: i32, y: i32) -> Self {
        GridCoord { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        GridCoord::new(self.x + dx, self.y + dy)
    }

    pub fn chebyshev(self, other: GridCoord) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }

    /// Row-major ordering key (y first, then x).
    pub fn row_major_key(self) -> (i32, i32) {
        (self.y, self.x)
    }
}

/// Dense `H x W x C` feature grid, channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    spec: GridSpec,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(spec: GridSpec) -> Self {
        FeatureMap {
            spec,
            data: vec![0.0; spec.cells() * spec.channels],
        }
    }

    pub fn from_vec(spec: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.cells() * spec.channels {
            return Err(Error::Mismatch(format!(
                "feature data has {} values, grid needs {}",
                data.len(),
                spec.cells() * spec.channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("feature map holds a non-finite value".into()));
        }
        Ok(FeatureMap { spec, data })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.spec.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Feature vector at an in-bounds cell.
    pub fn at(&self, c: GridCoord) -> &[f64] {
        let start = self.spec.index(c) * self.spec.channels;
        &self.data[start..start + self.spec.channels]
    }

    pub fn at_mut(&mut self, c: GridCoord) -> &mut [f64] {
        let start = self.spec.index(c) * self.spec.channels;
        let ch = self.spec.channels;
        &mut self.data[start..start + ch]
    }

    /// Dense size in bytes when stored as f64.
    pub fn byte_size(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

/// Dense `H x W` center-probability grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    spec: GridSpec,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(spec: GridSpec) -> Self {
        Heatmap {
            spec,
            data: vec![0.0; spec.cells()],
        }
    }

    pub fn from_vec(spec: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.cells() {
            return Err(Error::Mismatch(format!(
                "heatmap data has {} values, grid needs {}",
                data.len(),
                spec.cells()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::Format(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Heatmap { spec, data })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: GridCoord) -> f64 {
        self.data[self.spec.index(c)]
    }

    /// Writes a value, clamped into `[0, 1]`.
    pub fn set(&mut self, c: GridCoord, v: f64) {
        let i = self.spec.index(c);
        self.data[i] = v.clamp(0.0, 1.0);
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Rigid 2D transform `p -> R(rotation) * p + translation`, in meters and
/// radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub translation: [f64; 2],
    pub rotation: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Pose2::identity()
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a - 2.0 * PI
    } else {
        a
    }
}

impl Pose2 {
    pub fn new(translation: [f64; 2], rotation: f64) -> Self {
        Pose2 {
            translation,
            rotation: normalize_angle(rotation),
        }
    }

    pub const fn identity() -> Self {
        Pose2 {
            translation: [0.0, 0.0],
            rotation: 0.0,
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }

    /// Rotates a vector without translating it.
    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.apply(other.translation);
        Pose2::new(t, self.rotation + other.rotation)
    }

    pub fn inverse(&self) -> Pose2 {
        let inv_rot = Pose2::new([0.0, 0.0], -self.rotation);
        let t = inv_rot.rotate(self.translation);
        Pose2::new([-t[0], -t[1]], -self.rotation)
    }
}

/// Odd-sized window with a unique center cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowShape {
    pub height: usize,
    pub width: usize,
}

impl WindowShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        let w = WindowShape { height, width };
        w.validate("window")?;
        Ok(w)
    }

    pub const fn square(side: usize) -> Self {
        WindowShape {
            height: side,
            width: side,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 2 == 0 {
                return Err(Error::config(
                    format!("{prefix}.{name}"),
                    format!("window dimensions must be odd and >= 1, got {v}"),
                ));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn half_height(&self) -> i32 {
        (self.height / 2) as i32
    }

    pub fn half_width(&self) -> i32 {
        (self.width / 2) as i32
    }

    /// Row-major index of the center cell.
    pub fn center_index(&self) -> usize {
        self.cells() / 2
    }

    /// Offset `(dx, dy)` of a row-major window index relative to the center.
    pub fn offset_of(&self, index: usize) -> (i32, i32) {
        let row = (index / self.width) as i32;
        let col = (index % self.width) as i32;
        (col - self.half_width(), row - self.half_height())
    }

    /// Row-major index of an offset, if it lies inside the window.
    pub fn index_of(&self, dx: i32, dy: i32) -> Option<usize> {
        let col = dx + self.half_width();
        let row = dy + self.half_height();
        if col < 0 || row < 0 || col as usize >= self.width || row as usize >= self.height {
            None
        } else {
            Some(row as usize * self.width + col as usize)
        }
    }

    /// All offsets in row-major order.
    pub fn offsets(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        (0..self.cells()).map(move |i| self.offset_of(i))
    }
}

/// Maps the center of `r` through `pose_delta` (metric, about the grid's
/// metric center) and returns the containing cell, or `None` when the image
/// leaves the grid.
pub fn transform_coord(pose_delta: &Pose2, r: GridCoord, spec: &GridSpec) -> Option<GridCoord> {
    let moved = pose_delta.apply(spec.cell_center(r));
    let c = spec.nearest_cell(moved);
    spec.contains(c).then_some(c)
}

/// The window around `center` in row-major order, each cell flagged with
/// whether it lies on the grid.
pub fn window_cells(
    center: GridCoord,
    shape: WindowShape,
    spec: &GridSpec,
) -> Vec<(GridCoord, bool)> {
    shape
        .offsets()
        .map(|(dx, dy)| {
            let c = center.offset(dx, dy);
            (c, spec.contains(c))
        })
        .collect()
}
