//! Significance-guided sampling: a dense heatmap and feature map are reduced
//! to a sparse set of scored locations with relaxed feature patches. The
//! resulting [`SignificantSet`] is the only state carried between frames.
//!
//! Three stages run in order: a coarse threshold on the heatmap (with top-k
//! truncation), greedy center-distance suppression, and relaxation of each
//! survivor into a neighborhood patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, GridCoord, GridSpec, Heatmap, Pose2, WindowShape};
use crate::sim::{ObjectState, SimFrame};

/// Extent used when no truth object lies near a sample.
pub const DEFAULT_EXTENT: [usize; 2] = [3, 3];

/// A truth object within this many cells lends its extent to a sample.
pub const EXTENT_MATCH_RADIUS: f64 = 2.0;

/// Neighborhood stored around each sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Relaxation {
    /// Box given by the sample's extent hint, clipped to `max`.
    Rectangle {
        max: WindowShape,
    },
    /// Cells whose centers lie within `radius` cells (Euclidean).
    Circular {
        radius: usize,
    },
    Square(WindowShape),
}

impl Default for Relaxation {
    fn default() -> Self {
        Relaxation::Square(WindowShape::square(3))
    }
}

impl Relaxation {
    /// Smallest window containing every cell the relaxation can select.
    pub fn bounding(&self) -> WindowShape {
        match *self {
            Relaxation::Rectangle { max } => max,
            Relaxation::Circular { radius } => WindowShape::square(2 * radius + 1),
            Relaxation::Square(shape) => shape,
        }
    }

    /// Cell offsets of the patch in row-major order.
    pub fn offsets(&self, extent_hint: [usize; 2]) -> Vec<(i32, i32)> {
        match *self {
            Relaxation::Rectangle { max } => {
                let ex = extent_hint[0].clamp(1, max.width) as i32;
                let ey = extent_hint[1].clamp(1, max.height) as i32;
                let left = -(ex - 1) / 2;
                let top = -(ey - 1) / 2;
                (top..top + ey)
                    .flat_map(|dy| (left..left + ex).map(move |dx| (dx, dy)))
                    .collect()
            }
            Relaxation::Circular { radius } => {
                let r = radius as i32;
                (-r..=r)
                    .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
                    .filter(|&(dx, dy)| dx * dx + dy * dy <= r * r)
                    .collect()
            }
            Relaxation::Square(shape) => shape.offsets().collect(),
        }
    }

    fn validate(&self, prefix: &str) -> Result<()> {
        match self {
            Relaxation::Rectangle { max } => max.validate(&format!("{prefix}.max")),
            Relaxation::Circular { radius } if *radius < 1 => {
                Err(Error::config(format!("{prefix}.radius"), "must be >= 1"))
            }
            Relaxation::Circular { .. } => Ok(()),
            Relaxation::Square(shape) => shape.validate(prefix),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Significance threshold on heatmap scores.
    pub alpha: f64,
    pub top_k: usize,
    /// Chebyshev suppression radius in cells; 0 disables suppression.
    pub nms_radius: usize,
    pub relaxation: Relaxation,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            alpha: 0.1,
            top_k: 200,
            nms_radius: 2,
            relaxation: Relaxation::default(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(
                "sampling.alpha",
                format!("must lie in (0, 1), got {}", self.alpha),
            ));
        }
        if self.top_k < 1 {
            return Err(Error::config("sampling.top_k", "must be >= 1"));
        }
        self.relaxation.validate("sampling.relaxation")
    }

    /// Upper bound on patch cells per sample.
    pub fn max_patch_cells(&self) -> usize {
        self.relaxation.bounding().cells()
    }
}

/// Feature values over a relaxation footprint, zeros where the footprint
/// leaves the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub offsets: Vec<(i32, i32)>,
    /// `offsets.len() * channels` values, cell-major.
    pub values: Vec<f64>,
    pub channels: usize,
}

impl Patch {
    pub fn cells(&self) -> usize {
        self.offsets.len()
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    /// Embeds the patch into a dense `bounding` window (row-major, channels
    /// innermost), zero where the relaxation selects no cell. This is the
    /// network input layout.
    pub fn to_dense(&self, bounding: WindowShape) -> Vec<f64> {
        let c = self.channels;
        let mut out = vec![0.0; bounding.cells() * c];
        for (i, &(dx, dy)) in self.offsets.iter().enumerate() {
            if let Some(j) = bounding.index_of(dx, dy) {
                out[j * c..(j + 1) * c].copy_from_slice(self.cell(i));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub location: GridCoord,
    pub score: f64,
    pub patch: Patch,
    pub extent_hint: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignificantSet {
    pub samples: Vec<Sample>,
    pub source_frame: usize,
    /// World -> ego pose of the frame the locations are expressed in.
    pub source_pose: Pose2,
    pub spec: GridSpec,
    pub relaxation: Relaxation,
}

impl SignificantSet {
    pub fn empty(
        spec: GridSpec,
        relaxation: Relaxation,
        source_frame: usize,
        source_pose: Pose2,
    ) -> Self {
        SignificantSet {
            samples: Vec::new(),
            source_frame,
            source_pose,
            spec,
            relaxation,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Real numbers held in patches.
    pub fn stored_reals(&self) -> usize {
        self.samples.iter().map(|s| s.patch.values.len()).sum()
    }

    /// Sum of retained scores.
    pub fn score_mass(&self) -> f64 {
        self.samples.iter().map(|s| s.score).sum()
    }
}

/// All cells scoring at least `alpha`, best first, ties in row-major order,
/// truncated to `top_k`.
pub fn coarse_sample(heatmap: &Heatmap, alpha: f64, top_k: usize) -> Vec<(GridCoord, f64)> {
    let spec = heatmap.spec();
    let mut out: Vec<(GridCoord, f64)> = heatmap
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= alpha)
        .map(|(i, &v)| (spec.coord(i), v))
        .collect();
    // Stable sort keeps the row-major scan order among equal scores.
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out.truncate(top_k);
    out
}

/// Greedy suppression: keeps a candidate iff its Chebyshev distance to every
/// kept location exceeds `nms_radius`. Input order is preserved.
pub fn refine_sample(candidates: &[(GridCoord, f64)], nms_radius: usize) -> Vec<(GridCoord, f64)> {
    if nms_radius == 0 {
        return candidates.to_vec();
    }
    let r = nms_radius as i32;
    let mut kept: Vec<(GridCoord, f64)> = Vec::new();
    for &(c, s) in candidates {
        if kept.iter().all(|(k, _)| k.chebyshev(c) > r) {
            kept.push((c, s));
        }
    }
    kept
}

/// Copies the relaxation footprint around `location` out of `features`.
pub fn relax(
    location: GridCoord,
    relaxation: &Relaxation,
    features: &FeatureMap,
    extent_hint: [usize; 2],
) -> Patch {
    let spec = features.spec();
    let c = spec.channels;
    let offsets = relaxation.offsets(extent_hint);
    let mut values = vec![0.0; offsets.len() * c];
    for (i, &(dx, dy)) in offsets.iter().enumerate() {
        let cell = location.offset(dx, dy);
        if spec.contains(cell) {
            values[i * c..(i + 1) * c].copy_from_slice(features.at(cell));
        }
    }
    Patch {
        offsets,
        values,
        channels: c,
    }
}

/// Extent of the nearest truth object within [`EXTENT_MATCH_RADIUS`] cells.
pub fn extent_hint(location: GridCoord, truth: &[ObjectState], spec: &GridSpec) -> [usize; 2] {
    let mut best: Option<(f64, [usize; 2])> = None;
    for o in truth {
        let p = o.cell(spec);
        let d = ((p[0] - location.x as f64).powi(2) + (p[1] - location.y as f64).powi(2)).sqrt();
        if d <= EXTENT_MATCH_RADIUS && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, o.extent));
        }
    }
    best.map_or(DEFAULT_EXTENT, |(_, e)| e)
}

/// Runs all three stages on arbitrary maps. `truth` only supplies extent
/// hints and may be empty.
pub fn sample_maps(
    heatmap: &Heatmap,
    features: &FeatureMap,
    truth: &[ObjectState],
    cfg: &SamplingConfig,
    source_frame: usize,
    source_pose: Pose2,
) -> SignificantSet {
    let spec = *features.spec();
    let coarse = coarse_sample(heatmap, cfg.alpha, cfg.top_k);
    let refined = refine_sample(&coarse, cfg.nms_radius);
    let samples = refined
        .into_iter()
        .map(|(location, score)| {
            let hint = extent_hint(location, truth, &spec);
            Sample {
                location,
                score,
                patch: relax(location, &cfg.relaxation, features, hint),
                extent_hint: hint,
            }
        })
        .collect();
    SignificantSet {
        samples,
        source_frame,
        source_pose,
        spec,
        relaxation: cfg.relaxation,
    }
}

pub fn build_significant_set(frame: &SimFrame, cfg: &SamplingConfig) -> SignificantSet {
    sample_maps(
        &frame.heatmap,
        &frame.features,
        &frame.truth,
        cfg,
        frame.index,
        frame.ego_pose,
    )
}
