//! Center-based detection surrogate and metrics.
//!
//! Detections are strict local maxima of a heatmap. They are matched to
//! truth centers greedily in score order by Euclidean distance in cells, and
//! scored with precision and recall at several distance thresholds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuse::{run_sequence, FusionConfig, SequenceRun};
use crate::geonet::GeoNetParams;
use crate::grid::{GridCoord, Heatmap};
use crate::sample::SamplingConfig;
use crate::sim::SimFrame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub location: GridCoord,
    pub score: f64,
}

/// Cells at least `threshold` that are strictly greater than every other
/// cell of their `(2 * peak_radius + 1)^2` neighborhood. Best first, ties in
/// row-major order.
pub fn detect_peaks(heatmap: &Heatmap, threshold: f64, peak_radius: usize) -> Vec<Detection> {
    let spec = heatmap.spec();
    let r = peak_radius as i32;
    let mut out = Vec::new();
    for (i, &v) in heatmap.data().iter().enumerate() {
        if v < threshold {
            continue;
        }
        let c = spec.coord(i);
        let strict = (-r..=r).all(|dy| {
            (-r..=r).all(|dx| {
                let n = c.offset(dx, dy);
                (dx == 0 && dy == 0) || !spec.contains(n) || heatmap.at(n) < v
            })
        });
        if strict {
            out.push(Detection {
                location: c,
                score: v,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl MatchCounts {
    /// 1 when nothing was detected.
    pub fn precision(&self) -> f64 {
        let d = self.true_positives + self.false_positives;
        if d == 0 {
            1.0
        } else {
            self.true_positives as f64 / d as f64
        }
    }

    /// 1 when there was nothing to find.
    pub fn recall(&self) -> f64 {
        let t = self.true_positives + self.false_negatives;
        if t == 0 {
            1.0
        } else {
            self.true_positives as f64 / t as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub counts: MatchCounts,
    /// Distances of matched pairs, in detection order.
    pub distances: Vec<f64>,
}

/// Greedy matching in the given detection order. Each detection takes the
/// nearest unmatched truth within `max_dist` cells, the earliest in truth
/// order on ties.
pub fn match_detections(
    detections: &[Detection],
    truth: &[[f64; 2]],
    max_dist: f64,
) -> MatchResult {
    let mut taken = vec![false; truth.len()];
    let mut distances = Vec::new();
    for d in detections {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truth.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let dist = ((t[0] - d.location.x as f64).powi(2)
                + (t[1] - d.location.y as f64).powi(2))
            .sqrt();
            if dist <= max_dist && best.is_none_or(|(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        if let Some((j, dist)) = best {
            taken[j] = true;
            distances.push(dist);
        }
    }
    let tp = distances.len();
    MatchResult {
        counts: MatchCounts {
            true_positives: tp,
            false_positives: detections.len() - tp,
            false_negatives: truth.len() - tp,
        },
        distances,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub peak_radius: usize,
    /// Matching distances in cells.
    pub max_dists: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.3,
            peak_radius: 1,
            max_dists: vec![1.0, 2.0, 4.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("eval.threshold", "must lie in (0, 1)"));
        }
        if self.max_dists.is_empty() || self.max_dists.iter().any(|d| !(d.is_finite() && *d > 0.0))
        {
            return Err(Error::config(
                "eval.max_dists",
                "need at least one positive distance",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameRow {
    pub pipeline: String,
    pub max_dist: f64,
    pub frame: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanRow {
    pub max_dist: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pipeline: String,
    pub rows: Vec<FrameRow>,
    /// Per-frame means, one row per matching distance.
    pub means: Vec<MeanRow>,
    /// Matched distances at the largest threshold, half-cell bins.
    pub histogram: Vec<HistogramBin>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn mean_recall(&self, max_dist: f64) -> Option<f64> {
        self.means
            .iter()
            .find(|m| m.max_dist == max_dist)
            .map(|m| m.recall)
    }

    pub fn mean_precision(&self, max_dist: f64) -> Option<f64> {
        self.means
            .iter()
            .find(|m| m.max_dist == max_dist)
            .map(|m| m.precision)
    }
}

const BIN_WIDTH: f64 = 0.5;

/// Scores one heatmap per frame against that frame's truth.
pub fn evaluate(
    pipeline: &str,
    frames: &[SimFrame],
    heatmaps: &[&Heatmap],
    cfg: &EvalConfig,
    config: serde_json::Value,
) -> EvalReport {
    let per_frame: Vec<Vec<MatchResult>> = frames
        .par_iter()
        .zip(heatmaps.par_iter())
        .map(|(f, h)| {
            let dets = detect_peaks(h, cfg.threshold, cfg.peak_radius);
            let truth = f.truth_cells();
            cfg.max_dists
                .iter()
                .map(|&d| match_detections(&dets, &truth, d))
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    for (k, &max_dist) in cfg.max_dists.iter().enumerate() {
        for (f, results) in frames.iter().zip(&per_frame) {
            let c = results[k].counts;
            rows.push(FrameRow {
                pipeline: pipeline.into(),
                max_dist,
                frame: f.index,
                tp: c.true_positives,
                fp: c.false_positives,
                fn_: c.false_negatives,
                precision: c.precision(),
                recall: c.recall(),
            });
        }
    }
    let n = frames.len().max(1) as f64;
    let means = cfg
        .max_dists
        .iter()
        .enumerate()
        .map(|(k, &max_dist)| MeanRow {
            max_dist,
            precision: per_frame
                .iter()
                .map(|r| r[k].counts.precision())
                .sum::<f64>()
                / n,
            recall: per_frame.iter().map(|r| r[k].counts.recall()).sum::<f64>() / n,
        })
        .collect();

    let widest = cfg
        .max_dists
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, &d)| (k, d))
        .unwrap_or((0, 0.0));
    let bins = ((widest.1 / BIN_WIDTH).ceil() as usize).max(1);
    let mut histogram: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: b as f64 * BIN_WIDTH,
            hi: (b + 1) as f64 * BIN_WIDTH,
            count: 0,
        })
        .collect();
    for r in &per_frame {
        for &d in &r[widest.0].distances {
            let b = ((d / BIN_WIDTH) as usize).min(bins - 1);
            histogram[b].count += 1;
        }
    }
    EvalReport {
        pipeline: pipeline.into(),
        rows,
        means,
        histogram,
        config,
    }
}

/// Detection on the raw heatmaps versus the fused heatmaps of the same
/// sequence. Returns `(single, fused, fusion run)`.
pub fn compare_single_vs_fused(
    frames: &[SimFrame],
    sampling: &SamplingConfig,
    geonet: &GeoNetParams,
    fusion: &FusionConfig,
    assign_radius: f64,
    cfg: &EvalConfig,
    config: serde_json::Value,
) -> Result<(EvalReport, EvalReport, SequenceRun)> {
    let run = run_sequence(frames, sampling, geonet, fusion, assign_radius)?;
    let raw: Vec<&Heatmap> = frames.iter().map(|f| &f.heatmap).collect();
    let fused: Vec<&Heatmap> = run.fused.iter().map(|f| &f.heatmap).collect();
    let single = evaluate("single", frames, &raw, cfg, config.clone());
    let fused = evaluate("fused", frames, &fused, cfg, config);
    Ok((single, fused, run))
}
