//! Temporal fusion over the sparse bank.
//!
//! Each step ego-aligns the bank sampled from the previous fused frame,
//! scatters every sample's patch over its predicted displacement window
//! (weighted by sample score times displacement probability), normalizes by
//! the accumulated weight, and merges the result into the current frame.
//! The merged frame becomes the previous frame of the next step, so memory
//! stays bounded by the bank no matter how long the sequence is.

mod oracle;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use oracle::{dense_cascade_oracle, ORACLE_MAX_SIDE};

use crate::container;
use crate::error::{Error, Result};
use crate::geonet::{forward, make_label, GeoNetParams};
use crate::grid::{transform_coord, FeatureMap, GridSpec, Heatmap, Pose2};
use crate::sample::{sample_maps, SamplingConfig, SignificantSet};
use crate::sim::{ObjectState, SimFrame};

/// Floor on the accumulated weight when normalizing warped features.
pub const WEIGHT_EPS: f64 = 1e-8;

/// The cross-frame store: a significant set plus the network that will move
/// it forward.
#[derive(Clone, Debug)]
pub struct SparseBank<'a> {
    pub set: SignificantSet,
    pub geonet: &'a GeoNetParams,
    /// Length of the serialized set.
    pub byte_size: usize,
}

impl<'a> SparseBank<'a> {
    pub fn new(set: SignificantSet, geonet: &'a GeoNetParams) -> Self {
        let byte_size = container::set_encoded_len(&set);
        SparseBank {
            set,
            geonet,
            byte_size,
        }
    }

    /// Bytes reserved for patch features when the bank holds `top_k`
    /// samples of `patch_cells` cells each.
    pub fn capacity_bytes(top_k: usize, patch_cells: usize, channels: usize) -> usize {
        top_k * patch_cells * channels * std::mem::size_of::<f64>()
    }
}

/// Past evidence moved into the current frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedState {
    pub warped_features: FeatureMap,
    pub warped_heatmap: Heatmap,
    /// Accumulated scatter weight per cell, row-major.
    pub weight_map: Vec<f64>,
}

impl WarpedState {
    pub fn zeros(spec: GridSpec) -> Self {
        WarpedState {
            warped_features: FeatureMap::zeros(spec),
            warped_heatmap: Heatmap::zeros(spec),
            weight_map: vec![0.0; spec.cells()],
        }
    }

    /// Accumulated (unclamped) heat and features are finalized here: features
    /// divided by `max(weight, eps)`, heat clamped into `[0, 1]`.
    pub(crate) fn finalize(
        spec: GridSpec,
        mut heat: Vec<f64>,
        mut feat: Vec<f64>,
        weight: Vec<f64>,
    ) -> Self {
        let c = spec.channels;
        for (cell, w) in weight.iter().enumerate() {
            let inv = 1.0 / w.max(WEIGHT_EPS);
            for v in &mut feat[cell * c..(cell + 1) * c] {
                *v *= inv;
            }
        }
        for v in &mut heat {
            *v = v.clamp(0.0, 1.0);
        }
        WarpedState {
            warped_features: FeatureMap::from_vec(spec, feat).expect("finite warped features"),
            warped_heatmap: Heatmap::from_vec(spec, heat).expect("clamped heat"),
            weight_map: weight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeMode {
    /// Channel concatenation; doubles the channel count, so the output
    /// cannot feed another fusion step.
    Concat,
    /// `(1 - beta) * current + beta * warped`; heatmaps merge by cellwise max.
    Blend { beta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: MergeMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: MergeMode::Blend { beta: 0.5 },
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            MergeMode::Blend { beta } if !(0.0..=1.0).contains(&beta) => {
                Err(Error::config("fusion.mode.beta", "must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFrame {
    pub index: usize,
    pub features: FeatureMap,
    pub heatmap: Heatmap,
    /// Frame indices folded into this one, oldest first.
    pub provenance: Vec<usize>,
}

impl FusedFrame {
    /// A raw frame passed through without fusion.
    pub fn passthrough(frame: &SimFrame) -> Self {
        FusedFrame {
            index: frame.index,
            features: frame.features.clone(),
            heatmap: frame.heatmap.clone(),
            provenance: vec![frame.index],
        }
    }
}

/// Re-expresses the bank in the `pose_to` ego frame. Samples whose cells
/// leave the grid are dropped; the count is returned alongside.
pub fn ego_align<'a>(
    bank: &SparseBank<'a>,
    pose_from: &Pose2,
    pose_to: &Pose2,
) -> (SparseBank<'a>, usize) {
    let delta = pose_to.compose(&pose_from.inverse());
    let spec = bank.set.spec;
    let mut dropped = 0;
    let samples = bank
        .set
        .samples
        .iter()
        .filter_map(|s| match transform_coord(&delta, s.location, &spec) {
            Some(location) => Some(crate::sample::Sample {
                location,
                ..s.clone()
            }),
            None => {
                dropped += 1;
                None
            }
        })
        .collect();
    let set = SignificantSet {
        samples,
        source_pose: *pose_to,
        ..bank.set.clone()
    };
    (SparseBank::new(set, bank.geonet), dropped)
}

/// Moves every sample's patch through its predicted displacement
/// distribution. Scores are used as-is (no renormalization over the set).
pub fn warp(bank: &SparseBank<'_>) -> WarpedState {
    let spec = bank.set.spec;
    let c = spec.channels;
    let window = bank.geonet.window;
    let bounding = bank.set.relaxation.bounding();
    let mut heat = vec![0.0; spec.cells()];
    let mut feat = vec![0.0; spec.cells() * c];
    let mut weight = vec![0.0; spec.cells()];

    for s in &bank.set.samples {
        let q = forward(bank.geonet, &s.patch.to_dense(bounding));
        for (k, (dx, dy)) in window.offsets().enumerate() {
            let w = q.probs[k] * s.score;
            let dest = s.location.offset(dx, dy);
            if spec.contains(dest) {
                heat[spec.index(dest)] += w;
            }
            for (i, &(ox, oy)) in s.patch.offsets.iter().enumerate() {
                let cell = dest.offset(ox, oy);
                if !spec.contains(cell) {
                    continue;
                }
                let at = spec.index(cell);
                weight[at] += w;
                for (acc, v) in feat[at * c..(at + 1) * c].iter_mut().zip(s.patch.cell(i)) {
                    *acc += w * v;
                }
            }
        }
    }
    WarpedState::finalize(spec, heat, feat, weight)
}

/// Folds the warped past into the current maps.
pub fn merge_maps(
    index: usize,
    heatmap: &Heatmap,
    features: &FeatureMap,
    warped: &WarpedState,
    mode: MergeMode,
) -> Result<FusedFrame> {
    let spec = features.spec();
    let wspec = warped.warped_features.spec();
    if spec != wspec || !heatmap.spec().same_geometry(spec) {
        return Err(Error::Mismatch(format!(
            "cannot merge {}x{}x{} with {}x{}x{}",
            spec.height, spec.width, spec.channels, wspec.height, wspec.width, wspec.channels
        )));
    }
    let heat: Vec<f64> = heatmap
        .data()
        .iter()
        .zip(warped.warped_heatmap.data())
        .map(|(a, b)| a.max(*b))
        .collect();
    let heatmap = Heatmap::from_vec(*heatmap.spec(), heat)?;
    let features = match mode {
        MergeMode::Blend { beta } => {
            let data = features
                .data()
                .iter()
                .zip(warped.warped_features.data())
                .map(|(a, b)| (1.0 - beta) * a + beta * b)
                .collect();
            FeatureMap::from_vec(*spec, data)?
        }
        MergeMode::Concat => {
            let c = spec.channels;
            let mut data = Vec::with_capacity(features.data().len() * 2);
            for (a, b) in features
                .data()
                .chunks_exact(c)
                .zip(warped.warped_features.data().chunks_exact(c))
            {
                data.extend_from_slice(a);
                data.extend_from_slice(b);
            }
            FeatureMap::from_vec(spec.with_channels(2 * c), data)?
        }
    };
    Ok(FusedFrame {
        index,
        features,
        heatmap,
        provenance: vec![index],
    })
}

pub fn merge(current: &SimFrame, warped: &WarpedState, mode: MergeMode) -> Result<FusedFrame> {
    merge_maps(
        current.index,
        &current.heatmap,
        &current.features,
        warped,
        mode,
    )
}

/// Per-step bookkeeping for the fusion report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub frame: usize,
    /// Serialized size of the bank consumed by this step (0 for frame 0).
    pub bank_bytes: usize,
    /// Size of one dense feature map.
    pub dense_bytes: usize,
    pub samples_retained: usize,
    pub samples_dropped: usize,
    /// Share of bank samples whose true displacement left the window.
    pub clamp_fraction: f64,
    pub sample_ms: f64,
    pub align_ms: f64,
    pub warp_ms: f64,
    pub merge_ms: f64,
}

/// Streaming fusion: feed frames in order with [`FusionPipeline::step`].
pub struct FusionPipeline<'a> {
    sampling: SamplingConfig,
    geonet: &'a GeoNetParams,
    mode: MergeMode,
    assign_radius: f64,
    previous: Option<Previous>,
}

struct Previous {
    fused: FusedFrame,
    truth: Vec<ObjectState>,
    pose: Pose2,
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl<'a> FusionPipeline<'a> {
    /// Validates the wiring between sampling, network and merge mode.
    pub fn new(
        sampling: &SamplingConfig,
        geonet: &'a GeoNetParams,
        fusion: &FusionConfig,
        assign_radius: f64,
        channels: usize,
    ) -> Result<Self> {
        fusion.validate()?;
        if fusion.mode == MergeMode::Concat {
            return Err(Error::config(
                "fusion.mode",
                "concat doubles the channel count and cannot feed the next step; use blend",
            ));
        }
        geonet.check_wiring(sampling.max_patch_cells() * channels, geonet.window)?;
        Ok(FusionPipeline {
            sampling: sampling.clone(),
            geonet,
            mode: fusion.mode,
            assign_radius,
            previous: None,
        })
    }

    pub fn step(&mut self, frame: &SimFrame) -> Result<(FusedFrame, StepReport)> {
        let spec = *frame.spec();
        let mut report = StepReport {
            frame: frame.index,
            bank_bytes: 0,
            dense_bytes: frame.features.byte_size(),
            samples_retained: 0,
            samples_dropped: 0,
            clamp_fraction: 0.0,
            sample_ms: 0.0,
            align_ms: 0.0,
            warp_ms: 0.0,
            merge_ms: 0.0,
        };
        let fused = match self.previous.take() {
            None => FusedFrame::passthrough(frame),
            Some(prev) => {
                if prev.fused.features.spec() != &spec {
                    return Err(Error::Mismatch(format!(
                        "frame {} grid differs from frame {}",
                        frame.index, prev.fused.index
                    )));
                }
                let t = Instant::now();
                let set = sample_maps(
                    &prev.fused.heatmap,
                    &prev.fused.features,
                    &prev.truth,
                    &self.sampling,
                    prev.fused.index,
                    prev.pose,
                );
                let bank = SparseBank::new(set, self.geonet);
                report.sample_ms = millis(t);
                report.bank_bytes = bank.byte_size;
                report.clamp_fraction = clamp_fraction(
                    &bank.set,
                    &prev.truth,
                    frame.frame_gap,
                    self.geonet,
                    self.assign_radius,
                );

                let t = Instant::now();
                let (aligned, dropped) = ego_align(&bank, &prev.pose, &frame.ego_pose);
                report.align_ms = millis(t);
                report.samples_dropped = dropped;
                report.samples_retained = aligned.set.len();

                let t = Instant::now();
                let warped = warp(&aligned);
                report.warp_ms = millis(t);

                let t = Instant::now();
                let mut fused = merge(frame, &warped, self.mode)?;
                report.merge_ms = millis(t);
                fused.provenance = prev.fused.provenance;
                fused.provenance.push(frame.index);
                fused
            }
        };
        self.previous = Some(Previous {
            fused: fused.clone(),
            truth: frame.truth.clone(),
            pose: frame.ego_pose,
        });
        Ok((fused, report))
    }
}

fn clamp_fraction(
    set: &SignificantSet,
    truth: &[ObjectState],
    tau: f64,
    geonet: &GeoNetParams,
    radius: f64,
) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let clamped = set
        .samples
        .iter()
        .filter(|s| make_label(s.location, truth, &set.spec, tau, geonet.window, radius).clamped)
        .count();
    clamped as f64 / set.len() as f64
}

/// Fused frames and per-step reports for a whole sequence.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub fused: Vec<FusedFrame>,
    pub reports: Vec<StepReport>,
}

/// Fuses a sequence by induction: frame 0 passes through, every later frame
/// is merged with the warped bank of the previous fused frame.
pub fn run_sequence(
    frames: &[SimFrame],
    sampling: &SamplingConfig,
    geonet: &GeoNetParams,
    fusion: &FusionConfig,
    assign_radius: f64,
) -> Result<SequenceRun> {
    let first = frames
        .first()
        .ok_or_else(|| Error::config("frames", "need at least one frame"))?;
    let mut pipeline = FusionPipeline::new(
        sampling,
        geonet,
        fusion,
        assign_radius,
        first.spec().channels,
    )?;
    let mut fused = Vec::with_capacity(frames.len());
    let mut reports = Vec::with_capacity(frames.len());
    for f in frames {
        let (out, rep) = pipeline.step(f)?;
        fused.push(out);
        reports.push(rep);
    }
    Ok(SequenceRun { fused, reports })
}

#[cfg(test)]
mod tests;
