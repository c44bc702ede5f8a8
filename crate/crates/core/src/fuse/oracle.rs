//! Brute-force cascade over the full grid, written as a gather so that it
//! shares no loop structure with the sparse scatter in [`super::warp`].
//!
//! For every destination cell `d` the warped heat is
//! `sum over window offsets δ of p(d - δ) * q_{d-δ}(δ)`, and the feature
//! expectation collects, for every source `r = d - δ - o` whose patch holds
//! offset `o`, the value of the previous features at `r + o = d - δ`.

use crate::error::{Error, Result};
use crate::geonet::TransformDistribution;
use crate::grid::{FeatureMap, GridCoord, Heatmap, WindowShape};
use crate::sample::Relaxation;

use super::WarpedState;

/// Largest grid side the oracle accepts.
pub const ORACLE_MAX_SIDE: usize = 32;

/// Dense reference for the warp. `per_cell_q[i]` is the displacement
/// distribution of source cell `i` (row-major) over `window`; `extent_hint`
/// gives each source cell's extent for rectangle relaxations.
pub fn dense_cascade_oracle(
    heatmap_prev: &Heatmap,
    features_prev: &FeatureMap,
    per_cell_q: &[TransformDistribution],
    window: WindowShape,
    relaxation: &Relaxation,
    extent_hint: impl Fn(GridCoord) -> [usize; 2],
) -> Result<WarpedState> {
    let spec = *features_prev.spec();
    if spec.height > ORACLE_MAX_SIDE || spec.width > ORACLE_MAX_SIDE {
        return Err(Error::OracleTooLarge {
            height: spec.height,
            width: spec.width,
            cap: ORACLE_MAX_SIDE,
        });
    }
    if !heatmap_prev.spec().same_geometry(&spec) {
        return Err(Error::Mismatch(
            "oracle heatmap and features differ in shape".into(),
        ));
    }
    if per_cell_q.len() != spec.cells()
        || per_cell_q.iter().any(|q| q.probs.len() != window.cells())
    {
        return Err(Error::Mismatch(
            "oracle needs one window distribution per cell".into(),
        ));
    }
    let c = spec.channels;
    let offsets_of: Vec<Vec<(i32, i32)>> = (0..spec.cells())
        .map(|i| relaxation.offsets(extent_hint(spec.coord(i))))
        .collect();

    let mut heat = vec![0.0; spec.cells()];
    let mut feat = vec![0.0; spec.cells() * c];
    let mut weight = vec![0.0; spec.cells()];
    let bounding = relaxation.bounding();

    for d_idx in 0..spec.cells() {
        let d = spec.coord(d_idx);
        for (k, (dx, dy)) in window.offsets().enumerate() {
            // Heat lands on the displaced sample center.
            let r = d.offset(-dx, -dy);
            if spec.contains(r) {
                let i = spec.index(r);
                heat[d_idx] += per_cell_q[i].probs[k] * heatmap_prev.at(r);
            }
            // Features land on every displaced patch cell.
            let src = d.offset(-dx, -dy);
            for (ox, oy) in bounding.offsets() {
                let r = src.offset(-ox, -oy);
                if !spec.contains(r) {
                    continue;
                }
                let i = spec.index(r);
                if !offsets_of[i].contains(&(ox, oy)) {
                    continue;
                }
                let w = per_cell_q[i].probs[k] * heatmap_prev.at(r);
                weight[d_idx] += w;
                if spec.contains(src) {
                    for (acc, v) in feat[d_idx * c..(d_idx + 1) * c]
                        .iter_mut()
                        .zip(features_prev.at(src))
                    {
                        *acc += w * v;
                    }
                }
            }
        }
    }
    Ok(WarpedState::finalize(spec, heat, feat, weight))
}
