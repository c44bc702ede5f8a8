//! Memory and latency sweep over grid size and sequence length.
//!
//! `sparse_bytes` is the feature capacity of the bank,
//! `top_k * patch_cells * C * 8`, which is what a fixed-size store must
//! reserve and does not depend on how many frames have been fused.
//! `dense_bytes` is the history a dense method would keep, `t * H * W * C * 8`.
//! `ratio` compares the bank with a single dense frame.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::fuse::{run_sequence, SparseBank};
use crate::geonet::GeoNetParams;
use crate::grid::GridSpec;
use crate::sim::{simulate, SimConfig};

pub const BENCH_FILE: &str = "bench.csv";
pub const BENCH_SVG: &str = "bench.svg";

pub const BENCH_HEADER: &str =
    "grid,frames,sparse_bytes,dense_bytes,ratio,warp_ms,sample_ms,channels,top_k,patch_cells,bank_serialized_max,samples_max,align_ms,merge_ms";

/// Columns that hold wall-clock measurements.
pub const TIMING_COLUMNS: [&str; 4] = ["warp_ms", "sample_ms", "align_ms", "merge_ms"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    /// Grid side; the grid is `grid x grid`.
    pub grid: usize,
    pub frames: usize,
    pub sparse_bytes: usize,
    pub dense_bytes: usize,
    pub ratio: f64,
    /// Median over repeats of the mean per-step warp time.
    pub warp_ms: f64,
    pub sample_ms: f64,
    pub channels: usize,
    pub top_k: usize,
    pub patch_cells: usize,
    /// Largest serialized bank seen in the sequence.
    pub bank_serialized_max: usize,
    pub samples_max: usize,
    pub align_ms: f64,
    pub merge_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One sweep point.
pub fn bench_point(cfg: &RunConfig, grid: usize, frames: usize) -> Result<BenchRow> {
    let c = cfg.sim.spec.channels;
    let sim = SimConfig {
        spec: GridSpec {
            height: grid,
            width: grid,
            ..cfg.sim.spec
        },
        frame_count: frames,
        ..cfg.sim.clone()
    };
    let seq = simulate(&sim)?;
    let patch_cells = cfg.sampling.max_patch_cells();
    let params = GeoNetParams::init(
        patch_cells * c,
        cfg.geonet.hidden,
        cfg.geonet.window,
        cfg.geonet.init_seed,
    );

    let mut timings: [Vec<f64>; 4] = Default::default();
    let mut bank_max = 0;
    let mut samples_max = 0;
    for _ in 0..cfg.bench.repeats {
        let run = run_sequence(
            &seq,
            &cfg.sampling,
            &params,
            &cfg.fusion,
            cfg.geonet.assign_radius,
        )?;
        let steps = run.reports.iter().skip(1);
        let n = (run.reports.len() - 1).max(1) as f64;
        let mut sums = [0.0; 4];
        for r in steps {
            sums[0] += r.warp_ms;
            sums[1] += r.sample_ms;
            sums[2] += r.align_ms;
            sums[3] += r.merge_ms;
            bank_max = bank_max.max(r.bank_bytes);
            samples_max = samples_max.max(r.samples_retained + r.samples_dropped);
        }
        for (t, s) in timings.iter_mut().zip(sums) {
            t.push(s / n);
        }
    }
    let [warp, sample, align, merge] = timings.map(median);

    let dense_frame = grid * grid * c * std::mem::size_of::<f64>();
    let sparse = SparseBank::capacity_bytes(cfg.sampling.top_k, patch_cells, c);
    Ok(BenchRow {
        grid,
        frames,
        sparse_bytes: sparse,
        dense_bytes: frames * dense_frame,
        ratio: sparse as f64 / dense_frame as f64,
        warp_ms: warp,
        sample_ms: sample,
        channels: c,
        top_k: cfg.sampling.top_k,
        patch_cells,
        bank_serialized_max: bank_max,
        samples_max,
        align_ms: align,
        merge_ms: merge,
    })
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &g in &cfg.bench.grids {
        for &t in &cfg.bench.frames {
            rows.push(bench_point(cfg, g, t)?);
        }
    }
    let mut w = csv::Writer::from_path(out.join(BENCH_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    if cfg.bench.svg {
        fs::write(out.join(BENCH_SVG), svg_chart(&rows))?;
    }
    fs::write(
        out.join(super::CONFIG_ECHO_FILE),
        serde_json::to_string_pretty(&cfg.echo())? + "\n",
    )?;
    Ok(rows)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Memory against sequence length, one dense and one sparse line per grid,
/// on a log10 byte axis.
pub fn svg_chart(rows: &[BenchRow]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let mut grids: Vec<usize> = rows.iter().map(|r| r.grid).collect();
    grids.dedup();
    let fmax = rows.iter().map(|r| r.frames).max().unwrap_or(1) as f64;
    let fmin = rows.iter().map(|r| r.frames).min().unwrap_or(0) as f64;
    let logs: Vec<f64> = rows
        .iter()
        .flat_map(|r| [r.sparse_bytes as f64, r.dense_bytes as f64])
        .filter(|&b| b > 0.0)
        .map(f64::log10)
        .collect();
    let ymin = logs.iter().cloned().fold(f64::INFINITY, f64::min).floor();
    let ymax = logs
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil();
    let sx = |f: f64| m + (f - fmin) / (fmax - fmin).max(1.0) * (w - 2.0 * m);
    let sy = |b: f64| h - m - (b.max(1.0).log10() - ymin) / (ymax - ymin).max(1.0) * (h - 2.0 * m);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
    s += &format!(
        "<path d=\"M{m} {m} V{} H{}\" stroke=\"black\" fill=\"none\"/>\n",
        h - m,
        w - m
    );
    s += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">frames</text>\n",
        w / 2.0,
        h - 15.0
    );
    s += &format!("<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">bytes (log10)</text>\n", h / 2.0, h / 2.0);
    let mut e = ymin;
    while e <= ymax {
        let y = sy(10f64.powf(e));
        s += &format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">1e{}</text>\n",
            m - 5.0,
            y + 4.0,
            e as i64
        );
        e += 1.0;
    }
    for (gi, g) in grids.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let pts: Vec<&BenchRow> = rows.iter().filter(|r| r.grid == *g).collect();
        for (dense, dash) in [(true, ""), (false, " stroke-dasharray=\"6 4\"")] {
            let d: Vec<String> = pts
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let b = if dense { r.dense_bytes } else { r.sparse_bytes };
                    format!(
                        "{}{:.1} {:.1}",
                        if i == 0 { "M" } else { "L" },
                        sx(r.frames as f64),
                        sy(b as f64)
                    )
                })
                .collect();
            s += &format!(
                "<path d=\"{}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"2\"{dash}/>\n",
                d.join(" ")
            );
        }
        s += &format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{g}x{g} (solid dense, dashed sparse)</text>\n",
            w - m - 230.0,
            m + 16.0 * gi as f64
        );
    }
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(vec![]), 0.0);
    }

    #[test]
    fn header_matches_row_fields() {
        let mut w = csv::Writer::from_writer(Vec::new());
        let row = BenchRow {
            grid: 1,
            frames: 1,
            sparse_bytes: 0,
            dense_bytes: 0,
            ratio: 0.0,
            warp_ms: 0.0,
            sample_ms: 0.0,
            channels: 0,
            top_k: 0,
            patch_cells: 0,
            bank_serialized_max: 0,
            samples_max: 0,
            align_ms: 0.0,
            merge_ms: 0.0,
        };
        w.serialize(&row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), BENCH_HEADER);
    }

    #[test]
    fn small_sweep_has_constant_sparse_bytes() {
        let mut cfg = RunConfig::default();
        cfg.sim.spec.channels = 4;
        cfg.sim.object_count = 3;
        let a = bench_point(&cfg, 32, 2).unwrap();
        let b = bench_point(&cfg, 32, 5).unwrap();
        assert_eq!(a.sparse_bytes, b.sparse_bytes);
        assert_eq!(a.sparse_bytes, 200 * 9 * 4 * 8);
        assert_eq!(b.dense_bytes, 5 * 32 * 32 * 4 * 8);
        assert!(svg_chart(&[a, b]).starts_with("<svg"));
    }
}
