//! Run configuration: one JSON document with every default materialized.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fuse::FusionConfig;
use crate::geonet::GeoNetConfig;
use crate::grid::WindowShape;
use crate::sample::SamplingConfig;
use crate::sim::{velocity_lattice, SimConfig};

/// Version stamped into every output echo.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Square grid sides to sweep.
    pub grids: Vec<usize>,
    /// Sequence lengths to sweep.
    pub frames: Vec<usize>,
    /// Timed repeats per point; the median is reported.
    pub repeats: usize,
    pub svg: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            grids: vec![128, 256, 512],
            frames: vec![2, 5, 10],
            repeats: 5,
            svg: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grids.is_empty() || self.grids.iter().any(|&g| g < 8) {
            return Err(Error::config(
                "bench.grids",
                "need at least one grid side >= 8",
            ));
        }
        if self.frames.is_empty() || self.frames.iter().any(|&f| f < 1) {
            return Err(Error::config(
                "bench.frames",
                "need at least one length >= 1",
            ));
        }
        if self.repeats < 5 {
            return Err(Error::config(
                "bench.repeats",
                "medians need at least 5 repeats",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub sampling: SamplingConfig,
    pub geonet: GeoNetConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sim: SimConfig::default(),
            sampling: SamplingConfig::default(),
            geonet: GeoNetConfig::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            output_dir: "out".into(),
        }
    }
}

impl RunConfig {
    /// Parses without validating. Unknown keys and type errors are config
    /// errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.sampling.validate()?;
        self.geonet.validate()?;
        self.fusion.validate()?;
        self.eval.validate()?;
        self.bench.validate()
    }

    /// Points every seed at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self.geonet.init_seed = seed;
        self.geonet.train.seed = seed;
        self
    }

    /// Input width of the network for this config.
    pub fn geonet_input(&self) -> usize {
        self.sampling.max_patch_cells() * self.sim.spec.channels
    }

    /// The materialized config plus format version.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "format_version": FORMAT_VERSION,
            "config": self,
        })
    }

    /// Non-fatal cross-field problems.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let reach = self.sim.max_speed * self.sim.frame_gap / self.sim.spec.cell_size;
        let w = self.geonet.window;
        let half = w.half_width().min(w.half_height()) as f64;
        if reach > half {
            out.push(format!(
                "sim.max_speed * sim.frame_gap / cell_size = {reach:.3} cells exceeds the displacement window half-size {half}; predicted clamp fraction {:.3}",
                predicted_clamp_fraction(&self.sim, w)
            ));
        }
        out
    }
}

/// Share of simulator velocities whose per-frame step falls outside `window`.
pub fn predicted_clamp_fraction(sim: &SimConfig, window: WindowShape) -> f64 {
    let lattice = velocity_lattice(sim);
    if lattice.is_empty() {
        return 0.0;
    }
    let hw = window.half_width() as i64;
    let hh = window.half_height() as i64;
    let out = lattice
        .iter()
        .filter(|&&(x, y)| x.abs() > hw || y.abs() > hh)
        .count();
    out as f64 / lattice.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.sampling.alpha, 0.1);
        assert_eq!(c.sampling.top_k, 200);
        assert_eq!(c.geonet.window, WindowShape::square(7));
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default().with_seed(9);
        let v = c.echo();
        assert_eq!(v["format_version"], 1);
        let back: RunConfig = serde_json::from_value(v["config"].clone()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_alpha_names_field() {
        let c = RunConfig::from_json(r#"{"sampling": {"alpha": 1.5}}"#).unwrap();
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "sampling.alpha"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_config_error() {
        assert!(matches!(
            RunConfig::from_json(r#"{"sim": {"speed": 1}}"#),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn fast_objects_warn() {
        let mut c = RunConfig::default();
        assert!(c.warnings().is_empty());
        c.sim.max_speed = 9.0;
        c.sim.frame_gap = 0.5;
        let w = c.warnings();
        assert_eq!(w.len(), 1);
        let f = predicted_clamp_fraction(&c.sim, c.geonet.window);
        assert!(f > 0.0 && f < 1.0);
    }

    #[test]
    fn clamp_fraction_counts_lattice() {
        // Reach 2 cells: 13 lattice points, 4 of them at distance 2 on an axis.
        let s = SimConfig {
            max_speed: 2.0,
            frame_gap: 0.5,
            ..SimConfig::default()
        };
        assert_eq!(velocity_lattice(&s).len(), 13);
        let f = predicted_clamp_fraction(&s, WindowShape::square(3));
        assert!((f - 4.0 / 13.0).abs() < 1e-12);
    }
}
