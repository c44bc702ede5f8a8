//! Deterministic synthetic BEV world.
//!
//! Stands in for a single-frame detector: every frame carries a center
//! heatmap, a dense feature map, the ego pose and the ground-truth object
//! states. Objects move with constant velocity in the world frame. The world
//! frame coincides with the ego frame of frame 0, whose origin is the metric
//! center of the grid.
//!
//! Velocities are drawn on the cell lattice: every object moves a whole
//! number of cells per frame, so displacement labels are exact.
//!
//! Feature layout: each object writes a unit-norm signature over its extent.
//! Channels 0 and 1 of the un-normalized signature hold the per-frame
//! displacement in cells scaled by [`MOTION_GAIN`]; the remaining channels hold
//! a random unit identity direction. The motion cue plays the role that
//! multi-sweep accumulation plays in real LiDAR features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, GridCoord, GridSpec, Heatmap, Pose2};

/// Scale between cells-per-frame displacement and the motion channels.
pub const MOTION_GAIN: f64 = 0.5;

/// Gaussian splats are evaluated out to this many sigmas (value < 1e-12).
const SPLAT_SIGMAS: f64 = 7.5;

/// Cells kept clear between an object's starting cell and the grid border.
const BORDER_MARGIN: i64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: u32,
    /// World-frame position, meters.
    pub position: [f64; 2],
    /// Object velocity (ego motion excluded), meters/second, in ego axes.
    pub velocity: [f64; 2],
    /// Position in this frame's ego coordinates, meters.
    pub ego_position: [f64; 2],
    /// Footprint in cells (x, y).
    pub extent: [usize; 2],
    pub signature: Vec<f64>,
    /// False when the object was dropped from this frame's observation.
    pub observed: bool,
}

impl ObjectState {
    /// Continuous cell coordinates of the object center.
    pub fn cell(&self, spec: &GridSpec) -> [f64; 2] {
        spec.metric_to_cell(self.ego_position)
    }

    pub fn center_cell(&self, spec: &GridSpec) -> GridCoord {
        spec.nearest_cell(self.ego_position)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub spec: GridSpec,
    pub object_count: usize,
    pub frame_count: usize,
    /// Seconds between frames.
    pub frame_gap: f64,
    /// Meters/second.
    pub max_speed: f64,
    pub dropout_prob: f64,
    /// Splat standard deviation, cells.
    pub heatmap_sigma: f64,
    /// Observation noise on object centers, cells (std-dev; the offset is
    /// capped at one sigma so the center cell stays a >= 0.5 peak).
    pub position_noise: f64,
    /// Meters/second along +x.
    pub ego_speed: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            spec: GridSpec {
                height: 128,
                width: 128,
                cell_size: 0.5,
                channels: 16,
            },
            object_count: 8,
            frame_count: 10,
            frame_gap: 0.5,
            max_speed: 3.0,
            dropout_prob: 0.0,
            heatmap_sigma: 1.0,
            position_noise: 0.0,
            ego_speed: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate("sim.spec")?;
        if self.frame_count < 1 {
            return Err(Error::config("sim.frame_count", "must be >= 1"));
        }
        if !(self.frame_gap.is_finite() && self.frame_gap > 0.0) {
            return Err(Error::config("sim.frame_gap", "must be > 0"));
        }
        if !(self.max_speed.is_finite() && self.max_speed >= 0.0) {
            return Err(Error::config("sim.max_speed", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::config("sim.dropout_prob", "must lie in [0, 1]"));
        }
        if !(self.heatmap_sigma.is_finite() && self.heatmap_sigma > 0.0) {
            return Err(Error::config("sim.heatmap_sigma", "must be > 0"));
        }
        if !(self.position_noise.is_finite() && self.position_noise >= 0.0) {
            return Err(Error::config("sim.position_noise", "must be >= 0"));
        }
        if !self.ego_speed.is_finite() {
            return Err(Error::config("sim.ego_speed", "must be finite"));
        }
        let limit = self.spec.height.min(self.spec.width) as f64 * self.spec.cell_size / 4.0;
        if self.max_speed * self.frame_gap >= limit {
            return Err(Error::config(
                "sim.max_speed",
                format!(
                    "max_speed * frame_gap = {} m must stay below a quarter of the grid ({limit} m)",
                    self.max_speed * self.frame_gap
                ),
            ));
        }
        Ok(())
    }

    /// Largest per-frame displacement in whole cells.
    pub fn max_step_cells(&self) -> i64 {
        (self.max_speed * self.frame_gap / self.spec.cell_size + 1e-9).floor() as i64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimFrame {
    pub index: usize,
    pub heatmap: Heatmap,
    pub features: FeatureMap,
    /// World -> ego transform.
    pub ego_pose: Pose2,
    pub truth: Vec<ObjectState>,
    /// Splat width used to draw the heatmap.
    pub heatmap_sigma: f64,
    /// Seconds since the previous frame.
    pub frame_gap: f64,
}

impl SimFrame {
    pub fn spec(&self) -> &GridSpec {
        self.features.spec()
    }

    /// Continuous cell coordinates of the truth objects whose center lies on
    /// the grid, in truth-list order.
    pub fn truth_cells(&self) -> Vec<[f64; 2]> {
        let spec = *self.spec();
        self.truth
            .iter()
            .filter(|o| spec.contains(o.center_cell(&spec)))
            .map(|o| o.cell(&spec))
            .collect()
    }
}

/// Noise-free heatmap from every truth object, dropout ignored.
pub fn truth_heatmap(frame: &SimFrame) -> Heatmap {
    let spec = *frame.heatmap.spec();
    let mut map = Heatmap::zeros(spec);
    for o in &frame.truth {
        splat(&mut map, o.cell(&spec), frame.heatmap_sigma);
    }
    map
}

/// Per-cell max of `exp(-d^2 / 2 sigma^2)` around a continuous cell center.
pub fn splat(map: &mut Heatmap, center: [f64; 2], sigma: f64) {
    let spec = *map.spec();
    let reach = (SPLAT_SIGMAS * sigma).ceil();
    let x0 = ((center[0] - reach).floor().max(0.0)) as i64;
    let y0 = ((center[1] - reach).floor().max(0.0)) as i64;
    let x1 = ((center[0] + reach).ceil()).min(spec.width as f64 - 1.0) as i64;
    let y1 = ((center[1] + reach).ceil()).min(spec.height as f64 - 1.0) as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let data = map.data_mut();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - center[0];
            let dy = y as f64 - center[1];
            let v = (-(dx * dx + dy * dy) * inv).exp();
            let i = y as usize * spec.width + x as usize;
            if v > data[i] {
                data[i] = v;
            }
        }
    }
}

/// Writes `signature` over the `extent` footprint centered at `center`.
fn paint(features: &mut FeatureMap, center: GridCoord, extent: [usize; 2], signature: &[f64]) {
    let spec = *features.spec();
    let left = center.x - (extent[0] as i32 - 1) / 2;
    let top = center.y - (extent[1] as i32 - 1) / 2;
    for y in top..top + extent[1] as i32 {
        for x in left..left + extent[0] as i32 {
            let c = GridCoord::new(x, y);
            if spec.contains(c) {
                features.at_mut(c).copy_from_slice(signature);
            }
        }
    }
}

/// Unit signature encoding a per-frame displacement (cells) plus identity.
pub fn make_signature(step_cells: [f64; 2], identity: &[f64], channels: usize) -> Vec<f64> {
    let mut raw = vec![0.0; channels];
    raw[0] = MOTION_GAIN * step_cells[0];
    if channels > 1 {
        raw[1] = MOTION_GAIN * step_cells[1];
    }
    for (dst, src) in raw.iter_mut().skip(2).zip(identity) {
        *dst = *src;
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        raw[0] = 1.0;
        return raw;
    }
    raw.iter().map(|v| v / norm).collect()
}

/// Frame generator. Yields frames one at a time so long or large runs need
/// not hold the whole sequence in memory.
pub struct Simulator {
    config: SimConfig,
    rng: ChaCha8Rng,
    objects: Vec<ObjectState>,
    ego_offset: f64,
    next_index: usize,
}

impl Simulator {
    /// Random scene drawn from `config.seed`.
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let objects = spawn_objects(&config, &mut rng);
        Ok(Simulator {
            config,
            rng,
            objects,
            ego_offset: 0.0,
            next_index: 0,
        })
    }

    /// Scripted scene. Object positions are world (= frame-0 ego) meters;
    /// `ego_position`, `observed` and `signature` are recomputed per frame,
    /// except that a non-empty signature of the right length is kept.
    pub fn with_objects(config: SimConfig, mut objects: Vec<ObjectState>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.spec.channels;
        for o in &mut objects {
            if o.extent[0] < 1 || o.extent[1] < 1 {
                return Err(Error::config(
                    "objects.extent",
                    "extent components must be >= 1",
                ));
            }
            if o.signature.len() != c {
                let step = [
                    o.velocity[0] * config.frame_gap / config.spec.cell_size,
                    o.velocity[1] * config.frame_gap / config.spec.cell_size,
                ];
                let identity = random_unit(&mut rng, c.saturating_sub(2));
                o.signature = make_signature(step, &identity, c);
            }
        }
        objects.sort_by_key(|o| o.id);
        Ok(Simulator {
            config,
            rng,
            objects,
            ego_offset: 0.0,
            next_index: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    fn frame(&mut self) -> SimFrame {
        let cfg = &self.config;
        let spec = cfg.spec;
        let ego_pose = Pose2::new([-self.ego_offset, 0.0], 0.0);
        let mut heatmap = Heatmap::zeros(spec);
        let mut features = FeatureMap::zeros(spec);
        let mut truth = Vec::with_capacity(self.objects.len());
        let sigma = cfg.heatmap_sigma;
        for o in &self.objects {
            // All three draws happen for every object so the stream never depends
            // on earlier outcomes.
            let drop_draw: f64 = self.rng.gen();
            let nx: f64 = StandardNormal.sample(&mut self.rng);
            let ny: f64 = StandardNormal.sample(&mut self.rng);
            let observed = drop_draw >= cfg.dropout_prob;

            let ego_position = ego_pose.apply(o.position);
            let true_cell = spec.metric_to_cell(ego_position);
            let mut noise = [nx * cfg.position_noise, ny * cfg.position_noise];
            let mag = (noise[0] * noise[0] + noise[1] * noise[1]).sqrt();
            if mag > sigma {
                noise = [noise[0] * sigma / mag, noise[1] * sigma / mag];
            }
            let seen = [true_cell[0] + noise[0], true_cell[1] + noise[1]];
            if observed {
                splat(&mut heatmap, seen, sigma);
                let c = GridCoord::new(seen[0].round() as i32, seen[1].round() as i32);
                paint(&mut features, c, o.extent, &o.signature);
            }
            truth.push(ObjectState {
                ego_position,
                observed,
                ..o.clone()
            });
        }
        SimFrame {
            index: self.next_index,
            heatmap,
            features,
            ego_pose,
            truth,
            heatmap_sigma: sigma,
            frame_gap: cfg.frame_gap,
        }
    }

    fn advance(&mut self) {
        let tau = self.config.frame_gap;
        for o in &mut self.objects {
            o.position[0] += o.velocity[0] * tau;
            o.position[1] += o.velocity[1] * tau;
        }
        self.ego_offset += self.config.ego_speed * tau;
        self.next_index += 1;
    }
}

impl Iterator for Simulator {
    type Item = SimFrame;

    fn next(&mut self) -> Option<SimFrame> {
        if self.next_index >= self.config.frame_count {
            return None;
        }
        let f = self.frame();
        self.advance();
        Some(f)
    }
}

/// Runs the whole sequence.
pub fn simulate(config: &SimConfig) -> Result<Vec<SimFrame>> {
    Ok(Simulator::new(config.clone())?.collect())
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Range of starting cells along one axis that keeps the whole trajectory at
/// least `BORDER_MARGIN` cells inside; the full margin range when no such
/// start exists.
fn start_range(size: usize, step: f64, frames: usize) -> (i64, i64) {
    let lo = BORDER_MARGIN.min(size as i64 - 1).max(0);
    let hi = (size as i64 - 1 - BORDER_MARGIN).max(lo);
    let travel = step * frames.saturating_sub(1) as f64;
    let a = lo + (-travel).max(0.0).ceil() as i64;
    let b = hi - travel.max(0.0).ceil() as i64;
    if a <= b {
        (a, b)
    } else {
        (lo, hi)
    }
}

/// Per-frame cell steps an object can be given: lattice points within
/// `max_speed * frame_gap` meters of the origin, row-major.
pub fn velocity_lattice(cfg: &SimConfig) -> Vec<(i64, i64)> {
    let m = cfg.max_step_cells();
    let reach = cfg.max_speed * cfg.frame_gap / cfg.spec.cell_size + 1e-9;
    (-m..=m)
        .flat_map(|y| (-m..=m).map(move |x| (x, y)))
        .filter(|&(x, y)| ((x * x + y * y) as f64).sqrt() <= reach)
        .collect()
}

fn spawn_objects(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<ObjectState> {
    let spec = cfg.spec;
    let lattice = velocity_lattice(cfg);
    let ego_step = cfg.ego_speed * cfg.frame_gap / spec.cell_size;
    let mut taken: Vec<(i64, i64)> = Vec::new();
    let mut objects = Vec::with_capacity(cfg.object_count);
    for id in 0..cfg.object_count {
        let (kx, ky) = lattice[rng.gen_range(0..lattice.len())];
        let (xa, xb) = start_range(spec.width, kx as f64 - ego_step, cfg.frame_count);
        let (ya, yb) = start_range(spec.height, ky as f64, cfg.frame_count);
        let mut cell = (xa, ya);
        for _ in 0..50 {
            cell = (rng.gen_range(xa..=xb), rng.gen_range(ya..=yb));
            if taken
                .iter()
                .all(|t| (t.0 - cell.0).abs().max((t.1 - cell.1).abs()) >= 4)
            {
                break;
            }
        }
        taken.push(cell);
        let extent = [rng.gen_range(1..=3), rng.gen_range(1..=3)];
        let identity = random_unit(rng, spec.channels.saturating_sub(2));
        let signature = make_signature([kx as f64, ky as f64], &identity, spec.channels);
        let position = spec.cell_center(GridCoord::new(cell.0 as i32, cell.1 as i32));
        let velocity = [
            kx as f64 * spec.cell_size / cfg.frame_gap,
            ky as f64 * spec.cell_size / cfg.frame_gap,
        ];
        objects.push(ObjectState {
            id: id as u32,
            position,
            velocity,
            ego_position: position,
            extent,
            signature,
            observed: true,
        });
    }
    objects
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quiet(spec: GridSpec) -> SimConfig {
        SimConfig {
            spec,
            object_count: 0,
            frame_count: 3,
            max_speed: 0.0,
            ..SimConfig::default()
        }
    }

    fn still(id: u32, position: [f64; 2]) -> ObjectState {
        ObjectState {
            id,
            position,
            velocity: [0.0, 0.0],
            ego_position: position,
            extent: [1, 1],
            signature: Vec::new(),
            observed: true,
        }
    }

    #[test]
    fn empty_scene_is_all_zero() {
        let frames = simulate(&quiet(GridSpec::new(16, 16, 0.5, 4).unwrap())).unwrap();
        assert_eq!(frames.len(), 3);
        for f in &frames {
            assert!(f.heatmap.data().iter().all(|&v| v == 0.0));
            assert!(f.features.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn centered_static_object_splat() {
        let spec = GridSpec::new(15, 15, 0.5, 4).unwrap();
        let sim = Simulator::with_objects(quiet(spec), vec![still(0, [0.0, 0.0])]).unwrap();
        let frames: Vec<_> = sim.collect();
        let h = &frames[0].heatmap;
        let c = GridCoord::new(7, 7);
        assert_eq!(h.at(c), 1.0);
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            assert_abs_diff_eq!(h.at(c.offset(dx, dy)), (-0.5f64).exp(), epsilon = 1e-15);
            assert_abs_diff_eq!(h.at(c.offset(dx, dy)), 0.6065, epsilon = 1e-4);
        }
        assert_abs_diff_eq!(h.at(c.offset(1, 1)), (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = SimConfig {
            seed: 7,
            dropout_prob: 0.3,
            position_noise: 0.4,
            ego_speed: 0.7,
            spec: GridSpec::new(48, 40, 0.5, 6).unwrap(),
            ..SimConfig::default()
        };
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate(&SimConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn constant_velocity_law_is_exact() {
        let cfg = SimConfig {
            seed: 3,
            ego_speed: 1.0,
            ..SimConfig::default()
        };
        let frames = simulate(&cfg).unwrap();
        for pair in frames.windows(2) {
            for (a, b) in pair[0].truth.iter().zip(&pair[1].truth) {
                assert_eq!(a.id, b.id);
                assert_eq!(b.position[0], a.position[0] + a.velocity[0] * cfg.frame_gap);
                assert_eq!(b.position[1], a.position[1] + a.velocity[1] * cfg.frame_gap);
            }
        }
    }

    #[test]
    fn ego_moves_along_x() {
        let cfg = SimConfig {
            ego_speed: 2.0,
            object_count: 1,
            ..SimConfig::default()
        };
        let frames = simulate(&cfg).unwrap();
        for (k, f) in frames.iter().enumerate() {
            assert_abs_diff_eq!(
                f.ego_pose.translation[0],
                -(k as f64) * 1.0,
                epsilon = 1e-12
            );
            assert_eq!(f.ego_pose.translation[1], 0.0);
            assert_eq!(f.ego_pose.rotation, 0.0);
        }
    }

    #[test]
    fn observed_objects_peak_at_center() {
        let cfg = SimConfig {
            seed: 11,
            dropout_prob: 0.4,
            position_noise: 2.0,
            ..SimConfig::default()
        };
        for f in simulate(&cfg).unwrap() {
            assert!(f.heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for o in f.truth.iter().filter(|o| o.observed) {
                let c = o.center_cell(f.spec());
                if f.spec().contains(c) {
                    assert!(f.heatmap.at(c) >= 0.5, "frame {} object {}", f.index, o.id);
                }
            }
            for o in &f.truth {
                let n: f64 = o.signature.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert_abs_diff_eq!(n, 1.0, epsilon = 1e-9);
                assert!(o.extent[0] >= 1 && o.extent[1] >= 1);
            }
        }
    }

    #[test]
    fn truth_heatmap_keeps_dropped_objects() {
        let spec = GridSpec::new(21, 21, 0.5, 3).unwrap();
        let cfg = SimConfig {
            dropout_prob: 1.0,
            ..quiet(spec)
        };
        let sim = Simulator::with_objects(cfg, vec![still(0, [0.0, 0.0])]).unwrap();
        let f = sim.into_iter().next().unwrap();
        let c = GridCoord::new(10, 10);
        assert_eq!(f.heatmap.at(c), 0.0);
        assert_eq!(truth_heatmap(&f).at(c), 1.0);
        assert!(!f.truth[0].observed);
    }

    #[test]
    fn adjacent_objects_combine_by_max() {
        let spec = GridSpec::new(21, 21, 0.5, 3).unwrap();
        let objs = vec![still(0, [0.0, 0.0]), still(1, [0.5, 0.0])];
        let f = Simulator::with_objects(quiet(spec), objs)
            .unwrap()
            .next()
            .unwrap();
        let t = truth_heatmap(&f);
        assert_eq!(t.at(GridCoord::new(10, 10)), 1.0);
        assert_eq!(t.at(GridCoord::new(11, 10)), 1.0);
        // (12, 10) is 1 cell from object 1 and 2 cells from object 0.
        assert_abs_diff_eq!(
            t.at(GridCoord::new(12, 10)),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
        assert_eq!(t, f.heatmap);
    }

    #[test]
    fn later_ids_overwrite_features() {
        let spec = GridSpec::new(21, 21, 0.5, 3).unwrap();
        let mut a = still(0, [0.0, 0.0]);
        a.extent = [3, 3];
        a.signature = vec![1.0, 0.0, 0.0];
        let mut b = still(1, [0.5, 0.0]);
        b.signature = vec![0.0, 1.0, 0.0];
        let f = Simulator::with_objects(quiet(spec), vec![b, a])
            .unwrap()
            .next()
            .unwrap();
        assert_eq!(f.features.at(GridCoord::new(11, 10)), &[0.0, 1.0, 0.0]);
        assert_eq!(f.features.at(GridCoord::new(9, 10)), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_fast_objects() {
        let cfg = SimConfig {
            spec: GridSpec::new(16, 16, 1.0, 2).unwrap(),
            max_speed: 8.0,
            frame_gap: 0.5,
            ..SimConfig::default()
        };
        match simulate(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "sim.max_speed"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn lattice_velocities_respect_max_speed() {
        let cfg = SimConfig {
            object_count: 40,
            seed: 5,
            ..SimConfig::default()
        };
        let f = simulate(&cfg).unwrap().remove(0);
        let tau_over_cell = cfg.frame_gap / cfg.spec.cell_size;
        for o in &f.truth {
            let step = [o.velocity[0] * tau_over_cell, o.velocity[1] * tau_over_cell];
            assert_eq!(step[0], step[0].round());
            assert!((step[0].powi(2) + step[1].powi(2)).sqrt() <= 3.0 + 1e-9);
        }
    }
}
