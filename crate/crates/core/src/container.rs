//! Versioned binary container shared by frame sequences, significant sets
//! and network parameters.
//!
//! All integers and floats are little-endian. A file is the 8-byte magic
//! `SUITSIM1` (the trailing digit is the format version) followed by one or
//! more sections:
//!
//! ```text
//! tag      [u8; 4]     FRMS | OMGS | GEON
//! length   u64         payload bytes
//! payload  length bytes
//! ```
//!
//! `FRMS` (frame sequence):
//!
//! ```text
//! height u32, width u32, cell_size f64, channels u32,
//! heatmap_sigma f64, frame_gap f64, frame_count u32,
//! per frame: index u32, pose tx f64, ty f64, theta f64,
//!            heatmap H*W f64 (row-major),
//!            features H*W*C f64 (row-major, channels innermost)
//! ```
//!
//! Truth objects travel in a JSON manifest next to the binary file.
//!
//! `OMGS` (significant set):
//!
//! ```text
//! source_frame u32, pose tx f64, ty f64, theta f64,
//! height u32, width u32, cell_size f64, channels u32,
//! relaxation kind u8 (0 rectangle, 1 circular, 2 square), a u32, b u32,
//! sample_count u32,
//! per sample: x i32, y i32, score f64, extent_x u32, extent_y u32,
//!             cell_count u32, values cell_count*C f64
//! ```
//!
//! Relaxation parameters: rectangle `(max.height, max.width)`, circular
//! `(radius, 0)`, square `(height, width)`. Patch cell offsets are not
//! stored; they follow from the relaxation and the extent.
//!
//! `GEON` (network parameters):
//!
//! ```text
//! input u32, hidden u32, outputs u32, window_h u32, window_w u32,
//! layer1 weight (hidden*input), bias (hidden),
//! layer2 weight (hidden*hidden), bias (hidden),
//! layer3 weight (outputs*hidden), bias (outputs)    all f64
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geonet::{Dense, GeoNetParams};
use crate::grid::{FeatureMap, GridCoord, GridSpec, Heatmap, Pose2, WindowShape};
use crate::sample::{Patch, Relaxation, Sample, SignificantSet};
use crate::sim::{ObjectState, SimFrame};

pub const MAGIC: &[u8; 8] = b"SUITSIM1";
pub const TAG_FRAMES: &[u8; 4] = b"FRMS";
pub const TAG_SET: &[u8; 4] = b"OMGS";
pub const TAG_PARAMS: &[u8; 4] = b"GEON";

/// Magic plus one section header.
pub const HEADER_LEN: usize = 8 + 4 + 8;

const F64: usize = 8;
const U32: usize = 4;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * F64);
        for v in vs {
            self.f64(*v);
        }
    }
    fn pose(&mut self, p: &Pose2) {
        self.f64(p.translation[0]);
        self.f64(p.translation[1]);
        self.f64(p.rotation);
    }
    fn spec(&mut self, s: &GridSpec) {
        self.u32(s.height as u32);
        self.u32(s.width as u32);
        self.f64(s.cell_size);
        self.u32(s.channels as u32);
    }
}

fn wrap(tag: &[u8; 4], payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(F64)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(F64)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
    fn pose(&mut self) -> Result<Pose2> {
        Ok(Pose2 {
            translation: [self.f64()?, self.f64()?],
            rotation: self.f64()?,
        })
    }
    fn spec(&mut self) -> Result<GridSpec> {
        let s = GridSpec {
            height: self.u32()? as usize,
            width: self.u32()? as usize,
            cell_size: self.f64()?,
            channels: self.u32()? as usize,
        };
        s.validate("container.spec")
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(s)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Splits a single-section container, checking magic and tag.
fn unwrap<'a>(bytes: &'a [u8], tag: &[u8; 4]) -> Result<Reader<'a>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic, expected SUITSIM1".into()));
    }
    let got = r.take(4)?;
    if got != tag {
        return Err(Error::Format(format!(
            "expected section {}, found {}",
            String::from_utf8_lossy(tag),
            String::from_utf8_lossy(got)
        )));
    }
    let len = r.u64()? as usize;
    let payload = r.take(len)?;
    r.finish()?;
    Ok(Reader {
        buf: payload,
        pos: 0,
    })
}

/// Encodes frames. All frames must share one grid, sigma and frame gap.
pub fn encode_frames(frames: &[SimFrame]) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Format("cannot encode an empty sequence".into()))?;
    let spec = *first.spec();
    let mut w = Writer::default();
    w.spec(&spec);
    w.f64(first.heatmap_sigma);
    w.f64(first.frame_gap);
    w.u32(frames.len() as u32);
    for f in frames {
        if f.spec() != &spec
            || f.heatmap_sigma != first.heatmap_sigma
            || f.frame_gap != first.frame_gap
        {
            return Err(Error::Mismatch(format!(
                "frame {} differs from frame 0 in grid or timing",
                f.index
            )));
        }
        w.u32(f.index as u32);
        w.pose(&f.ego_pose);
        w.f64s(f.heatmap.data());
        w.f64s(f.features.data());
    }
    Ok(wrap(TAG_FRAMES, w.buf))
}

/// Truth objects and provenance stored next to a frame container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub format: String,
    pub version: u32,
    /// Echo of the configuration that produced the frames.
    pub config: serde_json::Value,
    pub frames: Vec<FrameTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub index: usize,
    pub ego_pose: Pose2,
    pub objects: Vec<ObjectState>,
}

pub const MANIFEST_FORMAT: &str = "suit-truth";
pub const MANIFEST_VERSION: u32 = 1;

pub fn manifest(frames: &[SimFrame], config: serde_json::Value) -> TruthManifest {
    TruthManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config,
        frames: frames
            .iter()
            .map(|f| FrameTruth {
                index: f.index,
                ego_pose: f.ego_pose,
                objects: f.truth.clone(),
            })
            .collect(),
    }
}

pub fn decode_frames(bytes: &[u8], truth: &TruthManifest) -> Result<Vec<SimFrame>> {
    if truth.format != MANIFEST_FORMAT || truth.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest {} v{}",
            truth.format, truth.version
        )));
    }
    let mut r = unwrap(bytes, TAG_FRAMES)?;
    let spec = r.spec()?;
    let sigma = r.f64()?;
    let gap = r.f64()?;
    let count = r.u32()? as usize;
    if count != truth.frames.len() {
        return Err(Error::Mismatch(format!(
            "container holds {count} frames, manifest {}",
            truth.frames.len()
        )));
    }
    let mut frames = Vec::with_capacity(count);
    for t in &truth.frames {
        let index = r.u32()? as usize;
        let ego_pose = r.pose()?;
        if index != t.index || ego_pose != t.ego_pose {
            return Err(Error::Mismatch(format!(
                "frame {index} disagrees with its manifest entry"
            )));
        }
        let heatmap = Heatmap::from_vec(spec, r.f64s(spec.cells())?)?;
        let features = FeatureMap::from_vec(spec, r.f64s(spec.cells() * spec.channels)?)?;
        frames.push(SimFrame {
            index,
            heatmap,
            features,
            ego_pose,
            truth: t.objects.clone(),
            heatmap_sigma: sigma,
            frame_gap: gap,
        });
    }
    r.finish()?;
    Ok(frames)
}

fn relaxation_code(r: &Relaxation) -> (u8, u32, u32) {
    match *r {
        Relaxation::Rectangle { max } => (0, max.height as u32, max.width as u32),
        Relaxation::Circular { radius } => (1, radius as u32, 0),
        Relaxation::Square(s) => (2, s.height as u32, s.width as u32),
    }
}

fn relaxation_from_code(kind: u8, a: u32, b: u32) -> Result<Relaxation> {
    let shape = |h: u32, w: u32| {
        WindowShape::new(h as usize, w as usize).map_err(|e| Error::Format(e.to_string()))
    };
    Ok(match kind {
        0 => Relaxation::Rectangle { max: shape(a, b)? },
        1 => Relaxation::Circular { radius: a as usize },
        2 => Relaxation::Square(shape(a, b)?),
        k => return Err(Error::Format(format!("unknown relaxation kind {k}"))),
    })
}

/// Fixed `OMGS` payload bytes before the first sample.
const SET_FIXED: usize = U32 + 3 * F64 + (3 * U32 + F64) + (1 + 2 * U32) + U32;
/// Per-sample bytes besides the patch values.
pub const SAMPLE_OVERHEAD: usize = 2 * U32 + F64 + 3 * U32;

/// Exact encoded length of a set without encoding it.
pub fn set_encoded_len(set: &SignificantSet) -> usize {
    HEADER_LEN
        + SET_FIXED
        + set
            .samples
            .iter()
            .map(|s| SAMPLE_OVERHEAD + s.patch.values.len() * F64)
            .sum::<usize>()
}

/// Largest possible encoded set for the given capacity.
pub fn set_encoded_len_bound(top_k: usize, patch_cells: usize, channels: usize) -> usize {
    HEADER_LEN + SET_FIXED + top_k * (SAMPLE_OVERHEAD + patch_cells * channels * F64)
}

pub fn encode_set(set: &SignificantSet) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(set.source_frame as u32);
    w.pose(&set.source_pose);
    w.spec(&set.spec);
    let (kind, a, b) = relaxation_code(&set.relaxation);
    w.u8(kind);
    w.u32(a);
    w.u32(b);
    w.u32(set.samples.len() as u32);
    for s in &set.samples {
        w.i32(s.location.x);
        w.i32(s.location.y);
        w.f64(s.score);
        w.u32(s.extent_hint[0] as u32);
        w.u32(s.extent_hint[1] as u32);
        w.u32(s.patch.cells() as u32);
        w.f64s(&s.patch.values);
    }
    wrap(TAG_SET, w.buf)
}

pub fn decode_set(bytes: &[u8]) -> Result<SignificantSet> {
    let mut r = unwrap(bytes, TAG_SET)?;
    let source_frame = r.u32()? as usize;
    let source_pose = r.pose()?;
    let spec = r.spec()?;
    let (kind, a, b) = (r.u8()?, r.u32()?, r.u32()?);
    let relaxation = relaxation_from_code(kind, a, b)?;
    let n = r.u32()? as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let location = GridCoord::new(r.i32()?, r.i32()?);
        let score = r.f64()?;
        let extent_hint = [r.u32()? as usize, r.u32()? as usize];
        let cells = r.u32()? as usize;
        let offsets = relaxation.offsets(extent_hint);
        if offsets.len() != cells {
            return Err(Error::Format(format!(
                "sample at ({}, {}) stores {cells} cells, relaxation gives {}",
                location.x,
                location.y,
                offsets.len()
            )));
        }
        let values = r.f64s(cells * spec.channels)?;
        samples.push(Sample {
            location,
            score,
            patch: Patch {
                offsets,
                values,
                channels: spec.channels,
            },
            extent_hint,
        });
    }
    r.finish()?;
    Ok(SignificantSet {
        samples,
        source_frame,
        source_pose,
        spec,
        relaxation,
    })
}

pub fn encode_params(p: &GeoNetParams) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(p.input_dim() as u32);
    w.u32(p.hidden() as u32);
    w.u32(p.layers[2].outputs as u32);
    w.u32(p.window.height as u32);
    w.u32(p.window.width as u32);
    for l in &p.layers {
        w.f64s(&l.weight);
        w.f64s(&l.bias);
    }
    wrap(TAG_PARAMS, w.buf)
}

pub fn decode_params(bytes: &[u8]) -> Result<GeoNetParams> {
    let mut r = unwrap(bytes, TAG_PARAMS)?;
    let input = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let outputs = r.u32()? as usize;
    let window = WindowShape::new(r.u32()? as usize, r.u32()? as usize)
        .map_err(|e| Error::Format(e.to_string()))?;
    if outputs != window.cells() {
        return Err(Error::Format(format!(
            "{outputs} outputs for a {}x{} window",
            window.height, window.width
        )));
    }
    let mut layer = |inputs: usize, outputs: usize| -> Result<Dense> {
        Ok(Dense {
            inputs,
            outputs,
            weight: r.f64s(inputs * outputs)?,
            bias: r.f64s(outputs)?,
        })
    };
    let layers = [
        layer(input, hidden)?,
        layer(hidden, hidden)?,
        layer(hidden, outputs)?,
    ];
    r.finish()?;
    let p = GeoNetParams { layers, window };
    if !p.is_finite() {
        return Err(Error::Format("non-finite network parameter".into()));
    }
    Ok(p)
}
