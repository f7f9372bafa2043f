//! Readers and writers for every on-disk artifact in the pipeline.
//!
//! All binary formats fix their endianness explicitly, so parsing is
//! platform-independent and every reader/writer pair round-trips
//! byte-exactly:
//!
//! - `LFRM` — lidar frames: magic `LFRM`, version `u16 = 1` LE, flags `u16`
//!   LE (bit 0 = has labels), reserved `u16 = 0`, timestamp `u64` LE
//!   nanoseconds, point count `u32` LE, then per point `x, y, z, intensity`
//!   as `f32` LE, then `count` labels as `u16` LE when flagged.
//! - `FMAP` — teacher feature maps: magic `FMAP`, version `u16 = 1` LE,
//!   `H, W, C` as `u32` LE, then `H*W*C` `f32` LE values in `[h][w][c]`
//!   order.
//! - `PLBL` — per-point label files: magic `PLBL`, version `u16 = 1` LE,
//!   count `u32` LE, then `count` labels as `u16` LE.
//! - PPM (`P6`, 8-bit) images and PGM (`P5`) masks; masks use
//!   maxval 65535 with big-endian two-byte samples per the PGM standard.
//!
//! Image timestamps live in the filename stem (`<ts_ns>.ppm`); lidar
//! timestamps live in the frame header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// Sentinel class id excluded from losses and metrics.
pub const IGNORE_ID: u16 = 65535;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// One lidar return: sensor-frame position in meters plus unitless intensity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// A timestamped point set with optional per-point class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarFrame {
    pub timestamp_ns: u64,
    pub points: Vec<Point>,
    pub labels: Option<Vec<u16>>,
}

impl LidarFrame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the type invariants: positive timestamp, finite samples,
    /// one label per point when labels are present.
    pub fn validate(&self) -> Result<()> {
        if self.timestamp_ns == 0 {
            return Err(Error::Validation("lidar frame timestamp must be > 0".into()));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()) {
                return Err(Error::Validation(format!("non-finite sample in point {i}")));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::Validation(format!(
                    "label count {} does not match point count {}",
                    labels.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }
}

/// 8-bit raster image, row-major, 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    pub timestamp_ns: u64,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageFrame {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Validation(format!("image channels must be 1 or 3, got {}", self.channels)));
        }
        if self.pixels.len() != self.width * self.height * self.channels {
            return Err(Error::Validation(format!(
                "pixel count {} does not match {}x{}x{}",
                self.pixels.len(),
                self.width,
                self.height,
                self.channels
            )));
        }
        Ok(())
    }
}

/// Per-pixel 16-bit class ids, row-major; 65535 is the ignore sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMask {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u16>,
}

impl SemanticMask {
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.ids[y * self.width + x]
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.width * self.height {
            return Err(Error::Validation(format!(
                "mask sample count {} does not match {}x{}",
                self.ids.len(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }
}

/// Dense H x W x C grid of 32-bit teacher descriptors, layout `[h][w][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    /// The C-vector at pixel (x, y).
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let base = (y * self.width + x) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 1 || self.width < 1 || self.channels < 1 {
            return Err(Error::Validation("feature map dimensions must be >= 1".into()));
        }
        if self.data.len() != self.height * self.width * self.channels {
            return Err(Error::Validation(format!(
                "feature data length {} does not match {}x{}x{}",
                self.data.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite feature value at index {i}")));
        }
        Ok(())
    }
}

/// Brown-Conrady distortion coefficients; all zero means pure pinhole.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

/// Pinhole intrinsics in pixels plus the image size they refer to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub distortion: Distortion,
}

/// Camera intrinsics plus the rigid lidar-to-camera extrinsics of one rig.
#[derive(Clone, Debug, PartialEq)]
pub struct RigConfig {
    pub intrinsics: Intrinsics,
    /// Rigid transform mapping lidar-frame points into the camera frame.
    pub extrinsics: RigidTransform,
    /// Camera-frame depth below which points are discarded, meters.
    pub min_depth: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigConfigRaw {
    intrinsics: Intrinsics,
    extrinsics: ExtrinsicsRaw,
    min_depth: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtrinsicsRaw {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl RigConfig {
    pub fn validate(&self) -> Result<()> {
        let i = &self.intrinsics;
        if !(i.fx > 0.0 && i.fy > 0.0) {
            return Err(Error::Validation(format!("focal lengths must be positive, got fx={} fy={}", i.fx, i.fy)));
        }
        if i.width < 1 || i.height < 1 {
            return Err(Error::Validation("image dimensions must be >= 1".into()));
        }
        if !(self.min_depth > 0.0) {
            return Err(Error::Validation(format!("min_depth must be > 0, got {}", self.min_depth)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Eq-style pooling of the distillation loss across a batch: one mean over
/// all valid points in the batch, or a mean of per-frame means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    PerBatch,
    PerFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub embed_dim: usize,
    pub depth: usize,
    pub grid_cells: usize,
    pub cell_size_m: f64,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection { embed_dim: 16, depth: 8, grid_cells: 64, cell_size_m: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection { epochs: 25, lr: 0.002, weight_decay: 0.03, batch: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { epochs: 20, lr: 0.001, weight_decay: 0.003, batch: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub layer_decay: f64,
    pub weight_decay: f64,
    pub batch: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection { epochs: 20, lr: 0.002, layer_decay: 0.99, weight_decay: 0.03, batch: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncSection {
    pub max_dt_ns: i64,
}

impl Default for SyncSection {
    fn default() -> Self {
        SyncSection { max_dt_ns: 50_000_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSize {
    pub w: usize,
    pub h: usize,
}

impl Default for TeacherSize {
    fn default() -> Self {
        TeacherSize { w: 448, h: 224 }
    }
}

/// Top-level run configuration; every field has a default so a config file
/// only needs to state what it overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Target taxonomy size K.
    pub classes: u16,
    /// Fixed ignore sentinel; must be 65535.
    pub ignore_id: u16,
    /// Teacher descriptor channel count C.
    pub teacher_dim: usize,
    pub student: StudentSection,
    pub distill: DistillSection,
    pub probe: ProbeSection,
    pub finetune: FinetuneSection,
    pub sync: SyncSection,
    /// Resolution the 2D teacher consumed; feature maps are emitted at this
    /// size and interpolated back to camera resolution during distillation.
    pub teacher_size: TeacherSize,
    pub eq1_pooling: Pooling,
    /// Optional target class names for reports.
    pub class_names: Option<Vec<String>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            classes: 4,
            ignore_id: IGNORE_ID,
            teacher_dim: 16,
            student: StudentSection::default(),
            distill: DistillSection::default(),
            probe: ProbeSection::default(),
            finetune: FinetuneSection::default(),
            sync: SyncSection::default(),
            teacher_size: TeacherSize::default(),
            eq1_pooling: Pooling::PerBatch,
            class_names: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ignore_id != IGNORE_ID {
            return Err(Error::Config(format!("ignore_id is fixed at {IGNORE_ID}, got {}", self.ignore_id)));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        if self.teacher_dim == 0 {
            return Err(Error::Config("teacher_dim must be >= 1".into()));
        }
        let s = &self.student;
        if s.embed_dim == 0 || s.depth == 0 {
            return Err(Error::Config("student embed_dim and depth must be >= 1".into()));
        }
        if s.grid_cells < 2 {
            return Err(Error::Config("student grid_cells must be >= 2".into()));
        }
        if !(s.cell_size_m > 0.0) {
            return Err(Error::Config("student cell_size_m must be > 0".into()));
        }
        for (stage, lr, batch) in [
            ("distill", self.distill.lr, self.distill.batch),
            ("probe", self.probe.lr, self.probe.batch),
            ("finetune", self.finetune.lr, self.finetune.batch),
        ] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{stage} lr must be > 0")));
            }
            if batch == 0 {
                return Err(Error::Config(format!("{stage} batch must be >= 1")));
            }
        }
        if !(self.finetune.layer_decay > 0.0 && self.finetune.layer_decay <= 1.0) {
            return Err(Error::Config("finetune layer_decay must be in (0, 1]".into()));
        }
        if self.sync.max_dt_ns <= 0 {
            return Err(Error::Config("sync max_dt_ns must be > 0".into()));
        }
        if self.teacher_size.w == 0 || self.teacher_size.h == 0 {
            return Err(Error::Config("teacher_size must be >= 1 in both dimensions".into()));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.classes as usize {
                return Err(Error::Config(format!(
                    "class_names has {} entries but classes = {}",
                    names.len(),
                    self.classes
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Binary helpers
// ---------------------------------------------------------------------------

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::truncated(
                self.path,
                format!("expected {n} bytes for {what}, {} remain", self.buf.len() - self.pos),
            ));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64_le(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32_le(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(self.path, format!("{} trailing bytes after payload", self.remaining())));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// LFRM lidar frames
// ---------------------------------------------------------------------------

const LFRM_MAGIC: &[u8; 4] = b"LFRM";
const LFRM_VERSION: u16 = 1;
const LFRM_FLAG_LABELS: u16 = 1;

pub fn read_lidar_frame(path: &Path) -> Result<LidarFrame> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    let magic = r.take(4, "magic")?;
    if magic != LFRM_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected \"LFRM\"")));
    }
    let version = r.u16_le("version")?;
    if version != LFRM_VERSION {
        return Err(Error::format(path, format!("unsupported LFRM version {version}")));
    }
    let flags = r.u16_le("flags")?;
    if flags & !LFRM_FLAG_LABELS != 0 {
        return Err(Error::format(path, format!("unknown flag bits {flags:#06x}")));
    }
    let _reserved = r.u16_le("reserved")?;
    let timestamp_ns = r.u64_le("timestamp")?;
    let count = r.u32_le("point count")? as usize;
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let x = r.f32_le("point x")?;
        let y = r.f32_le("point y")?;
        let z = r.f32_le("point z")?;
        let intensity = r.f32_le("point intensity")?;
        let _ = i;
        points.push(Point { x, y, z, intensity });
    }
    let labels = if flags & LFRM_FLAG_LABELS != 0 {
        if r.remaining() == 0 && count > 0 {
            return Err(Error::Validation(format!(
                "{}: label flag set but label block missing",
                path.display()
            )));
        }
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            labels.push(r.u16_le("label")?);
        }
        Some(labels)
    } else {
        None
    };
    r.expect_end()?;
    let frame = LidarFrame { timestamp_ns, points, labels };
    frame.validate()?;
    Ok(frame)
}

pub fn write_lidar_frame(frame: &LidarFrame, path: &Path) -> Result<()> {
    frame.validate()?;
    let has_labels = frame.labels.is_some();
    let mut buf = Vec::with_capacity(22 + frame.points.len() * 16);
    buf.extend_from_slice(LFRM_MAGIC);
    buf.extend_from_slice(&LFRM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(if has_labels { LFRM_FLAG_LABELS } else { 0u16 }).to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&frame.timestamp_ns.to_le_bytes());
    buf.extend_from_slice(&(frame.points.len() as u32).to_le_bytes());
    for p in &frame.points {
        buf.extend_from_slice(&p.x.to_le_bytes());
        buf.extend_from_slice(&p.y.to_le_bytes());
        buf.extend_from_slice(&p.z.to_le_bytes());
        buf.extend_from_slice(&p.intensity.to_le_bytes());
    }
    if let Some(labels) = &frame.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    write_file(path, &buf)
}

// ---------------------------------------------------------------------------
// PPM / PGM images and masks
// ---------------------------------------------------------------------------

/// Parses a PNM header: magic, width, height, maxval, and the offset of the
/// first data byte. Whitespace and `#` comments are handled per the spec.
fn parse_pnm_header(buf: &[u8], path: &Path) -> Result<([u8; 2], usize, usize, u32, usize)> {
    if buf.len() < 2 {
        return Err(Error::truncated(path, "file shorter than magic".into()));
    }
    let magic = [buf[0], buf[1]];
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::format(path, "malformed PNM header field"));
        }
        let text = std::str::from_utf8(&buf[start..pos]).unwrap();
        *field = text.parse::<u64>().map_err(|_| Error::format(path, "PNM header field out of range"))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing whitespace after maxval"));
    }
    pos += 1;
    Ok((magic, fields[0] as usize, fields[1] as usize, fields[2] as u32, pos))
}

fn timestamp_from_stem(path: &Path) -> Result<u64> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(path, "filename has no stem"))?;
    stem.parse::<u64>()
        .map_err(|_| Error::format(path, format!("filename stem \"{stem}\" is not a nanosecond timestamp")))
}

/// Reads an 8-bit PPM (P6) or PGM (P5) image; the timestamp comes from the
/// filename stem.
pub fn read_image(path: &Path) -> Result<ImageFrame> {
    let buf = read_file(path)?;
    let (magic, width, height, maxval, offset) = parse_pnm_header(&buf, path)?;
    let channels = match &magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(Error::format(path, format!("unsupported magic {:?}", String::from_utf8_lossy(&magic)))),
    };
    if maxval != 255 {
        return Err(Error::format(path, format!("expected 8-bit image (maxval 255), got {maxval}")));
    }
    let expected = width * height * channels;
    let data = &buf[offset..];
    if data.len() != expected {
        return Err(Error::truncated(path, format!("expected {expected} samples, found {}", data.len())));
    }
    let frame = ImageFrame {
        timestamp_ns: timestamp_from_stem(path)?,
        width,
        height,
        channels,
        pixels: data.to_vec(),
    };
    frame.validate()?;
    Ok(frame)
}

pub fn write_image(image: &ImageFrame, path: &Path) -> Result<()> {
    image.validate()?;
    let magic = if image.channels == 3 { "P6" } else { "P5" };
    let mut buf = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend_from_slice(&image.pixels);
    write_file(path, &buf)
}

/// Reads a semantic mask: PGM (P5) with maxval 65535, big-endian samples.
pub fn read_mask(path: &Path) -> Result<SemanticMask> {
    let buf = read_file(path)?;
    let (magic, width, height, maxval, offset) = parse_pnm_header(&buf, path)?;
    if &magic != b"P5" {
        return Err(Error::format(path, format!("mask must be P5, got {:?}", String::from_utf8_lossy(&magic))));
    }
    if maxval != 65535 {
        return Err(Error::format(path, format!("mask maxval must be 65535, got {maxval}")));
    }
    let data = &buf[offset..];
    let expected = width * height * 2;
    if data.len() != expected {
        return Err(Error::truncated(path, format!("expected {expected} raster bytes, found {}", data.len())));
    }
    let ids = data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    let mask = SemanticMask { width, height, ids };
    mask.validate()?;
    Ok(mask)
}

pub fn write_mask(mask: &SemanticMask, path: &Path) -> Result<()> {
    mask.validate()?;
    let mut buf = format!("P5\n{} {}\n65535\n", mask.width, mask.height).into_bytes();
    for id in &mask.ids {
        buf.extend_from_slice(&id.to_be_bytes());
    }
    write_file(path, &buf)
}

// ---------------------------------------------------------------------------
// FMAP feature maps
// ---------------------------------------------------------------------------

const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const FMAP_VERSION: u16 = 1;

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    let magic = r.take(4, "magic")?;
    if magic != FMAP_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected \"FMAP\"")));
    }
    let version = r.u16_le("version")?;
    if version != FMAP_VERSION {
        return Err(Error::format(path, format!("unsupported FMAP version {version}")));
    }
    let height = r.u32_le("height")? as usize;
    let width = r.u32_le("width")? as usize;
    let channels = r.u32_le("channels")? as usize;
    let n = height
        .checked_mul(width)
        .and_then(|hw| hw.checked_mul(channels))
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32_le("feature value")?);
    }
    r.expect_end()?;
    let fm = FeatureMap { height, width, channels, data };
    fm.validate()?;
    Ok(fm)
}

pub fn write_feature_map(fm: &FeatureMap, path: &Path) -> Result<()> {
    fm.validate()?;
    let mut buf = Vec::with_capacity(18 + fm.data.len() * 4);
    buf.extend_from_slice(FMAP_MAGIC);
    buf.extend_from_slice(&FMAP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(fm.height as u32).to_le_bytes());
    buf.extend_from_slice(&(fm.width as u32).to_le_bytes());
    buf.extend_from_slice(&(fm.channels as u32).to_le_bytes());
    for v in &fm.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &buf)
}

// ---------------------------------------------------------------------------
// PLBL per-point label files
// ---------------------------------------------------------------------------

const PLBL_MAGIC: &[u8; 4] = b"PLBL";
const PLBL_VERSION: u16 = 1;

pub fn read_point_labels(path: &Path) -> Result<Vec<u16>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    let magic = r.take(4, "magic")?;
    if magic != PLBL_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected \"PLBL\"")));
    }
    let version = r.u16_le("version")?;
    if version != PLBL_VERSION {
        return Err(Error::format(path, format!("unsupported PLBL version {version}")));
    }
    let count = r.u32_le("label count")? as usize;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(r.u16_le("label")?);
    }
    r.expect_end()?;
    Ok(labels)
}

pub fn write_point_labels(labels: &[u16], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(10 + labels.len() * 2);
    buf.extend_from_slice(PLBL_MAGIC);
    buf.extend_from_slice(&PLBL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    write_file(path, &buf)
}

// ---------------------------------------------------------------------------
// JSON configs
// ---------------------------------------------------------------------------

pub fn load_rig_config(path: &Path) -> Result<RigConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RigConfigRaw =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    // Hand-written configs may only be orthonormal to ~1e-6; accept those and
    // snap to machine precision before building the transform.
    let rotation = orthonormalized(raw.extrinsics.rotation, 1e-6)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let extrinsics = RigidTransform::new(rotation, raw.extrinsics.translation)?;
    let rig = RigConfig { intrinsics: raw.intrinsics, extrinsics, min_depth: raw.min_depth };
    rig.validate()?;
    Ok(rig)
}

pub fn save_rig_config(rig: &RigConfig, path: &Path) -> Result<()> {
    rig.validate()?;
    let raw = RigConfigRaw {
        intrinsics: rig.intrinsics,
        extrinsics: ExtrinsicsRaw {
            rotation: *rig.extrinsics.rotation(),
            translation: *rig.extrinsics.translation(),
        },
        min_depth: rig.min_depth,
    };
    let text = serde_json::to_string_pretty(&raw).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(path, text.as_bytes())
}

/// Validates within `tol`, then Gram-Schmidt re-orthonormalizes so the
/// result satisfies the stricter transform invariant.
fn orthonormalized(m: [[f64; 3]; 3], tol: f64) -> std::result::Result<[[f64; 3]; 3], String> {
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let col = |j: usize| [m[0][j], m[1][j], m[2][j]];
    for j in 0..3 {
        let n = dot(col(j), col(j)).sqrt();
        if (n - 1.0).abs() > tol {
            return Err(format!("rotation column {j} has norm {n}, not orthonormal"));
        }
        for k in (j + 1)..3 {
            if dot(col(j), col(k)).abs() > tol {
                return Err(format!("rotation columns {j},{k} are not orthogonal"));
            }
        }
    }
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if (det - 1.0).abs() > tol {
        return Err(format!("rotation determinant {det}, expected +1"));
    }
    // Gram-Schmidt on columns.
    let mut c0 = col(0);
    let n0 = dot(c0, c0).sqrt();
    for v in &mut c0 {
        *v /= n0;
    }
    let mut c1 = col(1);
    let d01 = dot(c0, c1);
    for i in 0..3 {
        c1[i] -= d01 * c0[i];
    }
    let n1 = dot(c1, c1).sqrt();
    for v in &mut c1 {
        *v /= n1;
    }
    let c2 = [
        c0[1] * c1[2] - c0[2] * c1[1],
        c0[2] * c1[0] - c0[0] * c1[2],
        c0[0] * c1[1] - c0[1] * c1[0],
    ];
    Ok([
        [c0[0], c1[0], c2[0]],
        [c0[1], c1[1], c2[1]],
        [c0[2], c1[2], c2[2]],
    ])
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_run_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    cfg.validate()?;
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
