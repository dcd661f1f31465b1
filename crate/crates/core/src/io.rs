//! File formats: weight checkpoints, descriptor files, record containers,
//! and the Netpbm/PLY/pose/intrinsics files of a scene directory.
//!
//! All native containers are little-endian and start with a four-byte magic
//! followed by a `u32` version.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::datagen::{CameraIntrinsics, CorrespondenceRecord, PointCloud, Pose, RgbdFrame, Scene};
use crate::descnet::{DualAutoEncoder, ImagePatch, NetworkConfig, PointPatch};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::raster::{ColorImage, DepthMap};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"LCDW";
pub const DESCRIPTORS_MAGIC: &[u8; 4] = b"LCDD";
pub const RECORDS_MAGIC: &[u8; 4] = b"LCDC";
pub const FORMAT_VERSION: u32 = 1;

/// Little-endian byte sink.
#[derive(Default)]
pub struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn header(magic: &[u8; 4]) -> Self {
        let mut e = Self::default();
        e.bytes(magic);
        e.u32(FORMAT_VERSION);
        e
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(4 * v.len());
        v.iter().for_each(|&x| self.f32(x));
    }

    /// Length-prefixed UTF-8.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

/// Little-endian byte source over an in-memory file.
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    /// Checks magic and version.
    pub fn open(data: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        let mut d = Self { data, pos: 0, what };
        if d.take(4)? != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let v = d.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("{what}: unsupported version {v}")));
        }
        Ok(d)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.what, self.pos
            )));
        };
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: length overflow", self.what)))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid UTF-8 string", self.what)))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Trained model plus the training epoch it was taken at.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DualAutoEncoder<f32>,
    pub epoch: u64,
}

/// Layout: magic, version, seed `u64`, epoch `u64`, network config JSON,
/// parameter records `(name, ndim, dims, f32 values)`, then batchnorm
/// records `(name, channels, batches, mean, var)`.
pub fn encode_checkpoint(model: &DualAutoEncoder<f32>, epoch: u64) -> Result<Vec<u8>> {
    let mut e = Encoder::header(WEIGHTS_MAGIC);
    e.u64(model.params.seed());
    e.u64(epoch);
    e.str(&serde_json::to_string(&model.config)?);
    let params: Vec<_> = model.params.params().collect();
    e.u32(params.len() as u32);
    for (name, p) in params {
        e.str(name);
        e.u32(p.value.shape().len() as u32);
        for &d in p.value.shape() {
            e.u32(d as u32);
        }
        e.f32s(p.value.data());
    }
    let stats: Vec<_> = model.params.all_stats().collect();
    e.u32(stats.len() as u32);
    for (name, s) in stats {
        e.str(name);
        e.u32(s.mean.len() as u32);
        e.u64(s.batches);
        e.f32s(s.mean.data());
        e.f32s(s.var.data());
    }
    Ok(e.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut d = Decoder::open(bytes, WEIGHTS_MAGIC, "checkpoint")?;
    let seed = d.u64()?;
    let epoch = d.u64()?;
    let config: NetworkConfig = serde_json::from_str(&d.str()?)?;
    let mut store = ParamStore::<f32>::new(seed);
    for _ in 0..d.u32()? {
        let name = d.str()?;
        let ndim = d.u32()? as usize;
        let shape = (0..ndim).map(|_| Ok(d.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let t = Tensor::new(&shape, d.f32s(n)?)?;
        t.ensure_finite(&name)?;
        store.insert(&name, t);
    }
    for _ in 0..d.u32()? {
        let name = d.str()?;
        let c = d.u32()? as usize;
        store.init_stats(&name, c);
        let s = store.stats_mut(&name)?;
        s.batches = d.u64()?;
        s.mean = Tensor::new(&[c], d.f32s(c)?)?;
        s.var = Tensor::new(&[c], d.f32s(c)?)?;
    }
    d.finish()?;
    let model = DualAutoEncoder::from_parts(config, store)?;
    Ok(Checkpoint { model, epoch })
}

pub fn save_checkpoint(path: &Path, model: &DualAutoEncoder<f32>, epoch: u64) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, epoch)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Descriptor files

/// Descriptors with optional per-row metadata of fixed width (keypoint
/// coordinates, for example).
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFile {
    pub dim: usize,
    pub values: Vec<f32>,
    pub metadata: Option<(usize, Vec<f32>)>,
}

impl DescriptorFile {
    pub fn new(dim: usize, values: Vec<f32>, metadata: Option<(usize, Vec<f32>)>) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::shape("descriptor file", format!("{} values for D = {dim}", values.len())));
        }
        if let Some((w, m)) = &metadata {
            if m.len() != w * (values.len() / dim) {
                return Err(Error::shape("descriptor metadata", format!("{} values, width {w}", m.len())));
            }
        }
        Ok(Self { dim, values, metadata })
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Layout: magic, version, D `u32`, count `u64`, count·D f32, metadata
    /// width `u32` (0 when absent), count·width f32.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::header(DESCRIPTORS_MAGIC);
        e.u32(self.dim as u32);
        e.u64(self.count() as u64);
        e.f32s(&self.values);
        match &self.metadata {
            None => e.u32(0),
            Some((w, m)) => {
                e.u32(*w as u32);
                e.f32s(m);
            }
        }
        e.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, DESCRIPTORS_MAGIC, "descriptor file")?;
        let dim = d.u32()? as usize;
        let count = d.u64()? as usize;
        let values = d.f32s(count.saturating_mul(dim))?;
        let w = d.u32()? as usize;
        let metadata = if w == 0 { None } else { Some((w, d.f32s(count * w)?)) };
        d.finish()?;
        Self::new(dim, values, metadata)
    }
}

// ---------------------------------------------------------------------------
// Record containers

/// Layout: magic, version, count `u64`, patch size `u32`, point count `u32`,
/// scene name table, then fixed-size records of HWC `u8` color,
/// `N × 6` f32 points and metadata (scene index, frame, point id, center,
/// radius, pixel).
pub fn encode_records(records: &[CorrespondenceRecord]) -> Result<Vec<u8>> {
    let first = records.first().ok_or_else(|| Error::Empty("record container".into()))?;
    let (s, n) = (first.image.size(), first.points.len());
    let mut scenes: Vec<&str> = records.iter().map(|r| r.scene.as_str()).collect();
    scenes.sort_unstable();
    scenes.dedup();
    let mut e = Encoder::header(RECORDS_MAGIC);
    e.u64(records.len() as u64);
    e.u32(s as u32);
    e.u32(n as u32);
    e.u32(scenes.len() as u32);
    scenes.iter().for_each(|name| e.str(name));
    for r in records {
        if r.image.size() != s || r.points.len() != n {
            return Err(Error::shape("record container", "records differ in patch size or point count"));
        }
        for y in 0..s {
            for x in 0..s {
                for c in r.image.pixel(x, y) {
                    e.u8((c * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        for p in r.points.points() {
            e.f32s(p);
        }
        e.u32(scenes.binary_search(&r.scene.as_str()).expect("scene listed") as u32);
        e.u32(r.frame as u32);
        e.u32(r.point_id as u32);
        r.center.iter().for_each(|&v| e.f64(v));
        e.f64(r.radius);
        r.pixel.iter().for_each(|&v| e.f64(v));
    }
    Ok(e.buf)
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<CorrespondenceRecord>> {
    let mut d = Decoder::open(bytes, RECORDS_MAGIC, "record container")?;
    let count = d.u64()? as usize;
    let s = d.u32()? as usize;
    let n = d.u32()? as usize;
    let scenes = (0..d.u32()?).map(|_| d.str()).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let color = d.take(s * s * 3)?;
        let image = ImagePatch::from_fn(s, |x, y| {
            let i = 3 * (y * s + x);
            [0, 1, 2].map(|c| color[i + c] as f32 / 255.0)
        })?;
        let flat = d.f32s(n * 6)?;
        let points = PointPatch::new(flat.chunks_exact(6).map(|c| c.try_into().expect("6 values")).collect())?;
        let scene = scenes
            .get(d.u32()? as usize)
            .ok_or_else(|| Error::Format("record container: scene index out of range".into()))?
            .clone();
        let frame = d.u32()? as usize;
        let point_id = d.u32()? as usize;
        let center = [d.f64()?, d.f64()?, d.f64()?];
        let radius = d.f64()?;
        let pixel = [d.f64()?, d.f64()?];
        out.push(CorrespondenceRecord {
            image,
            points,
            scene,
            frame,
            point_id,
            center,
            radius,
            pixel,
        });
    }
    d.finish()?;
    Ok(out)
}

pub fn save_records(path: &Path, records: &[CorrespondenceRecord]) -> Result<()> {
    write_atomic(path, &encode_records(records)?)
}

pub fn load_records(path: &Path) -> Result<Vec<CorrespondenceRecord>> {
    decode_records(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Netpbm

fn netpbm_header(bytes: &[u8], magic: &str, what: &str) -> Result<(usize, usize, usize, usize)> {
    // magic, width, height, maxval separated by whitespace, comments allowed
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format(format!("{what}: truncated header")));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("{what}: expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("{what}: bad header field {s:?}")))
    };
    // exactly one whitespace byte ends the header
    Ok((num(&fields[1])?, num(&fields[2])?, num(&fields[3])?, i + 1))
}

pub fn encode_ppm(img: &ColorImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_rgb8());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ColorImage> {
    let (w, h, max, start) = netpbm_header(bytes, "P6", "PPM")?;
    if max != 255 {
        return Err(Error::Format(format!("PPM: only maxval 255 is supported, got {max}")));
    }
    let body = bytes.get(start..start + w * h * 3).ok_or_else(|| Error::Format("PPM: truncated pixels".into()))?;
    ColorImage::from_rgb8(w, h, body)
}

/// 16-bit binary PGM in millimeters (big-endian samples, as Netpbm requires).
pub fn encode_pgm16(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", depth.width(), depth.height()).into_bytes();
    for v in depth.to_millimeters() {
        out.extend(v.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<DepthMap> {
    let (w, h, max, start) = netpbm_header(bytes, "P5", "PGM")?;
    if max != 65535 {
        return Err(Error::Format(format!("PGM: depth maps need maxval 65535, got {max}")));
    }
    let body = bytes.get(start..start + w * h * 2).ok_or_else(|| Error::Format("PGM: truncated pixels".into()))?;
    let mm: Vec<u16> = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    DepthMap::from_millimeters(w, h, &mm)
}

// ---------------------------------------------------------------------------
// Pose text, PLY

/// Four lines of four whitespace-separated numbers.
pub fn format_pose(pose: &Pose) -> String {
    pose.to_matrix4()
        .iter()
        .map(|r| r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

pub fn parse_pose(text: &str) -> Result<Pose> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("pose: bad number {t:?}"))))
        .collect::<Result<_>>()?;
    if v.len() != 16 {
        return Err(Error::Format(format!("pose: expected 16 numbers, found {}", v.len())));
    }
    let m: [[f64; 4]; 4] = std::array::from_fn(|i| std::array::from_fn(|j| v[4 * i + j]));
    Pose::from_matrix4(&m)
}

/// ASCII PLY with double coordinates and `u8` colors.
pub fn write_ply(w: &mut impl Write, cloud: &PointCloud) -> Result<()> {
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let [r, g, b] = c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        writeln!(w, "{:e} {:e} {:e} {r} {g} {b}", p.x, p.y, p.z)?;
    }
    Ok(())
}

/// Reads ASCII PLY whose vertex element starts with `x y z red green blue`.
pub fn read_ply(r: impl Read) -> Result<PointCloud> {
    let mut lines = BufReader::new(r).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Format("PLY: unexpected end of file".into()))?
            .map_err(Error::from)
    };
    if next()?.trim() != "ply" {
        return Err(Error::Format("PLY: missing magic".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let line = next()?;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::Format(format!("PLY: only ascii is supported, got {fmt}")))
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::Format("PLY: bad vertex count".into()))?)
            }
            ["property", _, name] if count.is_some() => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::Format("PLY: no vertex element".into()))?;
    if props.len() < 6 || props[..6] != ["x", "y", "z", "red", "green", "blue"] {
        return Err(Error::Format(format!("PLY: expected x y z red green blue, found {props:?}")));
    }
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for i in 0..count {
        let line = next()?;
        let v: Vec<f64> = line
            .split_whitespace()
            .take(6)
            .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("PLY: bad value {t:?} in vertex {i}"))))
            .collect::<Result<_>>()?;
        if v.len() < 6 {
            return Err(Error::Format(format!("PLY: vertex {i} has {} values", v.len())));
        }
        points.push(Point3::new(v[0], v[1], v[2]));
        colors.push([v[3], v[4], v[5]].map(|c| (c / 255.0).clamp(0.0, 1.0) as f32));
    }
    PointCloud::new(points, colors)
}

// ---------------------------------------------------------------------------
// Scene directories

/// Scene directory layout: `intrinsics.json`, `cloud.ply`, and per frame
/// `color/NNNNNN.ppm`, `depth/NNNNNN.pgm`, `pose/NNNNNN.txt`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneInfo {
    name: String,
    frames: usize,
}

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    for sub in ["color", "depth", "pose"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let k = scene
        .frames
        .first()
        .ok_or_else(|| Error::Empty(format!("scene {} has no frames", scene.name)))?
        .intrinsics;
    write_atomic(&dir.join("intrinsics.json"), serde_json::to_string_pretty(&k)?.as_bytes())?;
    let info = SceneInfo {
        name: scene.name.clone(),
        frames: scene.frames.len(),
    };
    write_atomic(&dir.join("scene.json"), serde_json::to_string_pretty(&info)?.as_bytes())?;
    for f in &scene.frames {
        let stem = format!("{:06}", f.index);
        write_atomic(&dir.join("color").join(format!("{stem}.ppm")), &encode_ppm(&f.color))?;
        write_atomic(&dir.join("depth").join(format!("{stem}.pgm")), &encode_pgm16(&f.depth))?;
        write_atomic(&dir.join("pose").join(format!("{stem}.txt")), format_pose(&f.pose).as_bytes())?;
    }
    let mut ply = Vec::new();
    write_ply(&mut ply, &scene.cloud)?;
    write_atomic(&dir.join("cloud.ply"), &ply)
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let k: CameraIntrinsics = serde_json::from_slice(&fs::read(dir.join("intrinsics.json"))?)?;
    k.validate()?;
    let name = match fs::read(dir.join("scene.json")) {
        Ok(b) => serde_json::from_slice::<SceneInfo>(&b)?.name,
        Err(_) => dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into()),
    };
    let mut stems: Vec<String> = fs::read_dir(dir.join("color"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension()? != "ppm" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    stems.sort();
    let mut frames = Vec::with_capacity(stems.len());
    for stem in &stems {
        let index = stem
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("frame file name {stem:?} is not a number")))?;
        let color = decode_ppm(&fs::read(dir.join("color").join(format!("{stem}.ppm")))?)?;
        let depth = decode_pgm16(&fs::read(dir.join("depth").join(format!("{stem}.pgm")))?)?;
        let pose = parse_pose(&fs::read_to_string(dir.join("pose").join(format!("{stem}.txt")))?)?;
        frames.push(RgbdFrame::new(index, color, depth, k, pose)?);
    }
    let cloud = read_ply(fs::File::open(dir.join("cloud.ply"))?)?;
    Ok(Scene { name, frames, cloud })
}

/// Line-delimited JSON appender.
pub struct JsonLines<W: Write> {
    out: BufWriter<W>,
}

impl<W: Write> JsonLines<W> {
    pub fn new(w: W) -> Self {
        Self { out: BufWriter::new(w) }
    }

    pub fn push<S: Serialize>(&mut self, v: &S) -> Result<()> {
        serde_json::to_writer(&mut self.out, v)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
