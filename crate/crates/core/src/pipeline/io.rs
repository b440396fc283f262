//! File codecs: JSON documents for rigs, keypoints, topology, body
//! parameters, model assets, joint limits and timestamps; OBJ meshes; PLY
//! clouds; raw f32 depth rasters with a JSON sidecar; PBM masks; and the
//! run manifest.

use std::collections::BTreeMap;
use std::io::{BufRead, Read};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bodymodel::{BodyParams, JointLimits, ModelAsset, NUM_BETAS, NUM_POSE};
use crate::camgeom::{Camera, CameraId, Intrinsics, Observation2D, Rig, RigidTransform};
use crate::cloudproc::{BinaryMask, DepthImage, PointCloud};
use crate::kpanno::{KeypointFrame2D, KeypointSequence3D, SkeletonTopology};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}", path.display())]
    File { path: PathBuf, source: std::io::Error },
    #[error("malformed {format}: {message}")]
    Malformed { format: &'static str, message: String },
    #[error("invalid {format} content: {message}")]
    Invalid { format: &'static str, message: String },
}

fn malformed(format: &'static str, message: impl ToString) -> IoError {
    IoError::Malformed { format, message: message.to_string() }
}

fn invalid(format: &'static str, message: impl ToString) -> IoError {
    IoError::Invalid { format, message: message.to_string() }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

pub fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

fn parse_json<T: DeserializeOwned>(format: &'static str, text: &str) -> Result<T, IoError> {
    serde_json::from_str(text).map_err(|e| malformed(format, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

// ---- rig ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraDoc {
    id: u32,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major world→camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RigDoc {
    cameras: Vec<CameraDoc>,
}

pub fn rig_to_json(rig: &Rig) -> String {
    let cameras = rig
        .cameras()
        .iter()
        .map(|c| {
            let k = &c.intrinsics;
            let r = c.extrinsics.rotation();
            let t = c.extrinsics.translation();
            CameraDoc {
                id: c.id.0,
                width: k.width,
                height: k.height,
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
                rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
                translation: [t.x, t.y, t.z],
            }
        })
        .collect();
    to_json(&RigDoc { cameras })
}

pub fn rig_from_json(text: &str) -> Result<Rig, IoError> {
    let doc: RigDoc = parse_json("rig", text)?;
    let cams = doc
        .cameras
        .into_iter()
        .map(|c| {
            let k = Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height).map_err(|e| invalid("rig", format!("camera {}: {e}", c.id)))?;
            let e = RigidTransform::new(Matrix3::from_row_slice(&c.rotation), Vector3::from(c.translation))
                .map_err(|e| invalid("rig", format!("camera {}: {e}", c.id)))?;
            Ok(Camera::new(CameraId(c.id), k, e))
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    Rig::new(cams).map_err(|e| invalid("rig", e))
}

// ---- keypoints ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Frame2DDoc {
    views: BTreeMap<u32, Vec<Option<[f64; 3]>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Kp2dDoc {
    fps: f64,
    num_keypoints: usize,
    frames: Vec<Frame2DDoc>,
}

pub fn kp2d_to_json(frames: &[KeypointFrame2D], fps: f64, num_keypoints: usize) -> String {
    let frames = frames
        .iter()
        .map(|f| Frame2DDoc {
            views: f.views().iter().map(|(id, obs)| (id.0, obs.iter().map(|o| o.map(|o| [o.u, o.v, o.confidence])).collect())).collect(),
        })
        .collect();
    to_json(&Kp2dDoc { fps, num_keypoints, frames })
}

/// Frames and their rate.
pub fn kp2d_from_json(text: &str) -> Result<(Vec<KeypointFrame2D>, f64), IoError> {
    let doc: Kp2dDoc = parse_json("2D keypoints", text)?;
    if !(doc.fps > 0.0) {
        return Err(invalid("2D keypoints", "fps must be positive"));
    }
    let frames = doc
        .frames
        .into_iter()
        .enumerate()
        .map(|(t, f)| {
            let views = f
                .views
                .into_iter()
                .map(|(id, obs)| {
                    let obs = obs.into_iter().map(|o| o.map(|[u, v, c]| Observation2D::new(u, v, c)).transpose()).collect::<Result<Vec<_>, _>>();
                    obs.map(|obs| (CameraId(id), obs))
                })
                .collect::<Result<BTreeMap<_, _>, _>>()
                .map_err(|e| invalid("2D keypoints", format!("frame {t}: {e}")))?;
            KeypointFrame2D::new(doc.num_keypoints, views).map_err(|e| invalid("2D keypoints", format!("frame {t}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    Ok((frames, doc.fps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Kp3dDoc {
    fps: f64,
    frames: Vec<Vec<Option<[f64; 3]>>>,
}

pub fn kp3d_to_json(seq: &KeypointSequence3D) -> String {
    let frames = seq.frames.iter().map(|f| f.iter().map(|p| p.map(|p| [p.x, p.y, p.z])).collect()).collect();
    to_json(&Kp3dDoc { fps: seq.frame_rate, frames })
}

pub fn kp3d_from_json(text: &str) -> Result<KeypointSequence3D, IoError> {
    let doc: Kp3dDoc = parse_json("3D keypoints", text)?;
    let frames = doc.frames.into_iter().map(|f| f.into_iter().map(|p| p.map(Vector3::from)).collect()).collect();
    KeypointSequence3D::new(frames, doc.fps).map_err(|e| invalid("3D keypoints", e))
}

pub fn topology_to_json(topo: &SkeletonTopology) -> String {
    to_json(&topo.bones())
}

pub fn topology_from_json(text: &str, num_keypoints: usize) -> Result<SkeletonTopology, IoError> {
    let bones: Vec<(usize, usize)> = parse_json("topology", text)?;
    SkeletonTopology::new(bones, num_keypoints).map_err(|e| invalid("topology", e))
}

// ---- body ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoseDoc {
    theta: Vec<f64>,
    transl: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamsDoc {
    betas: [f64; NUM_BETAS],
    frames: Vec<PoseDoc>,
}

/// Every frame must share one shape vector.
pub fn params_to_json(frames: &[BodyParams]) -> Result<String, IoError> {
    let betas = frames.first().map(|p| p.beta).unwrap_or([0.0; NUM_BETAS]);
    if frames.iter().any(|p| p.beta.iter().zip(&betas).any(|(a, b)| a.to_bits() != b.to_bits())) {
        return Err(invalid("params", "frames disagree on betas"));
    }
    let frames = frames.iter().map(|p| PoseDoc { theta: p.theta.clone(), transl: p.translation }).collect();
    Ok(to_json(&ParamsDoc { betas, frames }))
}

pub fn params_from_json(text: &str) -> Result<Vec<BodyParams>, IoError> {
    let doc: ParamsDoc = parse_json("params", text)?;
    doc.frames
        .into_iter()
        .enumerate()
        .map(|(t, f)| {
            let p = BodyParams { theta: f.theta, beta: doc.betas, translation: f.transl };
            p.validate().map_err(|e| invalid("params", format!("frame {t}: {e} (theta needs {NUM_POSE} values)")))?;
            Ok(p)
        })
        .collect()
}

pub fn model_to_json(asset: &ModelAsset) -> String {
    to_json(asset)
}

pub fn model_from_json(text: &str) -> Result<ModelAsset, IoError> {
    parse_json("model asset", text)
}

/// Joint name → three `[lower, upper]` pairs (radians), one per Euler axis.
/// Joints left out of a file keep `±π`.
pub fn limits_to_json(limits: &JointLimits) -> String {
    to_json(&limits.to_named())
}

pub fn limits_from_json(text: &str) -> Result<JointLimits, IoError> {
    let named: BTreeMap<String, [[f64; 2]; 3]> = parse_json("joint limits", text)?;
    JointLimits::from_named(&named).map_err(|e| invalid("joint limits", e))
}

pub fn timestamps_to_json(ts: &[f64]) -> String {
    to_json(&ts)
}

pub fn timestamps_from_json(text: &str) -> Result<Vec<f64>, IoError> {
    parse_json("timestamps", text)
}

// ---- OBJ ----

/// `v` and triangular `f` records only; indices are written 1-based.
pub fn obj_encode(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for v in vertices {
        s.push_str(&format!("v {:?} {:?} {:?}\n", v.x, v.y, v.z));
    }
    for f in faces {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    s
}

/// Reads `v` and `f` records and ignores everything else. Face entries may
/// carry `/vt/vn` suffixes; polygons are fanned into triangles.
pub fn obj_decode(text: &str) -> Result<(Vec<Vector3<f64>>, Vec<[usize; 3]>), IoError> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xyz: Vec<f64> = it.take(3).map(str::parse).collect::<Result<_, _>>().map_err(|e| malformed("OBJ", format!("line {}: {e}", n + 1)))?;
                if xyz.len() != 3 || !xyz.iter().all(|v| v.is_finite()) {
                    return Err(malformed("OBJ", format!("line {}: vertex needs three finite coordinates", n + 1)));
                }
                verts.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|tok| tok.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| malformed("OBJ", format!("line {}: {e}", n + 1)))?;
                if idx.len() < 3 || idx.contains(&0) {
                    return Err(malformed("OBJ", format!("line {}: face needs three or more 1-based indices", n + 1)));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1]);
                }
            }
            _ => {}
        }
    }
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= verts.len())) {
        return Err(invalid("OBJ", format!("face {:?} indexes past {} vertices", f, verts.len())));
    }
    Ok((verts, faces))
}

// ---- PLY ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Coordinates are stored as f32, so only f32-representable clouds
/// round-trip exactly. Colors, when present, are float `red green blue`.
pub fn ply_encode(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut header = format!("ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n", cloud.len());
    if cloud.colors.is_some() {
        header.push_str("property float red\nproperty float green\nproperty float blue\n");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for (i, p) in cloud.points.iter().enumerate() {
        let mut row = vec![p.x as f32, p.y as f32, p.z as f32];
        if let Some(c) = &cloud.colors {
            row.extend_from_slice(&c[i]);
        }
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => row.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    F32,
    F64,
    U8,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "float" | "float32" => Some(Self::F32),
            "double" | "float64" => Some(Self::F64),
            "uchar" | "uint8" => Some(Self::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
        }
    }
}

/// Reads vertex `x y z` and optional `red green blue` (float in [0, 1] or
/// uchar) from ASCII or little-endian binary PLY. Other vertex properties of
/// the supported types are skipped; other elements must come after vertices.
pub fn ply_decode(bytes: &[u8]) -> Result<PointCloud, IoError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut line = String::new();
    let mut next_line = |cursor: &mut std::io::Cursor<&[u8]>| -> Result<String, IoError> {
        line.clear();
        if cursor.read_line(&mut line).map_err(|e| malformed("PLY", e))? == 0 {
            return Err(malformed("PLY", "header ended early"));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut cursor)? != "ply" {
        return Err(malformed("PLY", "missing magic"));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next_line(&mut cursor)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, _] => return Err(malformed("PLY", format!("unsupported format {other}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| malformed("PLY", e))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => {
                let ty = PlyType::parse(ty).ok_or_else(|| malformed("PLY", format!("unsupported property type {ty}")))?;
                props.push((name.to_string(), ty));
            }
            ["property", ..] if in_vertex => return Err(malformed("PLY", format!("unsupported vertex property: {l}"))),
            _ => {}
        }
    }
    let format = format.ok_or_else(|| malformed("PLY", "no format line"))?;
    let count = count.ok_or_else(|| malformed("PLY", "no vertex element"))?;
    let find = |n: &str| props.iter().position(|(name, _)| name == n);
    let (xi, yi, zi) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(malformed("PLY", "vertex needs x, y and z")),
    };
    let color = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            let mut rest = String::new();
            cursor.read_to_string(&mut rest).map_err(|e| malformed("PLY", e))?;
            let mut lines = rest.lines().filter(|l| !l.trim().is_empty());
            for i in 0..count {
                let l = lines.next().ok_or_else(|| malformed("PLY", format!("only {i} of {count} vertices")))?;
                let vals: Vec<f64> = l.split_whitespace().take(props.len()).map(str::parse).collect::<Result<_, _>>().map_err(|e| malformed("PLY", format!("vertex {i}: {e}")))?;
                if vals.len() != props.len() {
                    return Err(malformed("PLY", format!("vertex {i} has {} of {} values", vals.len(), props.len())));
                }
                // ASCII floats are read at f32 precision like their binary twins
                rows.push(vals.iter().zip(&props).map(|(v, (_, t))| if *t == PlyType::F32 { *v as f32 as f64 } else { *v }).collect());
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
            let start = cursor.position() as usize;
            let body = &bytes[start..];
            if body.len() < stride * count {
                return Err(malformed("PLY", format!("binary body holds {} bytes, need {}", body.len(), stride * count)));
            }
            for rec in body.chunks_exact(stride).take(count) {
                let mut off = 0;
                let mut row = Vec::with_capacity(props.len());
                for (_, t) in &props {
                    let b = &rec[off..off + t.size()];
                    row.push(match t {
                        PlyType::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
                        PlyType::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
                        PlyType::U8 => b[0] as f64,
                    });
                    off += t.size();
                }
                rows.push(row);
            }
        }
    }
    let points = rows.iter().map(|r| Vector3::new(r[xi], r[yi], r[zi])).collect();
    let colors = color.map(|idx| {
        rows.iter()
            .map(|r| std::array::from_fn(|c| if props[idx[c]].1 == PlyType::U8 { (r[idx[c]] / 255.0) as f32 } else { r[idx[c]] as f32 }))
            .collect()
    });
    PointCloud::new(points, colors).map_err(|e| invalid("PLY", e))
}

// ---- depth ----

/// Sidecar describing a depth raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthHeader {
    pub width: u32,
    pub height: u32,
    pub camera_id: u32,
    /// Capture time in seconds.
    pub timestamp: f64,
}

const DEPTH_MAGIC: &[u8] = b"Pf32";

/// `Pf32\n<width> <height>\n` then row-major little-endian f32 meters.
pub fn depth_encode(depth: &DepthImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * depth.depths().len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(format!("\n{} {}\n", depth.width(), depth.height()).as_bytes());
    for d in depth.depths() {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

pub fn depth_decode(bytes: &[u8]) -> Result<DepthImage, IoError> {
    let rest = bytes.strip_prefix(DEPTH_MAGIC).and_then(|r| r.strip_prefix(b"\n")).ok_or_else(|| malformed("depth raster", "missing Pf32 magic"))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| malformed("depth raster", "missing size line"))?;
    let dims = std::str::from_utf8(&rest[..nl]).map_err(|e| malformed("depth raster", e))?;
    let (w, h) = dims.split_once(' ').ok_or_else(|| malformed("depth raster", "size line needs width and height"))?;
    let (w, h): (u32, u32) = (w.parse().map_err(|e| malformed("depth raster", e))?, h.parse().map_err(|e| malformed("depth raster", e))?);
    let body = &rest[nl + 1..];
    let n = w as usize * h as usize;
    if body.len() != 4 * n {
        return Err(malformed("depth raster", format!("{} data bytes for {w}×{h}", body.len())));
    }
    let depths = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    DepthImage::new(w, h, depths).map_err(|e| invalid("depth raster", e))
}

pub fn depth_header_to_json(header: &DepthHeader) -> String {
    to_json(header)
}

pub fn depth_header_from_json(text: &str) -> Result<DepthHeader, IoError> {
    parse_json("depth header", text)
}

/// Writes `<stem>.pf32` and `<stem>.json` next to each other.
pub fn write_depth(stem: &Path, depth: &DepthImage, camera_id: CameraId, timestamp: f64) -> Result<(), IoError> {
    let header = DepthHeader { width: depth.width(), height: depth.height(), camera_id: camera_id.0, timestamp };
    write_bytes(&stem.with_extension("pf32"), depth_encode(depth))?;
    write_bytes(&stem.with_extension("json"), depth_header_to_json(&header))
}

pub fn read_depth(stem: &Path) -> Result<(DepthImage, DepthHeader), IoError> {
    let depth = depth_decode(&read_bytes(&stem.with_extension("pf32"))?)?;
    let header = depth_header_from_json(&read_text(&stem.with_extension("json"))?)?;
    if (header.width, header.height) != (depth.width(), depth.height()) {
        return Err(invalid("depth header", format!("sidecar says {}×{}, raster is {}×{}", header.width, header.height, depth.width(), depth.height())));
    }
    Ok((depth, header))
}

// ---- PBM ----

/// Binary `P4`: rows packed MSB first, padded to whole bytes; 1 = set.
pub fn pbm_encode(mask: &BinaryMask) -> Vec<u8> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = format!("P4\n{w} {h}\n").into_bytes();
    let row_bytes = (w as usize).div_ceil(8);
    for y in 0..h {
        let mut row = vec![0u8; row_bytes];
        for x in 0..w {
            if mask.get(x, y) {
                row[x as usize / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

pub fn pbm_decode(bytes: &[u8]) -> Result<BinaryMask, IoError> {
    // header: magic, width, height separated by whitespace, comments allowed,
    // then exactly one whitespace byte before the raster
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 3 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(malformed("PBM", "header ended early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|e| malformed("PBM", e))?.to_string());
    }
    if fields[0] != "P4" {
        return Err(malformed("PBM", format!("expected P4 magic, got {}", fields[0])));
    }
    let w: u32 = fields[1].parse().map_err(|e| malformed("PBM", e))?;
    let h: u32 = fields[2].parse().map_err(|e| malformed("PBM", e))?;
    let body = bytes.get(i + 1..).unwrap_or(&[]);
    let row_bytes = (w as usize).div_ceil(8);
    if body.len() != row_bytes * h as usize {
        return Err(malformed("PBM", format!("{} raster bytes for {w}×{h}", body.len())));
    }
    let bits = (0..h as usize).flat_map(|y| (0..w as usize).map(move |x| body[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0)).collect();
    BinaryMask::new(w, h, bits).map_err(|e| invalid("PBM", e))
}

// ---- manifest ----

/// Random generator used everywhere a seed is consumed.
pub const PRNG_ID: &str = "ChaCha20 (rand_chacha), seed_from_u64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub prng: String,
    /// Hex SHA-256 of the effective configuration as compact JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Files written by the run, relative to the manifest.
    pub outputs: Vec<String>,
}

/// Hex SHA-256 of `config` serialized compactly with sorted keys.
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(serde_json::to_string(config).expect("JSON values serialize").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, outputs: Vec<String>) -> Self {
        Self {
            tool: "mvcap".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            prng: PRNG_ID.into(),
            config_hash: config_hash(&config),
            config,
            outputs,
        }
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        parse_json("manifest", text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::BodyModel;
    use crate::pipeline::synth::{synth_rig, synth_sequence, SceneSpec};
    use proptest::prelude::*;

    #[test]
    fn rig_round_trips() {
        let rig = synth_rig(&SceneSpec::default()).unwrap();
        let back = rig_from_json(&rig_to_json(&rig)).unwrap();
        assert_eq!(back, rig);
    }

    #[test]
    fn rig_rejects_bad_rotation() {
        let text = r#"{"cameras":[{"id":0,"width":10,"height":10,"fx":1,"fy":1,"cx":5,"cy":5,
            "rotation":[2,0,0,0,1,0,0,0,1],"translation":[0,0,0]}]}"#;
        assert!(matches!(rig_from_json(text), Err(IoError::Invalid { .. })));
        assert!(matches!(rig_from_json("{"), Err(IoError::Malformed { .. })));
    }

    #[test]
    fn keypoint_files_round_trip() {
        let spec = SceneSpec { duration_s: 0.2, ..Default::default() };
        let rig = synth_rig(&spec).unwrap();
        let seq = synth_sequence(&spec, &rig, 3).unwrap();
        let n = spec.skeleton.num_keypoints();
        let (frames, fps) = kp2d_from_json(&kp2d_to_json(&seq.frames2d, spec.fps, n)).unwrap();
        assert_eq!(frames, seq.frames2d);
        assert_eq!(fps, spec.fps);
        let mut truth = seq.ground_truth.clone();
        truth.frames[1][3] = None;
        assert_eq!(kp3d_from_json(&kp3d_to_json(&truth)).unwrap(), truth);
        let topo = spec.skeleton.topology().unwrap();
        assert_eq!(topology_from_json(&topology_to_json(&topo), n).unwrap(), topo);
    }

    #[test]
    fn body_files_round_trip() {
        let mut p = BodyParams::default();
        p.theta[5] = 0.3;
        p.beta[2] = -1.25;
        let mut q = p.clone();
        q.translation = [0.1, 0.2, 0.3];
        let frames = vec![p.clone(), q];
        assert_eq!(params_from_json(&params_to_json(&frames).unwrap()).unwrap(), frames);
        let mut r = p.clone();
        r.beta[0] = 1.0;
        assert!(params_to_json(&[p, r]).is_err());

        let asset = BodyModel::procedural().to_asset();
        assert_eq!(model_from_json(&model_to_json(&asset)).unwrap(), asset);
        let limits = JointLimits::anatomical();
        assert_eq!(limits_from_json(&limits_to_json(&limits)).unwrap(), limits);
    }

    #[test]
    fn obj_round_trips_and_fans_quads() {
        let model = BodyModel::procedural();
        let (v, f) = obj_decode(&obj_encode(model.template(), model.faces())).unwrap();
        assert_eq!(v, model.template());
        assert_eq!(f, model.faces());
        let (_, f) = obj_decode("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n").unwrap();
        assert_eq!(f, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(obj_decode("v 0 0 0\nf 1 2 3\n").is_err());
    }

    fn f32_cloud(n: usize, colors: bool) -> PointCloud {
        let pts: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::new((i as f32 * 0.1) as f64, -(i as f64) * 0.25, (1.0f32 / 3.0) as f64)).collect();
        let cols = colors.then(|| (0..n).map(|i| [i as f32 / n as f32, 0.5, 1.0]).collect());
        PointCloud::new(pts, cols).unwrap()
    }

    #[test]
    fn ply_round_trips_both_encodings() {
        for colors in [false, true] {
            let c = f32_cloud(17, colors);
            for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
                let back = ply_decode(&ply_encode(&c, fmt)).unwrap();
                assert_eq!(back, c, "{fmt:?}");
            }
        }
    }

    #[test]
    fn ply_reads_uchar_colors_and_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1 2 3 0 255 0 51\n4 5 6 0 0 255 0\n";
        let c = ply_decode(text.as_bytes()).unwrap();
        assert_eq!(c.points[1], Vector3::new(4.0, 5.0, 6.0));
        assert_eq!(c.colors.unwrap()[0], [1.0, 0.0, 0.2]);
    }

    #[test]
    fn depth_round_trips_bitwise() {
        let d = DepthImage::new(3, 2, vec![0.0, 1.5, 2.25, 0.1, 0.0, 7.0]).unwrap();
        let bytes = depth_encode(&d);
        let back = depth_decode(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(depth_encode(&back), bytes);
        assert!(depth_decode(&bytes[..bytes.len() - 1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("cam3_000");
        write_depth(&stem, &d, CameraId(3), 12.5).unwrap();
        let (back, header) = read_depth(&stem).unwrap();
        assert_eq!(back, d);
        assert_eq!(header, DepthHeader { width: 3, height: 2, camera_id: 3, timestamp: 12.5 });
    }

    #[test]
    fn pbm_handles_padding_and_comments() {
        let mut m = BinaryMask::empty(11, 3);
        for (x, y) in [(0, 0), (7, 0), (8, 1), (10, 2)] {
            m.set(x, y, true);
        }
        let bytes = pbm_encode(&m);
        assert_eq!(bytes.len(), "P4\n11 3\n".len() + 6);
        assert_eq!(pbm_decode(&bytes).unwrap(), m);
        let mut commented = b"P4\n# made by hand\n11 3\n".to_vec();
        commented.extend_from_slice(&bytes["P4\n11 3\n".len()..]);
        assert_eq!(pbm_decode(&commented).unwrap(), m);
    }

    #[test]
    fn manifest_hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":[1,2],"b":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        let m = Manifest::new("synth", 7, a, vec!["rig.json".into()]);
        assert_eq!(Manifest::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn timestamps_round_trip() {
        let ts = vec![0.0, 1.0 / 30.0, 0.1 + 0.2, 1e-300];
        let back = timestamps_from_json(&timestamps_to_json(&ts)).unwrap();
        assert!(back.iter().zip(&ts).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    proptest! {
        #[test]
        fn depth_and_mask_codecs_are_lossless(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let n = (w * h) as usize;
            let depths: Vec<f32> = (0..n).map(|_| if rng.random::<bool>() { 0.0 } else { rng.random::<f32>() * 5.0 }).collect();
            let d = DepthImage::new(w, h, depths).unwrap();
            prop_assert_eq!(depth_decode(&depth_encode(&d)).unwrap(), d);
            let m = BinaryMask::new(w, h, (0..n).map(|_| rng.random()).collect()).unwrap();
            prop_assert_eq!(pbm_decode(&pbm_encode(&m)).unwrap(), m);
        }

        #[test]
        fn binary_ply_is_bitwise(xs in prop::collection::vec((any::<f32>(), any::<f32>(), any::<f32>()), 1..50)) {
            let pts: Vec<Vector3<f64>> = xs.iter().filter(|(a, b, c)| a.is_finite() && b.is_finite() && c.is_finite()).map(|&(a, b, c)| Vector3::new(a as f64, b as f64, c as f64)).collect();
            let c = PointCloud::from_points(pts);
            for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
                let back = ply_decode(&ply_encode(&c, fmt)).unwrap();
                prop_assert!(back.points.iter().zip(&c.points).all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())));
            }
        }
    }
}
