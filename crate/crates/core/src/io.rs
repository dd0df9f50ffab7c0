//! Readers and writers for every file the library touches: PFM depth maps,
//! binary PPM color images, the scene manifest, text point clouds, COLMAP
//! text reconstructions and OBJ mesh export.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::camera::{cv_to_gl, Intrinsics, Pose, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::image::{ColorImage, DepthMap};
use crate::meshing::DepthMesh;
use crate::raster::{apply_vertex_params, FieldOutputs};

/// Structure-from-motion points in world space, meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl SparsePointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("sparse point cloud is empty".into()));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("sparse point coordinate".into()));
        }
        Ok(SparsePointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Splits a netpbm-style header into `count` whitespace separated tokens,
/// honoring `#` comments. Returns the tokens and the offset just past the
/// single whitespace byte that terminates the last one.
fn header_tokens(path: &Path, bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
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
            return Err(Error::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::format(path, "header not terminated"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(path: &Path, tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .ok()
        .filter(|v| *v > 0)
        .ok_or_else(|| Error::format(path, format!("bad dimension {tok:?}")))
}

/// Reads a single-channel little-endian PFM. NaN pixels become invalid.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (tok, offset) = header_tokens(path, &bytes, 4)?;
    match tok[0].as_str() {
        "Pf" => {}
        "PF" => {
            return Err(Error::format(
                path,
                "three-channel PFM (PF) where a single-channel depth map (Pf) is required",
            ))
        }
        other => return Err(Error::format(path, format!("bad PFM magic {other:?}"))),
    }
    let width = parse_dim(path, &tok[1])?;
    let height = parse_dim(path, &tok[2])?;
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::format(path, format!("bad scale {:?}", tok[3])))?;
    if !(scale < 0.0) {
        return Err(Error::format(
            path,
            "big-endian PFM (positive scale) is not supported; expected little-endian",
        ));
    }
    let payload = &bytes[offset..];
    let need = width * height * 4;
    if payload.len() < need {
        return Err(Error::format(
            path,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let mut values = vec![0.0; width * height];
    for (k, chunk) in payload[..need].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        // file rows run bottom to top
        let (x, row) = (k % width, k / width);
        values[(height - 1 - row) * width + x] = v as f64;
    }
    DepthMap::from_values(width, height, values)
}

/// Writes a single-channel little-endian PFM (scale `-1.0`). Depths are
/// stored as `f32`; invalid pixels are written as NaN.
pub fn write_pfm(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    bytes.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            let v = depth.get(x, y).map_or(f32::NAN, |z| z as f32);
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Reads a binary P6 PPM with maxval 255; channels become `byte / 255`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<ColorImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (tok, offset) = header_tokens(path, &bytes, 4)?;
    if tok[0] != "P6" {
        return Err(Error::format(path, format!("expected P6 magic, found {:?}", tok[0])));
    }
    let width = parse_dim(path, &tok[1])?;
    let height = parse_dim(path, &tok[2])?;
    if tok[3] != "255" {
        return Err(Error::format(path, format!("maxval must be 255, found {}", tok[3])));
    }
    let payload = &bytes[offset..];
    let need = width * height * 3;
    if payload.len() < need {
        return Err(Error::format(path, "truncated PPM payload"));
    }
    let pixels = payload[..need]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]].map(|b| b as f64 / 255.0))
        .collect();
    ColorImage::from_pixels(width, height, pixels)
}

/// Writes a binary P6 PPM, quantizing with round-to-nearest.
pub fn write_ppm(path: impl AsRef<Path>, img: &ColorImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for px in img.pixels() {
        bytes.extend(px.map(quantize));
    }
    write_bytes(path.as_ref(), &bytes)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Text point cloud: one `x y z` per line, `#` comments.
pub fn read_points(path: impl AsRef<Path>) -> Result<SparsePointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let coords: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: bad number", n + 1)))?;
        if coords.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected 3 values", n + 1)));
        }
        points.push(Vector3::new(coords[0], coords[1], coords[2]));
    }
    SparsePointCloud::new(points)
}

pub fn write_points(path: impl AsRef<Path>, cloud: &SparsePointCloud) -> Result<()> {
    let mut out = String::new();
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    write_bytes(path.as_ref(), out.as_bytes())
}

/// One `view` line of the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub id: u32,
    pub image: PathBuf,
    pub intrinsics: Intrinsics,
    /// `(qw, qx, qy, qz)`, world to camera.
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl ViewRecord {
    pub fn pose(&self) -> Result<Pose> {
        Pose::from_quaternion(self.quaternion, self.translation)
    }
}

/// Versioned, line-oriented scene description. Relative paths are resolved
/// against `base_dir`, the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneManifest {
    pub version: u32,
    pub near: f64,
    pub far: f64,
    pub ref_view: u32,
    pub views: Vec<ViewRecord>,
    pub points: PathBuf,
    pub mono: PathBuf,
    pub gt: Option<PathBuf>,
    pub base_dir: PathBuf,
}

impl SceneManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn ref_record(&self) -> &ViewRecord {
        self.views
            .iter()
            .find(|v| v.id == self.ref_view)
            .expect("validated manifest has its reference view")
    }

    /// Structural checks that need no file system access.
    pub fn validate_structure(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Validation(format!("unsupported version {}", self.version)));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Validation(format!(
                "need 0 < near < far, got {} and {}",
                self.near, self.far
            )));
        }
        let mut ids = HashSet::new();
        for v in &self.views {
            if !ids.insert(v.id) {
                return Err(Error::Validation(format!("duplicate view id {}", v.id)));
            }
            v.intrinsics.validate()?;
            v.pose()?;
        }
        if !ids.contains(&self.ref_view) {
            return Err(Error::Validation(format!(
                "ref_view {} is not among the views",
                self.ref_view
            )));
        }
        Ok(())
    }

    fn validate_paths(&self) -> Result<()> {
        let mut paths: Vec<&Path> = vec![&self.points, &self.mono];
        paths.extend(self.gt.as_deref());
        paths.extend(self.views.iter().map(|v| v.image.as_path()));
        for p in paths {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::Validation(format!("unresolvable path {}", full.display())));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "version {}", self.version);
        let _ = writeln!(out, "near {}", self.near);
        let _ = writeln!(out, "far {}", self.far);
        let _ = writeln!(out, "ref_view {}", self.ref_view);
        for v in &self.views {
            let c = &v.intrinsics;
            let [qw, qx, qy, qz] = v.quaternion;
            let [tx, ty, tz] = v.translation;
            let _ = writeln!(
                out,
                "view {} {} {} {} {} {} {} {} {qw} {qx} {qy} {qz} {tx} {ty} {tz}",
                v.id,
                v.image.display(),
                c.width,
                c.height,
                c.fx,
                c.fy,
                c.cx,
                c.cy
            );
        }
        let _ = writeln!(out, "points {}", self.points.display());
        let _ = writeln!(out, "mono {}", self.mono.display());
        if let Some(gt) = &self.gt {
            let _ = writeln!(out, "gt {}", gt.display());
        }
        out
    }
}

/// Parses and fully validates a manifest, including that every referenced
/// file exists.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<SceneManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest_str(&text, base_dir).map_err(|e| match e {
        Error::Format { msg, .. } => Error::format(path, msg),
        other => other,
    })?;
    manifest.validate_paths()?;
    Ok(manifest)
}

/// Parses manifest text without touching the file system.
pub fn parse_manifest_str(text: &str, base_dir: PathBuf) -> Result<SceneManifest> {
    let mut scalars: BTreeMap<&str, &str> = BTreeMap::new();
    let mut views = Vec::new();
    let mut first = true;
    let bad = |n: usize, msg: &str| Error::format(PathBuf::from("<manifest>"), format!("line {n}: {msg}"));
    for (n, raw) in text.lines().enumerate() {
        let n = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        if first && key != "version" {
            return Err(bad(n, "first line must be `version`"));
        }
        first = false;
        match key {
            "version" | "near" | "far" | "ref_view" | "points" | "mono" | "gt" => {
                if rest.is_empty() {
                    return Err(bad(n, &format!("`{key}` needs a value")));
                }
                if scalars.insert(key, rest).is_some() {
                    return Err(bad(n, &format!("duplicate key `{key}`")));
                }
            }
            "view" => views.push(parse_view_line(rest).map_err(|m| bad(n, &m))?),
            other => return Err(bad(n, &format!("unknown key `{other}`"))),
        }
    }
    let req = |k: &str| scalars.get(k).copied().ok_or_else(|| Error::MissingKey(k.to_string()));
    let num = |k: &str| -> Result<f64> {
        let v = req(k)?;
        v.parse()
            .map_err(|_| Error::Validation(format!("`{k}` is not a number: {v}")))
    };
    let int = |k: &str| -> Result<u32> {
        let v = req(k)?;
        v.parse()
            .map_err(|_| Error::Validation(format!("`{k}` is not an integer: {v}")))
    };
    let manifest = SceneManifest {
        version: int("version")?,
        near: num("near")?,
        far: num("far")?,
        ref_view: int("ref_view")?,
        points: PathBuf::from(req("points")?),
        mono: PathBuf::from(req("mono")?),
        gt: scalars.get("gt").map(PathBuf::from),
        views,
        base_dir,
    };
    if manifest.views.is_empty() {
        return Err(Error::MissingKey("view".into()));
    }
    manifest.validate_structure()?;
    Ok(manifest)
}

fn parse_view_line(rest: &str) -> std::result::Result<ViewRecord, String> {
    let tok: Vec<&str> = rest.split_whitespace().collect();
    if tok.len() != 15 {
        return Err(format!("`view` needs 15 fields, found {}", tok.len()));
    }
    let f = |i: usize| tok[i].parse::<f64>().map_err(|_| format!("bad number {:?}", tok[i]));
    let u = |i: usize| tok[i].parse::<usize>().map_err(|_| format!("bad integer {:?}", tok[i]));
    let id = tok[0].parse::<u32>().map_err(|_| format!("bad view id {:?}", tok[0]))?;
    let intrinsics = Intrinsics {
        width: u(2)?,
        height: u(3)?,
        fx: f(4)?,
        fy: f(5)?,
        cx: f(6)?,
        cy: f(7)?,
    };
    Ok(ViewRecord {
        id,
        image: PathBuf::from(tok[1]),
        intrinsics,
        quaternion: [f(8)?, f(9)?, f(10)?, f(11)?],
        translation: [f(12)?, f(13)?, f(14)?],
    })
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &SceneManifest) -> Result<()> {
    write_bytes(path.as_ref(), manifest.to_text().as_bytes())
}

/// A registered image from a COLMAP text reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct ColmapView {
    pub id: u32,
    pub name: String,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

#[derive(Clone, Debug)]
pub struct ColmapReconstruction {
    pub views: Vec<ColmapView>,
    /// Only points whose track contains the reference image.
    pub cloud: SparsePointCloud,
}

fn text_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        out.push((n + 1, line));
    }
    Ok(out)
}

fn nums<T: std::str::FromStr>(path: &Path, n: usize, toks: &[&str]) -> Result<Vec<T>> {
    toks.iter()
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| Error::format(path, format!("line {n}: bad value {t:?}")))
        })
        .collect()
}

/// Imports `cameras.txt`, `images.txt` and `points3D.txt` from `dir`.
/// Supports the `PINHOLE` and `SIMPLE_PINHOLE` camera models.
pub fn import_colmap_text(dir: impl AsRef<Path>, ref_image: u32) -> Result<ColmapReconstruction> {
    let dir = dir.as_ref();
    let cam_path = dir.join("cameras.txt");
    let mut cameras = HashMap::new();
    for (n, line) in text_lines(&cam_path)? {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(Error::format(&cam_path, format!("line {n}: too few fields")));
        }
        let id: u32 = nums(&cam_path, n, &tok[..1])?[0];
        let dims: Vec<usize> = nums(&cam_path, n, &tok[2..4])?;
        let params: Vec<f64> = nums(&cam_path, n, &tok[4..])?;
        let (fx, fy, cx, cy) = match (tok[1], params.as_slice()) {
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            ("SIMPLE_PINHOLE" | "PINHOLE", _) => {
                return Err(Error::format(&cam_path, format!("line {n}: wrong parameter count")))
            }
            (model, _) => return Err(Error::UnsupportedModel(model.to_string())),
        };
        cameras.insert(id, Intrinsics::new(fx, fy, cx, cy, dims[0], dims[1])?);
    }

    let img_path = dir.join("images.txt");
    let mut views = Vec::new();
    let mut expect_points_line = false;
    for (n, line) in text_lines(&img_path)? {
        if expect_points_line {
            // the observation line may be empty; its contents are unused
            expect_points_line = false;
            continue;
        }
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 10 {
            return Err(Error::format(&img_path, format!("line {n}: too few fields")));
        }
        let id: u32 = nums(&img_path, n, &tok[..1])?[0];
        let q: Vec<f64> = nums(&img_path, n, &tok[1..5])?;
        let t: Vec<f64> = nums(&img_path, n, &tok[5..8])?;
        let cam: u32 = nums(&img_path, n, &tok[8..9])?[0];
        let intrinsics = *cameras
            .get(&cam)
            .ok_or_else(|| Error::Validation(format!("image {id} references unknown camera {cam}")))?;
        views.push(ColmapView {
            id,
            name: tok[9..].join(" "),
            intrinsics,
            pose: Pose::from_quaternion([q[0], q[1], q[2], q[3]], [t[0], t[1], t[2]])?,
        });
        expect_points_line = true;
    }
    if !views.iter().any(|v| v.id == ref_image) {
        return Err(Error::Validation(format!(
            "reference image {ref_image} not in images.txt"
        )));
    }

    let pts_path = dir.join("points3D.txt");
    let mut points = Vec::new();
    for (n, line) in text_lines(&pts_path)? {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 8 || !(tok.len() - 8).is_multiple_of(2) {
            return Err(Error::format(&pts_path, format!("line {n}: malformed point")));
        }
        let xyz: Vec<f64> = nums(&pts_path, n, &tok[1..4])?;
        let track: Vec<u32> = nums(&pts_path, n, &tok[8..])?;
        if track.chunks_exact(2).any(|obs| obs[0] == ref_image) {
            points.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
        }
    }
    Ok(ColmapReconstruction {
        views,
        cloud: SparsePointCloud::new(points)?,
    })
}

/// Writes the mesh with its current per-vertex parameters as an OBJ file.
///
/// Positions are unprojected through the reference camera into world space
/// and then expressed y-up (a half turn about `x`), the usual orientation
/// for mesh viewers. Vertex colors use the `v x y z r g b` extension.
pub fn export_obj(
    path: impl AsRef<Path>,
    mesh: &DepthMesh,
    intrinsics: &Intrinsics,
    pose: &Pose,
    near: f64,
    far: f64,
) -> Result<()> {
    let mut out = String::from("# depth mesh\n");
    if !mesh.is_empty() {
        let proj = ProjectionMatrix::from_intrinsics(intrinsics, near, far)?;
        let positions = apply_vertex_params(mesh, &FieldOutputs::zeros(mesh.len()), &proj)?;
        let to_world = pose.inverse();
        for (p, c) in positions.points.iter().zip(&mesh.colors) {
            let world = to_world.transform(&cv_to_gl(p));
            let w = cv_to_gl(&world);
            let _ = writeln!(out, "v {} {} {} {} {} {}", w.x, w.y, w.z, c[0], c[1], c[2]);
        }
        for f in &mesh.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    }
    write_bytes(path.as_ref(), out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn pfm_round_trip_2x2() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = DepthMap::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_pfm(&p, &d).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back, d);
        // bottom row first in the file
        let bytes = fs::read(&p).unwrap();
        let payload = &bytes[bytes.len() - 16..];
        assert_eq!(f32::from_le_bytes(payload[..4].try_into().unwrap()), 3.0);
    }

    #[test]
    fn pfm_nan_is_invalid() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = DepthMap::from_values(2, 2, vec![1.0, f64::NAN, 3.0, 4.0]).unwrap();
        write_pfm(&p, &d).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back.mask().iter().filter(|v| !**v).count(), 1);
    }

    #[test]
    fn pfm_rejects_color_big_endian_and_truncated() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.pfm");
        fs::write(&p, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        let err = read_pfm(&p).unwrap_err().to_string();
        assert!(err.contains("three-channel"), "{err}");

        fs::write(&p, b"Pf\n1 1\n1.0\n\0\0\0\0").unwrap();
        let err = read_pfm(&p).unwrap_err().to_string();
        assert!(err.contains("big-endian"), "{err}");

        fs::write(&p, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        let err = read_pfm(&p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn ppm_quantization() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("i.ppm");
        let img = ColorImage::from_pixels(2, 1, vec![[0.0; 3], [1.0, 0.5, 0.0]]).unwrap();
        write_ppm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 0, 0, 255, 128, 0]);
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.get(1, 0)[0], 1.0);
        assert_eq!(back.get(1, 0)[1], 128.0 / 255.0);
        assert!((back.get(1, 0)[1] - 0.501_96).abs() < 1e-5);
    }

    #[test]
    fn ppm_rejects_other_formats() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("i.ppm");
        fs::write(&p, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(read_ppm(&p).is_err());
        fs::write(&p, b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap();
        assert!(read_ppm(&p).unwrap_err().to_string().contains("maxval"));
    }

    fn minimal_manifest() -> String {
        "version 1\nnear 0.1\nfar 100\nref_view 0\n\
         view 0 img.ppm 4 4 2 2 2 2 1 0 0 0 0 0 0\n\
         points pts.txt\nmono mono.pfm\n"
            .to_string()
    }

    #[test]
    fn manifest_parses_and_round_trips() {
        let dir = tempdir().unwrap();
        let m = parse_manifest_str(&minimal_manifest(), dir.path().to_path_buf()).unwrap();
        assert_eq!(m.views.len(), 1);
        assert_eq!(m.ref_record().intrinsics.width, 4);
        let again = parse_manifest_str(&m.to_text(), dir.path().to_path_buf()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn manifest_errors() {
        let base = PathBuf::new();
        let no_mono = minimal_manifest().replace("mono mono.pfm\n", "");
        let err = parse_manifest_str(&no_mono, base.clone()).unwrap_err();
        assert_eq!(err.to_string(), "missing key: mono");

        let bad_ref = minimal_manifest().replace("ref_view 0", "ref_view 3");
        assert!(matches!(
            parse_manifest_str(&bad_ref, base.clone()),
            Err(Error::Validation(_))
        ));

        let dup = minimal_manifest() + "view 0 img.ppm 4 4 2 2 2 2 1 0 0 0 0 0 0\n";
        assert!(parse_manifest_str(&dup, base.clone())
            .unwrap_err()
            .to_string()
            .contains("duplicate"));

        let unknown = minimal_manifest() + "colour red\n";
        assert!(parse_manifest_str(&unknown, base)
            .unwrap_err()
            .to_string()
            .contains("unknown key"));
    }

    #[test]
    fn manifest_paths_must_resolve() {
        let dir = tempdir().unwrap();
        let mp = dir.path().join("scene.txt");
        fs::write(&mp, minimal_manifest()).unwrap();
        let err = parse_manifest(&mp).unwrap_err().to_string();
        assert!(err.contains("unresolvable path"), "{err}");
        for f in ["img.ppm", "pts.txt", "mono.pfm"] {
            fs::write(dir.path().join(f), b"").unwrap();
        }
        parse_manifest(&mp).unwrap();
    }

    fn write_colmap(dir: &Path, model_line: &str) {
        fs::write(dir.join("cameras.txt"), format!("# cams\n{model_line}\n")).unwrap();
        fs::write(
            dir.join("images.txt"),
            "# images\n1 1 0 0 0 0 0 0 1 ref.png\n10 20 5\n\
             2 1 0 0 0 -1 0 0 1 other.png\n\n",
        )
        .unwrap();
        fs::write(
            dir.join("points3D.txt"),
            "# pts\n5 0 0 4 255 0 0 0.1 1 0 2 3\n6 1 1 5 0 0 0 0.2 2 7\n",
        )
        .unwrap();
    }

    #[test]
    fn colmap_import() {
        let dir = tempdir().unwrap();
        write_colmap(dir.path(), "1 SIMPLE_PINHOLE 640 480 500 320 240");
        let rec = import_colmap_text(dir.path(), 1).unwrap();
        assert_eq!(rec.views.len(), 2);
        let c = rec.views[0].intrinsics;
        assert_eq!((c.fx, c.fy, c.cx, c.cy), (500.0, 500.0, 320.0, 240.0));
        assert_eq!(rec.views[0].pose.rotation, nalgebra::Matrix3::identity());
        assert_eq!(rec.views[1].pose.translation, Vector3::new(-1.0, 0.0, 0.0));
        // point 6 is only seen by image 2
        assert_eq!(rec.cloud.points, vec![Vector3::new(0.0, 0.0, 4.0)]);
    }

    #[test]
    fn colmap_rejects_distortion_models() {
        let dir = tempdir().unwrap();
        write_colmap(dir.path(), "1 OPENCV 640 480 500 500 320 240 0 0 0 0");
        assert!(matches!(
            import_colmap_text(dir.path(), 1),
            Err(Error::UnsupportedModel(m)) if m == "OPENCV"
        ));
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_bit_exact(vals in proptest::collection::vec(1e-3f32..1e3, 12)) {
            let dir = tempdir().unwrap();
            let p = dir.path().join("d.pfm");
            let d = DepthMap::from_values(4, 3, vals.iter().map(|v| *v as f64).collect()).unwrap();
            write_pfm(&p, &d).unwrap();
            let back = read_pfm(&p).unwrap();
            for (a, b) in back.values().iter().zip(d.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
