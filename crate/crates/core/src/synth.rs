//! Synthetic scenes with exact ground truth.
//!
//! Geometry is a world-space triangle mesh (y down, like the cameras). Color
//! is a procedural texture evaluated at the rasterized world point, so every
//! view sees the same Lambertian surface.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{Intrinsics, Pose, View};
use crate::error::{Error, Result};
use crate::image::{ColorImage, DepthMap};
use crate::imageops::normalize01;
use crate::io::{write_manifest, write_pfm, write_points, write_ppm, SceneManifest, SparsePointCloud, ViewRecord};
use crate::raster::{rasterize, Camera, Raster};
use crate::scene::Scene;

pub const NEAR: f64 = 0.1;
pub const FAR: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// A fronto-parallel textured plane 3 m in front of the reference.
    Plane,
    /// Floor, back and left walls and two boxes.
    BoxRoom,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "plane" => Ok(Preset::Plane),
            "box-room" => Ok(Preset::BoxRoom),
            _ => Err(Error::InvalidArgument(format!(
                "unknown preset {name:?} (expected plane or box-room)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub preset: Preset,
    pub width: usize,
    pub height: usize,
    /// Number of views including the reference.
    pub views: usize,
    /// Half-width of the camera arc in meters.
    pub radius: f64,
    pub jitter: f64,
    pub mono_amplitude: f64,
    pub points: usize,
    pub noise: f64,
    pub outliers: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            preset: Preset::BoxRoom,
            width: 160,
            height: 120,
            views: 12,
            radius: 0.6,
            jitter: 0.05,
            mono_amplitude: 0.1,
            points: 5000,
            noise: 0.02,
            outliers: 0.02,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// 3500 points, 5% noise, 5% outliers.
    pub fn with_fair_cloud(self) -> Self {
        SceneSpec {
            points: 3500,
            noise: 0.05,
            outliers: 0.05,
            ..self
        }
    }

    /// 1000 points, 10% noise, 10% outliers.
    pub fn with_poor_cloud(self) -> Self {
        SceneSpec {
            points: 1000,
            noise: 0.10,
            outliers: 0.10,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views < 2 {
            return Err(Error::InvalidArgument("a scene needs at least two views".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidArgument("image must be at least 8x8".into()));
        }
        if !(self.radius >= 0.0 && self.jitter >= 0.0 && self.mono_amplitude >= 0.0 && self.noise >= 0.0) {
            return Err(Error::InvalidArgument("amplitudes must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.outliers) {
            return Err(Error::InvalidArgument(format!(
                "outlier fraction {} not in [0, 1)",
                self.outliers
            )));
        }
        if self.points == 0 {
            return Err(Error::InvalidArgument("need at least one point".into()));
        }
        Ok(())
    }
}

/// World-space triangles.
#[derive(Clone, Debug, Default)]
pub struct WorldMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl WorldMesh {
    /// Adds the parallelogram `o + s·a + t·b`, `s, t ∈ [0, 1]`, split into
    /// cells no larger than `cell` meters.
    fn quad(&mut self, o: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>, cell: f64) {
        let na = (a.norm() / cell).ceil().max(1.0) as usize;
        let nb = (b.norm() / cell).ceil().max(1.0) as usize;
        let base = self.vertices.len();
        for j in 0..=nb {
            for i in 0..=na {
                self.vertices
                    .push(o + a * (i as f64 / na as f64) + b * (j as f64 / nb as f64));
            }
        }
        let idx = |i: usize, j: usize| base + j * (na + 1) + i;
        for j in 0..nb {
            for i in 0..na {
                self.faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                self.faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
    }

    /// Axis-aligned box without its bottom face.
    fn open_box(&mut self, lo: Vector3<f64>, hi: Vector3<f64>, cell: f64) {
        let d = hi - lo;
        let (ex, ey, ez) = (Vector3::x() * d.x, Vector3::y() * d.y, Vector3::z() * d.z);
        self.quad(lo, ex, ez, cell); // top (y = lo.y, up in a y-down world)
        self.quad(lo, ex, ey, cell); // front
        self.quad(lo + ez, ex, ey, cell); // back
        self.quad(lo, ez, ey, cell); // left
        self.quad(lo + ex, ez, ey, cell); // right
    }
}

fn preset_geometry(preset: Preset) -> WorldMesh {
    let mut m = WorldMesh::default();
    match preset {
        Preset::Plane => {
            m.quad(
                Vector3::new(-5.0, -4.0, 3.0),
                Vector3::new(10.0, 0.0, 0.0),
                Vector3::new(0.0, 8.0, 0.0),
                1.0,
            );
        }
        Preset::BoxRoom => {
            let cell = 0.25;
            // floor at y = 1.4, back wall at z = 6, left wall at x = -2.2
            m.quad(
                Vector3::new(-2.2, 1.4, 0.3),
                Vector3::new(6.7, 0.0, 0.0),
                Vector3::new(0.0, 0.0, 5.7),
                cell,
            );
            m.quad(
                Vector3::new(-2.2, -3.0, 6.0),
                Vector3::new(6.7, 0.0, 0.0),
                Vector3::new(0.0, 4.4, 0.0),
                cell,
            );
            m.quad(
                Vector3::new(-2.2, -3.0, 0.3),
                Vector3::new(0.0, 0.0, 5.7),
                Vector3::new(0.0, 4.4, 0.0),
                cell,
            );
            m.open_box(Vector3::new(-1.0, 0.6, 3.0), Vector3::new(0.0, 1.4, 3.8), 0.2);
            m.open_box(Vector3::new(0.8, 0.9, 2.2), Vector3::new(1.6, 1.4, 2.8), 0.2);
        }
    }
    m
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise in `[0, 1)`.
fn value_noise(p: Vector3<f64>, scale: f64, seed: u64) -> f64 {
    let q = p / scale;
    let (fx, fy, fz) = (q.x.floor(), q.y.floor(), q.z.floor());
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty, tz) = (smooth(q.x - fx), smooth(q.y - fy), smooth(q.z - fz));
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { tx } else { 1.0 - tx })
                    * (if dy == 1 { ty } else { 1.0 - ty })
                    * (if dz == 1 { tz } else { 1.0 - tz });
                acc += w * hash3(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

/// Procedural albedo at a world point: two octaves of value noise per
/// channel modulated by a 3D checker.
pub fn texture(p: Vector3<f64>, seed: u64) -> [f64; 3] {
    let s = 0.4;
    // product of three soft square waves, so cell borders are ramps
    let wave = |t: f64| (4.0 * (PI * t / s).sin()).tanh();
    let checker = 0.9 + 0.1 * wave(p.x) * wave(p.y) * wave(p.z);
    let mut c = [0.0; 3];
    for (ch, v) in c.iter_mut().enumerate() {
        let k = seed.wrapping_add(ch as u64 * 7919);
        let n = 0.6 * value_noise(p, 0.45, k) + 0.4 * value_noise(p, 0.2, k ^ 0xabcd);
        *v = (checker * (0.15 + 0.8 * n)).clamp(0.0, 1.0);
    }
    c
}

/// World-to-camera pose of a camera at `center` looking at `target`, with
/// the image x axis level.
pub fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Result<Pose> {
    let z = (target - center).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Pose::new(r, -(r * center))
}

/// Subpixel samples per axis for synthetic color images.
pub const SUPERSAMPLE: usize = 4;

fn surface_points(mesh: &WorldMesh, cam: &Camera) -> (Raster, Vec<Option<Vector3<f64>>>) {
    let m = cam.from_world();
    let pts: Vec<Vector3<f64>> = mesh.vertices.iter().map(|p| (m * p.push(1.0)).xyz()).collect();
    let r = rasterize(&pts, &mesh.faces, &cam.proj);
    let world = (0..r.width * r.height)
        .map(|i| {
            let f = mesh.faces[r.tri_index[i]? as usize];
            let b = r.bary[i];
            Some(mesh.vertices[f[0]] * b[0] + mesh.vertices[f[1]] * b[1] + mesh.vertices[f[2]] * b[2])
        })
        .collect();
    (r, world)
}

/// Color and depth of `mesh` seen by `cam`. Depth is sampled at pixel
/// centers; color is the box-filtered average of `ss × ss` subpixel samples
/// (empty samples count as black).
pub fn render_world(mesh: &WorldMesh, cam: &Camera, seed: u64, ss: usize) -> Result<(ColorImage, DepthMap)> {
    let c = cam.intrinsics;
    let (w, h) = (c.width, c.height);
    let (r, _) = surface_points(mesh, cam);
    let depth = DepthMap::from_fn(w, h, |x, y| r.tri_index[y * w + x].map(|_| r.depth[y * w + x]));
    let k = ss.max(1);
    let kf = k as f64;
    let fine = Intrinsics::new(c.fx * kf, c.fy * kf, c.cx * kf, c.cy * kf, w * k, h * k)?;
    let fine_cam = Camera::new(fine, cam.pose, cam.proj.near, cam.proj.far)?;
    let (_, world) = surface_points(mesh, &fine_cam);
    let mut img = ColorImage::new(w, h);
    let norm = 1.0 / (kf * kf);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..k {
                for sx in 0..k {
                    if let Some(p) = world[(y * k + sy) * w * k + x * k + sx] {
                        let t = texture(p, seed);
                        (0..3).for_each(|ch| acc[ch] += t[ch] * norm);
                    }
                }
            }
            img.set(x, y, acc);
        }
    }
    Ok((img, depth))
}

/// `normalize01(gt·(1 + amplitude·S))` with `S` a sum of at most three
/// seeded low-frequency sinusoids, `|S| ≤ 1`.
pub fn corrupt_to_mono(gt: &DepthMap, amplitude: f64, seed: u64) -> DepthMap {
    let (w, h) = (gt.width(), gt.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.1..1.0),
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w[0]).sum();
    let warped: Vec<f64> = (0..w * h)
        .map(|i| {
            let (u, v) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
            let s: f64 = waves
                .iter()
                .map(|k| k[0] / total * (2.0 * PI * (k[1] * u + k[2] * v) + k[3]).sin())
                .sum();
            gt.values()[i] * (1.0 + amplitude * s)
        })
        .collect();
    let n = normalize01(&warped, gt.mask(), w, h);
    DepthMap::from_fn(w, h, |x, y| gt.mask()[y * w + x].then(|| n.plane.at(x, y)))
}

/// `n` world points sampled at pixel centers of valid ground truth, with
/// relative Gaussian depth noise; `⌊outliers·n⌋` of them get uniform depths
/// in the ground-truth range instead.
pub fn sample_sparse_points(
    gt: &DepthMap,
    view: &View,
    n: usize,
    noise: f64,
    outliers: f64,
    seed: u64,
) -> Result<SparsePointCloud> {
    let valid: Vec<usize> = (0..gt.len()).filter(|i| gt.mask()[*i]).collect();
    let (lo, hi) = gt
        .range()
        .ok_or_else(|| Error::Validation("ground truth has no valid pixel".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let c = &view.intrinsics;
    let w = gt.width();
    let mut picks: Vec<(usize, f64)> = (0..n)
        .map(|_| {
            let i = valid[rng.random_range(0..valid.len())];
            let z = gt.values()[i] * (1.0 + if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 });
            (i, z)
        })
        .collect();
    let n_out = (outliers * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..n_out {
        let j = rng.random_range(k..n);
        order.swap(k, j);
        picks[order[k]].1 = rng.random_range(lo..=hi);
    }
    let to_world = view.pose.inverse();
    let points = picks
        .into_iter()
        .map(|(i, z)| {
            let (u, v) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let cam = Vector3::new((u - c.cx) / c.fx * z, (v - c.cy) / c.fy * z, z);
            to_world.transform(&cam)
        })
        .collect();
    SparsePointCloud::new(points)
}

/// A generated scene with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub scene: Scene,
    pub geometry: WorldMesh,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let f = 0.8125 * w as f64;
    let intr = Intrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h)?;
    let geometry = preset_geometry(spec.preset);
    let (ref_pose, target) = match spec.preset {
        Preset::Plane => (Pose::identity(), Vector3::new(0.0, 0.0, 3.0)),
        Preset::BoxRoom => {
            let pitch = 20f64.to_radians();
            let target = Vector3::new(0.0, pitch.sin(), pitch.cos()) * 3.5;
            (look_at(Vector3::zeros(), target)?, target)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tex_seed = rng.random::<u64>();
    let make_view = |id: u32, pose: Pose| -> Result<(View, DepthMap)> {
        let cam = Camera::new(intr, pose, NEAR, FAR)?;
        let (img, depth) = render_world(&geometry, &cam, tex_seed, SUPERSAMPLE)?;
        Ok((View::new(id, intr, pose, img)?, depth))
    };
    let (reference, gt) = make_view(0, ref_pose)?;
    let n_aux = spec.views - 1;
    let mut aux = Vec::with_capacity(n_aux);
    for k in 0..n_aux {
        let t = if n_aux == 1 {
            1.0
        } else {
            -1.0 + 2.0 * k as f64 / (n_aux - 1) as f64
        };
        let mut jit = || rng.random_range(-1.0..=1.0) * spec.jitter;
        let center = Vector3::new(
            spec.radius * t + jit(),
            jit(),
            -0.15 * spec.radius * (1.0 - t * t) + jit(),
        );
        aux.push(make_view(k as u32 + 1, look_at(center, target)?)?.0);
    }
    let mono = corrupt_to_mono(&gt, spec.mono_amplitude, rng.random());
    let cloud = sample_sparse_points(&gt, &reference, spec.points, spec.noise, spec.outliers, rng.random())?;
    Ok(SynthScene {
        scene: Scene::new(reference, aux, cloud, mono, Some(gt), NEAR, FAR)?,
        geometry,
    })
}

/// Writes a scene as a manifest plus image, depth and point files; returns
/// the manifest path.
pub fn write_scene(dir: impl AsRef<Path>, scene: &Scene) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut views = Vec::new();
    for v in std::iter::once(&scene.reference).chain(&scene.aux) {
        let name = PathBuf::from(format!("view_{:03}.ppm", v.id));
        write_ppm(dir.join(&name), &v.image)?;
        views.push(ViewRecord {
            id: v.id,
            image: name,
            intrinsics: v.intrinsics,
            quaternion: v.pose.quaternion(),
            translation: v.pose.translation.into(),
        });
    }
    write_points(dir.join("points.txt"), &scene.cloud)?;
    write_pfm(dir.join("mono.pfm"), &scene.mono)?;
    let gt = match &scene.gt {
        Some(g) => {
            write_pfm(dir.join("gt.pfm"), g)?;
            Some(PathBuf::from("gt.pfm"))
        }
        None => None,
    };
    let manifest = SceneManifest {
        version: 1,
        near: scene.near,
        far: scene.far,
        ref_view: scene.reference.id,
        views,
        points: "points.txt".into(),
        mono: "mono.pfm".into(),
        gt,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("scene.txt");
    write_manifest(&path, &manifest)?;
    Ok(path)
}
