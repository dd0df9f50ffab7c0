//! Depth map to triangle mesh conversion and quadric decimation.
//!
//! Vertices live in the reference camera's normalized device space: `(u', v')`
//! in `[-1, 1]` and reciprocal depth `z'`. Each vertex also carries the
//! optimizable image-space offsets `Δu, Δv` (NDC units) and the inverse depth
//! scale `f_z`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::camera::{pixel_to_ndc, Intrinsics, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::image::{ColorImage, DepthMap};
use crate::imageops::{pixel_to_index, BilinearTaps};

pub use crate::camera::unproject;

/// Bounds of the inverse depth scale.
pub const FZ_MIN: f64 = 0.05;
pub const FZ_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMesh {
    /// Base normalized image coordinates `(u', v')`.
    pub ndc: Vec<[f64; 2]>,
    /// Base reciprocal depth `z'`.
    pub z_ndc: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub fz: Vec<f64>,
    /// Counter-clockwise in pixel coordinates (y down).
    pub faces: Vec<[usize; 3]>,
    pub downsample: usize,
    pub width: usize,
    pub height: usize,
}

impl DepthMesh {
    pub fn empty(width: usize, height: usize, downsample: usize) -> Self {
        DepthMesh {
            ndc: Vec::new(),
            z_ndc: Vec::new(),
            colors: Vec::new(),
            du: Vec::new(),
            dv: Vec::new(),
            fz: Vec::new(),
            faces: Vec::new(),
            downsample,
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.ndc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ndc.is_empty()
    }

    /// Largest allowed `|Δu|`, i.e. `d/2` pixels in NDC units.
    pub fn du_limit(&self) -> f64 {
        self.downsample as f64 / self.width as f64
    }

    pub fn dv_limit(&self) -> f64 {
        self.downsample as f64 / self.height as f64
    }

    fn push_vertex(&mut self, ndc: [f64; 2], z: f64, color: [f64; 3]) {
        self.ndc.push(ndc);
        self.z_ndc.push(z);
        self.colors.push(color);
        self.du.push(0.0);
        self.dv.push(0.0);
        self.fz.push(1.0);
    }

    /// Signed area of a face in base `(u', v')` coordinates; positive for
    /// counter-clockwise (pixel-space) winding.
    pub fn base_area(&self, f: &[usize; 3]) -> f64 {
        signed_area(self.ndc[f[0]], self.ndc[f[1]], self.ndc[f[2]])
    }

    /// Current image position of a vertex in continuous pixel coordinates.
    pub fn pixel_position(&self, i: usize) -> (f64, f64) {
        (
            (self.ndc[i][0] + self.du[i] + 1.0) * 0.5 * self.width as f64,
            (self.ndc[i][1] + self.dv[i] + 1.0) * 0.5 * self.height as f64,
        )
    }

    /// Checks every structural invariant of the mesh.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.z_ndc.len(),
            self.colors.len(),
            self.du.len(),
            self.dv.len(),
            self.fz.len(),
        ];
        if lens.iter().any(|l| *l != n) {
            return Err(Error::Shape("per-vertex arrays differ in length".into()));
        }
        let (lu, lv) = (self.du_limit(), self.dv_limit());
        for i in 0..n {
            if self.du[i].abs() > lu || self.dv[i].abs() > lv {
                return Err(Error::Validation(format!("vertex {i}: offset beyond d/2 pixels")));
            }
            if !(FZ_MIN..=FZ_MAX).contains(&self.fz[i]) {
                return Err(Error::Validation(format!("vertex {i}: f_z = {}", self.fz[i])));
            }
            if !(-1.0..=1.0).contains(&self.z_ndc[i]) {
                return Err(Error::Validation(format!("vertex {i}: z' = {}", self.z_ndc[i])));
            }
        }
        for (k, f) in self.faces.iter().enumerate() {
            if f.iter().any(|v| *v >= n) || f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Validation(format!("face {k} has bad indices {f:?}")));
            }
            if self.base_area(f) == 0.0 {
                return Err(Error::Validation(format!("face {k} is degenerate")));
            }
        }
        Ok(())
    }
}

#[inline]
fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

/// Vertex grid dimensions `(⌈W/d⌉, ⌈H/d⌉)`.
pub fn grid_dims(width: usize, height: usize, d: usize) -> (usize, usize) {
    (width.div_ceil(d), height.div_ceil(d))
}

/// Pixel position of grid sample `i` along an axis of `extent` pixels.
fn grid_position(i: usize, d: usize, extent: usize) -> f64 {
    (i as f64 * d as f64 + d as f64 * 0.5).min(extent as f64)
}

/// Bilinear sample over the valid taps only, renormalized. `None` when no
/// tap is valid.
fn sample_valid(depth: &DepthMap, u: f64, v: f64) -> Option<f64> {
    let taps = BilinearTaps::new(depth.width(), depth.height(), pixel_to_index(u), pixel_to_index(v));
    let mask = depth.mask();
    let (mut acc, mut norm, mut any) = (0.0, 0.0, false);
    for k in 0..4 {
        let i = taps.index[k];
        if mask[i] {
            any = true;
            acc += taps.weight[k] * depth.values()[i];
            norm += taps.weight[k];
        }
    }
    if !any {
        return None;
    }
    if norm > 0.0 {
        Some(acc / norm)
    } else {
        // only zero-weight taps are valid: take the nearest of them
        (0..4)
            .find(|k| mask[taps.index[*k]])
            .map(|k| depth.values()[taps.index[k]])
    }
}

fn sample_color(img: &ColorImage, u: f64, v: f64) -> [f64; 3] {
    let taps = BilinearTaps::new(img.width(), img.height(), pixel_to_index(u), pixel_to_index(v));
    let px = img.pixels();
    let mut c = [0.0; 3];
    for k in 0..4 {
        for (ch, out) in c.iter_mut().enumerate() {
            *out += taps.weight[k] * px[taps.index[k]][ch];
        }
    }
    c
}

/// Converts an absolute depth map into a grid mesh with one vertex per
/// `d × d` block.
///
/// Each grid cell is split along the diagonal whose endpoints differ least
/// in depth. Depths are clamped into the projection's `[near, far]`.
pub fn build_depth_mesh(
    depth: &DepthMap,
    image: &ColorImage,
    c: &Intrinsics,
    d: usize,
    p: &ProjectionMatrix,
) -> Result<DepthMesh> {
    if d == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    let (w, h) = (c.width, c.height);
    if depth.width() != w || depth.height() != h || image.width() != w || image.height() != h {
        return Err(Error::Shape(format!(
            "depth {}x{} and image {}x{} must match intrinsics {w}x{h}",
            depth.width(),
            depth.height(),
            image.width(),
            image.height()
        )));
    }
    let (gw, gh) = grid_dims(w, h, d);
    let mut mesh = DepthMesh::empty(w, h, d);
    let mut grid: Vec<Option<(usize, f64)>> = vec![None; gw * gh];
    for j in 0..gh {
        let v = grid_position(j, d, h);
        for i in 0..gw {
            let u = grid_position(i, d, w);
            let Some(z) = sample_valid(depth, u, v) else {
                continue;
            };
            let z = z.clamp(p.near, p.far);
            grid[j * gw + i] = Some((mesh.len(), z));
            mesh.push_vertex(
                [pixel_to_ndc(u, w), pixel_to_ndc(v, h)],
                p.to_reciprocal(z)?,
                sample_color(image, u, v),
            );
        }
    }
    for j in 0..gh.saturating_sub(1) {
        for i in 0..gw.saturating_sub(1) {
            let corner = |di: usize, dj: usize| grid[(j + dj) * gw + i + di];
            let (Some(a), Some(b), Some(cc), Some(e)) = (corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1)) else {
                continue;
            };
            let tris = if (a.1 - e.1).abs() <= (b.1 - cc.1).abs() {
                [[a.0, b.0, e.0], [a.0, e.0, cc.0]]
            } else {
                [[a.0, b.0, cc.0], [b.0, e.0, cc.0]]
            };
            for t in tris {
                if mesh.base_area(&t) > 0.0 {
                    mesh.faces.push(t);
                }
            }
        }
    }
    Ok(mesh)
}

/// Outcome of [`decimate`].
#[derive(Clone, Debug)]
pub struct Decimation {
    pub mesh: DepthMesh,
    /// Old vertex index to new index; `None` for collapsed vertices.
    pub remap: Vec<Option<usize>>,
    pub collapses: usize,
    /// Largest quadric error among performed collapses.
    pub max_cost: f64,
}

type Quadric = [f64; 10];

fn face_quadric(p: [[f64; 3]; 3]) -> Quadric {
    let e1 = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
    let e2 = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
    let n = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len == 0.0 {
        return [0.0; 10];
    }
    let area = 0.5 * len;
    let (a, b, c) = (n[0] / len, n[1] / len, n[2] / len);
    let d = -(a * p[0][0] + b * p[0][1] + c * p[0][2]);
    [a * a, a * b, a * c, a * d, b * b, b * c, b * d, c * c, c * d, d * d].map(|q| q * area)
}

fn quadric_cost(q: &Quadric, p: [f64; 3]) -> f64 {
    let [x, y, z] = p;
    let v = q[0] * x * x
        + 2.0 * q[1] * x * y
        + 2.0 * q[2] * x * z
        + 2.0 * q[3] * x
        + q[4] * y * y
        + 2.0 * q[5] * y * z
        + 2.0 * q[6] * y
        + q[7] * z * z
        + 2.0 * q[8] * z
        + q[9];
    v.max(0.0)
}

#[derive(PartialEq)]
struct Candidate {
    cost: f64,
    victim: usize,
    keep: usize,
    stamp: (u32, u32),
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then deterministic on indices
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.victim.cmp(&self.victim))
            .then_with(|| other.keep.cmp(&self.keep))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Collapser<'a> {
    mesh: &'a DepthMesh,
    pos: Vec<[f64; 3]>,
    quadrics: Vec<Quadric>,
    faces: Vec<Option<[usize; 3]>>,
    vertex_faces: Vec<Vec<usize>>,
    alive: Vec<bool>,
    boundary: Vec<bool>,
    version: Vec<u32>,
}

impl<'a> Collapser<'a> {
    fn new(mesh: &'a DepthMesh) -> Self {
        let n = mesh.len();
        let pos: Vec<[f64; 3]> = (0..n)
            .map(|i| [mesh.ndc[i][0], mesh.ndc[i][1], mesh.z_ndc[i]])
            .collect();
        let mut quadrics = vec![[0.0; 10]; n];
        let mut vertex_faces = vec![Vec::new(); n];
        let mut edge_use: HashMap<(usize, usize), u32> = HashMap::new();
        for (k, f) in mesh.faces.iter().enumerate() {
            let q = face_quadric([pos[f[0]], pos[f[1]], pos[f[2]]]);
            for &v in f {
                for (acc, x) in quadrics[v].iter_mut().zip(&q) {
                    *acc += x;
                }
                vertex_faces[v].push(k);
            }
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *edge_use.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut boundary = vec![false; n];
        for ((a, b), count) in &edge_use {
            if *count == 1 {
                boundary[*a] = true;
                boundary[*b] = true;
            }
        }
        // isolated vertices cannot be collapsed either
        for v in 0..n {
            if vertex_faces[v].is_empty() {
                boundary[v] = true;
            }
        }
        Collapser {
            mesh,
            pos,
            quadrics,
            faces: mesh.faces.iter().copied().map(Some).collect(),
            vertex_faces,
            alive: vec![true; n],
            boundary,
            version: vec![0; n],
        }
    }

    fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.vertex_faces[v]
            .iter()
            .filter_map(|f| self.faces[*f])
            .flat_map(|f| f.into_iter())
            .filter(|u| *u != v)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn candidate(&self, victim: usize, keep: usize) -> Option<Candidate> {
        if self.boundary[victim] {
            return None;
        }
        let mut q = self.quadrics[victim];
        for (acc, x) in q.iter_mut().zip(&self.quadrics[keep]) {
            *acc += x;
        }
        Some(Candidate {
            cost: quadric_cost(&q, self.pos[keep]),
            victim,
            keep,
            stamp: (self.version[victim], self.version[keep]),
        })
    }

    fn push_edges(&self, v: usize, heap: &mut BinaryHeap<Candidate>) {
        for u in self.neighbors(v) {
            heap.extend(self.candidate(v, u));
            heap.extend(self.candidate(u, v));
        }
    }

    /// Link condition plus orientation and degeneracy checks for `victim → keep`.
    fn is_valid(&self, victim: usize, keep: usize) -> bool {
        let nv = self.neighbors(victim);
        let nk = self.neighbors(keep);
        let common = nv.iter().filter(|x| nk.binary_search(x).is_ok()).count();
        let shared_faces = self.vertex_faces[victim]
            .iter()
            .filter_map(|f| self.faces[*f])
            .filter(|f| f.contains(&keep))
            .count();
        if common != shared_faces {
            return false;
        }
        for f in self.vertex_faces[victim].iter().filter_map(|f| self.faces[*f]) {
            if f.contains(&keep) {
                continue;
            }
            let g = f.map(|x| if x == victim { keep } else { x });
            let p = g.map(|x| self.mesh.ndc[x]);
            let area = signed_area(p[0], p[1], p[2]);
            if !(area > 1e-14) {
                return false;
            }
        }
        true
    }

    fn collapse(&mut self, victim: usize, keep: usize) {
        let faces = std::mem::take(&mut self.vertex_faces[victim]);
        for fid in faces {
            let Some(f) = self.faces[fid] else { continue };
            if f.contains(&keep) {
                self.faces[fid] = None;
                for v in f {
                    if v != victim {
                        self.vertex_faces[v].retain(|x| *x != fid);
                    }
                }
            } else {
                self.faces[fid] = Some(f.map(|x| if x == victim { keep } else { x }));
                self.vertex_faces[keep].push(fid);
            }
        }
        let qv = self.quadrics[victim];
        for (acc, x) in self.quadrics[keep].iter_mut().zip(&qv) {
            *acc += x;
        }
        self.alive[victim] = false;
        self.version[victim] += 1;
        self.version[keep] += 1;
    }
}

/// Quadric-error edge-collapse decimation with subset placement.
///
/// Every collapse moves one endpoint onto the other, so surviving positions
/// are bitwise copies of input positions. Boundary vertices never collapse,
/// and collapses that would flip or degenerate a face in `(u', v')` are
/// skipped. Stops at `⌈r·N⌉` vertices or when no legal collapse remains.
pub fn decimate(mesh: &DepthMesh, r: f64) -> Result<Decimation> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep ratio must be in (0, 1], got {r}")));
    }
    let n = mesh.len();
    let target = (r * n as f64).ceil() as usize;
    let mut state = Collapser::new(mesh);
    let mut heap = BinaryHeap::new();
    for f in &mesh.faces {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            heap.extend(state.candidate(a, b));
            heap.extend(state.candidate(b, a));
        }
    }
    let mut alive = n;
    let mut collapses = 0;
    let mut max_cost: f64 = 0.0;
    while alive > target {
        let Some(c) = heap.pop() else { break };
        if !state.alive[c.victim] || !state.alive[c.keep] || c.stamp != (state.version[c.victim], state.version[c.keep])
        {
            continue;
        }
        if !state.is_valid(c.victim, c.keep) {
            continue;
        }
        state.collapse(c.victim, c.keep);
        alive -= 1;
        collapses += 1;
        max_cost = max_cost.max(c.cost);
        state.push_edges(c.keep, &mut heap);
    }

    let mut remap = vec![None; n];
    let mut out = DepthMesh::empty(mesh.width, mesh.height, mesh.downsample);
    for (i, slot) in remap.iter_mut().enumerate() {
        if state.alive[i] {
            *slot = Some(out.len());
            out.ndc.push(mesh.ndc[i]);
            out.z_ndc.push(mesh.z_ndc[i]);
            out.colors.push(mesh.colors[i]);
            out.du.push(mesh.du[i]);
            out.dv.push(mesh.dv[i]);
            out.fz.push(mesh.fz[i]);
        }
    }
    out.faces = state
        .faces
        .iter()
        .flatten()
        .map(|f| f.map(|v| remap[v].expect("faces reference live vertices")))
        .collect();
    Ok(Decimation {
        mesh: out,
        remap,
        collapses,
        max_cost,
    })
}
