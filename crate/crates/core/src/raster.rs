//! Differentiable software rasterizer.
//!
//! The forward pass places every mesh vertex in the reference camera
//! ([`apply_vertex_params`]), transforms the mesh into a target view and
//! rasterizes it with a depth test. The backward pass differentiates the
//! per-pixel outputs through the perspective-correct barycentrics of the
//! covering triangle, the target projection, the rigid view transform and the
//! vertex parametrization. Which triangle covers a pixel is treated as
//! constant: no gradient crosses visibility boundaries.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::camera::{ndc_to_pixel, relative_transform, Intrinsics, Pose, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::image::{ColorImage, DepthMap};
use crate::imageops::{pixel_to_index, BilinearTaps};
use crate::meshing::DepthMesh;

/// Margin keeping vertices strictly inside the near and far planes.
pub const FRUSTUM_EPS: f64 = 1e-6;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Per-vertex coarse remapping `(o, s)`: depth becomes `z·(1+s) + o`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutputs {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FieldOutputs {
    pub fn zeros(n: usize) -> Self {
        FieldOutputs {
            offset: vec![0.0; n],
            scale: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct VertexJacobian {
    d_du: Vector3<f64>,
    d_dv: Vector3<f64>,
    d_depth: Vector3<f64>,
    /// `∂D_new/∂(f_z, o, s)` before the frustum clamp.
    dn_fz: f64,
    dn_o: f64,
    dn_s: f64,
}

/// Vertex positions in the reference camera with the Jacobians needed by the
/// backward pass.
#[derive(Clone, Debug)]
pub struct VertexPositions {
    id: u64,
    /// Graphics-frame reference camera coordinates.
    pub points: Vec<Vector3<f64>>,
    /// Linear depth of each vertex after remapping and clamping.
    pub depth: Vec<f64>,
    jac: Vec<VertexJacobian>,
}

impl VertexPositions {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Clip-space positions `P0 · p'`.
    pub fn clip(&self, p0: &ProjectionMatrix) -> Vec<Vector4<f64>> {
        self.points.iter().map(|p| p0.clip(p)).collect()
    }
}

/// Places each vertex: unproject `(u'+Δu, v'+Δv, z')` through `p0`, move it
/// along its ray to depth `(z·(1+s) + o)/f_z`, and clamp that depth into
/// `[near+ε, far-ε]`.
pub fn apply_vertex_params(mesh: &DepthMesh, field: &FieldOutputs, p0: &ProjectionMatrix) -> Result<VertexPositions> {
    let n = mesh.len();
    if field.offset.len() != n || field.scale.len() != n {
        return Err(Error::Shape(format!(
            "field outputs for {} vertices, mesh has {n}",
            field.offset.len()
        )));
    }
    let m = &p0.m;
    let (lo, hi) = (p0.near + FRUSTUM_EPS, p0.far - FRUSTUM_EPS);
    let mut points = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut jac = Vec::with_capacity(n);
    for i in 0..n {
        let a = mesh.ndc[i][0] + mesh.du[i];
        let b = mesh.ndc[i][1] + mesh.dv[i];
        let base = crate::camera::depth_to_linear_unchecked(mesh.z_ndc[i], p0.near, p0.far);
        let (o, s, fz) = (field.offset[i], field.scale[i], mesh.fz[i]);
        let ray = Vector3::new((a + m[(0, 2)]) / m[(0, 0)], (b + m[(1, 2)]) / m[(1, 1)], -1.0);
        let moved = (base * (1.0 + s) + o) / fz;
        let (z, inside) = if moved > hi {
            (moved * (hi / moved), false)
        } else if moved < lo {
            (lo, false)
        } else {
            (moved, true)
        };
        let p = ray * z;
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite(format!("vertex {i} position {p:?}")));
        }
        let k = if inside { 1.0 } else { 0.0 };
        jac.push(VertexJacobian {
            d_du: Vector3::new(z / m[(0, 0)], 0.0, 0.0),
            d_dv: Vector3::new(0.0, z / m[(1, 1)], 0.0),
            d_depth: ray * k,
            dn_fz: -moved / fz,
            dn_o: 1.0 / fz,
            dn_s: base / fz,
        });
        points.push(p);
        depth.push(z);
    }
    Ok(VertexPositions {
        id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        points,
        depth,
        jac,
    })
}

/// Gradients of a scalar loss with respect to every per-vertex parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexParamGrads {
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub fz: Vec<f64>,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl VertexParamGrads {
    pub fn zeros(n: usize) -> Self {
        VertexParamGrads {
            du: vec![0.0; n],
            dv: vec![0.0; n],
            fz: vec![0.0; n],
            offset: vec![0.0; n],
            scale: vec![0.0; n],
        }
    }

    /// Chains gradients on reference-camera points through
    /// [`apply_vertex_params`].
    pub fn from_point_grads(positions: &VertexPositions, grads: &[Vector3<f64>]) -> Self {
        let mut out = VertexParamGrads::zeros(positions.len());
        for (i, (g, j)) in grads.iter().zip(&positions.jac).enumerate() {
            out.du[i] = g.dot(&j.d_du);
            out.dv[i] = g.dot(&j.d_dv);
            let gz = g.dot(&j.d_depth);
            out.fz[i] = gz * j.dn_fz;
            out.offset[i] = gz * j.dn_o;
            out.scale[i] = gz * j.dn_s;
        }
        out
    }

    pub fn add_assign(&mut self, other: &VertexParamGrads) {
        for (a, b) in [
            (&mut self.du, &other.du),
            (&mut self.dv, &other.dv),
            (&mut self.fz, &other.fz),
            (&mut self.offset, &other.offset),
            (&mut self.scale, &other.scale),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.du, &self.dv, &self.fz, &self.offset, &self.scale]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// A posed camera with its projection matrix.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub proj: ProjectionMatrix,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose, near: f64, far: f64) -> Result<Self> {
        Ok(Camera {
            intrinsics,
            pose,
            proj: ProjectionMatrix::from_intrinsics(&intrinsics, near, far)?,
        })
    }

    /// Transform from `reference`'s graphics frame to this camera's graphics
    /// frame.
    pub fn from_reference(&self, reference: &Camera) -> Matrix4<f64> {
        let flip = Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, 1.0));
        flip * relative_transform(&self.pose, &reference.pose) * flip
    }

    /// Transform from world coordinates to this camera's graphics frame.
    pub fn from_world(&self) -> Matrix4<f64> {
        let flip = Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, 1.0));
        flip * self.pose.to_matrix()
    }
}

/// How rendered pixels get their color.
#[derive(Clone, Copy, Debug)]
pub enum Shading<'a> {
    /// Perspective-correct interpolation of the mesh's vertex colors.
    VertexColors,
    /// Every surface point takes the color of the reference image where it
    /// projects in the reference camera.
    ReferenceTexture {
        image: &'a ColorImage,
        proj: &'a ProjectionMatrix,
    },
}

impl Shading<'_> {
    fn tag(&self) -> u8 {
        match self {
            Shading::VertexColors => 0,
            Shading::ReferenceTexture { .. } => 1,
        }
    }
}

/// Result of scan conversion: per-pixel winning triangle and barycentrics.
#[derive(Clone, Debug)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub tri_index: Vec<Option<u32>>,
    /// Perspective-correct barycentrics.
    pub bary: Vec<[f64; 3]>,
    /// Interpolated linear depth; meaningful where covered.
    pub depth: Vec<f64>,
    screen: Vec<[f64; 2]>,
    w: Vec<f64>,
    points: Vec<Vector3<f64>>,
}

impl Raster {
    pub fn is_covered(&self, i: usize) -> bool {
        self.tri_index[i].is_some()
    }
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    // evaluate from a fixed endpoint so a shared edge gives exactly opposite
    // values in its two triangles
    if (a[0], a[1]) > (b[0], b[1]) {
        return -edge(b, a, p);
    }
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

#[inline]
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

/// Scan-converts triangles given in the target camera's graphics frame.
///
/// Pixel centers sit at `(x+0.5, y+0.5)`. Shared edges follow the top-left
/// rule; equal depths keep the lower triangle index. Triangles with a vertex
/// outside `[near, far]` are skipped. Back faces are drawn.
pub fn rasterize(points: &[Vector3<f64>], faces: &[[usize; 3]], proj: &ProjectionMatrix) -> Raster {
    let (width, height) = (proj.width, proj.height);
    let npx = width * height;
    let mut out = Raster {
        width,
        height,
        tri_index: vec![None; npx],
        bary: vec![[0.0; 3]; npx],
        depth: vec![f64::INFINITY; npx],
        screen: Vec::with_capacity(points.len()),
        w: Vec::with_capacity(points.len()),
        points: points.to_vec(),
    };
    let m = &proj.m;
    for p in points {
        let w = -p.z;
        let nx = (m[(0, 0)] * p.x + m[(0, 2)] * p.z) / w;
        let ny = (m[(1, 1)] * p.y + m[(1, 2)] * p.z) / w;
        out.screen.push([ndc_to_pixel(nx, width), ndc_to_pixel(ny, height)]);
        out.w.push(w);
    }
    let mut lambda: Vec<[f64; 3]> = vec![[0.0; 3]; npx];
    for (t, f) in faces.iter().enumerate() {
        let w = f.map(|v| out.w[v]);
        if w.iter().any(|d| !(*d >= proj.near && *d <= proj.far)) {
            continue;
        }
        let s = f.map(|v| out.screen[v]);
        let area = edge(s[0], s[1], s[2]);
        if !(area.abs() > 1e-12) {
            continue;
        }
        // orient so that interior edge functions are positive
        let sign = area.signum();
        let edges = [(s[1], s[2]), (s[2], s[0]), (s[0], s[1])];
        let top_left = edges.map(|(a, b)| {
            if sign > 0.0 {
                is_top_left(a, b)
            } else {
                is_top_left(b, a)
            }
        });
        let min_x = s.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let max_x = s.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = s.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let max_y = s.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x - 0.5).ceil().max(0.0);
        let x1 = (max_x - 0.5).floor().min(width as f64 - 1.0);
        let y0 = (min_y - 0.5).ceil().max(0.0);
        let y1 = (max_y - 0.5).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let e = edges.map(|(a, b)| edge(a, b, p) * sign);
                if !(0..3).all(|k| e[k] > 0.0 || (e[k] == 0.0 && top_left[k])) {
                    continue;
                }
                let l = e.map(|v| v / (area * sign));
                let q = [l[0] / w[0], l[1] / w[1], l[2] / w[2]];
                let depth = 1.0 / (q[0] + q[1] + q[2]);
                let i = y * width + x;
                if depth < out.depth[i] {
                    out.depth[i] = depth;
                    out.tri_index[i] = Some(t as u32);
                    lambda[i] = l;
                    out.bary[i] = q.map(|v| v * depth);
                }
            }
        }
    }
    out
}

/// Rendered color and depth for one target view, with everything the
/// backward pass needs.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: ColorImage,
    /// Linear depth in meters; invalid where uncovered.
    pub depth: DepthMap,
    pub coverage: Vec<bool>,
    pub tri_index: Vec<Option<u32>>,
    pub bary: Vec<[f64; 3]>,
    raster: Raster,
    /// Reference-to-target rigid transform.
    transform: Matrix4<f64>,
    target_proj: ProjectionMatrix,
    positions_id: u64,
    shading: u8,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.raster.width
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }
}

fn sample_rgb(img: &ColorImage, u: f64, v: f64) -> ([f64; 3], BilinearTaps) {
    let taps = BilinearTaps::new(img.width(), img.height(), pixel_to_index(u), pixel_to_index(v));
    let px = img.pixels();
    let mut c = [0.0; 3];
    for k in 0..4 {
        for ch in 0..3 {
            c[ch] += taps.weight[k] * px[taps.index[k]][ch];
        }
    }
    (c, taps)
}

/// Continuous pixel coordinates of a graphics-frame point under `proj`.
#[inline]
fn project_pixel(proj: &ProjectionMatrix, p: &Vector3<f64>) -> [f64; 2] {
    let m = &proj.m;
    let w = -p.z;
    [
        ndc_to_pixel((m[(0, 0)] * p.x + m[(0, 2)] * p.z) / w, proj.width),
        ndc_to_pixel((m[(1, 1)] * p.y + m[(1, 2)] * p.z) / w, proj.height),
    ]
}

/// Renders the mesh, positioned by `positions` in `reference`'s frame, into
/// `target`.
pub fn render(
    positions: &VertexPositions,
    mesh: &DepthMesh,
    target: &Camera,
    reference: &Camera,
    shading: Shading<'_>,
) -> RenderOutput {
    let transform = target.from_reference(reference);
    let moved: Vec<Vector3<f64>> = positions
        .points
        .iter()
        .map(|p| (transform * p.push(1.0)).xyz())
        .collect();
    let raster = rasterize(&moved, &mesh.faces, &target.proj);
    let (w, h) = (raster.width, raster.height);
    let mut color = ColorImage::new(w, h);
    let mut depth = DepthMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some(t) = raster.tri_index[i] else { continue };
            let f = mesh.faces[t as usize];
            let b = raster.bary[i];
            depth.set(x, y, raster.depth[i]);
            let c = match shading {
                Shading::VertexColors => {
                    let mut c = [0.0; 3];
                    for k in 0..3 {
                        for ch in 0..3 {
                            c[ch] += b[k] * mesh.colors[f[k]][ch];
                        }
                    }
                    c
                }
                Shading::ReferenceTexture { image, proj } => {
                    let p =
                        positions.points[f[0]] * b[0] + positions.points[f[1]] * b[1] + positions.points[f[2]] * b[2];
                    let uv = project_pixel(proj, &p);
                    sample_rgb(image, uv[0], uv[1]).0
                }
            };
            color.set(x, y, c);
        }
    }
    RenderOutput {
        color,
        depth,
        coverage: raster.tri_index.iter().map(Option::is_some).collect(),
        tri_index: raster.tri_index.clone(),
        bary: raster.bary.clone(),
        raster,
        transform,
        target_proj: target.proj,
        positions_id: positions.id,
        shading: shading.tag(),
    }
}

/// Backward pass to reference-camera vertex points. `cot_color` and
/// `cot_depth` are per-pixel cotangents of the scalar loss with respect to
/// the rendered color and linear depth.
pub fn render_backward_points(
    out: &RenderOutput,
    positions: &VertexPositions,
    mesh: &DepthMesh,
    cot_color: Option<&[[f64; 3]]>,
    cot_depth: Option<&[f64]>,
    shading: Shading<'_>,
) -> Result<Vec<Vector3<f64>>> {
    if out.positions_id != positions.id || out.raster.w.len() != positions.len() {
        return Err(Error::Shape(
            "render output was produced from different vertex positions".into(),
        ));
    }
    if out.shading != shading.tag() {
        return Err(Error::Shape("shading differs from the forward pass".into()));
    }
    let (w, h) = (out.width(), out.height());
    let npx = w * h;
    if cot_color.is_some_and(|c| c.len() != npx) || cot_depth.is_some_and(|c| c.len() != npx) {
        return Err(Error::Shape("cotangent image size differs from the render".into()));
    }
    let r = &out.raster;
    let m = &out.target_proj.m;
    let (hw, hh) = (w as f64 * 0.5, h as f64 * 0.5);
    let rot: Matrix3<f64> = out.transform.fixed_view::<3, 3>(0, 0).into_owned();
    let mut g_target = vec![Vector3::zeros(); positions.len()];
    let mut g_ref = vec![Vector3::zeros(); positions.len()];

    for i in 0..npx {
        let Some(t) = r.tri_index[i] else { continue };
        let gc = cot_color.map_or([0.0; 3], |c| c[i]);
        let gd = cot_depth.map_or(0.0, |c| c[i]);
        if gd == 0.0 && gc == [0.0; 3] {
            continue;
        }
        let f = mesh.faces[t as usize];
        let s = f.map(|v| r.screen[v]);
        let wv = f.map(|v| r.w[v]);
        let p = [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5];
        let area = edge(s[0], s[1], s[2]);
        let e = [edge(s[1], s[2], p), edge(s[2], s[0], p), edge(s[0], s[1], p)];
        let l = e.map(|v| v / area);
        let q = [l[0] / wv[0], l[1] / wv[1], l[2] / wv[2]];
        let qs = q[0] + q[1] + q[2];
        let b = q.map(|v| v / qs);

        // cotangent on the perspective-correct barycentrics
        let mut gb = [0.0; 3];
        match shading {
            Shading::VertexColors => {
                for k in 0..3 {
                    let c = mesh.colors[f[k]];
                    gb[k] = gc[0] * c[0] + gc[1] * c[1] + gc[2] * c[2];
                }
            }
            Shading::ReferenceTexture { image, proj } => {
                let pts = f.map(|v| positions.points[v]);
                let pt = pts[0] * b[0] + pts[1] * b[1] + pts[2] * b[2];
                let uv = project_pixel(proj, &pt);
                let (_, taps) = sample_rgb(image, uv[0], uv[1]);
                let px = image.pixels();
                let (mut gu, mut gv) = (0.0, 0.0);
                for k in 0..4 {
                    let c = px[taps.index[k]];
                    let dot = gc[0] * c[0] + gc[1] * c[1] + gc[2] * c[2];
                    gu += taps.d_du[k] * dot;
                    gv += taps.d_dv[k] * dot;
                }
                let pm = &proj.m;
                let pw = -pt.z;
                let (rw, rh) = (proj.width as f64 * 0.5, proj.height as f64 * 0.5);
                let g_pt = Vector3::new(
                    gu * rw * pm[(0, 0)] / pw,
                    gv * rh * pm[(1, 1)] / pw,
                    gu * rw * pm[(0, 0)] * pt.x / (pw * pw) + gv * rh * pm[(1, 1)] * pt.y / (pw * pw),
                );
                for k in 0..3 {
                    g_ref[f[k]] += g_pt * b[k];
                    gb[k] = g_pt.dot(&pts[k]);
                }
            }
        }

        let mean_gb = gb[0] * b[0] + gb[1] * b[1] + gb[2] * b[2];
        let gq = [0, 1, 2].map(|k| -gd / (qs * qs) + (gb[k] - mean_gb) / qs);
        let gl = [0, 1, 2].map(|k| gq[k] / wv[k]);
        let gw = [0, 1, 2].map(|k| -gq[k] * l[k] / (wv[k] * wv[k]));

        // λ_k = e_k / A
        let ge = gl.map(|g| g / area);
        let ga = -(0..3).map(|k| gl[k] * l[k]).sum::<f64>() / area;
        let mut gs = [[0.0f64; 2]; 3];
        let mut acc_edge = |a: usize, bb: usize, pp: Option<usize>, pt: [f64; 2], g: f64| {
            let (pa, pb) = (s[a], s[bb]);
            let q = pp.map_or(pt, |k| s[k]);
            gs[a][0] += g * (pb[1] - q[1]);
            gs[a][1] += g * (q[0] - pb[0]);
            gs[bb][0] += g * (q[1] - pa[1]);
            gs[bb][1] += g * -(q[0] - pa[0]);
            if let Some(k) = pp {
                gs[k][0] += g * -(pb[1] - pa[1]);
                gs[k][1] += g * (pb[0] - pa[0]);
            }
        };
        acc_edge(1, 2, None, p, ge[0]);
        acc_edge(2, 0, None, p, ge[1]);
        acc_edge(0, 1, None, p, ge[2]);
        acc_edge(0, 1, Some(2), p, ga);

        for k in 0..3 {
            let v = f[k];
            let wk = wv[k];
            let y = r.points[v];
            g_target[v] += Vector3::new(
                gs[k][0] * hw * m[(0, 0)] / wk,
                gs[k][1] * hh * m[(1, 1)] / wk,
                gs[k][0] * hw * m[(0, 0)] * y.x / (wk * wk) + gs[k][1] * hh * m[(1, 1)] * y.y / (wk * wk) - gw[k],
            );
        }
    }
    let rot_t = rot.transpose();
    Ok(g_target.iter().zip(&g_ref).map(|(gt, gr)| rot_t * gt + gr).collect())
}

/// Backward pass all the way to the per-vertex parameters.
pub fn render_backward(
    out: &RenderOutput,
    positions: &VertexPositions,
    mesh: &DepthMesh,
    cot_color: Option<&[[f64; 3]]>,
    cot_depth: Option<&[f64]>,
    shading: Shading<'_>,
) -> Result<VertexParamGrads> {
    let g = render_backward_points(out, positions, mesh, cot_color, cot_depth, shading)?;
    Ok(VertexParamGrads::from_point_grads(positions, &g))
}
