//! The two-stage refinement: global alignment, coarse remapping, baking with
//! decimation, then local per-vertex refinement.

use std::fmt;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{depth_to_linear_unchecked, depth_to_reciprocal_unchecked, ndc_to_pixel};
use crate::error::{Error, Result};
use crate::field::{field_backward, field_eval, field_init, FieldConfig, FieldMode, FieldParams};
use crate::image::DepthMap;
use crate::imageops::{normalize01, sobel_edge_image, Plane};
use crate::losses::{
    coarse_point_residual, l_geo_map, l_photo, r_edge, r_poisson, r_smooth, total_loss, AlignedMono, LossBreakdown,
    LossTerms, LossWeights, ProjectedPoint, Stage, EDGE_TAU,
};
use crate::meshing::{build_depth_mesh, decimate, DepthMesh, FZ_MAX, FZ_MIN};
use crate::metrics::{compute_metrics, MetricsReport, MAX_EVAL_DEPTH};
use crate::optim::Adam;
use crate::raster::{
    apply_vertex_params, render, render_backward_points, Camera, FieldOutputs, RenderOutput, Shading, VertexParamGrads,
    VertexPositions, FRUSTUM_EPS,
};
use crate::scene::Scene;

/// Default calibration width for per-pixel image-gradient quantities.
pub const REFERENCE_WIDTH: f64 = 1200.0;

/// How rendered auxiliary views are colored for the photometric term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShadingMode {
    /// Surface points take the reference image's color where they project.
    ReferenceTexture,
    /// Interpolated per-vertex colors sampled once at mesh construction.
    VertexColors,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Mesh downsample factor: one vertex per `d` pixels.
    pub d: usize,
    /// Fraction of vertices kept by decimation.
    pub r: f64,
    pub coarse_iters: usize,
    pub local_iters: usize,
    pub lr_coarse: f64,
    pub lr_local: f64,
    /// Auxiliary views rendered per local iteration.
    pub batch: usize,
    pub field: FieldConfig,
    /// Edge threshold at the reference width.
    pub tau: f64,
    pub weights: LossWeights,
    pub shading: ShadingMode,
    /// Propagate the photometric occlusion mask's dependence on depth.
    pub photo_mask_gradient: bool,
    /// Image width (pixels) at which `tau` and the Poisson and silhouette
    /// weights are calibrated.
    pub reference_width: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            d: 4,
            r: 0.5,
            coarse_iters: 400,
            local_iters: 700,
            lr_coarse: 0.001,
            lr_local: 0.0005,
            batch: 22,
            field: FieldConfig::mlp_s(),
            tau: EDGE_TAU,
            weights: LossWeights::default(),
            shading: ShadingMode::ReferenceTexture,
            photo_mask_gradient: false,
            reference_width: REFERENCE_WIDTH,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d == 0 {
            return bad("downsample factor d must be at least 1".into());
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return bad(format!("keep ratio r must be in (0, 1], got {}", self.r));
        }
        if !(self.lr_coarse > 0.0 && self.lr_local > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("edge threshold must be positive, got {}", self.tau));
        }
        if !(self.reference_width > 0.0 && self.reference_width.is_finite()) {
            return bad(format!(
                "reference width must be positive, got {}",
                self.reference_width
            ));
        }
        self.field.validate()?;
        self.weights.validate()
    }

    /// `width / reference_width`.
    pub fn resolution_scale(&self, width: usize) -> f64 {
        width as f64 / self.reference_width
    }

    /// Edge threshold for images `width` pixels wide. Sobel magnitudes are
    /// per pixel, so they shrink as resolution grows.
    pub fn edge_threshold(&self, width: usize) -> f64 {
        self.tau / self.resolution_scale(width)
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let field = match self.field.mode {
            FieldMode::None => "none".to_string(),
            FieldMode::GlobalAffine => "affine".to_string(),
            FieldMode::Mlp => format!(
                "mlp({}x{},m={},k={})",
                self.field.layers, self.field.width, self.field.m, self.field.k
            ),
        };
        let w = &self.weights;
        write!(
            f,
            "d={} r={} coarse_iters={} local_iters={} lr_coarse={} lr_local={} batch={} field={} tau={} \
             w_photo={} w_geo={} w_p={} w_e={} w_s={} shading={:?} photo_mask_gradient={} reference_width={} seed={}",
            self.d,
            self.r,
            self.coarse_iters,
            self.local_iters,
            self.lr_coarse,
            self.lr_local,
            self.batch,
            field,
            self.tau,
            w.photo,
            w.geo,
            w.poisson,
            w.edge,
            w.smooth,
            self.shading,
            self.photo_mask_gradient,
            self.reference_width,
            self.seed
        )
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Result of [`global_align`]: `D^g = a·D^r + b`.
#[derive(Clone, Debug)]
pub struct GlobalAlignment {
    pub a: f64,
    pub b: f64,
    pub depth: DepthMap,
    /// True when the two-statistic fit produced a non-positive scale and the
    /// median ratio was used instead.
    pub fallback: bool,
}

/// Matches the median and 0.1th percentile of the mono map to those of the
/// sparse points' depths. Pixels mapped to non-positive depth become invalid.
pub fn global_align(mono: &DepthMap, point_depths: &[f64]) -> Result<GlobalAlignment> {
    let sorted = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v
    };
    let md = sorted(mono.valid_values().collect());
    let xd = sorted(point_depths.to_vec());
    if md.len() < 2 || xd.len() < 2 {
        return Err(Error::Degenerate("need at least two mono values and two points".into()));
    }
    let (m_d, q_d) = (quantile(&md, 0.5), quantile(&md, 0.001));
    let (m_x, q_x) = (quantile(&xd, 0.5), quantile(&xd, 0.001));
    if m_d == q_d {
        return Err(Error::Degenerate(format!("median and 0.1th percentile are both {m_d}")));
    }
    let mut a = (m_x - q_x) / (m_d - q_d);
    let mut b = m_x - a * m_d;
    let mut fallback = false;
    if !(a > 0.0) {
        if !(m_d > 0.0) {
            return Err(Error::Degenerate(format!("non-positive mono median {m_d}")));
        }
        warn!("global alignment scale {a} is not positive; using the median ratio");
        a = m_x / m_d;
        b = 0.0;
        fallback = true;
    }
    Ok(GlobalAlignment {
        a,
        b,
        depth: mono.map_valid(|z| if a * z + b > 0.0 { a * z + b } else { f64::NAN }),
        fallback,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageMarker {
    Coarse,
    Baked,
    Local,
    Done,
}

/// One iteration's record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub stage: Stage,
    pub loss: LossBreakdown,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.loss.terms;
        write!(
            f,
            "iter={} stage={} total={:.6e} geo={:.6e} photo={:.6e} rs={:.6e} rp={:.6e} re={:.6e}",
            self.iter,
            self.stage.name(),
            self.loss.total,
            t.geo,
            t.photo,
            t.smooth,
            t.poisson,
            t.edge
        )
    }
}

/// Everything the optimization carries between iterations.
#[derive(Clone, Debug)]
pub struct RefinementState {
    pub mesh: DepthMesh,
    pub field_config: FieldConfig,
    pub field: FieldParams,
    pub stage: StageMarker,
    pub iteration: usize,
    pub history: Vec<LogEntry>,
    adam_field: Adam,
    adam_du: Adam,
    adam_dv: Adam,
    adam_fz: Adam,
    reference: Camera,
    mono: AlignedMono,
    mono_norm: Plane,
    mono_edges: Plane,
    /// Width relative to the calibration width.
    scale: f64,
    /// Edge threshold at this resolution.
    tau: f64,
    /// Per vertex: whether `Δu` / `Δv` is held at zero (frame border).
    pinned: Vec<(bool, bool)>,
    points: Vec<ProjectedPoint>,
    rng: ChaCha8Rng,
    queue: Vec<usize>,
}

/// Terms, depth cotangent and edge-attraction coordinate gradients.
type ReferenceTerms = (LossTerms, Vec<f64>, Vec<(f64, f64)>);

impl RefinementState {
    /// Meshes the aligned mono map and draws the initial field.
    pub fn new(scene: &Scene, aligned: &DepthMap, config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let reference = scene.reference_camera()?;
        let c = &reference.intrinsics;
        let mesh = build_depth_mesh(aligned, &scene.reference.image, c, config.d, &reference.proj)?;
        if mesh.faces.is_empty() {
            return Err(Error::Validation("mesh has no faces".into()));
        }
        let points = scene.projected_points();
        if points.is_empty() {
            return Err(Error::Validation(
                "no sparse point projects into the reference view".into(),
            ));
        }
        let (w, h) = (c.width, c.height);
        let plane = Plane {
            width: w,
            height: h,
            data: aligned.values().to_vec(),
        };
        let mono = AlignedMono::new(plane, aligned.mask().to_vec())?;
        let norm = normalize01(&mono.depth.data, &mono.mask, w, h);
        let tau = config.edge_threshold(w);
        let mono_edges = sobel_edge_image(&norm.plane, &mono.mask, tau).edges;
        let field = field_init(&config.field, config.seed)?;
        let n = mesh.len();
        let pinned = border_pins(&mesh);
        Ok(RefinementState {
            adam_field: Adam::new(field.values.len()),
            adam_du: Adam::new(n),
            adam_dv: Adam::new(n),
            adam_fz: Adam::new(n),
            field_config: config.field,
            field,
            mesh,
            stage: StageMarker::Coarse,
            iteration: 0,
            history: Vec::new(),
            reference,
            mono,
            mono_norm: norm.plane,
            mono_edges,
            scale: config.resolution_scale(w),
            tau,
            pinned,
            points,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed),
            queue: Vec::new(),
        })
    }

    /// Ψ's inputs for every vertex: base `(u', v')` and normalized depth.
    fn field_inputs(&self) -> Vec<(f64, f64, f64)> {
        let p = &self.reference.proj;
        (0..self.mesh.len())
            .map(|i| {
                let z = depth_to_linear_unchecked(self.mesh.z_ndc[i], p.near, p.far);
                (self.mesh.ndc[i][0], self.mesh.ndc[i][1], self.mono.normalize(z))
            })
            .collect()
    }

    pub fn field_outputs(&self) -> Result<FieldOutputs> {
        let mut out = FieldOutputs::zeros(self.mesh.len());
        if self.field_config.mode == FieldMode::None {
            return Ok(out);
        }
        for (i, (u, v, z)) in self.field_inputs().into_iter().enumerate() {
            let (o, s) = field_eval(&self.field, &self.field_config, u, v, z)?;
            out.offset[i] = o;
            out.scale[i] = s;
        }
        Ok(out)
    }

    pub fn positions(&self) -> Result<VertexPositions> {
        apply_vertex_params(&self.mesh, &self.field_outputs()?, &self.reference.proj)
    }

    /// Renders the reference view with the current parameters.
    pub fn render_reference(&self) -> Result<RenderOutput> {
        let pos = self.positions()?;
        Ok(render(
            &pos,
            &self.mesh,
            &self.reference,
            &self.reference,
            Shading::VertexColors,
        ))
    }

    /// Remapped mono depth `z^g(1+s)+o` per pixel (Ψ evaluated per pixel).
    pub fn coarse_depth(&self) -> Result<DepthMap> {
        let (w, h) = (self.mono.depth.width, self.mono.depth.height);
        let mut out = DepthMap::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !self.mono.mask[i] {
                    continue;
                }
                let zg = self.mono.depth.data[i];
                let u = crate::camera::pixel_to_ndc(x as f64 + 0.5, w);
                let v = crate::camera::pixel_to_ndc(y as f64 + 0.5, h);
                let (o, s) = field_eval(&self.field, &self.field_config, u, v, self.mono.normalize(zg))?;
                out.set(x, y, zg * (1.0 + s) + o);
            }
        }
        Ok(out)
    }

    fn next_batch(&mut self, n_aux: usize, batch: usize) -> Vec<usize> {
        let k = batch.min(n_aux);
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.queue.is_empty() {
                self.queue = (0..n_aux).collect();
                self.queue.shuffle(&mut self.rng);
            }
            let v = self.queue.pop().unwrap();
            if !out.contains(&v) {
                out.push(v);
            }
        }
        out.sort_unstable();
        out
    }

    /// Terms rendered in the reference view; returns the terms, the depth
    /// cotangent (weighted) and the weighted edge-attraction coordinate
    /// gradients in pixels.
    ///
    /// The Poisson term enters as `(s·R_p)²` and the silhouette part of the
    /// edge term as `s·S²`, with `s` the width relative to the reference
    /// width.
    fn reference_terms(&self, out: &RenderOutput, w: &LossWeights) -> Result<ReferenceTerms> {
        let (width, height) = (out.width(), out.height());
        let depth = Plane {
            width,
            height,
            data: out
                .depth
                .values()
                .iter()
                .zip(&out.coverage)
                .map(|(z, c)| if *c { *z } else { 0.0 })
                .collect(),
        };
        let cov = &out.coverage;
        let s = self.scale;
        let mut terms = LossTerms::default();
        let mut cot = vec![0.0; width * height];
        let mut add = |c: &Plane, k: f64| {
            if k != 0.0 {
                for (a, b) in cot.iter_mut().zip(&c.data) {
                    *a += k * b;
                }
            }
        };
        let geo = l_geo_map(&depth, cov, &self.points)?;
        terms.geo = geo.value;
        add(&geo.cot_depth, w.geo);

        let rs = r_smooth(&depth, cov);
        terms.smooth = rs.value;
        add(&rs.cot_depth, w.smooth);

        let norm = normalize01(&depth.data, cov, width, height);
        let rp = r_poisson(&norm.plane, cov, &self.mono_norm, &self.mono.mask, &self.mono_edges);
        terms.poisson = (s * rp.value).powi(2);
        add(&rp.cot_depth, w.poisson * 2.0 * s * s * rp.value * norm.slope());

        let coords: Vec<(f64, f64)> = (0..self.mesh.len()).map(|i| self.mesh.pixel_position(i)).collect();
        let re = r_edge(&depth, cov, &self.mono_edges, &coords, self.tau);
        terms.edge = s * re.silhouette.powi(2) + re.attraction;
        add(&re.cot_depth, w.edge * 2.0 * s * re.silhouette);
        let coord_grads = re.cot_coords.iter().map(|(u, v)| (u * w.edge, v * w.edge)).collect();
        Ok((terms, cot, coord_grads))
    }

    fn record(&mut self, stage: Stage, loss: LossBreakdown) {
        let entry = LogEntry {
            iter: self.iteration,
            stage,
            loss,
        };
        info!("{entry}");
        self.history.push(entry);
        self.iteration += 1;
    }

    fn project_offsets(&mut self) {
        let (lu, lv) = (self.mesh.du_limit(), self.mesh.dv_limit());
        for (i, &(pu, pv)) in self.pinned.iter().enumerate() {
            self.mesh.du[i] = if pu { 0.0 } else { self.mesh.du[i].clamp(-lu, lu) };
            self.mesh.dv[i] = if pv { 0.0 } else { self.mesh.dv[i].clamp(-lv, lv) };
        }
        self.mesh.fz.iter_mut().for_each(|f| *f = f.clamp(FZ_MIN, FZ_MAX));
    }

    /// Adds the edge-attraction gradients (pixels) to the offset gradients.
    fn add_coord_grads(&self, grads: &mut VertexParamGrads, coord: &[(f64, f64)]) {
        let (hw, hh) = (0.5 * self.mesh.width as f64, 0.5 * self.mesh.height as f64);
        for (i, (gu, gv)) in coord.iter().enumerate() {
            grads.du[i] += gu * hw;
            grads.dv[i] += gv * hh;
        }
    }

    /// One coarse iteration; returns the loss before the update.
    pub fn coarse_step(&mut self, config: &PipelineConfig) -> Result<LossBreakdown> {
        let outputs = self.field_outputs()?;
        let pos = apply_vertex_params(&self.mesh, &outputs, &self.reference.proj)?;
        let out = render(
            &pos,
            &self.mesh,
            &self.reference,
            &self.reference,
            Shading::VertexColors,
        );
        let w = config.weights;
        let (mut terms, cot, coord) = self.reference_terms(&out, &w)?;
        let coarse = coarse_point_residual(&self.mono, &self.field, &self.field_config, &self.points)?;
        terms.geo += coarse.value;
        let loss = total_loss(terms, &w, Stage::Coarse)?;

        let g_pts = render_backward_points(&out, &pos, &self.mesh, None, Some(&cot), Shading::VertexColors)?;
        let mut grads = VertexParamGrads::from_point_grads(&pos, &g_pts);
        self.add_coord_grads(&mut grads, &coord);
        let mut g_field: Vec<f64> = coarse.grad_field.iter().map(|g| g * w.geo).collect();
        if self.field_config.mode != FieldMode::None {
            for (i, x) in self.field_inputs().into_iter().enumerate() {
                if grads.offset[i] != 0.0 || grads.scale[i] != 0.0 {
                    field_backward(
                        &self.field,
                        &self.field_config,
                        x,
                        (grads.offset[i], grads.scale[i]),
                        &mut g_field,
                    )?;
                }
            }
        }
        self.adam_field
            .step(&mut self.field.values, &g_field, config.lr_coarse)?;
        self.adam_du.step(&mut self.mesh.du, &grads.du, config.lr_coarse)?;
        self.adam_dv.step(&mut self.mesh.dv, &grads.dv, config.lr_coarse)?;
        self.project_offsets();
        self.record(Stage::Coarse, loss);
        Ok(loss)
    }

    /// One local iteration over the reference view and a batch of auxiliary
    /// views; returns the loss before the update.
    pub fn local_step(&mut self, scene: &Scene, config: &PipelineConfig) -> Result<LossBreakdown> {
        let pos = self.positions()?;
        let out = render(
            &pos,
            &self.mesh,
            &self.reference,
            &self.reference,
            Shading::VertexColors,
        );
        let w = config.weights;
        let (mut terms, cot, coord) = self.reference_terms(&out, &w)?;
        let mut g_pts = render_backward_points(&out, &pos, &self.mesh, None, Some(&cot), Shading::VertexColors)?;

        if w.photo > 0.0 && !scene.aux.is_empty() {
            let batch = self.next_batch(scene.aux.len(), config.batch);
            let ref_proj = self.reference.proj;
            let shading = match config.shading {
                ShadingMode::ReferenceTexture => Shading::ReferenceTexture {
                    image: &scene.reference.image,
                    proj: &ref_proj,
                },
                ShadingMode::VertexColors => Shading::VertexColors,
            };
            let inv = 1.0 / batch.len() as f64;
            for k in batch {
                let view = &scene.aux[k];
                let cam = scene.camera(view)?;
                let o = render(&pos, &self.mesh, &cam, &self.reference, shading);
                let depth = Plane {
                    width: o.width(),
                    height: o.height(),
                    data: o
                        .depth
                        .values()
                        .iter()
                        .zip(&o.coverage)
                        .map(|(z, c)| if *c { *z } else { 0.0 })
                        .collect(),
                };
                let photo = l_photo(&o.color, &view.image, &depth, &o.coverage, self.tau)?;
                terms.photo += photo.value * inv;
                let k = w.photo * inv;
                let cc: Vec<[f64; 3]> = photo.cot_color.iter().map(|c| c.map(|v| v * k)).collect();
                let cd: Option<Vec<f64>> = config
                    .photo_mask_gradient
                    .then(|| photo.cot_depth.data.iter().map(|v| v * k).collect());
                let g = render_backward_points(&o, &pos, &self.mesh, Some(&cc), cd.as_deref(), shading)?;
                for (a, b) in g_pts.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        let loss = total_loss(terms, &w, Stage::Local)?;
        let mut grads = VertexParamGrads::from_point_grads(&pos, &g_pts);
        self.add_coord_grads(&mut grads, &coord);
        self.adam_du.step(&mut self.mesh.du, &grads.du, config.lr_local)?;
        self.adam_dv.step(&mut self.mesh.dv, &grads.dv, config.lr_local)?;
        self.adam_fz.step(&mut self.mesh.fz, &grads.fz, config.lr_local)?;
        self.project_offsets();
        self.record(Stage::Local, loss);
        Ok(loss)
    }

    /// Folds Ψ into the mesh depths, drops Ψ and decimates.
    pub fn bake_and_decimate(&mut self, config: &PipelineConfig) -> Result<()> {
        if self.stage != StageMarker::Coarse {
            return Err(Error::Validation(format!("cannot bake from stage {:?}", self.stage)));
        }
        let outputs = self.field_outputs()?;
        let p = self.reference.proj;
        let (lo, hi) = (p.near + FRUSTUM_EPS, p.far - FRUSTUM_EPS);
        if self.field_config.mode != FieldMode::None {
            for i in 0..self.mesh.len() {
                let z = depth_to_linear_unchecked(self.mesh.z_ndc[i], p.near, p.far);
                let baked = (z * (1.0 + outputs.scale[i]) + outputs.offset[i]).clamp(lo, hi);
                self.mesh.z_ndc[i] = depth_to_reciprocal_unchecked(baked, p.near, p.far);
            }
        }
        self.field_config = FieldConfig::none();
        self.field = FieldParams { values: Vec::new() };
        self.adam_field = Adam::new(0);
        let dec = decimate(&self.mesh, config.r)?;
        let n = dec.mesh.len();
        self.adam_du = self.adam_du.remap(&dec.remap, n);
        self.adam_dv = self.adam_dv.remap(&dec.remap, n);
        self.adam_fz = Adam::new(n);
        info!("baked and decimated: {} -> {n} vertices", self.mesh.len());
        self.mesh = dec.mesh;
        self.pinned = border_pins(&self.mesh);
        self.stage = StageMarker::Baked;
        Ok(())
    }

    pub fn coarse_stage(&mut self, config: &PipelineConfig) -> Result<()> {
        let mut first = None;
        for _ in 0..config.coarse_iters {
            let loss = self.coarse_step(config)?;
            check_divergence(&mut first, loss.total, Stage::Coarse, self.iteration)?;
        }
        Ok(())
    }

    pub fn local_stage(&mut self, scene: &Scene, config: &PipelineConfig) -> Result<()> {
        if self.stage != StageMarker::Baked {
            return Err(Error::Validation(format!(
                "local stage needs a baked mesh, stage is {:?}",
                self.stage
            )));
        }
        self.stage = StageMarker::Local;
        let mut first = None;
        for _ in 0..config.local_iters {
            let loss = self.local_step(scene, config)?;
            check_divergence(&mut first, loss.total, Stage::Local, self.iteration)?;
        }
        self.stage = StageMarker::Done;
        Ok(())
    }
}

/// Vertices on the outer grid columns keep `Δu = 0` and those on the outer
/// rows keep `Δv = 0`, so the mesh cannot shrink away from the frame.
fn border_pins(mesh: &DepthMesh) -> Vec<(bool, bool)> {
    let range = |k: usize| {
        mesh.ndc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[k]), hi.max(p[k]))
        })
    };
    let ((u0, u1), (v0, v1)) = (range(0), range(1));
    mesh.ndc
        .iter()
        .map(|p| (p[0] == u0 || p[0] == u1, p[1] == v0 || p[1] == v1))
        .collect()
}

/// The guard trips when the total rises by more than nine times the size of
/// the stage's first total (so `10×` for a positive start).
fn check_divergence(first: &mut Option<f64>, total: f64, stage: Stage, iter: usize) -> Result<()> {
    let initial = *first.get_or_insert(total);
    if !total.is_finite() || (total - initial > 9.0 * initial.abs() && total > 1e-12) {
        return Err(Error::Diverged(format!(
            "{} loss {total:.6e} at iteration {iter} exceeds 10x its initial value {initial:.6e}",
            stage.name()
        )));
    }
    Ok(())
}

/// Outputs of [`run`].
#[derive(Clone, Debug)]
pub struct RunResult {
    /// Refined reference depth.
    pub depth: DepthMap,
    /// Globally aligned mono depth the refinement started from.
    pub initial: DepthMap,
    pub alignment: GlobalAlignment,
    pub mesh: DepthMesh,
    pub history: Vec<LogEntry>,
    /// `(initial, final)` when ground truth is available.
    pub metrics: Option<(MetricsReport, MetricsReport)>,
}

/// Runs the whole method on a scene.
pub fn run(scene: &Scene, config: &PipelineConfig) -> Result<RunResult> {
    config.validate()?;
    info!("config {config}");
    let depths: Vec<f64> = scene.projected_points().iter().map(|p| p.z).collect();
    let alignment = global_align(&scene.mono, &depths)?;
    info!("global alignment a={} b={}", alignment.a, alignment.b);
    let mut state = RefinementState::new(scene, &alignment.depth, config)?;
    state.coarse_stage(config)?;
    state.bake_and_decimate(config)?;
    state.local_stage(scene, config)?;
    let depth = state.render_reference()?.depth;
    let metrics = match &scene.gt {
        Some(gt) => Some((
            compute_metrics(&alignment.depth, gt, MAX_EVAL_DEPTH)?,
            compute_metrics(&depth, gt, MAX_EVAL_DEPTH)?,
        )),
        None => None,
    };
    Ok(RunResult {
        depth,
        initial: alignment.depth.clone(),
        alignment,
        mesh: state.mesh,
        history: state.history,
        metrics,
    })
}

/// Reference-frame pixel position of a vertex's current image coordinate.
pub fn vertex_pixel(mesh: &DepthMesh, i: usize) -> (f64, f64) {
    (
        ndc_to_pixel(mesh.ndc[i][0] + mesh.du[i], mesh.width),
        ndc_to_pixel(mesh.ndc[i][1] + mesh.dv[i], mesh.height),
    )
}
