//! Objective terms and their cotangents.
//!
//! Every `‖·‖₂` below is a root mean square over the elements that
//! contribute, so values do not scale with image size. Each function returns
//! its value together with the cotangent images (or parameter gradients)
//! needed to backpropagate a unit weight.

use crate::error::{Error, Result};
use crate::field::{field_backward, field_eval, FieldConfig, FieldParams};
use crate::image::ColorImage;
use crate::imageops::{
    gaussian_blur5, gaussian_blur5_backward, normalize01, pixel_to_index, sobel_edge_backward, sobel_edge_image,
    spatial_gradients, spatial_gradients_backward, BilinearTaps, Plane,
};

/// Huber threshold for the point term, in meters.
pub const HUBER_DELTA: f64 = 0.5;

/// Default edge threshold on depth normalized to `[0, 1]`.
pub const EDGE_TAU: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub photo: f64,
    pub geo: f64,
    pub poisson: f64,
    pub edge: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            photo: 1.0,
            geo: 0.1,
            poisson: 400.0,
            edge: 0.1,
            smooth: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.photo, self.geo, self.poisson, self.edge, self.smooth];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Local,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Local => "local",
        }
    }
}

/// Unweighted term values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub geo: f64,
    pub photo: f64,
    pub smooth: f64,
    pub poisson: f64,
    pub edge: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    /// Weights actually applied; the photometric weight is 0 in the coarse stage.
    pub weights: LossWeights,
    pub total: f64,
}

/// Weighted sum of the terms. The photometric term only counts in the local
/// stage.
pub fn total_loss(terms: LossTerms, w: &LossWeights, stage: Stage) -> Result<LossBreakdown> {
    for (name, v) in [
        ("geo", terms.geo),
        ("photo", terms.photo),
        ("smooth", terms.smooth),
        ("poisson", terms.poisson),
        ("edge", terms.edge),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} is {v}")));
        }
    }
    let weights = LossWeights {
        photo: if stage == Stage::Local { w.photo } else { 0.0 },
        ..*w
    };
    let total = weights.geo * terms.geo
        + weights.smooth * terms.smooth
        + weights.poisson * terms.poisson
        + weights.edge * terms.edge
        + weights.photo * terms.photo;
    Ok(LossBreakdown { terms, weights, total })
}

pub fn huber(a: f64, delta: f64) -> f64 {
    if a.abs() <= delta {
        0.5 * a * a
    } else {
        delta * (a.abs() - 0.5 * delta)
    }
}

pub fn huber_derivative(a: f64, delta: f64) -> f64 {
    a.clamp(-delta, delta)
}

/// Root mean square of `r` over `n` elements and the factor turning a
/// residual into its cotangent (`∂rms/∂r_i = r_i · factor`).
fn rms(sum_sq: f64, n: usize) -> (f64, f64) {
    if n == 0 || sum_sq == 0.0 {
        return (0.0, 0.0);
    }
    let v = (sum_sq / n as f64).sqrt();
    (v, 1.0 / (n as f64 * v))
}

/// A scalar with a cotangent image on the rendered depth.
#[derive(Clone, Debug)]
pub struct DepthLoss {
    pub value: f64,
    pub cot_depth: Plane,
}

/// Smoothness: RMS of `D - blur(D)` over covered pixels.
pub fn r_smooth(depth: &Plane, mask: &[bool]) -> DepthLoss {
    let blurred = gaussian_blur5(depth, mask);
    let mut resid = Plane::new(depth.width, depth.height);
    let (mut ss, mut n) = (0.0, 0);
    for i in 0..depth.data.len() {
        if mask[i] {
            let r = depth.data[i] - blurred.data[i];
            resid.data[i] = r;
            ss += r * r;
            n += 1;
        }
    }
    let (value, f) = rms(ss, n);
    resid.data.iter_mut().for_each(|r| *r *= f);
    let back = gaussian_blur5_backward(mask, &resid);
    let mut cot = resid;
    for (c, b) in cot.data.iter_mut().zip(&back.data) {
        *c -= b;
    }
    DepthLoss { value, cot_depth: cot }
}

/// Edge alignment result: the two parts, the cotangent on the rendered depth
/// and per-vertex gradients on pixel coordinates.
#[derive(Clone, Debug)]
pub struct EdgeLoss {
    pub value: f64,
    pub silhouette: f64,
    pub attraction: f64,
    pub cot_depth: Plane,
    pub cot_coords: Vec<(f64, f64)>,
}

/// Edge alignment. The first part compares the positive (surface) parts of
/// the edge images of the rendered depth and the mono map; the second is the
/// mean of the mono edge image sampled at the vertices, which pulls vertices
/// onto mono edges. `coords` are pixel coordinates.
pub fn r_edge(depth: &Plane, coverage: &[bool], mono_edges: &Plane, coords: &[(f64, f64)], tau: f64) -> EdgeLoss {
    let (w, h) = (depth.width, depth.height);
    let norm = normalize01(&depth.data, coverage, w, h);
    let est = sobel_edge_image(&norm.plane, coverage, tau);
    let mut diff = Plane::new(w, h);
    let mut ss = 0.0;
    for i in 0..w * h {
        let d = est.edges.data[i].max(0.0) - mono_edges.data[i].max(0.0);
        diff.data[i] = d;
        ss += d * d;
    }
    let (silhouette, f) = rms(ss, w * h);
    for (i, d) in diff.data.iter_mut().enumerate() {
        *d = if est.edges.data[i] > 0.0 { *d * f } else { 0.0 };
    }
    let mut cot_depth = sobel_edge_backward(&est, &diff);
    let slope = norm.slope();
    for (c, ok) in cot_depth.data.iter_mut().zip(coverage) {
        *c = if *ok { *c * slope } else { 0.0 };
    }

    let mut attraction = 0.0;
    let mut cot_coords = Vec::with_capacity(coords.len());
    let inv = if coords.is_empty() {
        0.0
    } else {
        1.0 / coords.len() as f64
    };
    for &(u, v) in coords {
        let taps = BilinearTaps::new(w, h, pixel_to_index(u), pixel_to_index(v));
        attraction += taps.sample(&mono_edges.data) * inv;
        let (gu, gv) = taps.coord_grad(&mono_edges.data);
        cot_coords.push((gu * inv, gv * inv));
    }
    EdgeLoss {
        value: silhouette + attraction,
        silhouette,
        attraction,
        cot_depth,
        cot_coords,
    }
}

/// Gradient-domain detail transfer: RMS of `max(0, E^r)·(∇D̃ − ∇M̃)` for each
/// axis. Both maps are expected normalized to `[0, 1]`; the cotangent is with
/// respect to `D̃`. Elements are the pixels valid in both maps.
pub fn r_poisson(depth: &Plane, coverage: &[bool], mono: &Plane, mono_mask: &[bool], mono_edges: &Plane) -> DepthLoss {
    let (w, h) = (depth.width, depth.height);
    let mask: Vec<bool> = coverage.iter().zip(mono_mask).map(|(a, b)| *a && *b).collect();
    let n = mask.iter().filter(|m| **m).count();
    let (du, dv) = spatial_gradients(depth, &mask);
    let (mu, mv) = spatial_gradients(mono, &mask);
    let mut value = 0.0;
    let mut cots = Vec::with_capacity(2);
    for (d, m) in [(&du, &mu), (&dv, &mv)] {
        let mut r = Plane::new(w, h);
        let mut ss = 0.0;
        for i in 0..w * h {
            if mask[i] {
                let k = mono_edges.data[i].max(0.0);
                r.data[i] = k * (d.data[i] - m.data[i]);
                ss += r.data[i] * r.data[i];
            }
        }
        let (v, f) = rms(ss, n);
        value += v;
        for i in 0..w * h {
            r.data[i] *= f * mono_edges.data[i].max(0.0);
        }
        cots.push(r);
    }
    DepthLoss {
        value,
        cot_depth: spatial_gradients_backward(&mask, &cots[0], &cots[1]),
    }
}

/// A sparse point seen from the reference camera: pixel coordinates and
/// camera depth in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

#[derive(Clone, Debug)]
pub struct GeoLoss {
    pub value: f64,
    /// Fraction of points that landed on uncovered pixels.
    pub miss_fraction: f64,
    pub cot_depth: Plane,
}

/// `(1/|X|) Σ H(z^D − z^X)/z^X` with `z^D` sampled bilinearly from `depth`.
/// Points whose taps touch an uncovered pixel contribute nothing.
pub fn l_geo_map(depth: &Plane, coverage: &[bool], points: &[ProjectedPoint]) -> Result<GeoLoss> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("point loss needs at least one point".into()));
    }
    let inv = 1.0 / points.len() as f64;
    let mut cot = Plane::new(depth.width, depth.height);
    let (mut value, mut misses) = (0.0, 0usize);
    for p in points {
        let taps = BilinearTaps::new(depth.width, depth.height, pixel_to_index(p.u), pixel_to_index(p.v));
        if !taps.all_valid(coverage) {
            misses += 1;
            continue;
        }
        let a = taps.sample(&depth.data) - p.z;
        value += huber(a, HUBER_DELTA) / p.z * inv;
        taps.scatter(huber_derivative(a, HUBER_DELTA) / p.z * inv, &mut cot.data);
    }
    Ok(GeoLoss {
        value,
        miss_fraction: misses as f64 * inv,
        cot_depth: cot,
    })
}

/// The globally aligned mono map with what Ψ needs to read it.
#[derive(Clone, Debug)]
pub struct AlignedMono {
    pub depth: Plane,
    pub mask: Vec<bool>,
    /// `(min, max)` used to normalize depth for Ψ's third input.
    pub range: (f64, f64),
}

impl AlignedMono {
    pub fn new(depth: Plane, mask: Vec<bool>) -> Result<Self> {
        let range = depth
            .data
            .iter()
            .zip(&mask)
            .filter(|(_, ok)| **ok)
            .fold(None, |acc: Option<(f64, f64)>, (v, _)| match acc {
                None => Some((*v, *v)),
                Some((lo, hi)) => Some((lo.min(*v), hi.max(*v))),
            })
            .ok_or_else(|| Error::Degenerate("mono map has no valid pixels".into()))?;
        Ok(AlignedMono { depth, mask, range })
    }

    /// Depth normalized to `[0, 1]` over the frame.
    pub fn normalize(&self, z: f64) -> f64 {
        let (lo, hi) = self.range;
        if hi > lo {
            (z - lo) / (hi - lo)
        } else {
            0.5
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoarseLoss {
    pub value: f64,
    pub grad_field: Vec<f64>,
}

/// The point term evaluated directly on the remapped mono map: at each point
/// `z^c = z^g(1+s) + o` with `(o, s)` from Ψ at the point's position.
pub fn coarse_point_residual(
    mono: &AlignedMono,
    params: &FieldParams,
    config: &FieldConfig,
    points: &[ProjectedPoint],
) -> Result<CoarseLoss> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("point loss needs at least one point".into()));
    }
    let (w, h) = (mono.depth.width, mono.depth.height);
    let inv = 1.0 / points.len() as f64;
    let mut grad = vec![0.0; params.values.len()];
    let mut value = 0.0;
    for p in points {
        let taps = BilinearTaps::new(w, h, pixel_to_index(p.u), pixel_to_index(p.v));
        if !taps.all_valid(&mono.mask) {
            continue;
        }
        let zg = taps.sample(&mono.depth.data);
        let (un, vn) = (crate::camera::pixel_to_ndc(p.u, w), crate::camera::pixel_to_ndc(p.v, h));
        let zn = mono.normalize(zg);
        let (o, s) = field_eval(params, config, un, vn, zn)?;
        let a = zg * (1.0 + s) + o - p.z;
        value += huber(a, HUBER_DELTA) / p.z * inv;
        let g = huber_derivative(a, HUBER_DELTA) / p.z * inv;
        field_backward(params, config, (un, vn, zn), (g, g * zg), &mut grad)?;
    }
    Ok(CoarseLoss {
        value,
        grad_field: grad,
    })
}

#[derive(Clone, Debug)]
pub struct PhotoLoss {
    pub value: f64,
    pub cot_color: Vec<[f64; 3]>,
    pub cot_depth: Plane,
}

/// Photometric error between a rendered and a captured view, masked by the
/// positive part of the rendered depth's edge image so that disocclusions
/// (stretched triangles) are ignored. RMS over covered pixels of the
/// per-pixel squared error summed over channels.
pub fn l_photo(
    rendered: &ColorImage,
    captured: &ColorImage,
    depth: &Plane,
    coverage: &[bool],
    tau: f64,
) -> Result<PhotoLoss> {
    let (w, h) = (depth.width, depth.height);
    if rendered.width() != w || rendered.height() != h || captured.width() != w || captured.height() != h {
        return Err(Error::Shape("photometric loss images differ in size".into()));
    }
    let norm = normalize01(&depth.data, coverage, w, h);
    let edges = sobel_edge_image(&norm.plane, coverage, tau);
    let (a, b) = (rendered.pixels(), captured.pixels());
    let mut ss = 0.0;
    let mut n = 0;
    let mut mask = vec![0.0; w * h];
    for i in 0..w * h {
        if !coverage[i] {
            continue;
        }
        n += 1;
        mask[i] = edges.edges.data[i].max(0.0);
        for ch in 0..3 {
            let e = mask[i] * (a[i][ch] - b[i][ch]);
            ss += e * e;
        }
    }
    let (value, f) = rms(ss, n);
    let mut cot_color = vec![[0.0; 3]; w * h];
    let mut cot_edges = Plane::new(w, h);
    if f > 0.0 {
        for i in 0..w * h {
            if !coverage[i] {
                continue;
            }
            let mut cm = 0.0;
            for ch in 0..3 {
                let d = a[i][ch] - b[i][ch];
                let g = mask[i] * d * f;
                cot_color[i][ch] = mask[i] * g;
                cm += g * d;
            }
            if edges.edges.data[i] > 0.0 {
                cot_edges.data[i] = cm;
            }
        }
    }
    let mut cot_depth = sobel_edge_backward(&edges, &cot_edges);
    let slope = norm.slope();
    for (c, ok) in cot_depth.data.iter_mut().zip(coverage) {
        *c = if *ok { *c * slope } else { 0.0 };
    }
    Ok(PhotoLoss {
        value,
        cot_color,
        cot_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;

    fn all(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    fn fd_check(f: impl Fn(&Plane) -> f64, x: &Plane, analytic: &Plane, mask: &[bool]) {
        let h = 1e-6;
        let scale = analytic.data.iter().map(|v| v.abs()).fold(1e-8, f64::max);
        for i in 0..x.data.len() {
            if !mask[i] {
                continue;
            }
            let mut a = x.clone();
            let mut b = x.clone();
            a.data[i] += h;
            b.data[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!(
                (fd - analytic.data[i]).abs() <= 1e-5 * scale.max(fd.abs()),
                "pixel {i}: fd {fd} analytic {}",
                analytic.data[i]
            );
        }
    }

    fn bumpy(w: usize, h: usize) -> Plane {
        Plane::from_fn(w, h, |x, y| {
            2.0 + 0.3 * (x as f64 * 0.9).sin() * (y as f64 * 0.6).cos() + 0.01 * x as f64
        })
    }

    #[test]
    fn weights_and_gating() {
        let w = LossWeights::default();
        assert_eq!(total_loss(LossTerms::default(), &w, Stage::Local).unwrap().total, 0.0);
        let t = LossTerms {
            geo: 1.0,
            ..Default::default()
        };
        assert!((total_loss(t, &w, Stage::Local).unwrap().total - 0.1).abs() < 1e-12);
        let t = LossTerms {
            poisson: 0.01,
            ..Default::default()
        };
        assert!((total_loss(t, &w, Stage::Local).unwrap().total - 4.0).abs() < 1e-12);
        let t = LossTerms {
            photo: 1.0,
            ..Default::default()
        };
        let coarse = total_loss(t, &w, Stage::Coarse).unwrap();
        assert_eq!((coarse.total, coarse.weights.photo), (0.0, 0.0));
        let t = LossTerms {
            edge: f64::NAN,
            ..Default::default()
        };
        assert!(total_loss(t, &w, Stage::Local)
            .unwrap_err()
            .to_string()
            .contains("edge"));
    }

    #[test]
    fn huber_branches() {
        assert!((huber(0.2, 0.5) - 0.02).abs() < 1e-15);
        assert!((huber(1.0, 0.5) - 0.375).abs() < 1e-15);
        assert_eq!(huber_derivative(-2.0, 0.5), -0.5);
    }

    #[test]
    fn smooth_examples() {
        let c = Plane::filled(9, 9, 3.0);
        assert!(r_smooth(&c, &all(81)).value.abs() < 1e-12);

        // impulse on a flat background, checked against a direct evaluation
        let mut img = Plane::filled(9, 9, 1.0);
        *img.at_mut(4, 4) += 0.5;
        let blurred = gaussian_blur5(&img, &all(81));
        let direct = (img
            .data
            .iter()
            .zip(&blurred.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 81.0)
            .sqrt();
        assert!((r_smooth(&img, &all(81)).value - direct).abs() < 1e-15);
        let k0 = gaussian_kernel_center();
        assert!((blurred.at(4, 4) - (1.0 + 0.5 * k0 * k0)).abs() < 1e-12);
    }

    fn gaussian_kernel_center() -> f64 {
        crate::imageops::gaussian_kernel5()[2]
    }

    #[test]
    fn smooth_ramp_interior_is_flat() {
        let ramp = Plane::from_fn(12, 12, |x, _| x as f64 * 0.1);
        let blurred = gaussian_blur5(&ramp, &all(144));
        for y in 0..12 {
            for x in 2..10 {
                assert!((blurred.at(x, y) - ramp.at(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smooth_gradient() {
        let img = bumpy(10, 8);
        let mut mask = all(80);
        mask[13] = false;
        mask[50] = false;
        let l = r_smooth(&img, &mask);
        fd_check(|p| r_smooth(p, &mask).value, &img, &l.cot_depth, &mask);
    }

    #[test]
    fn edge_examples() {
        let (w, h) = (8, 6);
        let step = Plane::from_fn(w, h, |x, _| if x >= 4 { 3.0 } else { 1.0 });
        let mono = sobel_edge_image(&normalize01(&step.data, &all(w * h), w, h).plane, &all(w * h), EDGE_TAU).edges;
        let coords = [(3.5, 1.5), (4.5, 3.5)];
        assert_eq!(mono.at(3, 1), -1.0);
        let l = r_edge(&step, &all(w * h), &mono, &coords, EDGE_TAU);
        assert!(l.silhouette.abs() < 1e-15);
        assert!((l.attraction + 1.0).abs() < 1e-15);

        let neg = Plane::filled(w, h, -0.4);
        let steep = Plane::from_fn(w, h, |x, _| x as f64);
        let l = r_edge(&steep, &all(w * h), &neg, &[], EDGE_TAU);
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn edge_attraction_gradient() {
        // pixel 0 of a row is +1, pixel 1 is -1
        let e = Plane::from_fn(2, 1, |x, _| if x == 0 { 1.0 } else { -1.0 });
        let d = Plane::filled(2, 1, 1.0);
        let l = r_edge(&d, &all(2), &e, &[(1.2, 0.5)], EDGE_TAU);
        assert!((l.cot_coords[0].0 + 2.0).abs() < 1e-12);
        let f = |u: f64| r_edge(&d, &all(2), &e, &[(u, 0.5)], EDGE_TAU).attraction;
        let fd = (f(1.2 + 1e-6) - f(1.2 - 1e-6)) / 2e-6;
        assert!((fd - l.cot_coords[0].0).abs() < 1e-6);
    }

    /// Pixels whose perturbation would move the normalization extrema.
    fn non_extremal(p: &Plane, mask: &[bool]) -> Vec<bool> {
        let (lo, hi) = normalize01(&p.data, mask, p.width, p.height).range.unwrap();
        p.data
            .iter()
            .zip(mask)
            .map(|(v, ok)| *ok && (v - lo).abs() > 1e-4 && (hi - v).abs() > 1e-4)
            .collect()
    }

    #[test]
    fn edge_silhouette_gradient() {
        let (w, h) = (12, 10);
        // gentle slopes keep most pixels off the clamp corners
        let d = Plane::from_fn(w, h, |x, y| {
            2.0 + 0.002 * (x as f64 * 0.8).sin() + 0.001 * y as f64 + if x > 8 { 1.0 } else { 0.0 }
        });
        let mono = Plane::from_fn(w, h, |x, y| (0.5 * ((x + y) as f64).sin()).clamp(-1.0, 1.0));
        let mut cov = all(w * h);
        cov[5] = false;
        let l = r_edge(&d, &cov, &mono, &[], EDGE_TAU);
        assert!(l.silhouette > 0.0);
        fd_check(
            |p| r_edge(p, &cov, &mono, &[], EDGE_TAU).value,
            &d,
            &l.cot_depth,
            &non_extremal(&d, &cov),
        );
    }

    #[test]
    fn poisson_examples() {
        let (w, h) = (8, 8);
        let ramp = Plane::from_fn(w, h, |x, _| x as f64 / 7.0);
        let ones = Plane::filled(w, h, 1.0);
        assert!(r_poisson(&ramp, &all(64), &ramp, &all(64), &ones).value.abs() < 1e-15);
        let zeros = Plane::filled(w, h, 0.0);
        let other = bumpy(w, h);
        assert_eq!(r_poisson(&ramp, &all(64), &other, &all(64), &zeros).value, 0.0);

        let ramp = Plane::from_fn(w, h, |x, _| 0.1 * x as f64);
        let l = r_poisson(&ramp, &all(64), &Plane::filled(w, h, 0.5), &all(64), &ones);
        // 56 pixels carry 0.1, the last column carries 0
        let direct = (56.0 * 0.01f64 / 64.0).sqrt();
        assert!((l.value - direct).abs() < 1e-12, "{} vs {direct}", l.value);
    }

    #[test]
    fn poisson_gradient() {
        let (w, h) = (9, 7);
        let d = bumpy(w, h);
        let mono = Plane::from_fn(w, h, |x, y| (x * y) as f64 * 0.05);
        let e = Plane::from_fn(w, h, |x, y| ((x + 2 * y) as f64 * 0.7).sin());
        let mut cov = all(w * h);
        cov[20] = false;
        let l = r_poisson(&d, &cov, &mono, &all(w * h), &e);
        fd_check(
            |p| r_poisson(p, &cov, &mono, &all(w * h), &e).value,
            &d,
            &l.cot_depth,
            &cov,
        );
    }

    #[test]
    fn geo_examples() {
        let d = Plane::filled(4, 4, 2.2);
        let p = [ProjectedPoint { u: 2.0, v: 2.0, z: 2.0 }];
        let l = l_geo_map(&d, &all(16), &p).unwrap();
        assert!((l.value - 0.01).abs() < 1e-12);
        let d = Plane::filled(4, 4, 3.0);
        assert!((l_geo_map(&d, &all(16), &p).unwrap().value - 0.1875).abs() < 1e-12);
        let d = Plane::filled(4, 4, 2.0);
        assert_eq!(l_geo_map(&d, &all(16), &p).unwrap().value, 0.0);
        assert!(l_geo_map(&d, &all(16), &[]).is_err());

        let mut cov = all(16);
        cov[10] = false;
        let l = l_geo_map(&d, &cov, &p).unwrap();
        assert_eq!((l.value, l.miss_fraction), (0.0, 1.0));
    }

    #[test]
    fn geo_gradient() {
        let d = bumpy(8, 6);
        let pts: Vec<_> = (0..20)
            .map(|i| ProjectedPoint {
                u: 0.7 + (i as f64 * 0.37) % 7.0,
                v: 0.6 + (i as f64 * 0.53) % 5.0,
                z: 1.5 + 0.1 * i as f64,
            })
            .collect();
        let l = l_geo_map(&d, &all(48), &pts).unwrap();
        fd_check(
            |p| l_geo_map(p, &all(48), &pts).unwrap().value,
            &d,
            &l.cot_depth,
            &all(48),
        );
    }

    #[test]
    fn coarse_residual_examples() {
        let mono = AlignedMono::new(Plane::filled(4, 4, 2.0), all(16)).unwrap();
        let cfg = FieldConfig::global_affine();
        let p = [ProjectedPoint { u: 1.5, v: 2.5, z: 3.1 }];
        let params = FieldParams { values: vec![0.2, 0.5] };
        let l = coarse_point_residual(&mono, &params, &cfg, &p).unwrap();
        assert!((l.value - 0.005 / 3.1).abs() < 1e-12);
        let h = 1e-6;
        let f = |o: f64| {
            coarse_point_residual(&mono, &FieldParams { values: vec![o, 0.5] }, &cfg, &p)
                .unwrap()
                .value
        };
        let fd = (f(0.2 + h) - f(0.2 - h)) / (2.0 * h);
        assert!((fd - l.grad_field[0]).abs() < 1e-8);

        let none = FieldConfig::none();
        let exact = [ProjectedPoint { u: 1.5, v: 2.5, z: 2.0 }];
        let l = coarse_point_residual(&mono, &FieldParams { values: vec![] }, &none, &exact).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn coarse_residual_mlp_gradient() {
        let mono = AlignedMono::new(bumpy(10, 8), all(80)).unwrap();
        let cfg = FieldConfig::mlp(2, 4, 1, 1);
        let params = crate::field::field_init(&FieldConfig { sigma_init: 0.4, ..cfg }, 3).unwrap();
        let pts: Vec<_> = (0..15)
            .map(|i| ProjectedPoint {
                u: 1.0 + (i as f64 * 0.61) % 8.0,
                v: 1.0 + (i as f64 * 0.43) % 6.0,
                z: 2.0 + 0.2 * (i as f64).sin(),
            })
            .collect();
        let l = coarse_point_residual(&mono, &params, &cfg, &pts).unwrap();
        for i in 0..params.values.len() {
            let mut a = params.clone();
            let mut b = params.clone();
            a.values[i] += 1e-6;
            b.values[i] -= 1e-6;
            let fd = (coarse_point_residual(&mono, &a, &cfg, &pts).unwrap().value
                - coarse_point_residual(&mono, &b, &cfg, &pts).unwrap().value)
                / 2e-6;
            assert!((fd - l.grad_field[i]).abs() < 1e-7, "{i}: {fd} {}", l.grad_field[i]);
        }
    }

    #[test]
    fn photo_examples() {
        let (w, h) = (8, 8);
        let d = Plane::filled(w, h, 2.0);
        let img = ColorImage::from_pixels(w, h, vec![[0.3, 0.4, 0.5]; 64]).unwrap();
        let shifted = ColorImage::from_pixels(w, h, vec![[0.35, 0.45, 0.55]; 64]).unwrap();
        assert_eq!(l_photo(&img, &img, &d, &all(64), EDGE_TAU).unwrap().value, 0.0);
        assert_eq!(l_photo(&img, &shifted, &d, &[false; 64], EDGE_TAU).unwrap().value, 0.0);
        let l = l_photo(&img, &shifted, &d, &all(64), EDGE_TAU).unwrap();
        assert!((l.value - 0.05 * 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn photo_gradients() {
        let (w, h) = (10, 8);
        let d = Plane::from_fn(w, h, |x, y| {
            2.0 + 0.004 * (x as f64 * 0.7).sin() + 0.003 * (y as f64 * 1.3).cos() + if x > 6 { 0.5 } else { 0.0 }
        });
        let px = |x: usize, y: usize, s: f64| {
            let t = (x * 3 + y * 5) as f64 * s;
            [0.5 + 0.3 * t.sin(), 0.5 + 0.3 * t.cos(), 0.4]
        };
        let a = ColorImage::from_pixels(w, h, (0..w * h).map(|i| px(i % w, i / w, 0.3)).collect()).unwrap();
        let b = ColorImage::from_pixels(w, h, (0..w * h).map(|i| px(i % w, i / w, 0.35)).collect()).unwrap();
        let mut cov = all(w * h);
        cov[12] = false;
        let l = l_photo(&a, &b, &d, &cov, EDGE_TAU).unwrap();
        let f = |p: &Plane| l_photo(&a, &b, p, &cov, EDGE_TAU).unwrap().value;
        fd_check(f, &d, &l.cot_depth, &non_extremal(&d, &cov));

        // color path: perturb one channel of the rendered image
        for i in [3usize, 30, 55] {
            let mut p = a.pixels().to_vec();
            p[i][1] += 1e-6;
            let up = l_photo(
                &ColorImage::from_pixels(w, h, p.clone()).unwrap(),
                &b,
                &d,
                &cov,
                EDGE_TAU,
            )
            .unwrap()
            .value;
            p[i][1] -= 2e-6;
            let dn = l_photo(&ColorImage::from_pixels(w, h, p).unwrap(), &b, &d, &cov, EDGE_TAU)
                .unwrap()
                .value;
            let fd = (up - dn) / 2e-6;
            assert!((fd - l.cot_color[i][1]).abs() < 1e-7, "{fd} {}", l.cot_color[i][1]);
        }
    }
}
