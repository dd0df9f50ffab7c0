//! Differentiable image-space primitives used by the losses.
//!
//! Every forward operation has a matching adjoint (`*_backward`) that maps a
//! cotangent on the output back to the input. Coordinates for sampling are
//! *index* coordinates: integer `(x, y)` lands exactly on a pixel value.
//! Continuous pixel coordinates (pixel `x` spans `[x, x+1)`) convert with
//! [`pixel_to_index`].

/// Scalar image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Edge image: values in `[-1, 1]`, negative on edges and discontinuities,
/// positive on smooth surfaces.
pub type EdgeImage = Plane;

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Plane::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Plane {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane { width, height, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut f64 {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    fn clamped(&self, x: isize, y: isize) -> usize {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        y * self.width + x
    }
}

/// Continuous pixel coordinate to index coordinate.
#[inline]
pub fn pixel_to_index(u: f64) -> f64 {
    u - 0.5
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Forward state of [`sobel_edge_image`], kept for the adjoint.
#[derive(Clone, Debug)]
pub struct SobelEdges {
    pub edges: EdgeImage,
    gx: Vec<f64>,
    gy: Vec<f64>,
    mag: Vec<f64>,
    forced: Vec<bool>,
    tau: f64,
}

/// Sobel edge image `E = clamp(1 - |∇I|/τ, -1, 1)` with replicate padding.
/// Pixels whose 3×3 neighborhood touches an invalid input are set to `-1`.
pub fn sobel_edge_image(img: &Plane, mask: &[bool], tau: f64) -> SobelEdges {
    assert!(tau > 0.0, "edge threshold must be positive");
    let (w, h) = (img.width, img.height);
    let n = w * h;
    let mut out = SobelEdges {
        edges: Plane::new(w, h),
        gx: vec![0.0; n],
        gy: vec![0.0; n],
        mag: vec![0.0; n],
        forced: vec![false; n],
        tau,
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut nb = [[0.0; 3]; 3];
            let mut touches_invalid = false;
            for (ky, dy) in (-1isize..=1).enumerate() {
                for (kx, dx) in (-1isize..=1).enumerate() {
                    let q = img.clamped(x as isize + dx, y as isize + dy);
                    touches_invalid |= !mask[q];
                    nb[ky][kx] = img.data[q];
                }
            }
            // differences first so that flat regions give exactly zero
            let gx = (nb[0][2] - nb[0][0]) + 2.0 * (nb[1][2] - nb[1][0]) + (nb[2][2] - nb[2][0]);
            let gy = (nb[2][0] - nb[0][0]) + 2.0 * (nb[2][1] - nb[0][1]) + (nb[2][2] - nb[0][2]);
            if touches_invalid {
                out.forced[i] = true;
                out.edges.data[i] = -1.0;
                continue;
            }
            let g = (gx * gx + gy * gy).sqrt();
            out.gx[i] = gx;
            out.gy[i] = gy;
            out.mag[i] = g;
            out.edges.data[i] = (1.0 - g / tau).clamp(-1.0, 1.0);
        }
    }
    out
}

/// Adjoint of [`sobel_edge_image`]. Clamped and forced pixels pass no gradient.
pub fn sobel_edge_backward(fwd: &SobelEdges, cot: &Plane) -> Plane {
    let (w, h) = (fwd.edges.width, fwd.edges.height);
    let mut grad = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = fwd.mag[i];
            if fwd.forced[i] || cot.data[i] == 0.0 || !(g > 0.0 && g < 2.0 * fwd.tau) {
                continue;
            }
            let c = cot.data[i] * (-1.0 / fwd.tau) / g;
            let (cgx, cgy) = (c * fwd.gx[i], c * fwd.gy[i]);
            for (ky, dy) in (-1isize..=1).enumerate() {
                for (kx, dx) in (-1isize..=1).enumerate() {
                    let q = grad.clamped(x as isize + dx, y as isize + dy);
                    grad.data[q] += SOBEL_X[ky][kx] * cgx + SOBEL_Y[ky][kx] * cgy;
                }
            }
        }
    }
    grad
}

/// The normalized 5-tap Gaussian with σ = 1.
pub fn gaussian_kernel5() -> [f64; 5] {
    let raw = [-2.0f64, -1.0, 0.0, 1.0, 2.0].map(|i| (-0.5 * i * i).exp());
    let sum: f64 = raw.iter().sum();
    raw.map(|k| k / sum)
}

/// Masked 5×5 Gaussian blur with replicate padding. Invalid inputs are left
/// out and the remaining weights renormalized per pixel; outputs at invalid
/// pixels are 0.
pub fn gaussian_blur5(img: &Plane, mask: &[bool]) -> Plane {
    let k = gaussian_kernel5();
    let mut out = Plane::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            if !mask[y * img.width + x] {
                continue;
            }
            let (mut acc, mut norm) = (0.0, 0.0);
            for (ky, dy) in (-2isize..=2).enumerate() {
                for (kx, dx) in (-2isize..=2).enumerate() {
                    let q = img.clamped(x as isize + dx, y as isize + dy);
                    if mask[q] {
                        let wgt = k[ky] * k[kx];
                        acc += wgt * img.data[q];
                        norm += wgt;
                    }
                }
            }
            *out.at_mut(x, y) = acc / norm;
        }
    }
    out
}

/// Adjoint of [`gaussian_blur5`] for a fixed mask.
pub fn gaussian_blur5_backward(mask: &[bool], cot: &Plane) -> Plane {
    let k = gaussian_kernel5();
    let mut grad = Plane::new(cot.width, cot.height);
    for y in 0..cot.height {
        for x in 0..cot.width {
            let c = cot.at(x, y);
            if !mask[y * cot.width + x] || c == 0.0 {
                continue;
            }
            let mut norm = 0.0;
            for (ky, dy) in (-2isize..=2).enumerate() {
                for (kx, dx) in (-2isize..=2).enumerate() {
                    if mask[grad.clamped(x as isize + dx, y as isize + dy)] {
                        norm += k[ky] * k[kx];
                    }
                }
            }
            for (ky, dy) in (-2isize..=2).enumerate() {
                for (kx, dx) in (-2isize..=2).enumerate() {
                    let q = grad.clamped(x as isize + dx, y as isize + dy);
                    if mask[q] {
                        grad.data[q] += c * k[ky] * k[kx] / norm;
                    }
                }
            }
        }
    }
    grad
}

/// Forward differences. `∇u[x, y] = I[x+1, y] - I[x, y]`, zero in the last
/// column, and zero wherever either sample is invalid; `∇v` likewise.
pub fn spatial_gradients(img: &Plane, mask: &[bool]) -> (Plane, Plane) {
    let (w, h) = (img.width, img.height);
    let mut gu = Plane::new(w, h);
    let mut gv = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            if x + 1 < w && mask[i + 1] {
                gu.data[i] = img.data[i + 1] - img.data[i];
            }
            if y + 1 < h && mask[i + w] {
                gv.data[i] = img.data[i + w] - img.data[i];
            }
        }
    }
    (gu, gv)
}

/// Adjoint of [`spatial_gradients`].
pub fn spatial_gradients_backward(mask: &[bool], cot_u: &Plane, cot_v: &Plane) -> Plane {
    let (w, h) = (cot_u.width, cot_u.height);
    let mut grad = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            if x + 1 < w && mask[i + 1] {
                grad.data[i + 1] += cot_u.data[i];
                grad.data[i] -= cot_u.data[i];
            }
            if y + 1 < h && mask[i + w] {
                grad.data[i + w] += cot_v.data[i];
                grad.data[i] -= cot_v.data[i];
            }
        }
    }
    grad
}

/// Result of [`normalize01`].
#[derive(Clone, Debug)]
pub struct Normalized {
    pub plane: Plane,
    /// `(min, max)` used, or `None` when the valid values are constant up to
    /// rounding (output is then 0.5 on every valid pixel).
    pub range: Option<(f64, f64)>,
}

impl Normalized {
    /// `∂D̃/∂D` with the extrema held constant.
    pub fn slope(&self) -> f64 {
        self.range.map_or(0.0, |(lo, hi)| 1.0 / (hi - lo))
    }
}

/// Ranges narrower than this fraction of the largest magnitude count as
/// constant: a rendered plane differs from itself by a few ulp, and dividing
/// by that range turns rounding into signal.
pub const FLAT_RTOL: f64 = 1e-9;

/// `(D - min)/(max - min)` over valid pixels; invalid pixels become 0.
pub fn normalize01(values: &[f64], mask: &[bool], width: usize, height: usize) -> Normalized {
    let range = values
        .iter()
        .zip(mask)
        .filter(|(_, ok)| **ok)
        .fold(None, |acc: Option<(f64, f64)>, (v, _)| match acc {
            None => Some((*v, *v)),
            Some((lo, hi)) => Some((lo.min(*v), hi.max(*v))),
        })
        .filter(|(lo, hi)| hi - lo > FLAT_RTOL * lo.abs().max(hi.abs()));
    let data = values
        .iter()
        .zip(mask)
        .map(|(v, ok)| match (ok, range) {
            (false, _) => 0.0,
            (true, Some((lo, hi))) => (v - lo) / (hi - lo),
            (true, None) => 0.5,
        })
        .collect();
    Normalized {
        plane: Plane { width, height, data },
        range,
    }
}

/// Four bilinear taps with their weights and the weights' coordinate partials.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub d_du: [f64; 4],
    pub d_dv: [f64; 4],
}

impl BilinearTaps {
    /// Coordinates are clamped to `[0, W-1] × [0, H-1]`; the coordinate
    /// partial is zero along a clamped axis.
    pub fn new(width: usize, height: usize, u: f64, v: f64) -> Self {
        let axis = |c: f64, n: usize| -> (usize, f64, f64) {
            let hi = (n - 1) as f64;
            let inside = (0.0..=hi).contains(&c);
            let c = c.clamp(0.0, hi);
            let c0 = (c.floor() as usize).min(n.saturating_sub(2));
            (c0, c - c0 as f64, if inside { 1.0 } else { 0.0 })
        };
        let (x0, fx, sx) = axis(u, width);
        let (y0, fy, sy) = axis(v, height);
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        BilinearTaps {
            index: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            d_du: [-(1.0 - fy) * sx, (1.0 - fy) * sx, -fy * sx, fy * sx],
            d_dv: [-(1.0 - fx) * sy, -fx * sy, (1.0 - fx) * sy, fx * sy],
        }
    }

    #[inline]
    pub fn sample(&self, data: &[f64]) -> f64 {
        (0..4).map(|k| self.weight[k] * data[self.index[k]]).sum()
    }

    /// `(∂/∂u, ∂/∂v)` of the interpolated value.
    #[inline]
    pub fn coord_grad(&self, data: &[f64]) -> (f64, f64) {
        let mut g = (0.0, 0.0);
        for k in 0..4 {
            g.0 += self.d_du[k] * data[self.index[k]];
            g.1 += self.d_dv[k] * data[self.index[k]];
        }
        g
    }

    /// True when every tap carrying weight is valid.
    pub fn all_valid(&self, mask: &[bool]) -> bool {
        (0..4).all(|k| self.weight[k] == 0.0 || mask[self.index[k]])
    }

    /// Scatters a cotangent on the sampled value back to the image.
    pub fn scatter(&self, cot: f64, grad: &mut [f64]) {
        for k in 0..4 {
            grad[self.index[k]] += cot * self.weight[k];
        }
    }
}

/// Bilinear interpolation at index coordinates `(u, v)`.
pub fn bilinear_sample(img: &Plane, u: f64, v: f64) -> f64 {
    BilinearTaps::new(img.width, img.height, u, v).sample(&img.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    fn fd<F: Fn(&Plane) -> f64>(f: F, img: &Plane, i: usize) -> f64 {
        let h = 1e-6;
        let mut a = img.clone();
        let mut b = img.clone();
        a.data[i] += h;
        b.data[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn sobel_examples() {
        let c = Plane::filled(6, 5, 0.7);
        let e = sobel_edge_image(&c, &all(30), 0.03);
        assert!(e.edges.data.iter().all(|v| *v == 1.0));

        let step = Plane::from_fn(8, 5, |x, _| if x >= 4 { 1.0 } else { 0.0 });
        let e = sobel_edge_image(&step, &all(40), 0.03);
        for y in 0..5 {
            assert_eq!(e.edges.at(3, y), -1.0);
            assert_eq!(e.edges.at(4, y), -1.0);
            assert_eq!(e.edges.at(0, y), 1.0);
        }
        assert_eq!(e.mag[3], 4.0);

        let zero = Plane::from_fn(6, 6, |x, y| ((x * 7 + y * 3) % 5) as f64 * 0.0);
        assert!(sobel_edge_image(&zero, &all(36), 0.03)
            .edges
            .data
            .iter()
            .all(|v| *v == 1.0));
    }

    #[test]
    fn sobel_marks_invalid_neighbors() {
        let img = Plane::filled(5, 5, 1.0);
        let mut mask = all(25);
        mask[12] = false;
        let e = sobel_edge_image(&img, &mask, 0.03);
        assert_eq!(e.edges.at(1, 1), -1.0);
        assert_eq!(e.edges.at(0, 0), 1.0);
    }

    #[test]
    fn sobel_gradient_matches_fd() {
        let img = Plane::from_fn(7, 6, |x, y| {
            0.004 * x as f64 + 0.003 * (y * y) as f64 / 6.0 + 0.001 * ((x * y) % 3) as f64
        });
        let mask = all(42);
        let weights = Plane::from_fn(7, 6, |x, y| ((x + 2 * y) % 5) as f64 - 2.0);
        let f = |p: &Plane| -> f64 {
            let e = sobel_edge_image(p, &mask, 0.03);
            e.edges.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
        };
        let fwd = sobel_edge_image(&img, &mask, 0.03);
        let grad = sobel_edge_backward(&fwd, &weights);
        for i in 0..42 {
            let num = fd(f, &img, i);
            assert!(rel(num, grad.data[i]) < 1e-6, "pixel {i}: {num} vs {}", grad.data[i]);
        }
    }

    #[test]
    fn blur_examples() {
        let c = Plane::filled(7, 6, 2.5);
        let b = gaussian_blur5(&c, &all(42));
        assert!(b.data.iter().all(|v| (v - 2.5).abs() < 1e-14));

        let mut imp = Plane::new(9, 9);
        *imp.at_mut(4, 4) = 1.0;
        let b = gaussian_blur5(&imp, &all(81));
        let k = gaussian_kernel5();
        assert!((b.at(4, 4) - k[2] * k[2]).abs() < 1e-15);
        // e^0 / (1 + 2e^-0.5 + 2e^-2)
        assert!((k[2] - 0.402_619_9).abs() < 1e-6);

        let ramp = Plane::from_fn(9, 9, |x, y| 0.3 * x as f64 - 0.1 * y as f64);
        let b = gaussian_blur5(&ramp, &all(81));
        for y in 2..7 {
            for x in 2..7 {
                assert!((b.at(x, y) - ramp.at(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_adjoint_matches_fd() {
        let img = Plane::from_fn(6, 7, |x, y| ((x * 13 + y * 7) % 11) as f64 / 11.0);
        let mut mask = all(42);
        mask[9] = false;
        mask[30] = false;
        let weights = Plane::from_fn(6, 7, |x, y| ((x * 3 + y) % 4) as f64 - 1.5);
        let f = |p: &Plane| -> f64 {
            gaussian_blur5(p, &mask)
                .data
                .iter()
                .zip(&weights.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let grad = gaussian_blur5_backward(&mask, &weights);
        for i in 0..42 {
            assert!((fd(f, &img, i) - grad.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_examples() {
        let c = Plane::filled(4, 3, 1.0);
        let (gu, gv) = spatial_gradients(&c, &all(12));
        assert!(gu.data.iter().chain(&gv.data).all(|v| *v == 0.0));

        let ramp = Plane::from_fn(4, 3, |x, _| 0.5 * x as f64);
        let (gu, gv) = spatial_gradients(&ramp, &all(12));
        assert_eq!(gu.at(0, 0), 0.5);
        assert_eq!(gu.at(3, 0), 0.0);
        assert!(gv.data.iter().all(|v| *v == 0.0));

        let two = Plane {
            width: 2,
            height: 1,
            data: vec![3.0, 7.0],
        };
        let (gu, _) = spatial_gradients(&two, &all(2));
        assert_eq!(gu.data, vec![4.0, 0.0]);
    }

    #[test]
    fn gradient_adjoint_matches_fd() {
        let img = Plane::from_fn(5, 4, |x, y| (x * x) as f64 * 0.1 + y as f64);
        let mut mask = all(20);
        mask[7] = false;
        let wu = Plane::from_fn(5, 4, |x, y| (x + y) as f64);
        let wv = Plane::from_fn(5, 4, |x, y| x as f64 - y as f64);
        let f = |p: &Plane| -> f64 {
            let (gu, gv) = spatial_gradients(p, &mask);
            gu.data.iter().zip(&wu.data).map(|(a, b)| a * b).sum::<f64>()
                + gv.data.iter().zip(&wv.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let grad = spatial_gradients_backward(&mask, &wu, &wv);
        for i in 0..20 {
            assert!((fd(f, &img, i) - grad.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_examples() {
        let n = normalize01(&[2.0, 4.0], &[true, true], 2, 1);
        assert_eq!(n.plane.data, vec![0.0, 1.0]);
        let n = normalize01(&[1.0, 2.0, 3.0], &[true; 3], 3, 1);
        assert_eq!(n.plane.data, vec![0.0, 0.5, 1.0]);
        let d = [0.3, 1.7, 0.9, 1.1];
        let a = normalize01(&d, &[true; 4], 4, 1);
        let scaled: Vec<f64> = d.iter().map(|v| 2.5 * v + 7.0).collect();
        let b = normalize01(&scaled, &[true; 4], 4, 1);
        for (x, y) in a.plane.data.iter().zip(&b.plane.data) {
            assert!((x - y).abs() < 1e-12);
        }
        let nearly = normalize01(&[4.1, 4.1 + 2e-15], &[true; 2], 2, 1);
        assert_eq!((nearly.range, nearly.plane.data[1], nearly.slope()), (None, 0.5, 0.0));
        let flat = normalize01(&[3.0, 3.0], &[true; 2], 2, 1);
        assert!(flat.range.is_none());
        assert_eq!(flat.plane.data, vec![0.5, 0.5]);
    }

    #[test]
    fn bilinear_examples() {
        let img = Plane::from_fn(3, 2, |x, y| (x + 10 * y) as f64);
        assert_eq!(bilinear_sample(&img, 2.0, 1.0), 12.0);
        assert_eq!(bilinear_sample(&img, 1.0, 0.0), 1.0);
        let two = Plane {
            width: 2,
            height: 2,
            data: vec![0.0, 1.0, 0.0, 1.0],
        };
        assert_eq!(bilinear_sample(&two, 0.5, 0.0), 0.5);
        let taps = BilinearTaps::new(2, 2, 0.5, 0.0);
        let (gu, _) = taps.coord_grad(&two.data);
        let h = 1e-6;
        let num = (bilinear_sample(&two, 0.5 + h, 0.0) - bilinear_sample(&two, 0.5 - h, 0.0)) / (2.0 * h);
        assert_eq!(gu, 1.0);
        assert!((num - gu).abs() < 1e-9);
        // clamped outside the image
        assert_eq!(bilinear_sample(&img, -3.0, 7.0), 10.0);
    }
}
