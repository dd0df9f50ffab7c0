//! Cameras, projection and the depth-space conversions shared by every stage.
//!
//! Two camera frames are in play. Poses follow the structure-from-motion
//! convention: world-to-camera, `x` right, `y` down, `z` forward. The
//! projection matrix works in the graphics frame, `x` right, `y` up, looking
//! down `-z`. The two differ by a half turn about the `x` axis, see
//! [`cv_to_gl`].
//!
//! Normalized device depth grows with distance: the near plane maps to `-1`,
//! the far plane to `+1`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::image::ColorImage;

/// Pinhole intrinsics in pixels. Pixel `(x, y)` covers `[x, x+1) × [y, y+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let c = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        if !(0.0..=w).contains(&self.cx) || !(0.0..=h).contains(&self.cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside the image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Projects a point in the graphics camera frame to continuous pixel
    /// coordinates. Returns `None` for points at or behind the camera.
    pub fn project_gl(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let depth = -p.z;
        if depth <= 0.0 {
            return None;
        }
        Some((self.cx + self.fx * p.x / depth, self.cy - self.fy * p.y / depth))
    }

    /// Unit-depth ray through continuous pixel `(u, v)` in the graphics frame.
    pub fn ray_gl(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0)
    }
}

/// Back-projects pixel `(u, v)` at linear depth `depth` into the graphics
/// camera frame: `x = (u-cx)·z/fx`, `y = -(v-cy)·z/fy`, `z = -depth`.
pub fn unproject(u: f64, v: f64, depth: f64, c: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::Range(format!("unproject needs depth > 0, got {depth}")));
    }
    Ok(c.ray_gl(u, v) * depth)
}

/// Maps a point between the pose frame (`y` down, `z` forward) and the
/// graphics frame. The map is its own inverse.
#[inline]
pub fn cv_to_gl(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(p.x, -p.y, -p.z)
}

/// Rigid world-to-camera transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Pose { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    /// Builds a pose from a (not necessarily normalized) quaternion
    /// `(qw, qx, qy, qz)` and a translation.
    pub fn from_quaternion(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(quat.norm() > 0.0) || !quat.coords.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument(format!("degenerate quaternion {q:?}")));
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Pose::new(unit.to_rotation_matrix().into_inner(), Vector3::from(t))
    }

    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        [q.w, q.i, q.j, q.k]
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let det = self.rotation.determinant();
        if !(err < 1e-9) || !((1.0 - 1e-9..=1.0 + 1e-9).contains(&det)) {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (err {err:e}, det {det})"
            )));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(())
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// `T_i · T_0⁻¹`: maps points from camera 0's frame to camera i's frame.
pub fn relative_transform(view_i: &Pose, view_0: &Pose) -> Matrix4<f64> {
    view_i.to_matrix() * view_0.inverse().to_matrix()
}

/// OpenGL-style 4×4 projection built from pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionMatrix {
    pub m: Matrix4<f64>,
    pub near: f64,
    pub far: f64,
    pub width: usize,
    pub height: usize,
}

impl ProjectionMatrix {
    pub fn from_intrinsics(c: &Intrinsics, near: f64, far: f64) -> Result<Self> {
        check_planes(near, far)?;
        let (w, h) = (c.width as f64, c.height as f64);
        let mut m = Matrix4::zeros();
        m[(0, 0)] = 2.0 * c.fx / w;
        m[(0, 2)] = 1.0 - 2.0 * c.cx / w;
        m[(1, 1)] = -2.0 * c.fy / h;
        m[(1, 2)] = 1.0 - 2.0 * c.cy / h;
        m[(2, 2)] = -(far + near) / (far - near);
        m[(2, 3)] = -2.0 * far * near / (far - near);
        m[(3, 2)] = -1.0;
        Ok(ProjectionMatrix {
            m,
            near,
            far,
            width: c.width,
            height: c.height,
        })
    }

    /// Clip coordinates of a graphics-frame camera point.
    pub fn clip(&self, p: &Vector3<f64>) -> Vector4<f64> {
        self.m * p.push(1.0)
    }

    /// Normalized device coordinates after perspective division.
    pub fn project_ndc(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let c = self.clip(p);
        Vector3::new(c.x / c.w, c.y / c.w, c.z / c.w)
    }

    /// Inverse of [`project_ndc`](Self::project_ndc): camera point for an
    /// NDC triple.
    pub fn unproject_ndc(&self, ndc: &Vector3<f64>) -> Vector3<f64> {
        let depth = depth_to_linear_unchecked(ndc.z, self.near, self.far);
        let m = &self.m;
        // clip.x = m00·x + m02·z with z = -depth and w = depth
        let x = (ndc.x * depth + m[(0, 2)] * depth) / m[(0, 0)];
        let y = (ndc.y * depth + m[(1, 2)] * depth) / m[(1, 1)];
        Vector3::new(x, y, -depth)
    }

    pub fn to_reciprocal(&self, z: f64) -> Result<f64> {
        depth_to_reciprocal(z, self.near, self.far)
    }

    pub fn to_linear(&self, z_ndc: f64) -> Result<f64> {
        depth_to_linear(z_ndc, self.near, self.far)
    }
}

fn check_planes(near: f64, far: f64) -> Result<()> {
    if !(near > 0.0) || !(far > near) || !far.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need 0 < near < far, got near={near} far={far}"
        )));
    }
    Ok(())
}

/// Linear depth to normalized device depth,
/// `(f+n)/(f-n) - 2fn/((f-n)·z)`, evaluated in a form that hits `±1` exactly
/// at the planes.
pub fn depth_to_reciprocal(z: f64, near: f64, far: f64) -> Result<f64> {
    check_planes(near, far)?;
    if !(near..=far).contains(&z) {
        return Err(Error::Range(format!("depth {z} outside [{near}, {far}]")));
    }
    Ok(depth_to_reciprocal_unchecked(z, near, far))
}

#[inline]
pub(crate) fn depth_to_reciprocal_unchecked(z: f64, near: f64, far: f64) -> f64 {
    (far * (z - near) + near * (z - far)) / (z * (far - near))
}

/// Inverse of [`depth_to_reciprocal`].
pub fn depth_to_linear(z_ndc: f64, near: f64, far: f64) -> Result<f64> {
    check_planes(near, far)?;
    if !(-1.0..=1.0).contains(&z_ndc) {
        return Err(Error::Range(format!("NDC depth {z_ndc} outside [-1, 1]")));
    }
    Ok(depth_to_linear_unchecked(z_ndc, near, far))
}

#[inline]
pub(crate) fn depth_to_linear_unchecked(z_ndc: f64, near: f64, far: f64) -> f64 {
    2.0 * far * near / ((far + near) - z_ndc * (far - near))
}

/// Pixel coordinate to normalized image coordinate: `2u/W - 1`.
#[inline]
pub fn pixel_to_ndc(u: f64, extent: usize) -> f64 {
    2.0 * u / extent as f64 - 1.0
}

#[inline]
pub fn ndc_to_pixel(n: f64, extent: usize) -> f64 {
    (n + 1.0) * extent as f64 * 0.5
}

/// A calibrated, posed color image.
#[derive(Clone, Debug)]
pub struct View {
    pub id: u32,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub image: ColorImage,
}

impl View {
    pub fn new(id: u32, intrinsics: Intrinsics, pose: Pose, image: ColorImage) -> Result<Self> {
        if image.width() != intrinsics.width || image.height() != intrinsics.height {
            return Err(Error::Shape(format!(
                "view {id}: image is {}x{} but intrinsics say {}x{}",
                image.width(),
                image.height(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        Ok(View {
            id,
            intrinsics,
            pose,
            image,
        })
    }
}
