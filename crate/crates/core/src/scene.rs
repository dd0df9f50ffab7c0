//! A loaded scene: reference view, auxiliary views, sparse cloud and maps.

use std::path::Path;

use crate::camera::View;
use crate::error::{Error, Result};
use crate::image::DepthMap;
use crate::io::{parse_manifest, read_pfm, read_points, read_ppm, SceneManifest, SparsePointCloud};
use crate::losses::ProjectedPoint;
use crate::raster::Camera;

#[derive(Clone, Debug)]
pub struct Scene {
    pub reference: View,
    pub aux: Vec<View>,
    pub cloud: SparsePointCloud,
    /// Relative (monocular) depth of the reference view.
    pub mono: DepthMap,
    pub gt: Option<DepthMap>,
    pub near: f64,
    pub far: f64,
}

impl Scene {
    pub fn new(
        reference: View,
        aux: Vec<View>,
        cloud: SparsePointCloud,
        mono: DepthMap,
        gt: Option<DepthMap>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let (w, h) = (reference.intrinsics.width, reference.intrinsics.height);
        for (name, m) in std::iter::once(("mono", &mono)).chain(gt.as_ref().map(|g| ("gt", g))) {
            if m.width() != w || m.height() != h {
                return Err(Error::Shape(format!(
                    "{name} map is {}x{}, reference view is {w}x{h}",
                    m.width(),
                    m.height()
                )));
            }
        }
        if !(near > 0.0 && far > near) {
            return Err(Error::Validation(format!("need 0 < near < far, got {near} and {far}")));
        }
        Ok(Scene {
            reference,
            aux,
            cloud,
            mono,
            gt,
            near,
            far,
        })
    }

    /// Reads every file a manifest refers to.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_manifest(&parse_manifest(manifest_path)?)
    }

    pub fn from_manifest(m: &SceneManifest) -> Result<Self> {
        let mut reference = None;
        let mut aux = Vec::new();
        for rec in &m.views {
            let image = read_ppm(m.resolve(&rec.image))?;
            let view = View::new(rec.id, rec.intrinsics, rec.pose()?, image)?;
            if rec.id == m.ref_view {
                reference = Some(view);
            } else {
                aux.push(view);
            }
        }
        let reference =
            reference.ok_or_else(|| Error::Validation(format!("ref_view {} is not among the views", m.ref_view)))?;
        let cloud = read_points(m.resolve(&m.points))?;
        let mono = read_pfm(m.resolve(&m.mono))?;
        let gt = m.gt.as_ref().map(|g| read_pfm(m.resolve(g))).transpose()?;
        Scene::new(reference, aux, cloud, mono, gt, m.near, m.far)
    }

    pub fn camera(&self, view: &View) -> Result<Camera> {
        Camera::new(view.intrinsics, view.pose, self.near, self.far)
    }

    pub fn reference_camera(&self) -> Result<Camera> {
        self.camera(&self.reference)
    }

    /// Cloud points in front of the reference camera that land inside its
    /// image, as pixel coordinates plus depth.
    pub fn projected_points(&self) -> Vec<ProjectedPoint> {
        let c = &self.reference.intrinsics;
        self.cloud
            .points
            .iter()
            .filter_map(|p| {
                let q = self.reference.pose.transform(p);
                if q.z <= self.near || q.z >= self.far {
                    return None;
                }
                let u = c.fx * q.x / q.z + c.cx;
                let v = c.fy * q.y / q.z + c.cy;
                ((0.0..c.width as f64).contains(&u) && (0.0..c.height as f64).contains(&v)).then_some(ProjectedPoint {
                    u,
                    v,
                    z: q.z,
                })
            })
            .collect()
    }
}
