use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Pinhole camera. Pixel `(col, row)` has its center at continuous
/// coordinates `(col + 0.5, row + 0.5)`; `cx`, `cy` use the same frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub camera_from_world: Matrix4<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        camera_from_world: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            camera_from_world,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at world position `center` looking down +z with image rows along +y.
    pub fn axis_aligned(center: Vector3<f64>, focal: f64, width: usize, height: usize) -> Self {
        let mut m = Matrix4::identity();
        m[(0, 3)] = -center.x;
        m[(1, 3)] = -center.y;
        m[(2, 3)] = -center.z;
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            width,
            height,
            camera_from_world: m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return Err(Error::schema("fx", "must be finite and > 0"));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(Error::schema("fy", "must be finite and > 0"));
        }
        if !self.cx.is_finite() {
            return Err(Error::schema("cx", "must be finite"));
        }
        if !self.cy.is_finite() {
            return Err(Error::schema("cy", "must be finite"));
        }
        if self.width == 0 {
            return Err(Error::schema("width", "must be >= 1"));
        }
        if self.height == 0 {
            return Err(Error::schema("height", "must be >= 1"));
        }
        if self.camera_from_world.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema("camera_from_world", "must be finite"));
        }
        let bottom = self.camera_from_world.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0
        {
            return Err(Error::schema(
                "camera_from_world",
                "last row must be [0, 0, 0, 1]",
            ));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err >= 1e-5 {
            return Err(Error::schema(
                "camera_from_world",
                format!("rotation block not orthonormal (|R^T R - I| = {err:.2e})"),
            ));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.camera_from_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.camera_from_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.translation()
    }

    /// Continuous pixel coordinates of a world point, `None` behind the camera.
    pub fn project(&self, x: &Vector3<f64>) -> Option<(f64, f64)> {
        let p = self.world_to_camera(x);
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// World direction (not normalized, unit z in camera frame) of the ray through `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation().transpose() * d
    }

    /// World point at z-depth `depth` along the ray through `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.center() + self.ray_direction(u, v) * depth
    }

    /// Same camera with intrinsics rescaled to a `width` x `height` image.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            camera_from_world: self.camera_from_world,
        }
    }

    pub(crate) fn kernel<T: Real>(&self) -> CamKernel<T> {
        let r = self.rotation();
        let t = self.translation();
        let mut rot = [[T::zero(); 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = T::c(r[(i, j)]);
            }
        }
        CamKernel {
            rot,
            trans: [T::c(t.x), T::c(t.y), T::c(t.z)],
            fx: T::c(self.fx),
            fy: T::c(self.fy),
            cx: T::c(self.cx),
            cy: T::c(self.cy),
            width: self.width,
            height: self.height,
        }
    }
}

/// Target view frustum of an LDM.
#[derive(Debug, Clone, PartialEq)]
pub struct Frustum {
    pub camera: Camera,
    pub near: f64,
    pub far: f64,
}

impl Frustum {
    pub fn new(camera: Camera, near: f64, far: f64) -> Result<Self> {
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(Error::contract(format!(
                "frustum needs 0 < near < far, got near={near} far={far}"
            )));
        }
        Ok(Self { camera, near, far })
    }
}

/// Camera parameters converted to the working precision, for inner loops.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CamKernel<T> {
    pub rot: [[T; 3]; 3],
    pub trans: [T; 3],
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CamKernel<T> {
    #[inline]
    pub fn to_camera(&self, x: [T; 3]) -> [T; 3] {
        let r = &self.rot;
        [
            r[0][0] * x[0] + r[0][1] * x[1] + r[0][2] * x[2] + self.trans[0],
            r[1][0] * x[0] + r[1][1] * x[1] + r[1][2] * x[2] + self.trans[1],
            r[2][0] * x[0] + r[2][1] * x[1] + r[2][2] * x[2] + self.trans[2],
        ]
    }

    /// `R^T v`, used to pull camera-frame gradients back to world frame.
    #[inline]
    pub fn rotate_back(&self, v: [T; 3]) -> [T; 3] {
        let r = &self.rot;
        [
            r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
            r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
            r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
        ]
    }
}

/// Serialized camera record, shared by `cameras.json` and LDM containers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub camera_from_world: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl CameraRecord {
    pub fn from_frustum(f: &Frustum) -> Self {
        let c = &f.camera;
        let mut m = Vec::with_capacity(16);
        for i in 0..4 {
            for j in 0..4 {
                m.push(c.camera_from_world[(i, j)]);
            }
        }
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            camera_from_world: m,
            near: f.near,
            far: f.far,
        }
    }

    pub fn to_frustum(&self) -> Result<Frustum> {
        if self.camera_from_world.len() != 16 {
            return Err(Error::schema(
                "camera_from_world",
                format!("expected 16 values, got {}", self.camera_from_world.len()),
            ));
        }
        let m = Matrix4::from_row_slice(&self.camera_from_world);
        let cam = Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            m,
        )?;
        if !(self.near > 0.0 && self.near.is_finite()) {
            return Err(Error::schema("near", "must be finite and > 0"));
        }
        if !(self.far > self.near && self.far.is_finite()) {
            return Err(Error::schema("far", "must be finite and > near"));
        }
        Frustum::new(cam, self.near, self.far)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector3};

    fn tilted() -> Camera {
        let r = Rotation3::from_euler_angles(0.1, -0.2, 0.05);
        let t = Vector3::new(0.3, -0.1, 0.5);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera::new(70.0, 72.0, 31.0, 33.5, 64, 64, m).unwrap()
    }

    #[test]
    fn unproject_project_round_trip() {
        let cam = tilted();
        for &(u, v, z) in &[(0.5, 0.5, 1.0), (40.2, 12.7, 3.5), (63.5, 63.5, 9.0)] {
            let x = cam.unproject(u, v, z);
            let (pu, pv) = cam.project(&x).unwrap();
            assert!((pu - u).abs() < 1e-4 && (pv - v).abs() < 1e-4);
            assert!((cam.world_to_camera(&x).z - z).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.1;
        let err = Camera::new(50.0, 50.0, 32.0, 32.0, 64, 64, m).unwrap_err();
        assert!(err.to_string().contains("camera_from_world"));
    }

    #[test]
    fn rejects_bad_focal() {
        let err = Camera::new(0.0, 50.0, 32.0, 32.0, 64, 64, Matrix4::identity()).unwrap_err();
        assert!(err.to_string().contains("fx"));
    }

    #[test]
    fn resize_keeps_normalized_rays() {
        let cam = tilted();
        let half = cam.resized(32, 32);
        let a = cam.ray_direction(20.0, 10.0);
        let b = half.ray_direction(10.0, 5.0);
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn record_round_trip() {
        let f = Frustum::new(tilted(), 1.0, 5.0).unwrap();
        let back = CameraRecord::from_frustum(&f).to_frustum().unwrap();
        assert_eq!(back, f);
    }
}
