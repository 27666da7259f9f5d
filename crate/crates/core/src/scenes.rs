//! Synthetic plane scenes with an exact ray-cast renderer.
//!
//! Planes live in world coordinates facing the rig (which looks down +z).
//! Textures are sums of sinusoids evaluated analytically at the hit point, with
//! every wavelength at least [`MIN_WAVELENGTH_PX`] pixels at the reference focal
//! length, so the oracle has no aliasing or resampling error.

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Frustum};
use crate::tensor::Tensor;

pub const MIN_WAVELENGTH_PX: f64 = 12.0;
const WAVES_PER_PLANE: usize = 3;

/// One sinusoid: `amplitude * sin(2 pi (freq . xy) + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wave {
    /// Cycles per meter along world x and y.
    pub freq: [f64; 2],
    pub phase: f64,
    pub amplitude: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
}

impl Texture {
    pub fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (std::f64::consts::TAU * (w.freq[0] * x + w.freq[1] * y) + w.phase).sin();
            for (ch, a) in c.iter_mut().zip(w.amplitude) {
                *ch += a * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// Highest spatial frequency in cycles per meter.
    pub fn max_freq(&self) -> f64 {
        self.waves
            .iter()
            .map(|w| w.freq[0].hypot(w.freq[1]))
            .fold(0.0, f64::max)
    }
}

/// Plane `z = depth + slope[0] x + slope[1] y`, optionally cropped to a rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plane {
    pub depth: f64,
    #[serde(default)]
    pub slope: [f64; 2],
    /// `[x_min, x_max, y_min, y_max]` in world units; absent means unbounded.
    #[serde(default)]
    pub extent: Option<[f64; 4]>,
    pub texture: Texture,
    pub opacity: f64,
}

impl Plane {
    /// Ray parameter of the hit, if the ray meets the plane in front of its origin and inside the extent.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let [sx, sy] = self.slope;
        let denom = d.z - sx * d.x - sy * d.y;
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.depth + sx * o.x + sy * o.y - o.z) / denom;
        if t <= 0.0 {
            return None;
        }
        let (x, y) = (o.x + t * d.x, o.y + t * d.y);
        if let Some([x0, x1, y0, y1]) = self.extent {
            if !(x >= x0 && x <= x1 && y >= y0 && y <= y1) {
                return None;
            }
        }
        Some((t, x, y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneScene {
    /// Nearest first.
    pub planes: Vec<Plane>,
    pub background: [f64; 3],
}

impl PlaneScene {
    pub fn validate(&self) -> Result<()> {
        if self.planes.is_empty() {
            return Err(Error::schema("planes", "need at least one plane"));
        }
        for (i, p) in self.planes.iter().enumerate() {
            let f = |name: &str| format!("planes[{i}].{name}");
            if !(p.depth > 0.0 && p.depth.is_finite()) {
                return Err(Error::schema(f("depth"), "must be finite and > 0"));
            }
            if i > 0 && p.depth <= self.planes[i - 1].depth {
                return Err(Error::schema(f("depth"), "depths must be strictly increasing"));
            }
            if !(p.opacity > 0.0 && p.opacity <= 1.0) {
                return Err(Error::schema(f("opacity"), "must lie in (0, 1]"));
            }
            if !p.slope.iter().all(|s| s.is_finite()) {
                return Err(Error::schema(f("slope"), "must be finite"));
            }
            if let Some([x0, x1, y0, y1]) = p.extent {
                if !(x0 < x1 && y0 < y1) || ![x0, x1, y0, y1].iter().all(|v| v.is_finite()) {
                    return Err(Error::schema(f("extent"), "need finite x_min < x_max and y_min < y_max"));
                }
            }
            let t = &p.texture;
            if !t.base.iter().all(|v| v.is_finite()) {
                return Err(Error::schema(f("texture.base"), "must be finite"));
            }
            for (j, w) in t.waves.iter().enumerate() {
                let ok = w.freq.iter().chain(&w.amplitude).all(|v| v.is_finite()) && w.phase.is_finite();
                if !ok {
                    return Err(Error::schema(f(&format!("texture.waves[{j}]")), "must be finite"));
                }
            }
        }
        if !self.background.iter().all(|v| v.is_finite()) {
            return Err(Error::schema("background", "must be finite"));
        }
        Ok(())
    }
}

/// Makes a fronto-parallel scene whose planes sit inside the frustum's depth range.
pub fn make_scene(seed: u64, num_planes: usize, frustum: &Frustum) -> Result<PlaneScene> {
    build_scene(seed, num_planes, frustum, false)
}

/// Like [`make_scene`] but with tilted planes.
pub fn make_slanted_scene(seed: u64, num_planes: usize, frustum: &Frustum) -> Result<PlaneScene> {
    build_scene(seed, num_planes, frustum, true)
}

/// Plane `j`, counted from the back, sits at disparity fraction
/// `(2j + 0.4 + 0.4u) / 2P` of `[1/far, 1/near]`. That keeps each plane inside
/// one depth band for `L = P` and for `L = 2P`, away from the band edges.
fn build_scene(seed: u64, num_planes: usize, frustum: &Frustum, slanted: bool) -> Result<PlaneScene> {
    if num_planes == 0 {
        return Err(Error::contract("make_scene needs at least one plane"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = &frustum.camera;
    let (dn, df) = (1.0 / frustum.near, 1.0 / frustum.far);
    let center = camera_center(cam);
    let half_w = cam.width as f64 * 0.5 / cam.fx;
    let half_h = cam.height as f64 * 0.5 / cam.fy;
    let mut planes = Vec::with_capacity(num_planes);
    for j in 0..num_planes {
        let q = (2.0 * j as f64 + 0.4 + 0.4 * rng.gen::<f64>()) / (2 * num_planes) as f64;
        let depth = 1.0 / (df + q * (dn - df));
        let slope: [f64; 2] = if slanted {
            [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)]
        } else {
            [0.0, 0.0]
        };
        let extent = (j > 0).then(|| {
            let z = depth - center.z;
            let (vw, vh) = (half_w * z, half_h * z);
            let (rx, ry) = (vw * rng.gen_range(0.25..0.45), vh * rng.gen_range(0.25..0.45));
            let cx = center.x + vw * rng.gen_range(-0.3..0.3);
            let cy = center.y + vh * rng.gen_range(-0.3..0.3);
            [cx - rx, cx + rx, cy - ry, cy + ry]
        });
        // wavelength bound at the farthest point the reference view can see
        let tilt = (slope[0].abs() * half_w + slope[1].abs() * half_h) * (depth - center.z);
        let z_far = depth - center.z + tilt;
        let k_max = cam.fx.min(cam.fy) / (MIN_WAVELENGTH_PX * z_far);
        let base = [(); 3].map(|_| rng.gen_range(0.25..0.75));
        let waves = (0..WAVES_PER_PLANE)
            .map(|_| {
                let k = k_max * rng.gen_range(0.4..1.0);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                Wave {
                    freq: [k * a.cos(), k * a.sin()],
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amplitude: [(); 3].map(|_| rng.gen_range(0.03..0.08)),
                }
            })
            .collect();
        planes.push(Plane {
            depth,
            slope,
            extent,
            texture: Texture { base, waves },
            opacity: 1.0,
        });
    }
    planes.reverse();
    let background = [(); 3].map(|_| rng.gen_range(0.0..0.1));
    let scene = PlaneScene { planes, background };
    scene.validate()?;
    Ok(scene)
}

fn camera_center(cam: &Camera) -> Vector3<f64> {
    let m = &cam.camera_from_world;
    let r = m.fixed_view::<3, 3>(0, 0);
    let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    -(r.transpose() * t)
}

/// Ray-casts every pixel center of `cam`. Returns the `[H, W, 3]` image and the
/// `[H, W]` z-depth of the nearest fully opaque hit (infinity when there is none).
pub fn oracle_render(scene: &PlaneScene, cam: &Camera) -> (Tensor<f64>, Tensor<f64>) {
    let (h, w) = (cam.height, cam.width);
    let m = &cam.camera_from_world;
    let rt = m.fixed_view::<3, 3>(0, 0).transpose();
    let o = camera_center(cam);
    let mut img = Vec::with_capacity(h * w * 3);
    let mut depth = Vec::with_capacity(h * w);
    let mut hits = Vec::with_capacity(scene.planes.len());
    for row in 0..h {
        for col in 0..w {
            let dc = Vector3::new(
                (col as f64 + 0.5 - cam.cx) / cam.fx,
                (row as f64 + 0.5 - cam.cy) / cam.fy,
                1.0,
            );
            // camera-frame z of the direction is 1, so the ray parameter is the z-depth
            let d = rt * dc;
            hits.clear();
            hits.extend(
                scene
                    .planes
                    .iter()
                    .filter_map(|p| p.intersect(&o, &d).map(|(t, x, y)| (t, x, y, p))),
            );
            hits.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut c = [0.0; 3];
            let mut trans = 1.0;
            let mut z = f64::INFINITY;
            for &(t, x, y, p) in &hits {
                let tex = p.texture.eval(x, y);
                for (ch, v) in c.iter_mut().zip(tex) {
                    *ch += trans * p.opacity * v;
                }
                trans *= 1.0 - p.opacity;
                if p.opacity >= 1.0 {
                    z = t;
                    break;
                }
            }
            for (ch, b) in c.iter_mut().zip(scene.background) {
                *ch += trans * b;
            }
            img.extend_from_slice(&c);
            depth.push(z);
        }
    }
    (
        Tensor::new(&[h, w, 3], img).expect("image shape"),
        Tensor::new(&[h, w], depth).expect("depth shape"),
    )
}

/// Planar grid of identical axis-aligned cameras centered on the world origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    pub views: usize,
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self::small(4)
    }
}

impl RigSpec {
    /// 64x64 rig with a 10 cm baseline.
    pub fn small(views: usize) -> Self {
        Self {
            views,
            baseline: 0.1,
            width: 64,
            height: 64,
            focal: 64.0,
            near: 2.0,
            far: 12.0,
        }
    }

    /// 64x64 rig with a 30 cm baseline.
    pub fn large(views: usize) -> Self {
        Self {
            baseline: 0.3,
            ..Self::small(views)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::schema("views", "need at least one view"));
        }
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return Err(Error::schema("baseline", "must be finite and > 0"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::schema("width", "image size must be nonzero"));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::schema("focal", "must be finite and > 0"));
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::schema("near", "need 0 < near < far"));
        }
        Ok(())
    }

    /// Grid shape `(rows, cols)`, as square as possible.
    pub fn grid(&self) -> (usize, usize) {
        let cols = (self.views as f64).sqrt().ceil() as usize;
        (self.views.div_ceil(cols), cols)
    }

    pub fn camera_at(&self, x: f64, y: f64) -> Camera {
        Camera::axis_aligned(Vector3::new(x, y, 0.0), self.focal, self.width, self.height)
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.validate()?;
        let (rows, cols) = self.grid();
        Ok((0..self.views)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                let x = (c as f64 - (cols - 1) as f64 * 0.5) * self.baseline;
                let y = (r as f64 - (rows - 1) as f64 * 0.5) * self.baseline;
                self.camera_at(x, y)
            })
            .collect())
    }

    pub fn frustum(&self, cam: Camera) -> Result<Frustum> {
        Frustum::new(cam, self.near, self.far)
    }

    /// Frustum of a virtual camera at the rig center.
    pub fn reference(&self) -> Result<Frustum> {
        self.validate()?;
        self.frustum(self.camera_at(0.0, 0.0))
    }
}

/// Homography taking pixels of `a` to pixels of `b` through the plane
/// `n . X = c` given in world coordinates.
pub fn plane_homography(a: &Camera, b: &Camera, n: Vector3<f64>, c: f64) -> nalgebra::Matrix3<f64> {
    let k = |cam: &Camera| nalgebra::Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
    let rel: Matrix4<f64> = b.camera_from_world * a.camera_from_world.try_inverse().expect("rigid transform");
    let r = rel.fixed_view::<3, 3>(0, 0).into_owned();
    let t = Vector3::new(rel[(0, 3)], rel[(1, 3)], rel[(2, 3)]);
    // plane in a's frame: n_a . X_a = c_a
    let ra = a.camera_from_world.fixed_view::<3, 3>(0, 0).into_owned();
    let ta = Vector3::new(a.camera_from_world[(0, 3)], a.camera_from_world[(1, 3)], a.camera_from_world[(2, 3)]);
    let na = ra * n;
    let ca = c + na.dot(&ta);
    k(b) * (r + t * na.transpose() / ca) * k(a).try_inverse().expect("intrinsics")
}
