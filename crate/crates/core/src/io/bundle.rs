//! Scene bundle directories: `cameras.json`, `view_###.pfm` (+ `.ppm` previews)
//! and an optional `scene.json`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraRecord, Frustum};
use crate::scenes::{make_scene, oracle_render, PlaneScene, RigSpec};
use crate::tensor::Tensor;

use super::image::{read_pfm, write_pfm, write_ppm};
use super::{parse_json, read_text, to_json, write_bytes};

pub const CAMERAS_FILE: &str = "cameras.json";
pub const SCENE_FILE: &str = "scene.json";

pub fn view_stem(i: usize) -> String {
    format!("view_{i:03}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub cameras: Vec<CameraRecord>,
    /// `[H, W, 3]` per camera.
    pub images: Vec<Tensor<f32>>,
    pub scene: Option<PlaneScene>,
}

impl SceneBundle {
    /// Oracle renders of a seeded scene from every camera of `rig`.
    pub fn generate(seed: u64, planes: usize, rig: &RigSpec) -> Result<Self> {
        let reference = rig.reference()?;
        let scene = make_scene(seed, planes, &reference)?;
        let mut cameras = Vec::with_capacity(rig.views);
        let mut images = Vec::with_capacity(rig.views);
        for cam in rig.cameras()? {
            images.push(oracle_render(&scene, &cam).0.cast());
            cameras.push(CameraRecord::from_frustum(&rig.frustum(cam)?));
        }
        Ok(Self {
            cameras,
            images,
            scene: Some(scene),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::schema(CAMERAS_FILE, "no cameras"));
        }
        if self.cameras.len() != self.images.len() {
            return Err(Error::schema(
                CAMERAS_FILE,
                format!("{} cameras for {} images", self.cameras.len(), self.images.len()),
            ));
        }
        for (i, (c, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            c.to_frustum().map_err(|e| prefix(e, &format!("{CAMERAS_FILE}[{i}]")))?;
            if img.shape() != [c.height, c.width, 3] {
                return Err(Error::schema(
                    format!("{}.pfm", view_stem(i)),
                    format!(
                        "image is {:?} but camera {i} is {}x{} (width x height)",
                        img.shape(),
                        c.width,
                        c.height
                    ),
                ));
            }
        }
        if let Some(s) = &self.scene {
            s.validate().map_err(|e| prefix(e, SCENE_FILE))?;
        }
        Ok(())
    }

    pub fn frustums(&self) -> Result<Vec<Frustum>> {
        self.cameras.iter().map(|c| c.to_frustum()).collect()
    }

    pub fn camera_list(&self) -> Result<Vec<Camera>> {
        Ok(self.frustums()?.into_iter().map(|f| f.camera).collect())
    }

    pub fn images_as<T: crate::tensor::Real>(&self) -> Vec<Tensor<T>> {
        self.images.iter().map(|i| i.cast()).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_bytes(&dir.join(CAMERAS_FILE), to_json(&self.cameras)?.as_bytes())?;
        for (i, img) in self.images.iter().enumerate() {
            write_pfm(&dir.join(format!("{}.pfm", view_stem(i))), img)?;
            write_ppm(&dir.join(format!("{}.ppm", view_stem(i))), img)?;
        }
        if let Some(s) = &self.scene {
            write_bytes(&dir.join(SCENE_FILE), to_json(s)?.as_bytes())?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let cameras: Vec<CameraRecord> = parse_json(&read_text(&dir.join(CAMERAS_FILE))?, CAMERAS_FILE)?;
        let mut images = Vec::with_capacity(cameras.len());
        for i in 0..cameras.len() {
            images.push(read_pfm(&dir.join(format!("{}.pfm", view_stem(i))))?);
        }
        let extra = dir.join(format!("{}.pfm", view_stem(cameras.len())));
        if extra.exists() {
            return Err(Error::schema(
                CAMERAS_FILE,
                format!("{} cameras but {} exists", cameras.len(), extra.display()),
            ));
        }
        let sp = dir.join(SCENE_FILE);
        let scene = if sp.exists() {
            Some(parse_json(&read_text(&sp)?, SCENE_FILE)?)
        } else {
            None
        };
        let b = Self {
            cameras,
            images,
            scene,
        };
        b.validate()?;
        Ok(b)
    }
}

fn prefix(e: Error, file: &str) -> Error {
    match e {
        Error::Schema { field, message } => Error::schema(format!("{file}.{field}"), message),
        Error::Contract(m) | Error::Config(m) => Error::schema(file, m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let b = SceneBundle::generate(3, 2, &RigSpec::small(4)).unwrap();
        b.write(dir.path()).unwrap();
        let back = SceneBundle::read(dir.path()).unwrap();
        assert_eq!(back, b);
        for i in 0..4 {
            assert!(dir.path().join(format!("{}.ppm", view_stem(i))).exists());
        }
    }

    #[test]
    fn camera_errors_carry_paths() {
        let dir = tempfile::tempdir().unwrap();
        SceneBundle::generate(3, 1, &RigSpec::small(2)).unwrap().write(dir.path()).unwrap();
        let p = dir.path().join(CAMERAS_FILE);
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replacen("\"fy\"", "\"fz\"", 1)).unwrap();
        let e = SceneBundle::read(dir.path()).unwrap_err().to_string();
        assert!(e.contains("cameras.json") && e.contains("fz"), "{e}");
        std::fs::write(&p, text.replacen("\"near\": 2.0", "\"near\": -2.0", 1)).unwrap();
        let e = SceneBundle::read(dir.path()).unwrap_err().to_string();
        assert!(e.contains("cameras.json[0].near"), "{e}");
    }

    #[test]
    fn image_size_mismatch_is_reported() {
        let mut b = SceneBundle::generate(1, 1, &RigSpec::small(2)).unwrap();
        b.images[1] = Tensor::zeros(&[8, 8, 3]);
        let e = b.validate().unwrap_err().to_string();
        assert!(e.contains("view_001.pfm"), "{e}");
    }
}
