//! File formats: tensor containers, PFM/PPM images, JSON schemas and scene bundles.

pub mod bundle;
pub mod container;
pub mod image;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::CameraRecord;
use crate::ldm::Ldm;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub use bundle::{view_stem, SceneBundle};
pub use container::{AnyTensor, Container};
pub use image::{decode_pfm, decode_ppm, encode_pfm, encode_ppm, read_pfm, write_pfm, write_ppm};

pub const LDM_DEPTH: &str = "ldm.depth";
pub const LDM_DENSITY: &str = "ldm.density";
pub const LDM_BLEND: &str = "ldm.blend";
pub const LDM_FRUSTUM: &str = "ldm.frustum";

/// Parses JSON into `T`; failures become schema errors whose field is
/// `file` followed by the path inside the document, e.g. `cameras.json[2].fx`.
pub fn parse_json<T: DeserializeOwned>(text: &str, file: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." {
            file.to_string()
        } else if path.starts_with('[') {
            format!("{file}{path}")
        } else {
            format!("{file}.{path}")
        };
        Error::schema(field, e.into_inner().to_string())
    })
}

pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn frustum_tensor(r: &CameraRecord) -> Tensor<f64> {
    let mut v = vec![r.fx, r.fy, r.cx, r.cy, r.width as f64, r.height as f64];
    v.extend_from_slice(&r.camera_from_world);
    v.extend([r.near, r.far]);
    Tensor::new(&[v.len()], v).expect("flat")
}

fn frustum_record(t: &Tensor<f64>) -> Result<CameraRecord> {
    let d = t.data();
    if t.shape() != [24] {
        return Err(Error::schema(LDM_FRUSTUM, format!("expected shape [24], got {:?}", t.shape())));
    }
    let size = |v: f64, f: &str| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(Error::schema(format!("{LDM_FRUSTUM}.{f}"), format!("not a positive integer: {v}")))
        }
    };
    Ok(CameraRecord {
        fx: d[0],
        fy: d[1],
        cx: d[2],
        cy: d[3],
        width: size(d[4], "width")?,
        height: size(d[5], "height")?,
        camera_from_world: d[6..22].to_vec(),
        near: d[22],
        far: d[23],
    })
}

pub fn ldm_to_container<T: Real>(ldm: &Ldm<T>) -> Container {
    let mut c = Container::new();
    let rec = CameraRecord::from_frustum(&ldm.frustum);
    c.insert(LDM_DEPTH, AnyTensor::from_tensor(&ldm.depth)).unwrap();
    c.insert(LDM_DENSITY, AnyTensor::from_tensor(&ldm.density)).unwrap();
    c.insert(LDM_BLEND, AnyTensor::from_tensor(&ldm.blend)).unwrap();
    c.insert(LDM_FRUSTUM, AnyTensor::F64(frustum_tensor(&rec))).unwrap();
    c
}

/// Rebuilds an LDM and checks its invariants.
pub fn ldm_from_container<T: Real>(c: &Container) -> Result<Ldm<T>> {
    let frustum = frustum_record(&c.tensor(LDM_FRUSTUM)?)?
        .to_frustum()
        .map_err(|e| match e {
            Error::Schema { field, message } => Error::schema(format!("{LDM_FRUSTUM}.{field}"), message),
            other => other,
        })?;
    let ldm = Ldm {
        depth: c.tensor(LDM_DEPTH)?,
        density: c.tensor(LDM_DENSITY)?,
        blend: c.tensor(LDM_BLEND)?,
        frustum,
    };
    let s = ldm.depth.shape();
    let cam = &ldm.frustum.camera;
    if s.len() != 3 || s[1] != cam.height || s[2] != cam.width {
        return Err(Error::schema(
            LDM_DEPTH,
            format!("shape {:?} does not match a {}x{} frustum", s, cam.width, cam.height),
        ));
    }
    ldm.check_invariants()?;
    Ok(ldm)
}

pub fn save_ldm<T: Real>(path: &Path, ldm: &Ldm<T>) -> Result<()> {
    ldm_to_container(ldm).write(path)
}

pub fn load_ldm<T: Real>(path: &Path) -> Result<Ldm<T>> {
    ldm_from_container(&Container::read(path)?)
}

pub fn params_to_container<T: Real>(store: &ParamStore<T>) -> Container {
    let mut c = Container::new();
    for (name, t) in store.iter() {
        c.insert(name, AnyTensor::from_tensor(t)).unwrap();
    }
    c
}

/// Loads tensors into a store initialized for the same model, checking names and shapes.
pub fn load_params_into<T: Real>(store: &mut ParamStore<T>, c: &Container) -> Result<()> {
    for (name, t) in c.entries() {
        let slot = store
            .get(name)
            .ok_or_else(|| Error::schema(name.as_str(), "not a parameter of this model"))?;
        if slot.shape() != t.shape() {
            return Err(Error::schema(
                name.as_str(),
                format!("shape {:?}, model expects {:?}", t.shape(), slot.shape()),
            ));
        }
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let t = c.tensor(&name)?;
        store.insert(&name, t);
    }
    Ok(())
}
