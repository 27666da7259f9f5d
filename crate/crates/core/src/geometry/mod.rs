//! Cameras, projection between layer space and input views, and ray encodings.

pub mod camera;
pub mod projection;
pub mod ray_encoding;

pub use camera::{Camera, CameraRecord, Frustum};
pub use projection::{gather_backproject, layer_world_points, splat_project, SPLAT_EPS};
pub use ray_encoding::{ray_difference, ray_encoding, RayEncodingParams};
