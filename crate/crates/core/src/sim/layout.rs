use std::f64::consts::PI;

use rand::Rng;

use super::SceneSpec;
use crate::error::{Error, Result};
use crate::geometry::{coverage, normalize, CameraParams, ScenePlaneGrid};

/// Minimum fraction of scene cells every camera must see.
pub const MIN_COVERAGE: f64 = 0.2;

const MAX_REJECTIONS: usize = 1000;

/// Cameras on a jittered ring around the scene center, all looking roughly
/// at the center. Each camera is rejection-sampled until it sees at least
/// [`MIN_COVERAGE`] of the grid.
pub fn sample_camera_layout<R: Rng + ?Sized>(
    spec: &SceneSpec,
    grid: &ScenePlaneGrid,
    rng: &mut R,
) -> Result<Vec<CameraParams>> {
    let (w, h) = spec.image;
    let c = spec.extent / 2.0;
    let phase = rng.random_range(0.0..2.0 * PI);
    let n = spec.n_views;
    let mut cams = Vec::with_capacity(n);
    let mut rejections = 0;
    for k in 0..n {
        loop {
            let angle = phase + 2.0 * PI * (k as f64 + rng.random_range(-0.4..0.4)) / n as f64;
            let radius = rng.random_range(0.6..1.3) * spec.extent / 2.0;
            let height = rng.random_range(4.0..12.0);
            let eye = [c + radius * angle.cos(), c + radius * angle.sin(), height];

            let to_center = [c - eye[0], c - eye[1], -eye[2]];
            let yaw =
                to_center[1].atan2(to_center[0]) + rng.random_range(-10f64..10.0).to_radians();
            let horiz = to_center[0].hypot(to_center[1]);
            let pitch = to_center[2].atan2(horiz) + rng.random_range(-10f64..10.0).to_radians();
            let dir = normalize([
                pitch.cos() * yaw.cos(),
                pitch.cos() * yaw.sin(),
                pitch.sin(),
            ]);
            let hfov = rng.random_range(60f64..90.0).to_radians();
            let f = (w as f64 / 2.0) / (hfov / 2.0).tan();
            let target = [eye[0] + dir[0], eye[1] + dir[1], eye[2] + dir[2]];
            let cam = CameraParams::look_at(k as u32, eye, target, f, f, w, h)?;
            if coverage(&cam, grid) >= MIN_COVERAGE {
                cams.push(cam);
                break;
            }
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::Degenerate(format!(
                    "camera layout: {MAX_REJECTIONS} rejected cameras, spec cannot reach {MIN_COVERAGE} coverage"
                )));
            }
        }
    }
    Ok(cams)
}
