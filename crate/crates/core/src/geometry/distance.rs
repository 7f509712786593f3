use super::{norm, CameraParams, ScenePlaneGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel log distance from the camera center to the point where the
/// pixel's ray meets the `h_avg` plane, at feature-map resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    /// `[1, 1, Hf, Wf]`.
    pub values: Tensor,
    /// `[Hf, Wf]`, 1 where the ray meets the plane in front of the camera.
    pub mask: Tensor,
}

/// Log camera-to-plane distance for every pixel of an `hf x wf` feature map.
///
/// Feature pixel `(a, b)` corresponds to image pixel `(b * W / wf,
/// a * H / hf)`. The distance is `ln ||R * X + T||` where `X` is the
/// back-projection onto `z = h_avg`. Pixels whose ray never meets the plane
/// are filled with the largest valid value and masked out.
pub fn distance_map(
    cam: &CameraParams,
    grid: &ScenePlaneGrid,
    hf: usize,
    wf: usize,
) -> Result<DistanceMap> {
    if hf == 0 || wf == 0 || hf > cam.height || wf > cam.width {
        return Err(Error::invalid(format!(
            "feature size {hf}x{wf} must be within image {}x{}",
            cam.height, cam.width
        )));
    }
    if (cam.center()[2] - grid.h_avg).abs() < 1e-12 {
        return Err(Error::Degenerate(format!(
            "camera {} center lies on the h_avg plane",
            cam.id
        )));
    }
    let sx = cam.width as f64 / wf as f64;
    let sy = cam.height as f64 / hf as f64;
    let mut values = Vec::with_capacity(hf * wf);
    let mut mask = Vec::with_capacity(hf * wf);
    for a in 0..hf {
        for b in 0..wf {
            match cam.image_to_world_plane(b as f64 * sx, a as f64 * sy, grid.h_avg) {
                Some(x) => {
                    values.push(norm(cam.to_camera(x)).ln());
                    mask.push(1.0);
                }
                None => {
                    values.push(f64::NAN);
                    mask.push(0.0);
                }
            }
        }
    }
    let fill = values
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    let fill = if fill.is_finite() { fill } else { 0.0 };
    for v in values.iter_mut().filter(|v| v.is_nan()) {
        *v = fill;
    }
    Ok(DistanceMap {
        values: Tensor::new(&[1, 1, hf, wf], values)?,
        mask: Tensor::new(&[hf, wf], mask)?,
    })
}
