//! Calibrated pinhole cameras and the shared scene plane.
//!
//! Conventions: world is z-up with the ground at `z = 0`; a camera maps
//! world points with `X_cam = R * X_world + T`, looks down its own `+z`
//! axis, and has image `+y` pointing down with the origin at the top-left
//! pixel.

mod distance;
mod meta;
mod weights;

pub use distance::{distance_map, DistanceMap};
pub use meta::SceneMeta;
pub use weights::{camera_weight_maps, camera_weights_on, min_distance_map, CameraWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::tensor::SamplingGrid;

/// Points closer than this along the optical axis are treated as invisible.
pub const Z_NEAR: f64 = 0.1;

/// Average person height used for the projection plane, in meters.
pub const DEFAULT_H_AVG: f64 = 1.75;

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Intrinsics, world-to-camera extrinsics and image size of one camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    /// World-to-camera translation in meters.
    #[serde(rename = "T")]
    pub t: Vec3,
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "h")]
    pub height: usize,
}

/// Projection of a world point into a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraParams {
    /// Camera at `eye` whose optical axis points at `target`, image `+x`
    /// horizontal. A vertical optical axis falls back to world `+y` as the
    /// image-up reference.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: u32,
        eye: Vec3,
        target: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let d = [target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]];
        if norm(d) < 1e-12 {
            return Err(Error::Degenerate("look_at target equals eye".into()));
        }
        let fwd = normalize(d);
        let mut right = cross(fwd, [0.0, 0.0, 1.0]);
        if norm(right) < 1e-9 {
            right = cross(fwd, [0.0, 1.0, 0.0]);
        }
        let right = normalize(right);
        let down = cross(fwd, right);
        let r = [
            right[0], right[1], right[2], down[0], down[1], down[2], fwd[0], fwd[1], fwd[2],
        ];
        let t = [-dot(right, eye), -dot(down, eye), -dot(fwd, eye)];
        let cam = CameraParams {
            id,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            r,
            t,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.r;
        for i in 0..3 {
            for j in 0..3 {
                let rrt: f64 = (0..3).map(|k| r[3 * i + k] * r[3 * j + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (rrt - want).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "camera {}: rotation is not orthonormal",
                        self.id
                    )));
                }
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "camera {}: rotation determinant {det} != 1",
                self.id
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "camera {}: focal lengths must be positive",
                self.id
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!(
                "camera {}: empty image size",
                self.id
            )));
        }
        Ok(())
    }

    fn row(&self, i: usize) -> Vec3 {
        [self.r[3 * i], self.r[3 * i + 1], self.r[3 * i + 2]]
    }

    /// `R * x + T`.
    pub fn to_camera(&self, x: Vec3) -> Vec3 {
        [
            dot(self.row(0), x) + self.t[0],
            dot(self.row(1), x) + self.t[1],
            dot(self.row(2), x) + self.t[2],
        ]
    }

    /// `R^T * d`.
    pub fn rotate_to_world(&self, d: Vec3) -> Vec3 {
        let r = &self.r;
        [
            r[0] * d[0] + r[3] * d[1] + r[6] * d[2],
            r[1] * d[0] + r[4] * d[1] + r[7] * d[2],
            r[2] * d[0] + r[5] * d[1] + r[8] * d[2],
        ]
    }

    /// Camera center in world coordinates, `-R^T * T`.
    pub fn center(&self) -> Vec3 {
        let c = self.rotate_to_world(self.t);
        [-c[0], -c[1], -c[2]]
    }

    /// Pinhole projection; `None` when the point is closer than [`Z_NEAR`]
    /// along the optical axis (including points behind the camera).
    pub fn world_to_image(&self, x: Vec3) -> Option<ImagePoint> {
        let c = self.to_camera(x);
        if c[2] <= Z_NEAR {
            return None;
        }
        Some(ImagePoint {
            u: self.fx * c[0] / c[2] + self.cx,
            v: self.fy * c[1] / c[2] + self.cy,
            depth: c[2],
        })
    }

    /// Intersects the ray through pixel `(u, v)` with the world plane
    /// `z = h`. `None` if the ray is parallel to the plane or meets it
    /// behind the camera.
    pub fn image_to_world_plane(&self, u: f64, v: f64, h: f64) -> Option<Vec3> {
        let ray = self.rotate_to_world([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]);
        if ray[2].abs() < 1e-12 {
            return None;
        }
        let c = self.center();
        let s = (h - c[2]) / ray[2];
        if s <= 0.0 {
            return None;
        }
        Some([c[0] + s * ray[0], c[1] + s * ray[1], c[2] + s * ray[2]])
    }

    pub fn in_image(&self, p: &ImagePoint) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < self.width as f64 && p.v < self.height as f64
    }
}

/// The common scene-plane raster. Cell `(i, j)` sits at world
/// `(origin[0] + j * mpp, origin[1] + i * mpp, h_avg)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePlaneGrid {
    pub origin: [f64; 2],
    pub mpp: f64,
    #[serde(rename = "Hs")]
    pub hs: usize,
    #[serde(rename = "Ws")]
    pub ws: usize,
    pub h_avg: f64,
}

impl ScenePlaneGrid {
    /// Square grid covering `[0, extent]^2` with cell centers at half-cell
    /// offsets.
    pub fn covering(extent: f64, mpp: f64, h_avg: f64) -> Result<Self> {
        let n = (extent / mpp).round() as usize;
        let g = ScenePlaneGrid {
            origin: [mpp / 2.0, mpp / 2.0],
            mpp,
            hs: n,
            ws: n,
            h_avg,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |x: f64, lo_ok: bool| x.is_nan() || x < 0.0 || (!lo_ok && x == 0.0);
        if bad(self.mpp, false) || self.hs == 0 || self.ws == 0 || bad(self.h_avg, true) {
            return Err(Error::invalid(format!("invalid scene grid {self:?}")));
        }
        Ok(())
    }

    pub fn cell_world(&self, i: usize, j: usize) -> Vec3 {
        [
            self.origin[0] + j as f64 * self.mpp,
            self.origin[1] + i as f64 * self.mpp,
            self.h_avg,
        ]
    }

    /// Continuous `(row, col)` of a world ground position.
    pub fn world_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.origin[1]) / self.mpp,
            (x - self.origin[0]) / self.mpp,
        )
    }

    pub fn cells(&self) -> usize {
        self.hs * self.ws
    }
}

/// Per-cell image coordinates of the scene plane seen by `cam`; cells whose
/// plane point is not in front of the camera get [`SamplingGrid::SENTINEL`].
pub fn plane_sampling_grid(cam: &CameraParams, grid: &ScenePlaneGrid) -> SamplingGrid {
    let coords = (0..grid.hs)
        .flat_map(|i| (0..grid.ws).map(move |j| (i, j)))
        .map(|(i, j)| match cam.world_to_image(grid.cell_world(i, j)) {
            Some(p) => [p.u, p.v],
            None => SamplingGrid::SENTINEL,
        })
        .collect();
    SamplingGrid::new(grid.hs, grid.ws, coords).expect("grid sized from scene plane")
}

/// Fraction of scene cells whose plane point lands inside the image.
pub fn coverage(cam: &CameraParams, grid: &ScenePlaneGrid) -> f64 {
    let sg = plane_sampling_grid(cam, grid);
    let (w, h) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
    let inside = sg
        .coords()
        .iter()
        .filter(|&&[u, v]| u >= 0.0 && v >= 0.0 && u <= w && v <= h)
        .count();
    inside as f64 / grid.cells() as f64
}
