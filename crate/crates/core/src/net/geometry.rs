use super::config::ModelConfig;
use crate::error::Result;
use crate::geometry::{
    distance_map, plane_sampling_grid, CameraParams, DistanceMap, SceneMeta, ScenePlaneGrid,
};
use crate::tensor::SamplingGrid;

/// Everything the network needs from one camera, precomputed once per scene.
#[derive(Clone, Debug)]
pub struct ViewGeometry {
    pub camera: CameraParams,
    /// Scene-plane grid in feature-map pixel coordinates.
    pub feature_grid: SamplingGrid,
    /// Log distance map at feature resolution.
    pub distance: DistanceMap,
}

impl ViewGeometry {
    pub fn new(cam: &CameraParams, grid: &ScenePlaneGrid, cfg: &ModelConfig) -> Result<Self> {
        cam.validate()?;
        let (hf, wf) = cfg.feature_size(cam.height, cam.width);
        let image_grid = plane_sampling_grid(cam, grid);
        let (sx, sy) = (wf as f64 / cam.width as f64, hf as f64 / cam.height as f64);
        let coords = image_grid
            .coords()
            .iter()
            .map(|&c| {
                if c == SamplingGrid::SENTINEL {
                    c
                } else {
                    [c[0] * sx, c[1] * sy]
                }
            })
            .collect();
        Ok(ViewGeometry {
            camera: cam.clone(),
            feature_grid: SamplingGrid::new(grid.hs, grid.ws, coords)?,
            distance: distance_map(cam, grid, hf, wf)?,
        })
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.distance.mask.hw()
    }
}

/// View geometry for every camera of a scene, in camera order.
pub fn scene_views(meta: &SceneMeta, cfg: &ModelConfig) -> Result<Vec<ViewGeometry>> {
    meta.cameras
        .iter()
        .map(|c| ViewGeometry::new(c, &meta.grid, cfg))
        .collect()
}
