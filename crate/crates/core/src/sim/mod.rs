//! Procedural multi-view crowd scenes.
//!
//! A scene is a square ground region watched by a fixed ring of cameras;
//! each frame places a fresh crowd, renders every view, and rasterizes the
//! scene-plane ground-truth density. Everything is a pure function of the
//! [`SceneSpec`] (including its seed).

mod crowd;
mod dataset;
mod density;
mod layout;
mod render;

pub use crowd::place_crowd;
pub use dataset::{
    read_dataset, read_unlabeled, write_dataset, AccessLog, Dataset, Scene, UnlabeledDataset,
    UnlabeledScene,
};
pub use density::gt_density;
pub use layout::sample_camera_layout;
pub use render::{project_dots, render_view};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SceneMeta, ScenePlaneGrid, DEFAULT_H_AVG};
use crate::tensor::Tensor;

/// Rendering domain. `B` shifts background statistics, person contrast and
/// sensor noise relative to `A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Style {
    A,
    B,
}

impl std::str::FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Style::A),
            "b" => Ok(Style::B),
            _ => Err(Error::invalid(format!(
                "unknown style {s:?} (expected a or b)"
            ))),
        }
    }
}

/// Everything needed to generate one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side of the square ground region `[0, extent]^2`, meters.
    pub extent: f64,
    /// Inclusive range of people per frame.
    pub people: (usize, usize),
    pub n_views: usize,
    pub n_frames: usize,
    /// Rendered image size `(width, height)`.
    pub image: (usize, usize),
    /// Scene-plane meters per grid cell.
    pub mpp: f64,
    pub h_avg: f64,
    /// Ground-truth kernel width in grid cells.
    pub sigma: f64,
    pub style: Style,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            extent: 32.0,
            people: (20, 60),
            n_views: 16,
            n_frames: 20,
            image: (128, 96),
            mpp: 0.5,
            h_avg: DEFAULT_H_AVG,
            sigma: 2.0,
            style: Style::A,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 3 {
            return Err(Error::invalid("a scene needs at least 3 views"));
        }
        if self.people.0 > self.people.1 {
            return Err(Error::invalid("people range is empty"));
        }
        if !(self.extent > 0.0 && self.mpp > 0.0 && self.sigma > 0.0) {
            return Err(Error::invalid("extent, mpp and sigma must be positive"));
        }
        if self.image.0 < 4 || self.image.1 < 4 {
            return Err(Error::invalid("image must be at least 4x4"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<ScenePlaneGrid> {
        ScenePlaneGrid::covering(self.extent, self.mpp, self.h_avg)
    }

    /// Independent random stream `tag` of this scene.
    pub(crate) fn rng(&self, tag: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(tag);
        rng
    }
}

/// One person on the ground plane. Ids are shared across all views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

/// Image-space annotation of a person's head point in one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewDot {
    pub id: u32,
    pub u: f64,
    pub v: f64,
}

/// One synchronized multi-view frame with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdFrame {
    pub id: u32,
    pub people: Vec<Person>,
    /// `[1, H, W]` grayscale in `[0, 1]`, one per camera.
    pub images: Vec<Tensor>,
    pub dots: Vec<Vec<ViewDot>>,
    /// `[1, Hs, Ws]` scene-plane density.
    pub gt: Tensor,
}

const STREAM_LAYOUT: u64 = 1;
const STREAM_BACKGROUND: u64 = 1 << 20;
const STREAM_CROWD: u64 = 2 << 20;
const STREAM_PIXELS: u64 = 3 << 20;

/// Generates a full scene: cameras, then `n_frames` crowds and renderings.
pub fn generate_scene(id: u32, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let grid = spec.grid()?;
    let cameras = sample_camera_layout(spec, &grid, &mut spec.rng(STREAM_LAYOUT))?;
    let backgrounds: Vec<render::Background> = (0..cameras.len())
        .map(|v| {
            render::Background::sample(spec.style, &mut spec.rng(STREAM_BACKGROUND + v as u64))
        })
        .collect();
    let mut frames = Vec::with_capacity(spec.n_frames);
    for f in 0..spec.n_frames {
        let people = place_crowd(spec, &mut spec.rng(STREAM_CROWD + f as u64));
        let mut images = Vec::with_capacity(cameras.len());
        let mut dots = Vec::with_capacity(cameras.len());
        for (v, cam) in cameras.iter().enumerate() {
            let mut rng = spec.rng(STREAM_PIXELS + ((f as u64) << 10) + v as u64);
            let (img, d) = render_view(
                cam,
                &people,
                spec.style,
                &backgrounds[v],
                spec.h_avg,
                &mut rng,
            );
            images.push(img);
            dots.push(d);
        }
        let gt = gt_density(&people, &grid, spec.sigma)?;
        frames.push(CrowdFrame {
            id: f as u32,
            people,
            images,
            dots,
            gt,
        });
    }
    Ok(Scene {
        id,
        meta: SceneMeta { cameras, grid },
        frames,
    })
}

/// Per-scene seed derived from a master seed.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n_scenes` scenes from one template spec, each reseeded from `master`.
pub fn generate_dataset(template: &SceneSpec, n_scenes: usize, master: u64) -> Result<Dataset> {
    let scenes = (0..n_scenes)
        .map(|k| {
            let spec = SceneSpec {
                seed: scene_seed(master, k as u64),
                ..template.clone()
            };
            generate_scene(k as u32, &spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { scenes })
}
