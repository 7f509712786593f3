#![allow(dead_code)]

use cvcs::net::{scene_views, ModelConfig, ViewGeometry};
use cvcs::sim::{generate_scene, Scene, SceneSpec};

/// Small scene for fast network tests: 16x12 images, 8x8 grid.
pub fn tiny_scene(n_views: usize, seed: u64) -> Scene {
    let spec = SceneSpec {
        seed,
        n_views,
        n_frames: 2,
        image: (16, 12),
        mpp: 4.0,
        sigma: 0.5,
        people: (5, 10),
        ..SceneSpec::default()
    };
    generate_scene(0, &spec).unwrap()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        extractor: vec![2, 2, 3, 3],
        decoder: vec![4, 2, 1],
        selection: vec![2, 2, 1],
        ..ModelConfig::default()
    }
}

pub fn geoms(scene: &Scene, cfg: &ModelConfig) -> Vec<ViewGeometry> {
    scene_views(&scene.meta, cfg).unwrap()
}
