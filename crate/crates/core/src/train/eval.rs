use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prepare, sample_views};
use crate::error::{Error, Result};
use crate::net::{forward, Mode, ModelConfig, ModelParams, NoiseType, View};
use crate::sim::Dataset;

/// One evaluated view subset of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountSample {
    pub scene: u32,
    pub frame: u32,
    pub trial: usize,
    pub predicted: f64,
    pub gt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub samples: Vec<CountSample>,
    pub mae: f64,
    pub nae: f64,
}

impl EvalReport {
    /// Number of distinct frames evaluated.
    pub fn frames(&self) -> usize {
        let mut ids: Vec<(u32, u32)> = self.samples.iter().map(|s| (s.scene, s.frame)).collect();
        ids.dedup();
        ids.len()
    }
}

/// `(MAE, NAE)` of paired counts. NAE skips pairs with a zero ground truth
/// and is 0 when every pair does.
pub fn count_metrics(predicted: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if predicted.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth counts",
            predicted.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mae = predicted
        .iter()
        .zip(gt)
        .map(|(p, c)| (p - c).abs())
        .sum::<f64>()
        / gt.len() as f64;
    let (s, n) = predicted
        .iter()
        .zip(gt)
        .filter(|(_, &c)| c > 0.0)
        .fold((0.0, 0usize), |(s, n), (p, c)| {
            (s + (p - c).abs() / c, n + 1)
        });
    let nae = if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mae, nae))
}

/// `ceil(views / k) + 1` view subsets per frame.
pub fn default_trials(views: usize, k: usize) -> usize {
    views.div_ceil(k.max(1)) + 1
}

/// Counts every frame of `data` from `trials` random `k`-subsets of its
/// views. Predicted count is the summed density; ground truth is the summed
/// label map. The view draw for a frame depends only on `seed`, the scene id
/// and the frame id.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &Dataset,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    params.validate(cfg)?;
    if k == 0 || k > data.min_views() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={} for this dataset",
            data.min_views()
        )));
    }
    let prepared = prepare(data.scenes.iter().map(|s| &s.meta), cfg)?;
    let mut samples = Vec::new();
    for (scene, geo) in data.scenes.iter().zip(&prepared) {
        for frame in &scene.frames {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((scene.id as u64) << 32) | frame.id as u64);
            let gt = frame.gt.sum();
            for trial in 0..trials {
                let idx = sample_views(&mut rng, geo.views.len(), k)?;
                let views: Vec<View> = idx
                    .iter()
                    .map(|&v| View {
                        image: &frame.images[v],
                        geometry: &geo.views[v],
                    })
                    .collect();
                let density = forward(params, cfg, &views, Mode::Eval, NoiseType::Off, &mut rng)?;
                samples.push(CountSample {
                    scene: scene.id,
                    frame: frame.id,
                    trial,
                    predicted: density.sum(),
                    gt,
                });
            }
        }
    }
    let p: Vec<f64> = samples.iter().map(|s| s.predicted).collect();
    let g: Vec<f64> = samples.iter().map(|s| s.gt).collect();
    let (mae, nae) = count_metrics(&p, &g)?;
    Ok(EvalReport {
        k,
        samples,
        mae,
        nae,
    })
}
