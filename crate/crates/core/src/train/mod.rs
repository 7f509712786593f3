//! Supervised training, evaluation, domain adaptation and ablations.

mod ablation;
mod eval;
mod loss;
mod optim;
mod uda;

pub use ablation::{
    ablation_suite, split_scenes, suite_configs, summarize, variant, write_metrics_csv,
    write_summary_csv, AblationRow, Suite, Summary, VIEW_COUNTS,
};
pub use eval::{count_metrics, default_trials, evaluate, CountSample, EvalReport};
pub use loss::{mse_loss, mse_loss_on, patch_mask, Rect};
pub use optim::{lr_at, Sgd};
pub use uda::{
    discriminate, discriminator_accuracy, train_discriminator, uda_finetune, DiscriminatorParams,
    UdaConfig, UdaOutcome,
};

use std::fmt::Write as _;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SceneMeta;
use crate::net::{forward_on, scene_views, Mode, ModelConfig, ModelParams, View, ViewGeometry};
use crate::sim::Dataset;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Per-epoch decay: the rate at epoch `e` is `lr / (1 + lr_decay * e)`.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Views per training sample.
    pub k: usize,
    /// Random view subsets drawn per frame and epoch.
    pub resamples: usize,
    pub patches_per_frame: usize,
    /// Patch `(height, width)` in grid cells.
    pub patch: (usize, usize),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_decay: 1e-4,
            weight_decay: 1e-4,
            momentum: 0.0,
            epochs: 10,
            k: 5,
            resamples: 5,
            patches_per_frame: 4,
            patch: (32, 32),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.resamples == 0 || self.patches_per_frame == 0 {
            return Err(Error::invalid(
                "resamples and patches_per_frame must be at least 1",
            ));
        }
        if !(self.lr > 0.0 && self.lr_decay >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "lr must be positive and decays non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Scene with its view geometry computed once for a model config.
pub struct Prepared<'a> {
    pub meta: &'a SceneMeta,
    pub views: Vec<ViewGeometry>,
}

pub(crate) fn prepare<'a>(
    metas: impl Iterator<Item = &'a SceneMeta>,
    cfg: &ModelConfig,
) -> Result<Vec<Prepared<'a>>> {
    metas
        .map(|meta| {
            Ok(Prepared {
                meta,
                views: scene_views(meta, cfg)?,
            })
        })
        .collect()
}

/// `k` distinct view indices out of `n`.
pub(crate) fn sample_views<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {n} available views"
        )));
    }
    Ok(index::sample(rng, n, k).into_vec())
}

pub(crate) fn sample_patches<R: Rng + ?Sized>(
    rng: &mut R,
    hs: usize,
    ws: usize,
    cfg: &TrainConfig,
) -> Result<Vec<Rect>> {
    let (ph, pw) = cfg.patch;
    if ph == 0 || pw == 0 || ph > hs || pw > ws {
        return Err(Error::invalid(format!(
            "patch {ph}x{pw} does not fit the {hs}x{ws} grid"
        )));
    }
    Ok((0..cfg.patches_per_frame)
        .map(|_| Rect {
            row: rng.random_range(0..=hs - ph),
            col: rng.random_range(0..=ws - pw),
            height: ph,
            width: pw,
        })
        .collect())
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean sample loss of every epoch.
    pub loss_curve: Vec<f64>,
}

impl TrainOutcome {
    /// `epoch,mean_loss` rows.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (e, l) in self.loss_curve.iter().enumerate() {
            writeln!(s, "{e},{l}").unwrap();
        }
        s
    }
}

/// One SGD step on a single sample; returns the sample loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgd_sample<R: Rng + ?Sized>(
    params: &mut ModelParams,
    opt: &mut Sgd,
    cfg: &ModelConfig,
    views: &[View],
    gt: &Tensor,
    patches: &[Rect],
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let out = forward_on(&mut tape, &p, cfg, views, Mode::Train, cfg.noise, rng)?;
    let target = gt.map(|v| v * cfg.output_scale);
    let loss = mse_loss_on(&mut tape, out.raw, &target, patches)?;
    tape.backward(loss)?;
    let grads = p.grads(&tape);
    opt.step(&mut params.tensors, &grads, lr);
    Ok(tape.value(loss).item())
}

/// Supervised training from `init` on every frame of `data`.
///
/// Each epoch visits the frames in a shuffled order; every frame yields
/// `resamples` samples, each with a fresh random `k`-subset of views and
/// `patches_per_frame` random patches.
pub fn train(
    cfg: &ModelConfig,
    init: &ModelParams,
    data: &Dataset,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(cfg, init, data, tcfg, |_, _| {})
}

/// [`train`] with a callback after every epoch `(epoch, mean_loss)`.
pub fn train_with(
    cfg: &ModelConfig,
    init: &ModelParams,
    data: &Dataset,
    tcfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let mut opt = Sgd::new(tcfg.weight_decay, tcfg.momentum);
    run_epochs(cfg, init, data, tcfg, on_epoch, |params, s, rng| {
        sgd_sample(params, &mut opt, cfg, s.views, s.gt, &s.patches, s.lr, rng)
    })
}

/// One drawn training sample.
pub(crate) struct Sample<'s> {
    pub views: &'s [View<'s>],
    pub gt: &'s Tensor,
    pub patches: Vec<Rect>,
    pub lr: f64,
}

/// The sampling schedule shared by [`train`] and adaptation: `step` updates
/// the parameters on one sample and returns its loss.
pub(crate) fn run_epochs(
    cfg: &ModelConfig,
    init: &ModelParams,
    data: &Dataset,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
    mut step: impl FnMut(&mut ModelParams, Sample, &mut ChaCha8Rng) -> Result<f64>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    init.validate(cfg)?;
    if data.frame_count() == 0 {
        return Err(Error::invalid("training set has no frames"));
    }
    if tcfg.k > data.min_views() {
        return Err(Error::invalid(format!(
            "k = {} exceeds the {} views of the smallest scene",
            tcfg.k,
            data.min_views()
        )));
    }
    let prepared = prepare(data.scenes.iter().map(|s| &s.meta), cfg)?;
    let mut order: Vec<(usize, usize)> = data
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.frames.len()).map(move |fi| (si, fi)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut params = init.clone();
    let mut curve = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let lr = lr_at(tcfg.lr, tcfg.lr_decay, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &(si, fi) in &order {
            let scene = &data.scenes[si];
            let frame = &scene.frames[fi];
            let geo = &prepared[si];
            for _ in 0..tcfg.resamples {
                let idx = sample_views(&mut rng, geo.views.len(), tcfg.k)?;
                let views: Vec<View> = idx
                    .iter()
                    .map(|&v| View {
                        image: &frame.images[v],
                        geometry: &geo.views[v],
                    })
                    .collect();
                let patches = sample_patches(&mut rng, geo.meta.grid.hs, geo.meta.grid.ws, tcfg)?;
                let sample = Sample {
                    views: &views,
                    gt: &frame.gt,
                    patches,
                    lr,
                };
                let loss = step(&mut params, sample, &mut rng).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!(
                        "{m} (epoch {epoch}, scene {}, frame {})",
                        scene.id, frame.id
                    )),
                    e => e,
                })?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {loss} at epoch {epoch}, scene {}, frame {}",
                        scene.id, frame.id
                    )));
                }
                total += loss;
                count += 1;
            }
        }
        let mean = total / count as f64;
        on_epoch(epoch, mean);
        curve.push(mean);
    }
    params.validate(cfg)?;
    Ok(TrainOutcome {
        params,
        loss_curve: curve,
    })
}
