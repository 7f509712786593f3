//! Label-free adaptation to a target domain with a feature discriminator
//! behind a gradient-reversal layer.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    mse_loss_on, prepare, run_epochs, sample_views, Prepared, Sgd, TrainConfig, TrainOutcome,
};
use crate::error::{Error, Result};
use crate::net::{decode_on, fuse_on, Bound, Mode, ModelConfig, ModelParams, NoiseType, View};
use crate::sim::{Dataset, UnlabeledDataset};
use crate::tensor::{Tape, Tensor, Var};

const DISC_CHANNELS: usize = 8;

/// Two stride-2 3x3 convs with relu, a global average, then a 1x1 conv to
/// one logit. Names are `disc.<i>.<w|b>`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl DiscriminatorParams {
    /// He-normal kernels, zero biases, for `channels` input features.
    pub fn init(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid(
                "discriminator needs at least one input channel",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let layers = [
            (DISC_CHANNELS, channels, 3),
            (DISC_CHANNELS, DISC_CHANNELS, 3),
            (1, DISC_CHANNELS, 1),
        ];
        for (i, (cout, cin, k)) in layers.into_iter().enumerate() {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            tensors.insert(
                format!("disc.{i}.w"),
                Tensor::randn(&[cout, cin, k, k], std, &mut rng),
            );
            tensors.insert(format!("disc.{i}.b"), Tensor::zeros(&[cout]));
        }
        Ok(DiscriminatorParams { tensors })
    }

    pub fn channels(&self) -> usize {
        self.tensors["disc.0.w"].shape()[1]
    }

    fn bind(&self, tape: &mut Tape, frozen: bool) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, t)| {
                let v = if frozen {
                    tape.constant(t.clone())
                } else {
                    tape.leaf(t.clone())
                };
                (k.clone(), v)
            })
            .collect()
    }
}

fn grads(tape: &Tape, vars: &BTreeMap<String, Var>) -> BTreeMap<String, Tensor> {
    vars.iter()
        .map(|(k, &v)| {
            let g = tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
            (k.clone(), g)
        })
        .collect()
}

fn discriminate_on(tape: &mut Tape, d: &BTreeMap<String, Var>, pooled: Var) -> Result<Var> {
    let mut x = pooled;
    for i in 0..2 {
        x = tape.conv2d(
            x,
            d[&format!("disc.{i}.w")],
            d[&format!("disc.{i}.b")],
            1,
            2,
        )?;
        x = tape.relu(x);
    }
    let x = tape.global_avg_pool(x)?;
    tape.conv2d(x, d["disc.2.w"], d["disc.2.b"], 0, 1)
}

/// Logit that `pooled` (a `[1, C, Hs, Ws]` view-pooled feature) comes from
/// the synthetic training domain.
pub fn discriminate(disc: &DiscriminatorParams, pooled: &Tensor) -> Result<f64> {
    if pooled.ndim() != 4 || pooled.shape()[1] != disc.channels() {
        return Err(Error::shape(format!(
            "discriminator wants [1, {}, H, W], got {:?}",
            disc.channels(),
            pooled.shape()
        )));
    }
    let mut tape = Tape::new();
    let d = disc.bind(&mut tape, true);
    let x = tape.constant(pooled.clone());
    let z = discriminate_on(&mut tape, &d, x)?;
    Ok(tape.value(z).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UdaConfig {
    /// Schedule for the synthetic counting loss.
    pub train: TrainConfig,
    /// Gradient-reversal strength.
    pub lambda: f64,
    pub disc_lr: f64,
    pub disc_momentum: f64,
}

impl Default for UdaConfig {
    fn default() -> Self {
        UdaConfig {
            train: TrainConfig::default(),
            lambda: 0.1,
            disc_lr: 1e-2,
            disc_momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UdaOutcome {
    pub params: ModelParams,
    pub disc: DiscriminatorParams,
    /// Mean synthetic counting loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Mean discriminator cross-entropy per epoch.
    pub disc_curve: Vec<f64>,
}

/// Unlabeled frames with their geometry, for drawing random view subsets.
struct Pool<'a> {
    data: &'a UnlabeledDataset,
    geo: Vec<Prepared<'a>>,
}

impl<'a> Pool<'a> {
    fn new(data: &'a UnlabeledDataset, cfg: &ModelConfig, k: usize) -> Result<Self> {
        if data.scenes.iter().all(|s| s.frames.is_empty()) {
            return Err(Error::invalid("domain has no frames"));
        }
        if data.scenes.iter().any(|s| s.meta.cameras.len() < k) {
            return Err(Error::invalid(format!(
                "k = {k} exceeds the views of some scene"
            )));
        }
        Ok(Pool {
            data,
            geo: prepare(data.scenes.iter().map(|s| &s.meta), cfg)?,
        })
    }

    fn draw<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<View<'_>>> {
        let si = loop {
            let si = rng.random_range(0..self.data.scenes.len());
            if !self.data.scenes[si].frames.is_empty() {
                break si;
            }
        };
        let scene = &self.data.scenes[si];
        let frame = &scene.frames[rng.random_range(0..scene.frames.len())];
        let idx = sample_views(rng, self.geo[si].views.len(), k)?;
        Ok(idx
            .iter()
            .map(|&v| View {
                image: &frame[v],
                geometry: &self.geo[si].views[v],
            })
            .collect())
    }
}

fn pooled_on<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    views: &[View],
    rng: &mut R,
) -> Result<Var> {
    Ok(fuse_on(tape, p, cfg, views, Mode::Eval, NoiseType::Off, rng)?.pooled)
}

/// Trains `disc` alone on frozen model features: every step sees one random
/// source sample (label 1) and one target sample (label 0).
#[allow(clippy::too_many_arguments)]
pub fn train_discriminator(
    params: &ModelParams,
    cfg: &ModelConfig,
    disc: &DiscriminatorParams,
    source: &UnlabeledDataset,
    target: &UnlabeledDataset,
    k: usize,
    steps: usize,
    ucfg: &UdaConfig,
    seed: u64,
) -> Result<DiscriminatorParams> {
    params.validate(cfg)?;
    let src = Pool::new(source, cfg, k)?;
    let tgt = Pool::new(target, cfg, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disc = disc.clone();
    let mut opt = Sgd::new(0.0, ucfg.disc_momentum);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let d = disc.bind(&mut tape, false);
        let mut loss = None;
        for (pool, label) in [(&src, 1.0), (&tgt, 0.0)] {
            let views = pool.draw(k, &mut rng)?;
            let f = pooled_on(&mut tape, &p, cfg, &views, &mut rng)?;
            let z = discriminate_on(&mut tape, &d, f)?;
            let l = tape.bce_with_logits(z, label)?;
            loss = Some(match loss {
                None => l,
                Some(a) => tape.add(a, l)?,
            });
        }
        let loss = tape.scale(loss.unwrap(), 0.5);
        tape.backward(loss)?;
        opt.step(&mut disc.tensors, &grads(&tape, &d), ucfg.disc_lr);
    }
    Ok(disc)
}

/// Fraction of `samples` source and `samples` target draws that `disc`
/// labels correctly (positive logit means source).
#[allow(clippy::too_many_arguments)]
pub fn discriminator_accuracy(
    params: &ModelParams,
    cfg: &ModelConfig,
    disc: &DiscriminatorParams,
    source: &UnlabeledDataset,
    target: &UnlabeledDataset,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::invalid("accuracy needs at least one sample"));
    }
    params.validate(cfg)?;
    let src = Pool::new(source, cfg, k)?;
    let tgt = Pool::new(target, cfg, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    for (pool, is_source) in [(&src, true), (&tgt, false)] {
        for _ in 0..samples {
            let views = pool.draw(k, &mut rng)?;
            let mut tape = Tape::new();
            let p = params.bind_frozen(&mut tape);
            let f = pooled_on(&mut tape, &p, cfg, &views, &mut rng)?;
            let z = discriminate(disc, tape.value(f))?;
            if (z > 0.0) == is_source {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (2 * samples) as f64)
}

/// Fine-tunes on the labeled `source` set while a discriminator learns to
/// tell source from `target` pooled features; the model sees the
/// discriminator gradient reversed and scaled by `lambda`.
///
/// The counting loss follows exactly the sampling schedule of
/// [`super::train`]; target draws use their own stream, so `lambda = 0`
/// reproduces plain fine-tuning. Target frames carry no labels.
pub fn uda_finetune(
    cfg: &ModelConfig,
    init: &ModelParams,
    disc: &DiscriminatorParams,
    source: &Dataset,
    target: &UnlabeledDataset,
    ucfg: &UdaConfig,
) -> Result<UdaOutcome> {
    if !(ucfg.lambda >= 0.0 && ucfg.disc_lr > 0.0) {
        return Err(Error::invalid(
            "lambda must be non-negative and disc_lr positive",
        ));
    }
    if disc.channels() != cfg.feature_channels() {
        return Err(Error::shape(format!(
            "discriminator takes {} channels, model pools {}",
            disc.channels(),
            cfg.feature_channels()
        )));
    }
    let tcfg = &ucfg.train;
    let tgt = Pool::new(target, cfg, tcfg.k)?;
    let mut trng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    trng.set_stream(1);
    let mut disc = disc.clone();
    let mut opt = Sgd::new(tcfg.weight_decay, tcfg.momentum);
    let mut dopt = Sgd::new(0.0, ucfg.disc_momentum);
    let mut disc_curve = Vec::new();
    let acc = Cell::new((0.0, 0usize));

    let TrainOutcome { params, loss_curve } = run_epochs(
        cfg,
        init,
        source,
        tcfg,
        |_, _| {
            let (sum, n) = acc.take();
            disc_curve.push(sum / n.max(1) as f64);
        },
        |params, s, rng| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let d = disc.bind(&mut tape, false);
            let fs = fuse_on(&mut tape, &p, cfg, s.views, Mode::Train, cfg.noise, rng)?;
            let raw = decode_on(&mut tape, &p, cfg, fs.fused)?;
            let target_map = s.gt.map(|v| v * cfg.output_scale);
            let count = mse_loss_on(&mut tape, raw, &target_map, &s.patches)?;

            let tviews = tgt.draw(tcfg.k, &mut trng)?;
            let ft = pooled_on(&mut tape, &p, cfg, &tviews, &mut trng)?;
            let rs = tape.grad_reverse(fs.pooled, ucfg.lambda);
            let rt = tape.grad_reverse(ft, ucfg.lambda);
            let zs = discriminate_on(&mut tape, &d, rs)?;
            let zt = discriminate_on(&mut tape, &d, rt)?;
            let ls = tape.bce_with_logits(zs, 1.0)?;
            let lt = tape.bce_with_logits(zt, 0.0)?;
            let adv = tape.add(ls, lt)?;
            let adv = tape.scale(adv, 0.5);
            let total = tape.add(count, adv)?;
            tape.backward(total)?;

            opt.step(&mut params.tensors, &p.grads(&tape), s.lr);
            dopt.step(&mut disc.tensors, &grads(&tape, &d), ucfg.disc_lr);
            let (sum, n) = acc.get();
            acc.set((sum + tape.value(adv).item(), n + 1));
            Ok(tape.value(count).item())
        },
    )?;
    Ok(UdaOutcome {
        params,
        disc,
        loss_curve,
        disc_curve,
    })
}
