//! The counting network: a shared per-view extractor, projection of the
//! feature maps onto the scene plane, optional distance-based camera
//! selection, training-only noise views, max view pooling and a
//! density decoder.

mod checkpoint;
mod config;
mod geometry;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{CamSel, ModelConfig, NoiseType, FEATURE_STRIDE};

pub use geometry::{scene_views, ViewGeometry};
pub use params::{Bound, ModelParams};

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{camera_weights_on, CameraParams, ScenePlaneGrid};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One camera's image together with its precomputed geometry.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    /// `[1, H, W]` or `[1, 1, H, W]`.
    pub image: &'a Tensor,
    pub geometry: &'a ViewGeometry,
}

/// Intermediate results of a forward pass recorded on a tape.
pub struct ForwardOutput {
    /// `[1, Hs, Ws]` decoder output, `output_scale` times the density.
    pub raw: Var,
    /// `[1, Hs, Ws]` scene density.
    pub density: Var,
    /// `[1, C, Hs, Ws]` view-pooled features, before any summed noise.
    pub pooled: Var,
    /// Pooled features as they enter the decoder.
    pub fused: Var,
    /// Per-view selection weights `[1, 1, Hs, Ws]` (empty for `CamSel::None`).
    pub weights: Vec<Var>,
}

fn conv_stack(
    tape: &mut Tape,
    p: &Bound,
    block: &str,
    mut x: Var,
    n: usize,
    pool_after: &[usize],
    relu_last: bool,
) -> Result<Var> {
    for i in 0..n {
        let k = p.get(&format!("{block}.{i}.w"))?;
        let b = p.get(&format!("{block}.{i}.b"))?;
        let pad = tape.value(k).shape()[2] / 2;
        x = tape.conv2d(x, k, b, pad, 1)?;
        if i + 1 < n || relu_last {
            x = tape.relu(x);
        }
        if pool_after.contains(&i) {
            x = tape.max_pool2d(x, 2, 2)?;
        }
    }
    Ok(x)
}

fn as_image(tape: &mut Tape, x: Var) -> Result<Var> {
    let (h, w) = tape.value(x).hw();
    if tape.value(x).len() != h * w {
        return Err(Error::shape(format!(
            "expected a single-channel image, got {:?}",
            tape.value(x).shape()
        )));
    }
    tape.reshape(x, &[1, 1, h, w])
}

/// Shared extractor `F` (or the noise extractor `H` for `block = "noise_ext"`)
/// on a `[1, 1, H, W]` image, giving `[1, C, H/4, W/4]`.
pub fn extract_features_on(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    block: &str,
    image: Var,
) -> Result<Var> {
    let x = as_image(tape, image)?;
    conv_stack(
        tape,
        p,
        block,
        x,
        cfg.extractor.len(),
        &cfg.pool_after(),
        true,
    )
}

/// Features of one image with the shared extractor.
pub fn extract_features(params: &ModelParams, cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let x = tape.constant(image.clone());
    let f = extract_features_on(&mut tape, &p, cfg, "ext", x)?;
    Ok(tape.value(f).clone())
}

/// Projected selection score `P(M(D_k))` and its validity mask for one view.
fn selection_score(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    g: &ViewGeometry,
) -> Result<(Var, Tensor)> {
    let d = tape.constant(g.distance.values.clone());
    let m = match cfg.camsel {
        CamSel::None => return Err(Error::invalid("camsel None has no selection weights")),
        CamSel::NoConv => d,
        CamSel::Conv1x1 => conv_stack(tape, p, "sel", d, 1, &[], false)?,
        CamSel::Conv3 => conv_stack(tape, p, "sel", d, cfg.selection.len(), &[], false)?,
    };
    tape.bilinear_sample(m, &g.feature_grid)
}

/// Normalized selection weights `[1, 1, Hs, Ws]` for every view on `tape`.
pub fn selection_weights_on(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    views: &[&ViewGeometry],
) -> Result<Vec<Var>> {
    let mut scores = Vec::with_capacity(views.len());
    let mut masks = Vec::with_capacity(views.len());
    for g in views {
        let (s, m) = selection_score(tape, p, cfg, g)?;
        scores.push(s);
        masks.push(m);
    }
    Ok(camera_weights_on(tape, &scores, &masks)?.normalized)
}

/// Selection weight maps `[1, Hs, Ws]` for a set of cameras.
pub fn selection_weights(
    params: &ModelParams,
    cfg: &ModelConfig,
    cams: &[CameraParams],
    grid: &ScenePlaneGrid,
) -> Result<Vec<Tensor>> {
    if cams.is_empty() {
        return Err(Error::invalid("at least one camera is required"));
    }
    let geoms = cams
        .iter()
        .map(|c| ViewGeometry::new(c, grid, cfg))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ViewGeometry> = geoms.iter().collect();
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let w = selection_weights_on(&mut tape, &p, cfg, &refs)?;
    w.into_iter()
        .map(|v| tape.value(v).clone().reshape(&[1, grid.hs, grid.ws]))
        .collect()
}

/// View-pooling inputs as they are assembled during a forward pass.
pub struct FusionInputs {
    /// `[1, 1, H, W]` input images, one per real view.
    pub images: Vec<Var>,
    /// Maps entering the view max, `[1, C, Hs, Ws]` each.
    pub projected: Vec<Var>,
    /// Maps added to the pooled result.
    pub summed: Vec<Var>,
}

/// Adds the training-only noise view of type `kind`.
///
/// Type A rewrites `inputs.images[slot]` and must run before extraction;
/// the other types append to `projected` or `summed` and must run after
/// projection. `eps(shape)` supplies the noise; the noise camera is the
/// view at `slot`. The noise map gets no selection weight.
#[allow(clippy::too_many_arguments)]
pub fn inject_noise_view(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    kind: NoiseType,
    inputs: &mut FusionInputs,
    slot: usize,
    noise_geom: &ViewGeometry,
    eps: &mut dyn FnMut(&[usize]) -> Tensor,
) -> Result<()> {
    let c = cfg.feature_channels();
    let (hs, ws) = (
        noise_geom.feature_grid.height(),
        noise_geom.feature_grid.width(),
    );
    let (hf, wf) = noise_geom.feature_size();
    let (h, w) = (noise_geom.camera.height, noise_geom.camera.width);
    let project = |tape: &mut Tape, x: Var| {
        tape.bilinear_sample(x, &noise_geom.feature_grid)
            .map(|r| r.0)
    };
    match kind {
        NoiseType::Off => {}
        NoiseType::A => {
            let x = *inputs
                .images
                .get(slot)
                .ok_or_else(|| Error::invalid(format!("noise slot {slot} out of range")))?;
            let e = tape.constant(eps(&[1, 1, h, w]));
            inputs.images[slot] = tape.stack_max(&[x, e])?;
        }
        NoiseType::B => {
            let e = tape.constant(eps(&[1, c, hs, ws]));
            inputs.projected.push(e);
        }
        NoiseType::C => {
            let e = tape.constant(eps(&[1, c, hf, wf]));
            let pe = project(tape, e)?;
            inputs.projected.push(pe);
        }
        NoiseType::D | NoiseType::E | NoiseType::F | NoiseType::G => {
            let block = if kind.uses_noise_extractor() {
                "noise_ext"
            } else {
                "ext"
            };
            let e = tape.constant(eps(&[1, 1, h, w]));
            let f = extract_features_on(tape, p, cfg, block, e)?;
            let pf = project(tape, f)?;
            if kind.is_sum() {
                inputs.summed.push(pf);
            } else {
                inputs.projected.push(pf);
            }
        }
    }
    Ok(())
}

/// Decoder on pooled features `[1, C, Hs, Ws]`, giving `[1, Hs, Ws]`.
pub fn decode_on(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, fused: Var) -> Result<Var> {
    let y = conv_stack(tape, p, "dec", fused, cfg.decoder.len(), &[], false)?;
    let (hs, ws) = tape.value(y).hw();
    tape.reshape(y, &[1, hs, ws])
}

/// View-pooled features of one sample.
pub struct Fused {
    /// `[1, C, Hs, Ws]` max over the (weighted) projected views.
    pub pooled: Var,
    /// `pooled` plus any summed noise map; the decoder input.
    pub fused: Var,
    /// Per-view selection weights `[1, 1, Hs, Ws]` (empty for `CamSel::None`).
    pub weights: Vec<Var>,
}

/// Stages 1 to 3 of the forward pass: extraction, projection, selection,
/// noise injection and view pooling.
///
/// `noise` is the noise view to inject; it must be `Off` in eval mode. The
/// noise camera is drawn uniformly from `views` with `rng`, which also
/// supplies the `N(0, 1)` noise.
pub fn fuse_on<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    views: &[View],
    mode: Mode,
    noise: NoiseType,
    rng: &mut R,
) -> Result<Fused> {
    if mode == Mode::Eval && noise != NoiseType::Off {
        return Err(Error::NoiseInEval);
    }
    if views.is_empty() {
        return Err(Error::invalid("forward needs at least one view"));
    }
    let grid0 = &views[0].geometry.feature_grid;
    if views.iter().any(|v| {
        v.geometry.feature_grid.height() != grid0.height()
            || v.geometry.feature_grid.width() != grid0.width()
    }) {
        return Err(Error::shape(
            "all views must project onto the same scene grid",
        ));
    }

    let slot = if noise == NoiseType::Off {
        0
    } else {
        let idx: Vec<usize> = (0..views.len()).collect();
        *idx.choose(rng).unwrap()
    };
    let mut eps = |shape: &[usize]| Tensor::randn(shape, 1.0, rng);
    let mut images = Vec::with_capacity(views.len());
    let (mean, std) = cfg.input_norm;
    for v in views {
        let x = tape.constant(v.image.map(|p| (p - mean) / std));
        images.push(as_image(tape, x)?);
    }
    let mut inputs = FusionInputs {
        images,
        projected: Vec::with_capacity(views.len() + 1),
        summed: Vec::new(),
    };
    if noise == NoiseType::A {
        inject_noise_view(
            tape,
            p,
            cfg,
            noise,
            &mut inputs,
            slot,
            views[slot].geometry,
            &mut eps,
        )?;
    }

    let weights = if cfg.camsel == CamSel::None {
        Vec::new()
    } else {
        let geoms: Vec<&ViewGeometry> = views.iter().map(|v| v.geometry).collect();
        selection_weights_on(tape, p, cfg, &geoms)?
    };
    for (k, v) in views.iter().enumerate() {
        let f = extract_features_on(tape, p, cfg, "ext", inputs.images[k])?;
        let (pf, _) = tape.bilinear_sample(f, &v.geometry.feature_grid)?;
        let pf = match weights.get(k) {
            Some(&w) => tape.mul(pf, w)?,
            None => pf,
        };
        inputs.projected.push(pf);
    }
    if noise != NoiseType::Off && noise != NoiseType::A {
        inject_noise_view(
            tape,
            p,
            cfg,
            noise,
            &mut inputs,
            slot,
            views[slot].geometry,
            &mut eps,
        )?;
    }

    let pooled = tape.stack_max(&inputs.projected)?;
    let mut fused = pooled;
    for &s in &inputs.summed {
        fused = tape.add(fused, s)?;
    }
    Ok(Fused {
        pooled,
        fused,
        weights,
    })
}

/// Full forward pass on `tape`; see [`fuse_on`] for the noise arguments.
pub fn forward_on<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    views: &[View],
    mode: Mode,
    noise: NoiseType,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let Fused {
        pooled,
        fused,
        weights,
    } = fuse_on(tape, p, cfg, views, mode, noise, rng)?;
    let raw = decode_on(tape, p, cfg, fused)?;
    let density = tape.scale(raw, 1.0 / cfg.output_scale);
    Ok(ForwardOutput {
        raw,
        density,
        pooled,
        fused,
        weights,
    })
}

/// Predicted scene density `[1, Hs, Ws]` without gradients.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    cfg: &ModelConfig,
    views: &[View],
    mode: Mode,
    noise: NoiseType,
    rng: &mut R,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let out = forward_on(&mut tape, &p, cfg, views, mode, noise, rng)?;
    Ok(tape.value(out.density).clone())
}
