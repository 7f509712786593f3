//! `cvcs`: generate synthetic multi-view crowds, train and evaluate the
//! counting network, run ablations and domain adaptation, and render maps.

mod manifest;
mod pgm;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use cvcs::net::{
    forward, load_checkpoint, save_checkpoint, scene_views, selection_weights, CamSel, Mode,
    ModelConfig, ModelParams, NoiseType, View,
};
use cvcs::sim::{
    generate_scene, read_dataset, read_unlabeled, scene_seed, write_dataset, AccessLog, Dataset,
    SceneSpec, Style, UnlabeledDataset,
};
use cvcs::train::{
    ablation_suite, default_trials, discriminator_accuracy, evaluate, split_scenes, summarize,
    train_discriminator, train_with, uda_finetune, write_metrics_csv, write_summary_csv,
    AblationRow, DiscriminatorParams, Suite, TrainConfig, UdaConfig,
};

use manifest::{sibling, write_atomic, RunManifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cvcs::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "cvcs",
    version,
    about = "Cross-view cross-scene multi-view crowd counting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model from scratch and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics CSV.
    Eval(EvalArgs),
    /// Train and evaluate every configuration of an ablation suite.
    Ablate(AblateArgs),
    /// Adapt a checkpoint to an unlabeled target dataset.
    Uda(UdaArgs),
    /// Render views, distance maps, weight maps and density maps as PGM.
    Viz(VizArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, default_value_t = 16)]
    scenes: usize,
    #[arg(long, default_value_t = 16)]
    views: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 20)]
    people_min: usize,
    #[arg(long, default_value_t = 60)]
    people_max: usize,
    /// Scene-plane cells per side.
    #[arg(long, default_value_t = 64)]
    grid: usize,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "128x96")]
    img: String,
    #[arg(long, default_value = "a")]
    style: String,
    /// Side of the square ground region, meters.
    #[arg(long, default_value_t = 32.0)]
    extent: f64,
    /// Ground-truth kernel width in grid cells.
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON with optional `model`, `train` and `adapt` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// View subsets per frame; defaults to ceil(views / k) + 1.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: PathBuf,
    /// Optional per-sample counts `scene,frame,trial,predicted,gt`.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    suite: String,
    /// Training scenes; the last quarter is held out unless `--test-data`
    /// is given.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct UdaArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labeled synthetic dataset.
    #[arg(long)]
    source: PathBuf,
    /// Target dataset; only cameras and images are read.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct VizArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `SCENE/FRAME`, or a frame of the first scene.
    #[arg(long, default_value = "0")]
    frame: String,
    #[arg(long)]
    out: PathBuf,
}

/// Adaptation settings beyond the training schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AdaptConfig {
    lambda: f64,
    disc_lr: f64,
    disc_momentum: f64,
    /// Discriminator-only steps on frozen features before adaptation.
    disc_steps: usize,
    /// Draws per domain when measuring discriminator accuracy.
    accuracy_samples: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let u = UdaConfig::default();
        AdaptConfig {
            lambda: u.lambda,
            disc_lr: u.disc_lr,
            disc_momentum: u.disc_momentum,
            disc_steps: 200,
            accuracy_samples: 40,
        }
    }
}

/// The `--config` file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    adapt: AdaptConfig,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: malformed config: {e}", path.display())))?;
    cfg.model
        .validate()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    cfg.train
        .validate()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Usage(format!("--img expects WIDTHxHEIGHT, got {s:?}"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| {
            t.trim().parse().map_err(|_| {
                CliError::Usage(format!(
                    "--seeds expects comma-separated integers, got {s:?}"
                ))
            })
        })
        .collect()
}

fn worker_count(jobs: usize) -> Result<usize> {
    let n = match std::env::var("CVCS_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Usage(format!(
                "CVCS_THREADS must be a positive integer, got {v:?}"
            ))
        })?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(n.min(jobs).max(1))
}

/// Scenes are independent given their seeds, so the worker count never
/// changes the result.
fn generate_parallel(
    template: &SceneSpec,
    n: usize,
    master: u64,
    workers: usize,
) -> Result<Dataset> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<cvcs::Result<cvcs::sim::Scene>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= n {
                    break;
                }
                let spec = SceneSpec {
                    seed: scene_seed(master, k as u64),
                    ..template.clone()
                };
                *slots[k].lock().unwrap() = Some(generate_scene(k as u32, &spec));
            });
        }
    });
    let scenes = slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap()
                .expect("every scene index is claimed")
        })
        .collect::<cvcs::Result<Vec<_>>>()?;
    Ok(Dataset { scenes })
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let t = Instant::now();
    if a.scenes == 0 || a.grid == 0 {
        return Err(CliError::Usage(
            "--scenes and --grid must be positive".into(),
        ));
    }
    if a.out.join("scenes").exists() {
        return Err(CliError::Usage(format!(
            "{} already holds a dataset",
            a.out.display()
        )));
    }
    let spec = SceneSpec {
        seed: 0,
        extent: a.extent,
        people: (a.people_min, a.people_max),
        n_views: a.views,
        n_frames: a.frames,
        image: parse_size(&a.img)?,
        mpp: a.extent / a.grid as f64,
        sigma: a.sigma,
        style: a.style.parse::<Style>()?,
        ..SceneSpec::default()
    };
    spec.validate()?;
    let workers = worker_count(a.scenes)?;
    let data = generate_parallel(&spec, a.scenes, a.seed, workers)?;
    write_dataset(&a.out, &data)?;
    let cfg = json!({ "scene_spec": spec, "scenes": a.scenes });
    RunManifest::new("gen", cfg, Some(a.seed), t.elapsed()).write_next_to(&a.out)?;
    println!(
        "wrote {} scenes, {} frames to {}",
        data.scenes.len(),
        data.frame_count(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let t = Instant::now();
    let mut rc = read_config(a.config.as_deref())?;
    if let Some(k) = a.k {
        rc.train.k = k;
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    let data = read_dataset(&a.data)?;
    let init = ModelParams::init(&rc.model, rc.train.seed)?;
    let out = train_with(&rc.model, &init, &data, &rc.train, |e, l| {
        eprintln!("epoch {e}: mean loss {l:.6}");
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_checkpoint(&a.out, &rc.model, &out.params)?;
    write_atomic(&sibling(&a.out, "loss.csv"), out.loss_csv().as_bytes())?;
    let cfg = json!({ "data": a.data, "model": rc.model, "train": rc.train });
    RunManifest::new("train", cfg, Some(rc.train.seed), t.elapsed()).write_next_to(&a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn model_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let t = Instant::now();
    let (cfg, params) = load_checkpoint(&a.model)?;
    let data = read_dataset(&a.data)?;
    let trials = a
        .trials
        .unwrap_or_else(|| default_trials(data.min_views(), a.k));
    let report = evaluate(&params, &cfg, &data, a.k, trials, a.seed)?;
    let row = AblationRow {
        config: model_label(&a.model),
        seed: a.seed,
        mae: report.mae,
        nae: report.nae,
        frames: report.frames(),
    };
    write_atomic(&a.csv, write_metrics_csv(&[row]).as_bytes())?;
    if let Some(path) = &a.samples {
        let mut s = String::from("scene,frame,trial,predicted,gt\n");
        for r in &report.samples {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.scene, r.frame, r.trial, r.predicted, r.gt
            ));
        }
        write_atomic(path, s.as_bytes())?;
    }
    let cfg_json = json!({ "data": a.data, "model": a.model, "k": a.k, "trials": trials, "model_config": cfg });
    RunManifest::new("eval", cfg_json, Some(a.seed), t.elapsed()).write_next_to(&a.csv)?;
    println!(
        "mae {:.4} nae {:.4} over {} frames",
        report.mae,
        report.nae,
        report.frames()
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let t = Instant::now();
    let suite: Suite = a.suite.parse()?;
    let seeds = parse_seeds(&a.seeds)?;
    let rc = read_config(a.config.as_deref())?;
    let data = read_dataset(&a.data)?;
    let (train_set, test_set) = match &a.test_data {
        Some(p) => (data, read_dataset(p)?),
        None => split_scenes(&data)?,
    };
    let rows = ablation_suite(
        &train_set,
        &test_set,
        suite,
        &rc.model,
        &rc.train,
        &seeds,
        |r| {
            eprintln!(
                "{} seed {}: mae {:.4} nae {:.4}",
                r.config, r.seed, r.mae, r.nae
            );
        },
    )?;
    write_atomic(&a.out, write_metrics_csv(&rows).as_bytes())?;
    let summary = summarize(&rows);
    write_atomic(
        &sibling(&a.out, "summary.csv"),
        write_summary_csv(&summary).as_bytes(),
    )?;
    let cfg = json!({
        "suite": suite,
        "data": a.data,
        "test_data": a.test_data,
        "seeds": seeds,
        "model": rc.model,
        "train": rc.train,
    });
    RunManifest::new("ablate", cfg, None, t.elapsed()).write_next_to(&a.out)?;
    for s in summary {
        println!(
            "{:<16} mae {:.3} ± {:.3}  nae {:.4} ± {:.4}  ({} runs)",
            s.config, s.mae.0, s.mae.1, s.nae.0, s.nae.1, s.runs
        );
    }
    Ok(())
}

fn cmd_uda(a: UdaArgs) -> Result<()> {
    let t = Instant::now();
    let mut rc = read_config(a.config.as_deref())?;
    if let Some(l) = a.lambda {
        rc.adapt.lambda = l;
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    let (cfg, params) = load_checkpoint(&a.model)?;
    let source = read_dataset(&a.source)?;
    let log = AccessLog::new();
    let target = read_unlabeled(&a.target, &log)?;
    let ucfg = UdaConfig {
        train: rc.train.clone(),
        lambda: rc.adapt.lambda,
        disc_lr: rc.adapt.disc_lr,
        disc_momentum: rc.adapt.disc_momentum,
    };
    let k = rc.train.k;
    let seed = rc.train.seed;
    let src_images = UnlabeledDataset::from(&source);
    let acc = |p: &ModelParams, d: &DiscriminatorParams| {
        discriminator_accuracy(
            p,
            &cfg,
            d,
            &src_images,
            &target,
            k,
            rc.adapt.accuracy_samples,
            seed ^ 0xACC,
        )
    };
    let disc = DiscriminatorParams::init(cfg.feature_channels(), seed)?;
    let disc = train_discriminator(
        &params,
        &cfg,
        &disc,
        &src_images,
        &target,
        k,
        rc.adapt.disc_steps,
        &ucfg,
        seed,
    )?;
    let before = acc(&params, &disc)?;
    let out = uda_finetune(&cfg, &params, &disc, &source, &target, &ucfg)?;
    let after = acc(&out.params, &out.disc)?;
    if log.touched_labels() {
        return Err(CliError::Usage(
            "internal error: a target label file was opened".into(),
        ));
    }
    save_checkpoint(&a.out, &cfg, &out.params)?;
    let cfg_json = json!({
        "model": a.model,
        "source": a.source,
        "target": a.target,
        "uda": ucfg,
        "adapt": rc.adapt,
        "disc_accuracy_before": before,
        "disc_accuracy_after": after,
        "target_files_read": log.paths().len(),
    });
    RunManifest::new("uda", cfg_json, Some(seed), t.elapsed()).write_next_to(&a.out)?;
    println!(
        "discriminator accuracy {before:.3} -> {after:.3}; saved {}",
        a.out.display()
    );
    Ok(())
}

fn parse_frame(s: &str) -> Result<(u32, u32)> {
    let bad = || CliError::Usage(format!("--frame expects SCENE/FRAME or FRAME, got {s:?}"));
    match s.split_once('/') {
        Some((a, b)) => Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
        None => Ok((0, s.parse().map_err(|_| bad())?)),
    }
}

/// Per-pixel max-normalized weight maps: at every scene cell the best
/// camera renders 255.
fn relative_weights(maps: &[cvcs::Tensor]) -> Vec<Vec<f64>> {
    let n = maps[0].len();
    let best: Vec<f64> = (0..n)
        .map(|i| maps.iter().map(|m| m.data()[i]).fold(0.0, f64::max))
        .collect();
    maps.iter()
        .map(|m| {
            m.data()
                .iter()
                .zip(&best)
                .map(|(v, b)| if *b > 0.0 { v / b } else { 0.0 })
                .collect()
        })
        .collect()
}

fn cmd_viz(a: VizArgs) -> Result<()> {
    let t = Instant::now();
    let (cfg, params) = load_checkpoint(&a.model)?;
    let data = read_dataset(&a.data)?;
    let (sid, fid) = parse_frame(&a.frame)?;
    let scene = data
        .scenes
        .iter()
        .find(|s| s.id == sid)
        .ok_or_else(|| CliError::Usage(format!("no scene {sid}")))?;
    let frame = scene
        .frames
        .iter()
        .find(|f| f.id == fid)
        .ok_or_else(|| CliError::Usage(format!("scene {sid} has no frame {fid}")))?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let put = |name: &str, bytes: Vec<u8>| write_atomic(&a.out.join(name), &bytes);

    let geoms = scene_views(&scene.meta, &cfg)?;
    for (v, (img, g)) in frame.images.iter().zip(&geoms).enumerate() {
        put(
            &format!("view_{v:02}.pgm"),
            pgm::encode(img.hw().0, img.hw().1, img.data()),
        )?;
        put(
            &format!("distance_{v:02}.pgm"),
            pgm::min_max(&g.distance.values),
        )?;
    }
    // without a selection module, show the plain distance weighting
    let (wcfg, wparams) = if cfg.camsel == CamSel::None {
        let c = ModelConfig {
            camsel: CamSel::NoConv,
            noise: NoiseType::Off,
            ..cfg.clone()
        };
        let p = ModelParams::init(&c, 0)?;
        (c, p)
    } else {
        (cfg.clone(), params.clone())
    };
    let weights = selection_weights(&wparams, &wcfg, &scene.meta.cameras, &scene.meta.grid)?;
    let (hs, ws) = (scene.meta.grid.hs, scene.meta.grid.ws);
    for (v, w) in relative_weights(&weights).iter().enumerate() {
        put(&format!("weight_{v:02}.pgm"), pgm::encode(hs, ws, w))?;
    }
    let views: Vec<View> = frame
        .images
        .iter()
        .zip(&geoms)
        .map(|(image, geometry)| View { image, geometry })
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let pred = forward(&params, &cfg, &views, Mode::Eval, NoiseType::Off, &mut rng)?;
    put("pred.pgm", pgm::max_normalized(&pred))?;
    put("gt.pgm", pgm::max_normalized(&frame.gt))?;
    let cfg_json = json!({ "model": a.model, "data": a.data, "scene": sid, "frame": fid });
    RunManifest::new("viz", cfg_json, None, t.elapsed()).write_next_to(&a.out)?;
    println!(
        "predicted {:.2} people (gt {:.2}); maps in {}",
        pred.sum(),
        frame.gt.sum(),
        a.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Uda(a) => cmd_uda(a),
        Command::Viz(a) => cmd_viz(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}\n\nRun `cvcs --help` for usage.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
