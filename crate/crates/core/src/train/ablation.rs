use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{default_trials, evaluate, train, TrainConfig};
use crate::error::{Error, Result};
use crate::net::{CamSel, ModelConfig, ModelParams, NoiseType};
use crate::sim::Dataset;

/// Camera counts of the `views` suite.
pub const VIEW_COUNTS: [usize; 5] = [3, 5, 7, 9, 11];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// No selection against the three selection variants.
    Camsel,
    /// Backbone without noise and with each noise type.
    Noise,
    /// Backbone, +CamSel, +NoiseV-D, and both.
    Combine,
    /// One model trained at `k`, evaluated at every [`VIEW_COUNTS`] entry.
    Views,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "camsel" => Ok(Suite::Camsel),
            "noise" => Ok(Suite::Noise),
            "combine" => Ok(Suite::Combine),
            "views" => Ok(Suite::Views),
            _ => Err(Error::invalid(format!(
                "unknown suite {s:?} (expected camsel, noise, combine or views)"
            ))),
        }
    }
}

/// `base` with a different selection and noise setting.
pub fn variant(base: &ModelConfig, camsel: CamSel, noise: NoiseType) -> ModelConfig {
    ModelConfig {
        camsel,
        noise,
        ..base.clone()
    }
}

/// Labeled model configs trained by `suite`.
pub fn suite_configs(suite: Suite, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let v = |c, n| variant(base, c, n);
    match suite {
        Suite::Camsel => [
            ("backbone", CamSel::None),
            ("noconv", CamSel::NoConv),
            ("conv1x1", CamSel::Conv1x1),
            ("conv3", CamSel::Conv3),
        ]
        .into_iter()
        .map(|(l, c)| (l.to_string(), v(c, NoiseType::Off)))
        .collect(),
        Suite::Noise => NoiseType::ALL
            .iter()
            .map(|&n| {
                let label = if n == NoiseType::Off {
                    "backbone".to_string()
                } else {
                    format!("noise_{n}")
                };
                (label, v(CamSel::None, n))
            })
            .collect(),
        Suite::Combine => vec![
            ("backbone".into(), v(CamSel::None, NoiseType::Off)),
            ("camsel".into(), v(CamSel::Conv3, NoiseType::Off)),
            ("noise_D".into(), v(CamSel::None, NoiseType::D)),
            ("camsel+noise_D".into(), v(CamSel::Conv3, NoiseType::D)),
        ],
        Suite::Views => vec![("cvcs".into(), v(CamSel::Conv3, NoiseType::D))],
    }
}

/// Splits off the last quarter of the scenes (at least one) as a test set.
pub fn split_scenes(data: &Dataset) -> Result<(Dataset, Dataset)> {
    if data.scenes.len() < 2 {
        return Err(Error::invalid("need at least two scenes to split"));
    }
    let n_test = (data.scenes.len() / 4).max(1);
    let cut = data.scenes.len() - n_test;
    Ok((
        Dataset {
            scenes: data.scenes[..cut].to_vec(),
        },
        Dataset {
            scenes: data.scenes[cut..].to_vec(),
        },
    ))
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub mae: f64,
    pub nae: f64,
    pub frames: usize,
}

/// Trains every config of `suite` once per seed on `train_set` and evaluates
/// on `test_set`. The seed drives initialization, training and evaluation
/// draws. `on_row` sees each row as it is produced.
pub fn ablation_suite(
    train_set: &Dataset,
    test_set: &Dataset,
    suite: Suite,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    seeds: &[u64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let views = test_set.min_views();
    let mut rows = Vec::new();
    for (label, cfg) in suite_configs(suite, base) {
        for &seed in seeds {
            let init = ModelParams::init(&cfg, seed)?;
            let t = TrainConfig {
                seed,
                ..tcfg.clone()
            };
            let trained = train(&cfg, &init, train_set, &t)?.params;
            let ks: Vec<(String, usize)> = if suite == Suite::Views {
                VIEW_COUNTS.iter().map(|&k| (format!("k={k}"), k)).collect()
            } else {
                vec![(label.clone(), tcfg.k)]
            };
            for (name, k) in ks {
                let r = evaluate(&trained, &cfg, test_set, k, default_trials(views, k), seed)?;
                let row = AblationRow {
                    config: name,
                    seed,
                    mae: r.mae,
                    nae: r.nae,
                    frames: r.frames(),
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// `config,seed,mae,nae,frames` with a header line.
pub fn write_metrics_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,seed,mae,nae,frames\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.config, r.seed, r.mae, r.nae, r.frames
        )
        .unwrap();
    }
    s
}

/// Mean and sample standard deviation of MAE and NAE for one config.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub config: String,
    pub runs: usize,
    pub mae: (f64, f64),
    pub nae: (f64, f64),
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Groups rows by config in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<Summary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.config.as_str()) {
            order.push(&r.config);
        }
    }
    order
        .into_iter()
        .map(|c| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.config == c).collect();
            let mae: Vec<f64> = mine.iter().map(|r| r.mae).collect();
            let nae: Vec<f64> = mine.iter().map(|r| r.nae).collect();
            Summary {
                config: c.to_string(),
                runs: mine.len(),
                mae: mean_sd(&mae),
                nae: mean_sd(&nae),
            }
        })
        .collect()
}

/// `config,runs,mae_mean,mae_sd,nae_mean,nae_sd` with a header line.
pub fn write_summary_csv(rows: &[Summary]) -> String {
    let mut s = String::from("config,runs,mae_mean,mae_sd,nae_mean,nae_sd\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.config, r.runs, r.mae.0, r.mae.1, r.nae.0, r.nae.1
        )
        .unwrap();
    }
    s
}
