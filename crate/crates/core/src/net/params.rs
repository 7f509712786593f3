use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{CamSel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named weights of the network. Names are `<block>.<layer>.<w|b>` with
/// blocks `ext` (shared extractor), `sel` (selection CNN), `noise_ext`
/// (separate noise extractor) and `dec` (decoder).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

/// `(name, cout, cin, k)` for every conv the config needs.
pub(crate) fn layer_specs(cfg: &ModelConfig) -> Vec<(String, usize, usize, usize)> {
    let mut out = Vec::new();
    let mut chain = |block: &str, cin0: usize, chans: &[usize], ks: &dyn Fn(usize) -> usize| {
        let mut cin = cin0;
        for (i, &c) in chans.iter().enumerate() {
            out.push((format!("{block}.{i}"), c, cin, ks(i)));
            cin = c;
        }
    };
    chain("ext", 1, &cfg.extractor, &|_| 3);
    match cfg.camsel {
        CamSel::None | CamSel::NoConv => {}
        CamSel::Conv1x1 => chain("sel", 1, &[1], &|_| 1),
        CamSel::Conv3 => chain("sel", 1, &cfg.selection, &|i| if i == 2 { 1 } else { 3 }),
    }
    if cfg.noise.uses_noise_extractor() {
        chain("noise_ext", 1, &cfg.extractor, &|_| 3);
    }
    chain("dec", cfg.feature_channels(), &cfg.decoder, &|_| 3);
    out
}

impl ModelParams {
    /// He-normal kernels and zero biases. The last decoder layer starts
    /// small so initial predictions are near zero; a `Conv1x1` selection
    /// layer starts as the identity.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = layer_specs(cfg);
        let last_dec = format!("dec.{}", cfg.decoder.len() - 1);
        let mut tensors = BTreeMap::new();
        for (name, cout, cin, k) in specs {
            let fan_in = (cin * k * k) as f64;
            let w = if name == "sel.0" && cfg.camsel == CamSel::Conv1x1 {
                Tensor::ones(&[1, 1, 1, 1])
            } else if name == last_dec {
                Tensor::randn(&[cout, cin, k, k], 0.1 * (1.0 / fan_in).sqrt(), &mut rng)
            } else {
                Tensor::randn(&[cout, cin, k, k], (2.0 / fan_in).sqrt(), &mut rng)
            };
            tensors.insert(format!("{name}.w"), w);
            tensors.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        }
        Ok(ModelParams { tensors })
    }

    /// All-zero weights: the model predicts zero density everywhere.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let tensors = layer_specs(cfg)
            .into_iter()
            .flat_map(|(name, cout, cin, k)| {
                [
                    (format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k])),
                    (format!("{name}.b"), Tensor::zeros(&[cout])),
                ]
            })
            .collect();
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against `cfg` and that every value is finite.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::zeros(cfg)?;
        if want.tensors.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                want.tensors.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in &want.tensors {
            let have = self.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "{name}: expected {:?}, found {:?}",
                    t.shape(),
                    have.shape()
                )));
            }
            have.ensure_finite(name)?;
        }
        Ok(())
    }

    /// Inserts every tensor into `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    /// Inserts every tensor as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Gradients of every bound parameter after `tape.backward`; parameters
    /// the loss does not reach get zeros.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (k.clone(), g)
            })
            .collect()
    }
}
