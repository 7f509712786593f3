use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-view features are weighted before view pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CamSel {
    /// Plain max pooling of projected features.
    None,
    /// Distance maps used directly as selection scores.
    NoConv,
    /// One learned 1x1 conv on the distance map.
    Conv1x1,
    /// Small 3-layer CNN on the distance map.
    Conv3,
}

/// Where the training-only noise view enters the network.
///
/// With `x` a real view, `eps ~ N(0, 1)`, `F` the shared extractor, `H` a
/// separate noise extractor and `P` the plane projection:
///
/// | type | fusion |
/// |------|--------|
/// | A | `max(x, eps)` on one raw input image |
/// | B | `max(P(F(x)), eps)` |
/// | C | `max(P(F(x)), P(eps))` |
/// | D | `max(P(F(x)), P(F(eps)))` |
/// | E | `sum(P(F(x)), P(F(eps)))` |
/// | F | `max(P(F(x)), P(H(eps)))` |
/// | G | `sum(P(F(x)), P(H(eps)))` |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseType {
    Off,
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl NoiseType {
    pub const ALL: [NoiseType; 8] = [
        NoiseType::Off,
        NoiseType::A,
        NoiseType::B,
        NoiseType::C,
        NoiseType::D,
        NoiseType::E,
        NoiseType::F,
        NoiseType::G,
    ];

    /// Types whose noise goes through the separate extractor `H`.
    pub fn uses_noise_extractor(self) -> bool {
        matches!(self, NoiseType::F | NoiseType::G)
    }

    /// Types that add the noise map to the pooled features instead of
    /// entering the max.
    pub fn is_sum(self) -> bool {
        matches!(self, NoiseType::E | NoiseType::G)
    }
}

impl std::fmt::Display for NoiseType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::fmt::Display for CamSel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Architecture of the counting network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of the 3x3 extractor convs; a 2x max pool follows
    /// the middle and the last conv, so features are at 1/4 resolution.
    pub extractor: Vec<usize>,
    pub camsel: CamSel,
    pub noise: NoiseType,
    /// Output channels of the 3x3 decoder convs; the last must be 1.
    pub decoder: Vec<usize>,
    /// Output channels of the `Conv3` selection CNN (3x3, 3x3, 1x1); the
    /// last must be 1.
    pub selection: Vec<usize>,
    /// The decoder predicts `output_scale` times the density, which keeps
    /// its targets and gradients at a workable magnitude.
    pub output_scale: f64,
    /// `(mean, std)` standardizing image pixels before extraction; noise
    /// views are drawn in the standardized space.
    pub input_norm: (f64, f64),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor: vec![16, 16, 32, 32],
            camsel: CamSel::None,
            noise: NoiseType::Off,
            decoder: vec![64, 32, 1],
            selection: vec![8, 8, 1],
            output_scale: 10.0,
            input_norm: (0.5, 0.25),
        }
    }
}

/// Spatial downsampling of the extractor.
pub const FEATURE_STRIDE: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extractor.len() < 2 || self.extractor.contains(&0) {
            return Err(Error::invalid(
                "extractor needs at least two non-empty convs",
            ));
        }
        if self.decoder.last() != Some(&1) || self.decoder.contains(&0) {
            return Err(Error::invalid("decoder must end in exactly 1 channel"));
        }
        if self.selection.len() != 3
            || self.selection.last() != Some(&1)
            || self.selection.contains(&0)
        {
            return Err(Error::invalid(
                "selection CNN must have three convs ending in 1 channel",
            ));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::invalid("output_scale must be positive"));
        }
        if !(self.input_norm.0.is_finite()
            && self.input_norm.1 > 0.0
            && self.input_norm.1.is_finite())
        {
            return Err(Error::invalid(
                "input_norm needs a finite mean and positive std",
            ));
        }
        Ok(())
    }

    /// Channels of the projected feature maps entering view pooling.
    pub fn feature_channels(&self) -> usize {
        *self.extractor.last().unwrap()
    }

    /// Indices of extractor convs followed by a 2x max pool.
    pub(crate) fn pool_after(&self) -> [usize; 2] {
        let n = self.extractor.len();
        [n / 2 - 1, n - 1]
    }

    /// Feature-map size for an `h x w` input image.
    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h / 2 / 2, w / 2 / 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.feature_channels(), 32);
        assert_eq!(c.pool_after(), [1, 3]);
        assert_eq!(c.feature_size(96, 128), (24, 32));
    }

    #[test]
    fn decoder_must_end_in_one_channel() {
        let c = ModelConfig {
            decoder: vec![8, 2],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            selection: vec![8, 3],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_uses_variant_names() {
        let c = ModelConfig {
            camsel: CamSel::Conv1x1,
            noise: NoiseType::D,
            ..ModelConfig::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"Conv1x1\"") && s.contains("\"D\""));
        let partial: ModelConfig = serde_json::from_str(r#"{"camsel":"NoConv"}"#).unwrap();
        assert_eq!(partial.camsel, CamSel::NoConv);
        assert_eq!(partial.extractor, vec![16, 16, 32, 32]);
    }
}
