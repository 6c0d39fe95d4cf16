use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Late,
    Early,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locality {
    GlobalPool,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    FeatureFusion,
    ParamRegression,
    Prototype,
    /// Foreground-background baseline: decoder over query features, no guidance.
    Unguided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub fusion: Fusion,
    pub locality: Locality,
    pub head: Head,
    #[serde(default = "default_image_channels")]
    pub image_channels: usize,
    pub encoder: Vec<LayerSpec>,
    pub feature_stride: usize,
    #[serde(default = "default_decoder_width")]
    pub decoder_width: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_image_channels() -> usize {
    3
}

fn default_decoder_width() -> usize {
    32
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        let layer = |channels, stride| LayerSpec { channels, kernel: 3, stride };
        Self {
            fusion: Fusion::Late,
            locality: Locality::GlobalPool,
            head: Head::FeatureFusion,
            image_channels: 3,
            encoder: vec![layer(16, 2), layer(32, 2), layer(32, 1)],
            feature_stride: 4,
            decoder_width: 32,
            temperature: 1.0,
        }
    }
}

impl GuidanceConfig {
    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn with_locality(mut self, locality: Locality) -> Self {
        self.locality = locality;
        self
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self
    }

    /// Feature width `C` of the encoder output.
    pub fn channels(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder.is_empty() {
            return bad("encoder needs at least one layer".into());
        }
        if self.image_channels == 0 || self.decoder_width == 0 {
            return bad("image_channels and decoder_width must be positive".into());
        }
        for (i, l) in self.encoder.iter().enumerate() {
            if l.channels == 0 || l.stride == 0 || l.kernel % 2 == 0 {
                return bad(format!("encoder layer {i}: channels and stride must be positive, kernel odd"));
            }
        }
        let product: usize = self.encoder.iter().map(|l| l.stride).product();
        if product != self.feature_stride {
            return bad(format!("feature_stride {} != product of encoder strides {product}", self.feature_stride));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive".into());
        }
        if self.fusion == Fusion::Early && !matches!(self.head, Head::FeatureFusion) {
            return bad(format!("early fusion supports only the feature_fusion head, not {:?}", self.head));
        }
        if self.locality == Locality::Identity && matches!(self.head, Head::ParamRegression | Head::Prototype) {
            return bad(format!("{:?} head needs global_pool locality", self.head));
        }
        if self.locality == Locality::Identity && self.fusion == Fusion::Early {
            return bad("early fusion pools globally; identity locality is late-fusion only".into());
        }
        Ok(())
    }

    /// Whether the head reads guidance at all.
    pub fn is_guided(&self) -> bool {
        self.head != Head::Unguided
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = GuidanceConfig::default();
        c.validate().unwrap();
        assert_eq!(c.channels(), 32);
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json["locality"], "global_pool");
        assert_eq!(serde_json::from_value::<GuidanceConfig>(json).unwrap(), c);
    }

    #[test]
    fn stride_must_match_encoder() {
        let mut c = GuidanceConfig::default();
        c.feature_stride = 8;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn incompatible_axes_rejected() {
        let c = GuidanceConfig::default().with_head(Head::Prototype).with_locality(Locality::Identity);
        assert!(c.validate().is_err());
        let c = GuidanceConfig::default().with_head(Head::ParamRegression).with_fusion(Fusion::Early);
        assert!(c.validate().is_err());
    }
}
