use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Fusion, GuidanceConfig, Head};
use crate::autodiff::{Gradients, Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

/// η: `[z_pos; z_neg; ln(1+pos_count); ln(1+neg_count)]` → hidden (2C, relu)
/// → `2C+2` outputs, read as a `[2,C,1,1]` kernel followed by a `[2]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor<T> {
    pub hidden_weight: Tensor<T>,
    pub hidden_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: GuidanceConfig,
    pub encoder: Vec<ConvLayer<T>>,
    pub early_encoder: Option<Vec<ConvLayer<T>>>,
    pub decoder: Vec<ConvLayer<T>>,
    pub regressor: Option<Regressor<T>>,
}

/// `(channels_in, channels_out, kernel, stride)` per conv layer.
type ConvPlan = Vec<(usize, usize, usize, usize)>;

struct Plan {
    encoder: ConvPlan,
    early_encoder: Option<ConvPlan>,
    decoder: ConvPlan,
    regressor: Option<usize>,
}

fn plan(config: &GuidanceConfig) -> Result<Plan> {
    config.validate()?;
    let stack = |input: usize| {
        let mut cin = input;
        config
            .encoder
            .iter()
            .map(|l| {
                let entry = (cin, l.channels, l.kernel, l.stride);
                cin = l.channels;
                entry
            })
            .collect::<ConvPlan>()
    };
    let c = config.channels();
    let wd = config.decoder_width;
    let decoder_in = match (config.head, config.fusion) {
        (Head::FeatureFusion, Fusion::Late) => Some(3 * c),
        (Head::FeatureFusion, Fusion::Early) => Some(2 * c),
        (Head::Unguided, _) => Some(c),
        (Head::ParamRegression | Head::Prototype, _) => None,
    };
    Ok(Plan {
        encoder: stack(config.image_channels),
        early_encoder: (config.fusion == Fusion::Early).then(|| stack(config.image_channels + 2)),
        decoder: decoder_in.map_or_else(Vec::new, |cin| vec![(cin, wd, 3, 1), (wd, wd, 3, 1), (wd, 2, 1, 1)]),
        regressor: (config.head == Head::ParamRegression).then_some(c),
    })
}

fn glorot<T: Scalar>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-a..a)))
}

fn init_convs<T: Scalar>(plan: &ConvPlan, rng: &mut ChaCha8Rng) -> Vec<ConvLayer<T>> {
    plan.iter()
        .map(|&(cin, cout, k, stride)| ConvLayer {
            weight: glorot(vec![cout, cin, k, k], cin * k * k, cout * k * k, rng),
            bias: Tensor::zeros([cout]),
            stride,
            pad: k / 2,
        })
        .collect()
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights and zero biases from a seeded ChaCha8 stream,
    /// drawn in [`ModelParams::tensors`] order.
    pub fn init(config: GuidanceConfig, seed: u64) -> Result<Self> {
        let plan = plan(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = init_convs(&plan.encoder, &mut rng);
        let early_encoder = plan.early_encoder.as_ref().map(|p| init_convs(p, &mut rng));
        let decoder = init_convs(&plan.decoder, &mut rng);
        let regressor = plan.regressor.map(|c| {
            let (n_in, hidden, n_out) = (2 * c + 2, 2 * c, 2 * c + 2);
            Regressor {
                hidden_weight: glorot(vec![hidden, n_in], n_in, hidden, &mut rng),
                hidden_bias: Tensor::zeros([hidden]),
                out_weight: glorot(vec![n_out, hidden], hidden, n_out, &mut rng),
                out_bias: Tensor::zeros([n_out]),
            }
        });
        Ok(Self { config, encoder, early_encoder, decoder, regressor })
    }

    /// Every parameter tensor with its stable name, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        let groups = [("encoder", Some(&self.encoder)), ("early_encoder", self.early_encoder.as_ref()), ("decoder", Some(&self.decoder))];
        for (group, layers) in groups {
            for (i, l) in layers.into_iter().flatten().enumerate() {
                out.push((format!("{group}.{i}.weight"), &l.weight));
                out.push((format!("{group}.{i}.bias"), &l.bias));
            }
        }
        if let Some(r) = &self.regressor {
            out.push(("regressor.hidden.weight".into(), &r.hidden_weight));
            out.push(("regressor.hidden.bias".into(), &r.hidden_bias));
            out.push(("regressor.out.weight".into(), &r.out_weight));
            out.push(("regressor.out.bias".into(), &r.out_bias));
        }
        out
    }

    /// Mutable view of every tensor, in [`ModelParams::tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(e) = &mut self.early_encoder {
            for l in e {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        for l in &mut self.decoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(r) = &mut self.regressor {
            out.extend([&mut r.hidden_weight, &mut r.hidden_bias, &mut r.out_weight, &mut r.out_bias]);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// `name=norm` pairs for diagnostics.
    pub fn norms(&self) -> String {
        self.tensors()
            .iter()
            .map(|(n, t)| format!("{n}={:.4e}", t.l2_norm().as_f64()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let convs = |ls: &[ConvLayer<T>]| {
            ls.iter()
                .map(|l| ConvLayer { weight: l.weight.cast(), bias: l.bias.cast(), stride: l.stride, pad: l.pad })
                .collect::<Vec<_>>()
        };
        ModelParams {
            config: self.config.clone(),
            encoder: convs(&self.encoder),
            early_encoder: self.early_encoder.as_deref().map(convs),
            decoder: convs(&self.decoder),
            regressor: self.regressor.as_ref().map(|r| Regressor {
                hidden_weight: r.hidden_weight.cast(),
                hidden_bias: r.hidden_bias.cast(),
                out_weight: r.out_weight.cast(),
                out_bias: r.out_bias.cast(),
            }),
        }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout `config` demands.
    pub fn from_tensors(config: GuidanceConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "config demands {} tensors, checkpoint has {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, t)) in params.tensors_mut().into_iter().zip(expected).zip(tensors) {
            if name != got_name || shape != t.shape() {
                return Err(Error::Config(format!(
                    "expected tensor {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&serde_json::to_value(&self.config)?, &self.tensors())
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (config, tensors) = checkpoint::decode(bytes, origin)?;
        let config: GuidanceConfig =
            serde_json::from_value(config).map_err(|e| Error::format(origin, format!("config: {e}")))?;
        Self::from_tensors(config, tensors).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }

    /// Puts every tensor on `tape`, as trainable leaves or as constants.
    pub fn attach<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> ParamVars {
        let leaves: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, t)| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        self.bind(&leaves).expect("one leaf per tensor")
    }

    /// Arranges existing tape variables, one per tensor in
    /// [`ModelParams::tensors`] order, into this model's layout.
    pub fn bind(&self, leaves: &[Var]) -> Result<ParamVars> {
        let expected = self.tensors().len();
        if leaves.len() != expected {
            return Err(Error::contract(format!("{} leaves for {expected} parameter tensors", leaves.len())));
        }
        let mut next = leaves.iter().copied();
        let mut convs = |ls: &[ConvLayer<T>]| {
            ls.iter()
                .map(|l| ConvVars {
                    weight: next.next().expect("counted"),
                    bias: next.next().expect("counted"),
                    stride: l.stride,
                    pad: l.pad,
                })
                .collect::<Vec<_>>()
        };
        let encoder = convs(&self.encoder);
        let early_encoder = self.early_encoder.as_deref().map(&mut convs);
        let decoder = convs(&self.decoder);
        let regressor = self.regressor.as_ref().map(|_| RegressorVars {
            hidden_weight: next.next().expect("counted"),
            hidden_bias: next.next().expect("counted"),
            out_weight: next.next().expect("counted"),
            out_bias: next.next().expect("counted"),
        });
        Ok(ParamVars { encoder, early_encoder, decoder, regressor, order: leaves.to_vec() })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RegressorVars {
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

/// Tape handles for a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub encoder: Vec<ConvVars>,
    pub early_encoder: Option<Vec<ConvVars>>,
    pub decoder: Vec<ConvVars>,
    pub regressor: Option<RegressorVars>,
    order: Vec<Var>,
}

impl ParamVars {
    /// Leaves in [`ModelParams::tensors`] order.
    pub fn leaves(&self) -> &[Var] {
        &self.order
    }

    /// Gradients in [`ModelParams::tensors`] order.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.order
            .iter()
            .map(|&v| grads.take(v).ok_or_else(|| Error::contract("parameters were attached as constants")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Locality;

    #[test]
    fn layout_follows_config() {
        let p = ModelParams::<f32>::init(GuidanceConfig::default(), 1).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 12);
        assert_eq!(names[0], "encoder.0.weight");
        assert_eq!(p.decoder[0].weight.shape(), &[32, 96, 3, 3]);
        assert_eq!(p.decoder[2].weight.shape(), &[2, 32, 1, 1]);
        assert!(p.early_encoder.is_none() && p.regressor.is_none());

        let early = ModelParams::<f32>::init(GuidanceConfig::default().with_fusion(Fusion::Early), 1).unwrap();
        assert_eq!(early.early_encoder.as_ref().unwrap()[0].weight.shape(), &[16, 5, 3, 3]);
        assert_eq!(early.decoder[0].weight.shape(), &[32, 64, 3, 3]);

        let reg = ModelParams::<f32>::init(GuidanceConfig::default().with_head(Head::ParamRegression), 1).unwrap();
        assert!(reg.decoder.is_empty());
        assert_eq!(reg.regressor.as_ref().unwrap().out_weight.shape(), &[66, 64]);

        let proto = ModelParams::<f32>::init(GuidanceConfig::default().with_head(Head::Prototype), 1).unwrap();
        assert_eq!(proto.tensors().len(), 6);
        let _ = Locality::GlobalPool;
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::<f32>::init(GuidanceConfig::default(), 7).unwrap();
        assert_eq!(a, ModelParams::init(GuidanceConfig::default(), 7).unwrap());
        assert_ne!(a, ModelParams::init(GuidanceConfig::default(), 8).unwrap());
        let bound = (6.0f32 / (3.0 * 9.0 + 16.0 * 9.0)).sqrt();
        assert!(a.encoder[0].weight.data().iter().all(|v| v.abs() <= bound));
        assert!(a.encoder[0].bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = GuidanceConfig::default().with_head(Head::ParamRegression);
        let p = ModelParams::<f32>::init(cfg, 3).unwrap();
        let back = ModelParams::<f32>::from_bytes(&p.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_mismatched_layout() {
        let p = ModelParams::<f32>::init(GuidanceConfig::default(), 3).unwrap();
        let tensors: Vec<(String, Tensor<f32>)> = p.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let cfg = GuidanceConfig::default().with_head(Head::Prototype);
        assert!(ModelParams::from_tensors(cfg, tensors).is_err());
    }
}
