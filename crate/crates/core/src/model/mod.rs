//! Encoder–relation–decoder segmentation network.
//!
//! The encoder turns a 4-channel input (RGB plus a mask channel; zero for
//! queries) into per-stage feature maps; support maps are fused by
//! element-wise averaging; the relation module compares fused-support and
//! query features through two pointwise convolutions; the decoder restores
//! resolution with nearest-neighbor upsample blocks, concatenating both
//! support and query encoder maps into each block, and ends in a sigmoid.

pub mod checkpoint;
mod net;
pub mod ops;

pub use net::{backward, forward, fuse_supports, ForwardTrace};

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, ArrayViewD, IxDyn, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LoadedPair;

/// Channels fed to the encoder: RGB plus the support-mask channel.
pub const IN_CHANNELS: usize = 4;

/// Logits are clamped to this magnitude before the sigmoid so the
/// probabilities stay strictly inside (0, 1) and the loss away from log(0).
pub const LOGIT_CLAMP: f64 = 15.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("support set is empty")]
    NoSupports,
    #[error("tensor {name} missing from checkpoint")]
    MissingTensor { name: String },
    #[error("checkpoint io at {path}: {source}")]
    CheckpointIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint malformed: {reason}")]
    CheckpointFormat { reason: String },
}

/// Encoder hyperparameters. Stage `i` halves the resolution and emits
/// `base_channels * channel_growth^i` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub n_stages: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    pub convs_per_stage: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width of the relation head; deepest encoder width when absent.
    #[serde(default)]
    pub relation_channels: Option<usize>,
    /// Per-block decoder widths; a halving schedule down to
    /// `base_channels` when absent.
    #[serde(default)]
    pub decoder_channels: Option<Vec<usize>>,
}

impl ModelConfig {
    /// Desk-scale default: 4 stages, 16 base channels, doubling growth.
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: 224,
                n_stages: 4,
                base_channels: 16,
                channel_growth: 2,
                convs_per_stage: 2,
            },
            relation_channels: None,
            decoder_channels: None,
        }
    }

    /// VGG-16-like depth: 5 stages down to 7x7, 512 channels deep.
    pub fn vgg16_scale() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: 224,
                n_stages: 5,
                base_channels: 32,
                channel_growth: 2,
                convs_per_stage: 2,
            },
            relation_channels: None,
            decoder_channels: None,
        }
    }

    /// Tiny config for invariant and gradient tests.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: 224,
                n_stages: 2,
                base_channels: 4,
                channel_growth: 2,
                convs_per_stage: 1,
            },
            relation_channels: None,
            decoder_channels: None,
        }
    }

    /// Reduced-size variant of any config (e.g. 16x16 crops in tests).
    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.encoder.input_size = input_size;
        self
    }

    pub fn resolve(&self) -> Result<ResolvedModel, ModelError> {
        let e = &self.encoder;
        for (value, what) in [
            (e.input_size, "input_size"),
            (e.n_stages, "n_stages"),
            (e.base_channels, "base_channels"),
            (e.channel_growth, "channel_growth"),
            (e.convs_per_stage, "convs_per_stage"),
        ] {
            if value < 1 {
                return Err(ModelError::InvalidConfig {
                    reason: format!("{what} must be >= 1"),
                });
            }
        }
        1usize
            .checked_shl(e.n_stages as u32)
            .filter(|d| e.input_size % d == 0 && e.input_size / d >= 1)
            .ok_or_else(|| ModelError::InvalidConfig {
                reason: format!(
                    "input size {} is not divisible by 2^{}",
                    e.input_size, e.n_stages
                ),
            })?;

        let stage_channels: Vec<usize> = (0..e.n_stages)
            .map(|i| e.base_channels * e.channel_growth.pow(i as u32))
            .collect();
        let deepest = *stage_channels.last().expect("n_stages >= 1");
        let relation_channels = self.relation_channels.unwrap_or(deepest);
        if relation_channels < 1 {
            return Err(ModelError::InvalidConfig {
                reason: "relation_channels must be >= 1".into(),
            });
        }

        let decoder_channels = match &self.decoder_channels {
            Some(custom) => {
                if custom.len() != e.n_stages || custom.iter().any(|&c| c < 1) {
                    return Err(ModelError::InvalidConfig {
                        reason: format!(
                            "decoder_channels needs {} positive entries",
                            e.n_stages
                        ),
                    });
                }
                custom.clone()
            }
            None => (1..=e.n_stages)
                .map(|b| (relation_channels >> b).max(e.base_channels))
                .collect(),
        };

        // stage i output side: input / 2^(i+1)
        let stage_sides: Vec<usize> = (0..e.n_stages)
            .map(|i| e.input_size >> (i + 1))
            .collect();

        Ok(ResolvedModel {
            input_size: e.input_size,
            n_stages: e.n_stages,
            convs_per_stage: e.convs_per_stage,
            stage_channels,
            stage_sides,
            relation_channels,
            decoder_channels,
        })
    }
}

/// Fully-resolved layer dimensions derived from a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedModel {
    pub input_size: usize,
    pub n_stages: usize,
    pub convs_per_stage: usize,
    pub stage_channels: Vec<usize>,
    pub stage_sides: Vec<usize>,
    pub relation_channels: usize,
    pub decoder_channels: Vec<usize>,
}

impl ResolvedModel {
    pub fn deepest_channels(&self) -> usize {
        *self.stage_channels.last().expect("stages")
    }

    pub fn deepest_side(&self) -> usize {
        *self.stage_sides.last().expect("stages")
    }

    /// Input channels of the conv in decoder block `b`: previous block
    /// output (or the relation map) plus both skip maps.
    pub fn decoder_in_channels(&self, b: usize) -> usize {
        let skip = self.stage_channels[self.n_stages - 1 - b];
        let prev = if b == 0 {
            self.relation_channels
        } else {
            self.decoder_channels[b - 1]
        };
        prev + 2 * skip
    }
}

/// One named flat collection of weight arrays (θ, φ or ω).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: NdFloat> {
    tensors: BTreeMap<String, ArrayD<F>>,
}

impl<F: NdFloat> Default for ParamSet<F> {
    fn default() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }
}

impl<F: NdFloat> ParamSet<F> {
    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<F>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<F>, ModelError> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<F>, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingTensor {
                name: name.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), ArrayD::zeros(t.raw_dim())))
                .collect(),
        }
    }

    pub fn cast<G: NdFloat>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), t.mapv(|v| G::from(v).unwrap())))
                .collect(),
        }
    }
}

/// Parameters of the three modules, stored as named weight arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: NdFloat> {
    pub encoder: ParamSet<F>,
    pub relation: ParamSet<F>,
    pub decoder: ParamSet<F>,
}

impl<F: NdFloat> ModelParams<F> {
    /// All tensors as `(qualified_name, view)` in deterministic order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        for (prefix, set) in [
            ("encoder", &self.encoder),
            ("relation", &self.relation),
            ("decoder", &self.decoder),
        ] {
            for (name, tensor) in set.iter() {
                out.push((format!("{prefix}.{name}"), tensor.view()));
            }
        }
        out
    }

    pub fn set(&mut self, qualified: &str, value: ArrayD<F>) -> Result<(), ModelError> {
        let (prefix, name) = qualified
            .split_once('.')
            .ok_or_else(|| ModelError::MissingTensor {
                name: qualified.to_string(),
            })?;
        let set = match prefix {
            "encoder" => &mut self.encoder,
            "relation" => &mut self.relation,
            "decoder" => &mut self.decoder,
            _ => {
                return Err(ModelError::MissingTensor {
                    name: qualified.to_string(),
                })
            }
        };
        let slot = set.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(ModelError::ShapeMismatch {
                what: "checkpoint tensor",
                expected: format!("{:?}", slot.shape()),
                got: format!("{:?}", value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn n_tensors(&self) -> usize {
        self.encoder.len() + self.relation.len() + self.decoder.len()
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            relation: self.relation.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn cast<G: NdFloat>(&self) -> ModelParams<G> {
        ModelParams {
            encoder: self.encoder.cast(),
            relation: self.relation.cast(),
            decoder: self.decoder.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn uniform_tensor<F: NdFloat>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> ArrayD<F> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = F::from(rng.random_range(-bound..bound)).unwrap();
    }
    out
}

/// Initialize fan-in-scaled uniform weights and zero biases,
/// deterministically per seed.
pub fn init_params<F: NdFloat>(
    config: &ModelConfig,
    seed: u64,
) -> Result<ModelParams<F>, ModelError> {
    let r = config.resolve()?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::mix(seed, 0x6d6f64)); // "mod"

    let mut encoder = ParamSet::default();
    let mut in_ch = IN_CHANNELS;
    for (stage, &out_ch) in r.stage_channels.iter().enumerate() {
        let mut c = in_ch;
        for conv in 0..r.convs_per_stage {
            encoder.insert(
                format!("stage{stage}.conv{conv}.weight"),
                uniform_tensor(&mut rng, &[out_ch, c, 3, 3], c * 9),
            );
            encoder.insert(
                format!("stage{stage}.conv{conv}.bias"),
                ArrayD::zeros(IxDyn(&[out_ch])),
            );
            c = out_ch;
        }
        in_ch = out_ch;
    }

    let mut relation = ParamSet::default();
    let deep = r.deepest_channels();
    let rc = r.relation_channels;
    relation.insert(
        "reduce.weight",
        uniform_tensor(&mut rng, &[rc, 2 * deep], 2 * deep),
    );
    relation.insert("reduce.bias", ArrayD::zeros(IxDyn(&[rc])));
    relation.insert("embed.weight", uniform_tensor(&mut rng, &[rc, rc], rc));
    relation.insert("embed.bias", ArrayD::zeros(IxDyn(&[rc])));

    let mut decoder = ParamSet::default();
    for b in 0..r.n_stages {
        let c_in = r.decoder_in_channels(b);
        let c_out = r.decoder_channels[b];
        decoder.insert(
            format!("block{b}.weight"),
            uniform_tensor(&mut rng, &[c_out, c_in, 3, 3], c_in * 9),
        );
        decoder.insert(format!("block{b}.bias"), ArrayD::zeros(IxDyn(&[c_out])));
    }
    let head_in = *r.decoder_channels.last().expect("blocks");
    decoder.insert(
        "head.weight",
        uniform_tensor(&mut rng, &[1, head_in], head_in),
    );
    decoder.insert("head.bias", ArrayD::zeros(IxDyn(&[1])));

    Ok(ModelParams {
        encoder,
        relation,
        decoder,
    })
}

/// Per-pixel foreground probability map over one query image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Values strictly inside (0, 1), same spatial size as the query.
    pub probs: Array2<f32>,
}

/// Build the 4-channel support tensor: RGB plus the binary mask.
pub fn support_tensor<F: NdFloat>(pair: &LoadedPair) -> Array3<F> {
    let (_, h, w) = pair.image.dim();
    let mut out = Array3::zeros((IN_CHANNELS, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(c, y, x)] = F::from(pair.image[(c, y, x)]).unwrap();
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            out[(3, y, x)] = F::from(pair.mask[(y, x)]).unwrap();
        }
    }
    out
}

/// Build the 4-channel query tensor: RGB plus an all-zero mask channel.
pub fn query_tensor<F: NdFloat>(image: &Array3<f32>) -> Array3<F> {
    let (_, h, w) = image.dim();
    let mut out = Array3::zeros((IN_CHANNELS, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(c, y, x)] = F::from(image[(c, y, x)]).unwrap();
            }
        }
    }
    out
}

/// Run the network over one query with the given supports.
pub fn predict(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    supports: &[&LoadedPair],
    query_image: &Array3<f32>,
) -> Result<Prediction, ModelError> {
    let support_tensors: Vec<Array3<f32>> =
        supports.iter().map(|p| support_tensor(p)).collect();
    let query = query_tensor(query_image);
    let trace = forward(params, config, &support_tensors, &query)?;
    Ok(Prediction {
        probs: trace.probs,
    })
}

/// C-way segmentation as a union of binary tasks: per pixel, the argmax
/// class if its probability clears 0.5, else background (0). Ties go to
/// the lowest class index.
pub fn multiway_segment(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    per_class_supports: &[Vec<&LoadedPair>],
    query_image: &Array3<f32>,
) -> Result<Array2<u8>, ModelError> {
    let predictions: Vec<Prediction> = per_class_supports
        .iter()
        .map(|supports| predict(params, config, supports, query_image))
        .collect::<Result<_, _>>()?;
    let (_, h, w) = query_image.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best_class = 0u8;
            let mut best_prob = 0.5f32;
            for (idx, pred) in predictions.iter().enumerate() {
                let p = pred.probs[(y, x)];
                if p > best_prob && p >= 0.5 {
                    best_prob = p;
                    best_class = idx as u8 + 1;
                }
            }
            out[(y, x)] = best_class;
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests;
