//! The dual-encoder segmentation network.
//!
//! Encoder 1 sees the RGB image through `SIB(BB(x))` stages, encoder 2 the
//! single-channel invariant image through `SGB(BB(x))` stages, each over three
//! levels with 2x2 max pooling after every level. The pooled level-3 maps are
//! fused at the bottleneck, refined by a connect block, and decoded back
//! through three levels that consume both encoders' skip maps.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod frf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{Conv2d, DropBlock, Float, ParamStore, Session, Tensor, Var};

pub use attention::{ChannelAttention, FeatureFilteringFusion, SpatialAttention};
pub use blocks::{Block, BlockKind, EncoderStage};
pub use frf::FeatureReconstructingFusion;

/// How the two level-3 encoder maps are merged at the bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckFusion {
    Concat,
    FeatureFiltering,
}

/// How encoder maps reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFusion {
    Concat,
    FeatureReconstructing,
}

/// Block used at each decoder level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderBlock {
    DoubleBase,
    ResInception,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_channels: [usize; 3],
    pub bottleneck_channels: usize,
    pub decoder_channels: [usize; 3],
    pub dropblock_size: usize,
    pub dropblock_rate: f64,
    pub attention_reduction: usize,
    pub spatial_kernel: usize,
    pub raw_in_channels: usize,
    pub invariant_in_channels: usize,
    pub out_channels: usize,
    pub bottleneck_fusion: BottleneckFusion,
    pub skip_fusion: SkipFusion,
    pub decoder_block: DecoderBlock,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_channels: [16, 32, 64],
            bottleneck_channels: 128,
            decoder_channels: [64, 32, 16],
            dropblock_size: 7,
            dropblock_rate: 0.1,
            attention_reduction: 8,
            spatial_kernel: 7,
            raw_in_channels: 3,
            invariant_in_channels: 1,
            out_channels: 1,
            bottleneck_fusion: BottleneckFusion::FeatureFiltering,
            skip_fusion: SkipFusion::FeatureReconstructing,
            decoder_block: DecoderBlock::ResInception,
        }
    }
}

impl ModelConfig {
    /// Plain dual-encoder U-Net: concat bottleneck and skips, double-base decoder.
    pub fn baseline() -> Self {
        ModelConfig {
            bottleneck_fusion: BottleneckFusion::Concat,
            skip_fusion: SkipFusion::Concat,
            decoder_block: DecoderBlock::DoubleBase,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.encoder_channels.iter().chain(&self.decoder_channels).chain([
            &self.bottleneck_channels,
            &self.raw_in_channels,
            &self.invariant_in_channels,
            &self.out_channels,
            &self.attention_reduction,
        ]);
        for &c in all {
            if c == 0 {
                return Err(Error::Config("channel counts and ratios must be positive".into()));
            }
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "spatial attention kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        if self.dropblock_size == 0 || !(0.0..1.0).contains(&self.dropblock_rate) {
            return Err(Error::Config("dropblock size must be >= 1 and rate in [0, 1)".into()));
        }
        Ok(())
    }

    fn dropblock(&self) -> DropBlock {
        DropBlock::new(self.dropblock_size, self.dropblock_rate)
    }
}

enum Bottleneck {
    Concat,
    Fff(FeatureFilteringFusion),
}

enum Skip {
    Concat,
    Frf(FeatureReconstructingFusion),
}

struct DecoderStage {
    skip: Skip,
    block: Block,
}

/// Layer structure without the parameter values.
pub struct Architecture {
    specific: [EncoderStage; 3],
    invariant: [EncoderStage; 3],
    bottleneck: Bottleneck,
    connect: Block,
    /// Coarsest level first.
    decoder: [DecoderStage; 3],
    head: Conv2d,
}

/// Requires `H, W` to be multiples of 8 (three 2x downsamplings).
pub fn check_spatial_dims(height: usize, width: usize) -> Result<()> {
    ensure!(
        height > 0 && width > 0 && height % 8 == 0 && width % 8 == 0,
        "image dims {height}x{width} must be positive multiples of 8 (three 2x downsampling levels)"
    );
    Ok(())
}

impl Architecture {
    fn build<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let drop = cfg.dropblock();
        let enc = cfg.encoder_channels;
        let build_encoder =
            |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, kind, cin| -> Result<[EncoderStage; 3]> {
                Ok([
                    EncoderStage::new(store, rng, &format!("{name}.0"), kind, cin, enc[0], drop)?,
                    EncoderStage::new(store, rng, &format!("{name}.1"), kind, enc[0], enc[1], drop)?,
                    EncoderStage::new(store, rng, &format!("{name}.2"), kind, enc[1], enc[2], drop)?,
                ])
            };
        let specific = build_encoder(
            store,
            rng,
            "enc1",
            BlockKind::SequentialIncremental,
            cfg.raw_in_channels,
        )?;
        let invariant = build_encoder(
            store,
            rng,
            "enc2",
            BlockKind::StackedGeneralization,
            cfg.invariant_in_channels,
        )?;

        let (bottleneck, connect_in) = match cfg.bottleneck_fusion {
            BottleneckFusion::Concat => (Bottleneck::Concat, 2 * enc[2]),
            BottleneckFusion::FeatureFiltering => (
                Bottleneck::Fff(FeatureFilteringFusion::new(
                    store,
                    rng,
                    "fff",
                    enc[2],
                    cfg.bottleneck_channels,
                    cfg.attention_reduction,
                    cfg.spatial_kernel,
                )?),
                cfg.bottleneck_channels,
            ),
        };
        let connect = Block::new(
            store,
            rng,
            "connect",
            BlockKind::Connect,
            connect_in,
            cfg.bottleneck_channels,
            drop,
        )?;

        let block_kind = match cfg.decoder_block {
            DecoderBlock::DoubleBase => BlockKind::Connect,
            DecoderBlock::ResInception => BlockKind::ResInception,
        };
        let mut high = cfg.bottleneck_channels;
        let mut stages = Vec::with_capacity(3);
        for (i, (&dec, &skip_ch)) in cfg.decoder_channels.iter().zip(enc.iter().rev()).enumerate() {
            let name = format!("dec.{i}");
            let (skip, block_in) = match cfg.skip_fusion {
                SkipFusion::Concat => (Skip::Concat, high + 2 * skip_ch),
                SkipFusion::FeatureReconstructing => (
                    Skip::Frf(FeatureReconstructingFusion::new(
                        store,
                        rng,
                        &format!("{name}.frf"),
                        skip_ch,
                        high,
                        dec,
                    )?),
                    dec,
                ),
            };
            let block = Block::new(store, rng, &format!("{name}.block"), block_kind, block_in, dec, drop)?;
            stages.push(DecoderStage { skip, block });
            high = dec;
        }
        let decoder: [DecoderStage; 3] = stages.try_into().map_err(|_| Error::Config("decoder depth".into()))?;
        let head = Conv2d::new(
            store,
            rng,
            "head",
            cfg.decoder_channels[2],
            cfg.out_channels,
            1,
            1,
            true,
        )?;
        Ok(Architecture {
            specific,
            invariant,
            bottleneck,
            connect,
            decoder,
            head,
        })
    }

    /// Full forward pass on tape variables; returns sigmoid probabilities.
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, raw: Var, invariant: Var) -> Result<Var> {
        let (rs, is) = (s.graph.shape(raw), s.graph.shape(invariant));
        check_spatial_dims(rs.height, rs.width)?;
        ensure!(
            rs.batch == is.batch && rs.height == is.height && rs.width == is.width,
            "raw input {rs} and invariant input {is} must share batch and spatial dims"
        );
        let mut x = raw;
        let mut y = invariant;
        let mut skips = Vec::with_capacity(3);
        for (e1, e2) in self.specific.iter().zip(&self.invariant) {
            let lx = e1.forward(s, x)?;
            let ly = e2.forward(s, y)?;
            skips.push((lx, ly));
            x = s.graph.max_pool2(lx)?;
            y = s.graph.max_pool2(ly)?;
        }
        let fused = match &self.bottleneck {
            Bottleneck::Concat => s.graph.concat(&[x, y])?,
            Bottleneck::Fff(fff) => fff.forward(s, x, y)?,
        };
        let mut h = self.connect.forward(s, fused)?;
        for (stage, &(lx, ly)) in self.decoder.iter().zip(skips.iter().rev()) {
            let merged = match &stage.skip {
                Skip::Concat => {
                    let up = s.graph.upsample2(h)?;
                    s.graph.concat(&[up, lx, ly])?
                }
                Skip::Frf(frf) => frf.forward(s, lx, ly, h)?,
            };
            h = stage.block.forward(s, merged)?;
        }
        let logits = self.head.forward(s, h)?;
        Ok(s.graph.sigmoid(logits))
    }
}

/// The network: layer structure, parameter values, and the DropBlock stream.
///
/// Not safe for concurrent mutation: batch-norm running moments and the
/// DropBlock generator change on every training-mode forward.
pub struct DeffaNet<T: Float> {
    cfg: ModelConfig,
    arch: Architecture,
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Float> DeffaNet<T> {
    /// Build with seeded parameter initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::build(&cfg, &mut store, &mut init)?;
        Ok(DeffaNet {
            cfg,
            arch,
            store,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xD50B_1C4A_u64),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Reset the DropBlock random stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Learnable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Size of the learnable parameters serialized as 32-bit floats.
    pub fn parameter_payload_bytes(&self) -> usize {
        self.parameter_count() * std::mem::size_of::<f32>()
    }

    /// Structure plus a fresh session over this model's parameters.
    pub fn session(&mut self, training: bool) -> (&Architecture, Session<'_, T>) {
        (&self.arch, Session::new(&mut self.store, &mut self.rng, training))
    }

    /// Convenience forward on concrete tensors.
    pub fn forward(&mut self, raw: &Tensor<T>, invariant: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let (arch, mut s) = self.session(training);
        let r = s.graph.constant(raw.clone());
        let i = s.graph.constant(invariant.clone());
        let out = arch.forward(&mut s, r, i)?;
        Ok(s.graph.value(out).clone())
    }

    /// Precision conversion keeping structure and values.
    pub fn cast<U: Float>(&self) -> Result<DeffaNet<U>> {
        let mut other = DeffaNet::<U>::new(self.cfg.clone(), 0)?;
        other.store = self.store.cast();
        other.rng = self.rng.clone();
        Ok(other)
    }
}
