//! Channel/spatial attention and the bottleneck feature-filtering fusion.

use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::nn::{BatchNorm2d, Conv2d, Float, ParamStore, Session, Var};

/// Channel attention: a shared two-layer MLP over global average- and
/// max-pooled descriptors, summed and squashed into per-channel weights.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        ensure!(reduction > 0, "{name}: reduction ratio must be positive");
        let hidden = (channels / reduction).max(1);
        Ok(ChannelAttention {
            fc1: Conv2d::new(store, rng, &format!("{name}.fc1"), channels, hidden, 1, 1, true)?,
            fc2: Conv2d::new(store, rng, &format!("{name}.fc2"), hidden, channels, 1, 1, true)?,
        })
    }

    fn mlp<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.relu(h);
        self.fc2.forward(s, h)
    }

    /// Per-channel attention weights, shape `(B, C, 1, 1)`.
    pub fn weights<T: Float>(&self, s: &mut Session<'_, T>, f: Var) -> Result<Var> {
        let avg = s.graph.global_avg_pool(f);
        let max = s.graph.global_max_pool(f);
        let a = self.mlp(s, avg)?;
        let m = self.mlp(s, max)?;
        let sum = s.graph.add(a, m)?;
        Ok(s.graph.sigmoid(sum))
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, f: Var) -> Result<Var> {
        let w = self.weights(s, f)?;
        s.graph.mul(f, w)
    }
}

/// Spatial attention: channel-wise mean and max maps, concatenated, passed
/// through a `k x k` convolution and a sigmoid.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, kernel: usize) -> Result<Self> {
        ensure!(
            kernel % 2 == 1,
            "{name}: spatial attention kernel must be odd, got {kernel}"
        );
        Ok(SpatialAttention {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), 2, 1, kernel, 1, false)?,
        })
    }

    /// Spatial attention map, shape `(B, 1, H, W)`.
    pub fn weights<T: Float>(&self, s: &mut Session<'_, T>, f: Var) -> Result<Var> {
        let avg = s.graph.channel_mean(f);
        let max = s.graph.channel_max(f);
        let cat = s.graph.concat(&[avg, max])?;
        let y = self.conv.forward(s, cat)?;
        Ok(s.graph.sigmoid(y))
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, f: Var) -> Result<Var> {
        let w = self.weights(s, f)?;
        s.graph.mul(f, w)
    }
}

/// Bottleneck fusion: channel attention on the domain-specific map, spatial
/// attention on the domain-invariant map, then `Conv3x3 -> BN -> ReLU` over
/// their concatenation.
#[derive(Clone, Debug)]
pub struct FeatureFilteringFusion {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl FeatureFilteringFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        reduction: usize,
        spatial_kernel: usize,
    ) -> Result<Self> {
        Ok(FeatureFilteringFusion {
            channel: ChannelAttention::new(store, rng, &format!("{name}.ca"), in_channels, reduction)?,
            spatial: SpatialAttention::new(store, rng, &format!("{name}.sa"), spatial_kernel)?,
            conv: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv"),
                2 * in_channels,
                out_channels,
                3,
                1,
                true,
            )?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels),
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, fx: Var, fy: Var) -> Result<Var> {
        let (sx, sy) = (s.graph.shape(fx), s.graph.shape(fy));
        ensure!(
            sx == sy,
            "feature filtering fusion needs equal shapes, got {sx} and {sy}"
        );
        let mc = self.channel.forward(s, fx)?;
        let ms = self.spatial.forward(s, fy)?;
        let cat = s.graph.concat(&[mc, ms])?;
        let y = self.conv.forward(s, cat)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}
