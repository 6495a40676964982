//! Feature reconstructing fusion: the attention-gated replacement for a
//! U-Net skip connection.
//!
//! The two encoders' maps at one level (`lx`, `ly`) are fused through a
//! dilated and a local branch into `L`. The decoder map from the next coarser
//! level (`hx`) is upsampled 2x and projected to `L`'s width, then both
//! produce a sigmoid gate `A`. The result is `Conv1x1(concat(H, A * L))`.

use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::nn::{BatchNorm2d, Conv2d, Float, ParamStore, Session, Var};

#[derive(Clone, Debug)]
pub struct FeatureReconstructingFusion {
    pub wide_proj: Conv2d,
    pub wide_conv: Conv2d,
    pub local_proj: Conv2d,
    pub local_conv: Conv2d,
    pub merge: Conv2d,
    pub merge_bn: BatchNorm2d,
    pub high_proj: Conv2d,
    pub gate_high: Conv2d,
    pub gate_out: Conv2d,
    pub output: Conv2d,
    out_channels: usize,
}

/// Intermediate tensors exposed for inspection and testing.
pub struct FrfTrace {
    pub low: Var,
    pub high: Var,
    pub gate: Var,
    pub output: Var,
}

impl FeatureReconstructingFusion {
    /// `skip_channels` is the channel count of each encoder map, `high_channels`
    /// that of the coarser decoder map, `out_channels` the decoder width here.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        skip_channels: usize,
        high_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let cat = 2 * skip_channels;
        let c = out_channels;
        let mut conv = |suffix: &str, cin: usize, cout: usize, k: usize, dil: usize| {
            Conv2d::new(store, rng, &format!("{name}.{suffix}"), cin, cout, k, dil, true)
        };
        let wide_proj = conv("wide_proj", cat, c, 1, 1)?;
        let wide_conv = conv("wide_conv", c, c, 3, 2)?;
        let local_proj = conv("local_proj", cat, c, 1, 1)?;
        let local_conv = conv("local_conv", c, c, 3, 1)?;
        let merge = conv("merge", c, c, 1, 1)?;
        let high_proj = conv("high_proj", high_channels, c, 1, 1)?;
        let gate_high = conv("gate_high", c, c, 1, 1)?;
        let gate_out = conv("gate_out", c, 1, 1, 1)?;
        let output = conv("output", 2 * c, c, 1, 1)?;
        let merge_bn = BatchNorm2d::new(store, &format!("{name}.merge_bn"), c);
        Ok(FeatureReconstructingFusion {
            wide_proj,
            wide_conv,
            local_proj,
            local_conv,
            merge,
            merge_bn,
            high_proj,
            gate_high,
            gate_out,
            output,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, lx: Var, ly: Var, hx: Var) -> Result<Var> {
        Ok(self.trace(s, lx, ly, hx)?.output)
    }

    pub fn trace<T: Float>(&self, s: &mut Session<'_, T>, lx: Var, ly: Var, hx: Var) -> Result<FrfTrace> {
        let (sx, sy, sh) = (s.graph.shape(lx), s.graph.shape(ly), s.graph.shape(hx));
        ensure!(sx == sy, "FRF encoder maps differ: {sx} vs {sy}");
        ensure!(
            sh.batch == sx.batch && 2 * sh.height == sx.height && 2 * sh.width == sx.width,
            "FRF coarse map {sh} must be exactly half the resolution of {sx}"
        );
        let cat = s.graph.concat(&[lx, ly])?;

        let wide = self.wide_proj.forward(s, cat)?;
        let wide = self.wide_conv.forward(s, wide)?;
        let local = self.local_proj.forward(s, cat)?;
        let local = self.local_conv.forward(s, local)?;
        let sum = s.graph.add(wide, local)?;
        let low = self.merge.forward(s, sum)?;
        let low = self.merge_bn.forward(s, low)?;
        let low = s.graph.relu(low);

        let up = s.graph.upsample2(hx)?;
        let high = self.high_proj.forward(s, up)?;

        let g = self.gate_high.forward(s, high)?;
        let g = s.graph.add(g, low)?;
        let g = s.graph.relu(g);
        let g = self.gate_out.forward(s, g)?;
        let gate = s.graph.sigmoid(g);

        let attended = s.graph.mul(low, gate)?;
        let cat = s.graph.concat(&[high, attended])?;
        let output = self.output.forward(s, cat)?;
        Ok(FrfTrace {
            low,
            high,
            gate,
            output,
        })
    }
}
