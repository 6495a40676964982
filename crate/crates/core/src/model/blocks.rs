//! Convolutional building blocks shared by the encoders, the connect block
//! and the decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{BatchNorm2d, Conv2d, DropBlock, Float, ParamStore, Session, Var};

/// The block families of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `ReLU(BN(DropBlock(Conv3x3(x))))`.
    Base,
    /// Two stacked 3x3 convolutions before the regularized tail.
    SequentialIncremental,
    /// 1x1 channel mixing then a 3x3 convolution before the regularized tail.
    StackedGeneralization,
    /// Two base blocks in sequence.
    Connect,
    /// `ReLU(BN(Conv1x1(x))) + SGB(BB(x))`.
    ResInception,
}

/// `[pre-conv] -> Conv3x3 -> DropBlock -> BN -> ReLU`.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pre: Option<Conv2d>,
    conv: Conv2d,
    drop: DropBlock,
    bn: BatchNorm2d,
}

impl ConvUnit {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        pre_kernel: Option<usize>,
        drop: DropBlock,
    ) -> Result<Self> {
        let (pre, conv_in) = match pre_kernel {
            Some(k) => (
                Some(Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.pre"),
                    in_channels,
                    out_channels,
                    k,
                    1,
                    true,
                )?),
                out_channels,
            ),
            None => (None, in_channels),
        };
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), conv_in, out_channels, 3, 1, true)?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_channels);
        Ok(ConvUnit { pre, conv, drop, bn })
    }

    fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let x = match &self.pre {
            Some(pre) => pre.forward(s, x)?,
            None => x,
        };
        let y = self.conv.forward(s, x)?;
        let y = self.drop.forward(s, y)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}

/// One block of any [`BlockKind`]. Spatial dims are preserved.
#[derive(Clone, Debug)]
pub struct Block {
    kind: BlockKind,
    units: Vec<ConvUnit>,
    residual: Option<(Conv2d, BatchNorm2d)>,
    out_channels: usize,
}

impl Block {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: BlockKind,
        in_channels: usize,
        out_channels: usize,
        drop: DropBlock,
    ) -> Result<Self> {
        let mut unit = |suffix: &str, cin: usize, pre: Option<usize>| {
            ConvUnit::new(store, rng, &format!("{name}.{suffix}"), cin, out_channels, pre, drop)
        };
        let units = match kind {
            BlockKind::Base => vec![unit("bb", in_channels, None)?],
            BlockKind::SequentialIncremental => vec![unit("sib", in_channels, Some(3))?],
            BlockKind::StackedGeneralization => vec![unit("sgb", in_channels, Some(1))?],
            BlockKind::Connect => vec![unit("bb0", in_channels, None)?, unit("bb1", out_channels, None)?],
            BlockKind::ResInception => vec![unit("bb", in_channels, None)?, unit("sgb", out_channels, Some(1))?],
        };
        let residual = if kind == BlockKind::ResInception {
            let conv = Conv2d::new(
                store,
                rng,
                &format!("{name}.res"),
                in_channels,
                out_channels,
                1,
                1,
                true,
            )?;
            let bn = BatchNorm2d::new(store, &format!("{name}.res_bn"), out_channels);
            Some((conv, bn))
        } else {
            None
        };
        Ok(Block {
            kind,
            units,
            residual,
            out_channels,
        })
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        for u in &self.units {
            y = u.forward(s, y)?;
        }
        if let Some((conv, bn)) = &self.residual {
            let r = conv.forward(s, x)?;
            let r = bn.forward(s, r)?;
            let r = s.graph.relu(r);
            y = s.graph.add(r, y)?;
        }
        Ok(y)
    }
}

/// One encoder level: a base block followed by a second block.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    base: Block,
    second: Block,
}

impl EncoderStage {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        second: BlockKind,
        in_channels: usize,
        out_channels: usize,
        drop: DropBlock,
    ) -> Result<Self> {
        Ok(EncoderStage {
            base: Block::new(
                store,
                rng,
                &format!("{name}.0"),
                BlockKind::Base,
                in_channels,
                out_channels,
                drop,
            )?,
            second: Block::new(
                store,
                rng,
                &format!("{name}.1"),
                second,
                out_channels,
                out_channels,
                drop,
            )?,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.base.forward(s, x)?;
        self.second.forward(s, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Shape, Tensor};
    use rand::SeedableRng;

    fn run(kind: BlockKind, input: Shape, out: usize, training: bool, seed: u64) -> Tensor<f32> {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Block::new(
            &mut store,
            &mut rng,
            "b",
            kind,
            input.channels,
            out,
            DropBlock::new(7, 0.1),
        )
        .unwrap();
        let x = Tensor::from_fn(input, |n, c, y, x| ((n + 3 * c + 5 * y + 7 * x) as f32 * 0.37).sin());
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Session::new(&mut store, &mut drop_rng, training);
        let v = s.graph.constant(x);
        let y = block.forward(&mut s, v).unwrap();
        s.graph.value(y).clone()
    }

    #[test]
    fn every_kind_preserves_spatial_dims_and_sets_channels() {
        for kind in [
            BlockKind::Base,
            BlockKind::SequentialIncremental,
            BlockKind::StackedGeneralization,
            BlockKind::Connect,
            BlockKind::ResInception,
        ] {
            let y = run(kind, Shape::new(1, 3, 32, 32), 16, false, 0);
            assert_eq!(y.shape(), Shape::new(1, 16, 32, 32), "{kind:?}");
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_is_stochastic() {
        for kind in [BlockKind::Base, BlockKind::ResInception] {
            let s = Shape::new(2, 4, 16, 16);
            assert_eq!(run(kind, s, 8, false, 1), run(kind, s, 8, false, 2));
            assert_ne!(run(kind, s, 8, true, 1), run(kind, s, 8, true, 2));
        }
    }

    #[test]
    fn zero_weights_with_identity_norm_give_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = Block::new(&mut store, &mut rng, "b", BlockKind::Base, 3, 4, DropBlock::new(7, 0.1)).unwrap();
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.contains("conv"))
            .map(|(i, _)| i)
            .collect();
        for id in ids {
            let shape = store.get(id).value.shape();
            store.get_mut(id).value = Tensor::zeros(shape);
        }
        let mut s = Session::new(&mut store, &mut rng, false);
        let x = s.graph.constant(Tensor::full(Shape::new(1, 3, 8, 8), 0.8));
        let y = block.forward(&mut s, x).unwrap();
        assert!(s.graph.value(y).data().iter().all(|v| *v == 0.0));
    }
}
