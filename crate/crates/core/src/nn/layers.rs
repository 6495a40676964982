use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::float::Float;
use super::graph::{BnMode, ConvSpec, Gradients, Graph, Var};
use super::tensor::{Shape, Tensor};
use crate::error::{ensure, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Learnable weights are trainable; batch-norm running moments are not.
    pub trainable: bool,
}

/// Flat, ordered storage for every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.shape().len())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Overwrite values from another store with the identical layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        ensure!(
            self.entries.len() == other.entries.len(),
            "parameter count mismatch: {} vs {}",
            self.entries.len(),
            other.entries.len()
        );
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            ensure!(
                a.name == b.name && a.value.shape() == b.value.shape(),
                "parameter layout mismatch at {}",
                a.name
            );
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// One forward (and optionally backward) evaluation of a model.
///
/// Parameters are bound lazily onto the tape the first time a layer asks for
/// them. In training mode they are differentiable leaves.
pub struct Session<'a, T: Float> {
    pub graph: Graph<T>,
    store: &'a mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Float> Session<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, training: bool) -> Self {
        let n = store.len();
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; n],
            training,
            rng,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.entries[id.0];
        let value = p.value.clone();
        let v = if self.training && p.trainable {
            self.graph.variable(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients for every trainable parameter that took part in the forward pass.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.entries[i].trainable {
                    return None;
                }
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    fn update_running(&mut self, id: ParamId, batch: &[T], momentum: T) {
        let running = self.store.entries[id.0].value.data_mut();
        for (r, b) in running.iter_mut().zip(batch) {
            *r = (T::one() - momentum) * *r + momentum * *b;
        }
    }
}

/// PyTorch-style default initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
fn uniform_init<T: Float>(shape: Shape, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.gen_range(-bound..=bound)))
}

/// Stride-1 square convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Self> {
        ensure!(kernel % 2 == 1, "{name}: kernel size {kernel} must be odd");
        ensure!(
            in_channels > 0 && out_channels > 0,
            "{name}: channel counts must be positive"
        );
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(Shape::new(out_channels, in_channels, kernel, kernel), fan_in, rng),
            true,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform_init(Shape::new(1, out_channels, 1, 1), fan_in, rng),
                true,
            )
        });
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            spec: ConvSpec::same(kernel, dilation.max(1)),
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.spec)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization with running moments.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(s, T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(s), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(s), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(s, T::one()), false),
        }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let eps = T::lit(BN_EPS);
        if s.training() {
            let (y, stats) = s.graph.batch_norm(x, g, b, BnMode::Batch { eps })?;
            if let Some(stats) = stats {
                let m = T::lit(BN_MOMENTUM);
                s.update_running(self.running_mean, &stats.mean, m);
                s.update_running(self.running_var, &stats.var_unbiased, m);
            }
            Ok(y)
        } else {
            let mean = s.store().get(self.running_mean).value.data().to_vec();
            let var = s.store().get(self.running_var).value.data().to_vec();
            let (y, _) = s.graph.batch_norm(
                x,
                g,
                b,
                BnMode::Running {
                    mean: &mean,
                    var: &var,
                    eps,
                },
            )?;
            Ok(y)
        }
    }
}

/// Structured dropout zeroing contiguous square regions (training only).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropBlock {
    pub block_size: usize,
    pub rate: f64,
}

impl DropBlock {
    pub fn new(block_size: usize, rate: f64) -> Self {
        DropBlock { block_size, rate }
    }

    /// Keep-mask (already rescaled) for an input of `shape`.
    pub fn sample_mask<T: Float>(&self, shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let bs = self.block_size.min(shape.height).min(shape.width).max(1);
        let valid_h = shape.height - bs + 1;
        let valid_w = shape.width - bs + 1;
        let gamma = self.rate / (bs * bs) as f64 * shape.plane() as f64 / (valid_h * valid_w) as f64;
        let mut keep = vec![T::one(); shape.len()];
        for nc in 0..shape.batch * shape.channels {
            let plane = &mut keep[nc * shape.plane()..(nc + 1) * shape.plane()];
            for y in 0..valid_h {
                for x in 0..valid_w {
                    if rng.gen::<f64>() < gamma {
                        for by in y..y + bs {
                            plane[by * shape.width + x..by * shape.width + x + bs]
                                .iter_mut()
                                .for_each(|v| *v = T::zero());
                        }
                    }
                }
            }
        }
        let kept = keep.iter().filter(|v| **v > T::zero()).count();
        let scale = if kept == 0 {
            T::zero()
        } else {
            T::lit(shape.len() as f64 / kept as f64)
        };
        keep.iter_mut().for_each(|v| *v = *v * scale);
        Tensor::from_vec(shape, keep).expect("shape")
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        if !s.training() || self.rate <= 0.0 {
            return Ok(x);
        }
        let shape = s.graph.shape(x);
        let mask = self.sample_mask::<T>(shape, s.rng());
        let m = s.graph.constant(mask);
        s.graph.mul(x, m)
    }
}
