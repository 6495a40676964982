//! Segmentation losses and the seeded training loop.

use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csa::{augment_sample, derive_seed, AugmentConfig, ChannelStats};
use crate::error::{ensure, Error, Result};
use crate::imaging::FundusSample;
use crate::invariant::{make_invariant_input, InvariantConfig};
use crate::model::{check_spatial_dims, checkpoint, DeffaNet};
use crate::nn::{Adam, AdamConfig, Float, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the cross-entropy term; the Dice term gets `1 - alpha`.
    pub alpha: f64,
    pub smooth: f64,
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            smooth: 1.0,
            prob_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.smooth > 0.0) || !(0.0..0.5).contains(&self.prob_clamp) {
            return Err(Error::Config(format!(
                "loss needs alpha in [0, 1], smooth > 0 and prob_clamp in [0, 0.5); got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Float>(pr: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    ensure!(
        pr.shape() == gt.shape(),
        "prediction {} and ground truth {} differ in shape",
        pr.shape(),
        gt.shape()
    );
    ensure!(!pr.shape().is_empty(), "loss over an empty map");
    Ok(())
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_loss<T: Float>(pr: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    check_pair(pr, gt)?;
    let (lo, hi) = (cfg.prob_clamp, 1.0 - cfg.prob_clamp);
    let sum: f64 = pr
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let (p, g) = (p.as_f64().clamp(lo, hi), g.as_f64());
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pr.shape().len() as f64)
}

struct DiceSums {
    inter: f64,
    pred: f64,
    truth: f64,
}

fn dice_sums<T: Float>(pr: &Tensor<T>, gt: &Tensor<T>) -> DiceSums {
    let mut s = DiceSums {
        inter: 0.0,
        pred: 0.0,
        truth: 0.0,
    };
    for (&p, &g) in pr.data().iter().zip(gt.data()) {
        let (p, g) = (p.as_f64(), g.as_f64());
        s.inter += p * g;
        s.pred += p;
        s.truth += g;
    }
    s
}

/// Soft Dice loss over the whole map.
pub fn dice_loss<T: Float>(pr: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    check_pair(pr, gt)?;
    let s = dice_sums(pr, gt);
    Ok(1.0 - (2.0 * s.inter + cfg.smooth) / (s.pred + s.truth + cfg.smooth))
}

pub fn combined_loss<T: Float>(pr: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    Ok(cfg.alpha * bce_loss(pr, gt, cfg)? + (1.0 - cfg.alpha) * dice_loss(pr, gt, cfg)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub bce: f64,
    pub dice: f64,
    pub combined: f64,
}

/// Cross-entropy gradient with respect to `pr` (zero where the clamp is active).
pub fn bce_grad<T: Float>(pr: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    check_pair(pr, gt)?;
    let n = pr.shape().len() as f64;
    let (lo, hi) = (cfg.prob_clamp, 1.0 - cfg.prob_clamp);
    let data = pr
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let (p, g) = (p.as_f64(), g.as_f64());
            if p < lo || p > hi {
                return T::zero();
            }
            T::lit((-g / p + (1.0 - g) / (1.0 - p)) / n)
        })
        .collect();
    Tensor::from_vec(pr.shape(), data)
}

pub fn dice_grad<T: Float>(pr: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    check_pair(pr, gt)?;
    let s = dice_sums(pr, gt);
    let num = 2.0 * s.inter + cfg.smooth;
    let den = s.pred + s.truth + cfg.smooth;
    let data = gt
        .data()
        .iter()
        .map(|&g| T::lit(-(2.0 * g.as_f64() * den - num) / (den * den)))
        .collect();
    Tensor::from_vec(pr.shape(), data)
}

/// All three loss values and the gradient of the combined loss.
pub fn combined_loss_and_grad<T: Float>(
    pr: &Tensor<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(LossParts, Tensor<T>)> {
    let bce = bce_loss(pr, gt, cfg)?;
    let dice = dice_loss(pr, gt, cfg)?;
    let mut grad = bce_grad(pr, gt, cfg)?.map(|v| v * T::lit(cfg.alpha));
    let dg = dice_grad(pr, gt, cfg)?;
    let w = T::lit(1.0 - cfg.alpha);
    for (a, b) in grad.data_mut().iter_mut().zip(dg.data()) {
        *a += w * *b;
    }
    let parts = LossParts {
        bce,
        dice,
        combined: cfg.alpha * bce + (1.0 - cfg.alpha) * dice,
    };
    Ok((parts, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `[height, width]`, both multiples of 8.
    pub image_size: [usize; 2],
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Fraction of samples held out for a per-epoch validation loss.
    pub val_fraction: f64,
    /// Probability of replacing a sample by a color-statistics augmented copy
    /// each epoch (only when reference statistics are supplied).
    pub augment_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 2,
            seed: 0,
            image_size: [128, 128],
            checkpoint_every: 0,
            val_fraction: 0.0,
            augment_probability: 0.5,
        }
    }
}

impl TrainConfig {
    /// Full-length schedule (220 epochs); the default is a 30-epoch desk run.
    pub fn full_schedule() -> Self {
        TrainConfig {
            epochs: 220,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_spatial_dims(self.image_size[0], self.image_size[1])?;
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "learning_rate must be > 0, weight_decay >= 0 and batch_size >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.augment_probability) {
            return Err(Error::Config(
                "val_fraction must be in [0, 1) and augment_probability in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Network-ready tensors of one sample.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub id: String,
    /// `(1, 3, H, W)`.
    pub raw: Tensor<T>,
    /// `(1, 1, H, W)`.
    pub invariant: Tensor<T>,
    /// `(1, 1, H, W)`, 0/1.
    pub target: Tensor<T>,
}

pub fn prepare_sample<T: Float>(sample: &FundusSample, icfg: &InvariantConfig) -> Result<Prepared<T>> {
    sample.validate()?;
    let (h, w) = (sample.height(), sample.width());
    check_spatial_dims(h, w)?;
    let raw = Tensor::from_vec(
        Shape::new(1, 3, h, w),
        sample.image.data().iter().map(|&v| T::lit(v as f64)).collect(),
    )?;
    let inv = make_invariant_input(sample, icfg)?;
    let invariant = Tensor::from_vec(
        Shape::new(1, 1, h, w),
        inv.pixels().iter().map(|&v| T::lit(v)).collect(),
    )?;
    let target = Tensor::from_vec(
        Shape::new(1, 1, h, w),
        sample.vessel_mask.pixels().iter().map(|&v| T::lit(v as f64)).collect(),
    )?;
    Ok(Prepared {
        id: sample.id.clone(),
        raw,
        invariant,
        target,
    })
}

/// Stack prepared samples into one batch: `(raw, invariant, target)`.
pub fn batch_of<T: Float>(items: &[&Prepared<T>]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let raw: Vec<_> = items.iter().map(|p| p.raw.clone()).collect();
    let inv: Vec<_> = items.iter().map(|p| p.invariant.clone()).collect();
    let gt: Vec<_> = items.iter().map(|p| p.target.clone()).collect();
    Ok((Tensor::stack(&raw)?, Tensor::stack(&inv)?, Tensor::stack(&gt)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub dice: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    /// True when a hook ended the run before the configured epoch count.
    pub stopped_early: bool,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl History {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| Error::Serialization(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Callbacks invoked by [`train_with`].
pub trait TrainHooks {
    fn after_step(&mut self, _model: &mut DeffaNet<f32>, _step: usize, _parts: &LossParts) -> Result<Flow> {
        Ok(Flow::Continue)
    }

    fn after_epoch(&mut self, _model: &mut DeffaNet<f32>, _record: &EpochRecord) -> Result<Flow> {
        Ok(Flow::Continue)
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Writes `epoch_<n>.ckpt` into `dir` every `every` epochs.
pub struct CheckpointHook {
    pub dir: PathBuf,
    pub every: usize,
    pub manifest: serde_json::Value,
    pub written: Vec<PathBuf>,
}

impl TrainHooks for CheckpointHook {
    fn after_epoch(&mut self, model: &mut DeffaNet<f32>, record: &EpochRecord) -> Result<Flow> {
        if self.every > 0 && record.epoch % self.every == 0 {
            let path = self.dir.join(format!("epoch_{:04}.ckpt", record.epoch));
            let mut manifest = self.manifest.clone();
            if let serde_json::Value::Object(m) = &mut manifest {
                m.insert("epoch".into(), record.epoch.into());
            }
            checkpoint::save(model, &manifest, &path)?;
            self.written.push(path);
        }
        Ok(Flow::Continue)
    }
}

/// Stops once the thresholded Dice on the given samples reaches `target`,
/// checked in evaluation mode every `every` steps.
pub struct TargetDice {
    pub samples: Vec<Prepared<f32>>,
    pub target: f64,
    pub threshold: f64,
    pub every: usize,
    pub reached_at: Option<usize>,
    pub last: f64,
}

impl TargetDice {
    pub fn new(samples: Vec<Prepared<f32>>, target: f64, every: usize) -> Self {
        TargetDice {
            samples,
            target,
            threshold: 0.5,
            every: every.max(1),
            reached_at: None,
            last: 0.0,
        }
    }

    pub fn measure(&self, model: &mut DeffaNet<f32>) -> Result<f64> {
        let refs: Vec<&Prepared<f32>> = self.samples.iter().collect();
        let (raw, inv, gt) = batch_of(&refs)?;
        let out = model.forward(&raw, &inv, false)?;
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (&p, &g) in out.data().iter().zip(gt.data()) {
            match (p as f64 >= self.threshold, g > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let den = 2 * tp + fp + fneg;
        Ok(if den == 0 { 1.0 } else { 2.0 * tp as f64 / den as f64 })
    }
}

impl TrainHooks for TargetDice {
    fn after_step(&mut self, model: &mut DeffaNet<f32>, step: usize, _parts: &LossParts) -> Result<Flow> {
        if step % self.every != 0 {
            return Ok(Flow::Continue);
        }
        self.last = self.measure(model)?;
        debug!("step {step}: train dice {:.4}", self.last);
        if self.last >= self.target {
            self.reached_at = Some(step);
            return Ok(Flow::Stop);
        }
        Ok(Flow::Continue)
    }
}

pub fn train(
    model: &mut DeffaNet<f32>,
    dataset: &[FundusSample],
    stats: Option<&ChannelStats>,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    icfg: &InvariantConfig,
) -> Result<History> {
    train_with(model, dataset, stats, tcfg, lcfg, icfg, &mut NoHooks)
}

/// Seeded Adam training on the combined loss.
///
/// Every source of randomness (split, batch order, augmentation, DropBlock)
/// derives from `tcfg.seed`, so equal inputs give bit-identical parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_with(
    model: &mut DeffaNet<f32>,
    dataset: &[FundusSample],
    stats: Option<&ChannelStats>,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    icfg: &InvariantConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<History> {
    tcfg.validate()?;
    lcfg.validate()?;
    icfg.validate()?;
    ensure!(!dataset.is_empty(), "training needs at least one sample");
    let [h, w] = tcfg.image_size;
    for s in dataset {
        ensure!(
            (s.height(), s.width()) == (h, w),
            "{}: sample is {}x{} but image_size is {h}x{w}; resize first",
            s.id,
            s.height(),
            s.width()
        );
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, 0));
    let n_val = ((dataset.len() as f64) * tcfg.val_fraction).floor() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    if n_val > 0 {
        order.shuffle(&mut split_rng);
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();

    let base: Vec<Prepared<f32>> = train_idx
        .iter()
        .map(|&i| prepare_sample(&dataset[i], icfg))
        .collect::<Result<_>>()?;
    let val: Vec<Prepared<f32>> = val_idx
        .iter()
        .map(|&i| prepare_sample(&dataset[i], icfg))
        .collect::<Result<_>>()?;

    let mut history = History {
        train_ids: base.iter().map(|p| p.id.clone()).collect(),
        val_ids: val.iter().map(|p| p.id.clone()).collect(),
        ..History::default()
    };
    if tcfg.epochs == 0 {
        return Ok(history);
    }

    model.reseed(derive_seed(tcfg.seed, 1));
    let mut adam = Adam::new(tcfg.adam(), model.params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, 2));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, 3));
    let started = Instant::now();
    let mut step = 0usize;

    'epochs: for epoch in 1..=tcfg.epochs {
        let mut perm: Vec<usize> = (0..base.len()).collect();
        perm.shuffle(&mut order_rng);

        let mut augmented: Vec<Option<Prepared<f32>>> = vec![None; base.len()];
        if let Some(stats) = stats.filter(|_| tcfg.augment_probability > 0.0) {
            for (k, &i) in train_idx.iter().enumerate() {
                let draw: f64 = aug_rng.gen();
                let seed: u64 = aug_rng.gen();
                if draw < tcfg.augment_probability {
                    let cfg = AugmentConfig {
                        seed,
                        ..AugmentConfig::default()
                    };
                    augmented[k] = Some(prepare_sample(&augment_sample(&dataset[i], stats, &cfg)?, icfg)?);
                }
            }
        }

        let (mut sum, mut bce, mut dice, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in perm.chunks(tcfg.batch_size) {
            let items: Vec<&Prepared<f32>> = chunk
                .iter()
                .map(|&k| augmented[k].as_ref().unwrap_or(&base[k]))
                .collect();
            let (raw, inv, gt) = batch_of(&items)?;
            let (parts, grads) = {
                let (arch, mut s) = model.session(true);
                let r = s.graph.constant(raw);
                let i = s.graph.constant(inv);
                let out = arch.forward(&mut s, r, i)?;
                let (parts, seed) = combined_loss_and_grad(s.graph.value(out), &gt, lcfg)?;
                if !parts.combined.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss {} at epoch {epoch}, step {}",
                        parts.combined,
                        step + 1
                    )));
                }
                let mut g = s.graph.backward(out, seed)?;
                (parts, s.param_grads(&mut g))
            };
            adam.step(model.params_mut(), &grads);
            step += 1;
            sum += parts.combined;
            bce += parts.bce;
            dice += parts.dice;
            batches += 1;
            if hooks.after_step(model, step, &parts)? == Flow::Stop {
                history.stopped_early = true;
            }
            if history.stopped_early {
                break;
            }
        }

        let val_loss = if val.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for p in &val {
                let out = model.forward(&p.raw, &p.invariant, false)?;
                total += combined_loss(&out, &p.target, lcfg)?;
            }
            Some(total / val.len() as f64)
        };
        let b = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            loss: sum / b,
            bce: bce / b,
            dice: dice / b,
            val_loss,
            lr: tcfg.learning_rate,
            steps: step,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}/{}: loss {:.5} (bce {:.5}, dice {:.5})",
            tcfg.epochs, record.loss, record.bce, record.dice
        );
        let flow = hooks.after_epoch(model, &record)?;
        history.epochs.push(record);
        if history.stopped_early || flow == Flow::Stop {
            history.stopped_early = true;
            break 'epochs;
        }
    }
    history.steps = step;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn bce_hand_values() {
        let cfg = LossConfig::default();
        let gt = t(&[1.0, 0.0, 1.0, 0.0]);
        assert!((bce_loss(&t(&[0.5; 4]), &gt, &cfg).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&gt, &gt, &cfg).unwrap() <= -(1.0 - 1e-7f64).ln() + 1e-15);
        let pr = t(&[0.9, 0.1, 0.8, 0.3]);
        let expect = -(0.9f64.ln() + 0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln()) / 4.0;
        assert!((bce_loss(&pr, &gt, &cfg).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.19763).abs() < 1e-5);
        assert!(bce_loss(&pr, &t(&[1.0, 0.0]), &cfg).is_err());
    }

    #[test]
    fn dice_hand_values() {
        let cfg = LossConfig::default();
        assert_eq!(dice_loss(&t(&[0.0; 5]), &t(&[0.0; 5]), &cfg).unwrap(), 0.0);
        let gt = t(&[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(dice_loss(&gt, &gt, &cfg).unwrap(), 0.0);
        let ones = t(&[1.0; 6]);
        assert!((dice_loss(&ones, &t(&[0.0; 6]), &cfg).unwrap() - (1.0 - 1.0 / 7.0)).abs() < 1e-15);
    }

    #[test]
    fn combined_is_the_alpha_blend() {
        let pr = t(&[0.9, 0.2, 0.6, 0.4]);
        let gt = t(&[1.0, 0.0, 0.0, 1.0]);
        for alpha in [0.0, 0.25, 1.0] {
            let cfg = LossConfig {
                alpha,
                ..LossConfig::default()
            };
            let expect = alpha * bce_loss(&pr, &gt, &cfg).unwrap() + (1.0 - alpha) * dice_loss(&pr, &gt, &cfg).unwrap();
            assert!((combined_loss(&pr, &gt, &cfg).unwrap() - expect).abs() < 1e-12);
        }
        assert!((0.25f64 * 0.4 + 0.75 * 0.2 - 0.25).abs() < 1e-15);
    }

    fn fd_check(f: impl Fn(&Tensor<f64>) -> f64, grad: &Tensor<f64>, at: &Tensor<f64>) {
        let h = 1e-6;
        for i in 0..at.shape().len() {
            let mut p = at.clone();
            p.data_mut()[i] += h;
            let mut m = at.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let g = grad.data()[i];
            assert!(
                (fd - g).abs() <= 1e-3 * fd.abs().max(g.abs()).max(1e-8),
                "{i}: fd {fd} vs {g}"
            );
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = LossConfig::default();
        let pr = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| 0.1 + 0.05 * (y * 4 + x) as f64);
        let gt = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| ((y + 2 * x) % 3 == 0) as u8 as f64);
        fd_check(
            |p| bce_loss(p, &gt, &cfg).unwrap(),
            &bce_grad(&pr, &gt, &cfg).unwrap(),
            &pr,
        );
        fd_check(
            |p| dice_loss(p, &gt, &cfg).unwrap(),
            &dice_grad(&pr, &gt, &cfg).unwrap(),
            &pr,
        );
        let (_, g) = combined_loss_and_grad(&pr, &gt, &cfg).unwrap();
        fd_check(|p| combined_loss(p, &gt, &cfg).unwrap(), &g, &pr);
    }

    proptest! {
        #[test]
        fn loss_properties(
            vals in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 2..40),
            rot in 0usize..40
        ) {
            let cfg = LossConfig::default();
            let pr = t(&vals.iter().map(|v| v.0).collect::<Vec<_>>());
            let gt = t(&vals.iter().map(|v| v.1 as u8 as f64).collect::<Vec<_>>());
            let d = dice_loss(&pr, &gt, &cfg).unwrap();
            prop_assert!((0.0..1.0).contains(&d));

            let k = rot % vals.len();
            let mut perm = vals.clone();
            perm.rotate_left(k);
            let pp = t(&perm.iter().map(|v| v.0).collect::<Vec<_>>());
            let pg = t(&perm.iter().map(|v| v.1 as u8 as f64).collect::<Vec<_>>());
            prop_assert!((bce_loss(&pr, &gt, &cfg).unwrap() - bce_loss(&pp, &pg, &cfg).unwrap()).abs() < 1e-12);
            prop_assert!((d - dice_loss(&pp, &pg, &cfg).unwrap()).abs() < 1e-12);

            let at = |alpha| combined_loss(&pr, &gt, &LossConfig { alpha, ..cfg.clone() }).unwrap();
            prop_assert!((at(0.5) - 0.5 * (at(0.0) + at(1.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            image_size: [130, 130],
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("multiples of 8"));
        assert_eq!(TrainConfig::full_schedule().epochs, 220);
    }
}
