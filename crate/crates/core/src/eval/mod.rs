//! FOV-restricted segmentation metrics and dataset evaluation.

pub mod harness;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imaging::{BinaryMask, ColorImage, FundusSample, GrayField};
use crate::invariant::InvariantConfig;
use crate::model::DeffaNet;
use crate::train::prepare_sample;

pub use harness::{ablation_run, cross_domain_eval, AblationConfig, AblationRow, CrossDomainRow, Variant};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

fn check_maps(prob: &GrayField, gt: &BinaryMask, fov: &BinaryMask) -> Result<()> {
    let dims = (prob.height(), prob.width());
    ensure!(
        dims == (gt.height(), gt.width()) && dims == (fov.height(), fov.width()),
        "probability map {}x{}, ground truth {}x{} and FOV {}x{} must match",
        dims.0,
        dims.1,
        gt.height(),
        gt.width(),
        fov.height(),
        fov.width()
    );
    ensure!(fov.count_ones() > 0, "FOV mask is empty");
    Ok(())
}

/// Counts over FOV pixels with prediction `prob >= threshold`.
pub fn confusion(prob: &GrayField, gt: &BinaryMask, fov: &BinaryMask, threshold: f64) -> Result<ConfusionCounts> {
    check_maps(prob, gt, fov)?;
    ensure!(
        threshold > 0.0 && threshold < 1.0,
        "threshold must be in (0, 1), got {threshold}"
    );
    let mut c = ConfusionCounts::default();
    for ((&p, &g), &f) in prob.pixels().iter().zip(gt.pixels()).zip(fov.pixels()) {
        if f == 0 {
            continue;
        }
        match (p >= threshold, g == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// The six ratio metrics plus MCC.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioMetrics {
    pub acc: f64,
    pub recall: f64,
    pub specificity: f64,
    pub precision: f64,
    pub iou: f64,
    pub dsc: f64,
    pub mcc: f64,
    /// Names of metrics whose ratio was 0/0 and was reported as 1.
    pub degenerate: Vec<String>,
}

pub fn segmentation_metrics(c: &ConfusionCounts) -> RatioMetrics {
    let (tp, tn, fp, fneg) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            degenerate.push(name.to_string());
            1.0
        } else {
            num / den
        }
    };
    let acc = ratio("acc", tp + tn, tp + tn + fp + fneg);
    let recall = ratio("recall", tp, tp + fneg);
    let specificity = ratio("specificity", tn, tn + fp);
    let precision = ratio("precision", tp, tp + fp);
    let iou = ratio("iou", tp, tp + fp + fneg);
    let dsc = ratio("dsc", 2.0 * tp, 2.0 * tp + fp + fneg);
    let den = (tp + fp) * (tp + fneg) * (tn + fp) * (tn + fneg);
    let mcc = if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fneg) / den.sqrt()
    };
    RatioMetrics {
        acc,
        recall,
        specificity,
        precision,
        iou,
        dsc,
        mcc,
        degenerate,
    }
}

/// Rank-sum AUC with midranks for ties. Errors unless both classes occur.
pub fn auc_from_scores(scores: &[(f64, bool)]) -> Result<f64> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!(
            "AUC needs both classes in the FOV ({pos} positive, {neg} negative pixels)"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        let positives = sorted[i..=j].iter().filter(|s| s.1).count();
        rank_sum += midrank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn fov_scores(prob: &GrayField, gt: &BinaryMask, fov: &BinaryMask) -> Vec<(f64, bool)> {
    prob.pixels()
        .iter()
        .zip(gt.pixels())
        .zip(fov.pixels())
        .filter(|(_, &f)| f == 1)
        .map(|((&p, &g), _)| (p, g == 1))
        .collect()
}

pub fn roc_auc(prob: &GrayField, gt: &BinaryMask, fov: &BinaryMask) -> Result<f64> {
    check_maps(prob, gt, fov)?;
    auc_from_scores(&fov_scores(prob, gt, fov))
}

/// How the dataset-level AUC is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucMode {
    /// One ROC over every FOV pixel of every image.
    #[default]
    Pooled,
    /// Mean of per-image AUCs (images with a single class are skipped).
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub recall: f64,
    pub specificity: f64,
    pub precision: f64,
    pub iou: f64,
    pub dsc: f64,
    /// `None` when the ground truth inside the FOV has a single class.
    pub auc: Option<f64>,
    pub mcc: f64,
    pub counts: ConfusionCounts,
    pub threshold: f64,
    pub sample_ids: Vec<String>,
    pub degenerate: Vec<String>,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts, auc: Option<f64>, threshold: f64, sample_ids: Vec<String>) -> Self {
        let m = segmentation_metrics(&counts);
        let mut degenerate = m.degenerate;
        if auc.is_none() {
            degenerate.push("auc".into());
        }
        MetricsReport {
            acc: m.acc,
            recall: m.recall,
            specificity: m.specificity,
            precision: m.precision,
            iou: m.iou,
            dsc: m.dsc,
            auc,
            mcc: m.mcc,
            counts,
            threshold,
            sample_ids,
            degenerate,
        }
    }
}

/// Anything that maps a sample to a per-pixel vessel probability.
pub trait Segmenter {
    fn predict(&mut self, sample: &FundusSample, icfg: &InvariantConfig) -> Result<GrayField>;
}

impl Segmenter for DeffaNet<f32> {
    fn predict(&mut self, sample: &FundusSample, icfg: &InvariantConfig) -> Result<GrayField> {
        let p = prepare_sample::<f32>(sample, icfg)?;
        let out = self.forward(&p.raw, &p.invariant, false)?;
        GrayField::from_vec(
            sample.height(),
            sample.width(),
            out.data().iter().map(|&v| v as f64).collect(),
        )
    }
}

impl<F: FnMut(&FundusSample) -> Result<GrayField>> Segmenter for F {
    fn predict(&mut self, sample: &FundusSample, _icfg: &InvariantConfig) -> Result<GrayField> {
        self(sample)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvaluation {
    pub aggregate: MetricsReport,
    pub per_sample: Vec<SampleResult>,
    pub failures: Vec<SampleFailure>,
    pub auc_mode: AucMode,
}

impl DatasetEvaluation {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    /// One CSV row per sample followed by an `aggregate` row.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        w.write_record([
            "id",
            "acc",
            "recall",
            "specificity",
            "precision",
            "iou",
            "dsc",
            "auc",
            "mcc",
            "tp",
            "tn",
            "fp",
            "fn",
        ])
        .map_err(ser)?;
        let rows = self
            .per_sample
            .iter()
            .map(|r| (r.id.as_str(), &r.report))
            .chain(std::iter::once(("aggregate", &self.aggregate)));
        for (id, r) in rows {
            let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
            let rec = [
                id.to_string(),
                r.acc.to_string(),
                r.recall.to_string(),
                r.specificity.to_string(),
                r.precision.to_string(),
                r.iou.to_string(),
                r.dsc.to_string(),
                auc,
                r.mcc.to_string(),
                r.counts.tp.to_string(),
                r.counts.tn.to_string(),
                r.counts.fp.to_string(),
                r.counts.fn_.to_string(),
            ];
            w.write_record(&rec).map_err(ser)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Evaluate every sample and micro-average over the successful ones.
///
/// A sample whose prediction fails is recorded in `failures` and excluded.
pub fn evaluate_dataset(
    model: &mut dyn Segmenter,
    samples: &[FundusSample],
    threshold: f64,
    icfg: &InvariantConfig,
    auc_mode: AucMode,
) -> Result<DatasetEvaluation> {
    let mut per_sample = Vec::new();
    let mut failures = Vec::new();
    let mut pooled = Vec::new();
    let mut image_aucs = Vec::new();
    for s in samples {
        let outcome = model.predict(s, icfg).and_then(|prob| {
            let counts = confusion(&prob, &s.vessel_mask, &s.fov_mask, threshold)?;
            let scores = fov_scores(&prob, &s.vessel_mask, &s.fov_mask);
            Ok((counts, scores))
        });
        match outcome {
            Ok((counts, scores)) => {
                let auc = auc_from_scores(&scores).ok();
                if let Some(a) = auc {
                    image_aucs.push(a);
                }
                if auc_mode == AucMode::Pooled {
                    pooled.extend(scores);
                }
                per_sample.push(SampleResult {
                    id: s.id.clone(),
                    report: MetricsReport::from_counts(counts, auc, threshold, vec![s.id.clone()]),
                });
            }
            Err(e) => {
                log::error!("{}: {e}", s.id);
                failures.push(SampleFailure {
                    id: s.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let counts: ConfusionCounts = per_sample.iter().map(|r| r.report.counts).sum();
    let auc = match auc_mode {
        AucMode::Pooled => auc_from_scores(&pooled).ok(),
        AucMode::PerImage if !image_aucs.is_empty() => Some(image_aucs.iter().sum::<f64>() / image_aucs.len() as f64),
        AucMode::PerImage => None,
    };
    let ids = per_sample.iter().map(|r| r.id.clone()).collect();
    Ok(DatasetEvaluation {
        aggregate: MetricsReport::from_counts(counts, auc, threshold, ids),
        per_sample,
        failures,
        auc_mode,
    })
}

/// TP white, FP red, FN blue, everything else black.
pub fn overlay(prob: &GrayField, gt: &BinaryMask, fov: &BinaryMask, threshold: f64) -> Result<ColorImage> {
    check_maps(prob, gt, fov)?;
    let (h, w) = (prob.height(), prob.width());
    Ok(ColorImage::from_fn(h, w, |y, x| {
        if !fov.get(y, x) {
            return [0.0; 3];
        }
        match (prob.get(y, x) >= threshold, gt.get(y, x)) {
            (true, true) => [1.0, 1.0, 1.0],
            (true, false) => [1.0, 0.0, 0.0],
            (false, true) => [0.0, 0.0, 1.0],
            (false, false) => [0.0, 0.0, 0.0],
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(v: &[f64]) -> GrayField {
        GrayField::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    fn mask(v: &[u8]) -> BinaryMask {
        BinaryMask::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn metric_hand_values() {
        let c = ConfusionCounts {
            tp: 5,
            tn: 90,
            fp: 3,
            fn_: 2,
        };
        let m = segmentation_metrics(&c);
        assert_eq!(m.acc, 0.95);
        assert!((m.recall - 5.0 / 7.0).abs() < 1e-15);
        assert!((m.precision - 5.0 / 8.0).abs() < 1e-15);
        assert_eq!(m.iou, 0.5);
        assert!((m.dsc - 2.0 / 3.0).abs() < 1e-15);
        assert!(m.degenerate.is_empty());

        let perfect = segmentation_metrics(&ConfusionCounts {
            tp: 4,
            tn: 6,
            fp: 0,
            fn_: 0,
        });
        assert_eq!(
            [
                perfect.acc,
                perfect.recall,
                perfect.specificity,
                perfect.precision,
                perfect.iou,
                perfect.dsc,
                perfect.mcc
            ],
            [1.0; 7]
        );

        let none = segmentation_metrics(&ConfusionCounts {
            tp: 0,
            tn: 6,
            fp: 0,
            fn_: 3,
        });
        assert_eq!((none.recall, none.specificity, none.mcc), (0.0, 1.0, 0.0));
        assert_eq!(none.degenerate, vec!["precision".to_string()]);
    }

    #[test]
    fn confusion_respects_fov_and_validates() {
        let p = field(&[0.9, 0.2, 0.7, 0.1]);
        let g = mask(&[1, 0, 0, 1]);
        let c = confusion(&p, &g, &mask(&[1, 1, 1, 1]), 0.5).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                tn: 1,
                fp: 1,
                fn_: 1
            }
        );
        let one = confusion(&p, &g, &mask(&[0, 0, 1, 0]), 0.5).unwrap();
        assert_eq!(one.total(), 1);
        assert!(confusion(&p, &g, &mask(&[0, 0, 0, 0]), 0.5).is_err());
        assert!(confusion(&p, &mask(&[1, 0]), &mask(&[1, 1, 1, 1]), 0.5).is_err());
    }

    #[test]
    fn auc_hand_cases() {
        let g = mask(&[1, 1, 1, 0, 0, 0]);
        let fov = mask(&[1; 6]);
        let p = field(&[0.9, 0.8, 0.4, 0.7, 0.3, 0.2]);
        assert!((roc_auc(&p, &g, &fov).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(roc_auc(&field(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]), &g, &fov).unwrap(), 1.0);
        assert_eq!(roc_auc(&field(&[0.3; 6]), &g, &fov).unwrap(), 0.5);
        let err = roc_auc(&p, &mask(&[1; 6]), &fov).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GrayField::from_fn(6, 6, |_, _| (rng.gen_range(0..10) as f64) / 10.0);
        let g = BinaryMask::from_fn(6, 6, |y, x| (y * 6 + x) % 3 == 0);
        let fov = BinaryMask::ones(6, 6);
        let a = roc_auc(&p, &g, &fov).unwrap();
        let b = roc_auc(&p.map(|v| (3.0 * v).exp() - 7.0), &g, &fov).unwrap();
        assert_eq!(a, b);
    }

    fn sample(id: &str, g: BinaryMask, fov: BinaryMask) -> FundusSample {
        let img = ColorImage::new(g.height(), g.width());
        FundusSample::new(id, img, g, fov).unwrap()
    }

    fn as_field(m: &BinaryMask) -> GrayField {
        GrayField::from_fn(m.height(), m.width(), |y, x| m.get(y, x) as u8 as f64)
    }

    #[test]
    fn oracle_model_scores_perfectly_and_micro_average_sums_counts() {
        let a = sample("a", BinaryMask::from_fn(8, 8, |y, x| y == x), BinaryMask::ones(8, 8));
        let b = sample(
            "b",
            BinaryMask::from_fn(8, 8, |y, _| y < 2),
            BinaryMask::from_fn(8, 8, |y, _| y < 6),
        );
        let icfg = InvariantConfig::default();
        let mut oracle = |s: &FundusSample| Ok(as_field(&s.vessel_mask));
        let ev = evaluate_dataset(&mut oracle, &[a.clone(), b.clone()], 0.5, &icfg, AucMode::Pooled).unwrap();
        let r = &ev.aggregate;
        assert_eq!(
            [r.acc, r.recall, r.specificity, r.precision, r.iou, r.dsc, r.mcc],
            [1.0; 7]
        );
        assert_eq!(r.auc, Some(1.0));

        let mut noisy = |s: &FundusSample| {
            Ok(GrayField::from_fn(8, 8, |y, x| {
                if (y + x) % 3 == 0 {
                    0.8
                } else {
                    s.vessel_mask.get(y, x) as u8 as f64 * 0.6
                }
            }))
        };
        let ev = evaluate_dataset(&mut noisy, &[a.clone(), b.clone()], 0.5, &icfg, AucMode::Pooled).unwrap();
        let summed = ev.per_sample[0].report.counts + ev.per_sample[1].report.counts;
        assert_eq!(ev.aggregate.counts, summed);
        assert_eq!(ev.aggregate.dsc, segmentation_metrics(&summed).dsc);

        let single = evaluate_dataset(&mut noisy, &[a], 0.5, &icfg, AucMode::Pooled).unwrap();
        assert_eq!(single.aggregate.counts, single.per_sample[0].report.counts);
        assert_eq!(single.aggregate.auc, single.per_sample[0].report.auc);
    }

    #[test]
    fn failing_samples_are_excluded_and_reported() {
        let a = sample("a", BinaryMask::from_fn(8, 8, |y, x| y == x), BinaryMask::ones(8, 8));
        let mut flaky = |s: &FundusSample| {
            if s.id == "bad" {
                Err(Error::Validation("boom".into()))
            } else {
                Ok(as_field(&s.vessel_mask))
            }
        };
        let mut bad = a.clone();
        bad.id = "bad".into();
        let ev = evaluate_dataset(
            &mut flaky,
            &[a, bad],
            0.5,
            &InvariantConfig::default(),
            AucMode::PerImage,
        )
        .unwrap();
        assert!(ev.is_partial());
        assert_eq!(ev.per_sample.len(), 1);
        assert_eq!(ev.aggregate.sample_ids, vec!["a".to_string()]);
    }

    #[test]
    fn overlay_colors() {
        let p = field(&[0.9, 0.9, 0.1, 0.1]);
        let g = mask(&[1, 0, 1, 0]);
        let o = overlay(&p, &g, &mask(&[1, 1, 1, 1]), 0.5).unwrap();
        let px = |x| [o.get(0, 0, x), o.get(1, 0, x), o.get(2, 0, x)];
        assert_eq!(
            [px(0), px(1), px(2), px(3)],
            [[1.0; 3], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0; 3]]
        );
    }
}
