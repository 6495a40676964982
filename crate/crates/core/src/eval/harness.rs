//! Cross-domain and ablation tables.

use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::{evaluate_dataset, AucMode, DatasetEvaluation, Segmenter};
use crate::csa::{augment_sample, derive_seed, reference_stats, AugmentConfig, ChannelStats};
use crate::error::{ensure, Error, Result};
use crate::imaging::FundusSample;
use crate::invariant::InvariantConfig;
use crate::jesb::{balance_dataset, SynthesisConfig};
use crate::model::{BottleneckFusion, DecoderBlock, DeffaNet, ModelConfig};
use crate::train::{train, LossConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainRow {
    pub trained_on: String,
    pub tested_on: String,
    pub dsc: f64,
    pub auc: Option<f64>,
    pub mcc: f64,
    pub evaluation: DatasetEvaluation,
}

/// Evaluate one trained model on every target dataset in full.
pub fn cross_domain_eval(
    model: &mut dyn Segmenter,
    source_name: &str,
    targets: &[(String, Vec<FundusSample>)],
    threshold: f64,
    icfg: &InvariantConfig,
    auc_mode: AucMode,
) -> Result<Vec<CrossDomainRow>> {
    targets
        .iter()
        .map(|(name, samples)| {
            let ev = evaluate_dataset(model, samples, threshold, icfg, auc_mode)?;
            Ok(CrossDomainRow {
                trained_on: source_name.to_string(),
                tested_on: name.clone(),
                dsc: ev.aggregate.dsc,
                auc: ev.aggregate.auc,
                mcc: ev.aggregate.mcc,
                evaluation: ev,
            })
        })
        .collect()
}

pub fn write_cross_domain_csv(rows: &[CrossDomainRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(["trained_on", "tested_on", "DSC", "AUC", "MCC"])
        .map_err(ser)?;
    for r in rows {
        let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([
            r.trained_on.clone(),
            r.tested_on.clone(),
            r.dsc.to_string(),
            auc,
            r.mcc.to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ablation rows, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    ResIncept,
    Fff,
    Frf,
    NoCsa,
    NoJesb,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::ResIncept,
        Variant::Fff,
        Variant::Frf,
        Variant::NoCsa,
        Variant::NoJesb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::ResIncept => "+resincept",
            Variant::Fff => "+fff",
            Variant::Frf => "+frf",
            Variant::NoCsa => "no_csa",
            Variant::NoJesb => "no_jesb",
        }
    }

    /// Each architecture row adds one module to the previous row; the data
    /// rows use the full model.
    pub fn model_config(self) -> ModelConfig {
        let base = ModelConfig::baseline();
        match self {
            Variant::Baseline => base,
            Variant::ResIncept => ModelConfig {
                decoder_block: DecoderBlock::ResInception,
                ..base
            },
            Variant::Fff => ModelConfig {
                decoder_block: DecoderBlock::ResInception,
                bottleneck_fusion: BottleneckFusion::FeatureFiltering,
                ..base
            },
            Variant::Frf | Variant::NoCsa | Variant::NoJesb => ModelConfig::default(),
        }
    }

    pub fn uses_csa(self) -> bool {
        self != Variant::NoCsa
    }

    pub fn uses_jesb(self) -> bool {
        self != Variant::NoJesb
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().trim_start_matches('+').to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name().trim_start_matches('+') == key)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown ablation variant {s:?} (expected one of {})",
                    Variant::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub invariant: InvariantConfig,
    pub model_seed: u64,
    pub threshold: f64,
    pub k_max: Option<usize>,
    pub synthesis: SynthesisConfig,
    pub augment: AugmentConfig,
    /// Color-statistics copies added per source sample.
    pub augment_copies: usize,
    /// Reference statistics; the training set's own when absent.
    pub reference: Option<ChannelStats>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            invariant: InvariantConfig::default(),
            model_seed: 0,
            threshold: super::DEFAULT_THRESHOLD,
            k_max: None,
            synthesis: SynthesisConfig::default(),
            augment: AugmentConfig::default(),
            augment_copies: 1,
            reference: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub precision: f64,
    pub dsc: f64,
    pub auc: Option<f64>,
    pub mcc: f64,
    pub train_samples: usize,
}

/// Training set after the enabled data stages.
pub fn prepare_training_set(
    samples: &[FundusSample],
    variant: Variant,
    cfg: &AblationConfig,
) -> Result<Vec<FundusSample>> {
    let mut data = if variant.uses_jesb() {
        balance_dataset(samples, cfg.k_max, cfg.train.seed, &cfg.synthesis)?.samples
    } else {
        samples.to_vec()
    };
    if variant.uses_csa() && cfg.augment_copies > 0 {
        let stats = match &cfg.reference {
            Some(s) => s.clone(),
            None => reference_stats(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), "training set")?,
        };
        let originals = data.len();
        for i in 0..originals {
            for j in 0..cfg.augment_copies {
                let acfg = AugmentConfig {
                    seed: derive_seed(cfg.augment.seed, (i * cfg.augment_copies + j) as u64),
                    ..cfg.augment.clone()
                };
                let aug = augment_sample(&data[i], &stats, &acfg)?;
                data.push(aug);
            }
        }
    }
    Ok(data)
}

/// Train and score every variant with the same seeds and configuration.
///
/// Scores come from `eval_set`, or from the training samples when it is `None`.
pub fn ablation_run(
    train_set: &[FundusSample],
    eval_set: Option<&[FundusSample]>,
    variants: &[Variant],
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    ensure!(!train_set.is_empty(), "ablation needs training samples");
    let eval_set = eval_set.unwrap_or(train_set);
    let tcfg = TrainConfig {
        augment_probability: 0.0,
        ..cfg.train.clone()
    };
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let data = prepare_training_set(train_set, v, cfg)?;
        let mut model = DeffaNet::<f32>::new(v.model_config(), cfg.model_seed)?;
        train(&mut model, &data, None, &tcfg, &cfg.loss, &cfg.invariant)?;
        let ev = evaluate_dataset(&mut model, eval_set, cfg.threshold, &cfg.invariant, AucMode::Pooled)?;
        info!("ablation {v}: dsc {:.4}", ev.aggregate.dsc);
        rows.push(AblationRow {
            variant: v.name().to_string(),
            precision: ev.aggregate.precision,
            dsc: ev.aggregate.dsc,
            auc: ev.aggregate.auc,
            mcc: ev.aggregate.mcc,
            train_samples: data.len(),
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(["variant", "Pr", "DSC", "AUC", "MCC"]).map_err(ser)?;
    for r in rows {
        let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([
            r.variant.clone(),
            r.precision.to_string(),
            r.dsc.to_string(),
            auc,
            r.mcc.to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("resincept".parse::<Variant>().unwrap(), Variant::ResIncept);
        assert_eq!("no-csa".parse::<Variant>().unwrap(), Variant::NoCsa);
        assert!("+attention".parse::<Variant>().unwrap_err().is_validation());
    }

    #[test]
    fn architecture_rows_add_one_module_each() {
        let b = Variant::Baseline.model_config();
        assert_eq!(b, ModelConfig::baseline());
        assert_eq!(
            Variant::ResIncept.model_config().decoder_block,
            DecoderBlock::ResInception
        );
        assert_eq!(
            Variant::Fff.model_config().bottleneck_fusion,
            BottleneckFusion::FeatureFiltering
        );
        assert_eq!(Variant::Frf.model_config(), ModelConfig::default());
        assert!(!Variant::NoCsa.uses_csa() && Variant::NoCsa.uses_jesb());
        assert!(!Variant::NoJesb.uses_jesb() && Variant::NoJesb.uses_csa());
    }
}
