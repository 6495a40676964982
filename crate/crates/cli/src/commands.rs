use std::path::{Path, PathBuf};
use std::time::Instant;

use deffa_core::csa::{augment_sample, derive_seed, reference_stats, AugmentConfig, ChannelStats};
use deffa_core::eval::harness::{write_ablation_csv, write_cross_domain_csv};
use deffa_core::eval::{
    ablation_run, cross_domain_eval, evaluate_dataset, overlay, AblationConfig, AucMode, Segmenter, Variant,
};
use deffa_core::imaging::{load_dataset, load_dataset_with_fov, resize_sample, save_color_png, save_sample};
use deffa_core::invariant::{make_invariant_input, normalize_min_max};
use deffa_core::jesb::balance_dataset;
use deffa_core::model::checkpoint::{self, Checkpoint};
use deffa_core::train::{train_with, CheckpointHook};
use deffa_core::{DeffaNet, Error, FundusSample, PipelineConfig, Result, RunManifest};
use log::{info, warn};
use serde_json::{json, Value};

use crate::{Cli, Command};

pub enum Status {
    Complete,
    /// Some samples could not be scored.
    Partial,
}

const MODEL_FILE: &str = "model.ckpt";

/// Collects outputs and writes the run manifest when the command finishes.
struct Run {
    manifest: RunManifest,
    out: PathBuf,
    started: Instant,
}

impl Run {
    fn start(command: &str, cfg: &PipelineConfig, seed: u64, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let snapshot = serde_json::to_value(cfg).map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(Run {
            manifest: RunManifest::new(command, snapshot, seed),
            out: out.to_path_buf(),
            started: Instant::now(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.add_input(path)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.manifest.output_paths.push(p.clone());
        p
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_time = self.started.elapsed().as_secs_f64();
        let path = self.manifest.write(&self.out)?;
        info!("manifest written to {}", path.display());
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(path) => PipelineConfig::load(path),
        None => Ok(PipelineConfig::default()),
    }
}

fn resized(samples: Vec<FundusSample>, size: [usize; 2]) -> Result<Vec<FundusSample>> {
    samples
        .into_iter()
        .map(|s| {
            if (s.height(), s.width()) == (size[0], size[1]) {
                Ok(s)
            } else {
                resize_sample(&s, (size[0], size[1]))
            }
        })
        .collect()
}

/// Model plus the pipeline configuration it was trained with.
fn load_model(path: &Path, fallback: &PipelineConfig) -> Result<(DeffaNet<f32>, PipelineConfig, Value)> {
    let Checkpoint { model, manifest } = checkpoint::load::<f32>(path, None)?;
    let cfg = match manifest.get("config") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: stored config: {e}", path.display())))?,
        None => fallback.clone(),
    };
    Ok((model, cfg, manifest))
}

pub fn run(cli: &Cli) -> Result<Status> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Prep(a) => {
            if let Some(w) = a.window {
                cfg.invariant.window_size = w;
            }
            if let Some(v) = a.alpha_enh {
                cfg.invariant.alpha_enh = v;
            }
            if a.no_normalize {
                cfg.invariant.normalize_output = false;
            }
            cfg.validate()?;
            let mut run = Run::start("prep", &cfg, 0, &a.out)?;
            run.input(&a.data.data)?;
            for s in load_dataset(&a.data.data)? {
                let field = make_invariant_input(&s, &cfg.invariant)?;
                // PNG needs [0, 1]; unnormalized fields are rescaled for viewing only.
                let field = if cfg.invariant.normalize_output {
                    field
                } else {
                    normalize_min_max(&field)
                };
                field.save_png(&run.output(&format!("{}__invariant.png", s.id)))?;
            }
            run.finish()?;
        }
        Command::Stats(a) => {
            cfg.validate()?;
            let mut run = Run::start("stats", &cfg, 0, &a.out)?;
            run.input(&a.data.data)?;
            let samples = load_dataset(&a.data.data)?;
            let name = a.name.clone().unwrap_or_else(|| dir_name(&a.data.data));
            let stats = reference_stats(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), &name)?;
            info!("{name}: mean {:?}, std {:?}", stats.mean, stats.std);
            stats.save(&run.output("stats.json"))?;
            run.finish()?;
        }
        Command::Balance(a) => {
            if a.kmax.is_some() {
                cfg.balance.k_max = a.kmax;
            }
            if let Some(s) = a.seed {
                cfg.balance.seed = s;
            }
            cfg.validate()?;
            let mut run = Run::start("balance", &cfg, cfg.balance.seed, &a.out)?;
            run.input(&a.data.data)?;
            let samples = load_dataset(&a.data.data)?;
            let balanced = balance_dataset(&samples, cfg.balance.k_max, cfg.balance.seed, &cfg.balance.synthesis)?;
            match &balanced.model {
                Some(m) => info!(
                    "k* = {}, cluster sizes {:?}, {} synthetics",
                    m.k_star,
                    m.sizes,
                    m.synthetic_count()
                ),
                None => warn!("balancing skipped; the dataset is copied unchanged"),
            }
            for s in &balanced.samples {
                save_sample(s, &a.out)?;
            }
            run.manifest
                .output_paths
                .extend(["images", "masks", "fov"].map(|d| a.out.join(d)));
            if a.report {
                write_json(&run.output("cluster_report.json"), &balanced.model)?;
            }
            run.finish()?;
        }
        Command::Augment(a) => {
            if let Some(v) = a.alpha_min {
                cfg.augment.alpha_range[0] = v;
            }
            if let Some(v) = a.alpha_max {
                cfg.augment.alpha_range[1] = v;
            }
            if let Some(r) = a.rot {
                if r < 0.0 {
                    return Err(Error::Validation(format!("--rot must be non-negative, got {r}")));
                }
                cfg.augment.rotation_degrees = [-r, r];
            }
            if let Some(s) = a.seed {
                cfg.augment.seed = s;
            }
            cfg.validate()?;
            let mut run = Run::start("augment", &cfg, cfg.augment.seed, &a.out)?;
            run.input(&a.data.data)?;
            let samples = load_dataset(&a.data.data)?;
            let stats = match &a.ref_stats {
                Some(p) => {
                    run.input(p)?;
                    ChannelStats::load(p)?
                }
                None => reference_stats(
                    &samples.iter().map(|s| &s.image).collect::<Vec<_>>(),
                    &dir_name(&a.data.data),
                )?,
            };
            for (i, s) in samples.iter().enumerate() {
                save_sample(s, &a.out)?;
                for j in 0..a.count {
                    let acfg = AugmentConfig {
                        seed: derive_seed(cfg.augment.seed, (i * a.count + j) as u64),
                        ..cfg.augment.clone()
                    };
                    save_sample(&augment_sample(s, &stats, &acfg)?, &a.out)?;
                }
            }
            info!(
                "{} originals, {} augmented copies",
                samples.len(),
                samples.len() * a.count
            );
            run.manifest
                .output_paths
                .extend(["images", "masks", "fov"].map(|d| a.out.join(d)));
            run.finish()?;
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = a.learning_rate {
                t.learning_rate = v;
            }
            if let Some(v) = a.seed {
                t.seed = v;
            }
            if let Some(v) = a.val_fraction {
                t.val_fraction = v;
            }
            if let Some(v) = a.checkpoint_every {
                t.checkpoint_every = v;
            }
            if let Some(v) = a.image_size {
                t.image_size = v;
            }
            cfg.validate()?;
            let mut run = Run::start("train", &cfg, cfg.train.seed, &a.out)?;
            run.input(&a.data.data)?;
            let samples = resized(load_dataset(&a.data.data)?, cfg.train.image_size)?;
            let stats = match &a.ref_stats {
                Some(p) => {
                    run.input(p)?;
                    Some(ChannelStats::load(p)?)
                }
                None => None,
            };
            let mut model = match &a.resume {
                Some(p) => {
                    run.input(p)?;
                    checkpoint::load::<f32>(p, Some(&cfg.model))?.model
                }
                None => DeffaNet::<f32>::new(cfg.model.clone(), cfg.train.seed)?,
            };
            let ckpt_manifest = json!({
                "config": run.manifest.config_snapshot,
                "trained_on": dir_name(&a.data.data),
                "seed": cfg.train.seed,
            });
            let mut hook = CheckpointHook {
                dir: a.out.clone(),
                every: cfg.train.checkpoint_every,
                manifest: ckpt_manifest.clone(),
                written: Vec::new(),
            };
            let history = train_with(
                &mut model,
                &samples,
                stats.as_ref(),
                &cfg.train,
                &cfg.loss,
                &cfg.invariant,
                &mut hook,
            )?;
            if let Some(last) = history.epochs.last() {
                info!("finished {} epochs, final loss {:.4}", last.epoch, last.loss);
            }
            run.manifest.output_paths.extend(hook.written);
            checkpoint::save(&model, &ckpt_manifest, &run.output(MODEL_FILE))?;
            history.write_csv(&run.output("history.csv"))?;
            run.finish()?;
        }
        Command::Eval(a) => {
            let (mut model, mut mcfg, _) = load_model(&a.model, &cfg)?;
            if let Some(t) = a.threshold {
                mcfg.eval.threshold = t;
            }
            if a.per_image_auc {
                mcfg.eval.auc_mode = AucMode::PerImage;
            }
            mcfg.validate()?;
            let mut run = Run::start("eval", &mcfg, 0, &a.out)?;
            run.input(&a.model)?;
            run.input(&a.data.data)?;
            if let Some(f) = &a.fov {
                if !f.is_dir() {
                    return Err(Error::Validation(format!(
                        "FOV directory {} does not exist",
                        f.display()
                    )));
                }
                run.input(f)?;
            }
            let mut samples = load_dataset_with_fov(&a.data.data, a.fov.as_deref())?;
            if !a.native_size {
                samples = resized(samples, mcfg.train.image_size)?;
            }
            let ev = evaluate_dataset(
                &mut model,
                &samples,
                mcfg.eval.threshold,
                &mcfg.invariant,
                mcfg.eval.auc_mode,
            )?;
            let m = &ev.aggregate;
            info!(
                "DSC {:.4}  Acc {:.4}  Re {:.4}  Sp {:.4}  Pr {:.4}  MCC {:.4}  AUC {}",
                m.dsc,
                m.acc,
                m.recall,
                m.specificity,
                m.precision,
                m.mcc,
                m.auc.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            write_json(&run.output("metrics.json"), &ev)?;
            ev.write_csv(&run.output("per_sample.csv"))?;
            if a.save_predictions {
                let failed: Vec<&str> = ev.failures.iter().map(|f| f.id.as_str()).collect();
                for s in samples.iter().filter(|s| !failed.contains(&s.id.as_str())) {
                    let prob = model.predict(s, &mcfg.invariant)?;
                    prob.save_png(&run.output(&format!("{}__prob.png", s.id)))?;
                }
            }
            run.finish()?;
            if ev.is_partial() {
                warn!("{} of {} samples failed", ev.failures.len(), samples.len());
                return Ok(Status::Partial);
            }
        }
        Command::Crossval(a) => {
            let (mut model, mut mcfg, manifest) = load_model(&a.model, &cfg)?;
            if let Some(t) = a.threshold {
                mcfg.eval.threshold = t;
            }
            mcfg.validate()?;
            let trained_on = a
                .trained_on
                .clone()
                .or_else(|| manifest.get("trained_on").and_then(Value::as_str).map(String::from))
                .unwrap_or_else(|| "source".into());
            let mut run = Run::start("crossval", &mcfg, 0, &a.out)?;
            run.input(&a.model)?;
            let mut targets = Vec::with_capacity(a.targets.len());
            for spec in &a.targets {
                let (name, dir) = match spec.split_once('=') {
                    Some((n, d)) => (n.to_string(), PathBuf::from(d)),
                    None => (dir_name(Path::new(spec)), PathBuf::from(spec)),
                };
                run.input(&dir)?;
                targets.push((name, resized(load_dataset(&dir)?, mcfg.train.image_size)?));
            }
            let rows = cross_domain_eval(
                &mut model,
                &trained_on,
                &targets,
                mcfg.eval.threshold,
                &mcfg.invariant,
                mcfg.eval.auc_mode,
            )?;
            for r in &rows {
                info!(
                    "{} -> {}: DSC {:.4}, MCC {:.4}",
                    r.trained_on, r.tested_on, r.dsc, r.mcc
                );
            }
            write_cross_domain_csv(&rows, &run.output("crossval.csv"))?;
            write_json(&run.output("crossval.json"), &rows)?;
            let partial = rows.iter().any(|r| r.evaluation.is_partial());
            run.finish()?;
            if partial {
                return Ok(Status::Partial);
            }
        }
        Command::Ablate(a) => {
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.seed {
                cfg.train.seed = v;
            }
            if let Some(v) = a.image_size {
                cfg.train.image_size = v;
            }
            cfg.validate()?;
            let variants = if a.variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                a.variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?
            };
            let mut run = Run::start("ablate", &cfg, cfg.train.seed, &a.out)?;
            run.input(&a.data.data)?;
            let size = cfg.train.image_size;
            let train_set = resized(load_dataset(&a.data.data)?, size)?;
            let eval_set = match &a.eval_data {
                Some(d) => {
                    run.input(d)?;
                    Some(resized(load_dataset(d)?, size)?)
                }
                None => None,
            };
            let acfg = AblationConfig {
                train: cfg.train.clone(),
                loss: cfg.loss.clone(),
                invariant: cfg.invariant.clone(),
                model_seed: cfg.train.seed,
                threshold: cfg.eval.threshold,
                k_max: cfg.balance.k_max,
                synthesis: cfg.balance.synthesis.clone(),
                augment: cfg.augment.clone(),
                augment_copies: a.copies,
                reference: None,
            };
            let rows = ablation_run(&train_set, eval_set.as_deref(), &variants, &acfg)?;
            write_ablation_csv(&rows, &run.output("ablation.csv"))?;
            write_json(&run.output("ablation.json"), &rows)?;
            run.finish()?;
        }
        Command::Overlay(a) => {
            let (mut model, mut mcfg, _) = load_model(&a.model, &cfg)?;
            if let Some(t) = a.threshold {
                mcfg.eval.threshold = t;
            }
            mcfg.validate()?;
            let mut run = Run::start("overlay", &mcfg, 0, &a.out)?;
            run.input(&a.model)?;
            run.input(&a.data.data)?;
            for s in resized(load_dataset(&a.data.data)?, mcfg.train.image_size)? {
                let prob = model.predict(&s, &mcfg.invariant)?;
                let img = overlay(&prob, &s.vessel_mask, &s.fov_mask, mcfg.eval.threshold)?;
                save_color_png(&img, &run.output(&format!("{}__overlay.png", s.id)))?;
            }
            run.finish()?;
        }
    }
    Ok(Status::Complete)
}
