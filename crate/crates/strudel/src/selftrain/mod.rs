//! The iterative self-training orchestrator and its baselines.
//!
//! One iteration: draw a target subset without replacement, initialize pseudo
//! labels by OR-fusing the previous model's mask with the auxiliary mask,
//! fine-tune the previous model on fixed-plus-pseudo data, refresh the labels
//! and per-pixel uncertainty from MC-dropout statistics of the fine-tuned
//! model, retrain a fresh model with the uncertainty-routed loss, and append
//! the retrained model's predictions on the subset to the fixed set.

pub mod artifacts;
mod history;
mod pool;

pub use history::{EvalSummary, IterationRecord, RunHistory};
pub use pool::{GuardedMasks, TargetPool, TrainEntry, TrainingPool};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, checkpoint, BackboneSpec, EpochLoss, ModelParams, TrainOptions};
use crate::dataset::{io as dataset_io, ImageSample};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::loss::LossConfig;
use crate::metrics::{self, MetricReport};
use crate::pseudo::{
    self, AuxSegmenterConfig, Provenance, PseudoLabel, AUX_THRESHOLD, NETWORK_THRESHOLD,
};
use crate::seed;
use crate::uncertainty;

/// Hyperparameters of the self-training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrudelConfig {
    /// Number of self-training iterations (K).
    pub iterations: usize,
    /// Target samples drawn per iteration (P).
    pub subset_size: usize,
    /// Stochastic forward passes for uncertainty estimation (C).
    pub mc_passes: usize,
    /// Binarization threshold for network probability maps.
    pub network_threshold: f64,
    /// Binarization threshold for the auxiliary segmenter during fusion.
    pub aux_threshold: f64,
    /// Epochs when training from scratch (base model and retraining).
    pub epochs_scratch: usize,
    /// Epochs when fine-tuning.
    pub epochs_finetune: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Zeroes every uncertainty map entering the loss (the self-training
    /// ablation path).
    pub force_zero_uncertainty: bool,
}

impl Default for StrudelConfig {
    fn default() -> Self {
        StrudelConfig {
            iterations: 5,
            subset_size: 8,
            mc_passes: 10,
            network_threshold: NETWORK_THRESHOLD,
            aux_threshold: AUX_THRESHOLD,
            epochs_scratch: 40,
            epochs_finetune: 10,
            lr: 1e-4,
            batch_size: 4,
            seed: 0,
            force_zero_uncertainty: false,
        }
    }
}

impl StrudelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations (K) must be >= 1".to_string()));
        }
        if self.subset_size == 0 {
            return Err(Error::Config("subset_size (P) must be >= 1".to_string()));
        }
        if self.mc_passes < 2 {
            return Err(Error::Config("mc_passes (C) must be >= 2".to_string()));
        }
        for (name, t) in [
            ("network_threshold", self.network_threshold),
            ("aux_threshold", self.aux_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {t}")));
            }
        }
        if self.epochs_scratch == 0 || self.epochs_finetune == 0 {
            return Err(Error::Config("epoch counts must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }

    /// The paper-scale profile (kept available behind the desk defaults).
    pub fn paper_scale() -> Self {
        StrudelConfig {
            subset_size: 35,
            epochs_scratch: 80,
            epochs_finetune: 20,
            ..Self::default()
        }
    }

    fn train_opts(&self, epochs: usize, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// Labeled held-out target samples, used only for evaluation.
#[derive(Debug, Clone)]
pub struct EvalSet {
    samples: Vec<ImageSample>,
}

impl EvalSet {
    pub fn new(samples: Vec<ImageSample>) -> Result<Self> {
        for s in &samples {
            if s.mask.is_none() {
                return Err(Error::Config(format!(
                    "eval sample '{}' has no ground truth",
                    s.id
                )));
            }
        }
        Ok(EvalSet { samples })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Which pipeline variant runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Uncertainty-guided self-training with auxiliary fusion.
    Strudel,
    /// Plain self-training: same loop, uncertainty forced to zero.
    SelfTraining,
    /// Uncertainty-guided, but pseudo labels come from the model alone.
    StrudelNoAux,
}

impl Variant {
    pub fn uses_uncertainty(self) -> bool {
        matches!(self, Variant::Strudel | Variant::StrudelNoAux)
    }

    pub fn uses_aux(self) -> bool {
        matches!(self, Variant::Strudel | Variant::SelfTraining)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Strudel => "strudel",
            Variant::SelfTraining => "selftrain",
            Variant::StrudelNoAux => "strudel_no_aux",
        }
    }
}

/// Everything a run needs besides the loop hyperparameters.
pub struct RunSetup<'a> {
    pub backbone: BackboneSpec,
    pub loss: LossConfig,
    /// Labeled, normalized source samples.
    pub source: &'a [ImageSample],
    /// Held-out labeled target samples for per-iteration metrics.
    pub eval: Option<&'a EvalSet>,
    pub aux: AuxSegmenterConfig,
    /// When set, checkpoints, pseudo labels, uncertainty maps, and loss
    /// traces are persisted here.
    pub run_dir: Option<&'a Path>,
    /// Restart from the last complete iteration found in `run_dir`.
    pub resume: bool,
}

pub struct RunOutput {
    pub model: ModelParams,
    pub history: RunHistory,
    /// Per-sample held-out metrics of the final model.
    pub final_eval: Option<Vec<(String, MetricReport)>>,
}

/// Trains the base model: standard supervised learning on source only.
pub fn train_base(
    source: &[ImageSample],
    spec: &BackboneSpec,
    loss: &LossConfig,
    cfg: &StrudelConfig,
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    if source.is_empty() {
        return Err(Error::Config("source set is empty".to_string()));
    }
    let pool = TrainingPool::from_labeled(source)?;
    let init = backbone::init_model(spec, seed::derive(cfg.seed, "init-base", 0))?;
    backbone::train(
        &init,
        &pool,
        loss,
        &cfg.train_opts(cfg.epochs_scratch, seed::derive(cfg.seed, "train-base", 0)),
    )
}

pub fn run_strudel(
    cfg: &StrudelConfig,
    setup: &RunSetup,
    target: TargetPool,
) -> Result<RunOutput> {
    run_pipeline(Variant::Strudel, cfg, setup, target)
}

pub fn run_self_training(
    cfg: &StrudelConfig,
    setup: &RunSetup,
    target: TargetPool,
) -> Result<RunOutput> {
    run_pipeline(Variant::SelfTraining, cfg, setup, target)
}

pub fn run_strudel_no_aux(
    cfg: &StrudelConfig,
    setup: &RunSetup,
    target: TargetPool,
) -> Result<RunOutput> {
    run_pipeline(Variant::StrudelNoAux, cfg, setup, target)
}

/// Supervised training on the union of source and a labeled target subset.
pub fn run_joint(
    source: &[ImageSample],
    labeled_target: &[ImageSample],
    spec: &BackboneSpec,
    loss: &LossConfig,
    cfg: &StrudelConfig,
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    let mut all: Vec<ImageSample> = source.to_vec();
    all.extend(labeled_target.iter().cloned());
    let pool = TrainingPool::from_labeled(&all)?;
    let init = backbone::init_model(spec, seed::derive(cfg.seed, "init-joint", 0))?;
    backbone::train(
        &init,
        &pool,
        loss,
        &cfg.train_opts(cfg.epochs_scratch, seed::derive(cfg.seed, "train-joint", 0)),
    )
}

/// Fine-tunes a base model on a labeled target subset.
pub fn run_finetune(
    base: &ModelParams,
    labeled_target: &[ImageSample],
    loss: &LossConfig,
    cfg: &StrudelConfig,
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    let pool = TrainingPool::from_labeled(labeled_target)?;
    backbone::train(
        base,
        &pool,
        loss,
        &cfg.train_opts(
            cfg.epochs_finetune,
            seed::derive(cfg.seed, "train-finetune-baseline", 0),
        ),
    )
}

/// Dropout-off evaluation of a model on a labeled set.
pub fn evaluate_model(
    model: &ModelParams,
    eval: &EvalSet,
    threshold: f64,
) -> Result<(Vec<(String, MetricReport)>, EvalSummary)> {
    let mut rng = seed::rng(0, "eval", 0); // unused: dropout off
    let images: Vec<Grid> = eval.samples.iter().map(|s| s.image.clone()).collect();
    let probs = backbone::forward(model, &images, false, &mut rng)?;
    let mut rows = Vec::with_capacity(eval.len());
    for (sample, prob) in eval.samples.iter().zip(probs.iter()) {
        let pred = pseudo::binarize(prob, threshold)?;
        let report = metrics::evaluate(&pred, sample.mask.as_ref().expect("eval is labeled"))?;
        rows.push((sample.id.clone(), report));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    let s = metrics::summarize(&reports);
    Ok((
        rows,
        EvalSummary {
            dsc: s.dsc_mean,
            h95: s.h95_mean,
            lavd: s.lavd_mean,
            recall: s.recall_mean,
            f1: s.f1_mean,
        },
    ))
}

fn iter_dir_name(k: usize) -> String {
    format!("iter_{k:02}")
}

fn run_pipeline(
    variant: Variant,
    cfg: &StrudelConfig,
    setup: &RunSetup,
    mut target: TargetPool,
) -> Result<RunOutput> {
    cfg.validate()?;
    setup.backbone.validate()?;
    setup.loss.validate()?;
    if cfg.iterations * cfg.subset_size > target.remaining() {
        return Err(Error::Config(format!(
            "K*P = {} exceeds the target pool size {}",
            cfg.iterations * cfg.subset_size,
            target.remaining()
        )));
    }
    let use_uncertainty = variant.uses_uncertainty() && !cfg.force_zero_uncertainty;
    let aux_cfg = variant.uses_aux().then_some(&setup.aux);

    if let Some(dir) = setup.run_dir {
        fs::create_dir_all(dir)?;
    }

    // --- base model and fixed set, possibly resumed ---
    let mut history;
    let mut model;
    let mut dfix = TrainingPool::from_labeled(setup.source)?;
    let mut start_k = 1usize;

    let history_path = setup.run_dir.map(|d| d.join("history.json"));
    let resumable = setup.resume
        && history_path
            .as_ref()
            .map(|p| p.exists())
            .unwrap_or(false);

    if resumable {
        let dir = setup.run_dir.expect("resume requires a run directory");
        history = RunHistory::load(history_path.as_ref().unwrap())?;
        if history.variant != variant.name() || history.seed != cfg.seed {
            return Err(Error::Config(format!(
                "cannot resume: run directory holds variant '{}' seed {}",
                history.variant, history.seed
            )));
        }
        let k0 = history.last_complete().min(cfg.iterations);
        history.iterations.retain(|r| r.complete && r.iteration <= k0);
        model = if k0 == 0 {
            checkpoint::load(&dir.join("checkpoint_base.bin"))?
        } else {
            checkpoint::load(&dir.join(iter_dir_name(k0)).join("checkpoint.bin"))?
        };
        // replay pool draws and rebuild the fixed set from persisted masks
        for k in 1..=k0 {
            let record = history
                .iterations
                .iter()
                .find(|r| r.iteration == k)
                .ok_or_else(|| {
                    Error::Format(format!("history is missing complete iteration {k}"))
                })?
                .clone();
            let subset = target.sample_subset(
                cfg.subset_size,
                &mut seed::rng(cfg.seed, "subset", k as u64),
            )?;
            let drawn: Vec<&str> = subset.iter().map(|s| s.id.as_str()).collect();
            let recorded: Vec<&str> = record.subset_ids.iter().map(|s| s.as_str()).collect();
            if drawn != recorded {
                return Err(Error::Format(format!(
                    "resume replay mismatch at iteration {k}: drew {drawn:?}, recorded {recorded:?}"
                )));
            }
            for s in subset {
                let mask_path = dir
                    .join(iter_dir_name(k))
                    .join("dfix")
                    .join(format!("{}.png", s.id));
                let mask = dataset_io::read_mask_png(&mask_path)?;
                dfix.add_fixed(s, mask)?;
            }
        }
        start_k = k0 + 1;
    } else {
        let (base, base_trace) = train_base(setup.source, &setup.backbone, &setup.loss, cfg)?;
        history = RunHistory::new(cfg.seed, variant.name());
        history.base_trace = base_trace;
        if let Some(eval) = setup.eval {
            history.base_eval = Some(evaluate_model(&base, eval, cfg.network_threshold)?.1);
        }
        if let Some(dir) = setup.run_dir {
            checkpoint::save(&base, &dir.join("checkpoint_base.bin"))?;
            artifacts::write_loss_csv(&dir.join("loss_base.csv"), &history.base_trace)?;
            history.save(history_path.as_ref().unwrap())?;
        }
        model = base;
    }

    // --- the self-training loop ---
    for k in start_k..=cfg.iterations {
        let step = (|| -> Result<(ModelParams, IterationRecord)> {
            let subset = target.sample_subset(
                cfg.subset_size,
                &mut seed::rng(cfg.seed, "subset", k as u64),
            )?;
            let subset_ids: Vec<String> = subset.iter().map(|s| s.id.clone()).collect();
            let mut provenance_counts: BTreeMap<String, usize> = BTreeMap::new();

            // initialize pseudo labels (OR fusion, or model-only without aux)
            let mut labels = pseudo::init_pseudo_labels(&model, aux_cfg, &subset, k)?;
            *provenance_counts
                .entry(Provenance::FusedInit.to_string())
                .or_default() += labels.len();

            // fine-tune the previous model on fixed + fused pseudo labels
            let mut ft_pool = dfix.clone();
            ft_pool.set_pseudo_for_finetune(
                subset.iter().cloned().zip(labels.iter().cloned()).collect(),
            )?;
            let (finetuned, finetune_trace) = backbone::train(
                &model,
                &ft_pool,
                &setup.loss,
                &cfg.train_opts(
                    cfg.epochs_finetune,
                    seed::derive(cfg.seed, "train-finetune", k as u64),
                ),
            )?;

            // refresh labels and uncertainty from MC statistics
            let mc_base = seed::derive(cfg.seed, "mc", k as u64);
            let mut sigmas: Vec<Grid> = Vec::with_capacity(subset.len());
            let mut raw_sigmas: Vec<Grid> = Vec::with_capacity(subset.len());
            for (i, sample) in subset.iter().enumerate() {
                let mc = uncertainty::mc_sample(
                    &finetuned,
                    &sample.image,
                    cfg.mc_passes,
                    seed::derive(mc_base, "sample", i as u64),
                )?;
                let expect = uncertainty::expectation(&mc);
                let refreshed = pseudo::binarize(&expect, cfg.network_threshold)?;
                labels[i].advance(refreshed, Provenance::McRefreshed)?;
                let umap = uncertainty::variance_map(&mc);
                raw_sigmas.push(umap.raw);
                sigmas.push(if use_uncertainty {
                    umap.rescaled
                } else {
                    Grid::zeros(sample.image.raw_dim())
                });
            }
            *provenance_counts
                .entry(Provenance::McRefreshed.to_string())
                .or_default() += labels.len();

            // retrain a fresh model with the uncertainty-routed loss
            let mut rt_pool = dfix.clone();
            rt_pool.set_pseudo_for_retrain(
                subset
                    .iter()
                    .cloned()
                    .zip(labels.iter().cloned())
                    .zip(sigmas.iter().cloned())
                    .map(|((s, l), g)| (s, l, g))
                    .collect(),
            )?;
            let fresh = backbone::init_model(
                &setup.backbone,
                seed::derive(cfg.seed, "reinit", k as u64),
            )?;
            let (retrained, retrain_trace) = backbone::train(
                &fresh,
                &rt_pool,
                &setup.loss,
                &cfg.train_opts(
                    cfg.epochs_scratch,
                    seed::derive(cfg.seed, "train-retrain", k as u64),
                ),
            )?;

            // append the retrained model's subset predictions to the fixed set
            let images: Vec<Grid> = subset.iter().map(|s| s.image.clone()).collect();
            let mut rng = seed::rng(0, "line12", 0); // dropout off
            let preds = backbone::forward(&retrained, &images, false, &mut rng)?;
            let mut final_masks = Vec::with_capacity(subset.len());
            for ((sample, prob), label) in
                subset.iter().zip(preds.iter()).zip(labels.iter_mut())
            {
                let mask = pseudo::binarize(prob, cfg.network_threshold)?;
                label.advance(mask.clone(), Provenance::ModelFinal)?;
                final_masks.push((sample.clone(), mask));
            }
            *provenance_counts
                .entry(Provenance::ModelFinal.to_string())
                .or_default() += labels.len();

            // persist artifacts before the record is marked complete
            if let Some(dir) = setup.run_dir {
                let idir = dir.join(iter_dir_name(k));
                fs::create_dir_all(idir.join("pseudo"))?;
                fs::create_dir_all(idir.join("dfix"))?;
                fs::create_dir_all(idir.join("uncertainty"))?;
                checkpoint::save(&retrained, &idir.join("checkpoint.bin"))?;
                for ((sample, raw), label) in
                    subset.iter().zip(raw_sigmas.iter()).zip(labels.iter())
                {
                    // pseudo/<id>.png holds the label that entered retraining
                    dataset_io::write_mask_png(
                        &idir.join("pseudo").join(format!("{}.png", sample.id)),
                        &rt_pool
                            .entries()
                            .find(|e| e.sample.id == sample.id)
                            .map(|e| e.label.clone())
                            .expect("subset entry present"),
                    )?;
                    dataset_io::write_mask_png(
                        &idir.join("dfix").join(format!("{}.png", sample.id)),
                        &label.mask,
                    )?;
                    artifacts::write_sigma(
                        &idir.join("uncertainty").join(format!("{}.f32", sample.id)),
                        raw,
                    )?;
                }
                artifacts::write_loss_csv(&idir.join("loss_finetune.csv"), &finetune_trace)?;
                artifacts::write_loss_csv(&idir.join("loss_retrain.csv"), &retrain_trace)?;
                artifacts::write_pseudo_manifest(
                    &idir.join("pseudo_manifest.txt"),
                    &labels,
                    cfg.network_threshold,
                    aux_cfg.map(|_| cfg.aux_threshold),
                )?;
            }

            for (sample, mask) in final_masks {
                dfix.add_fixed(sample, mask)?;
            }

            let eval = match setup.eval {
                Some(eval) => Some(evaluate_model(&retrained, eval, cfg.network_threshold)?.1),
                None => None,
            };

            let record = IterationRecord {
                iteration: k,
                checkpoint: setup
                    .run_dir
                    .map(|_| format!("{}/checkpoint.bin", iter_dir_name(k)))
                    .unwrap_or_default(),
                subset_ids,
                provenance_counts,
                finetune_trace,
                retrain_trace,
                eval,
                complete: true,
            };
            Ok((retrained, record))
        })()
        .map_err(|e| e.in_iteration(k))?;

        model = step.0;
        history.iterations.push(step.1);
        if let Some(path) = &history_path {
            history.save(path)?;
        }
    }

    if let Some(dir) = setup.run_dir {
        checkpoint::save(&model, &dir.join("checkpoint_final.bin"))?;
    }

    let final_eval = match setup.eval {
        Some(eval) => Some(evaluate_model(&model, eval, cfg.network_threshold)?.0),
        None => None,
    };
    Ok(RunOutput {
        model,
        history,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_domain, normalize, Domain, DomainConfig};

    fn tiny_world() -> (Vec<ImageSample>, Vec<ImageSample>, EvalSet) {
        let src_cfg = DomainConfig {
            image_size: 16,
            seed: 21,
            ..DomainConfig::default()
        };
        let tgt_cfg = DomainConfig {
            domain: Domain::Target,
            image_size: 16,
            background_mean: 0.5,
            gamma: 1.3,
            seed: 22,
            ..DomainConfig::default()
        };
        let norm = |mut s: ImageSample| {
            s.image = normalize(&s.image);
            s
        };
        let source: Vec<_> = generate_domain(&src_cfg, 4)
            .unwrap()
            .into_iter()
            .map(norm)
            .collect();
        let target_all: Vec<_> = generate_domain(&tgt_cfg, 10)
            .unwrap()
            .into_iter()
            .map(norm)
            .collect();
        let eval = EvalSet::new(target_all[6..].to_vec()).unwrap();
        (source, target_all[..6].to_vec(), eval)
    }

    fn tiny_cfg() -> StrudelConfig {
        StrudelConfig {
            iterations: 2,
            subset_size: 2,
            mc_passes: 3,
            epochs_scratch: 2,
            epochs_finetune: 1,
            lr: 1e-3,
            batch_size: 2,
            seed: 5,
            ..StrudelConfig::default()
        }
    }

    fn tiny_setup<'a>(source: &'a [ImageSample], eval: &'a EvalSet) -> RunSetup<'a> {
        RunSetup {
            backbone: BackboneSpec {
                depth: 2,
                base_channels: 4,
                ..BackboneSpec::unet()
            },
            loss: LossConfig::default(),
            source,
            eval: Some(eval),
            aux: AuxSegmenterConfig::default(),
            run_dir: None,
            resume: false,
        }
    }

    #[test]
    fn bookkeeping_and_quarantine() {
        let (source, target, eval) = tiny_world();
        let cfg = tiny_cfg();
        let setup = tiny_setup(&source, &eval);
        let pool = TargetPool::new(target);
        let out = run_strudel(&cfg, &setup, pool).unwrap();
        assert_eq!(out.history.iterations.len(), 2);
        // |D_fix| grows by P per iteration; eval rows cover the eval set
        assert_eq!(out.final_eval.as_ref().unwrap().len(), eval.len());
        let all_ids: Vec<&str> = out
            .history
            .iterations
            .iter()
            .flat_map(|r| r.subset_ids.iter().map(|s| s.as_str()))
            .collect();
        let unique: std::collections::HashSet<&str> = all_ids.iter().copied().collect();
        assert_eq!(all_ids.len(), unique.len());
        assert_eq!(all_ids.len(), 4);
        for r in &out.history.iterations {
            assert!(r.eval.is_some());
            assert_eq!(r.provenance_counts["model_final"], 2);
        }
    }

    #[test]
    fn self_training_equals_sigma_forced_strudel() {
        let (source, target, eval) = tiny_world();
        let setup = tiny_setup(&source, &eval);
        let cfg = tiny_cfg();
        let st = run_self_training(&cfg, &setup, TargetPool::new(target.clone())).unwrap();
        let forced = StrudelConfig {
            force_zero_uncertainty: true,
            ..cfg
        };
        let sz = run_strudel(&forced, &setup, TargetPool::new(target)).unwrap();
        for (a, b) in st
            .history
            .iterations
            .iter()
            .zip(sz.history.iterations.iter())
        {
            assert_eq!(a.finetune_trace, b.finetune_trace);
            assert_eq!(a.retrain_trace, b.retrain_trace);
            assert_eq!(a.subset_ids, b.subset_ids);
        }
        assert_eq!(st.model, sz.model);
    }

    #[test]
    fn pool_exhaustion_is_reported_with_iteration() {
        let (source, target, eval) = tiny_world();
        let setup = tiny_setup(&source, &eval);
        let cfg = StrudelConfig {
            iterations: 4,
            subset_size: 2,
            ..tiny_cfg()
        };
        // 4*2 = 8 > 6 available
        let err = run_strudel(&cfg, &setup, TargetPool::new(target)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
