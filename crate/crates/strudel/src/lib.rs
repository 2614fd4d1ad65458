//! Uncertainty-guided self-training for cross-domain lesion segmentation.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`dataset`]: seeded synthetic source/target domains with ground-truth
//!   lesion masks, normalization, spatial augmentation, and subset sampling.
//! - [`backbone`]: two dropout-instrumented encoder-decoder segmentation
//!   networks (a plain U-Net and an octave-convolution + squeeze-excitation
//!   variant) with a shared forward/training contract and Adam training.
//! - [`uncertainty`]: Monte Carlo dropout sampling, expectation-based label
//!   refresh, per-pixel variance, and unit-range rescaling.
//! - [`loss`]: Dice, binary cross entropy, the uncertainty-weighted BCE, and
//!   the routed combined loss used during retraining.
//! - [`pseudo`]: the auxiliary heuristic segmenter, binarization, and
//!   pixel-wise OR fusion that initializes pseudo labels.
//! - [`selftrain`]: the iterative orchestrator (base model, subset sampling,
//!   fusion, fine-tune, uncertainty refresh, retrain, fixed-set growth) plus
//!   the joint/fine-tune baselines.
//! - [`metrics`]: the five segmentation evaluation metrics, connected
//!   component lesion matching, and the paired Wilcoxon signed-rank test.

pub mod backbone;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod pseudo;
pub mod seed;
pub mod selftrain;
pub mod uncertainty;

pub use backbone::{BackboneKind, BackboneSpec, ModelParams};
pub use dataset::{AugmentConfig, Domain, DomainConfig, ImageSample};
pub use error::{Error, Result};
pub use grid::{Grid, Mask};
pub use loss::{LossConfig, LossRouting};
pub use metrics::MetricReport;
pub use pseudo::{AuxSegmenterConfig, Provenance, PseudoLabel};
pub use selftrain::{RunHistory, StrudelConfig, TrainingPool};
pub use uncertainty::{McSamples, UncertaintyMap};
