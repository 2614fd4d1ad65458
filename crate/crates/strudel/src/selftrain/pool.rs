//! Training pools and the target ground-truth quarantine.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::dataset::{ImageSample, SubsetPool};
use crate::error::{Error, Result};
use crate::grid::{check_binary, check_same_shape, Grid, Mask};
use crate::loss::LossRouting;
use crate::pseudo::{Provenance, PseudoLabel};

/// One training example: an image, the label it is trained against, its loss
/// routing, and (for retraining on pseudo labels) the rescaled uncertainty.
#[derive(Debug, Clone)]
pub struct TrainEntry {
    pub sample: ImageSample,
    pub label: Mask,
    pub routing: LossRouting,
    pub sigma: Option<Grid>,
}

/// The fixed (trusted) set plus the per-iteration pseudo-labeled set.
///
/// Invariants: no sample id appears twice; the fixed set only grows; every
/// pseudo entry routed with uncertainty carries a sigma map.
#[derive(Debug, Clone, Default)]
pub struct TrainingPool {
    fixed: Vec<TrainEntry>,
    pseudo: Vec<TrainEntry>,
}

impl TrainingPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the fixed set from labeled samples (their masks become labels).
    pub fn from_labeled(samples: &[ImageSample]) -> Result<Self> {
        let mut pool = Self::new();
        for s in samples {
            let label = s.mask.clone().ok_or_else(|| {
                Error::Config(format!("sample '{}' has no label for the fixed set", s.id))
            })?;
            pool.add_fixed(s.clone(), label)?;
        }
        Ok(pool)
    }

    fn check_new_id(&self, id: &str) -> Result<()> {
        if self.fixed.iter().any(|e| e.sample.id == id)
            || self.pseudo.iter().any(|e| e.sample.id == id)
        {
            return Err(Error::Config(format!(
                "sample id '{id}' already present in the training pool"
            )));
        }
        Ok(())
    }

    /// Appends a trusted entry; the fixed set never shrinks or rewrites.
    pub fn add_fixed(&mut self, sample: ImageSample, label: Mask) -> Result<()> {
        self.check_new_id(&sample.id)?;
        check_same_shape("fixed label", &sample.image, &label)?;
        check_binary("fixed label", &label)?;
        self.fixed.push(TrainEntry {
            sample,
            label,
            routing: LossRouting::FixedLabel,
            sigma: None,
        });
        Ok(())
    }

    /// Installs the pseudo set for a fine-tuning phase: fused-init labels,
    /// scored with the plain Dice + BCE (no uncertainty exists yet).
    pub fn set_pseudo_for_finetune(
        &mut self,
        entries: Vec<(ImageSample, PseudoLabel)>,
    ) -> Result<()> {
        self.pseudo.clear();
        let mut seen = HashSet::new();
        for (sample, label) in entries {
            if label.provenance != Provenance::FusedInit {
                return Err(Error::Config(format!(
                    "fine-tune labels must be fused_init, '{}' is {}",
                    label.id, label.provenance
                )));
            }
            self.push_pseudo(sample, label, None, &mut seen, LossRouting::FixedLabel)?;
        }
        Ok(())
    }

    /// Installs the pseudo set for a retraining phase: MC-refreshed labels,
    /// each with its rescaled uncertainty, scored with Dice + UBCE.
    pub fn set_pseudo_for_retrain(
        &mut self,
        entries: Vec<(ImageSample, PseudoLabel, Grid)>,
    ) -> Result<()> {
        self.pseudo.clear();
        let mut seen = HashSet::new();
        for (sample, label, sigma) in entries {
            if label.provenance != Provenance::McRefreshed {
                return Err(Error::Config(format!(
                    "retrain labels must be mc_refreshed, '{}' is {}",
                    label.id, label.provenance
                )));
            }
            check_same_shape("sigma", &sample.image, &sigma)?;
            self.push_pseudo(
                sample,
                label,
                Some(sigma),
                &mut seen,
                LossRouting::PseudoLabelWithUncertainty,
            )?;
        }
        Ok(())
    }

    fn push_pseudo(
        &mut self,
        sample: ImageSample,
        label: PseudoLabel,
        sigma: Option<Grid>,
        seen: &mut HashSet<String>,
        routing: LossRouting,
    ) -> Result<()> {
        if sample.id != label.id {
            return Err(Error::Config(format!(
                "pseudo label id '{}' does not match sample id '{}'",
                label.id, sample.id
            )));
        }
        if sample.mask.is_some() {
            return Err(Error::Config(format!(
                "pseudo-labeled sample '{}' still carries a ground-truth mask",
                sample.id
            )));
        }
        if !seen.insert(sample.id.clone()) {
            return Err(Error::Config(format!("duplicate pseudo id '{}'", sample.id)));
        }
        if self.fixed.iter().any(|e| e.sample.id == sample.id) {
            return Err(Error::Config(format!(
                "pseudo id '{}' already in the fixed set",
                sample.id
            )));
        }
        check_same_shape("pseudo label", &sample.image, &label.mask)?;
        self.pseudo.push(TrainEntry {
            sample,
            label: label.mask,
            routing,
            sigma,
        });
        Ok(())
    }

    pub fn clear_pseudo(&mut self) {
        self.pseudo.clear();
    }

    pub fn entries(&self) -> impl Iterator<Item = &TrainEntry> {
        self.fixed.iter().chain(self.pseudo.iter())
    }

    pub fn len(&self) -> usize {
        self.fixed.len() + self.pseudo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fixed_len(&self) -> usize {
        self.fixed.len()
    }

    pub fn pseudo_len(&self) -> usize {
        self.pseudo.len()
    }

    pub fn fixed_ids(&self) -> impl Iterator<Item = &str> {
        self.fixed.iter().map(|e| e.sample.id.as_str())
    }
}

/// Ground-truth masks held behind an access counter. Training code receives
/// mask-stripped samples and never touches this; evaluation tooling may read
/// masks through [`GuardedMasks::mask`], which counts every access.
#[derive(Debug)]
pub struct GuardedMasks {
    masks: HashMap<String, Mask>,
    accesses: AtomicUsize,
}

impl GuardedMasks {
    pub fn mask(&self, id: &str) -> Option<&Mask> {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        self.masks.get(id)
    }

    pub fn access_count(&self) -> usize {
        self.accesses.load(Ordering::Relaxed)
    }
}

/// The unlabeled target pool: samples with masks stripped, the ground truth
/// quarantined behind a [`GuardedMasks`].
#[derive(Debug)]
pub struct TargetPool {
    pool: SubsetPool,
    guard: GuardedMasks,
    initial_size: usize,
}

impl TargetPool {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        let mut masks = HashMap::new();
        let stripped: Vec<ImageSample> = samples
            .into_iter()
            .map(|mut s| {
                if let Some(m) = s.mask.take() {
                    masks.insert(s.id.clone(), m);
                }
                s
            })
            .collect();
        let initial_size = stripped.len();
        TargetPool {
            pool: SubsetPool::new(stripped),
            guard: GuardedMasks {
                masks,
                accesses: AtomicUsize::new(0),
            },
            initial_size,
        }
    }

    pub fn remaining(&self) -> usize {
        self.pool.remaining()
    }

    pub fn initial_size(&self) -> usize {
        self.initial_size
    }

    pub fn guard(&self) -> &GuardedMasks {
        &self.guard
    }

    pub(crate) fn sample_subset(
        &mut self,
        p: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Vec<ImageSample>> {
        self.pool.sample_subset(p, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_domain, DomainConfig};
    use crate::pseudo::PseudoLabel;

    fn samples(n: usize) -> Vec<ImageSample> {
        generate_domain(
            &DomainConfig {
                image_size: 16,
                ..DomainConfig::default()
            },
            n,
        )
        .unwrap()
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let s = samples(2);
        let mut pool = TrainingPool::from_labeled(&s).unwrap();
        let dup = s[0].clone();
        let label = dup.mask.clone().unwrap();
        assert!(pool.add_fixed(dup, label).is_err());
    }

    #[test]
    fn retrain_entries_need_refreshed_provenance_and_sigma() {
        let s = samples(3);
        let mut pool = TrainingPool::from_labeled(&s[..1]).unwrap();
        let unlabeled = s[1].without_mask();
        let pl = PseudoLabel::new(unlabeled.id.clone(), Mask::zeros((16, 16)), 1).unwrap();
        // fused_init provenance is rejected for retraining
        let err = pool.set_pseudo_for_retrain(vec![(
            unlabeled.clone(),
            pl.clone(),
            Grid::zeros((16, 16)),
        )]);
        assert!(err.is_err());
        let mut refreshed = pl;
        refreshed
            .advance(Mask::zeros((16, 16)), Provenance::McRefreshed)
            .unwrap();
        pool.set_pseudo_for_retrain(vec![(unlabeled, refreshed, Grid::zeros((16, 16)))])
            .unwrap();
        assert_eq!(pool.pseudo_len(), 1);
        assert_eq!(pool.len(), 2);
    }

    #[test]
    fn pseudo_samples_may_not_carry_ground_truth() {
        let s = samples(2);
        let mut pool = TrainingPool::from_labeled(&s[..1]).unwrap();
        let labeled = s[1].clone(); // mask still present
        let pl = PseudoLabel::new(labeled.id.clone(), Mask::zeros((16, 16)), 1).unwrap();
        assert!(pool
            .set_pseudo_for_finetune(vec![(labeled, pl)])
            .is_err());
    }

    #[test]
    fn target_pool_quarantines_masks() {
        let s = samples(5);
        let mut pool = TargetPool::new(s.clone());
        assert_eq!(pool.guard().access_count(), 0);
        let mut rng = crate::seed::rng(0, "t", 0);
        let drawn = pool.sample_subset(3, &mut rng).unwrap();
        assert!(drawn.iter().all(|d| d.mask.is_none()));
        assert_eq!(pool.guard().access_count(), 0);
        // evaluation-side access is counted
        let m = pool.guard().mask(&s[0].id);
        assert!(m.is_some());
        assert_eq!(pool.guard().access_count(), 1);
    }
}
