//! Pseudo-label machinery: the auxiliary heuristic segmenter (a deliberately
//! recall-biased z-score thresholder standing in for an external lesion
//! segmentation tool), binarization, and pixel-wise OR fusion.

use ndarray::Zip;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, ModelParams};
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::grid::{check_binary, check_same_shape, Grid, Mask};

/// Binarization threshold for network probability maps.
pub const NETWORK_THRESHOLD: f64 = 0.5;
/// Binarization threshold for the auxiliary segmenter inside pseudo-label
/// fusion; high, to cut its hypersensitive response down to confident cores.
pub const AUX_THRESHOLD: f64 = 0.75;
/// Threshold used when the auxiliary segmenter is evaluated standalone.
pub const AUX_STANDALONE_THRESHOLD: f64 = 0.45;

/// Lifecycle of a pseudo label; transitions only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// OR-fusion of base-model and auxiliary masks.
    FusedInit,
    /// Refreshed from the MC-dropout expectation of the fine-tuned model.
    McRefreshed,
    /// Final prediction of the retrained model, appended to the fixed set.
    ModelFinal,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::FusedInit => "fused_init",
            Provenance::McRefreshed => "mc_refreshed",
            Provenance::ModelFinal => "model_final",
        };
        write!(f, "{s}")
    }
}

/// A pseudo label for one target sample.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub id: String,
    pub mask: Mask,
    pub provenance: Provenance,
    pub iteration: usize,
}

impl PseudoLabel {
    pub fn new(id: String, mask: Mask, iteration: usize) -> Result<Self> {
        check_binary("pseudo label", &mask)?;
        Ok(PseudoLabel {
            id,
            mask,
            provenance: Provenance::FusedInit,
            iteration,
        })
    }

    /// Replaces the mask and moves the provenance forward. Moving backward
    /// (or standing still) is a domain error.
    pub fn advance(&mut self, mask: Mask, provenance: Provenance) -> Result<()> {
        check_binary("pseudo label", &mask)?;
        if provenance <= self.provenance {
            return Err(Error::Domain(format!(
                "pseudo label '{}': provenance may only move forward ({} -> {provenance})",
                self.id, self.provenance
            )));
        }
        self.mask = mask;
        self.provenance = provenance;
        Ok(())
    }
}

/// Auxiliary segmenter parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxSegmenterConfig {
    /// Response midpoint in standard deviations of the (normalized) input.
    pub zscore_threshold: f64,
    /// Box smoothing radius in pixels.
    pub smoothing_radius: usize,
    /// Additive threshold shift; negative values bias toward recall.
    pub sensitivity_bias: f64,
}

impl Default for AuxSegmenterConfig {
    fn default() -> Self {
        AuxSegmenterConfig {
            zscore_threshold: 1.5,
            smoothing_radius: 1,
            sensitivity_bias: -0.25,
        }
    }
}

/// Logistic slope of the response squash; fixed so that the configured
/// thresholds keep their meaning in input standard deviations.
const RESPONSE_SLOPE: f64 = 3.0;

/// Soft lesion response in [0, 1] for a normalized (zero-mean, unit-variance)
/// image: box-smoothed intensity squashed around the biased z-score
/// threshold. Monotone in every input pixel.
pub fn aux_segment(image: &Grid, cfg: &AuxSegmenterConfig) -> Grid {
    let smoothed = if cfg.smoothing_radius > 0 {
        box_filter(image, cfg.smoothing_radius)
    } else {
        image.clone()
    };
    let midpoint = cfg.zscore_threshold + cfg.sensitivity_bias;
    smoothed.mapv(|z| 1.0 / (1.0 + (-(RESPONSE_SLOPE * (z - midpoint))).exp()))
}

fn box_filter(x: &Grid, radius: usize) -> Grid {
    let (h, w) = x.dim();
    let r = radius as isize;
    let mut out = Grid::zeros((h, w));
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (si, sj) = (i + di, j + dj);
                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        acc += x[[si as usize, sj as usize]];
                        cnt += 1.0;
                    }
                }
            }
            out[[i as usize, j as usize]] = acc / cnt;
        }
    }
    out
}

/// Thresholds a soft map; `value >= threshold` maps to 1.
pub fn binarize(soft: &Grid, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "binarize threshold must be in (0, 1), got {threshold}"
        )));
    }
    Ok(soft.mapv(|v| (v >= threshold) as u8))
}

/// Pixel-wise logical OR of two binary masks.
pub fn fuse_or(a: &Mask, b: &Mask) -> Result<Mask> {
    check_same_shape("fuse_or", a, b)?;
    check_binary("fuse_or lhs", a)?;
    check_binary("fuse_or rhs", b)?;
    let mut out = a.clone();
    Zip::from(&mut out).and(b).for_each(|o, &v| *o |= v);
    Ok(out)
}

/// Initial pseudo labels for a subset: the OR-fusion of the model mask
/// (threshold 0.5) and the auxiliary mask (threshold 0.75). With `aux_cfg =
/// None` the model mask is used alone (the no-auxiliary ablation).
pub fn init_pseudo_labels(
    model: &ModelParams,
    aux_cfg: Option<&AuxSegmenterConfig>,
    subset: &[ImageSample],
    iteration: usize,
) -> Result<Vec<PseudoLabel>> {
    if subset.is_empty() {
        return Err(Error::Config("init_pseudo_labels: empty subset".to_string()));
    }
    let mut out = Vec::with_capacity(subset.len());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0); // dropout off: unused
    for sample in subset {
        let prob = backbone::forward(model, std::slice::from_ref(&sample.image), false, &mut rng)?
            .pop()
            .expect("one output per input");
        let model_mask = binarize(&prob, NETWORK_THRESHOLD)?;
        let mask = match aux_cfg {
            Some(cfg) => {
                let aux_mask = binarize(&aux_segment(&sample.image, cfg), AUX_THRESHOLD)?;
                fuse_or(&model_mask, &aux_mask)?
            }
            None => model_mask,
        };
        out.push(PseudoLabel::new(sample.id.clone(), mask, iteration)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_domain, normalize, DomainConfig};
    use crate::grid::foreground_count;
    use ndarray::array;
    use proptest::prelude::*;

    fn background_only_cfg(seed: u64) -> DomainConfig {
        DomainConfig {
            image_size: 32,
            lesion_count_range: (0, 0),
            seed,
            ..DomainConfig::default()
        }
    }

    #[test]
    fn background_response_is_sparse_at_operating_point() {
        // bound established over 100 seeded background images
        let cfg = AuxSegmenterConfig::default();
        let mut total_fg = 0usize;
        let mut total_px = 0usize;
        for seed in 0..100 {
            let s = &generate_domain(&background_only_cfg(seed), 1).unwrap()[0];
            let img = normalize(&s.image);
            let mask = binarize(&aux_segment(&img, &cfg), AUX_THRESHOLD).unwrap();
            total_fg += foreground_count(&mask);
            total_px += mask.len();
        }
        let frac = total_fg as f64 / total_px as f64;
        assert!(frac < 0.05, "background foreground fraction {frac:.4}");
    }

    #[test]
    fn bright_lesions_are_caught() {
        let cfg = DomainConfig {
            image_size: 32,
            lesion_count_range: (1, 1),
            lesion_radius_range: (3.0, 5.0),
            lesion_intensity_offset: 0.4, // >= 3 background sigmas
            noise_std: 0.02,
            background_std: 0.05,
            ..DomainConfig::default()
        };
        for seed in 0..20 {
            let s = &generate_domain(
                &DomainConfig {
                    seed,
                    ..cfg
                },
                1,
            )
            .unwrap()[0];
            let gt = s.mask.as_ref().unwrap();
            if gt.sum() == 0 {
                continue;
            }
            let img = normalize(&s.image);
            let resp = binarize(&aux_segment(&img, &AuxSegmenterConfig::default()), AUX_THRESHOLD)
                .unwrap();
            let overlap = Zip::from(gt).and(&resp).fold(0usize, |a, &g, &r| {
                a + (g == 1 && r == 1) as usize
            });
            assert!(
                overlap > 0,
                "seed {seed}: auxiliary response missed the lesion entirely"
            );
        }
    }

    #[test]
    fn response_is_monotone_in_pixel_intensity() {
        let s = &generate_domain(&background_only_cfg(3), 1).unwrap()[0];
        let img = normalize(&s.image);
        let cfg = AuxSegmenterConfig::default();
        let base = aux_segment(&img, &cfg);
        let mut brighter = img.clone();
        brighter[[10, 12]] += 0.8;
        let bumped = aux_segment(&brighter, &cfg);
        assert!(bumped[[10, 12]] >= base[[10, 12]]);
        // neighbors under the smoothing window can only go up as well
        assert!(bumped[[10, 13]] >= base[[10, 13]]);
    }

    #[test]
    fn binarize_conventions() {
        let half = Grid::from_elem((2, 2), 0.5);
        let m = binarize(&half, 0.5).unwrap();
        assert!(m.iter().all(|&v| v == 1));
        let zero = Grid::zeros((2, 2));
        assert_eq!(binarize(&zero, 0.5).unwrap().sum(), 0);
        assert!(binarize(&half, 0.0).is_err());
        assert!(binarize(&half, 1.0).is_err());
    }

    #[test]
    fn fuse_or_identity_absorbing_commutative() {
        let m = array![[0u8, 1], [1, 0]];
        let zeros = Mask::zeros((2, 2));
        let ones = Mask::ones((2, 2));
        assert_eq!(fuse_or(&m, &zeros).unwrap(), m);
        assert_eq!(fuse_or(&m, &ones).unwrap(), ones);
        let other = array![[1u8, 0], [1, 1]];
        assert_eq!(fuse_or(&m, &other).unwrap(), fuse_or(&other, &m).unwrap());
        let bad = Mask::zeros((3, 2));
        assert!(fuse_or(&m, &bad).is_err());
    }

    #[test]
    fn provenance_only_moves_forward() {
        let mut pl = PseudoLabel::new("x".into(), Mask::zeros((2, 2)), 1).unwrap();
        pl.advance(Mask::ones((2, 2)), Provenance::McRefreshed).unwrap();
        assert!(pl.advance(Mask::zeros((2, 2)), Provenance::FusedInit).is_err());
        pl.advance(Mask::zeros((2, 2)), Provenance::ModelFinal).unwrap();
        assert!(pl
            .advance(Mask::zeros((2, 2)), Provenance::ModelFinal)
            .is_err());
    }

    proptest! {
        /// Fused foreground is a superset of each input's foreground, and a
        /// lower threshold never shrinks the foreground.
        #[test]
        fn fusion_and_threshold_monotonicity(seed in 0u64..200) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Mask::from_shape_fn((8, 8), |_| rand::Rng::gen_bool(&mut rng, 0.3) as u8);
            let b = Mask::from_shape_fn((8, 8), |_| rand::Rng::gen_bool(&mut rng, 0.3) as u8);
            let fused = fuse_or(&a, &b).unwrap();
            for ((x, y), f) in a.iter().zip(b.iter()).zip(fused.iter()) {
                prop_assert!(*f >= *x && *f >= *y);
            }
            let soft = Grid::from_shape_fn((8, 8), |_| rand::Rng::gen_range(&mut rng, 0.0..1.0));
            let hi = binarize(&soft, 0.8).unwrap();
            let lo = binarize(&soft, 0.3).unwrap();
            for (h, l) in hi.iter().zip(lo.iter()) {
                prop_assert!(l >= h);
            }
        }
    }
}
