//! Training-time spatial augmentation: flips, rotation, isotropic scaling,
//! and elastic deformation. Image and mask receive the identical transform;
//! the mask is re-binarized at 0.5 after interpolation.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
    /// Degrees, subset of [-180, 180].
    pub rotation_range_deg: (f64, f64),
    pub scale: bool,
    /// Isotropic scale factors, > 0.
    pub scale_range: (f64, f64),
    pub elastic: bool,
    /// Displacement standard deviation in pixels.
    pub elastic_sigma: f64,
    /// Coarse displacement grid spacing in pixels.
    pub elastic_spacing: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            vflip: true,
            rotate: true,
            rotation_range_deg: (-15.0, 15.0),
            scale: true,
            scale_range: (0.9, 1.1),
            elastic: true,
            elastic_sigma: 1.0,
            elastic_spacing: 8,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            hflip: false,
            vflip: false,
            rotate: false,
            scale: false,
            elastic: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rotation_range_deg;
        if lo > hi || lo < -180.0 || hi > 180.0 {
            return Err(Error::Config(format!(
                "rotation_range_deg must be a subset of [-180, 180]: ({lo}, {hi})"
            )));
        }
        let (slo, shi) = self.scale_range;
        if slo > shi || slo <= 0.0 {
            return Err(Error::Config(format!(
                "scale_range factors must be > 0 and ordered: ({slo}, {shi})"
            )));
        }
        if self.elastic && self.elastic_spacing == 0 {
            return Err(Error::Config("elastic_spacing must be >= 1".to_string()));
        }
        if self.elastic_sigma < 0.0 {
            return Err(Error::Config("elastic_sigma must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// A concrete sampled transform; re-applying it reproduces the augmentation
/// bit for bit.
#[derive(Debug, Clone)]
pub struct SpatialTransform {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    /// Full-resolution inverse-map displacements (row offset, column offset).
    pub elastic: Option<(Grid, Grid)>,
}

impl SpatialTransform {
    pub fn identity() -> Self {
        SpatialTransform {
            hflip: false,
            vflip: false,
            rotation_deg: 0.0,
            scale: 1.0,
            elastic: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip
            && !self.vflip
            && self.rotation_deg == 0.0
            && self.scale == 1.0
            && self.elastic.is_none()
    }

    /// Draws a transform for a (h, w) image.
    pub fn sample(cfg: &AugmentConfig, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        let hflip = cfg.hflip && rng.gen_bool(0.5);
        let vflip = cfg.vflip && rng.gen_bool(0.5);
        let rotation_deg = if cfg.rotate {
            rng.gen_range(cfg.rotation_range_deg.0..=cfg.rotation_range_deg.1)
        } else {
            0.0
        };
        let scale = if cfg.scale {
            rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1)
        } else {
            1.0
        };
        let elastic = if cfg.elastic && cfg.elastic_sigma > 0.0 {
            Some(elastic_field(shape, cfg.elastic_sigma, cfg.elastic_spacing, rng))
        } else {
            None
        };
        SpatialTransform {
            hflip,
            vflip,
            rotation_deg,
            scale,
            elastic,
        }
    }

    /// Applies the transform with bilinear interpolation (zero fill outside).
    pub fn apply_image(&self, img: &Grid) -> Grid {
        self.apply_grid(img)
    }

    /// Same spatial path as [`apply_image`], then threshold at 0.5.
    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let soft = self.apply_grid(&mask.mapv(|v| v as f64));
        soft.mapv(|v| (v >= 0.5) as u8)
    }

    fn apply_grid(&self, img: &Grid) -> Grid {
        let mut out = img.clone();
        if self.hflip {
            out = flip_horizontal(&out);
        }
        if self.vflip {
            out = flip_vertical(&out);
        }
        if self.rotation_deg != 0.0 || self.scale != 1.0 {
            out = affine_warp(&out, self.rotation_deg, self.scale);
        }
        if let Some((dy, dx)) = &self.elastic {
            out = displace(&out, dy, dx);
        }
        out
    }
}

/// Augments a training sample (it must carry a mask).
pub fn augment(sample: &ImageSample, cfg: &AugmentConfig, draw: &mut ChaCha8Rng) -> Result<ImageSample> {
    augment_with_transform(sample, cfg, draw).map(|(s, _)| s)
}

/// Augments and returns the sampled transform alongside.
pub fn augment_with_transform(
    sample: &ImageSample,
    cfg: &AugmentConfig,
    draw: &mut ChaCha8Rng,
) -> Result<(ImageSample, SpatialTransform)> {
    cfg.validate()?;
    let mask = sample.mask.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "augment: sample '{}' has no mask (augmentation is training-only)",
            sample.id
        ))
    })?;
    let t = SpatialTransform::sample(cfg, sample.image.dim(), draw);
    if t.is_identity() {
        return Ok((sample.clone(), t));
    }
    let out = ImageSample {
        id: sample.id.clone(),
        image: t.apply_image(&sample.image),
        mask: Some(t.apply_mask(mask)),
        domain: sample.domain,
    };
    Ok((out, t))
}

fn flip_horizontal(img: &Grid) -> Grid {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| img[[i, w - 1 - j]])
}

fn flip_vertical(img: &Grid) -> Grid {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| img[[h - 1 - i, j]])
}

/// Rotation (counter-clockwise, degrees) and isotropic scale about the image
/// center, inverse-mapped with bilinear sampling.
fn affine_warp(img: &Grid, rotation_deg: f64, scale: f64) -> Grid {
    let (h, w) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let inv_s = 1.0 / scale;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        // inverse rotation then inverse scale
        let sy = (sin * dx + cos * dy) * inv_s + cy;
        let sx = (cos * dx - sin * dy) * inv_s + cx;
        bilinear(img, sy, sx)
    })
}

fn displace(img: &Grid, dy: &Grid, dx: &Grid) -> Grid {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        bilinear(img, i as f64 + dy[[i, j]], j as f64 + dx[[i, j]])
    })
}

fn bilinear(img: &Grid, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let at = |i: f64, j: f64| -> f64 {
        if i < 0.0 || j < 0.0 || i >= h as f64 || j >= w as f64 {
            0.0
        } else {
            img[[i as usize, j as usize]]
        }
    };
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1.0) * (1.0 - fy) * fx
        + at(y0 + 1.0, x0) * fy * (1.0 - fx)
        + at(y0 + 1.0, x0 + 1.0) * fy * fx
}

/// Smooth random displacement fields from a coarse Gaussian grid.
fn elastic_field(
    (h, w): (usize, usize),
    sigma: f64,
    spacing: usize,
    rng: &mut ChaCha8Rng,
) -> (Grid, Grid) {
    use rand_distr::Distribution;
    let gh = h / spacing + 2;
    let gw = w / spacing + 2;
    let mut coarse_y = Array2::<f64>::zeros((gh, gw));
    let mut coarse_x = Array2::<f64>::zeros((gh, gw));
    for v in coarse_y.iter_mut() {
        *v = rand_distr::StandardNormal.sample::<f64, _>(rng) * sigma;
    }
    for v in coarse_x.iter_mut() {
        *v = rand_distr::StandardNormal.sample::<f64, _>(rng) * sigma;
    }
    let up = |coarse: &Grid| -> Grid {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let gy = i as f64 / spacing as f64;
            let gx = j as f64 / spacing as f64;
            bilinear(coarse, gy, gx)
        })
    };
    (up(&coarse_y), up(&coarse_x))
}

/// Convenience: a seeded RNG for augmentation draws.
pub fn augment_rng(cfg: &AugmentConfig, epoch: u64) -> ChaCha8Rng {
    seed::rng(cfg.seed, "augment", epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_domain, DomainConfig};
    use crate::grid::foreground_count;
    use rand_chacha::rand_core::SeedableRng;

    fn sample_with_center_lesion() -> ImageSample {
        let cfg = DomainConfig {
            image_size: 48,
            lesion_count_range: (1, 2),
            lesion_radius_range: (3.0, 5.0),
            seed: 5,
            ..DomainConfig::default()
        };
        generate_domain(&cfg, 1).unwrap().pop().unwrap()
    }

    #[test]
    fn disabled_config_is_identity() {
        let s = sample_with_center_lesion();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&s, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(out.image, s.image);
        assert_eq!(out.mask, s.mask);
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = sample_with_center_lesion();
        let t = SpatialTransform {
            hflip: true,
            ..SpatialTransform::identity()
        };
        let once = t.apply_image(&s.image);
        let twice = t.apply_image(&once);
        assert_eq!(twice, s.image);
        let m_once = t.apply_mask(s.mask.as_ref().unwrap());
        let m_twice = t.apply_mask(&m_once);
        assert_eq!(&m_twice, s.mask.as_ref().unwrap());
    }

    #[test]
    fn recorded_transform_reproduces_the_mask() {
        let s = sample_with_center_lesion();
        let cfg = AugmentConfig::default();
        for trial in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let (out, t) = augment_with_transform(&s, &cfg, &mut rng).unwrap();
            let replayed = t.apply_mask(s.mask.as_ref().unwrap());
            assert_eq!(out.mask.as_ref().unwrap(), &replayed);
        }
    }

    #[test]
    fn mask_is_binary_and_foreground_stays_bounded() {
        // bound established over 1000 seeded draws at the default ranges
        let s = sample_with_center_lesion();
        let original = foreground_count(s.mask.as_ref().unwrap()) as f64;
        let cfg = AugmentConfig::default();
        for trial in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let out = augment(&s, &cfg, &mut rng).unwrap();
            let m = out.mask.as_ref().unwrap();
            assert!(m.iter().all(|&v| v <= 1));
            let fg = foreground_count(m) as f64;
            assert!(
                (fg - original).abs() <= 0.5 * original,
                "trial {trial}: foreground {fg} vs original {original}"
            );
        }
    }

    #[test]
    fn augment_requires_a_mask() {
        let s = sample_with_center_lesion().without_mask();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment(&s, &AugmentConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = AugmentConfig {
            rotation_range_deg: (-200.0, 10.0),
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            scale_range: (0.0, 1.0),
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
