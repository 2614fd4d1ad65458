//! Seeded synthetic source/target domains with known lesion masks.
//!
//! Images are smooth background textures with additive ellipse-union lesions.
//! The two domains of an experiment differ in background level, texture
//! contrast (via a gamma warp), noise level, and lesion statistics, which
//! yields a real shift that survives per-image normalization.

mod augment;
pub mod io;

pub use augment::{augment, augment_with_transform, AugmentConfig, SpatialTransform};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_binary, check_same_shape, Grid, Mask};
use crate::seed;

/// Which side of the adaptation problem a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(&self) -> &'static str {
        match self {
            Domain::Source => "src",
            Domain::Target => "tgt",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Format(format!("unknown domain '{other}'"))),
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// One 2D intensity grid with an optional ground-truth mask.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub image: Grid,
    pub mask: Option<Mask>,
    pub domain: Domain,
}

impl ImageSample {
    pub fn validate(&self) -> Result<()> {
        if let Some(mask) = &self.mask {
            check_same_shape("sample mask", &self.image, mask)?;
            check_binary("sample mask", mask)?;
        }
        Ok(())
    }

    /// The same sample with its ground-truth mask removed.
    pub fn without_mask(&self) -> ImageSample {
        ImageSample {
            id: self.id.clone(),
            image: self.image.clone(),
            mask: None,
            domain: self.domain,
        }
    }
}

/// Parameters of one synthetic domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub domain: Domain,
    /// Square image side length in pixels.
    pub image_size: usize,
    pub background_mean: f64,
    /// Amplitude of the smooth background texture.
    pub background_std: f64,
    /// Additive lesion brightness over the local background.
    pub lesion_intensity_offset: f64,
    pub lesion_count_range: (usize, usize),
    pub lesion_radius_range: (f64, f64),
    /// Contrast exponent applied to the background texture.
    pub gamma: f64,
    /// Per-pixel Gaussian noise level.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            domain: Domain::Source,
            image_size: 64,
            background_mean: 0.35,
            background_std: 0.06,
            lesion_intensity_offset: 0.30,
            lesion_count_range: (1, 4),
            lesion_radius_range: (2.5, 6.0),
            gamma: 1.0,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl DomainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be >= 16, got {}",
                self.image_size
            )));
        }
        if self.lesion_count_range.0 > self.lesion_count_range.1 {
            return Err(Error::Config(format!(
                "lesion_count_range is empty: {:?}",
                self.lesion_count_range
            )));
        }
        if self.lesion_radius_range.0 > self.lesion_radius_range.1
            || self.lesion_radius_range.0 <= 0.0
        {
            return Err(Error::Config(format!(
                "lesion_radius_range must be positive and non-empty: {:?}",
                self.lesion_radius_range
            )));
        }
        if self.noise_std < 0.0 || self.background_std < 0.0 {
            return Err(Error::Config(
                "noise_std and background_std must be >= 0".to_string(),
            ));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Generates `n` samples with ground-truth masks. Pure in `(config, n)`:
/// sample `i` depends only on `(config.seed, i)`.
pub fn generate_domain(config: &DomainConfig, n: usize) -> Result<Vec<ImageSample>> {
    config.validate()?;
    (0..n).map(|i| generate_sample(config, i)).collect()
}

fn generate_sample(config: &DomainConfig, index: usize) -> Result<ImageSample> {
    let size = config.image_size;
    let mut rng = seed::rng(config.seed, "sample", index as u64);

    // smooth background texture, gamma-warped, re-standardized
    let mut tex = Array2::from_shape_fn((size, size), |_| rng.gen::<f64>() - 0.5);
    tex = box_blur(&tex, 2);
    tex = box_blur(&tex, 2);
    let (lo, hi) = min_max(&tex);
    if hi > lo {
        tex.mapv_inplace(|v| ((v - lo) / (hi - lo)).powf(config.gamma));
    } else {
        tex.fill(0.5);
    }
    let mean = tex.sum() / tex.len() as f64;
    let var = tex.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / tex.len() as f64;
    let std = var.sqrt();
    if std > 1e-12 {
        tex.mapv_inplace(|v| (v - mean) / std);
    } else {
        tex.fill(0.0);
    }

    // lesions: union of random ellipses
    let mut mask = Mask::zeros((size, size));
    let count = rng.gen_range(config.lesion_count_range.0..=config.lesion_count_range.1);
    for _ in 0..count {
        let cy = rng.gen_range(0.15 * size as f64..0.85 * size as f64);
        let cx = rng.gen_range(0.15 * size as f64..0.85 * size as f64);
        let ry = rng.gen_range(config.lesion_radius_range.0..=config.lesion_radius_range.1);
        let rx = rng.gen_range(config.lesion_radius_range.0..=config.lesion_radius_range.1);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        paint_ellipse(&mut mask, cy, cx, ry, rx, theta);
    }

    let mut image = Grid::zeros((size, size));
    for ((i, j), px) in image.indexed_iter_mut() {
        let noise: f64 = sample_standard_normal(&mut rng) * config.noise_std;
        *px = config.background_mean
            + config.background_std * tex[[i, j]]
            + config.lesion_intensity_offset * mask[[i, j]] as f64
            + noise;
    }

    Ok(ImageSample {
        id: format!("{}{:04}", config.domain.tag(), index),
        image,
        mask: Some(mask),
        domain: config.domain,
    })
}

fn sample_standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

fn paint_ellipse(mask: &mut Mask, cy: f64, cx: f64, ry: f64, rx: f64, theta: f64) {
    let (h, w) = mask.dim();
    let (sin, cos) = theta.sin_cos();
    let r = ry.max(rx).ceil() as isize + 1;
    let (ci, cj) = (cy.round() as isize, cx.round() as isize);
    for i in (ci - r).max(0)..(ci + r + 1).min(h as isize) {
        for j in (cj - r).max(0)..(cj + r + 1).min(w as isize) {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                mask[[i as usize, j as usize]] = 1;
            }
        }
    }
}

fn box_blur(x: &Grid, radius: usize) -> Grid {
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

fn min_max(x: &Grid) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Standardizes an image to zero mean and unit (population) variance.
/// A constant input maps to an all-zero grid.
pub fn normalize(image: &Grid) -> Grid {
    let n = image.len() as f64;
    let mean = image.sum() / n;
    let var = image.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
    let std = var.sqrt();
    if std <= 1e-12 {
        log::warn!("normalize: constant input, returning all-zero grid");
        return Grid::zeros(image.raw_dim());
    }
    image.mapv(|v| (v - mean) / std)
}

/// Extracts a centered `size x size` window.
pub fn center_crop(image: &Grid, size: usize) -> Result<Grid> {
    let (h, w) = image.dim();
    if size > h || size > w {
        return Err(Error::Shape(format!(
            "center_crop: requested {size} from {h}x{w} image"
        )));
    }
    let (i0, j0) = ((h - size) / 2, (w - size) / 2);
    Ok(image
        .slice(ndarray::s![i0..i0 + size, j0..j0 + size])
        .to_owned())
}

/// A without-replacement sample pool. Single-writer: draws mutate the pool.
#[derive(Debug, Clone)]
pub struct SubsetPool {
    samples: Vec<ImageSample>,
}

impl SubsetPool {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        SubsetPool { samples }
    }

    pub fn remaining(&self) -> usize {
        self.samples.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    /// Draws `p` samples uniformly without replacement, removing them from
    /// the pool. Successive draws are disjoint.
    pub fn sample_subset(
        &mut self,
        p: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Vec<ImageSample>> {
        if p > self.samples.len() {
            return Err(Error::PoolExhausted {
                requested: p,
                remaining: self.samples.len(),
            });
        }
        let mut out = Vec::with_capacity(p);
        for _ in 0..p {
            let idx = rng.gen_range(0..self.samples.len());
            out.push(self.samples.swap_remove(idx));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::HashSet;

    #[test]
    fn generate_empty_and_no_lesions() {
        let cfg = DomainConfig::default();
        assert!(generate_domain(&cfg, 0).unwrap().is_empty());

        let cfg = DomainConfig {
            lesion_count_range: (0, 0),
            ..DomainConfig::default()
        };
        for s in generate_domain(&cfg, 5).unwrap() {
            assert_eq!(s.mask.as_ref().unwrap().sum(), 0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = DomainConfig::default();
        let a = generate_domain(&cfg, 4).unwrap();
        let b = generate_domain(&cfg, 4).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn lesions_are_brighter_than_background() {
        let cfg = DomainConfig {
            lesion_count_range: (2, 2),
            noise_std: 0.0,
            ..DomainConfig::default()
        };
        for s in generate_domain(&cfg, 3).unwrap() {
            let mask = s.mask.as_ref().unwrap();
            if mask.sum() == 0 {
                continue;
            }
            let (mut fg, mut nfg, mut bg, mut nbg) = (0.0, 0.0, 0.0, 0.0);
            for ((i, j), &m) in mask.indexed_iter() {
                if m == 1 {
                    fg += s.image[[i, j]];
                    nfg += 1.0;
                } else {
                    bg += s.image[[i, j]];
                    nbg += 1.0;
                }
            }
            let gap = fg / nfg - bg / nbg;
            // texture keeps this from being exact, the offset dominates
            assert!(
                gap > 0.5 * cfg.lesion_intensity_offset,
                "lesion/background gap {gap}"
            );
        }
    }

    #[test]
    fn ids_are_unique_and_validate() {
        let samples = generate_domain(&DomainConfig::default(), 20).unwrap();
        let ids: HashSet<_> = samples.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 20);
        for s in &samples {
            s.validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = DomainConfig {
            image_size: 8,
            ..DomainConfig::default()
        };
        assert!(generate_domain(&bad, 1).is_err());
        let bad = DomainConfig {
            lesion_count_range: (3, 1),
            ..DomainConfig::default()
        };
        assert!(generate_domain(&bad, 1).is_err());
        let bad = DomainConfig {
            gamma: 0.0,
            ..DomainConfig::default()
        };
        assert!(generate_domain(&bad, 1).is_err());
    }

    #[test]
    fn normalize_constant_grid_is_zero() {
        let g = Grid::from_elem((8, 8), 3.5);
        assert!(normalize(&g).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_hits_zero_mean_unit_std() {
        let cfg = DomainConfig::default();
        let s = &generate_domain(&cfg, 1).unwrap()[0];
        let n = normalize(&s.image);
        let len = n.len() as f64;
        let mean = n.sum() / len;
        let var = n.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / len;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(var.sqrt(), 1.0, epsilon = 1e-6);
        // idempotence
        let n2 = normalize(&n);
        for (a, b) in n.iter().zip(n2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn normalize_two_point_grid() {
        let mut g = Grid::zeros((2, 2));
        g[[0, 0]] = 1.0;
        g[[0, 1]] = 3.0;
        g[[1, 0]] = 1.0;
        g[[1, 1]] = 3.0;
        let n = normalize(&g);
        assert_abs_diff_eq!(n[[0, 0]], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n[[0, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn subset_pool_draws_without_replacement() {
        let samples = generate_domain(&DomainConfig::default(), 10).unwrap();
        let mut pool = SubsetPool::new(samples);
        let mut rng = seed::rng(1, "subset", 0);
        let a = pool.sample_subset(4, &mut rng).unwrap();
        let b = pool.sample_subset(4, &mut rng).unwrap();
        let ia: HashSet<_> = a.iter().map(|s| s.id.clone()).collect();
        let ib: HashSet<_> = b.iter().map(|s| s.id.clone()).collect();
        assert!(ia.is_disjoint(&ib));
        assert_eq!(pool.remaining(), 2);
        let c = pool.sample_subset(2, &mut rng).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(pool.remaining(), 0);
        assert!(matches!(
            pool.sample_subset(1, &mut rng),
            Err(Error::PoolExhausted {
                requested: 1,
                remaining: 0
            })
        ));
    }

    #[test]
    fn domain_shift_in_background_means() {
        let src = DomainConfig {
            lesion_count_range: (0, 0),
            seed: 11,
            ..DomainConfig::default()
        };
        let tgt = DomainConfig {
            domain: Domain::Target,
            background_mean: 0.55,
            lesion_count_range: (0, 0),
            seed: 12,
            ..DomainConfig::default()
        };
        let a = generate_domain(&src, 20).unwrap();
        let b = generate_domain(&tgt, 20).unwrap();
        let mean_of = |xs: &[ImageSample]| {
            let ms: Vec<f64> = xs
                .iter()
                .map(|s| s.image.sum() / s.image.len() as f64)
                .collect();
            let m = ms.iter().sum::<f64>() / ms.len() as f64;
            let var = ms.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / ms.len() as f64;
            (m, (var / ms.len() as f64).sqrt())
        };
        let (ma, sea) = mean_of(&a);
        let (mb, seb) = mean_of(&b);
        let diff = mb - ma;
        let expected = tgt.background_mean - src.background_mean;
        let se = (sea * sea + seb * seb).sqrt().max(1e-9);
        assert!(
            (diff - expected).abs() <= 3.0 * se,
            "diff {diff} vs expected {expected} (se {se})"
        );
    }

    #[test]
    fn center_crop_extracts_middle() {
        let g = Grid::from_shape_fn((8, 8), |(i, j)| (i * 8 + j) as f64);
        let c = center_crop(&g, 4).unwrap();
        assert_eq!(c.dim(), (4, 4));
        assert_eq!(c[[0, 0]], g[[2, 2]]);
        assert!(center_crop(&g, 9).is_err());
    }
}
