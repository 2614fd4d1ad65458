//! Monte Carlo dropout uncertainty: stochastic forward passes, their
//! expectation (used to refresh pseudo labels), the per-pixel population
//! variance, and unit-range rescaling.

use ndarray::{Array3, Axis};

use crate::backbone::{self, ModelParams};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::seed;

/// A stack of stochastic forward passes for one image.
#[derive(Debug, Clone)]
pub struct McSamples {
    /// (passes, H, W) probability maps, each strictly inside (0, 1).
    pub stack: Array3<f64>,
    /// Digest of the model that produced the stack.
    pub model_fingerprint: u64,
    /// Per-pass dropout seeds, derived from the call seed.
    pub pass_seeds: Vec<u64>,
}

impl McSamples {
    pub fn passes(&self) -> usize {
        self.stack.dim().0
    }
}

/// Per-pixel uncertainty of a prediction: the raw MC variance and its
/// per-image min-max rescaling into [0, 1].
#[derive(Debug, Clone)]
pub struct UncertaintyMap {
    pub raw: Grid,
    pub rescaled: Grid,
    pub passes: usize,
}

/// Runs `c >= 2` stochastic forward passes with dropout active.
/// Deterministic in `(params, image, c, seed)`.
pub fn mc_sample(params: &ModelParams, image: &Grid, c: usize, seed: u64) -> Result<McSamples> {
    if c < 2 {
        return Err(Error::Config(format!(
            "mc_sample needs c >= 2 passes (variance is undefined for c = {c})"
        )));
    }
    let (h, w) = image.dim();
    let mut stack = Array3::<f64>::zeros((c, h, w));
    let mut pass_seeds = Vec::with_capacity(c);
    for pass in 0..c {
        let pass_seed = seed::derive(seed, "mc-pass", pass as u64);
        pass_seeds.push(pass_seed);
        let mut rng = seed::rng(pass_seed, "draw", 0);
        let maps = backbone::forward(params, std::slice::from_ref(image), true, &mut rng)?;
        stack.index_axis_mut(Axis(0), pass).assign(&maps[0]);
    }
    Ok(McSamples {
        stack,
        model_fingerprint: params.fingerprint(),
        pass_seeds,
    })
}

/// Per-pixel arithmetic mean over the MC passes.
pub fn expectation(samples: &McSamples) -> Grid {
    let c = samples.passes() as f64;
    samples.stack.sum_axis(Axis(0)) / c
}

/// Per-pixel population variance `(1/C) * sum_i (y_i - mean)^2`, rescaled
/// per image into [0, 1].
pub fn variance_map(samples: &McSamples) -> UncertaintyMap {
    let c = samples.passes();
    let mean = expectation(samples);
    let mut raw = Grid::zeros(mean.raw_dim());
    for pass in 0..c {
        let plane = samples.stack.index_axis(Axis(0), pass);
        ndarray::Zip::from(&mut raw)
            .and(&plane)
            .and(&mean)
            .for_each(|r, &y, &m| *r += (y - m) * (y - m));
    }
    raw.mapv_inplace(|v| v / c as f64);
    let rescaled = rescale_unit(&raw);
    UncertaintyMap {
        raw,
        rescaled,
        passes: c,
    }
}

/// Per-image min-max rescaling to [0, 1]; a constant grid maps to all zeros.
pub fn rescale_unit(raw: &Grid) -> Grid {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return Grid::zeros(raw.raw_dim());
    }
    raw.mapv(|v| (v - lo) / (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_model, BackboneSpec};
    use crate::dataset::{generate_domain, normalize, DomainConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_image() -> Grid {
        let cfg = DomainConfig {
            image_size: 16,
            seed: 7,
            ..DomainConfig::default()
        };
        normalize(&generate_domain(&cfg, 1).unwrap()[0].image)
    }

    fn small_model(dropout_rate: f64) -> ModelParams {
        let spec = BackboneSpec {
            depth: 2,
            base_channels: 4,
            dropout_rate,
            ..BackboneSpec::unet()
        };
        init_model(&spec, 1).unwrap()
    }

    #[test]
    fn c_below_two_is_a_config_error() {
        let model = small_model(0.2);
        assert!(mc_sample(&model, &test_image(), 1, 0).is_err());
    }

    #[test]
    fn zero_dropout_gives_identical_passes_and_zero_variance() {
        let model = small_model(0.0);
        let mc = mc_sample(&model, &test_image(), 4, 3).unwrap();
        let first = mc.stack.index_axis(Axis(0), 0).to_owned();
        for pass in 1..4 {
            assert_eq!(mc.stack.index_axis(Axis(0), pass), first.view());
        }
        let u = variance_map(&mc);
        assert!(u.raw.iter().all(|&v| v == 0.0));
        assert!(u.rescaled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_is_deterministic_and_dropout_varies_passes() {
        let model = small_model(0.3);
        let img = test_image();
        let a = mc_sample(&model, &img, 5, 9).unwrap();
        let b = mc_sample(&model, &img, 5, 9).unwrap();
        assert_eq!(a.stack, b.stack);
        assert_eq!(a.pass_seeds, b.pass_seeds);
        assert_eq!(a.model_fingerprint, b.model_fingerprint);
        // with dropout on, at least two passes differ
        let p0 = a.stack.index_axis(Axis(0), 0);
        assert!((1..5).any(|i| a.stack.index_axis(Axis(0), i) != p0));
    }

    #[test]
    fn expectation_of_identical_maps_is_that_map() {
        let plane = Array2::from_shape_fn((4, 4), |(i, j)| 0.1 + 0.05 * (i * 4 + j) as f64);
        let mut stack = Array3::<f64>::zeros((3, 4, 4));
        for p in 0..3 {
            stack.index_axis_mut(Axis(0), p).assign(&plane);
        }
        let mc = McSamples {
            stack,
            model_fingerprint: 0,
            pass_seeds: vec![0; 3],
        };
        let e = expectation(&mc);
        for (a, b) in e.iter().zip(plane.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_point_mean_and_limit_variance() {
        let mut stack = Array3::<f64>::zeros((2, 1, 1));
        stack[[0, 0, 0]] = 0.2;
        stack[[1, 0, 0]] = 0.6;
        let mc = McSamples {
            stack,
            model_fingerprint: 0,
            pass_seeds: vec![0, 1],
        };
        assert_abs_diff_eq!(expectation(&mc)[[0, 0]], 0.4, epsilon = 1e-15);

        // limit case: values 0 and 1 give the maximal variance 0.25
        let mut stack = Array3::<f64>::zeros((2, 1, 1));
        stack[[1, 0, 0]] = 1.0;
        let mc = McSamples {
            stack,
            model_fingerprint: 0,
            pass_seeds: vec![0, 1],
        };
        assert_abs_diff_eq!(variance_map(&mc).raw[[0, 0]], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn expectation_commutes_with_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = Array3::from_shape_fn((6, 3, 3), |_| rng.gen_range(0.01..0.99));
        let order = [5usize, 2, 0, 4, 1, 3];
        let mut permuted = Array3::<f64>::zeros(stack.raw_dim());
        for (dst, &src) in order.iter().enumerate() {
            permuted
                .index_axis_mut(Axis(0), dst)
                .assign(&stack.index_axis(Axis(0), src));
        }
        let a = expectation(&McSamples {
            stack,
            model_fingerprint: 0,
            pass_seeds: vec![0; 6],
        });
        let b = expectation(&McSamples {
            stack: permuted,
            model_fingerprint: 0,
            pass_seeds: vec![0; 6],
        });
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    /// Independent two-pass oracle: mean first, then squared deviations.
    fn variance_oracle(stack: &Array3<f64>) -> Grid {
        let (c, h, w) = stack.dim();
        let mut out = Grid::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut mean = 0.0;
                for p in 0..c {
                    mean += stack[[p, i, j]];
                }
                mean /= c as f64;
                let mut acc = 0.0;
                for p in 0..c {
                    let d = stack[[p, i, j]] - mean;
                    acc += d * d;
                }
                out[[i, j]] = acc / c as f64;
            }
        }
        out
    }

    #[test]
    fn variance_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let stack = Array3::from_shape_fn((10, 8, 8), |_| rng.gen_range(0.001..0.999));
            let mc = McSamples {
                stack: stack.clone(),
                model_fingerprint: 0,
                pass_seeds: vec![0; 10],
            };
            let u = variance_map(&mc);
            let oracle = variance_oracle(&stack);
            for (a, b) in u.raw.iter().zip(oracle.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
            assert!(u.raw.iter().all(|&v| v <= 0.25 + 1e-12));
        }
    }

    #[test]
    fn rescale_unit_maps_endpoints_and_preserves_order() {
        let mut g = Grid::zeros((3, 3));
        g[[0, 0]] = 0.02;
        g[[1, 1]] = 0.005;
        g[[2, 2]] = 0.01;
        let r = rescale_unit(&g);
        assert_abs_diff_eq!(r[[0, 0]], 1.0);
        assert_abs_diff_eq!(r[[0, 1]], 0.0);
        assert!(r[[2, 2]] > r[[1, 1]]);

        let c = Grid::from_elem((3, 3), 0.7);
        assert!(rescale_unit(&c).iter().all(|&v| v == 0.0));
    }
}
