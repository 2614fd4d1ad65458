//! Octave convolution: convolution over a frequency-split feature pair.
//!
//! A feature map is carried as a high-frequency part at full resolution and a
//! low-frequency part at exactly half resolution. The convolution exchanges
//! information through four paths: high-to-high, high-to-low (via average
//! pooling), low-to-low, and low-to-high (via nearest upsampling after the
//! convolution).

use ndarray::{Array1, Array3, Array4};

use super::ops::{
    avgpool2_bwd, avgpool2_fwd, conv2d_bwd, conv2d_fwd, upsample2_bwd, upsample2_fwd, Scalar,
};
use crate::error::{Error, Result};

/// A frequency-split feature map. `low` is `None` when the split fraction is
/// zero (the pair degenerates to an ordinary feature map).
#[derive(Debug, Clone)]
pub struct FreqPair<F> {
    pub high: Array3<F>,
    pub low: Option<Array3<F>>,
}

impl<F: Scalar> FreqPair<F> {
    pub fn from_high(high: Array3<F>) -> Self {
        FreqPair { high, low: None }
    }

    pub fn channels(&self) -> (usize, usize) {
        (
            self.high.dim().0,
            self.low.as_ref().map_or(0, |l| l.dim().0),
        )
    }

    fn check(&self) -> Result<()> {
        if let Some(low) = &self.low {
            let (_, hh, hw) = self.high.dim();
            let (_, lh, lw) = low.dim();
            if lh * 2 != hh || lw * 2 != hw {
                return Err(Error::Shape(format!(
                    "octave pair: low {lh}x{lw} is not half of high {hh}x{hw}"
                )));
            }
        }
        Ok(())
    }
}

/// Splits a channel count into (high, low) parts for a given alpha.
pub fn octave_split(channels: usize, alpha: f64) -> (usize, usize) {
    let low = (channels as f64 * alpha).floor() as usize;
    (channels - low, low)
}

/// Weight views for one octave convolution. Paths with zero channels on
/// either side are absent.
#[derive(Clone, Copy)]
pub struct OctaveWeights<'a, F> {
    pub w_hh: Option<ndarray::ArrayView4<'a, F>>,
    pub w_hl: Option<ndarray::ArrayView4<'a, F>>, // high input -> low output
    pub w_lh: Option<ndarray::ArrayView4<'a, F>>, // low input -> high output
    pub w_ll: Option<ndarray::ArrayView4<'a, F>>,
    pub b_h: Option<ndarray::ArrayView1<'a, F>>,
    pub b_l: Option<ndarray::ArrayView1<'a, F>>,
}

/// Cache of the pooled high-frequency input needed by the backward pass.
pub struct OctaveCache<F> {
    pooled_high: Option<Array3<F>>,
}

/// Forward pass. Output channel counts follow the weight shapes.
pub fn octave_conv_fwd<F: Scalar>(
    x: &FreqPair<F>,
    w: &OctaveWeights<F>,
) -> Result<(FreqPair<F>, OctaveCache<F>)> {
    x.check()?;
    let mut cache = OctaveCache { pooled_high: None };

    // high output: high->high plus upsampled low->high
    let mut high = None;
    if let Some(w_hh) = w.w_hh {
        let b = w.b_h.expect("high output implies high bias");
        high = Some(conv2d_fwd(&x.high, w_hh, b)?);
    }
    if let (Some(w_lh), Some(low_in)) = (w.w_lh, x.low.as_ref()) {
        let zero_bias = Array1::<F>::zeros(w_lh.dim().0);
        let contrib = upsample2_fwd(&conv2d_fwd(low_in, w_lh, zero_bias.view())?);
        high = Some(match high {
            Some(h) => h + &contrib,
            None => {
                let b = w.b_h.expect("high output implies high bias");
                let mut c = contrib;
                for (mut plane, &bias) in c.outer_iter_mut().zip(b.iter()) {
                    plane.mapv_inplace(|v| v + bias);
                }
                c
            }
        });
    }

    // low output: pooled high->low plus low->low
    let mut low = None;
    if let Some(w_hl) = w.w_hl {
        let pooled = avgpool2_fwd(&x.high)?;
        let b = w.b_l.expect("low output implies low bias");
        low = Some(conv2d_fwd(&pooled, w_hl, b)?);
        cache.pooled_high = Some(pooled);
    }
    if let (Some(w_ll), Some(low_in)) = (w.w_ll, x.low.as_ref()) {
        let zero_bias = Array1::<F>::zeros(w_ll.dim().0);
        let contrib = conv2d_fwd(low_in, w_ll, zero_bias.view())?;
        low = Some(match low {
            Some(l) => l + &contrib,
            None => {
                let b = w.b_l.expect("low output implies low bias");
                let mut c = contrib;
                for (mut plane, &bias) in c.outer_iter_mut().zip(b.iter()) {
                    plane.mapv_inplace(|v| v + bias);
                }
                c
            }
        });
    }

    let high = high.ok_or_else(|| Error::Shape("octave conv produced no high output".into()))?;
    Ok((FreqPair { high, low }, cache))
}

/// Per-path gradients mirroring [`OctaveWeights`].
pub struct OctaveGrads<F> {
    pub dw_hh: Option<Array4<F>>,
    pub dw_hl: Option<Array4<F>>,
    pub dw_lh: Option<Array4<F>>,
    pub dw_ll: Option<Array4<F>>,
    pub db_h: Option<Array1<F>>,
    pub db_l: Option<Array1<F>>,
}

pub fn octave_conv_bwd<F: Scalar>(
    x: &FreqPair<F>,
    w: &OctaveWeights<F>,
    cache: &OctaveCache<F>,
    dy: &FreqPair<F>,
) -> (FreqPair<F>, OctaveGrads<F>) {
    let mut grads = OctaveGrads {
        dw_hh: None,
        dw_hl: None,
        dw_lh: None,
        dw_ll: None,
        db_h: None,
        db_l: None,
    };
    let mut dx_high: Option<Array3<F>> = None;
    let mut dx_low: Option<Array3<F>> = None;

    if let Some(w_hh) = w.w_hh {
        let (dxh, dw, db) = conv2d_bwd(&x.high, w_hh, &dy.high);
        dx_high = Some(dxh);
        grads.dw_hh = Some(dw);
        grads.db_h = Some(db);
    }
    if let (Some(w_lh), Some(low_in)) = (w.w_lh, x.low.as_ref()) {
        let d_pre_up = upsample2_bwd(&dy.high);
        let (dxl, dw, db) = conv2d_bwd(low_in, w_lh, &d_pre_up);
        dx_low = Some(dxl);
        grads.dw_lh = Some(dw);
        if grads.db_h.is_none() {
            grads.db_h = Some(db);
        }
    }
    if let (Some(w_hl), Some(dy_low)) = (w.w_hl, dy.low.as_ref()) {
        let pooled = cache.pooled_high.as_ref().expect("cached pooled high");
        let (d_pooled, dw, db) = conv2d_bwd(pooled, w_hl, dy_low);
        let dxh = avgpool2_bwd(&d_pooled);
        dx_high = Some(match dx_high {
            Some(d) => d + &dxh,
            None => dxh,
        });
        grads.dw_hl = Some(dw);
        grads.db_l = Some(db);
    }
    if let (Some(w_ll), Some(low_in), Some(dy_low)) = (w.w_ll, x.low.as_ref(), dy.low.as_ref()) {
        let (dxl, dw, db) = conv2d_bwd(low_in, w_ll, dy_low);
        dx_low = Some(match dx_low {
            Some(d) => d + &dxl,
            None => dxl,
        });
        grads.dw_ll = Some(dw);
        if grads.db_l.is_none() {
            grads.db_l = Some(db);
        }
    }

    let dx = FreqPair {
        high: dx_high.expect("octave conv always has a high input path"),
        low: dx_low,
    };
    (dx, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd3(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((c, h, w), |_| rng.gen::<f64>() - 0.5)
    }

    fn rnd4(o: usize, i: usize, k: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((o, i, k, k), |_| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn alpha_zero_equals_plain_convolution() {
        let x = FreqPair::from_high(rnd3(3, 8, 8, 1));
        let w_hh = rnd4(5, 3, 3, 2);
        let b_h = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.7]);
        let w = OctaveWeights {
            w_hh: Some(w_hh.view()),
            w_hl: None,
            w_lh: None,
            w_ll: None,
            b_h: Some(b_h.view()),
            b_l: None,
        };
        let (y, _) = octave_conv_fwd(&x, &w).unwrap();
        assert!(y.low.is_none());
        let y_ref = conv2d_fwd(&x.high, w_hh.view(), b_h.view()).unwrap();
        assert_abs_diff_eq!(
            y.high.as_slice().unwrap(),
            y_ref.as_slice().unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn zeroed_cross_paths_decouple_the_branches() {
        let x = FreqPair {
            high: rnd3(4, 8, 8, 3),
            low: Some(rnd3(2, 4, 4, 4)),
        };
        let w_hh = rnd4(3, 4, 3, 5);
        let w_ll = rnd4(2, 2, 3, 6);
        let w_hl = Array4::<f64>::zeros((2, 4, 3, 3));
        let w_lh = Array4::<f64>::zeros((3, 2, 3, 3));
        let b_h = Array1::<f64>::zeros(3);
        let b_l = Array1::<f64>::zeros(2);
        let w = OctaveWeights {
            w_hh: Some(w_hh.view()),
            w_hl: Some(w_hl.view()),
            w_lh: Some(w_lh.view()),
            w_ll: Some(w_ll.view()),
            b_h: Some(b_h.view()),
            b_l: Some(b_l.view()),
        };
        let (y, _) = octave_conv_fwd(&x, &w).unwrap();
        // independent oracle: each branch is its own-path plain convolution
        let high_ref = conv2d_fwd(&x.high, w_hh.view(), b_h.view()).unwrap();
        let low_ref = conv2d_fwd(x.low.as_ref().unwrap(), w_ll.view(), b_l.view()).unwrap();
        assert_abs_diff_eq!(
            y.high.as_slice().unwrap(),
            high_ref.as_slice().unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            y.low.as_ref().unwrap().as_slice().unwrap(),
            low_ref.as_slice().unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn resolutions_are_preserved() {
        let x = FreqPair {
            high: rnd3(2, 32, 32, 7),
            low: Some(rnd3(2, 16, 16, 8)),
        };
        let w_hh = rnd4(2, 2, 3, 9);
        let w_hl = rnd4(2, 2, 3, 10);
        let w_lh = rnd4(2, 2, 3, 11);
        let w_ll = rnd4(2, 2, 3, 12);
        let b = Array1::<f64>::zeros(2);
        let w = OctaveWeights {
            w_hh: Some(w_hh.view()),
            w_hl: Some(w_hl.view()),
            w_lh: Some(w_lh.view()),
            w_ll: Some(w_ll.view()),
            b_h: Some(b.view()),
            b_l: Some(b.view()),
        };
        let (y, _) = octave_conv_fwd(&x, &w).unwrap();
        assert_eq!(y.high.dim(), (2, 32, 32));
        assert_eq!(y.low.as_ref().unwrap().dim(), (2, 16, 16));
    }

    #[test]
    fn mismatched_resolutions_are_a_shape_error() {
        let x = FreqPair {
            high: rnd3(2, 8, 8, 1),
            low: Some(rnd3(2, 5, 5, 2)),
        };
        let w_hh = rnd4(2, 2, 3, 3);
        let b = Array1::<f64>::zeros(2);
        let w = OctaveWeights {
            w_hh: Some(w_hh.view()),
            w_hl: None,
            w_lh: None,
            w_ll: None,
            b_h: Some(b.view()),
            b_l: None,
        };
        assert!(octave_conv_fwd(&x, &w).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = FreqPair {
            high: rnd3(2, 4, 4, 20),
            low: Some(rnd3(2, 2, 2, 21)),
        };
        let w_hh = rnd4(2, 2, 3, 22);
        let w_hl = rnd4(2, 2, 3, 23);
        let w_lh = rnd4(2, 2, 3, 24);
        let w_ll = rnd4(2, 2, 3, 25);
        let b_h = Array1::from_vec(vec![0.1, -0.1]);
        let b_l = Array1::from_vec(vec![0.2, 0.0]);
        let weights = |whh: &Array4<f64>| OctaveWeights {
            w_hh: Some(whh.view()),
            w_hl: Some(w_hl.view()),
            w_lh: Some(w_lh.view()),
            w_ll: Some(w_ll.view()),
            b_h: Some(b_h.view()),
            b_l: Some(b_l.view()),
        };
        let th = rnd3(2, 4, 4, 26);
        let tl = rnd3(2, 2, 2, 27);
        let f = |x: &FreqPair<f64>, whh: &Array4<f64>| {
            let (y, _) = octave_conv_fwd(x, &weights(whh)).unwrap();
            (&y.high * &th).sum() + (y.low.as_ref().unwrap() * &tl).sum()
        };
        let w = weights(&w_hh);
        let (_, cache) = octave_conv_fwd(&x, &w).unwrap();
        let dy = FreqPair {
            high: th.clone(),
            low: Some(tl.clone()),
        };
        let (dx, grads) = octave_conv_bwd(&x, &w, &cache, &dy);
        let h = 1e-6;

        let mut xp = x.clone();
        xp.high[[1, 2, 3]] += h;
        assert_abs_diff_eq!(dx.high[[1, 2, 3]], (f(&xp, &w_hh) - f(&x, &w_hh)) / h, epsilon = 1e-5);

        let mut xp = x.clone();
        xp.low.as_mut().unwrap()[[0, 1, 1]] += h;
        assert_abs_diff_eq!(
            dx.low.as_ref().unwrap()[[0, 1, 1]],
            (f(&xp, &w_hh) - f(&x, &w_hh)) / h,
            epsilon = 1e-5
        );

        let mut wp = w_hh.clone();
        wp[[1, 0, 2, 1]] += h;
        assert_abs_diff_eq!(
            grads.dw_hh.as_ref().unwrap()[[1, 0, 2, 1]],
            (f(&x, &wp) - f(&x, &w_hh)) / h,
            epsilon = 1e-5
        );
    }
}
