//! Concurrent channel and spatial squeeze-excitation recalibration.
//!
//! The channel branch gates each channel by a sigmoid of a two-layer
//! bottleneck over the globally pooled channel descriptor; the spatial branch
//! gates each pixel by a sigmoid of a 1x1 convolution. The two gated copies
//! combine by element-wise maximum.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};

use super::ops::Scalar;
use crate::error::{Error, Result};

/// Weight views for one scSE block: the channel bottleneck (`w1`: C -> C/r,
/// `w2`: C/r -> C) and the spatial 1x1 projection (`ws`: C -> 1).
#[derive(Clone, Copy)]
pub struct ScseWeights<'a, F> {
    pub w1: ArrayView2<'a, F>,
    pub b1: ArrayView1<'a, F>,
    pub w2: ArrayView2<'a, F>,
    pub b2: ArrayView1<'a, F>,
    pub ws: ArrayView1<'a, F>,
    pub bs: F,
}

pub struct ScseCache<F> {
    pooled: Array1<F>,
    hidden: Array1<F>,       // post-ReLU bottleneck activations
    channel_gate: Array1<F>, // sigmoid, per channel
    spatial_gate: Array2<F>, // sigmoid, per pixel
}

fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Forward pass; output has the same shape as the input.
pub fn scse_fwd<F: Scalar>(
    x: &Array3<F>,
    w: &ScseWeights<F>,
) -> Result<(Array3<F>, ScseCache<F>)> {
    let (c, h, wd) = x.dim();
    let (cr, wc) = w.w1.dim();
    if wc != c || w.w2.dim() != (c, cr) || w.ws.len() != c {
        return Err(Error::Shape(format!(
            "scse: weights sized for {wc} channels, input has {c}"
        )));
    }
    let npix = F::from_f64((h * wd) as f64);

    // channel squeeze: global average pool
    let pooled: Array1<F> = x.map_axis(Axis(2), |v| v.sum()).map_axis(Axis(1), |v| v.sum()) / npix;
    let mut hidden = w.w1.dot(&pooled) + &w.b1;
    hidden.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    let mut channel_gate = w.w2.dot(&hidden) + &w.b2;
    channel_gate.mapv_inplace(sigmoid);

    // spatial squeeze: 1x1 projection across channels
    let mut spatial_gate = Array2::<F>::zeros((h, wd));
    for cc in 0..c {
        let wk = w.ws[cc];
        Zip::from(&mut spatial_gate)
            .and(x.index_axis(Axis(0), cc))
            .for_each(|g, &v| *g = *g + wk * v);
    }
    spatial_gate.mapv_inplace(|v| sigmoid(v + w.bs));

    let mut y = Array3::<F>::zeros((c, h, wd));
    for cc in 0..c {
        let g_c = channel_gate[cc];
        Zip::from(y.index_axis_mut(Axis(0), cc))
            .and(x.index_axis(Axis(0), cc))
            .and(&spatial_gate)
            .for_each(|o, &v, &g_s| {
                *o = (v * g_c).max(v * g_s);
            });
    }
    Ok((
        y,
        ScseCache {
            pooled,
            hidden,
            channel_gate,
            spatial_gate,
        },
    ))
}

pub struct ScseGrads<F> {
    pub dw1: Array2<F>,
    pub db1: Array1<F>,
    pub dw2: Array2<F>,
    pub db2: Array1<F>,
    pub dws: Array1<F>,
    pub dbs: F,
}

/// Backward pass. At the element-wise max, gradient follows the winning
/// branch; exact ties route to the channel branch.
pub fn scse_bwd<F: Scalar>(
    x: &Array3<F>,
    w: &ScseWeights<F>,
    cache: &ScseCache<F>,
    dy: &Array3<F>,
) -> (Array3<F>, ScseGrads<F>) {
    let (c, h, wd) = x.dim();
    let npix = F::from_f64((h * wd) as f64);
    let mut dx = Array3::<F>::zeros((c, h, wd));
    let mut d_channel_gate = Array1::<F>::zeros(c);
    let mut d_spatial_gate = Array2::<F>::zeros((h, wd));

    for cc in 0..c {
        let g_c = cache.channel_gate[cc];
        let xc = x.index_axis(Axis(0), cc);
        let dyc = dy.index_axis(Axis(0), cc);
        let mut dxc = dx.index_axis_mut(Axis(0), cc);
        let mut dgc = F::zero();
        Zip::from(&mut dxc)
            .and(xc)
            .and(dyc)
            .and(&cache.spatial_gate)
            .and(&mut d_spatial_gate)
            .for_each(|dxv, &v, &d, &g_s, dgs| {
                if v * g_c >= v * g_s {
                    *dxv = d * g_c;
                    dgc = dgc + d * v;
                } else {
                    *dxv = d * g_s;
                    *dgs = *dgs + d * v;
                }
            });
        d_channel_gate[cc] = dgc;
    }

    // channel branch chain
    let da2: Array1<F> = Zip::from(&d_channel_gate)
        .and(&cache.channel_gate)
        .map_collect(|&d, &g| d * g * (F::one() - g));
    let dw2 = {
        let mut dw2 = Array2::<F>::zeros(w.w2.dim());
        for i in 0..dw2.dim().0 {
            for j in 0..dw2.dim().1 {
                dw2[[i, j]] = da2[i] * cache.hidden[j];
            }
        }
        dw2
    };
    let db2 = da2.clone();
    let mut dh = w.w2.t().dot(&da2);
    Zip::from(&mut dh).and(&cache.hidden).for_each(|d, &hv| {
        if hv <= F::zero() {
            *d = F::zero();
        }
    });
    let dw1 = {
        let mut dw1 = Array2::<F>::zeros(w.w1.dim());
        for i in 0..dw1.dim().0 {
            for j in 0..dw1.dim().1 {
                dw1[[i, j]] = dh[i] * cache.pooled[j];
            }
        }
        dw1
    };
    let db1 = dh.clone();
    let dpooled = w.w1.t().dot(&dh);
    for cc in 0..c {
        let g = dpooled[cc] / npix;
        dx.index_axis_mut(Axis(0), cc).mapv_inplace(|v| v + g);
    }

    // spatial branch chain
    let das: Array2<F> = Zip::from(&d_spatial_gate)
        .and(&cache.spatial_gate)
        .map_collect(|&d, &g| d * g * (F::one() - g));
    let mut dws = Array1::<F>::zeros(c);
    for cc in 0..c {
        let xc = x.index_axis(Axis(0), cc);
        dws[cc] = Zip::from(&das).and(xc).fold(F::zero(), |a, &d, &v| a + d * v);
        let wk = w.ws[cc];
        Zip::from(dx.index_axis_mut(Axis(0), cc))
            .and(&das)
            .for_each(|o, &d| *o = *o + d * wk);
    }
    let dbs = das.sum();

    (
        dx,
        ScseGrads {
            dw1,
            db1,
            dw2,
            db2,
            dws,
            dbs,
        },
    )
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
        Array::from_shape_fn((c, h, w), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    struct Owned {
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        ws: Array1<f64>,
        bs: f64,
    }

    impl Owned {
        fn new(c: usize, r: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Owned {
                w1: Array::from_shape_fn((c / r, c), |_| rng.gen::<f64>() - 0.5),
                b1: Array::from_shape_fn(c / r, |_| rng.gen::<f64>() - 0.5),
                w2: Array::from_shape_fn((c, c / r), |_| rng.gen::<f64>() - 0.5),
                b2: Array::from_shape_fn(c, |_| rng.gen::<f64>() - 0.5),
                ws: Array::from_shape_fn(c, |_| rng.gen::<f64>() - 0.5),
                bs: rng.gen::<f64>() - 0.5,
            }
        }

        fn view(&self) -> ScseWeights<'_, f64> {
            ScseWeights {
                w1: self.w1.view(),
                b1: self.b1.view(),
                w2: self.w2.view(),
                b2: self.b2.view(),
                ws: self.ws.view(),
                bs: self.bs,
            }
        }
    }

    #[test]
    fn saturated_gates_pass_input_through() {
        let c = 4;
        let x = rnd3(c, 5, 5, 1);
        let mut w = Owned::new(c, 2, 2);
        w.w1.fill(0.0);
        w.w2.fill(0.0);
        w.ws.fill(0.0);
        w.b2.fill(50.0); // channel gate -> 1
        w.bs = 50.0; // spatial gate -> 1
        let (y, _) = scse_fwd(&x, &w.view()).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Array3::<f64>::zeros((4, 3, 3));
        let w = Owned::new(4, 2, 3);
        let (y, _) = scse_fwd(&x, &w.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_never_exceeds_input_magnitude() {
        let x = rnd3(4, 6, 6, 4);
        let w = Owned::new(4, 2, 5);
        let (y, _) = scse_fwd(&x, &w.view()).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!(a.abs() <= b.abs() + 1e-12);
        }
    }

    #[test]
    fn indivisible_channels_rejected_at_weight_shape() {
        // weights built for 4 channels cannot gate a 6-channel input
        let x = rnd3(6, 4, 4, 6);
        let w = Owned::new(4, 2, 7);
        assert!(scse_fwd(&x, &w.view()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = 4;
        let x = rnd3(c, 4, 4, 8);
        let w = Owned::new(c, 2, 9);
        let tgt = rnd3(c, 4, 4, 10);
        let f = |x: &Array3<f64>, w: &Owned| {
            let (y, _) = scse_fwd(x, &w.view()).unwrap();
            (&y * &tgt).sum()
        };
        let (_, cache) = scse_fwd(&x, &w.view()).unwrap();
        let (dx, grads) = scse_bwd(&x, &w.view(), &cache, &tgt);
        let h = 1e-6;
        let base = f(&x, &w);

        let mut xp = x.clone();
        xp[[2, 1, 3]] += h;
        assert_abs_diff_eq!(dx[[2, 1, 3]], (f(&xp, &w) - base) / h, epsilon = 1e-4);

        let mut wp = Owned::new(c, 2, 9);
        wp.w1[[1, 2]] += h;
        assert_abs_diff_eq!(grads.dw1[[1, 2]], (f(&x, &wp) - base) / h, epsilon = 1e-4);

        let mut wp = Owned::new(c, 2, 9);
        wp.w2[[3, 0]] += h;
        assert_abs_diff_eq!(grads.dw2[[3, 0]], (f(&x, &wp) - base) / h, epsilon = 1e-4);

        let mut wp = Owned::new(c, 2, 9);
        wp.ws[2] += h;
        assert_abs_diff_eq!(grads.dws[2], (f(&x, &wp) - base) / h, epsilon = 1e-4);

        let mut wp = Owned::new(c, 2, 9);
        wp.bs += h;
        assert_abs_diff_eq!(grads.dbs, (f(&x, &wp) - base) / h, epsilon = 1e-4);
    }
}
