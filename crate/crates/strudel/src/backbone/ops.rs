//! Low-level differentiable tensor ops for the segmentation backbones.
//!
//! Feature maps are `Array3<F>` in (channels, height, width) layout. Every op
//! comes as a `_fwd` returning the output (plus whatever cache its `_bwd`
//! needs) and a `_bwd` mapping the upstream gradient to input/parameter
//! gradients. All reductions run in a fixed order, so results are
//! deterministic regardless of call context.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView4, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Float scalar the network math is generic over. Training uses `f32`;
/// finite-difference gradient checks instantiate the same code with `f64`.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Lowers a (C,H,W) map into a (C*k*k, H*W) matrix for same-padding
/// convolution with a k x k kernel, k odd. Row `c*k*k + di*k + dj` holds the
/// input channel `c` shifted by (di - k/2, dj - k/2) with zero fill.
fn im2col<F: Scalar>(x: &Array3<F>, k: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let r = (k / 2) as isize;
    let mut cols = Array2::<F>::zeros((c * k * k, h * w));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let oi = di as isize - r;
                let oj = dj as isize - r;
                // destination rows overlapping the valid source region
                let (dst_i0, src_i0) = if oi < 0 { ((-oi) as usize, 0) } else { (0, oi as usize) };
                let (dst_j0, src_j0) = if oj < 0 { ((-oj) as usize, 0) } else { (0, oj as usize) };
                let ni = (h - src_i0).min(h - dst_i0);
                let nj = (w - src_j0).min(w - dst_j0);
                let mut row = cols.row_mut(ci * k * k + di * k + dj);
                let mut dst = row
                    .view_mut()
                    .into_shape((h, w))
                    .expect("row reshapes to (h, w)");
                dst.slice_mut(s![dst_i0..dst_i0 + ni, dst_j0..dst_j0 + nj])
                    .assign(&x.slice(s![ci, src_i0..src_i0 + ni, src_j0..src_j0 + nj]));
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a (C*k*k, H*W) matrix back to (C,H,W).
fn col2im<F: Scalar>(dcols: &Array2<F>, c: usize, h: usize, w: usize, k: usize) -> Array3<F> {
    let r = (k / 2) as isize;
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let oi = di as isize - r;
                let oj = dj as isize - r;
                let (dst_i0, src_i0) = if oi < 0 { ((-oi) as usize, 0) } else { (0, oi as usize) };
                let (dst_j0, src_j0) = if oj < 0 { ((-oj) as usize, 0) } else { (0, oj as usize) };
                let ni = (h - src_i0).min(h - dst_i0);
                let nj = (w - src_j0).min(w - dst_j0);
                let row = dcols.row(ci * k * k + di * k + dj);
                let src = row.into_shape((h, w)).expect("row reshapes to (h, w)");
                Zip::from(dx.slice_mut(s![ci, src_i0..src_i0 + ni, src_j0..src_j0 + nj]))
                    .and(src.slice(s![dst_i0..dst_i0 + ni, dst_j0..dst_j0 + nj]))
                    .for_each(|d, &g| *d = *d + g);
            }
        }
    }
    dx
}

/// Same-padding convolution, stride 1, odd kernel (1x1 and 3x3 in practice).
/// Weights are (C_out, C_in, k, k); bias is (C_out).
pub fn conv2d_fwd<F: Scalar>(
    x: &Array3<F>,
    w: ArrayView4<F>,
    b: ArrayView1<F>,
) -> Result<Array3<F>> {
    let (ci, h, wd) = x.dim();
    let (co, wci, k, k2) = w.dim();
    if wci != ci || k != k2 {
        return Err(Error::Shape(format!(
            "conv2d: input has {ci} channels, weights expect {wci} (kernel {k}x{k2})"
        )));
    }
    let wmat = w.into_shape((co, ci * k * k)).expect("contiguous weights");
    let ymat = if k == 1 {
        let xmat = x.view().into_shape((ci, h * wd)).expect("contiguous input");
        wmat.dot(&xmat)
    } else {
        let cols = im2col(x, k);
        wmat.dot(&cols)
    };
    let mut y = ymat.into_shape((co, h, wd)).expect("gemm output is contiguous");
    for (mut plane, &bias) in y.outer_iter_mut().zip(b.iter()) {
        plane.mapv_inplace(|v| v + bias);
    }
    Ok(y)
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, weights, and bias.
pub fn conv2d_bwd<F: Scalar>(
    x: &Array3<F>,
    w: ArrayView4<F>,
    dy: &Array3<F>,
) -> (Array3<F>, Array4<F>, Array1<F>) {
    let (ci, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let wmat = w.into_shape((co, ci * k * k)).expect("contiguous weights");
    let dymat = dy.view().into_shape((co, h * wd)).expect("contiguous grad");
    let db = dy.sum_axis(Axis(2)).sum_axis(Axis(1));
    if k == 1 {
        let xmat = x.view().into_shape((ci, h * wd)).expect("contiguous input");
        let dw = dymat.dot(&xmat.t());
        let dx = wmat.t().dot(&dymat);
        (
            dx.into_shape((ci, h, wd)).expect("shape"),
            dw.into_shape((co, ci, 1, 1)).expect("shape"),
            db,
        )
    } else {
        let cols = im2col(x, k);
        let dw = dymat.dot(&cols.t());
        let dcols = wmat.t().dot(&dymat);
        (
            col2im(&dcols, ci, h, wd, k),
            dw.into_shape((co, ci, k, k)).expect("shape"),
            db,
        )
    }
}

/// Cache for the group-normalization backward pass.
pub struct GnCache<F> {
    pub xhat: Array3<F>,
    pub inv_std: Vec<F>,
    pub groups: usize,
}

const GN_EPS: f64 = 1e-5;

/// Picks the largest divisor of `channels` not exceeding the requested group
/// count, so odd channel splits (octave branches) normalize cleanly.
pub fn effective_groups(channels: usize, requested: usize) -> usize {
    (1..=requested.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Group normalization over (channel-group, H, W) per sample, then per-channel
/// affine. Batch-independent by construction.
pub fn group_norm_fwd<F: Scalar>(
    x: &Array3<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
    groups: usize,
) -> (Array3<F>, GnCache<F>) {
    let (c, h, w) = x.dim();
    debug_assert_eq!(c % groups, 0);
    let per = c / groups;
    let n = F::from_f64((per * h * w) as f64);
    let eps = F::from_f64(GN_EPS);
    let mut xhat = Array3::<F>::zeros((c, h, w));
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let sl = s![g * per..(g + 1) * per, .., ..];
        let xg = x.slice(sl);
        let mean = xg.sum() / n;
        let var = xg.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let istd = F::one() / (var + eps).sqrt();
        inv_std.push(istd);
        Zip::from(xhat.slice_mut(sl))
            .and(xg)
            .for_each(|o, &v| *o = (v - mean) * istd);
    }
    let mut y = xhat.clone();
    for cc in 0..c {
        let ga = gamma[cc];
        let be = beta[cc];
        y.index_axis_mut(Axis(0), cc).mapv_inplace(|v| v * ga + be);
    }
    (
        y,
        GnCache {
            xhat,
            inv_std,
            groups,
        },
    )
}

pub fn group_norm_bwd<F: Scalar>(
    cache: &GnCache<F>,
    gamma: ArrayView1<F>,
    dy: &Array3<F>,
) -> (Array3<F>, Array1<F>, Array1<F>) {
    let (c, h, w) = dy.dim();
    let groups = cache.groups;
    let per = c / groups;
    let n = F::from_f64((per * h * w) as f64);
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    for cc in 0..c {
        let dyc = dy.index_axis(Axis(0), cc);
        let xc = cache.xhat.index_axis(Axis(0), cc);
        dbeta[cc] = dyc.sum();
        dgamma[cc] = Zip::from(dyc).and(xc).fold(F::zero(), |a, &d, &xh| a + d * xh);
    }
    let mut dx = Array3::<F>::zeros((c, h, w));
    for g in 0..groups {
        let sl = s![g * per..(g + 1) * per, .., ..];
        let xh = cache.xhat.slice(sl);
        // dxhat = dy * gamma (per channel)
        let mut dxh = dy.slice(sl).to_owned();
        for (k, mut plane) in dxh.outer_iter_mut().enumerate() {
            let ga = gamma[g * per + k];
            plane.mapv_inplace(|v| v * ga);
        }
        let sum_dxh = dxh.sum();
        let sum_dxh_xh = Zip::from(&dxh).and(xh).fold(F::zero(), |a, &d, &x| a + d * x);
        let istd = cache.inv_std[g];
        Zip::from(dx.slice_mut(sl))
            .and(&dxh)
            .and(xh)
            .for_each(|o, &d, &x| {
                *o = istd * (d - (sum_dxh + x * sum_dxh_xh) / n);
            });
    }
    (dx, dgamma, dbeta)
}

pub fn relu_fwd<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// `y` is the forward output; gradient flows only where it was positive.
pub fn relu_bwd<F: Scalar>(y: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// Channel-wise (spatial) dropout with inverted scaling. Returns the kept
/// channel flags; `rate == 0` keeps everything and is an exact identity.
pub fn spatial_dropout_fwd<F: Scalar>(
    x: &Array3<F>,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> (Array3<F>, Vec<bool>) {
    let c = x.dim().0;
    if rate == 0.0 {
        return (x.clone(), vec![true; c]);
    }
    let keep: Vec<bool> = (0..c).map(|_| rng.gen::<f64>() >= rate).collect();
    let scale = F::from_f64(1.0 / (1.0 - rate));
    let mut y = x.clone();
    for (cc, mut plane) in y.outer_iter_mut().enumerate() {
        if keep[cc] {
            plane.mapv_inplace(|v| v * scale);
        } else {
            plane.fill(F::zero());
        }
    }
    (y, keep)
}

pub fn spatial_dropout_bwd<F: Scalar>(dy: &Array3<F>, keep: &[bool], rate: f64) -> Array3<F> {
    if rate == 0.0 {
        return dy.clone();
    }
    let scale = F::from_f64(1.0 / (1.0 - rate));
    let mut dx = dy.clone();
    for (cc, mut plane) in dx.outer_iter_mut().enumerate() {
        if keep[cc] {
            plane.mapv_inplace(|v| v * scale);
        } else {
            plane.fill(F::zero());
        }
    }
    dx
}

/// 2x2 max pooling, stride 2. Returns the within-window argmax (0..4, row
/// major) for the backward routing; ties resolve to the first maximum.
pub fn maxpool2_fwd<F: Scalar>(x: &Array3<F>) -> Result<(Array3<F>, Array3<u8>)> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2: spatial size {h}x{w} is not divisible by 2"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::<F>::zeros((c, oh, ow));
    let mut arg = Array3::<u8>::zeros((c, oh, ow));
    for cc in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = x[[cc, 2 * i, 2 * j]];
                let mut bi = 0u8;
                for (idx, (di, dj)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = x[[cc, 2 * i + di, 2 * j + dj]];
                    if v > best {
                        best = v;
                        bi = idx as u8 + 1;
                    }
                }
                y[[cc, i, j]] = best;
                arg[[cc, i, j]] = bi;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_bwd<F: Scalar>(dy: &Array3<F>, arg: &Array3<u8>) -> Array3<F> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::<F>::zeros((c, oh * 2, ow * 2));
    for cc in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let a = arg[[cc, i, j]] as usize;
                let (di, dj) = (a / 2, a % 2);
                dx[[cc, 2 * i + di, 2 * j + dj]] = dy[[cc, i, j]];
            }
        }
    }
    dx
}

/// 2x2 average pooling, stride 2.
pub fn avgpool2_fwd<F: Scalar>(x: &Array3<F>) -> Result<Array3<F>> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "avgpool2: spatial size {h}x{w} is not divisible by 2"
        )));
    }
    let quarter = F::from_f64(0.25);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::<F>::zeros((c, oh, ow));
    for cc in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                y[[cc, i, j]] = (x[[cc, 2 * i, 2 * j]]
                    + x[[cc, 2 * i, 2 * j + 1]]
                    + x[[cc, 2 * i + 1, 2 * j]]
                    + x[[cc, 2 * i + 1, 2 * j + 1]])
                    * quarter;
            }
        }
    }
    Ok(y)
}

pub fn avgpool2_bwd<F: Scalar>(dy: &Array3<F>) -> Array3<F> {
    let (c, oh, ow) = dy.dim();
    let quarter = F::from_f64(0.25);
    let mut dx = Array3::<F>::zeros((c, oh * 2, ow * 2));
    for cc in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let g = dy[[cc, i, j]] * quarter;
                dx[[cc, 2 * i, 2 * j]] = g;
                dx[[cc, 2 * i, 2 * j + 1]] = g;
                dx[[cc, 2 * i + 1, 2 * j]] = g;
                dx[[cc, 2 * i + 1, 2 * j + 1]] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_fwd<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<F>::zeros((c, h * 2, w * 2));
    for cc in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[[cc, i, j]];
                y[[cc, 2 * i, 2 * j]] = v;
                y[[cc, 2 * i, 2 * j + 1]] = v;
                y[[cc, 2 * i + 1, 2 * j]] = v;
                y[[cc, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    y
}

/// Adjoint of nearest upsampling: sums each 2x2 block.
pub fn upsample2_bwd<F: Scalar>(dy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for cc in 0..c {
        for i in 0..h {
            for j in 0..w {
                dx[[cc, i, j]] = dy[[cc, 2 * i, 2 * j]]
                    + dy[[cc, 2 * i, 2 * j + 1]]
                    + dy[[cc, 2 * i + 1, 2 * j]]
                    + dy[[cc, 2 * i + 1, 2 * j + 1]];
            }
        }
    }
    dx
}

/// Concatenates two feature maps along the channel axis.
pub fn concat_ch<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Array3<F> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_ch<F: Scalar>(dy: &Array3<F>, first: usize) -> (Array3<F>, Array3<F>) {
    let a = dy.slice(s![..first, .., ..]).to_owned();
    let b = dy.slice(s![first.., .., ..]).to_owned();
    (a, b)
}

/// Probability squash for the network head. Output is clamped away from
/// exactly 0 and 1 so that downstream logarithms stay finite.
pub const PROB_CLAMP: f64 = 1e-6;

pub fn sigmoid_fwd<F: Scalar>(z: &Array3<F>) -> Array3<F> {
    let lo = F::from_f64(PROB_CLAMP);
    let hi = F::from_f64(1.0 - PROB_CLAMP);
    z.mapv(|v| {
        let p = F::one() / (F::one() + (-v).exp());
        p.max(lo).min(hi)
    })
}

/// `y` is the forward output. Clamped pixels still pass the sigmoid slope,
/// which is vanishingly small there.
pub fn sigmoid_bwd<F: Scalar>(y: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
    let mut dz = dy.clone();
    Zip::from(&mut dz).and(y).for_each(|d, &p| {
        *d = *d * p * (F::one() - p);
    });
    dz
}
