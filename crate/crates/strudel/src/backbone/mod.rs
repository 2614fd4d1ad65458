//! Dropout-instrumented encoder-decoder segmentation backbones.
//!
//! Two architectures share one forward/training contract: a plain U-Net and
//! OctSE-Net, which swaps every convolution for an octave convolution and
//! recalibrates each block with a concurrent channel/spatial
//! squeeze-excitation gate. Depth counts the 2x downsampling steps, so the
//! input spatial size must be divisible by `2^depth` (and, for OctSE-Net's
//! half-resolution branch, by `2^(depth+1)`).

mod adam;
pub mod checkpoint;
mod net;
mod octave;
pub mod ops;
mod scse;
mod train;

pub use net::Network;
pub use octave::{octave_conv_bwd, octave_conv_fwd, octave_split, FreqPair, OctaveWeights};
pub use ops::{effective_groups, Scalar};
pub use scse::{scse_bwd, scse_fwd, ScseWeights};
pub use train::{train, EpochLoss, TrainOptions};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView1, ArrayView4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::seed;

/// Which encoder-decoder variant to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Unet,
    Octse,
}

/// Architecture hyperparameters.
///
/// `octave_alpha` and `se_reduction` only affect [`BackboneKind::Octse`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Number of 2x downsampling steps (encoder levels).
    pub depth: usize,
    /// Channels at the first encoder level; doubles per level.
    pub base_channels: usize,
    /// Spatial dropout rate after each conv block.
    pub dropout_rate: f64,
    /// Fraction of low-frequency channels in octave convolutions.
    pub octave_alpha: f64,
    /// Channel reduction ratio in the squeeze-excitation gates.
    pub se_reduction: usize,
    /// Requested group count for the batch-independent normalization layers
    /// (clamped per layer to the largest divisor of the channel count).
    pub norm_groups: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            kind: BackboneKind::Unet,
            depth: 3,
            base_channels: 16,
            dropout_rate: 0.2,
            octave_alpha: 0.5,
            se_reduction: 2,
            norm_groups: 4,
        }
    }
}

impl BackboneSpec {
    pub fn unet() -> Self {
        Self::default()
    }

    pub fn octse() -> Self {
        BackboneSpec {
            kind: BackboneKind::Octse,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!(
                "base_channels must be >= 4, got {}",
                self.base_channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if !(0.0..1.0).contains(&self.octave_alpha) {
            return Err(Error::Config(format!(
                "octave_alpha must be in [0,1), got {}",
                self.octave_alpha
            )));
        }
        if self.se_reduction == 0 || self.norm_groups == 0 {
            return Err(Error::Config(
                "se_reduction and norm_groups must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Channel count at encoder level `i` (0-based); the bottleneck sits at
    /// level `depth`.
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// All learnable weights of a backbone, keyed by layer-path names in a
/// deterministic (sorted) order, with the spec and creation seed embedded.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParamsT<F: Scalar> {
    pub spec: BackboneSpec,
    pub seed: u64,
    tensors: BTreeMap<String, ArrayD<F>>,
}

/// The concrete parameter type used for training and checkpoints.
pub type ModelParams = ModelParamsT<f32>;

impl<F: Scalar> ModelParamsT<F> {
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn tensor(&self, name: &str) -> &ArrayD<F> {
        &self.tensors[name]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        self.tensors.get_mut(name).expect("unknown tensor name")
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn insert(&mut self, name: &str, t: ArrayD<F>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub(crate) fn view4(&self, name: &str) -> ArrayView4<F> {
        self.tensors[name]
            .view()
            .into_dimensionality()
            .expect("tensor is 4-d")
    }

    pub(crate) fn view1(&self, name: &str) -> ArrayView1<F> {
        self.tensors[name]
            .view()
            .into_dimensionality()
            .expect("tensor is 1-d")
    }

    /// True iff every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// A cheap order-sensitive digest of the parameter values, used to stamp
    /// derived artifacts (e.g. MC sample stacks) with their source model.
    pub fn fingerprint(&self) -> u64 {
        let mut h = seed::derive(self.seed, "fingerprint", 0);
        for (name, t) in &self.tensors {
            h = seed::derive(h, name, t.len() as u64);
            for v in t.iter() {
                h = h
                    .rotate_left(17)
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    ^ v.to_f64().to_bits();
            }
        }
        h
    }

    /// Converts the parameter values to another scalar type.
    pub fn cast<G: Scalar>(&self) -> ModelParamsT<G> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.mapv(|x| G::from_f64(x.to_f64()))))
            .collect();
        ModelParamsT {
            spec: self.spec,
            seed: self.seed,
            tensors,
        }
    }
}

/// Gradient (or optimizer-moment) storage shaped like a parameter set.
pub(crate) struct GradStore<F: Scalar> {
    grads: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn zeros_like(params: &ModelParamsT<F>) -> Self {
        let grads = params
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect();
        GradStore { grads }
    }

    pub fn add(&mut self, name: &str, g: ArrayD<F>) {
        *self.grads.get_mut(name).expect("unknown grad name") += &g;
    }

    pub fn add4(&mut self, name: &str, g: Array4<F>) {
        self.add(name, g.into_dyn());
    }

    pub fn add1(&mut self, name: &str, g: Array1<F>) {
        self.add(name, g.into_dyn());
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        &self.grads[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scale(&mut self, f: F) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * f);
        }
    }

    pub fn accumulate(&mut self, other: &GradStore<F>) {
        for (k, g) in &mut self.grads {
            *g += &other.grads[k];
        }
    }
}

/// Deterministically initializes a model: fan-in-scaled normal weights, zero
/// biases, unit normalization gains. Each tensor's values depend only on
/// `(seed, tensor name)`.
pub fn init_model(spec: &BackboneSpec, seed: u64) -> Result<ModelParams> {
    init_model_t::<f32>(spec, seed)
}

/// Generic-precision variant of [`init_model`].
pub fn init_model_t<F: Scalar>(spec: &BackboneSpec, seed: u64) -> Result<ModelParamsT<F>> {
    spec.validate()?;
    let net = Network::build(spec)?;
    let mut params = ModelParamsT {
        spec: *spec,
        seed,
        tensors: BTreeMap::new(),
    };
    for decl in net.tensor_decls() {
        let t = match decl.init {
            TensorInit::FanIn(fan_in) => {
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = seed::rng(seed, &decl.name, 0);
                sample_normal::<F>(&decl.shape, std, &mut rng)
            }
            TensorInit::Zero => ArrayD::zeros(IxDyn(&decl.shape)),
            TensorInit::One => ArrayD::ones(IxDyn(&decl.shape)),
        };
        params.tensors.insert(decl.name, t);
    }
    Ok(params)
}

fn sample_normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64(z * std)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data length")
}

/// How a declared tensor is initialized.
#[derive(Debug, Clone)]
pub(crate) enum TensorInit {
    /// Normal with std `sqrt(2 / fan_in)`.
    FanIn(usize),
    Zero,
    One,
}

/// A named tensor the network graph expects to find in its parameter set.
#[derive(Debug, Clone)]
pub(crate) struct TensorDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: TensorInit,
}

impl TensorDecl {
    pub fn conv(name: &str, co: usize, ci: usize, k: usize) -> [TensorDecl; 2] {
        [
            TensorDecl {
                name: format!("{name}.w"),
                shape: vec![co, ci, k, k],
                init: TensorInit::FanIn(ci * k * k),
            },
            TensorDecl {
                name: format!("{name}.b"),
                shape: vec![co],
                init: TensorInit::Zero,
            },
        ]
    }

    pub fn norm(name: &str, c: usize) -> [TensorDecl; 2] {
        [
            TensorDecl {
                name: format!("{name}.g"),
                shape: vec![c],
                init: TensorInit::One,
            },
            TensorDecl {
                name: format!("{name}.b"),
                shape: vec![c],
                init: TensorInit::Zero,
            },
        ]
    }
}

/// Runs the network on a batch of single-channel images without tracking
/// gradients. With `dropout_active = false` the result is a pure function of
/// `(params, batch)`; with `true`, spatial dropout stays on and consumes
/// `draw` (the test-time sampling mode used for MC uncertainty).
pub fn forward(
    params: &ModelParams,
    batch: &[Grid],
    dropout_active: bool,
    draw: &mut ChaCha8Rng,
) -> Result<Vec<Grid>> {
    let net = Network::build(&params.spec)?;
    let mut out = Vec::with_capacity(batch.len());
    for img in batch {
        let x = image_to_input::<f32>(img);
        net.check_input(&x)?;
        let dropout_seed = if dropout_active {
            Some(draw.gen::<u64>())
        } else {
            None
        };
        let p = net.forward_infer(params, &x, dropout_seed)?;
        out.push(p.mapv(|v| v.to_f64()));
    }
    Ok(out)
}

pub(crate) fn image_to_input<F: Scalar>(img: &Grid) -> Array3<F> {
    let (h, w) = img.dim();
    let mut x = Array3::<F>::zeros((1, h, w));
    for ((i, j), &v) in img.indexed_iter() {
        x[[0, i, j]] = F::from_f64(v);
    }
    x
}

pub(crate) fn output_to_grid<F: Scalar>(p: &Array2<F>) -> Grid {
    p.mapv(|v| v.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::Array2;
    use rand_chacha::rand_core::SeedableRng;

    fn flat_image(h: usize, w: usize, seed: u64) -> Grid {
        let mut rng = seed::rng(seed, "img", 0);
        Array2::from_shape_fn((h, w), |_| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = BackboneSpec::unet();
        let a = init_model(&spec, 7).unwrap();
        let b = init_model(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = init_model(&spec, 8).unwrap();
        assert!(a.iter().zip(c.iter()).any(|((_, ta), (_, tc))| ta != tc));
    }

    #[test]
    fn invalid_spec_is_a_config_error() {
        let spec = BackboneSpec {
            depth: 1,
            ..BackboneSpec::unet()
        };
        assert!(matches!(init_model(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_and_range_for_both_kinds() {
        for spec in [
            BackboneSpec {
                base_channels: 4,
                ..BackboneSpec::unet()
            },
            BackboneSpec {
                base_channels: 4,
                ..BackboneSpec::octse()
            },
        ] {
            let params = init_model(&spec, 3).unwrap();
            let img = flat_image(16, 16, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = forward(&params, &[img.clone()], false, &mut rng).unwrap();
            assert_eq!(out[0].dim(), (16, 16));
            assert!(out[0].iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn forward_without_dropout_is_deterministic() {
        let spec = BackboneSpec {
            base_channels: 4,
            ..BackboneSpec::unet()
        };
        let params = init_model(&spec, 3).unwrap();
        let img = flat_image(8, 8, 2);
        let mut rng1 = ChaCha8Rng::seed_from_u64(1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let a = forward(&params, &[img.clone()], false, &mut rng1).unwrap();
        let b = forward(&params, &[img], false, &mut rng2).unwrap();
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn indivisible_spatial_size_is_a_shape_error() {
        let spec = BackboneSpec {
            base_channels: 4,
            ..BackboneSpec::unet()
        };
        let params = init_model(&spec, 3).unwrap();
        let img = flat_image(12, 12, 2); // 12 not divisible by 2^3
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            forward(&params, &[img], false, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn octse_parameter_count_close_to_unet() {
        let unet = init_model(&BackboneSpec::unet(), 0).unwrap();
        let octse = init_model(&BackboneSpec::octse(), 0).unwrap();
        let ratio = octse.num_params() as f64 / unet.num_params() as f64;
        assert!(
            ratio <= 1.25,
            "octse/unet parameter ratio {ratio:.3} exceeds 1.25"
        );
    }
}
