//! Encoder-decoder graphs for the two backbones.
//!
//! Both variants share the topology
//!
//! ```text
//! enc_0 .. enc_{d-1}  (block, then 2x maxpool)
//! bottleneck          (block)
//! dec_{d-1} .. dec_0  (2x upsample, 1x1 projection, concat skip, block)
//! head                (1x1 to one channel, sigmoid)
//! ```
//!
//! where a block is (conv, group norm, ReLU) twice followed by spatial
//! dropout. OctSE-Net carries a frequency-split feature pair through the same
//! topology, uses octave convolutions everywhere, and recalibrates each block
//! output with a concurrent channel/spatial squeeze-excitation gate before
//! the dropout.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::octave::{
    octave_conv_bwd, octave_conv_fwd, octave_split, FreqPair, OctaveCache, OctaveWeights,
};
use super::ops::{
    concat_ch, conv2d_bwd, conv2d_fwd, effective_groups, group_norm_bwd, group_norm_fwd,
    maxpool2_bwd, maxpool2_fwd, relu_bwd, relu_fwd, sigmoid_bwd, sigmoid_fwd, spatial_dropout_bwd,
    spatial_dropout_fwd, split_ch, upsample2_bwd, upsample2_fwd, GnCache, Scalar,
};
use super::scse::{scse_bwd, scse_fwd, ScseCache, ScseWeights};
use super::{BackboneKind, BackboneSpec, GradStore, ModelParamsT, TensorDecl, TensorInit};
use crate::error::{Error, Result};
use crate::seed;

/// Static description of a backbone graph: per-level channel counts and the
/// parameter tensors it expects. Built from a validated spec.
pub struct Network {
    spec: BackboneSpec,
    /// (in, out) channels of each encoder block; `levels[depth]` is the
    /// bottleneck.
    levels: Vec<(usize, usize)>,
}

impl Network {
    pub fn build(spec: &BackboneSpec) -> Result<Network> {
        spec.validate()?;
        let mut levels = Vec::with_capacity(spec.depth + 1);
        for i in 0..=spec.depth {
            let cin = if i == 0 { 1 } else { spec.channels_at(i - 1) };
            levels.push((cin, spec.channels_at(i)));
        }
        let net = Network { spec: *spec, levels };
        if spec.kind == BackboneKind::Octse {
            // every gated channel group must admit the reduction ratio
            for &(_, cout) in &net.levels {
                let (h, l) = octave_split(cout, spec.octave_alpha);
                for c in [h, l] {
                    if c > 0 && c % spec.se_reduction != 0 {
                        return Err(Error::Config(format!(
                            "se_reduction {} does not divide branch channel count {c}",
                            spec.se_reduction
                        )));
                    }
                }
            }
        }
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.spec.depth
    }

    /// Input spatial sizes must survive `depth` halvings (and one more for
    /// the octave low band).
    pub fn check_input<F: Scalar>(&self, x: &Array3<F>) -> Result<()> {
        let (_, h, w) = x.dim();
        let need = match self.spec.kind {
            BackboneKind::Unet => 1usize << self.spec.depth,
            BackboneKind::Octse => 1usize << (self.spec.depth + 1),
        };
        if h % need != 0 || w % need != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by {need} (depth {})",
                self.spec.depth
            )));
        }
        Ok(())
    }

    /// Declares every parameter tensor with shape and initialization.
    pub(crate) fn tensor_decls(&self) -> Vec<TensorDecl> {
        let mut decls = Vec::new();
        let d = self.spec.depth;
        match self.spec.kind {
            BackboneKind::Unet => {
                for (i, &(cin, cout)) in self.levels.iter().enumerate() {
                    let name = level_name(i, d);
                    decls.extend(plain_block_decls(&name, cin, cout));
                }
                for i in (0..d).rev() {
                    let cin = self.spec.channels_at(i + 1);
                    let cout = self.spec.channels_at(i);
                    decls.extend(TensorDecl::conv(&format!("dec{i}.up"), cout, cin, 1));
                    decls.extend(plain_block_decls(&format!("dec{i}"), 2 * cout, cout));
                }
                decls.extend(TensorDecl::conv("head", 1, self.spec.base_channels, 1));
            }
            BackboneKind::Octse => {
                let alpha = self.spec.octave_alpha;
                for (i, &(cin, cout)) in self.levels.iter().enumerate() {
                    let name = level_name(i, d);
                    let ins = if i == 0 { (1, 0) } else { octave_split(cin, alpha) };
                    decls.extend(octave_block_decls(
                        &name,
                        ins,
                        octave_split(cout, alpha),
                        self.spec.se_reduction,
                    ));
                }
                for i in (0..d).rev() {
                    let cin = octave_split(self.spec.channels_at(i + 1), alpha);
                    let cout = octave_split(self.spec.channels_at(i), alpha);
                    decls.extend(octave_conv_decls(&format!("dec{i}.up"), cin, cout, 1));
                    decls.extend(octave_block_decls(
                        &format!("dec{i}"),
                        (2 * cout.0, 2 * cout.1),
                        cout,
                        self.spec.se_reduction,
                    ));
                }
                let head_in = octave_split(self.spec.base_channels, alpha);
                decls.extend(octave_conv_decls("head", head_in, (1, 0), 1));
            }
        }
        decls
    }

    /// Inference-only forward; the training cache is built and dropped.
    pub fn forward_infer<F: Scalar>(
        &self,
        params: &ModelParamsT<F>,
        x: &Array3<F>,
        dropout_seed: Option<u64>,
    ) -> Result<Array2<F>> {
        match self.spec.kind {
            BackboneKind::Unet => Ok(self.unet_forward(params, x, dropout_seed)?.0),
            BackboneKind::Octse => Ok(self.octse_forward(params, x, dropout_seed)?.0),
        }
    }

    /// Forward pass retaining everything the backward pass needs.
    pub fn forward_train<F: Scalar>(
        &self,
        params: &ModelParamsT<F>,
        x: &Array3<F>,
        dropout_seed: Option<u64>,
    ) -> Result<(Array2<F>, Tape<F>)> {
        match self.spec.kind {
            BackboneKind::Unet => {
                let (p, t) = self.unet_forward(params, x, dropout_seed)?;
                Ok((p, Tape::Unet(t)))
            }
            BackboneKind::Octse => {
                let (p, t) = self.octse_forward(params, x, dropout_seed)?;
                Ok((p, Tape::Octse(t)))
            }
        }
    }

    /// Backpropagates `dprob` (gradient w.r.t. the probability map) through
    /// the tape, accumulating parameter gradients into `grads`.
    pub fn backward<F: Scalar>(
        &self,
        params: &ModelParamsT<F>,
        tape: &Tape<F>,
        dprob: &Array2<F>,
        grads: &mut GradStore<F>,
    ) {
        match tape {
            Tape::Unet(t) => self.unet_backward(params, t, dprob, grads),
            Tape::Octse(t) => self.octse_backward(params, t, dprob, grads),
        }
    }

    // ---- plain U-Net ----

    fn unet_forward<F: Scalar>(
        &self,
        params: &ModelParamsT<F>,
        x: &Array3<F>,
        dropout_seed: Option<u64>,
    ) -> Result<(Array2<F>, UnetTape<F>)> {
        self.check_input(x)?;
        let d = self.spec.depth;
        let mut rng = dropout_rng(dropout_seed);
        let rate = effective_rate(&self.spec, dropout_seed);

        let mut cur = x.clone();
        let mut enc = Vec::with_capacity(d);
        let mut skips = Vec::with_capacity(d);
        for i in 0..d {
            let (y, cache) = plain_block_fwd(params, &level_name(i, d), &self.spec, rate, &mut rng, &cur)?;
            let (pooled, arg) = maxpool2_fwd(&y)?;
            skips.push(y);
            enc.push((cache, arg));
            cur = pooled;
        }
        let (mut cur, bot) = plain_block_fwd(params, "bot", &self.spec, rate, &mut rng, &cur)?;

        let mut dec = Vec::with_capacity(d);
        for i in (0..d).rev() {
            let up_in = upsample2_fwd(&cur);
            let up_name = format!("dec{i}.up");
            let up_out = conv2d_fwd(
                &up_in,
                params.view4(&format!("{up_name}.w")),
                params.view1(&format!("{up_name}.b")),
            )?;
            let skip = &skips[i];
            let merged = concat_ch(skip, &up_out);
            let (y, cache) = plain_block_fwd(params, &format!("dec{i}"), &self.spec, rate, &mut rng, &merged)?;
            dec.push(UnetDecTape {
                up_in,
                merged_first: skip.dim().0,
                block: cache,
            });
            cur = y;
        }

        let z = conv2d_fwd(&cur, params.view4("head.w"), params.view1("head.b"))?;
        let prob = sigmoid_fwd(&z);
        let out = prob.index_axis(ndarray::Axis(0), 0).to_owned();
        Ok((
            out,
            UnetTape {
                enc,
                bot,
                dec,
                head_in: cur,
                prob,
                rate,
            },
        ))
    }

    fn unet_backward<F: Scalar>(
        &self,
        params: &ModelParamsT<F>,
        t: &UnetTape<F>,
        dprob: &Array2<F>,
        grads: &mut GradStore<F>,
    ) {
        let d = self.spec.depth;
        let dprob3 = dprob.view().insert_axis(ndarray::Axis(0)).to_owned();
        let dz = sigmoid_bwd(&t.prob, &dprob3);
        let (mut dcur, dw, db) = conv2d_bwd(&t.head_in, params.view4("head.w"), &dz);
        grads.add4("head.w", dw);
        grads.add1("head.b", db);

        // decoder levels were recorded deepest-first
        let mut dskips: Vec<Option<Array3<F>>> = vec![None; d];
        for (rec, i) in t.dec.iter().zip((0..d).rev()) {
            let dmerged = plain_block_bwd(params, &format!("dec{i}"), &self.spec, t.rate, &rec.block, &dcur, grads);
            let (dskip, dup_out) = split_ch(&dmerged, rec.merged_first);
            dskips[i] = Some(dskip);
            let up_name = format!("dec{i}.up");
            let (dup_in, dw, db) = conv2d_bwd(&rec.up_in, params.view4(&format!("{up_name}.w")), &dup_out);
            grads.add4(format!("{up_name}.w").as_str(), dw);
            grads.add1(format!("{up_name}.b").as_str(), db);
            dcur = upsample2_bwd(&dup_in);
        }

        dcur = plain_block_bwd(params, "bot", &self.spec, t.rate, &t.bot, &dcur, grads);

        for i in (0..d).rev() {
            let (cache, arg) = &t.enc[i];
            let mut dy = maxpool2_bwd(&dcur, arg);
            if let Some(ds) = &dskips[i] {
                dy += ds;
            }
            dcur = plain_block_bwd(params, &level_name(i, d), &self.spec, t.rate, cache, &dy, grads);
        }
    }

    // ---- OctSE-Net ----

    fn octse_forward<F: Scalar>(
        &self,
        params: &ModelParamsT<F>,
        x: &Array3<F>,
        dropout_seed: Option<u64>,
    ) -> Result<(Array2<F>, OctseTape<F>)> {
        self.check_input(x)?;
        let d = self.spec.depth;
        let mut rng = dropout_rng(dropout_seed);
        let rate = effective_rate(&self.spec, dropout_seed);

        let mut cur = FreqPair::from_high(x.clone());
        let mut enc = Vec::with_capacity(d);
        let mut skips = Vec::with_capacity(d);
        for i in 0..d {
            let (y, cache) =
                octave_block_fwd(params, &level_name(i, d), &self.spec, rate, &mut rng, &cur)?;
            let (ph, arg_h) = maxpool2_fwd(&y.high)?;
            let (pl, arg_l) = match &y.low {
                Some(l) => {
                    let (p, a) = maxpool2_fwd(l)?;
                    (Some(p), Some(a))
                }
                None => (None, None),
            };
            skips.push(y);
            enc.push((cache, arg_h, arg_l));
            cur = FreqPair { high: ph, low: pl };
        }
        let (mut cur, bot) = octave_block_fwd(params, "bot", &self.spec, rate, &mut rng, &cur)?;

        let mut dec = Vec::with_capacity(d);
        for i in (0..d).rev() {
            let up_in = FreqPair {
                high: upsample2_fwd(&cur.high),
                low: cur.low.as_ref().map(upsample2_fwd),
            };
            let up_name = format!("dec{i}.up");
            let w = octave_weight_views(params, &up_name);
            let (up_out, up_cache) = octave_conv_fwd(&up_in, &w)?;
            let skip = &skips[i];
            let merged = FreqPair {
                high: concat_ch(&skip.high, &up_out.high),
                low: match (&skip.low, &up_out.low) {
                    (Some(a), Some(b)) => Some(concat_ch(a, b)),
                    (None, None) => None,
                    _ => return Err(Error::Shape("octave skip/up band mismatch".into())),
                },
            };
            let (y, cache) =
                octave_block_fwd(params, &format!("dec{i}"), &self.spec, rate, &mut rng, &merged)?;
            dec.push(OctseDecTape {
                up_in,
                up_cache,
                merged_first: skip.channels(),
                block: cache,
            });
            cur = y;
        }

        let w = octave_weight_views(params, "head");
        let (head_out, head_cache) = octave_conv_fwd(&cur, &w)?;
        let prob = sigmoid_fwd(&head_out.high);
        let out = prob.index_axis(ndarray::Axis(0), 0).to_owned();
        Ok((
            out,
            OctseTape {
                enc,
                bot,
                dec,
                head_in: cur,
                head_cache,
                prob,
                rate,
            },
        ))
    }

    fn octse_backward<F: Scalar>(
        &self,
        params: &ModelParamsT<F>,
        t: &OctseTape<F>,
        dprob: &Array2<F>,
        grads: &mut GradStore<F>,
    ) {
        let d = self.spec.depth;
        let dprob3 = dprob.view().insert_axis(ndarray::Axis(0)).to_owned();
        let dz = sigmoid_bwd(&t.prob, &dprob3);
        let w = octave_weight_views(params, "head");
        let dy = FreqPair { high: dz, low: None };
        let (mut dcur, g) = octave_conv_bwd(&t.head_in, &w, &t.head_cache, &dy);
        add_octave_grads(grads, "head", g);

        let mut dskips: Vec<Option<FreqPair<F>>> = (0..d).map(|_| None).collect();
        for (rec, i) in t.dec.iter().zip((0..d).rev()) {
            let dmerged = octave_block_bwd(
                params,
                &format!("dec{i}"),
                &self.spec,
                t.rate,
                &rec.block,
                &dcur,
                grads,
            );
            let (dskip_h, dup_h) = split_ch(&dmerged.high, rec.merged_first.0);
            let (dskip_l, dup_l) = match &dmerged.low {
                Some(dl) => {
                    let (a, b) = split_ch(dl, rec.merged_first.1);
                    (Some(a), Some(b))
                }
                None => (None, None),
            };
            dskips[i] = Some(FreqPair {
                high: dskip_h,
                low: dskip_l,
            });
            let up_name = format!("dec{i}.up");
            let w = octave_weight_views(params, &up_name);
            let dup_out = FreqPair {
                high: dup_h,
                low: dup_l,
            };
            let (dup_in, g) = octave_conv_bwd(&rec.up_in, &w, &rec.up_cache, &dup_out);
            add_octave_grads(grads, &up_name, g);
            dcur = FreqPair {
                high: upsample2_bwd(&dup_in.high),
                low: dup_in.low.as_ref().map(upsample2_bwd),
            };
        }

        dcur = octave_block_bwd(params, "bot", &self.spec, t.rate, &t.bot, &dcur, grads);

        for i in (0..d).rev() {
            let (cache, arg_h, arg_l) = &t.enc[i];
            let mut dy = FreqPair {
                high: maxpool2_bwd(&dcur.high, arg_h),
                low: match (&dcur.low, arg_l) {
                    (Some(dl), Some(al)) => Some(maxpool2_bwd(dl, al)),
                    _ => None,
                },
            };
            if let Some(ds) = &dskips[i] {
                dy.high += &ds.high;
                if let (Some(dl), Some(sl)) = (dy.low.as_mut(), ds.low.as_ref()) {
                    *dl += sl;
                }
            }
            dcur = octave_block_bwd(
                params,
                &level_name(i, d),
                &self.spec,
                t.rate,
                cache,
                &dy,
                grads,
            );
        }
    }
}

fn level_name(i: usize, depth: usize) -> String {
    if i == depth {
        "bot".to_string()
    } else {
        format!("enc{i}")
    }
}

fn dropout_rng(seed: Option<u64>) -> ChaCha8Rng {
    // the stream is only consumed when dropout is active
    seed::rng(seed.unwrap_or(0), "dropout", 0)
}

fn effective_rate(spec: &BackboneSpec, dropout_seed: Option<u64>) -> f64 {
    if dropout_seed.is_some() {
        spec.dropout_rate
    } else {
        0.0
    }
}

// ---- plain blocks ----

fn plain_block_decls(name: &str, cin: usize, cout: usize) -> Vec<TensorDecl> {
    let mut v = Vec::new();
    v.extend(TensorDecl::conv(&format!("{name}.conv1"), cout, cin, 3));
    v.extend(TensorDecl::norm(&format!("{name}.gn1"), cout));
    v.extend(TensorDecl::conv(&format!("{name}.conv2"), cout, cout, 3));
    v.extend(TensorDecl::norm(&format!("{name}.gn2"), cout));
    v
}

struct PlainBlockTape<F> {
    x: Array3<F>,
    gn1: GnCache<F>,
    r1: Array3<F>,
    gn2: GnCache<F>,
    r2: Array3<F>,
    keep: Vec<bool>,
}

fn plain_block_fwd<F: Scalar>(
    params: &ModelParamsT<F>,
    name: &str,
    spec: &BackboneSpec,
    rate: f64,
    rng: &mut ChaCha8Rng,
    x: &Array3<F>,
) -> Result<(Array3<F>, PlainBlockTape<F>)> {
    let a1 = conv2d_fwd(
        x,
        params.view4(&format!("{name}.conv1.w")),
        params.view1(&format!("{name}.conv1.b")),
    )?;
    let groups = effective_groups(a1.dim().0, spec.norm_groups);
    let (g1, gn1) = group_norm_fwd(
        &a1,
        params.view1(&format!("{name}.gn1.g")),
        params.view1(&format!("{name}.gn1.b")),
        groups,
    );
    let r1 = relu_fwd(&g1);
    let a2 = conv2d_fwd(
        &r1,
        params.view4(&format!("{name}.conv2.w")),
        params.view1(&format!("{name}.conv2.b")),
    )?;
    let (g2, gn2) = group_norm_fwd(
        &a2,
        params.view1(&format!("{name}.gn2.g")),
        params.view1(&format!("{name}.gn2.b")),
        groups,
    );
    let r2 = relu_fwd(&g2);
    let (y, keep) = spatial_dropout_fwd(&r2, rate, rng);
    Ok((
        y,
        PlainBlockTape {
            x: x.clone(),
            gn1,
            r1,
            gn2,
            r2,
            keep,
        },
    ))
}

fn plain_block_bwd<F: Scalar>(
    params: &ModelParamsT<F>,
    name: &str,
    spec: &BackboneSpec,
    rate: f64,
    tape: &PlainBlockTape<F>,
    dy: &Array3<F>,
    grads: &mut GradStore<F>,
) -> Array3<F> {
    let _ = spec;
    let d_r2 = spatial_dropout_bwd(dy, &tape.keep, rate);
    let d_g2 = relu_bwd(&tape.r2, &d_r2);
    let (d_a2, dgamma2, dbeta2) =
        group_norm_bwd(&tape.gn2, params.view1(&format!("{name}.gn2.g")), &d_g2);
    grads.add1(&format!("{name}.gn2.g"), dgamma2);
    grads.add1(&format!("{name}.gn2.b"), dbeta2);
    let (d_r1, dw2, db2) = conv2d_bwd(&tape.r1, params.view4(&format!("{name}.conv2.w")), &d_a2);
    grads.add4(&format!("{name}.conv2.w"), dw2);
    grads.add1(&format!("{name}.conv2.b"), db2);
    let d_g1 = relu_bwd(&tape.r1, &d_r1);
    let (d_a1, dgamma1, dbeta1) =
        group_norm_bwd(&tape.gn1, params.view1(&format!("{name}.gn1.g")), &d_g1);
    grads.add1(&format!("{name}.gn1.g"), dgamma1);
    grads.add1(&format!("{name}.gn1.b"), dbeta1);
    let (dx, dw1, db1) = conv2d_bwd(&tape.x, params.view4(&format!("{name}.conv1.w")), &d_a1);
    grads.add4(&format!("{name}.conv1.w"), dw1);
    grads.add1(&format!("{name}.conv1.b"), db1);
    dx
}

// ---- octave blocks ----

fn octave_conv_decls(
    name: &str,
    (ih, il): (usize, usize),
    (oh, ol): (usize, usize),
    k: usize,
) -> Vec<TensorDecl> {
    let fan_in = (ih + il) * k * k;
    let mut v = Vec::new();
    let mut path = |pname: String, co: usize, ci: usize| {
        if co > 0 && ci > 0 {
            v.push(TensorDecl {
                name: pname,
                shape: vec![co, ci, k, k],
                init: TensorInit::FanIn(fan_in),
            });
        }
    };
    path(format!("{name}.whh"), oh, ih);
    path(format!("{name}.whl"), ol, ih);
    path(format!("{name}.wlh"), oh, il);
    path(format!("{name}.wll"), ol, il);
    if oh > 0 {
        v.push(TensorDecl {
            name: format!("{name}.bh"),
            shape: vec![oh],
            init: TensorInit::Zero,
        });
    }
    if ol > 0 {
        v.push(TensorDecl {
            name: format!("{name}.bl"),
            shape: vec![ol],
            init: TensorInit::Zero,
        });
    }
    v
}

fn octave_weight_views<'a, F: Scalar>(
    params: &'a ModelParamsT<F>,
    name: &str,
) -> OctaveWeights<'a, F> {
    let get4 = |suffix: &str| {
        let full = format!("{name}.{suffix}");
        params
            .tensor_names()
            .any(|n| n == full)
            .then(|| params.view4(&full))
    };
    let get1 = |suffix: &str| {
        let full = format!("{name}.{suffix}");
        params
            .tensor_names()
            .any(|n| n == full)
            .then(|| params.view1(&full))
    };
    OctaveWeights {
        w_hh: get4("whh"),
        w_hl: get4("whl"),
        w_lh: get4("wlh"),
        w_ll: get4("wll"),
        b_h: get1("bh"),
        b_l: get1("bl"),
    }
}

fn add_octave_grads<F: Scalar>(
    grads: &mut GradStore<F>,
    name: &str,
    g: super::octave::OctaveGrads<F>,
) {
    if let Some(dw) = g.dw_hh {
        grads.add4(&format!("{name}.whh"), dw);
    }
    if let Some(dw) = g.dw_hl {
        grads.add4(&format!("{name}.whl"), dw);
    }
    if let Some(dw) = g.dw_lh {
        grads.add4(&format!("{name}.wlh"), dw);
    }
    if let Some(dw) = g.dw_ll {
        grads.add4(&format!("{name}.wll"), dw);
    }
    if let Some(db) = g.db_h {
        grads.add1(&format!("{name}.bh"), db);
    }
    if let Some(db) = g.db_l {
        grads.add1(&format!("{name}.bl"), db);
    }
}

fn octave_block_decls(
    name: &str,
    ins: (usize, usize),
    outs: (usize, usize),
    se_reduction: usize,
) -> Vec<TensorDecl> {
    let mut v = Vec::new();
    v.extend(octave_conv_decls(&format!("{name}.conv1"), ins, outs, 3));
    v.extend(TensorDecl::norm(&format!("{name}.gn1h"), outs.0));
    if outs.1 > 0 {
        v.extend(TensorDecl::norm(&format!("{name}.gn1l"), outs.1));
    }
    v.extend(octave_conv_decls(&format!("{name}.conv2"), outs, outs, 3));
    v.extend(TensorDecl::norm(&format!("{name}.gn2h"), outs.0));
    if outs.1 > 0 {
        v.extend(TensorDecl::norm(&format!("{name}.gn2l"), outs.1));
    }
    v.extend(scse_decls(&format!("{name}.seh"), outs.0, se_reduction));
    if outs.1 > 0 {
        v.extend(scse_decls(&format!("{name}.sel"), outs.1, se_reduction));
    }
    v
}

fn scse_decls(name: &str, c: usize, r: usize) -> Vec<TensorDecl> {
    let cr = (c / r).max(1);
    vec![
        TensorDecl {
            name: format!("{name}.w1"),
            shape: vec![cr, c],
            init: TensorInit::FanIn(c),
        },
        TensorDecl {
            name: format!("{name}.b1"),
            shape: vec![cr],
            init: TensorInit::Zero,
        },
        TensorDecl {
            name: format!("{name}.w2"),
            shape: vec![c, cr],
            init: TensorInit::FanIn(cr),
        },
        TensorDecl {
            name: format!("{name}.b2"),
            shape: vec![c],
            init: TensorInit::Zero,
        },
        TensorDecl {
            name: format!("{name}.ws"),
            shape: vec![c],
            init: TensorInit::FanIn(c),
        },
        TensorDecl {
            name: format!("{name}.bs"),
            shape: vec![1],
            init: TensorInit::Zero,
        },
    ]
}

fn scse_weight_views<'a, F: Scalar>(params: &'a ModelParamsT<F>, name: &str) -> ScseWeights<'a, F> {
    ScseWeights {
        w1: params.tensor(&format!("{name}.w1")).view().into_dimensionality().unwrap(),
        b1: params.view1(&format!("{name}.b1")),
        w2: params.tensor(&format!("{name}.w2")).view().into_dimensionality().unwrap(),
        b2: params.view1(&format!("{name}.b2")),
        ws: params.view1(&format!("{name}.ws")),
        bs: params.view1(&format!("{name}.bs"))[0],
    }
}

struct OctaveBlockTape<F> {
    x: FreqPair<F>,
    conv1: OctaveCache<F>,
    gn1h: GnCache<F>,
    gn1l: Option<GnCache<F>>,
    r1: FreqPair<F>,
    conv2: OctaveCache<F>,
    gn2h: GnCache<F>,
    gn2l: Option<GnCache<F>>,
    r2: FreqPair<F>,
    se_h: ScseCache<F>,
    se_l: Option<ScseCache<F>>,
    se_out_h: Array3<F>,
    se_out_l: Option<Array3<F>>,
    keep_h: Vec<bool>,
    keep_l: Option<Vec<bool>>,
}

#[allow(clippy::too_many_lines)]
fn octave_block_fwd<F: Scalar>(
    params: &ModelParamsT<F>,
    name: &str,
    spec: &BackboneSpec,
    rate: f64,
    rng: &mut ChaCha8Rng,
    x: &FreqPair<F>,
) -> Result<(FreqPair<F>, OctaveBlockTape<F>)> {
    let w1 = octave_weight_views(params, &format!("{name}.conv1"));
    let (a1, conv1) = octave_conv_fwd(x, &w1)?;
    let groups_h = effective_groups(a1.high.dim().0, spec.norm_groups);
    let (g1h, gn1h) = group_norm_fwd(
        &a1.high,
        params.view1(&format!("{name}.gn1h.g")),
        params.view1(&format!("{name}.gn1h.b")),
        groups_h,
    );
    let (g1l, gn1l) = match &a1.low {
        Some(l) => {
            let groups_l = effective_groups(l.dim().0, spec.norm_groups);
            let (g, c) = group_norm_fwd(
                l,
                params.view1(&format!("{name}.gn1l.g")),
                params.view1(&format!("{name}.gn1l.b")),
                groups_l,
            );
            (Some(g), Some(c))
        }
        None => (None, None),
    };
    let r1 = FreqPair {
        high: relu_fwd(&g1h),
        low: g1l.as_ref().map(relu_fwd),
    };

    let w2 = octave_weight_views(params, &format!("{name}.conv2"));
    let (a2, conv2) = octave_conv_fwd(&r1, &w2)?;
    let (g2h, gn2h) = group_norm_fwd(
        &a2.high,
        params.view1(&format!("{name}.gn2h.g")),
        params.view1(&format!("{name}.gn2h.b")),
        effective_groups(a2.high.dim().0, spec.norm_groups),
    );
    let (g2l, gn2l) = match &a2.low {
        Some(l) => {
            let (g, c) = group_norm_fwd(
                l,
                params.view1(&format!("{name}.gn2l.g")),
                params.view1(&format!("{name}.gn2l.b")),
                effective_groups(l.dim().0, spec.norm_groups),
            );
            (Some(g), Some(c))
        }
        None => (None, None),
    };
    let r2 = FreqPair {
        high: relu_fwd(&g2h),
        low: g2l.as_ref().map(relu_fwd),
    };

    let (se_out_h, se_h) = scse_fwd(&r2.high, &scse_weight_views(params, &format!("{name}.seh")))?;
    let (se_out_l, se_l) = match &r2.low {
        Some(l) => {
            let (o, c) = scse_fwd(l, &scse_weight_views(params, &format!("{name}.sel")))?;
            (Some(o), Some(c))
        }
        None => (None, None),
    };

    let (yh, keep_h) = spatial_dropout_fwd(&se_out_h, rate, rng);
    let (yl, keep_l) = match &se_out_l {
        Some(l) => {
            let (y, k) = spatial_dropout_fwd(l, rate, rng);
            (Some(y), Some(k))
        }
        None => (None, None),
    };

    Ok((
        FreqPair { high: yh, low: yl },
        OctaveBlockTape {
            x: x.clone(),
            conv1,
            gn1h,
            gn1l,
            r1,
            conv2,
            gn2h,
            gn2l,
            r2,
            se_h,
            se_l,
            se_out_h,
            se_out_l,
            keep_h,
            keep_l,
        },
    ))
}

fn octave_block_bwd<F: Scalar>(
    params: &ModelParamsT<F>,
    name: &str,
    spec: &BackboneSpec,
    rate: f64,
    tape: &OctaveBlockTape<F>,
    dy: &FreqPair<F>,
    grads: &mut GradStore<F>,
) -> FreqPair<F> {
    let _ = spec;
    let d_se_h = spatial_dropout_bwd(&dy.high, &tape.keep_h, rate);
    let d_se_l = match (&dy.low, &tape.keep_l) {
        (Some(dl), Some(kl)) => Some(spatial_dropout_bwd(dl, kl, rate)),
        _ => None,
    };

    let (d_r2h, gh) = scse_bwd(
        &tape.r2.high,
        &scse_weight_views(params, &format!("{name}.seh")),
        &tape.se_h,
        &d_se_h,
    );
    add_scse_grads(grads, &format!("{name}.seh"), gh);
    let d_r2l = match (&tape.r2.low, &tape.se_l, &d_se_l) {
        (Some(r2l), Some(cache), Some(dl)) => {
            let (d, g) = scse_bwd(
                r2l,
                &scse_weight_views(params, &format!("{name}.sel")),
                cache,
                dl,
            );
            add_scse_grads(grads, &format!("{name}.sel"), g);
            Some(d)
        }
        _ => None,
    };

    let d_g2h = relu_bwd(&tape.r2.high, &d_r2h);
    let (d_a2h, dg, db) = group_norm_bwd(&tape.gn2h, params.view1(&format!("{name}.gn2h.g")), &d_g2h);
    grads.add1(&format!("{name}.gn2h.g"), dg);
    grads.add1(&format!("{name}.gn2h.b"), db);
    let d_a2l = match (&tape.r2.low, &d_r2l, &tape.gn2l) {
        (Some(r2l), Some(drl), Some(gnc)) => {
            let d_g2l = relu_bwd(r2l, drl);
            let (d, dg, db) = group_norm_bwd(gnc, params.view1(&format!("{name}.gn2l.g")), &d_g2l);
            grads.add1(&format!("{name}.gn2l.g"), dg);
            grads.add1(&format!("{name}.gn2l.b"), db);
            Some(d)
        }
        _ => None,
    };

    let w2 = octave_weight_views(params, &format!("{name}.conv2"));
    let d_a2 = FreqPair {
        high: d_a2h,
        low: d_a2l,
    };
    let (d_r1, g2) = octave_conv_bwd(&tape.r1, &w2, &tape.conv2, &d_a2);
    add_octave_grads(grads, &format!("{name}.conv2"), g2);

    let d_g1h = relu_bwd(&tape.r1.high, &d_r1.high);
    let (d_a1h, dg, db) = group_norm_bwd(&tape.gn1h, params.view1(&format!("{name}.gn1h.g")), &d_g1h);
    grads.add1(&format!("{name}.gn1h.g"), dg);
    grads.add1(&format!("{name}.gn1h.b"), db);
    let d_a1l = match (&tape.r1.low, &d_r1.low, &tape.gn1l) {
        (Some(r1l), Some(drl), Some(gnc)) => {
            let d_g1l = relu_bwd(r1l, drl);
            let (d, dg, db) = group_norm_bwd(gnc, params.view1(&format!("{name}.gn1l.g")), &d_g1l);
            grads.add1(&format!("{name}.gn1l.g"), dg);
            grads.add1(&format!("{name}.gn1l.b"), db);
            Some(d)
        }
        _ => None,
    };

    let w1 = octave_weight_views(params, &format!("{name}.conv1"));
    let d_a1 = FreqPair {
        high: d_a1h,
        low: d_a1l,
    };
    let (dx, g1) = octave_conv_bwd(&tape.x, &w1, &tape.conv1, &d_a1);
    add_octave_grads(grads, &format!("{name}.conv1"), g1);
    dx
}

fn add_scse_grads<F: Scalar>(grads: &mut GradStore<F>, name: &str, g: super::scse::ScseGrads<F>) {
    grads.add(&format!("{name}.w1"), g.dw1.into_dyn());
    grads.add1(&format!("{name}.b1"), g.db1);
    grads.add(&format!("{name}.w2"), g.dw2.into_dyn());
    grads.add1(&format!("{name}.b2"), g.db2);
    grads.add1(&format!("{name}.ws"), g.dws);
    grads.add1(&format!("{name}.bs"), Array1::from_vec(vec![g.dbs]));
}

// ---- tapes ----

/// Everything one training forward pass must retain for backprop.
pub enum Tape<F> {
    Unet(UnetTape<F>),
    Octse(OctseTape<F>),
}

pub struct UnetTape<F> {
    enc: Vec<(PlainBlockTape<F>, Array3<u8>)>,
    bot: PlainBlockTape<F>,
    dec: Vec<UnetDecTape<F>>,
    head_in: Array3<F>,
    prob: Array3<F>,
    rate: f64,
}

struct UnetDecTape<F> {
    up_in: Array3<F>,
    merged_first: usize,
    block: PlainBlockTape<F>,
}

pub struct OctseTape<F> {
    enc: Vec<(OctaveBlockTape<F>, Array3<u8>, Option<Array3<u8>>)>,
    bot: OctaveBlockTape<F>,
    dec: Vec<OctseDecTape<F>>,
    head_in: FreqPair<F>,
    head_cache: OctaveCache<F>,
    prob: Array3<F>,
    rate: f64,
}

struct OctseDecTape<F> {
    up_in: FreqPair<F>,
    up_cache: OctaveCache<F>,
    merged_first: (usize, usize),
    block: OctaveBlockTape<F>,
}
