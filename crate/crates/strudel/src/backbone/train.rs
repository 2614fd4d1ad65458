//! Mini-batch training over a [`TrainingPool`] with the routed combined loss.

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::net::Network;
use super::{image_to_input, GradStore, ModelParams};
use crate::error::{Error, Result};
use crate::loss::{combined_loss_grad, LossConfig};
use crate::seed;
use crate::selftrain::TrainingPool;

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub dice: f64,
    pub bce: f64,
    pub ubce: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 40,
            lr: 1e-4,
            batch_size: 4,
            seed: 0,
        }
    }
}

/// Trains a copy of `params` on the pool, returning the updated parameters
/// and the per-epoch loss trace. Deterministic in `(params, pool, opts)`.
/// Dropout is active throughout; each sample's loss is routed per its pool
/// entry. Aborts with diagnostics if the loss turns non-finite.
pub fn train(
    params: &ModelParams,
    pool: &TrainingPool,
    loss_cfg: &LossConfig,
    opts: &TrainOptions,
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    if pool.is_empty() {
        return Err(Error::Config("training pool is empty".to_string()));
    }
    if opts.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".to_string()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".to_string()));
    }
    loss_cfg.validate()?;

    let net = Network::build(&params.spec)?;
    let entries: Vec<_> = pool.entries().collect();
    // images convert once; f32 is the training precision
    let inputs: Vec<_> = entries
        .iter()
        .map(|e| image_to_input::<f32>(&e.sample.image))
        .collect();
    for x in &inputs {
        net.check_input(x)?;
    }

    let mut model = params.clone();
    let mut adam = Adam::new(&model, opts.lr);
    let mut trace = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        shuffle(&mut order, &mut seed::rng(opts.seed, "shuffle", epoch as u64));
        let mut drop_rng = seed::rng(opts.seed, "train-dropout", epoch as u64);

        let mut epoch_sum = EpochLoss::default();
        for (batch_idx, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut grads = GradStore::zeros_like(&model);
            let inv_batch = 1.0 / batch.len() as f64;
            let mut batch_loss = EpochLoss::default();
            for &i in batch {
                let e = &entries[i];
                let dropout_seed = rand::Rng::gen::<u64>(&mut drop_rng);
                let (prob, tape) = net.forward_train(&model, &inputs[i], Some(dropout_seed))?;
                let prob64 = prob.mapv(f64::from);
                let (breakdown, dgrid) = combined_loss_grad(
                    &prob64,
                    &e.label,
                    e.sigma.as_ref(),
                    e.routing,
                    loss_cfg,
                )?;
                batch_loss.total += breakdown.total;
                batch_loss.dice += breakdown.dice;
                batch_loss.bce += breakdown.bce;
                batch_loss.ubce += breakdown.ubce;
                let dprob = dgrid.mapv(|v| (v * inv_batch) as f32);
                net.backward(&model, &tape, &dprob, &mut grads);
            }
            batch_loss.total *= inv_batch;
            batch_loss.dice *= inv_batch;
            batch_loss.bce *= inv_batch;
            batch_loss.ubce *= inv_batch;
            if !batch_loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    total: batch_loss.total,
                    dice: batch_loss.dice,
                    bce: batch_loss.bce,
                    ubce: batch_loss.ubce,
                });
            }
            adam.step(&mut model, &grads);
            let w = batch.len() as f64;
            epoch_sum.total += batch_loss.total * w;
            epoch_sum.dice += batch_loss.dice * w;
            epoch_sum.bce += batch_loss.bce * w;
            epoch_sum.ubce += batch_loss.ubce * w;
        }
        let n = entries.len() as f64;
        trace.push(EpochLoss {
            total: epoch_sum.total / n,
            dice: epoch_sum.dice / n,
            bce: epoch_sum.bce / n,
            ubce: epoch_sum.ubce / n,
        });
    }
    Ok((model, trace))
}

/// Fisher-Yates with a platform-stable RNG stream.
fn shuffle(xs: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rand::Rng::gen_range(rng, 0..=i);
        xs.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_model, BackboneSpec};
    use crate::dataset::{generate_domain, normalize, DomainConfig};
    use crate::selftrain::TrainingPool;

    fn tiny_pool(n: usize) -> TrainingPool {
        let cfg = DomainConfig {
            image_size: 16,
            seed: 3,
            ..DomainConfig::default()
        };
        let samples: Vec<_> = generate_domain(&cfg, n)
            .unwrap()
            .into_iter()
            .map(|mut s| {
                s.image = normalize(&s.image);
                s
            })
            .collect();
        TrainingPool::from_labeled(&samples).unwrap()
    }

    fn tiny_spec() -> BackboneSpec {
        BackboneSpec {
            depth: 2,
            base_channels: 4,
            ..BackboneSpec::unet()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let params = init_model(&tiny_spec(), 1).unwrap();
        let pool = tiny_pool(2);
        let opts = TrainOptions {
            epochs: 1,
            lr: 0.0,
            batch_size: 2,
            seed: 5,
        };
        let (after, trace) = train(&params, &pool, &LossConfig::default(), &opts).unwrap();
        assert_eq!(params, after);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let params = init_model(&tiny_spec(), 1).unwrap();
        let pool = tiny_pool(3);
        let opts = TrainOptions {
            epochs: 2,
            lr: 1e-3,
            batch_size: 2,
            seed: 9,
        };
        let (a, ta) = train(&params, &pool, &LossConfig::default(), &opts).unwrap();
        let (b, tb) = train(&params, &pool, &LossConfig::default(), &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn loss_decreases_on_average() {
        let params = init_model(&tiny_spec(), 2).unwrap();
        let pool = tiny_pool(4);
        let opts = TrainOptions {
            epochs: 30,
            lr: 3e-3,
            batch_size: 4,
            seed: 11,
        };
        let (_, trace) = train(&params, &pool, &LossConfig::default(), &opts).unwrap();
        let first = trace[..3].iter().map(|e| e.total).sum::<f64>() / 3.0;
        let last = trace[trace.len() - 3..].iter().map(|e| e.total).sum::<f64>() / 3.0;
        assert!(
            last < first,
            "loss did not decrease: first {first:.4}, last {last:.4}"
        );
    }

    #[test]
    fn empty_pool_is_an_error() {
        let params = init_model(&tiny_spec(), 1).unwrap();
        let pool = TrainingPool::new();
        assert!(train(&params, &pool, &LossConfig::default(), &TrainOptions::default()).is_err());
    }
}
