use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdaptedModel, AdapterKey, Batch, Example, TaskData};
use crate::error::{Error, Result};
use crate::importance::SelectionPlan;

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator, so parameters whose true
/// gradient is ~0 are compared in absolute terms.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Seeds minibatch shuffling.
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    /// Validation accuracy after the last step.
    pub final_val_accuracy: f64,
    pub final_val_loss: f64,
    pub wall_clock_seconds: f64,
    /// Analytic estimate: parameters, optimizer state and one step's cached
    /// activations, in bytes.
    pub peak_memory_bytes: u64,
    pub trainable_parameters: u64,
    pub plan: SelectionPlan,
}

/// Mini-batch gradient descent with optional momentum on adapter factors.
pub fn train(
    model: &mut AdaptedModel,
    data: &TaskData,
    hp: &Hyperparameters,
) -> Result<TrainReport> {
    let keys = model.adapter_keys();
    if keys.is_empty() {
        return Err(Error::Invalid("model has no adapters to train".into()));
    }
    if hp.batch_size == 0 || data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Invalid("empty training or validation data".into()));
    }
    if !(hp.learning_rate.is_finite() && hp.learning_rate >= 0.0)
        || !(0.0..1.0).contains(&hp.momentum)
    {
        return Err(Error::Invalid(format!(
            "learning rate {} / momentum {} out of range",
            hp.learning_rate, hp.momentum
        )));
    }
    let batch_size = hp.batch_size.min(data.train.len());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut velocity: BTreeMap<AdapterKey, (DMatrix<f64>, DMatrix<f64>)> = keys
        .iter()
        .map(|&k| {
            let ad = model.adapter(k).expect("listed key");
            (
                k,
                (
                    DMatrix::zeros(ad.b.nrows(), ad.b.ncols()),
                    DMatrix::zeros(ad.a.nrows(), ad.a.ncols()),
                ),
            )
        })
        .collect();

    let mut loss_curve = Vec::with_capacity(hp.steps);
    let mut picked: Vec<Example> = Vec::with_capacity(batch_size);
    for step in 0..hp.steps {
        picked.clear();
        while picked.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(data.train[order[cursor]].clone());
            cursor += 1;
        }
        let batch = Batch::from_examples(&picked)?;
        let (loss, grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        loss_curve.push(loss);
        if hp.learning_rate == 0.0 {
            continue;
        }
        for (key, g) in grads {
            let (vb, va) = velocity
                .get_mut(&key)
                .expect("gradient for a listed adapter");
            *vb *= hp.momentum;
            *vb += &g.b;
            *va *= hp.momentum;
            *va += &g.a;
            let ad = model.adapter_mut(key).expect("listed key");
            ad.b -= &*vb * hp.learning_rate;
            ad.a -= &*va * hp.learning_rate;
            if ad.b.iter().chain(ad.a.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
        }
    }

    let val = Batch::from_examples(&data.val)?;
    let final_val_accuracy = model.accuracy(&val)?;
    let final_val_loss = model.loss(&val)?;
    if !final_val_loss.is_finite() {
        return Err(Error::Diverged {
            step: hp.steps,
            loss: final_val_loss,
        });
    }
    let seq_len = data.train[0].tokens.len();
    Ok(TrainReport {
        loss_curve,
        final_val_accuracy,
        final_val_loss,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        peak_memory_bytes: memory_estimate(model, batch_size, seq_len),
        trainable_parameters: model.trainable_parameter_count(),
        plan: model.plan().clone(),
    })
}

fn memory_estimate(model: &AdaptedModel, batch_size: usize, seq_len: usize) -> u64 {
    let m = model.model();
    let spec = m.spec();
    let mut params =
        (m.token_embedding.len() + m.position_embedding.len() + m.final_norm.len()) as u64;
    for block in &m.blocks {
        params += (block.attn_norm.len() + block.ffn_norm.len()) as u64;
        for role in crate::arch::Role::ALL {
            if let Some(w) = block.weight(role) {
                params += w.base().len() as u64;
            }
        }
    }
    let trainable = model.trainable_parameter_count();
    let tokens = (batch_size * seq_len) as u64;
    let per_layer = tokens * (8 * spec.d_model as u64 + 4 * spec.d_ff as u64)
        + (batch_size * spec.n_heads * seq_len * seq_len) as u64;
    let activations = per_layer * spec.n_layers as u64;
    // Adapter factors appear in the parameters, their gradients and momentum.
    8 * (params + 3 * trainable + activations)
}

/// Largest relative error between analytic adapter gradients and central
/// finite differences over every adapter parameter.
pub fn grad_check(model: &AdaptedModel, batch: &Batch) -> Result<f64> {
    grad_check_with(model, batch, GRAD_CHECK_STEP)
}

pub fn grad_check_with(model: &AdaptedModel, batch: &Batch, step: f64) -> Result<f64> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for key in model.adapter_keys() {
        let g = grads
            .get(&key)
            .ok_or_else(|| Error::Numerical(format!("no gradient for adapter {key:?}")))?;
        for which in [Factor::B, Factor::A] {
            let analytic = match which {
                Factor::B => &g.b,
                Factor::A => &g.a,
            };
            for idx in 0..analytic.len() {
                let original = factor(&probe, key, which)[idx];
                factor_mut(&mut probe, key, which)[idx] = original + step;
                let plus = probe.loss(batch)?;
                factor_mut(&mut probe, key, which)[idx] = original - step;
                let minus = probe.loss(batch)?;
                factor_mut(&mut probe, key, which)[idx] = original;
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy)]
enum Factor {
    B,
    A,
}

fn factor(m: &AdaptedModel, key: AdapterKey, which: Factor) -> &DMatrix<f64> {
    let ad = m.adapter(key).expect("listed key");
    match which {
        Factor::B => &ad.b,
        Factor::A => &ad.a,
    }
}

fn factor_mut(m: &mut AdaptedModel, key: AdapterKey, which: Factor) -> &mut DMatrix<f64> {
    let ad = m.adapter_mut(key).expect("listed key");
    match which {
        Factor::B => &mut ad.b,
        Factor::A => &mut ad.a,
    }
}
