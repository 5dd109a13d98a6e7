use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdapterKey, Batch, Gradients, ToyModel};
use crate::arch::{count_trainable, Role};
use crate::error::{Error, Result};
use crate::importance::SelectionPlan;
use crate::lora::{pissa_init, AdaptedWeight, InitMode, LoraAdapter};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub init: InitMode,
    /// Roles to adapt; `None` uses the architecture's `lora_targets`.
    pub targets: Option<BTreeSet<Role>>,
    /// Seeds the `A` initialization in [`InitMode::ZeroB`].
    pub seed: u64,
}

/// A toy model whose selected layers carry adapters. Everything else is
/// frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    model: ToyModel,
    plan: SelectionPlan,
    config: LoraConfig,
    targets: BTreeSet<Role>,
}

/// Attaches an adapter to every target matrix of every selected layer.
pub fn apply_plan(
    model: &ToyModel,
    plan: &SelectionPlan,
    cfg: &LoraConfig,
) -> Result<AdaptedModel> {
    plan.validate()?;
    let spec = model.spec();
    if plan.layer_count != spec.n_layers {
        return Err(Error::Selection(format!(
            "plan was made for {} layers, model has {}",
            plan.layer_count, spec.n_layers
        )));
    }
    let targets = cfg
        .targets
        .clone()
        .unwrap_or_else(|| spec.lora_targets.clone());
    if targets.is_empty() {
        return Err(Error::Invalid("no LoRA target roles".into()));
    }
    let available = spec.architecture.available_roles();
    if let Some(r) = targets.iter().find(|r| !available.contains(r)) {
        return Err(Error::Invalid(format!(
            "role {r} does not exist in {} blocks",
            spec.architecture
        )));
    }
    if cfg.init == InitMode::Pissa && cfg.alpha != cfg.rank as f64 {
        return Err(Error::Invalid(format!(
            "PiSSA requires alpha = rank, got alpha = {} with rank = {}",
            cfg.alpha, cfg.rank
        )));
    }

    let mut adapted = model.clone();
    for block in &mut adapted.blocks {
        for role in Role::ALL {
            if let Some(w) = block.weight_mut(role) {
                w.adapter = None;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for &layer in &plan.selected {
        for &role in &targets {
            let w = adapted
                .weight_mut(AdapterKey { layer, role })
                .expect("role checked against architecture");
            let base = w.base().clone();
            *w = match cfg.init {
                InitMode::ZeroB => {
                    let ad = LoraAdapter::zero_b(
                        base.nrows(),
                        base.ncols(),
                        cfg.rank,
                        cfg.alpha,
                        role,
                        &mut rng,
                    )?;
                    AdaptedWeight::with_adapter(base, ad)?
                }
                InitMode::Pissa => {
                    let (residual, ad) = pissa_init(&base, cfg.rank, role)?;
                    AdaptedWeight::with_adapter(residual, ad)?
                }
            };
        }
    }
    Ok(AdaptedModel {
        model: adapted,
        plan: plan.clone(),
        config: cfg.clone(),
        targets,
    })
}

impl AdaptedModel {
    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    /// Mutable access for training and perturbation probes.
    pub fn model_mut(&mut self) -> &mut ToyModel {
        &mut self.model
    }

    pub fn plan(&self) -> &SelectionPlan {
        &self.plan
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn targets(&self) -> &BTreeSet<Role> {
        &self.targets
    }

    pub fn adapter_keys(&self) -> Vec<AdapterKey> {
        self.model.adapter_keys()
    }

    pub fn adapter(&self, key: AdapterKey) -> Option<&LoraAdapter> {
        self.model.weight(key).and_then(|w| w.adapter.as_ref())
    }

    pub fn adapter_mut(&mut self, key: AdapterKey) -> Option<&mut LoraAdapter> {
        self.model.weight_mut(key).and_then(|w| w.adapter.as_mut())
    }

    /// Sum of adapter parameter counts.
    pub fn trainable_parameter_count(&self) -> u64 {
        self.adapter_keys()
            .into_iter()
            .filter_map(|k| self.adapter(k))
            .map(|a| a.parameter_count() as u64)
            .sum()
    }

    /// The analytic count for this plan, from the architecture alone.
    pub fn expected_trainable_count(&self) -> u64 {
        let mut spec = self.model.spec().clone();
        spec.lora_targets = self.targets.clone();
        count_trainable(&spec, self.config.rank, self.plan.selected.len())
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.model.loss(batch)
    }

    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Gradients)> {
        self.model.loss_and_grads(batch)
    }

    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        self.model.accuracy(batch)
    }

    /// Folds every adapter into its base weight: `W <- W_0 + (alpha / r) B A`.
    pub fn merge(&self) -> ToyModel {
        let mut merged = self.model.clone();
        for block in &mut merged.blocks {
            for role in Role::ALL {
                if let Some(w) = block.weight_mut(role) {
                    *w = AdaptedWeight::frozen(w.merged());
                }
            }
        }
        merged
    }
}
