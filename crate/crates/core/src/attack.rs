//! Adversary-side manipulations: collusion merges of several owners' copies
//! and post-merge watermark-removal attempts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::{local_train, LocalTrainConfig};
use crate::model::{average_states, ModelCopy, ModelTag};
use crate::rng::{stream, tag};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeOp {
    /// Componentwise mean of the colluders' states.
    #[default]
    Average,
    /// Each layer copied whole from a uniformly chosen colluder.
    LayerSample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    /// One magnitude ranking over all weight matrices.
    #[default]
    Global,
    /// A separate ranking and quota per weight matrix.
    PerLayer,
}

/// An attack recipe without a concrete colluder set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackTemplate {
    /// Number of colluders `c`.
    pub colluders: usize,
    pub merge: MergeOp,
    pub prune_ratio: f64,
    pub prune_scope: PruneScope,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
}

impl Default for AttackTemplate {
    fn default() -> Self {
        Self {
            colluders: 2,
            merge: MergeOp::Average,
            prune_ratio: 0.0,
            prune_scope: PruneScope::Global,
            finetune_epochs: 0,
            finetune_lr: 0.01,
            finetune_batch: 64,
        }
    }
}

impl AttackTemplate {
    /// Short label such as `avg`, `layer+prune0.3` or `avg+ft5`.
    pub fn label(&self) -> String {
        let mut s = match self.merge {
            MergeOp::Average => "avg".to_string(),
            MergeOp::LayerSample => "layer".to_string(),
        };
        if self.prune_ratio > 0.0 {
            s.push_str(&format!("+prune{}", self.prune_ratio));
        }
        if self.finetune_epochs > 0 {
            s.push_str(&format!("+ft{}", self.finetune_epochs));
        }
        s
    }

    pub fn validate(&self, n_owners: usize) -> Result<()> {
        if self.colluders == 0 || self.colluders > n_owners {
            return Err(Error::InvalidParameter(format!(
                "collusion size must lie in [1, {n_owners}], got {}",
                self.colluders
            )));
        }
        if !(0.0..=1.0).contains(&self.prune_ratio) {
            return Err(Error::InvalidParameter(format!(
                "prune ratio must lie in [0, 1], got {}",
                self.prune_ratio
            )));
        }
        Ok(())
    }

    pub fn with_colluders(&self, colluders: Vec<usize>, seed: u64) -> CollusionSpec {
        CollusionSpec {
            colluders,
            template: self.clone(),
            seed,
        }
    }
}

/// A concrete attack: who colludes and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollusionSpec {
    pub colluders: Vec<usize>,
    pub template: AttackTemplate,
    pub seed: u64,
}

impl CollusionSpec {
    pub fn validate(&self, n_owners: usize) -> Result<()> {
        if self.colluders.is_empty() {
            return Err(Error::InvalidParameter("collusion needs at least one colluder".into()));
        }
        let mut s = self.colluders.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.colluders.len() {
            return Err(Error::InvalidParameter(format!("duplicate colluders in {:?}", self.colluders)));
        }
        if let Some(bad) = self.colluders.iter().find(|&&j| j >= n_owners) {
            return Err(Error::InvalidParameter(format!("colluder {bad} out of range for N={n_owners}")));
        }
        if !(0.0..=1.0).contains(&self.template.prune_ratio) {
            return Err(Error::InvalidParameter(format!(
                "prune ratio must lie in [0, 1], got {}",
                self.template.prune_ratio
            )));
        }
        Ok(())
    }
}

/// Componentwise mean of the states, BN running statistics included.
pub fn collude_average(models: &[&ModelCopy]) -> Result<ModelCopy> {
    let first = models
        .first()
        .ok_or_else(|| Error::EmptyData("collusion of zero models".into()))?;
    let state = average_states(models)?;
    Ok(ModelCopy::unflatten(&first.arch, state)?.with_tag(ModelTag::Merged, first.round))
}

/// Copies every layer block (weights, bias, BN parameters and statistics)
/// from a uniformly chosen colluder. Returns the merged model and the source
/// index (into `models`) of each layer.
pub fn collude_layer_sample<R: Rng + ?Sized>(models: &[&ModelCopy], rng: &mut R) -> Result<(ModelCopy, Vec<usize>)> {
    if models.len() < 2 {
        return Err(Error::InvalidParameter("layer sampling needs at least two models".into()));
    }
    let first = models[0];
    for m in &models[1..] {
        first.ensure_same_arch(m)?;
    }
    let mut out = first.clone().with_tag(ModelTag::Merged, first.round);
    let mut sources = Vec::new();
    for layer in first.arch.layers() {
        let src = rng.random_range(0..models.len());
        sources.push(src);
        let from = models[src].flatten();
        let mut ranges = vec![layer.param_range()];
        ranges.extend(layer.stats_range());
        for r in ranges {
            out.state_mut()[r.clone()].copy_from_slice(&from[r]);
        }
    }
    Ok((out, sources))
}

/// Zeroes the `floor(ratio * d)` smallest-magnitude weights, `d` being the
/// number of weight-matrix entries; biases and BN parameters are exempt.
/// Ties go to the lower parameter index.
pub fn prune_l1(model: &ModelCopy, ratio: f64, scope: PruneScope) -> Result<ModelCopy> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidParameter(format!("prune ratio must lie in [0, 1], got {ratio}")));
    }
    let mut out = model.clone();
    let groups: Vec<Vec<usize>> = match scope {
        PruneScope::Global => vec![model.arch.layers().into_iter().flat_map(|l| l.weight).collect()],
        PruneScope::PerLayer => model.arch.layers().into_iter().map(|l| l.weight.collect()).collect(),
    };
    let state = out.state_mut();
    for mut idx in groups {
        let k = (ratio * idx.len() as f64).floor() as usize;
        idx.sort_by(|&a, &b| state[a].abs().total_cmp(&state[b].abs()).then(a.cmp(&b)));
        for &i in &idx[..k] {
            state[i] = 0.0;
        }
    }
    Ok(out)
}

/// Ordinary training on the colluders' pooled data, BN in training mode.
pub fn finetune(model: &ModelCopy, pooled: &Dataset, epochs: usize, lr: f64, batch: usize, seed: u64) -> Result<ModelCopy> {
    if epochs == 0 {
        return Ok(model.clone());
    }
    let cfg = LocalTrainConfig {
        lr,
        momentum: 0.9,
        weight_decay: 1e-4,
        epochs,
        batch,
    };
    let mut out = local_train(model, pooled, &cfg, &mut stream(seed, &[tag::ATTACK, 1]))?;
    out.tag = ModelTag::Merged;
    Ok(out)
}

/// Merge, then prune, then fine-tune. `shards` are all owners' private data;
/// only the colluders' shards are used.
pub fn apply_attack(models: &[ModelCopy], spec: &CollusionSpec, shards: Option<&[Dataset]>) -> Result<ModelCopy> {
    spec.validate(models.len())?;
    let picked: Vec<&ModelCopy> = spec.colluders.iter().map(|&j| &models[j]).collect();
    let t = &spec.template;
    let mut merged = if picked.len() == 1 {
        picked[0].clone().with_tag(ModelTag::Merged, picked[0].round)
    } else {
        match t.merge {
            MergeOp::Average => collude_average(&picked)?,
            MergeOp::LayerSample => collude_layer_sample(&picked, &mut stream(spec.seed, &[tag::ATTACK, 0]))?.0,
        }
    };
    if t.prune_ratio > 0.0 {
        merged = prune_l1(&merged, t.prune_ratio, t.prune_scope)?;
    }
    if t.finetune_epochs > 0 {
        let shards = shards.ok_or_else(|| Error::EmptyData("fine-tuning needs the colluders' data".into()))?;
        let parts: Vec<&Dataset> = spec.colluders.iter().map(|&j| &shards[j]).collect();
        let pooled = Dataset::concat(&parts)?;
        merged = finetune(&merged, &pooled, t.finetune_epochs, t.finetune_lr, t.finetune_batch, spec.seed)?;
    }
    Ok(merged)
}
