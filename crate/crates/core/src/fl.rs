//! Simulated federation: participant sampling, local training, update
//! collection, task arithmetic over per-owner copies, watermark embedding,
//! and per-round metrics.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::collude_average;
use crate::autodiff::{cross_entropy, sgd_step, SgdConfig, Tape, Tensor};
use crate::data::{partition_data, Dataset, SyntheticTask, TaskConfig};
use crate::error::{Error, Result};
use crate::model::{forward_graph, ArchDescriptor, BnMode, ModelCopy, ModelTag};
use crate::rng::{derive_seed, stream, tag, StreamRng};
use crate::tardos::{mav, Codebook, CutoffSampler};
use crate::verify::{verify, VerifyMode, VerifyOptions};
use crate::watermark::{optimize_triggers, EmbedConfig, Embedder, Scheme, TriggerOptConfig, TriggerSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub n_owners: usize,
    pub participants: usize,
    pub rounds: u32,
    pub lr_mt: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub local_epochs: usize,
    pub seed: u64,
    /// Whether BN running statistics are part of the shared update.
    pub bn_stats_in_delta: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_owners: 20,
            participants: 10,
            rounds: 100,
            lr_mt: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 64,
            local_epochs: 1,
            seed: 0,
            bn_stats_in_delta: true,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=self.n_owners).contains(&self.participants) {
            return Err(Error::Config(format!(
                "participants P={} must lie in [1, N={}]",
                self.participants, self.n_owners
            )));
        }
        if !(self.lr_mt > 0.0) {
            return Err(Error::Config(format!("lr_mt must be > 0, got {}", self.lr_mt)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn local(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            lr: self.lr_mt,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.local_epochs,
            batch: self.batch,
        }
    }
}

/// Watermark-side settings of a federation.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkConfig {
    pub scheme: Scheme,
    pub n_triggers: usize,
    pub alpha: f64,
    pub embed: EmbedConfig,
    pub trigger_opt: TriggerOptConfig,
    pub kappa: f64,
    pub tau: f64,
    pub cutoff: CutoffSampler,
    pub eps_fp: f64,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::BlackcattFr,
            n_triggers: 100,
            alpha: 64.0,
            embed: EmbedConfig::default(),
            trigger_opt: TriggerOptConfig::default(),
            kappa: 0.5,
            tau: 0.01,
            cutoff: CutoffSampler::Rejection,
            eps_fp: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Evaluate every this many rounds (and always on the last round).
    pub every: u32,
    /// Sampled two-owner collusions per evaluation.
    pub collusions: usize,
    /// Record wall-clock time; off by default so metrics files are
    /// reproducible byte for byte.
    pub timing: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            every: 1,
            collusions: 20,
            timing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Mean centralized test accuracy over all copies.
    pub test_acc: Option<f64>,
    /// Mean cross entropy of each copy on its own watermark.
    pub trigger_ce: Option<f64>,
    pub mav_c2: Option<f64>,
    pub fnr_c2: Option<f64>,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "round,test_acc,trigger_ce,mav_c2,fnr_c2,wall_ms";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.round,
            opt_field(self.test_acc),
            opt_field(self.trigger_ce),
            opt_field(self.mav_c2),
            opt_field(self.fnr_c2),
            self.wall_ms
        )
    }
}

/// Local SGD over shuffled mini-batches with BN in training mode. Momentum
/// buffers start at zero: an owner receives a fresh model every round.
pub fn local_train(model: &ModelCopy, shard: &Dataset, cfg: &LocalTrainConfig, rng: &mut StreamRng) -> Result<ModelCopy> {
    if shard.is_empty() {
        return Err(Error::EmptyData("local training on an empty shard".into()));
    }
    if shard.dim != model.arch.input_dim {
        return Err(Error::Length {
            op: "local_train",
            left: model.arch.input_dim,
            right: shard.dim,
        });
    }
    let sgd = SgdConfig::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut out = model.clone();
    let pc = out.arch.param_count();
    let mut buffer = vec![0.0; pc];
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let batch = cfg.batch.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let b = shard.subset(chunk);
            let mut tape = Tape::new();
            let theta = tape.leaf(Tensor::vector(out.params().to_vec()).with_grad());
            let x = tape.constant(Tensor::matrix(b.len(), b.dim, b.features)?);
            let fwd = forward_graph(&mut tape, &out.arch, theta, out.bn_stats(), x, BnMode::Train)?;
            let loss = cross_entropy(&mut tape, fwd.logits, &b.labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("local training loss ({value})")));
            }
            let grad = tape.backward(loss).get_or_zeros(theta, pc);
            sgd_step(out.params_mut(), &grad, &mut buffer, &sgd, None)?;
            if let Some(stats) = fwd.new_stats {
                out.state_mut()[pc..].copy_from_slice(&stats);
            }
        }
    }
    Ok(out)
}

/// Mean of `trained - original` over the participants, as a flat state delta.
pub fn aggregate_update(trained: &[ModelCopy], originals: &[ModelCopy]) -> Result<Vec<f64>> {
    if trained.len() != originals.len() {
        return Err(Error::Length {
            op: "aggregate_update",
            left: originals.len(),
            right: trained.len(),
        });
    }
    let first = originals
        .first()
        .ok_or_else(|| Error::EmptyData("aggregating zero updates".into()))?;
    let mut delta = vec![0.0; first.flatten().len()];
    for (t, o) in trained.iter().zip(originals) {
        first.ensure_same_arch(t)?;
        first.ensure_same_arch(o)?;
        for ((d, a), b) in delta.iter_mut().zip(t.flatten()).zip(o.flatten()) {
            *d += a - b;
        }
    }
    let p = trained.len() as f64;
    delta.iter_mut().for_each(|d| *d /= p);
    Ok(delta)
}

/// Adds the shared delta to every copy, participants or not. With
/// `include_bn_stats` false only the trainable parameters move.
pub fn apply_task_arithmetic(models: &mut [ModelCopy], delta: &[f64], include_bn_stats: bool) -> Result<()> {
    for m in models.iter_mut() {
        let len = m.flatten().len();
        if delta.len() != len {
            return Err(Error::Length {
                op: "apply_task_arithmetic",
                left: len,
                right: delta.len(),
            });
        }
        let upto = if include_bn_stats { len } else { m.arch.param_count() };
        for (v, d) in m.state_mut()[..upto].iter_mut().zip(delta) {
            *v += d;
        }
    }
    Ok(())
}

/// Mean cross entropy of each copy on the triggers with its own labels.
pub fn mean_trigger_ce(models: &[ModelCopy], triggers: &[f64], codebook: &Codebook) -> Result<f64> {
    let per: Vec<Result<f64>> = models
        .par_iter()
        .enumerate()
        .map(|(j, m)| {
            let mut tape = Tape::new();
            let theta = tape.constant(Tensor::vector(m.params().to_vec()));
            let x = tape.constant(Tensor::matrix(codebook.n_triggers, m.arch.input_dim, triggers.to_vec())?);
            let fwd = forward_graph(&mut tape, &m.arch, theta, m.bn_stats(), x, BnMode::Frozen)?;
            let l = cross_entropy(&mut tape, fwd.logits, &codebook.owner_labels(j))?;
            Ok(tape.value(l).item())
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// MAV and full-set FNR over `n` sampled two-owner averaging collusions.
pub fn c2_collusion_metrics(
    models: &[ModelCopy],
    triggers: &[f64],
    codebook: &Codebook,
    eps_fp: f64,
    n: usize,
    rng: &mut StreamRng,
) -> Result<(f64, f64)> {
    if models.len() < 2 || n == 0 {
        return Err(Error::InvalidParameter("C2 metrics need N >= 2 and at least one collusion".into()));
    }
    let pairs: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut p = sample_indices(rng, models.len(), 2).into_vec();
            p.sort_unstable();
            p
        })
        .collect();
    let outcomes: Vec<Result<(f64, bool)>> = pairs
        .par_iter()
        .map(|pair| {
            let merged = collude_average(&[&models[pair[0]], &models[pair[1]]])?;
            let observed = merged.predict_labels(triggers)?;
            let m = mav(&observed, &codebook.colluder_label_sets(pair))?;
            let report = verify(
                &mut merged.clone(),
                triggers,
                merged.arch.input_dim,
                codebook,
                &VerifyOptions::new(eps_fp, VerifyMode::FullSet),
            )?;
            let hit = report.accused.iter().any(|a| pair.contains(a));
            Ok((m, !hit))
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let mav_mean = outcomes.iter().map(|o| o.0).sum::<f64>() / n as f64;
    let fnr = outcomes.iter().filter(|o| o.1).count() as f64 / n as f64;
    Ok((mav_mean, fnr))
}

/// The full simulated federation.
#[derive(Clone, Debug)]
pub struct Federation {
    pub fed: FederationConfig,
    pub wm: WatermarkConfig,
    pub metrics: MetricsConfig,
    pub arch: ArchDescriptor,
    pub task: SyntheticTask,
    pub shards: Vec<Dataset>,
    pub models: Vec<ModelCopy>,
    pub triggers: TriggerSet,
    pub codebook: Codebook,
    embedder: Embedder,
    /// Rounds completed so far.
    pub round: u32,
}

impl Federation {
    /// Every copy starts from the same initial global model.
    pub fn new(
        fed: FederationConfig,
        wm: WatermarkConfig,
        metrics: MetricsConfig,
        arch: ArchDescriptor,
        task_cfg: &TaskConfig,
    ) -> Result<Self> {
        fed.validate()?;
        arch.validate()?;
        let seed = fed.seed;
        let task = SyntheticTask::generate(task_cfg, arch.input_dim, arch.num_classes, fed.n_owners, seed)?;
        let shards = partition_data(&task.train, fed.n_owners, seed)?;
        let init = ModelCopy::init(&arch, derive_seed(seed, &[tag::INIT]))?;
        let models = (0..fed.n_owners)
            .map(|j| init.clone().with_tag(ModelTag::Owner(j as u32), 0))
            .collect();
        let triggers = TriggerSet::init(wm.n_triggers, arch.input_dim, wm.alpha, seed)?;
        let codebook = Codebook::generate_with(
            wm.cutoff,
            fed.n_owners,
            wm.n_triggers,
            arch.num_classes,
            wm.kappa,
            wm.tau,
            seed,
        )?;
        let embedder = Embedder::new(wm.embed.clone(), wm.scheme, fed.n_owners, arch.param_count());
        embedder
            .effective_config()
            .validate(fed.n_owners)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            fed,
            wm,
            metrics,
            arch,
            task,
            shards,
            models,
            triggers,
            codebook,
            embedder,
            round: 0,
        })
    }

    /// Uniform participant subset for round `r`, in ascending order.
    pub fn participants(&self, r: u32) -> Vec<usize> {
        let mut rng = stream(self.fed.seed, &[tag::PARTICIPANTS, r as u64]);
        let mut p = sample_indices(&mut rng, self.fed.n_owners, self.fed.participants).into_vec();
        p.sort_unstable();
        p
    }

    /// One round: local training of the participants, aggregation, task
    /// arithmetic on all copies, watermark embedding, trigger optimization.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let start = Instant::now();
        let r = self.round;
        let seed = self.fed.seed;
        let chosen = self.participants(r);
        let local = self.fed.local();
        let originals: Vec<ModelCopy> = chosen.iter().map(|&j| self.models[j].clone()).collect();
        let trained: Vec<Result<ModelCopy>> = chosen
            .par_iter()
            .zip(originals.par_iter())
            .map(|(&j, m)| {
                let mut rng = stream(seed, &[tag::LOCAL_TRAIN, r as u64, j as u64]);
                local_train(m, &self.shards[j], &local, &mut rng)
            })
            .collect();
        let trained = trained.into_iter().collect::<Result<Vec<_>>>()?;
        let delta = aggregate_update(&trained, &originals)?;
        apply_task_arithmetic(&mut self.models, &delta, self.fed.bn_stats_in_delta)?;

        if self.wm.scheme.embeds() {
            let outcome = self.embedder.embed_round(
                &mut self.models,
                &self.triggers,
                &self.codebook,
                &self.task.aux,
                r,
                seed,
            )?;
            let opt = if self.wm.scheme.optimizes_triggers() {
                self.wm.trigger_opt
            } else {
                TriggerOptConfig {
                    iterations: 0,
                    ..self.wm.trigger_opt
                }
            };
            let cfg = self.embedder.effective_config();
            optimize_triggers(&mut self.triggers, &self.models, &self.codebook, &outcome.plan, &cfg, &opt)?;
        } else {
            self.triggers.version += 1;
        }

        self.round += 1;
        for m in self.models.iter_mut() {
            m.round = self.round;
        }
        let evaluate = self.metrics.every > 0 && (self.round % self.metrics.every == 0 || self.round == self.fed.rounds);
        let mut metrics = if evaluate {
            self.evaluate()?
        } else {
            RoundMetrics {
                round: self.round,
                test_acc: None,
                trigger_ce: None,
                mav_c2: None,
                fnr_c2: None,
                wall_ms: 0,
            }
        };
        if self.metrics.timing {
            metrics.wall_ms = start.elapsed().as_millis() as u64;
        }
        Ok(metrics)
    }

    /// Metrics for the current state, labeled with the number of completed rounds.
    pub fn evaluate(&self) -> Result<RoundMetrics> {
        let accs: Vec<Result<f64>> = self
            .models
            .par_iter()
            .map(|m| m.accuracy(&self.task.test.features, &self.task.test.labels))
            .collect();
        let accs = accs.into_iter().collect::<Result<Vec<_>>>()?;
        let test_acc = accs.iter().sum::<f64>() / accs.len() as f64;
        let (trigger_ce, mav_c2, fnr_c2) = if self.wm.scheme.embeds() {
            let ce = mean_trigger_ce(&self.models, self.triggers.current(), &self.codebook)?;
            let (m, f) = if self.fed.n_owners >= 2 && self.metrics.collusions > 0 {
                let mut rng = stream(self.fed.seed, &[tag::METRICS, self.round as u64]);
                let (m, f) = c2_collusion_metrics(
                    &self.models,
                    self.triggers.current(),
                    &self.codebook,
                    self.wm.eps_fp,
                    self.metrics.collusions,
                    &mut rng,
                )?;
                (Some(m), Some(f))
            } else {
                (None, None)
            };
            (Some(ce), m, f)
        } else {
            (None, None, None)
        };
        Ok(RoundMetrics {
            round: self.round,
            test_acc: Some(test_acc),
            trigger_ce,
            mav_c2,
            fnr_c2,
            wall_ms: 0,
        })
    }

    /// Runs all remaining rounds, calling `on_round` after each.
    pub fn run<F>(&mut self, mut on_round: F) -> Result<Vec<RoundMetrics>>
    where
        F: FnMut(&Federation, &RoundMetrics) -> Result<()>,
    {
        let mut all = Vec::new();
        while self.round < self.fed.rounds {
            let m = self.run_round()?;
            on_round(self, &m)?;
            all.push(m);
        }
        Ok(all)
    }

    /// Writes `<dir>/<round>/owner_<j>.bcat` and the current trigger version
    /// under `<dir>/secret/`.
    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        let round_dir = snapshot_dir(dir, self.round);
        for (j, m) in self.models.iter().enumerate() {
            m.save(&round_dir.join(format!("owner_{j}.bcat")))?;
        }
        self.triggers.save(&trigger_path(dir, self.triggers.version))
    }

    pub fn save_codebook(&self, dir: &Path) -> Result<()> {
        self.codebook.save(&codebook_path(dir))
    }
}

pub fn snapshot_dir(run_dir: &Path, round: u32) -> PathBuf {
    run_dir.join(round.to_string())
}

pub fn owner_snapshot_path(run_dir: &Path, round: u32, owner: usize) -> PathBuf {
    snapshot_dir(run_dir, round).join(format!("owner_{owner}.bcat"))
}

pub fn trigger_path(run_dir: &Path, version: u32) -> PathBuf {
    run_dir.join("secret").join(format!("triggers_{version}.bin"))
}

pub fn codebook_path(run_dir: &Path) -> PathBuf {
    run_dir.join("secret").join("codebook.bin")
}

/// Writes metrics rows as CSV.
pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[RoundMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}
