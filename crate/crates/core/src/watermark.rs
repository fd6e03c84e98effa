//! Aggregator-side watermark embedding.
//!
//! Each owner's copy is trained on the shared trigger set with its own
//! codeword labels. The collusion-aware term simulates pairwise parameter
//! averaging with sampled partners and rewards whichever of the two
//! codewords the merged model already leans towards; functional
//! regularization keeps every copy's outputs on auxiliary data close to the
//! global average. Between rounds the trigger inputs themselves are refined
//! with projected sign-gradient steps inside an L-infinity ball around the
//! initial set.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy, log_softmax_rows, sgd_step, SgdConfig, Tape, Tensor, Var};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{average_states, forward_graph, BnMode, ModelCopy};
use crate::rng::{stream, tag};
use crate::tardos::Codebook;

/// Embedding configurations compared in the evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Plain FedAvg with per-copy bookkeeping, no watermark.
    NoWm,
    /// Per-owner cross entropy only.
    Vanilla,
    /// Cross entropy plus collusion-aware term, trigger optimization.
    Blackcatt,
    /// As `Blackcatt`, plus functional regularization.
    BlackcattFr,
    /// `BlackcattFr` without trigger optimization.
    NoGradX,
    /// `BlackcattFr` without the collusion-aware term.
    NoCa,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::NoWm,
        Scheme::Vanilla,
        Scheme::Blackcatt,
        Scheme::BlackcattFr,
        Scheme::NoGradX,
        Scheme::NoCa,
    ];

    pub fn embeds(self) -> bool {
        self != Scheme::NoWm
    }

    pub fn uses_ca(self) -> bool {
        matches!(self, Scheme::Blackcatt | Scheme::BlackcattFr | Scheme::NoGradX)
    }

    pub fn uses_fr(self) -> bool {
        matches!(self, Scheme::BlackcattFr | Scheme::NoGradX | Scheme::NoCa)
    }

    pub fn optimizes_triggers(self) -> bool {
        matches!(self, Scheme::Blackcatt | Scheme::BlackcattFr | Scheme::NoCa)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::NoWm => "no-wm",
            Scheme::Vanilla => "vanilla",
            Scheme::Blackcatt => "blackcatt",
            Scheme::BlackcattFr => "blackcatt-fr",
            Scheme::NoGradX => "no-grad-x",
            Scheme::NoCa => "no-ca",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

/// Granularity of the `min` in the collusion-aware term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MinMode {
    /// Elementwise over triggers, then averaged.
    #[default]
    PerTrigger,
    /// Between the two dataset-level cross entropies.
    PerDataset,
}

/// Direction of the sign-gradient trigger step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepDirection {
    /// `x - eps * sign(grad)`: lowers the embedding loss.
    #[default]
    Descent,
    /// `x + eps * sign(grad)`.
    Ascent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub lr_wm: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_ca: f64,
    /// Virtual-collusion partners per owner and round.
    pub partners: usize,
    pub lambda_fr: f64,
    pub aux_batch: usize,
    pub min_mode: MinMode,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            lr_wm: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_ca: 0.1,
            partners: 5,
            lambda_fr: 0.1,
            aux_batch: 64,
            min_mode: MinMode::PerTrigger,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self, n_owners: usize) -> Result<()> {
        if !(self.lambda_ca >= 0.0 && self.lambda_fr >= 0.0 && self.lr_wm >= 0.0) {
            return Err(Error::InvalidParameter(
                "lr_wm, lambda_ca and lambda_fr must be >= 0".into(),
            ));
        }
        if self.lambda_ca > 0.0 && !(1..n_owners).contains(&self.partners) {
            return Err(Error::InvalidParameter(format!(
                "partners M must lie in [1, N-1] = [1, {}], got {}",
                n_owners.saturating_sub(1),
                self.partners
            )));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig::new(self.lr_wm, self.momentum, self.weight_decay)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriggerOptConfig {
    /// Sign-gradient step size on the `[0, 255]` scale.
    pub step: f64,
    /// Steps per round; zero disables optimization.
    pub iterations: usize,
    pub direction: StepDirection,
}

impl Default for TriggerOptConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            iterations: 1,
            direction: StepDirection::Descent,
        }
    }
}

/// One owner's watermark: the shared triggers paired with its codeword.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Watermark {
    pub owner: usize,
    pub labels: Vec<usize>,
}

impl Watermark {
    pub fn from_codebook(codebook: &Codebook, owner: usize) -> Self {
        Self {
            owner,
            labels: codebook.owner_labels(owner),
        }
    }
}

/// Versioned shared trigger inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSet {
    pub n_triggers: usize,
    pub input_dim: usize,
    pub alpha: f64,
    pub version: u32,
    base: Vec<f64>,
    current: Vec<f64>,
}

pub const TRIGGER_MAGIC: &[u8; 4] = b"BCTS";
pub const TRIGGER_FORMAT_VERSION: u32 = 1;

impl TriggerSet {
    /// Integer-valued uniform draws on `{0, ..., 255}`.
    pub fn init(n_triggers: usize, input_dim: usize, alpha: f64, seed: u64) -> Result<Self> {
        if n_triggers == 0 || input_dim == 0 {
            return Err(Error::InvalidParameter("trigger set needs T >= 1 and input_dim >= 1".into()));
        }
        if !(alpha >= 0.0) {
            return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {alpha}")));
        }
        let mut rng = stream(seed, &[tag::TRIGGERS]);
        let base: Vec<f64> = (0..n_triggers * input_dim)
            .map(|_| rng.random_range(0..=255u32) as f64)
            .collect();
        Ok(Self {
            n_triggers,
            input_dim,
            alpha,
            version: 0,
            current: base.clone(),
            base,
        })
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    pub fn trigger(&self, i: usize) -> &[f64] {
        &self.current[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Replaces the current set after projecting it onto the feasible region.
    pub fn set_current(&mut self, x: Vec<f64>) -> Result<()> {
        if x.len() != self.base.len() {
            return Err(Error::Length {
                op: "set_current",
                left: self.base.len(),
                right: x.len(),
            });
        }
        self.current = x;
        project(&mut self.current, &self.base, self.alpha);
        Ok(())
    }

    /// Largest `|x - x0|` over all components.
    pub fn max_deviation(&self) -> f64 {
        self.current
            .iter()
            .zip(&self.base)
            .map(|(x, b)| (x - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_feasible(&self) -> bool {
        self.max_deviation() <= self.alpha && self.current.iter().all(|v| (0.0..=255.0).contains(v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(TRIGGER_MAGIC)
            .u32(TRIGGER_FORMAT_VERSION)
            .u32(self.n_triggers as u32)
            .u32(self.input_dim as u32)
            .f64(self.alpha)
            .u32(self.version)
            .f64s(&self.base)
            .f64s(&self.current);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "trigger set");
        r.expect_magic(TRIGGER_MAGIC)?;
        let fv = r.u32()?;
        if fv != TRIGGER_FORMAT_VERSION {
            return Err(Error::format("trigger set", format!("unsupported version {fv}")));
        }
        let n_triggers = r.u32()? as usize;
        let input_dim = r.u32()? as usize;
        let alpha = r.f64()?;
        let version = r.u32()?;
        let base = r.f64s(n_triggers * input_dim)?;
        let current = r.f64s(n_triggers * input_dim)?;
        r.expect_end()?;
        Ok(Self {
            n_triggers,
            input_dim,
            alpha,
            version,
            base,
            current,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Clamps onto `[x0 - alpha, x0 + alpha] ∩ [0, 255]` componentwise.
pub fn project(x: &mut [f64], base: &[f64], alpha: f64) {
    for (v, b) in x.iter_mut().zip(base) {
        let lo = (b - alpha).max(0.0);
        let hi = (b + alpha).min(255.0);
        *v = v.clamp(lo, hi);
    }
}

/// Loss value and gradient with respect to one model's trainable parameters.
#[derive(Clone, Debug)]
pub struct ParamLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Per-owner random choices of one embedding round, reused when optimizing
/// the triggers so both phases minimize the same objective.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    pub partners: Vec<Vec<usize>>,
    pub aux_batches: Vec<Vec<usize>>,
}

/// Functional-regularization inputs for one owner.
struct FrTerm<'a> {
    aux: &'a [f64],
    reference_logp: &'a [f64],
}

fn half_stats(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Collusion-aware term for one partner on the tape. `theta_j` holds owner
/// j's parameters; the partner's parameters enter as constants.
#[allow(clippy::too_many_arguments)]
fn ca_term(
    tape: &mut Tape,
    theta_j: Var,
    model_j: &ModelCopy,
    model_m: &ModelCopy,
    x: Var,
    labels_j: &[usize],
    labels_m: &[usize],
    mode: MinMode,
) -> Result<Var> {
    let theta_m = tape.constant(Tensor::vector(model_m.params().to_vec()));
    let merged = tape.axpby(0.5, theta_j, 0.5, theta_m)?;
    let stats = half_stats(model_j.bn_stats(), model_m.bn_stats());
    let fwd = forward_graph(tape, &model_j.arch, merged, &stats, x, BnMode::Frozen)?;
    let lp = tape.log_softmax(fwd.logits);
    let nll_j = tape.nll(lp, labels_j)?;
    let nll_m = tape.nll(lp, labels_m)?;
    Ok(match mode {
        MinMode::PerTrigger => {
            let m = tape.min(nll_j, nll_m)?;
            tape.mean(m)
        }
        MinMode::PerDataset => {
            let a = tape.mean(nll_j);
            let b = tape.mean(nll_m);
            tape.min(a, b)?
        }
    })
}

/// Builds `L_j` for owner `j` on `tape`.
#[allow(clippy::too_many_arguments)]
fn owner_loss(
    tape: &mut Tape,
    j: usize,
    theta_j: Var,
    models: &[ModelCopy],
    x: Var,
    codebook: &Codebook,
    partners: &[usize],
    cfg: &EmbedConfig,
    fr: Option<FrTerm<'_>>,
) -> Result<Var> {
    let model_j = &models[j];
    let labels_j = codebook.owner_labels(j);
    let fwd = forward_graph(tape, &model_j.arch, theta_j, model_j.bn_stats(), x, BnMode::Frozen)?;
    let mut loss = cross_entropy(tape, fwd.logits, &labels_j)?;
    if cfg.lambda_ca > 0.0 && !partners.is_empty() {
        let mut ca: Option<Var> = None;
        for &m in partners {
            let labels_m = codebook.owner_labels(m);
            let term = ca_term(tape, theta_j, model_j, &models[m], x, &labels_j, &labels_m, cfg.min_mode)?;
            ca = Some(match ca {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let ca = ca.expect("non-empty partners");
        loss = tape.axpby(1.0, loss, cfg.lambda_ca, ca)?;
    }
    if let Some(fr) = fr {
        if cfg.lambda_fr > 0.0 {
            let d = model_j.arch.input_dim;
            let aux = tape.constant(Tensor::matrix(fr.aux.len() / d, d, fr.aux.to_vec())?);
            let f = forward_graph(tape, &model_j.arch, theta_j, model_j.bn_stats(), aux, BnMode::Frozen)?;
            let kl = tape.kl_to_reference(f.logits, fr.reference_logp)?;
            let kl = tape.mean(kl);
            loss = tape.axpby(1.0, loss, cfg.lambda_fr, kl)?;
        }
    }
    Ok(loss)
}

fn trigger_input(tape: &mut Tape, triggers: &[f64], dim: usize, grad: bool) -> Result<Var> {
    let t = Tensor::matrix(triggers.len() / dim, dim, triggers.to_vec())?;
    Ok(tape.leaf(if grad { t.with_grad() } else { t }))
}

fn finite(value: f64, context: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{context} ({value})")))
    }
}

/// Collusion-aware loss of owner `j` against one partner `m`:
/// cross entropies of both codewords on the half-half parameter average,
/// combined by `min`. The gradient is taken with respect to `model_j`'s
/// parameters only.
pub fn collusion_aware_loss(
    model_j: &ModelCopy,
    model_m: &ModelCopy,
    wm_j: &Watermark,
    wm_m: &Watermark,
    triggers: &[f64],
    mode: MinMode,
) -> Result<ParamLoss> {
    model_j.ensure_same_arch(model_m)?;
    let mut tape = Tape::new();
    let theta = tape.leaf(Tensor::vector(model_j.params().to_vec()).with_grad());
    let x = trigger_input(&mut tape, triggers, model_j.arch.input_dim, false)?;
    let loss = ca_term(&mut tape, theta, model_j, model_m, x, &wm_j.labels, &wm_m.labels, mode)?;
    let value = finite(tape.value(loss).item(), "collusion-aware loss")?;
    let grad = tape.backward(loss).get_or_zeros(theta, model_j.arch.param_count());
    Ok(ParamLoss { value, grad })
}

/// Mean over `aux` of `KL(f_j(x) || f_avg(x))`, the average model held fixed.
pub fn functional_reg_loss(model_j: &ModelCopy, global_avg: &ModelCopy, aux: &[f64]) -> Result<ParamLoss> {
    model_j.ensure_same_arch(global_avg)?;
    let q = model_j.arch.num_classes;
    let reference = log_softmax_rows(&global_avg.forward(aux)?, q);
    let mut tape = Tape::new();
    let theta = tape.leaf(Tensor::vector(model_j.params().to_vec()).with_grad());
    let d = model_j.arch.input_dim;
    let x = tape.constant(Tensor::matrix(aux.len() / d, d, aux.to_vec())?);
    let f = forward_graph(&mut tape, &model_j.arch, theta, model_j.bn_stats(), x, BnMode::Frozen)?;
    let kl = tape.kl_to_reference(f.logits, &reference)?;
    let loss = tape.mean(kl);
    let value = finite(tape.value(loss).item(), "functional regularization")?;
    let grad = tape.backward(loss).get_or_zeros(theta, model_j.arch.param_count());
    Ok(ParamLoss { value, grad })
}

/// Aggregator-side embedding state: one momentum buffer per owner copy.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub config: EmbedConfig,
    pub scheme: Scheme,
    buffers: Vec<Vec<f64>>,
}

/// Summary of one embedding round.
#[derive(Clone, Debug)]
pub struct EmbedOutcome {
    pub plan: RoundPlan,
    /// `L_j` per owner, evaluated before the step.
    pub losses: Vec<f64>,
}

impl Embedder {
    pub fn new(config: EmbedConfig, scheme: Scheme, n_owners: usize, param_count: usize) -> Self {
        Self {
            config,
            scheme,
            buffers: vec![vec![0.0; param_count]; n_owners],
        }
    }

    /// Effective configuration: scheme switches override the lambdas.
    pub fn effective_config(&self) -> EmbedConfig {
        let mut cfg = self.config.clone();
        if !self.scheme.uses_ca() {
            cfg.lambda_ca = 0.0;
        }
        if !self.scheme.uses_fr() {
            cfg.lambda_fr = 0.0;
        }
        cfg
    }

    /// Draws every owner's partners and auxiliary batch for `round`.
    pub fn plan_round(&self, n_owners: usize, aux_len: usize, round: u32, seed: u64) -> RoundPlan {
        let cfg = self.effective_config();
        let mut partners = Vec::with_capacity(n_owners);
        let mut aux_batches = Vec::with_capacity(n_owners);
        for j in 0..n_owners {
            let mut rng = stream(seed, &[tag::EMBED, round as u64, j as u64]);
            let p = if cfg.lambda_ca > 0.0 && n_owners > 1 {
                let m = cfg.partners.min(n_owners - 1);
                sample_indices(&mut rng, n_owners - 1, m)
                    .into_iter()
                    .map(|k| if k >= j { k + 1 } else { k })
                    .collect()
            } else {
                Vec::new()
            };
            let a = if cfg.lambda_fr > 0.0 && aux_len > 0 {
                let b = cfg.aux_batch.min(aux_len);
                let mut idx = sample_indices(&mut rng, aux_len, b).into_vec();
                idx.sort_unstable();
                idx
            } else {
                Vec::new()
            };
            partners.push(p);
            aux_batches.push(a);
        }
        RoundPlan { partners, aux_batches }
    }

    /// One embedding step for every copy on a single batch holding the full
    /// trigger set, BN frozen. All owners see the copies as they were at the
    /// start of the round, so the result does not depend on owner order.
    ///
    /// `aux` is the auxiliary pool `[n, input_dim]`; the global average for
    /// functional regularization is computed once from `models`.
    pub fn embed_round(
        &mut self,
        models: &mut [ModelCopy],
        triggers: &TriggerSet,
        codebook: &Codebook,
        aux: &[f64],
        round: u32,
        seed: u64,
    ) -> Result<EmbedOutcome> {
        let n = models.len();
        if codebook.n_owners != n || codebook.n_triggers != triggers.n_triggers {
            return Err(Error::InvalidParameter(format!(
                "codebook is {}x{}, federation has {n} owners and {} triggers",
                codebook.n_owners, codebook.n_triggers, triggers.n_triggers
            )));
        }
        let cfg = self.effective_config();
        cfg.validate(n)?;
        let arch = models[0].arch.clone();
        for m in models.iter() {
            models[0].ensure_same_arch(m)?;
        }
        let d = arch.input_dim;
        let aux_len = aux.len() / d;
        let plan = self.plan_round(n, aux_len, round, seed);

        let reference = if cfg.lambda_fr > 0.0 && aux_len > 0 {
            let refs: Vec<&ModelCopy> = models.iter().collect();
            let avg = ModelCopy::unflatten(&arch, average_states(&refs)?)?;
            Some(log_softmax_rows(&avg.forward(aux)?, arch.num_classes))
        } else {
            None
        };
        let q = arch.num_classes;
        let snapshot: &[ModelCopy] = models;
        let results: Vec<Result<ParamLoss>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut tape = Tape::new();
                let theta = tape.leaf(Tensor::vector(snapshot[j].params().to_vec()).with_grad());
                let x = trigger_input(&mut tape, triggers.current(), d, false)?;
                let (aux_rows, ref_rows) = match &reference {
                    Some(r) => {
                        let idx = &plan.aux_batches[j];
                        let mut a = Vec::with_capacity(idx.len() * d);
                        let mut rl = Vec::with_capacity(idx.len() * q);
                        for &i in idx {
                            a.extend_from_slice(&aux[i * d..(i + 1) * d]);
                            rl.extend_from_slice(&r[i * q..(i + 1) * q]);
                        }
                        (a, rl)
                    }
                    None => (Vec::new(), Vec::new()),
                };
                let fr = reference.as_ref().map(|_| FrTerm {
                    aux: &aux_rows,
                    reference_logp: &ref_rows,
                });
                let loss = owner_loss(&mut tape, j, theta, snapshot, x, codebook, &plan.partners[j], &cfg, fr)?;
                let value = finite(tape.value(loss).item(), &format!("embedding loss of owner {j}"))?;
                let grad = tape.backward(loss).get_or_zeros(theta, arch.param_count());
                Ok(ParamLoss { value, grad })
            })
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        let mask = arch.trainable_mask(true);
        let sgd = cfg.sgd();
        let mut losses = Vec::with_capacity(n);
        for (j, r) in results.into_iter().enumerate() {
            sgd_step(models[j].params_mut(), &r.grad, &mut self.buffers[j], &sgd, Some(&mask))?;
            losses.push(r.value);
        }
        Ok(EmbedOutcome { plan, losses })
    }
}

/// Trigger-dependent part of `sum_j L_j` and its gradient with respect to the
/// trigger inputs. Functional regularization does not depend on the triggers
/// and is left out.
pub fn trigger_objective(
    x: &[f64],
    models: &[ModelCopy],
    codebook: &Codebook,
    plan: &RoundPlan,
    cfg: &EmbedConfig,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let d = models[0].arch.input_dim;
    let per_owner: Vec<Result<(f64, Vec<f64>)>> = (0..models.len())
        .into_par_iter()
        .map(|j| {
            let mut tape = Tape::new();
            let theta = tape.constant(Tensor::vector(models[j].params().to_vec()));
            let xv = trigger_input(&mut tape, x, d, with_grad)?;
            let loss = owner_loss(&mut tape, j, theta, models, xv, codebook, &plan.partners[j], cfg, None)?;
            let value = finite(tape.value(loss).item(), &format!("trigger objective of owner {j}"))?;
            let grad = if with_grad {
                tape.backward(loss).get_or_zeros(xv, x.len())
            } else {
                Vec::new()
            };
            Ok((value, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = if with_grad { vec![0.0; x.len()] } else { Vec::new() };
    for r in per_owner {
        let (v, g) = r?;
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Result of [`optimize_triggers`].
#[derive(Clone, Debug)]
pub struct TriggerOptOutcome {
    /// Objective at iterates `k = 0..=K`.
    pub objective: Vec<f64>,
    /// Index of the returned iterate.
    pub chosen: usize,
}

/// `K` projected sign-gradient steps on the summed embedding loss, then the
/// iterate with the lowest objective (including the starting point) becomes
/// the new current set. The version is incremented even when `K = 0`.
pub fn optimize_triggers(
    triggers: &mut TriggerSet,
    models: &[ModelCopy],
    codebook: &Codebook,
    plan: &RoundPlan,
    cfg: &EmbedConfig,
    opt: &TriggerOptConfig,
) -> Result<TriggerOptOutcome> {
    if opt.iterations == 0 {
        triggers.version += 1;
        return Ok(TriggerOptOutcome {
            objective: Vec::new(),
            chosen: 0,
        });
    }
    let sign = match opt.direction {
        StepDirection::Descent => -1.0,
        StepDirection::Ascent => 1.0,
    };
    let mut x = triggers.current().to_vec();
    let mut best = (f64::INFINITY, 0usize, x.clone());
    let mut objective = Vec::with_capacity(opt.iterations + 1);
    for k in 0..=opt.iterations {
        let last = k == opt.iterations;
        let (value, grad) = trigger_objective(&x, models, codebook, plan, cfg, !last)?;
        objective.push(value);
        if value < best.0 {
            best = (value, k, x.clone());
        }
        if last {
            break;
        }
        for (v, g) in x.iter_mut().zip(&grad) {
            let s = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v += sign * opt.step * s;
        }
        project(&mut x, triggers.base(), triggers.alpha);
    }
    triggers.set_current(best.2)?;
    triggers.version += 1;
    Ok(TriggerOptOutcome {
        objective,
        chosen: best.1,
    })
}
