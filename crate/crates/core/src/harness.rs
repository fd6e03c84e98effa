//! Monte Carlo experiments over trained copies: false-negative trials under
//! collusion attacks and the two false-positive protocols.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_attack, AttackTemplate};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::{local_train, LocalTrainConfig};
use crate::model::{ArchDescriptor, ModelCopy, ModelTag};
use crate::rng::{derive_seed, stream, tag, StreamRng};
use crate::tardos::{mav, Codebook};
use crate::verify::{verify, AccusationReport, LabelOracle, VerifyMode, VerifyOptions};

impl LabelOracle for ModelCopy {
    fn query(&mut self, input: &[f64]) -> Result<usize> {
        self.predict_label(input)
    }
}

/// Uniform colluder set of size `c`, ascending.
pub fn sample_colluders(n_owners: usize, c: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    if c == 0 || c > n_owners {
        return Err(Error::InvalidParameter(format!("cannot pick {c} colluders from {n_owners} owners")));
    }
    let mut v = sample_indices(rng, n_owners, c).into_vec();
    v.sort_unstable();
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub attack: String,
    pub c: usize,
    pub colluders: Vec<usize>,
    pub accused: Vec<usize>,
    /// At least one true colluder accused.
    pub guilty_hit: bool,
    /// At least one innocent owner accused.
    pub innocent_accused: bool,
    pub accusation: bool,
    pub t_star: usize,
    pub mav: f64,
}

impl TrialRecord {
    fn from_report(trial: usize, attack: String, colluders: Vec<usize>, report: &AccusationReport, mav: f64) -> Self {
        let guilty_hit = report.accused.iter().any(|a| colluders.contains(a));
        let innocent_accused = report.accused.iter().any(|a| !colluders.contains(a));
        Self {
            trial,
            attack,
            c: colluders.len(),
            accused: report.accused.clone(),
            guilty_hit,
            innocent_accused,
            accusation: report.accused_any(),
            t_star: report.t_star,
            colluders,
            mav,
        }
    }

    /// Counts towards the false-negative rate: no true colluder accused.
    pub fn fnr_contrib(&self) -> u8 {
        u8::from(!self.guilty_hit)
    }
}

pub const TRIALS_HEADER: &str = "trial,attack,c,accused,guilty_hit,t_star,fnr_contrib";

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn write_trials_csv<W: Write>(out: &mut W, trials: &[TrialRecord]) -> Result<()> {
    writeln!(out, "{TRIALS_HEADER}")?;
    for t in trials {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            t.trial,
            t.attack,
            t.c,
            join(&t.accused),
            u8::from(t.guilty_hit),
            t.t_star,
            t.fnr_contrib()
        )?;
    }
    Ok(())
}

/// Aggregate over trials. Rates are `None` when there were no trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: Vec<TrialRecord>,
    pub fnr: Option<f64>,
    /// Trials whose accusations include an innocent owner.
    pub fpr: Option<f64>,
    /// Mean `t*` over trials that reached an accusation.
    pub mean_t_star: Option<f64>,
    pub mean_mav: Option<f64>,
}

impl TrialSummary {
    pub fn from_trials(trials: Vec<TrialRecord>) -> Self {
        let n = trials.len() as f64;
        let rate = |f: &dyn Fn(&TrialRecord) -> bool| (!trials.is_empty()).then(|| trials.iter().filter(|t| f(t)).count() as f64 / n);
        let fnr = rate(&|t| !t.guilty_hit);
        let fpr = rate(&|t| t.innocent_accused);
        let accused: Vec<f64> = trials.iter().filter(|t| t.accusation).map(|t| t.t_star as f64).collect();
        let mean_t_star = (!accused.is_empty()).then(|| accused.iter().sum::<f64>() / accused.len() as f64);
        let mean_mav = (!trials.is_empty()).then(|| trials.iter().map(|t| t.mav).sum::<f64>() / n);
        Self {
            trials,
            fnr,
            fpr,
            mean_t_star,
            mean_mav,
        }
    }

    /// Human-readable rate, with an explicit marker when there is no data.
    pub fn describe(v: Option<f64>) -> String {
        v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "no data".into())
    }
}

/// Inputs shared by every trial.
pub struct TrialContext<'a> {
    pub models: &'a [ModelCopy],
    /// Private data of every owner, needed only for fine-tuning attacks.
    pub shards: Option<&'a [Dataset]>,
    pub triggers: &'a [f64],
    pub codebook: &'a Codebook,
    pub eps_fp: f64,
}

impl TrialContext<'_> {
    fn check(&self) -> Result<()> {
        if self.models.len() != self.codebook.n_owners {
            return Err(Error::InvalidParameter(format!(
                "{} models for a codebook of {} owners",
                self.models.len(),
                self.codebook.n_owners
            )));
        }
        Ok(())
    }

    fn run_trial(&self, trial: usize, template: &AttackTemplate, mode: VerifyMode, seed: u64) -> Result<TrialRecord> {
        let trial_seed = derive_seed(seed, &[tag::EXPERIMENT, trial as u64]);
        let mut rng = stream(trial_seed, &[tag::ATTACK]);
        let colluders = sample_colluders(self.models.len(), template.colluders, &mut rng)?;
        let spec = template.with_colluders(colluders.clone(), trial_seed);
        let mut suspect = apply_attack(self.models, &spec, self.shards)?;
        let d = suspect.arch.input_dim;
        let observed = suspect.predict_labels(self.triggers)?;
        let m = mav(&observed, &self.codebook.colluder_label_sets(&colluders))?;
        let report = verify(&mut suspect, self.triggers, d, self.codebook, &VerifyOptions::new(self.eps_fp, mode))?;
        if !report.complete {
            return Err(Error::Oracle(report.error.unwrap_or_default()));
        }
        Ok(TrialRecord::from_report(trial, template.label(), colluders, &report, m))
    }

    fn trials(&self, template: &AttackTemplate, n_trials: usize, mode: VerifyMode, seed: u64) -> Result<TrialSummary> {
        self.check()?;
        template.validate(self.models.len())?;
        let out: Vec<Result<TrialRecord>> = (0..n_trials)
            .into_par_iter()
            .map(|i| self.run_trial(i, template, mode, seed))
            .collect();
        Ok(TrialSummary::from_trials(out.into_iter().collect::<Result<Vec<_>>>()?))
    }

    /// Random collusions attacked per `template`, verified on the full
    /// trigger set. A trial accusing only innocents is both a false negative
    /// and a false positive.
    pub fn fnr_trials(&self, template: &AttackTemplate, n_trials: usize, seed: u64) -> Result<TrialSummary> {
        self.trials(template, n_trials, VerifyMode::FullSet, seed)
    }

    /// Wrong data-owner protocol: stop at the first accusation and count a
    /// false positive when the top-ranked accused owner is not a colluder.
    pub fn wrong_owner_trials(&self, template: &AttackTemplate, n_trials: usize, seed: u64) -> Result<TrialSummary> {
        let mut s = self.trials(template, n_trials, VerifyMode::StopAtFirst, seed)?;
        let fp = s
            .trials
            .iter()
            .filter(|t| t.accused.first().is_some_and(|a| !t.colluders.contains(a)))
            .count();
        s.fpr = (!s.trials.is_empty()).then(|| fp as f64 / s.trials.len() as f64);
        Ok(s)
    }
}

/// Wrong-model protocol: fraction of models, none derived from any owner's
/// copy, that produce any accusation.
pub fn wrong_model_fpr(clean: &[ModelCopy], triggers: &[f64], codebook: &Codebook, eps_fp: f64) -> Result<(Option<f64>, Vec<AccusationReport>)> {
    let reports: Vec<Result<AccusationReport>> = clean
        .par_iter()
        .map(|m| {
            let mut m = m.clone();
            let d = m.arch.input_dim;
            verify(&mut m, triggers, d, codebook, &VerifyOptions::new(eps_fp, VerifyMode::StopAtFirst))
        })
        .collect();
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let rate = (!reports.is_empty()).then(|| reports.iter().filter(|r| r.accused_any()).count() as f64 / reports.len() as f64);
    Ok((rate, reports))
}

/// Independently initialized, unwatermarked models trained centrally on
/// `pooled`.
pub fn train_clean_models(
    n: usize,
    arch: &ArchDescriptor,
    pooled: &Dataset,
    cfg: &LocalTrainConfig,
    seed: u64,
) -> Result<Vec<ModelCopy>> {
    let out: Vec<Result<ModelCopy>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, &[tag::CLEAN_MODELS, i as u64]);
            let init = ModelCopy::init(arch, s)?;
            let m = local_train(&init, pooled, cfg, &mut stream(s, &[tag::LOCAL_TRAIN]))?;
            Ok(m.with_tag(ModelTag::Global, 0))
        })
        .collect();
    out.into_iter().collect()
}
