//! Run directories and the experiment commands built on them.
//!
//! A run directory holds everything needed to re-evaluate a training run:
//!
//! ```text
//! run/
//!   config.toml        resolved configuration
//!   run.json           manifest: completed rounds, saved snapshot rounds
//!   metrics.csv        one row per round
//!   <round>/owner_<j>.bcat
//!   secret/codebook.bin
//!   secret/triggers_<version>.bin
//! ```
//!
//! Training data is not stored; it is regenerated from the configuration.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_attack, AttackTemplate, CollusionSpec};
use crate::config::ExperimentConfig;
use crate::data::{partition_data, Dataset, SyntheticTask};
use crate::error::{Error, Result};
use crate::fl::{
    codebook_path, owner_snapshot_path, trigger_path, write_metrics_csv, Federation, LocalTrainConfig, RoundMetrics,
};
use crate::harness::{train_clean_models, wrong_model_fpr, TrialContext, TrialSummary};
use crate::model::ModelCopy;
use crate::tardos::Codebook;
use crate::verify::{verify, AccusationReport, VerifyMode, VerifyOptions};
use crate::watermark::{Scheme, TriggerSet};

pub const MANIFEST_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub scheme: Scheme,
    pub arch: String,
    pub n_owners: usize,
    pub n_triggers: usize,
    pub rounds_completed: u32,
    /// Rounds whose copies were saved, ascending. Trigger version `r` is
    /// saved alongside round `r`.
    pub snapshot_rounds: Vec<u32>,
    pub final_test_acc: Option<f64>,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)? + "\n")?;
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })
}

/// Result of [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub metrics: Vec<RoundMetrics>,
    pub manifest: RunManifest,
    pub federation: Federation,
}

/// Trains a federation and writes its run directory.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let mut fed = Federation::new(
        cfg.federation.clone(),
        cfg.watermark(),
        cfg.metrics.clone(),
        cfg.model.clone(),
        &cfg.data,
    )?;
    fed.save_codebook(out)?;
    let total = cfg.federation.rounds;
    let every = cfg.experiment.snapshot_every;
    let mut snapshot_rounds = Vec::new();
    let metrics = fed.run(|f, _| {
        if f.round == total || (every > 0 && f.round % every == 0) {
            f.save_snapshot(out)?;
            snapshot_rounds.push(f.round);
        }
        Ok(())
    })?;
    if total == 0 {
        fed.save_snapshot(out)?;
        snapshot_rounds.push(0);
    }
    let mut file = BufWriter::new(fs::File::create(out.join(METRICS_FILE))?);
    write_metrics_csv(&mut file, &metrics)?;
    file.flush()?;
    let manifest = RunManifest {
        format: 1,
        scheme: cfg.watermark.scheme,
        arch: cfg.model.to_string(),
        n_owners: cfg.federation.n_owners,
        n_triggers: cfg.watermark.triggers,
        rounds_completed: fed.round,
        snapshot_rounds,
        final_test_acc: metrics.last().and_then(|m| m.test_acc),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(TrainOutcome {
        run_dir: out.to_path_buf(),
        metrics,
        manifest,
        federation: fed,
    })
}

/// Read access to a finished run directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub manifest: RunManifest,
}

impl Run {
    pub fn open(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let manifest: RunManifest = serde_json::from_str(&read_to_string(&dir.join(MANIFEST_FILE))?)
            .map_err(|e| Error::format("run manifest", e.to_string()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            manifest,
        })
    }

    pub fn final_round(&self) -> u32 {
        self.manifest.rounds_completed
    }

    fn check_round(&self, round: u32) -> Result<()> {
        if !self.manifest.snapshot_rounds.contains(&round) {
            return Err(Error::MissingArtifact(self.dir.join(round.to_string())));
        }
        Ok(())
    }

    pub fn owner_model(&self, round: u32, owner: usize) -> Result<ModelCopy> {
        self.check_round(round)?;
        ModelCopy::load(&owner_snapshot_path(&self.dir, round, owner))
    }

    pub fn models(&self, round: u32) -> Result<Vec<ModelCopy>> {
        (0..self.manifest.n_owners).map(|j| self.owner_model(round, j)).collect()
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let path = codebook_path(&self.dir);
        Codebook::load(&path).map_err(|e| match e {
            Error::MissingArtifact(p) => Error::MissingSecret(p),
            other => other,
        })
    }

    pub fn triggers(&self, version: u32) -> Result<TriggerSet> {
        let path = trigger_path(&self.dir, version);
        TriggerSet::load(&path).map_err(|e| match e {
            Error::MissingArtifact(p) => Error::MissingSecret(p),
            other => other,
        })
    }

    /// Regenerates the synthetic task of this run.
    pub fn task(&self) -> Result<SyntheticTask> {
        let c = &self.config;
        SyntheticTask::generate(
            &c.data,
            c.model.input_dim,
            c.model.num_classes,
            c.federation.n_owners,
            c.federation.seed,
        )
    }

    pub fn shards(&self) -> Result<Vec<Dataset>> {
        let task = self.task()?;
        partition_data(&task.train, self.config.federation.n_owners, self.config.federation.seed)
    }
}

/// Attack manifest written next to a merged snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub round: u32,
    pub spec: CollusionSpec,
    pub test_acc: f64,
}

/// Builds the attacked model from a run's round-`round` copies (final round
/// by default) and saves it at `out` with a JSON manifest beside it.
pub fn cmd_attack(run_dir: &Path, spec: &CollusionSpec, round: Option<u32>, out: &Path) -> Result<(ModelCopy, AttackManifest)> {
    let run = Run::open(run_dir)?;
    let round = round.unwrap_or(run.final_round());
    spec.validate(run.manifest.n_owners)?;
    let models = run.models(round)?;
    let shards = if spec.template.finetune_epochs > 0 {
        Some(run.shards()?)
    } else {
        None
    };
    let merged = apply_attack(&models, spec, shards.as_deref())?;
    let task = run.task()?;
    let manifest = AttackManifest {
        round,
        spec: spec.clone(),
        test_acc: merged.accuracy(&task.test.features, &task.test.labels)?,
    };
    merged.save(out)?;
    write_json(&out.with_extension("json"), &manifest)?;
    Ok((merged, manifest))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuseFlags {
    /// Overrides the run's configured false-positive rate.
    pub eps_fp: Option<f64>,
    pub mode: VerifyMode,
    /// Trigger version to query with; the latest by default.
    pub trigger_version: Option<u32>,
    pub shuffle_seed: Option<u64>,
}

impl Default for AccuseFlags {
    fn default() -> Self {
        Self {
            eps_fp: None,
            mode: VerifyMode::FullSet,
            trigger_version: None,
            shuffle_seed: None,
        }
    }
}

/// Verifies a suspect snapshot against the run's secrets. The suspect is
/// only ever queried for labels.
pub fn cmd_accuse(run_dir: &Path, suspect_path: &Path, flags: &AccuseFlags) -> Result<AccusationReport> {
    let run = Run::open(run_dir)?;
    let codebook = run.codebook()?;
    let triggers = run.triggers(flags.trigger_version.unwrap_or(run.final_round()))?;
    let mut suspect = ModelCopy::load(suspect_path)?;
    if suspect.arch.input_dim != triggers.input_dim {
        return Err(Error::ArchMismatch(suspect.arch.to_string(), run.manifest.arch.clone()));
    }
    let opts = VerifyOptions {
        eps_fp: flags.eps_fp.unwrap_or(run.config.watermark.eps_fp),
        mode: flags.mode,
        shuffle_seed: flags.shuffle_seed,
    };
    verify(&mut suspect, triggers.current(), triggers.input_dim, &codebook, &opts)
}

/// False-negative estimate on the run's final copies.
pub fn fnr_experiment(run_dir: &Path, template: &AttackTemplate, n_trials: usize, eps_fp: f64, seed: u64) -> Result<TrialSummary> {
    let run = Run::open(run_dir)?;
    let r = run.final_round();
    mismatch_experiment_on(&run, r, r, template, n_trials, eps_fp, seed)
}

/// False-negative estimate when the leak comes from `leak_round` and the
/// verifier queries trigger version `trigger_version`.
pub fn mismatch_experiment(
    run_dir: &Path,
    leak_round: u32,
    trigger_version: u32,
    template: &AttackTemplate,
    n_trials: usize,
    eps_fp: f64,
    seed: u64,
) -> Result<TrialSummary> {
    let run = Run::open(run_dir)?;
    mismatch_experiment_on(&run, leak_round, trigger_version, template, n_trials, eps_fp, seed)
}

fn mismatch_experiment_on(
    run: &Run,
    leak_round: u32,
    trigger_version: u32,
    template: &AttackTemplate,
    n_trials: usize,
    eps_fp: f64,
    seed: u64,
) -> Result<TrialSummary> {
    let models = run.models(leak_round)?;
    let codebook = run.codebook()?;
    let triggers = run.triggers(trigger_version)?;
    let shards = if template.finetune_epochs > 0 {
        Some(run.shards()?)
    } else {
        None
    };
    let ctx = TrialContext {
        models: &models,
        shards: shards.as_deref(),
        triggers: triggers.current(),
        codebook: &codebook,
        eps_fp,
    };
    ctx.fnr_trials(template, n_trials, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FprKind {
    /// A real leak, checking whether the top accused owner is innocent.
    WrongOwner { template: AttackTemplate },
    /// Independently trained models that never saw any watermark.
    WrongModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FprResult {
    pub kind: FprKind,
    pub eps_fp: f64,
    pub trials: usize,
    pub fpr: Option<f64>,
    /// Per-trial outcome: whether it counted as a false positive.
    pub false_positive: Vec<bool>,
}

/// False-positive estimate. For the wrong-model kind `n_trials` is the size
/// of the clean-model pool, trained on the pooled data of all owners.
pub fn fpr_experiment(run_dir: &Path, kind: &FprKind, n_trials: usize, eps_fp: f64, seed: u64) -> Result<FprResult> {
    let run = Run::open(run_dir)?;
    let codebook = run.codebook()?;
    let r = run.final_round();
    let triggers = run.triggers(r)?;
    match kind {
        FprKind::WrongOwner { template } => {
            let models = run.models(r)?;
            let shards = if template.finetune_epochs > 0 {
                Some(run.shards()?)
            } else {
                None
            };
            let ctx = TrialContext {
                models: &models,
                shards: shards.as_deref(),
                triggers: triggers.current(),
                codebook: &codebook,
                eps_fp,
            };
            let s = ctx.wrong_owner_trials(template, n_trials, seed)?;
            Ok(FprResult {
                kind: kind.clone(),
                eps_fp,
                trials: n_trials,
                fpr: s.fpr,
                false_positive: s
                    .trials
                    .iter()
                    .map(|t| t.accused.first().is_some_and(|a| !t.colluders.contains(a)))
                    .collect(),
            })
        }
        FprKind::WrongModel => {
            let task = run.task()?;
            let c = &run.config;
            let local = LocalTrainConfig {
                epochs: c.experiment.clean_epochs,
                ..c.federation.local()
            };
            let clean = train_clean_models(n_trials, &c.model, &task.train, &local, seed)?;
            let (fpr, reports) = wrong_model_fpr(&clean, triggers.current(), &codebook, eps_fp)?;
            Ok(FprResult {
                kind: kind.clone(),
                eps_fp,
                trials: n_trials,
                fpr,
                false_positive: reports.iter().map(|r| r.accused_any()).collect(),
            })
        }
    }
}

/// Plain-text view of the codebook. Revealing it lets anyone forge or
/// dodge accusations, so callers must ask for it explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookDump {
    pub n_owners: usize,
    pub n_triggers: usize,
    pub q: usize,
    pub kappa: f64,
    pub tau: f64,
    pub seed: u64,
    /// One probability vector per trigger.
    pub biases: Vec<Vec<f64>>,
    /// One label vector per owner.
    pub labels: Vec<Vec<usize>>,
}

pub fn cmd_codebook(run_dir: &Path) -> Result<CodebookDump> {
    let cb = Run::open(run_dir)?.codebook()?;
    Ok(CodebookDump {
        n_owners: cb.n_owners,
        n_triggers: cb.n_triggers,
        q: cb.q,
        kappa: cb.kappa,
        tau: cb.tau,
        seed: cb.seed,
        biases: (0..cb.n_triggers).map(|i| cb.bias(i).probs().to_vec()).collect(),
        labels: (0..cb.n_owners).map(|j| cb.owner_labels(j)).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "N")]
    Owners,
    #[serde(rename = "T")]
    Triggers,
    #[serde(rename = "K")]
    Iterations,
    #[serde(rename = "c")]
    Colluders,
    #[serde(rename = "prune_ratio")]
    PruneRatio,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "N" => SweepAxis::Owners,
            "T" => SweepAxis::Triggers,
            "K" => SweepAxis::Iterations,
            "c" => SweepAxis::Colluders,
            "prune_ratio" => SweepAxis::PruneRatio,
            _ => return Err(Error::Config(format!("unknown sweep axis {s:?}; expected N, T, K, c or prune_ratio"))),
        })
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Owners => "N",
            SweepAxis::Triggers => "T",
            SweepAxis::Iterations => "K",
            SweepAxis::Colluders => "c",
            SweepAxis::PruneRatio => "prune_ratio",
        }
    }

    /// Whether each value needs its own training run.
    fn retrains(self) -> bool {
        matches!(self, SweepAxis::Owners | SweepAxis::Triggers | SweepAxis::Iterations)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub attack: String,
    pub c: usize,
    pub fnr: Option<f64>,
    pub mean_t_star: Option<f64>,
    pub mean_mav: Option<f64>,
    pub test_acc: Option<f64>,
}

pub const SWEEP_HEADER: &str = "axis,value,attack,c,fnr,mean_t_star,mean_mav,test_acc";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.axis.name(),
            self.value,
            self.attack,
            self.c,
            opt(self.fnr),
            opt(self.mean_t_star),
            opt(self.mean_mav),
            opt(self.test_acc)
        )
    }
}

fn integer_value(axis: SweepAxis, v: f64, min: f64) -> Result<usize> {
    if v.fract() != 0.0 || v < min {
        return Err(Error::Config(format!("sweep axis {} needs integers >= {min}, got {v}", axis.name())));
    }
    Ok(v as usize)
}

fn cell_config(base: &ExperimentConfig, axis: SweepAxis, v: f64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Owners => {
            let n = integer_value(axis, v, 2.0)?;
            cfg.federation.participants = cfg.federation.participants.min(n);
            cfg.federation.n_owners = n;
            cfg.watermark.partners = cfg.watermark.partners.min(n - 1);
            for a in cfg.attack.iter_mut() {
                a.colluders = a.colluders.min(n);
            }
        }
        SweepAxis::Triggers => cfg.watermark.triggers = integer_value(axis, v, 1.0)?,
        SweepAxis::Iterations => cfg.watermark.iterations = integer_value(axis, v, 0.0)?,
        SweepAxis::Colluders => {
            let c = integer_value(axis, v, 1.0)?;
            for a in cfg.attack.iter_mut() {
                a.colluders = c;
            }
        }
        SweepAxis::PruneRatio => {
            for a in cfg.attack.iter_mut() {
                a.prune_ratio = v;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn evaluate_cell(cfg: &ExperimentConfig, run_dir: &Path, axis: SweepAxis, value: f64, test_acc: Option<f64>) -> Result<Vec<SweepRow>> {
    let eps = cfg.watermark.eps_fp;
    cfg.attack
        .iter()
        .map(|t| {
            let s = fnr_experiment(run_dir, t, cfg.experiment.fnr_trials, eps, cfg.experiment.trial_seed)?;
            Ok(SweepRow {
                axis,
                value,
                attack: t.label(),
                c: t.colluders,
                fnr: s.fnr,
                mean_t_star: s.mean_t_star,
                mean_mav: s.mean_mav,
                test_acc,
            })
        })
        .collect()
}

/// Runs the experiment grid along `axis` and writes `out/summary.csv`.
/// Training-dependent axes (N, T, K) train one run per value under
/// `out/cell_<i>`; attack axes (c, prune_ratio) share `out/base`.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], out: &Path, jobs: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let cells = values
        .iter()
        .map(|&v| cell_config(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let rows: Vec<Result<Vec<SweepRow>>> = if axis.retrains() {
        pool.install(|| {
            cells
                .par_iter()
                .zip(values.par_iter())
                .enumerate()
                .map(|(i, (c, &v))| {
                    let dir = out.join(format!("cell_{i}"));
                    let trained = cmd_train(c, &dir)?;
                    evaluate_cell(c, &dir, axis, v, trained.manifest.final_test_acc)
                })
                .collect()
        })
    } else {
        let dir = out.join("base");
        let trained = cmd_train(cfg, &dir)?;
        let acc = trained.manifest.final_test_acc;
        pool.install(|| {
            cells
                .par_iter()
                .zip(values.par_iter())
                .map(|(c, &v)| evaluate_cell(c, &dir, axis, v, acc))
                .collect()
        })
    };
    let rows: Vec<SweepRow> = rows.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    let mut file = BufWriter::new(fs::File::create(out.join("summary.csv"))?);
    writeln!(file, "{SWEEP_HEADER}")?;
    for r in &rows {
        writeln!(file, "{}", r.csv_row())?;
    }
    file.flush()?;
    Ok(rows)
}
