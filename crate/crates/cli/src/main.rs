//! `blackcatt`: train watermarked federations, attack the resulting copies
//! and trace leaks back to their owners.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::{value::StrDeserializer, DeserializeOwned, IntoDeserializer};
use serde::Deserialize;

use blackcatt_core::attack::{AttackTemplate, CollusionSpec, MergeOp, PruneScope};
use blackcatt_core::config::ExperimentConfig;
use blackcatt_core::experiment::{
    cmd_accuse, cmd_attack, cmd_codebook, cmd_sweep, cmd_train, fnr_experiment, fpr_experiment, mismatch_experiment,
    to_json, write_json, AccuseFlags, FprKind, SweepAxis,
};
use blackcatt_core::harness::{write_trials_csv, TrialSummary};
use blackcatt_core::verify::{AccusationReport, VerifyMode};
use blackcatt_core::watermark::Scheme;
use blackcatt_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "blackcatt", version, about = "Collusion-aware traitor tracing for federated learning")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the federation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (or sweep root).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides the embedding scheme.
    #[arg(long, global = true, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a federation and write its run directory.
    Train,
    /// Build an attacked model from a run's copies.
    Attack(AttackArgs),
    /// Trace a suspect model back to owners.
    Accuse(AccuseArgs),
    /// Estimate the false-negative rate of the configured attacks.
    Fnr(TrialArgs),
    /// False-negative rate when leaked copies and trigger version differ.
    Mismatch(MismatchArgs),
    /// Estimate false-positive rates.
    Fpr(FprArgs),
    /// Run an experiment grid along one axis.
    Sweep(SweepArgs),
    /// Print the secret codebook.
    Codebook(CodebookArgs),
}

#[derive(Args, Debug)]
struct AttackFlags {
    /// Collusion size, used when no explicit colluder list is given.
    #[arg(short = 'c', long, default_value_t = 2)]
    colluders: usize,
    #[arg(long, value_parser = parse_kebab::<MergeOp>, default_value = "average")]
    merge: MergeOp,
    #[arg(long, default_value_t = 0.0)]
    prune: f64,
    #[arg(long, value_parser = parse_kebab::<PruneScope>, default_value = "global")]
    prune_scope: PruneScope,
    #[arg(long, default_value_t = 0)]
    finetune_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    finetune_lr: f64,
}

impl AttackFlags {
    fn template(&self) -> AttackTemplate {
        AttackTemplate {
            colluders: self.colluders,
            merge: self.merge,
            prune_ratio: self.prune,
            prune_scope: self.prune_scope,
            finetune_epochs: self.finetune_epochs,
            finetune_lr: self.finetune_lr,
            ..AttackTemplate::default()
        }
    }
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Colluding owners, e.g. `0,3`.
    #[arg(long = "owners", value_delimiter = ',', required = true)]
    owners: Vec<usize>,
    #[command(flatten)]
    flags: AttackFlags,
    /// Snapshot round to attack; the final round by default.
    #[arg(long)]
    round: Option<u32>,
    #[arg(long, default_value_t = 0)]
    attack_seed: u64,
    /// Output snapshot; a JSON manifest is written next to it.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct AccuseArgs {
    #[arg(long)]
    suspect: PathBuf,
    #[arg(long)]
    eps_fp: Option<f64>,
    #[arg(long, value_parser = parse_kebab::<VerifyMode>, default_value = "full-set")]
    mode: VerifyMode,
    #[arg(long)]
    trigger_version: Option<u32>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// JSON report path; `<suspect>.report.json` by default.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrialArgs {
    /// Collusions per attack; the configured count by default.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    eps_fp: Option<f64>,
}

#[derive(Args, Debug)]
struct MismatchArgs {
    #[arg(long)]
    leak_round: u32,
    #[arg(long)]
    trigger_version: u32,
    #[command(flatten)]
    trials: TrialArgs,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum FprChoice {
    WrongOwner,
    WrongModel,
}

#[derive(Args, Debug)]
struct FprArgs {
    #[arg(long, value_parser = parse_kebab::<FprChoice>)]
    kind: FprChoice,
    /// Trials (wrong owner) or clean models (wrong model).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    eps_fp: Option<f64>,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// One of N, T, K, c, prune_ratio.
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
}

#[derive(Args, Debug)]
struct CodebookArgs {
    /// Required: the codebook is the system secret.
    #[arg(long)]
    reveal: bool,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    s.parse::<Scheme>().map_err(|e| e.to_string())
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    let de: StrDeserializer<'_, serde::de::value::Error> = s.into_deserializer();
    T::deserialize(de).map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.federation.seed = s;
    }
    if let Some(s) = cli.scheme {
        cfg.watermark.scheme = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.paths.out.clone()))
        .ok_or_else(|| Error::Config("no run directory: pass --out or set paths.out".into()))
}

/// Run directory of an existing run: `--out`, else `paths.out` of `--config`.
fn existing_run(cli: &Cli) -> Result<PathBuf> {
    match &cli.out {
        Some(p) => Ok(p.clone()),
        None => out_dir(cli, Some(&load_config(cli)?)),
    }
}

fn print_report(report: &AccusationReport) {
    println!(
        "queries {}  t* {}  threshold {}",
        report.queries,
        report.t_star,
        report.threshold.map(|z| format!("{z:.3}")).unwrap_or_else(|| "-".into())
    );
    println!("{:>4}  {:>5}  {:>10}  accused", "rank", "owner", "score");
    for (rank, j) in report.ranking().into_iter().enumerate() {
        let mark = if report.accused.contains(&j) { "yes" } else { "" };
        println!("{:>4}  {:>5}  {:>10.3}  {mark}", rank + 1, j, report.final_scores[j]);
    }
    if !report.complete {
        println!("incomplete: {}", report.error.as_deref().unwrap_or("unknown oracle failure"));
    }
    if report.accused.is_empty() {
        println!("no accusation");
    }
}

fn write_summary(dir: &Path, name: &str, summary: &TrialSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(fs::File::create(dir.join(format!("{name}.csv")))?);
    write_trials_csv(&mut f, &summary.trials)?;
    f.flush()?;
    write_json(&dir.join(format!("{name}.json")), summary)?;
    println!(
        "{name}: fnr {}  fpr {}  mean t* {}  mean mav {}",
        TrialSummary::describe(summary.fnr),
        TrialSummary::describe(summary.fpr),
        TrialSummary::describe(summary.mean_t_star),
        TrialSummary::describe(summary.mean_mav)
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let out = out_dir(cli, Some(&cfg))?;
            let t = cmd_train(&cfg, &out)?;
            println!(
                "trained {} rounds ({}), final test accuracy {}; run directory {}",
                t.manifest.rounds_completed,
                t.manifest.scheme,
                TrialSummary::describe(t.manifest.final_test_acc),
                out.display()
            );
        }
        Command::Attack(a) => {
            let run_dir = existing_run(cli)?;
            let mut template = a.flags.template();
            template.colluders = a.owners.len();
            let spec = CollusionSpec {
                colluders: a.owners.clone(),
                template,
                seed: a.attack_seed,
            };
            if let Some(parent) = a.output.parent() {
                fs::create_dir_all(parent)?;
            }
            let (_, manifest) = cmd_attack(&run_dir, &spec, a.round, &a.output)?;
            println!(
                "{} of owners {:?} at round {}: test accuracy {:.4}; wrote {}",
                spec.template.label(),
                spec.colluders,
                manifest.round,
                manifest.test_acc,
                a.output.display()
            );
        }
        Command::Accuse(a) => {
            let run_dir = existing_run(cli)?;
            let flags = AccuseFlags {
                eps_fp: a.eps_fp,
                mode: a.mode,
                trigger_version: a.trigger_version,
                shuffle_seed: a.shuffle_seed,
            };
            let report = cmd_accuse(&run_dir, &a.suspect, &flags)?;
            let path = a
                .report
                .clone()
                .unwrap_or_else(|| a.suspect.with_extension("report.json"));
            write_json(&path, &report)?;
            print_report(&report);
        }
        Command::Fnr(t) => {
            let cfg = load_config(cli)?;
            let run_dir = out_dir(cli, Some(&cfg))?;
            let n = t.trials.unwrap_or(cfg.experiment.fnr_trials);
            let eps = t.eps_fp.unwrap_or(cfg.watermark.eps_fp);
            for tpl in &cfg.attack {
                let s = fnr_experiment(&run_dir, tpl, n, eps, cfg.experiment.trial_seed)?;
                write_summary(&run_dir.join("fnr"), &format!("{}_c{}", tpl.label(), tpl.colluders), &s)?;
            }
        }
        Command::Mismatch(m) => {
            let cfg = load_config(cli)?;
            let run_dir = out_dir(cli, Some(&cfg))?;
            let n = m.trials.trials.unwrap_or(cfg.experiment.fnr_trials);
            let eps = m.trials.eps_fp.unwrap_or(cfg.watermark.eps_fp);
            for tpl in &cfg.attack {
                let s = mismatch_experiment(&run_dir, m.leak_round, m.trigger_version, tpl, n, eps, cfg.experiment.trial_seed)?;
                let name = format!("{}_c{}_r{}_v{}", tpl.label(), tpl.colluders, m.leak_round, m.trigger_version);
                write_summary(&run_dir.join("mismatch"), &name, &s)?;
            }
        }
        Command::Fpr(f) => {
            let cfg = load_config(cli)?;
            let run_dir = out_dir(cli, Some(&cfg))?;
            let eps = f.eps_fp.unwrap_or(cfg.watermark.eps_fp);
            let (kind, n, name) = match f.kind {
                FprChoice::WrongOwner => (
                    FprKind::WrongOwner {
                        template: f.attack.template(),
                    },
                    f.trials.unwrap_or(cfg.experiment.fnr_trials),
                    "fpr_wrong_owner",
                ),
                FprChoice::WrongModel => (
                    FprKind::WrongModel,
                    f.trials.unwrap_or(cfg.experiment.clean_models),
                    "fpr_wrong_model",
                ),
            };
            let r = fpr_experiment(&run_dir, &kind, n, eps, cfg.experiment.trial_seed)?;
            write_json(&run_dir.join(format!("{name}.json")), &r)?;
            println!("{name}: {} over {} trials at eps_fp {}", TrialSummary::describe(r.fpr), r.trials, r.eps_fp);
        }
        Command::Sweep(s) => {
            let cfg = load_config(cli)?;
            let out = out_dir(cli, Some(&cfg))?;
            let rows = cmd_sweep(&cfg, s.axis, &s.values, &out, cli.jobs)?;
            println!("{}", blackcatt_core::experiment::SWEEP_HEADER);
            for r in rows {
                println!("{}", r.csv_row());
            }
        }
        Command::Codebook(c) => {
            if !c.reveal {
                return Err(Error::Config("the codebook is secret; pass --reveal to print it".into()));
            }
            let dump = cmd_codebook(&existing_run(cli)?)?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{}", to_json(&dump)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
