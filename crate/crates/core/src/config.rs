//! Experiment configuration: one TOML file with a section per component.
//! Every key has a default, so a minimal file only names what differs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackTemplate;
use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::fl::{FederationConfig, MetricsConfig, WatermarkConfig};
use crate::model::ArchDescriptor;
use crate::tardos::CutoffSampler;
use crate::watermark::{EmbedConfig, MinMode, Scheme, StepDirection, TriggerOptConfig};

/// Watermark section, flattened for readability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WatermarkSection {
    pub scheme: Scheme,
    /// Trigger count `T`.
    pub triggers: usize,
    pub lr_wm: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_ca: f64,
    /// Virtual-collusion partners `M` per owner and round.
    pub partners: usize,
    pub lambda_fr: f64,
    pub aux_batch: usize,
    pub min_mode: MinMode,
    /// L-infinity budget around the initial triggers, on the `[0, 255]` scale.
    pub alpha: f64,
    /// Sign-gradient step size.
    pub step: f64,
    /// Trigger optimization steps `K` per round.
    pub iterations: usize,
    pub direction: StepDirection,
    pub kappa: f64,
    /// Bias cutoff; defaults to `0.1 / q`.
    pub tau: Option<f64>,
    pub cutoff: CutoffSampler,
    pub eps_fp: f64,
}

impl Default for WatermarkSection {
    fn default() -> Self {
        let e = EmbedConfig::default();
        let t = TriggerOptConfig::default();
        Self {
            scheme: Scheme::BlackcattFr,
            triggers: 100,
            lr_wm: e.lr_wm,
            momentum: e.momentum,
            weight_decay: e.weight_decay,
            lambda_ca: e.lambda_ca,
            partners: e.partners,
            lambda_fr: e.lambda_fr,
            aux_batch: e.aux_batch,
            min_mode: e.min_mode,
            alpha: 64.0,
            step: t.step,
            iterations: t.iterations,
            direction: t.direction,
            kappa: 0.5,
            tau: None,
            cutoff: CutoffSampler::Rejection,
            eps_fp: 1e-6,
        }
    }
}

impl WatermarkSection {
    pub fn resolve(&self, num_classes: usize) -> WatermarkConfig {
        WatermarkConfig {
            scheme: self.scheme,
            n_triggers: self.triggers,
            alpha: self.alpha,
            embed: EmbedConfig {
                lr_wm: self.lr_wm,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                lambda_ca: self.lambda_ca,
                partners: self.partners,
                lambda_fr: self.lambda_fr,
                aux_batch: self.aux_batch,
                min_mode: self.min_mode,
            },
            trigger_opt: TriggerOptConfig {
                step: self.step,
                iterations: self.iterations,
                direction: self.direction,
            },
            kappa: self.kappa,
            tau: self.tau.unwrap_or(0.1 / num_classes as f64),
            cutoff: self.cutoff,
            eps_fp: self.eps_fp,
        }
    }
}

/// Settings of the evaluation harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Save all copies every this many rounds; the final round is always saved.
    pub snapshot_every: u32,
    /// Random collusions per false-negative estimate.
    pub fnr_trials: usize,
    pub trial_seed: u64,
    /// Unwatermarked models in the wrong-model pool.
    pub clean_models: usize,
    /// Epochs of centralized training for each clean model.
    pub clean_epochs: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            snapshot_every: 25,
            fnr_trials: 20,
            trial_seed: 0,
            clean_models: 50,
            clean_epochs: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Run directory; the command line may override it.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub federation: FederationConfig,
    pub model: ArchDescriptor,
    pub watermark: WatermarkSection,
    pub data: TaskConfig,
    pub metrics: MetricsConfig,
    pub experiment: ExperimentSection,
    pub paths: PathsSection,
    /// Attacks evaluated by sweeps and by default false-negative runs.
    pub attack: Vec<AttackTemplate>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            federation: FederationConfig::default(),
            model: ArchDescriptor::default(),
            watermark: WatermarkSection::default(),
            data: TaskConfig::default(),
            metrics: MetricsConfig::default(),
            experiment: ExperimentSection::default(),
            paths: PathsSection::default(),
            attack: vec![AttackTemplate::default()],
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates. Errors carry the TOML line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        let wm = self.watermark();
        if wm.n_triggers == 0 {
            return Err(Error::Config("watermark.triggers must be >= 1".into()));
        }
        let q = self.model.num_classes as f64;
        if !(wm.tau > 0.0 && wm.tau < 1.0 / q) {
            return Err(Error::Config(format!("watermark.tau must lie in (0, 1/q), got {}", wm.tau)));
        }
        if !(wm.eps_fp > 0.0 && wm.eps_fp <= 1.0) {
            return Err(Error::Config(format!("watermark.eps_fp must lie in (0, 1], got {}", wm.eps_fp)));
        }
        if !(wm.kappa > 0.0) || !(wm.alpha >= 0.0) || !(wm.trigger_opt.step >= 0.0) {
            return Err(Error::Config("watermark.kappa must be > 0, alpha and step >= 0".into()));
        }
        if wm.scheme.uses_ca() {
            wm.embed
                .validate(self.federation.n_owners)
                .map_err(|e| Error::Config(format!("watermark: {e}")))?;
        }
        for (i, a) in self.attack.iter().enumerate() {
            a.validate(self.federation.n_owners)
                .map_err(|e| Error::Config(format!("attack[{i}]: {e}")))?;
        }
        Ok(())
    }

    pub fn watermark(&self) -> WatermarkConfig {
        self.watermark.resolve(self.model.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("[federation]\nn_owners = 10\nparticipants = 5\n").unwrap();
        assert_eq!(cfg.federation.n_owners, 10);
        assert_eq!(cfg.federation.lr_mt, 0.01);
        assert_eq!(cfg.watermark.lambda_ca, 0.1);
        assert_eq!(cfg.watermark().tau, 0.01);
        assert_eq!(cfg.watermark.scheme, Scheme::BlackcattFr);
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let err = ExperimentConfig::from_toml("[watermark]\nlambda_xx = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lambda_xx"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
        assert_eq!(err.exit_code(), crate::error::exit::CONFIG);
    }

    #[test]
    fn invalid_participants_rejected() {
        assert!(ExperimentConfig::from_toml("[federation]\nn_owners = 3\nparticipants = 4\n").is_err());
    }

    #[test]
    fn scheme_and_attacks_parse() {
        let text = r#"
[watermark]
scheme = "no-ca"
min_mode = "per-dataset"

[[attack]]
colluders = 3
merge = "layer-sample"
prune_ratio = 0.2
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.watermark.scheme, Scheme::NoCa);
        assert_eq!(cfg.attack.len(), 1);
        assert_eq!(cfg.attack[0].colluders, 3);
    }

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            n in 2usize..40,
            lr in 1e-5f64..1.0,
            lambda in 0.0f64..2.0,
            t in 1usize..300,
            seed in 0u64..=i64::MAX as u64,
            scheme in 0usize..6,
            tau in prop::option::of(1e-4f64..0.09),
            ratio in 0.0f64..1.0,
        ) {
            let mut cfg = ExperimentConfig::default();
            cfg.federation.n_owners = n;
            cfg.federation.participants = 1 + n / 2;
            cfg.federation.seed = seed;
            cfg.watermark.lr_wm = lr;
            cfg.watermark.lambda_ca = lambda;
            cfg.watermark.partners = 1;
            cfg.watermark.triggers = t;
            cfg.watermark.scheme = Scheme::ALL[scheme];
            cfg.watermark.tau = tau;
            cfg.attack[0].prune_ratio = ratio;
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_toml().unwrap(), text);
        }
    }
}
