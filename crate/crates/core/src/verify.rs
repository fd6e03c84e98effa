//! Black-box verification of a suspicious model.
//!
//! The verifier only sees the model through [`LabelOracle`]: it submits
//! trigger inputs one at a time, scores every owner against the returned
//! label and accuses owners whose accumulated score crosses the dynamic
//! threshold.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::tardos::{accuse_update, Codebook, SuspicionState};

/// Label-only access to a suspicious model.
pub trait LabelOracle {
    fn query(&mut self, input: &[f64]) -> Result<usize>;
}

impl<F> LabelOracle for F
where
    F: FnMut(&[f64]) -> Result<usize>,
{
    fn query(&mut self, input: &[f64]) -> Result<usize> {
        self(input)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyMode {
    /// Halt at the first query that yields a non-empty accused set.
    StopAtFirst,
    /// Consume every trigger and accuse against the final threshold.
    #[default]
    FullSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub eps_fp: f64,
    pub mode: VerifyMode,
    /// Query in a seeded random order instead of trigger-index order.
    pub shuffle_seed: Option<u64>,
}

impl VerifyOptions {
    pub fn new(eps_fp: f64, mode: VerifyMode) -> Self {
        Self {
            eps_fp,
            mode,
            shuffle_seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Accused,
    NoAccusation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccusationReport {
    pub mode: VerifyMode,
    pub eps_fp: f64,
    /// Accused owners, highest score first.
    pub accused: Vec<usize>,
    /// Queries consumed when the first accusation happened, or the number
    /// of triggers when none did.
    pub t_star: usize,
    pub outcome: Outcome,
    pub queries: usize,
    pub final_scores: Vec<f64>,
    /// Threshold after the last query; absent before any query.
    pub threshold: Option<f64>,
    pub threshold_trace: Vec<f64>,
    /// Trigger indices in query order, paired with the observed labels.
    pub query_order: Vec<usize>,
    pub observed: Vec<usize>,
    /// False when the oracle failed part-way.
    pub complete: bool,
    pub error: Option<String>,
}

impl AccusationReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("accusation report", e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("accusation report", e.to_string()))
    }

    pub fn accused_any(&self) -> bool {
        self.outcome == Outcome::Accused
    }

    /// Owners ranked by final score, highest first (ties by index).
    pub fn ranking(&self) -> Vec<usize> {
        let mut r: Vec<usize> = (0..self.final_scores.len()).collect();
        r.sort_by(|&a, &b| self.final_scores[b].total_cmp(&self.final_scores[a]).then(a.cmp(&b)));
        r
    }
}

/// Runs the iterative accusation process.
///
/// `triggers` is `[T, input_dim]` row-major and must match the codebook's
/// trigger count. Oracle failures end the session early with
/// `complete = false`; only invalid arguments return `Err`.
pub fn verify<O: LabelOracle + ?Sized>(
    oracle: &mut O,
    triggers: &[f64],
    input_dim: usize,
    codebook: &Codebook,
    opts: &VerifyOptions,
) -> Result<AccusationReport> {
    if input_dim == 0 || triggers.len() != codebook.n_triggers * input_dim {
        return Err(Error::Length {
            op: "verify",
            left: codebook.n_triggers * input_dim,
            right: triggers.len(),
        });
    }
    let t_total = codebook.n_triggers;
    let mut state = SuspicionState::new(codebook.n_owners, opts.eps_fp, codebook.tau)?;
    let mut order: Vec<usize> = (0..t_total).collect();
    if let Some(seed) = opts.shuffle_seed {
        order.shuffle(&mut stream(seed, &[tag::EXPERIMENT, 7]));
    }
    let mut report = AccusationReport {
        mode: opts.mode,
        eps_fp: opts.eps_fp,
        accused: Vec::new(),
        t_star: t_total,
        outcome: Outcome::NoAccusation,
        queries: 0,
        final_scores: state.scores.clone(),
        threshold: None,
        threshold_trace: Vec::with_capacity(t_total),
        query_order: Vec::with_capacity(t_total),
        observed: Vec::with_capacity(t_total),
        complete: true,
        error: None,
    };
    let mut first_accusation: Option<usize> = None;
    let mut accused = Vec::new();
    for &i in &order {
        let label = match oracle.query(&triggers[i * input_dim..(i + 1) * input_dim]) {
            Ok(l) if l < codebook.q => l,
            Ok(l) => {
                report.complete = false;
                report.error = Some(format!("oracle returned label {l} outside [0, {})", codebook.q));
                break;
            }
            Err(e) => {
                report.complete = false;
                report.error = Some(e.to_string());
                break;
            }
        };
        accused = accuse_update(&mut state, &codebook.trigger_column(i), label, codebook.bias(i))?;
        report.query_order.push(i);
        report.observed.push(label);
        report.threshold_trace.push(state.threshold);
        if !accused.is_empty() && first_accusation.is_none() {
            first_accusation = Some(state.queries);
            if opts.mode == VerifyMode::StopAtFirst {
                break;
            }
        }
    }
    report.queries = state.queries;
    report.final_scores = state.scores.clone();
    report.threshold = (state.queries > 0).then_some(state.threshold);
    report.t_star = first_accusation.unwrap_or(if report.complete { t_total } else { state.queries });
    report.accused = accused;
    report.outcome = if report.accused.is_empty() {
        Outcome::NoAccusation
    } else {
        Outcome::Accused
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tardos::score;

    fn codebook() -> Codebook {
        Codebook::generate(8, 60, 10, 0.5, 0.01, 3).unwrap()
    }

    fn inputs(t: usize) -> Vec<f64> {
        (0..t).map(|i| i as f64).collect()
    }

    #[test]
    fn own_copy_is_accused() {
        let cb = codebook();
        let mut oracle = |x: &[f64]| Ok(cb.label(5, x[0] as usize));
        let r = verify(&mut oracle, &inputs(60), 1, &cb, &VerifyOptions::new(1e-6, VerifyMode::StopAtFirst)).unwrap();
        assert_eq!(r.accused, vec![5]);
        assert!(r.t_star < 60);
        assert_eq!(r.queries, r.t_star);
    }

    #[test]
    fn stop_at_first_is_minimal() {
        let cb = codebook();
        let mut oracle = |x: &[f64]| Ok(cb.label(2, x[0] as usize));
        let r = verify(&mut oracle, &inputs(60), 1, &cb, &VerifyOptions::new(1e-3, VerifyMode::StopAtFirst)).unwrap();
        let full = verify(&mut oracle, &inputs(60), 1, &cb, &VerifyOptions::new(1e-3, VerifyMode::FullSet)).unwrap();
        assert_eq!(full.t_star, r.t_star);
        let mut scores = vec![0.0; 8];
        for t in 1..r.t_star {
            let (i, y) = (full.query_order[t - 1], full.observed[t - 1]);
            for (j, s) in scores.iter_mut().enumerate() {
                *s += score(cb.label(j, i), y, cb.bias(i).prob(y)).unwrap();
            }
            let z = crate::tardos::threshold(t, 1e-3, cb.tau).unwrap();
            assert!(scores.iter().all(|s| *s <= z), "accusation before t*={}", r.t_star);
        }
    }

    #[test]
    fn full_set_scores_equal_sum_of_scores() {
        let cb = codebook();
        let mut oracle = |x: &[f64]| Ok((x[0] as usize * 7) % 10);
        let r = verify(&mut oracle, &inputs(60), 1, &cb, &VerifyOptions::new(1e-6, VerifyMode::FullSet)).unwrap();
        assert_eq!(r.queries, 60);
        for j in 0..8 {
            let mut s = 0.0;
            for i in 0..60 {
                let y = r.observed[i];
                s += score(cb.label(j, i), y, cb.bias(i).prob(y)).unwrap();
            }
            assert!((s - r.final_scores[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_failure_gives_partial_report() {
        let cb = codebook();
        let mut calls = 0;
        let mut oracle = |_: &[f64]| {
            calls += 1;
            if calls > 10 {
                Err(Error::Oracle("connection lost".into()))
            } else {
                Ok(0)
            }
        };
        let r = verify(&mut oracle, &inputs(60), 1, &cb, &VerifyOptions::new(1e-6, VerifyMode::FullSet)).unwrap();
        assert!(!r.complete);
        assert_eq!(r.queries, 10);
        assert!(r.error.unwrap().contains("connection lost"));
    }

    #[test]
    fn zero_triggers_degenerate() {
        let cb = Codebook::generate(3, 0, 10, 0.5, 0.01, 1).unwrap();
        let mut oracle = |_: &[f64]| Ok(0);
        let r = verify(&mut oracle, &[], 4, &cb, &VerifyOptions::new(1e-6, VerifyMode::FullSet)).unwrap();
        assert_eq!(r.t_star, 0);
        assert_eq!(r.outcome, Outcome::NoAccusation);
        assert_eq!(r.threshold, None);
    }

    #[test]
    fn eps_one_always_accuses() {
        let cb = codebook();
        let mut oracle = |_: &[f64]| Ok(3);
        let r = verify(&mut oracle, &inputs(60), 1, &cb, &VerifyOptions::new(1.0, VerifyMode::StopAtFirst)).unwrap();
        assert_eq!(r.outcome, Outcome::Accused);
        assert_eq!(r.t_star, 1);
    }

    #[test]
    fn json_round_trip() {
        let cb = codebook();
        let mut oracle = |x: &[f64]| Ok(cb.label(1, x[0] as usize));
        let r = verify(&mut oracle, &inputs(60), 1, &cb, &VerifyOptions::new(1e-6, VerifyMode::FullSet)).unwrap();
        let back = AccusationReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn shuffled_order_is_a_permutation() {
        let cb = codebook();
        let mut oracle = |_: &[f64]| Ok(1);
        let mut opts = VerifyOptions::new(1e-6, VerifyMode::FullSet);
        opts.shuffle_seed = Some(4);
        let r = verify(&mut oracle, &inputs(60), 1, &cb, &opts).unwrap();
        let mut o = r.query_order.clone();
        assert_ne!(o, (0..60).collect::<Vec<_>>());
        o.sort_unstable();
        assert_eq!(o, (0..60).collect::<Vec<_>>());
    }
}
