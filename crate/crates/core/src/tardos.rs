//! q-ary Tardos fingerprinting codes: biased codeword generation, per-query
//! suspicion scores, the dynamic accusation threshold, and the
//! marking-assumption violation rate.

use rand::Rng;
use rand_distr::{Beta as BetaDraw, Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Attempts per bias vector before giving up on the cutoff.
pub const MAX_REJECTION_ATTEMPTS: usize = 100_000;

/// Secret per-trigger class distribution with every component in
/// `[tau, 1 - (q - 1) tau]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasVector(Vec<f64>);

impl BiasVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let s: f64 = probs.iter().sum();
        if probs.len() < 2 || (s - 1.0).abs() > 1e-12 || probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "bias vector must be a distribution over >= 2 classes with entries in (0,1), got {probs:?}"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, label: usize) -> f64 {
        self.0[label]
    }

    pub fn q(&self) -> usize {
        self.0.len()
    }

    /// Inverse-CDF draw of a label.
    pub fn sample_label<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (l, p) in self.0.iter().enumerate() {
            acc += p;
            if u < acc {
                return l;
            }
        }
        self.0.len() - 1
    }
}

fn check_cutoff(q: usize, tau: f64) -> Result<()> {
    if q < 2 {
        return Err(Error::InvalidParameter(format!("q must be >= 2, got {q}")));
    }
    if !(tau > 0.0 && tau < 1.0 / q as f64) {
        return Err(Error::InvalidParameter(format!(
            "tau must lie in (0, 1/q) = (0, {}), got {tau}",
            1.0 / q as f64
        )));
    }
    Ok(())
}

/// Symmetric Dirichlet(kappa) draw conditioned on the cutoff. Whole vectors
/// are redrawn until every component lies in `[tau, 1 - (q-1) tau]`.
pub fn sample_bias<R: Rng + ?Sized>(q: usize, kappa: f64, tau: f64, rng: &mut R) -> Result<BiasVector> {
    check_cutoff(q, tau)?;
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa must be > 0, got {kappa}")));
    }
    let gamma = Gamma::new(kappa, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let upper = 1.0 - (q as f64 - 1.0) * tau;
    let mut draw = vec![0.0; q];
    for _ in 0..MAX_REJECTION_ATTEMPTS {
        for d in draw.iter_mut() {
            *d = gamma.sample(rng);
        }
        let s: f64 = draw.iter().sum();
        if !(s > 0.0) {
            continue;
        }
        draw.iter_mut().for_each(|d| *d /= s);
        if draw.iter().all(|&p| p >= tau && p <= upper) {
            return Ok(BiasVector(draw));
        }
    }
    Err(Error::RejectionBudget {
        attempts: MAX_REJECTION_ATTEMPTS,
        q,
        kappa,
        tau,
    })
}

/// How the cutoff on bias vectors is enforced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffSampler {
    /// Redraw the whole Dirichlet vector until every component is in bounds.
    #[default]
    Rejection,
    /// Pairwise Gibbs updates whose stationary law is the Dirichlet
    /// restricted to the cutoff region. For large `q`, where whole-vector
    /// rejection almost never succeeds.
    Gibbs,
}

/// Pair updates per component for [`sample_bias_gibbs`].
pub const GIBBS_UPDATES_PER_COMPONENT: usize = 50;

/// Draws `u ~ Beta(kappa, kappa)` restricted to `[lo, hi]`.
fn truncated_symmetric_beta<R: Rng + ?Sized>(
    lo: f64,
    hi: f64,
    draw: &BetaDraw<f64>,
    cdf: &Beta,
    rng: &mut R,
) -> f64 {
    let (f_lo, f_hi) = (cdf.cdf(lo), cdf.cdf(hi));
    if f_hi - f_lo > 0.2 {
        loop {
            let u = draw.sample(rng);
            if (lo..=hi).contains(&u) {
                return u;
            }
        }
    }
    let target = f_lo + rng.random::<f64>() * (f_hi - f_lo);
    cdf.inverse_cdf(target).clamp(lo, hi)
}

/// Dirichlet(kappa) restricted to the cutoff region, sampled by repeatedly
/// redistributing the mass of a random pair of components from its exact
/// conditional law. Starts from the uniform vector.
pub fn sample_bias_gibbs<R: Rng + ?Sized>(q: usize, kappa: f64, tau: f64, rng: &mut R) -> Result<BiasVector> {
    check_cutoff(q, tau)?;
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa must be > 0, got {kappa}")));
    }
    let draw = BetaDraw::new(kappa, kappa).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let cdf = Beta::new(kappa, kappa).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut p = vec![1.0 / q as f64; q];
    for _ in 0..GIBBS_UPDATES_PER_COMPONENT * q {
        let i = rng.random_range(0..q);
        let mut j = rng.random_range(0..q - 1);
        if j >= i {
            j += 1;
        }
        let s = p[i] + p[j];
        let lo = tau / s;
        let u = truncated_symmetric_beta(lo, 1.0 - lo, &draw, &cdf, rng);
        p[i] = (u * s).max(tau);
        p[j] = s - p[i];
    }
    // Absorb accumulated rounding so the sum is exact to 1e-12.
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    BiasVector::new(p)
}

/// Dispatches on the cutoff method.
pub fn sample_bias_with<R: Rng + ?Sized>(
    sampler: CutoffSampler,
    q: usize,
    kappa: f64,
    tau: f64,
    rng: &mut R,
) -> Result<BiasVector> {
    match sampler {
        CutoffSampler::Rejection => sample_bias(q, kappa, tau, rng),
        CutoffSampler::Gibbs => sample_bias_gibbs(q, kappa, tau, rng),
    }
}

/// The system secret: one bias vector per trigger and one label per
/// (owner, trigger).
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub n_owners: usize,
    pub n_triggers: usize,
    pub q: usize,
    pub kappa: f64,
    pub tau: f64,
    pub seed: u64,
    biases: Vec<BiasVector>,
    /// Owner-major `[n_owners, n_triggers]`.
    labels: Vec<u16>,
}

impl Codebook {
    /// `T` independent bias vectors, then labels drawn trigger by trigger
    /// for every owner. Fully determined by `seed`.
    pub fn generate(n_owners: usize, n_triggers: usize, q: usize, kappa: f64, tau: f64, seed: u64) -> Result<Self> {
        Self::generate_with(CutoffSampler::Rejection, n_owners, n_triggers, q, kappa, tau, seed)
    }

    pub fn generate_with(
        sampler: CutoffSampler,
        n_owners: usize,
        n_triggers: usize,
        q: usize,
        kappa: f64,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_owners == 0 {
            return Err(Error::InvalidParameter("need at least one owner".into()));
        }
        if q > u16::MAX as usize + 1 {
            return Err(Error::InvalidParameter(format!("q={q} exceeds label width")));
        }
        let mut rng = stream(seed, &[tag::CODEBOOK]);
        let biases = (0..n_triggers)
            .map(|_| sample_bias_with(sampler, q, kappa, tau, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut labels = vec![0u16; n_owners * n_triggers];
        for (i, p) in biases.iter().enumerate() {
            for j in 0..n_owners {
                labels[j * n_triggers + i] = p.sample_label(&mut rng) as u16;
            }
        }
        Ok(Self {
            n_owners,
            n_triggers,
            q,
            kappa,
            tau,
            seed,
            biases,
            labels,
        })
    }

    pub fn bias(&self, trigger: usize) -> &BiasVector {
        &self.biases[trigger]
    }

    pub fn label(&self, owner: usize, trigger: usize) -> usize {
        self.labels[owner * self.n_triggers + trigger] as usize
    }

    /// Row `owner` of the label matrix.
    pub fn owner_labels(&self, owner: usize) -> Vec<usize> {
        self.labels[owner * self.n_triggers..(owner + 1) * self.n_triggers]
            .iter()
            .map(|&l| l as usize)
            .collect()
    }

    /// Column `trigger`: every owner's assigned label.
    pub fn trigger_column(&self, trigger: usize) -> Vec<usize> {
        (0..self.n_owners).map(|j| self.label(j, trigger)).collect()
    }

    /// Per-trigger sets of labels assigned to `colluders`.
    pub fn colluder_label_sets(&self, colluders: &[usize]) -> Vec<Vec<usize>> {
        (0..self.n_triggers)
            .map(|i| {
                let mut s: Vec<usize> = colluders.iter().map(|&j| self.label(j, i)).collect();
                s.sort_unstable();
                s.dedup();
                s
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CODEBOOK_MAGIC)
            .u32(CODEBOOK_VERSION)
            .u32(self.n_owners as u32)
            .u32(self.n_triggers as u32)
            .u32(self.q as u32);
        for b in &self.biases {
            w.f64s(b.probs());
        }
        for &l in &self.labels {
            w.u16(l);
        }
        w.f64(self.kappa).f64(self.tau).u64(self.seed);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "codebook");
        r.expect_magic(CODEBOOK_MAGIC)?;
        let version = r.u32()?;
        if version != CODEBOOK_VERSION {
            return Err(Error::format("codebook", format!("unsupported version {version}")));
        }
        let n_owners = r.u32()? as usize;
        let n_triggers = r.u32()? as usize;
        let q = r.u32()? as usize;
        let biases = (0..n_triggers)
            .map(|_| r.f64s(q).map(BiasVector))
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..n_owners * n_triggers)
            .map(|_| r.u16())
            .collect::<Result<Vec<_>>>()?;
        if labels.iter().any(|&l| l as usize >= q) {
            return Err(Error::format("codebook", "label outside class range"));
        }
        let kappa = r.f64()?;
        let tau = r.f64()?;
        let seed = r.u64()?;
        r.expect_end()?;
        Ok(Self {
            n_owners,
            n_triggers,
            q,
            kappa,
            tau,
            seed,
            biases,
            labels,
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

pub const CODEBOOK_MAGIC: &[u8; 4] = b"BCCB";
pub const CODEBOOK_VERSION: u32 = 1;

/// Suspicion contribution of one query. `p` is the bias component of the
/// observed label.
pub fn score(assigned: usize, observed: usize, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("bias component {p} outside (0,1)")));
    }
    Ok(if assigned == observed {
        ((1.0 - p) / p).sqrt()
    } else {
        -(p / (1.0 - p)).sqrt()
    })
}

/// Accusation threshold after `t` queries for false-positive budget
/// `eps_fp`.
///
/// Of the two roots of the defining quadratic the positive one is taken,
/// `Z = ln(eps) * (-1/(3 sqrt(tau)) - sqrt(1/(9 tau) - 2t/ln(eps)))`, which
/// grows like `sqrt(2 t ln(1/eps))`. At `eps_fp = 1` the threshold is its
/// limit, zero.
pub fn threshold(t: usize, eps_fp: f64, tau: f64) -> Result<f64> {
    if !(eps_fp > 0.0 && eps_fp <= 1.0) {
        return Err(Error::InvalidParameter(format!("eps_fp must lie in (0,1], got {eps_fp}")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter(format!("tau must lie in (0,1), got {tau}")));
    }
    if eps_fp == 1.0 {
        return Ok(0.0);
    }
    let ln = eps_fp.ln();
    let disc = 1.0 / (9.0 * tau) - 2.0 * t as f64 / ln;
    if disc < 0.0 {
        return Err(Error::InvalidParameter(format!("negative discriminant {disc}")));
    }
    Ok(ln * (-1.0 / (3.0 * tau.sqrt()) - disc.sqrt()))
}

/// Running state of one accusation session.
#[derive(Clone, Debug, PartialEq)]
pub struct SuspicionState {
    pub scores: Vec<f64>,
    pub queries: usize,
    pub eps_fp: f64,
    pub tau: f64,
    pub threshold: f64,
}

impl SuspicionState {
    pub fn new(n_owners: usize, eps_fp: f64, tau: f64) -> Result<Self> {
        // Validates the parameters up front.
        threshold(1, eps_fp, tau)?;
        Ok(Self {
            scores: vec![0.0; n_owners],
            queries: 0,
            eps_fp,
            tau,
            threshold: f64::INFINITY,
        })
    }

    /// Owners whose score exceeds the current threshold, highest score first
    /// (ties by owner index).
    pub fn accused(&self) -> Vec<usize> {
        if self.queries == 0 {
            return Vec::new();
        }
        let mut acc: Vec<usize> = (0..self.scores.len())
            .filter(|&j| self.scores[j] > self.threshold)
            .collect();
        acc.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        acc
    }
}

/// Applies one query outcome to every owner and returns the accused set.
pub fn accuse_update(
    state: &mut SuspicionState,
    assigned: &[usize],
    observed: usize,
    bias: &BiasVector,
) -> Result<Vec<usize>> {
    if assigned.len() != state.scores.len() {
        return Err(Error::Length {
            op: "accuse_update",
            left: state.scores.len(),
            right: assigned.len(),
        });
    }
    if observed >= bias.q() {
        return Err(Error::LabelOutOfRange {
            label: observed,
            classes: bias.q(),
        });
    }
    let p = bias.prob(observed);
    let hit = score(observed, observed, p)?;
    let miss = score(observed, usize::MAX, p)?;
    for (s, &a) in state.scores.iter_mut().zip(assigned) {
        *s += if a == observed { hit } else { miss };
    }
    state.queries += 1;
    state.threshold = threshold(state.queries, state.eps_fp, state.tau)?;
    Ok(state.accused())
}

/// Fraction of triggers whose observed label is outside the colluders'
/// assigned labels.
pub fn mav(observed: &[usize], colluder_sets: &[Vec<usize>]) -> Result<f64> {
    if observed.len() != colluder_sets.len() {
        return Err(Error::Length {
            op: "mav",
            left: observed.len(),
            right: colluder_sets.len(),
        });
    }
    if observed.is_empty() {
        return Ok(0.0);
    }
    let violations = observed
        .iter()
        .zip(colluder_sets)
        .filter(|(o, set)| !set.contains(o))
        .count();
    Ok(violations as f64 / observed.len() as f64)
}
