//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.
//!
//! Seeds are fixed up front (federation seed 0, collusion-trial seed 0).

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use blackcatt_core::attack::AttackTemplate;
use blackcatt_core::autodiff::{cross_entropy, grad_check_masked, Tape, Tensor};
use blackcatt_core::data::{Dataset, TaskConfig};
use blackcatt_core::fl::{
    aggregate_update, apply_task_arithmetic, local_train, Federation, FederationConfig, LocalTrainConfig, MetricsConfig,
    WatermarkConfig,
};
use blackcatt_core::harness::TrialContext;
use blackcatt_core::model::{forward_graph, ArchDescriptor, BnMode, ModelCopy};
use blackcatt_core::rng::stream;
use blackcatt_core::tardos::{accuse_update, sample_bias, score, threshold, Codebook, SuspicionState};
use blackcatt_core::verify::{verify, VerifyMode, VerifyOptions};
use blackcatt_core::watermark::{
    collusion_aware_loss, functional_reg_loss, optimize_triggers, trigger_objective, EmbedConfig, MinMode, RoundPlan,
    Scheme, StepDirection, TriggerOptConfig, TriggerSet, Watermark,
};

const FED_SEED: u64 = 0;
const TRIAL_SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- coding layer

fn coding_fpr() -> Outcome {
    let (n, t, q, eps, tau) = (1000, 500, 10, 0.1, 0.01);
    let cb = Codebook::generate(n, t, q, 0.5, tau, 101).unwrap();
    let mut rng = stream(102, &[]);
    let mut state = SuspicionState::new(n, eps, tau).unwrap();
    let mut ever = vec![false; n];
    for i in 0..t {
        // The suspect's answer is drawn from the trigger's bias, independent
        // of every owner's label.
        let y = cb.bias(i).sample_label(&mut rng);
        for j in accuse_update(&mut state, &cb.trigger_column(i), y, cb.bias(i)).unwrap() {
            ever[j] = true;
        }
    }
    let fpr = ever.iter().filter(|&&a| a).count() as f64 / n as f64;
    let bound = eps + 3.0 * (eps * (1.0 - eps) / n as f64).sqrt();
    outcome(fpr <= bound, format!("innocent FPR {fpr:.3} <= {bound:.3}"))
}

fn score_moments() -> Outcome {
    let mut rng = stream(201, &[]);
    let n = 100_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let b = sample_bias(10, 0.5, 0.01, &mut rng).unwrap();
        let assigned = b.sample_label(&mut rng);
        let observed = b.sample_label(&mut rng);
        let s = score(assigned, observed, b.prob(observed)).unwrap();
        sum += s;
        sq += s * s;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let pass = (-0.01..=0.01).contains(&mean) && (0.95..=1.05).contains(&var);
    outcome(pass, format!("mean {mean:.4}, variance {var:.4}"))
}

/// Positive root of `Z^2 - (2L / (3 sqrt(tau))) Z - 2 t L = 0` with
/// `L = ln(1/eps)`, by bisection.
fn threshold_by_bisection(t: usize, eps: f64, tau: f64) -> f64 {
    let l = -eps.ln();
    let f = |z: f64| z * z - 2.0 * l / (3.0 * tau.sqrt()) * z - 2.0 * t as f64 * l;
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn threshold_oracle() -> Outcome {
    // 50-digit evaluation, frozen.
    const Z_100: f64 = 115.936_330_754_826_15;
    let z = threshold(100, 1e-6, 0.01).unwrap();
    let bisect = threshold_by_bisection(100, 1e-6, 0.01);
    let mut prev = f64::NEG_INFINITY;
    let mut monotone = true;
    for t in 1..=10_000 {
        let v = threshold(t, 1e-6, 0.01).unwrap();
        monotone &= v > prev;
        prev = v;
    }
    let pass = (z - Z_100).abs() <= 1e-3 && (z - bisect).abs() <= 1e-9 && monotone;
    outcome(
        pass,
        format!("Z(100)={z:.6} (reference {Z_100:.6}, bisection {bisect:.6}), strictly increasing on [1, 1e4]: {monotone}"),
    )
}

// ------------------------------------------------------------- gradient suite

fn random_arch(rng: &mut impl Rng) -> ArchDescriptor {
    let layers = rng.random_range(1..=2);
    ArchDescriptor {
        input_dim: rng.random_range(2..=6),
        hidden: (0..layers).map(|_| rng.random_range(2..=8)).collect(),
        use_batchnorm: rng.random_bool(0.7),
        num_classes: rng.random_range(3..=6),
    }
}

/// A model with non-trivial BN running statistics: one epoch of local
/// training from a random init.
fn trained_model(arch: &ArchDescriptor, seed: u64) -> ModelCopy {
    let mut rng = stream(seed, &[1]);
    let n = 24;
    let data = Dataset {
        dim: arch.input_dim,
        features: (0..n * arch.input_dim).map(|_| rng.random_range(0.0..255.0)).collect(),
        labels: (0..n).map(|_| rng.random_range(0..arch.num_classes)).collect(),
    };
    let init = ModelCopy::init(arch, seed).unwrap();
    let cfg = LocalTrainConfig {
        lr: 0.01,
        momentum: 0.9,
        weight_decay: 1e-4,
        epochs: 1,
        batch: 8,
    };
    local_train(&init, &data, &cfg, &mut stream(seed, &[2])).unwrap()
}

fn with_params(m: &ModelCopy, p: &[f64]) -> ModelCopy {
    let mut c = m.clone();
    c.params_mut().copy_from_slice(p);
    c
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Per-row negative log-likelihoods from an independent forward pass.
fn nll_rows(m: &ModelCopy, x: &[f64], labels: &[usize]) -> Vec<f64> {
    let q = m.arch.num_classes;
    let logits = m.forward(x).unwrap();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_softmax(&logits[i * q..(i + 1) * q])[y])
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gradient_suite() -> Outcome {
    let eps = 1e-5;
    let mut worst = [0.0f64; 5];
    let names = ["CE(frozen BN)", "CE(train BN)", "CA per-trigger", "CA per-dataset", "FR"];
    let mut rng = stream(401, &[]);
    for case in 0..20u64 {
        let arch = random_arch(&mut rng);
        let t = rng.random_range(3..=8);
        let mj = trained_model(&arch, 1000 + case);
        let mm = trained_model(&arch, 2000 + case);
        let x = TriggerSet::init(t, arch.input_dim, 64.0, case).unwrap().current().to_vec();
        let labels_j: Vec<usize> = (0..t).map(|_| rng.random_range(0..arch.num_classes)).collect();
        let labels_m: Vec<usize> = (0..t).map(|_| rng.random_range(0..arch.num_classes)).collect();
        let frozen_mask = arch.trainable_mask(true);

        // Cross entropy with frozen BN: analytic from the tape, numeric from
        // an independent forward pass.
        let analytic = |p: &[f64]| {
            let mut tape = Tape::new();
            let theta = tape.leaf(Tensor::vector(p.to_vec()).with_grad());
            let xv = tape.constant(Tensor::matrix(t, arch.input_dim, x.clone()).unwrap());
            let f = forward_graph(&mut tape, &arch, theta, mj.bn_stats(), xv, BnMode::Frozen).unwrap();
            let l = cross_entropy(&mut tape, f.logits, &labels_j).unwrap();
            tape.backward(l).get_or_zeros(theta, arch.param_count())
        };
        let ce = |p: &[f64]| (mean(&nll_rows(&with_params(&mj, p), &x, &labels_j)), analytic(p));
        worst[0] = worst[0].max(grad_check_masked(ce, mj.params(), eps, Some(&frozen_mask)));

        // Cross entropy with batch statistics, as in local training.
        let ce_train = |p: &[f64]| {
            let mut tape = Tape::new();
            let theta = tape.leaf(Tensor::vector(p.to_vec()).with_grad());
            let xv = tape.constant(Tensor::matrix(t, arch.input_dim, x.clone()).unwrap());
            let f = forward_graph(&mut tape, &arch, theta, mj.bn_stats(), xv, BnMode::Train).unwrap();
            let l = cross_entropy(&mut tape, f.logits, &labels_j).unwrap();
            (tape.value(l).item(), tape.backward(l).get_or_zeros(theta, arch.param_count()))
        };
        worst[1] = worst[1].max(grad_check_masked(ce_train, mj.params(), eps, None));

        // Collusion-aware loss: the numeric side rebuilds the half-half
        // average explicitly, so the 1/2 chain factor is checked too.
        let wj = Watermark {
            owner: 0,
            labels: labels_j.clone(),
        };
        let wm = Watermark {
            owner: 1,
            labels: labels_m.clone(),
        };
        for (k, mode) in [(2, MinMode::PerTrigger), (3, MinMode::PerDataset)] {
            let f = |p: &[f64]| {
                let j = with_params(&mj, p);
                let avg: Vec<f64> = j.flatten().iter().zip(mm.flatten()).map(|(a, b)| 0.5 * (a + b)).collect();
                let merged = ModelCopy::unflatten(&arch, avg).unwrap();
                let a = nll_rows(&merged, &x, &labels_j);
                let b = nll_rows(&merged, &x, &labels_m);
                let value = match mode {
                    MinMode::PerTrigger => mean(&a.iter().zip(&b).map(|(u, v)| u.min(*v)).collect::<Vec<_>>()),
                    MinMode::PerDataset => mean(&a).min(mean(&b)),
                };
                let g = collusion_aware_loss(&j, &mm, &wj, &wm, &x, mode).unwrap();
                assert!((g.value - value).abs() < 1e-9 * value.abs().max(1.0));
                (value, g.grad)
            };
            worst[k] = worst[k].max(grad_check_masked(f, mj.params(), eps, Some(&frozen_mask)));
        }

        // Functional regularization against a fixed average model.
        let avg = ModelCopy::unflatten(
            &arch,
            mj.flatten().iter().zip(mm.flatten()).map(|(a, b)| 0.5 * (a + b)).collect(),
        )
        .unwrap();
        let aux: Vec<f64> = (0..6 * arch.input_dim).map(|_| rng.random_range(0.0..255.0)).collect();
        let q = arch.num_classes;
        let fr = |p: &[f64]| {
            let j = with_params(&mj, p);
            let lj = j.forward(&aux).unwrap();
            let la = avg.forward(&aux).unwrap();
            let kls: Vec<f64> = (0..6)
                .map(|i| {
                    let pj = log_softmax(&lj[i * q..(i + 1) * q]);
                    let pa = log_softmax(&la[i * q..(i + 1) * q]);
                    pj.iter().zip(&pa).map(|(a, b)| a.exp() * (a - b)).sum()
                })
                .collect();
            (mean(&kls), functional_reg_loss(&j, &avg, &aux).unwrap().grad)
        };
        worst[4] = worst[4].max(grad_check_masked(fr, mj.params(), eps, Some(&frozen_mask)));
    }
    let pass = worst.iter().all(|&w| w <= 1e-4);
    let detail = names
        .iter()
        .zip(&worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("worst relative error over 20 models: {detail}"))
}

// --------------------------------------------------------- federation checks

fn small_arch() -> ArchDescriptor {
    ArchDescriptor {
        hidden: vec![16, 16],
        ..ArchDescriptor::default()
    }
}

fn small_task() -> TaskConfig {
    TaskConfig {
        samples_per_owner: 80,
        test_samples: 200,
        aux_samples: 64,
        ..TaskConfig::default()
    }
}

fn fedavg_equivalence(no_wm: &Fixture) -> Outcome {
    let identical_rounds = no_wm.identical_rounds;
    let mut worst_ulps = 0.0f64;
    let mut exact_pairs = 0usize;
    let mut pairs = 0usize;
    for scheme in Scheme::ALL {
        let fed = FederationConfig {
            n_owners: 5,
            participants: 3,
            rounds: 3,
            seed: FED_SEED,
            ..FederationConfig::default()
        };
        let mut wm = WatermarkConfig {
            scheme,
            n_triggers: 20,
            ..WatermarkConfig::default()
        };
        wm.embed.lr_wm = 0.01;
        wm.embed.partners = 2;
        let metrics = MetricsConfig {
            every: 0,
            ..MetricsConfig::default()
        };
        let mut f = Federation::new(fed, wm, metrics, small_arch(), &small_task()).unwrap();
        f.run(|_, _| Ok(())).unwrap();
        // One more aggregation, applied by hand.
        let chosen = f.participants(f.round);
        let originals: Vec<ModelCopy> = chosen.iter().map(|&j| f.models[j].clone()).collect();
        let trained: Vec<ModelCopy> = chosen
            .iter()
            .zip(&originals)
            .map(|(&j, m)| local_train(m, &f.shards[j], &f.fed.local(), &mut stream(9, &[j as u64])).unwrap())
            .collect();
        let delta = aggregate_update(&trained, &originals).unwrap();
        let before = f.models.clone();
        apply_task_arithmetic(&mut f.models, &delta, true).unwrap();
        for a in 0..before.len() {
            for b in a + 1..before.len() {
                pairs += 1;
                let mut exact = true;
                for k in 0..delta.len() {
                    let (x, y) = (before[a].flatten()[k], before[b].flatten()[k]);
                    let (x2, y2) = (f.models[a].flatten()[k], f.models[b].flatten()[k]);
                    let err = ((x2 - y2) - (x - y)).abs();
                    if err != 0.0 {
                        exact = false;
                    }
                    let scale = f64::EPSILON * (x.abs() + y.abs() + 2.0 * delta[k].abs()).max(f64::MIN_POSITIVE);
                    worst_ulps = worst_ulps.max(err / scale);
                }
                exact_pairs += usize::from(exact);
            }
        }
    }
    let pass = identical_rounds >= 50 && worst_ulps <= 4.0;
    outcome(
        pass,
        format!(
            "no-wm copies bit-identical for {identical_rounds} rounds; pairwise differences preserved within {worst_ulps:.2} ulps \
             over {pairs} copy pairs in all 6 schemes ({exact_pairs} pairs bit-exact)"
        ),
    )
}

// -------------------------------------------------------- desk-scale fixture

struct Fixture {
    fed: Federation,
    test_acc: f64,
    /// Consecutive rounds, from the first, after which all copies were
    /// bit-identical.
    identical_rounds: u32,
}

fn desk_fixture(scheme: Scheme) -> Fixture {
    let fed = FederationConfig {
        n_owners: 10,
        participants: 5,
        rounds: 200,
        seed: FED_SEED,
        ..FederationConfig::default()
    };
    let mut wm = WatermarkConfig {
        scheme,
        n_triggers: 100,
        ..WatermarkConfig::default()
    };
    wm.embed.lr_wm = 0.01;
    let metrics = MetricsConfig {
        every: 50,
        collusions: 20,
        timing: false,
    };
    let arch = ArchDescriptor {
        hidden: vec![128, 128],
        ..ArchDescriptor::default()
    };
    let mut f = Federation::new(fed, wm, metrics, arch, &TaskConfig::default()).unwrap();
    let mut identical_rounds = 0;
    let mut still_identical = true;
    let rows = f
        .run(|f, _| {
            if still_identical {
                let first = f.models[0].flatten();
                still_identical = f.models.iter().all(|m| {
                    m.flatten().iter().zip(first).all(|(a, b)| a.to_bits() == b.to_bits())
                });
                if still_identical {
                    identical_rounds = f.round;
                }
            }
            Ok(())
        })
        .unwrap();
    for r in &rows {
        if r.test_acc.is_some() {
            eprintln!("    {scheme} {}", r.csv_row());
        }
    }
    let test_acc = rows.last().and_then(|r| r.test_acc).unwrap();
    Fixture {
        fed: f,
        test_acc,
        identical_rounds,
    }
}

fn c2_trials(f: &Fixture) -> (f64, f64, Option<f64>) {
    let ctx = TrialContext {
        models: &f.fed.models,
        shards: None,
        triggers: f.fed.triggers.current(),
        codebook: &f.fed.codebook,
        eps_fp: 1e-6,
    };
    let s = ctx.fnr_trials(&AttackTemplate::default(), 20, TRIAL_SEED).unwrap();
    (s.mean_mav.unwrap(), s.fnr.unwrap(), s.mean_t_star)
}

fn collusion_resistance(blackcatt: &Fixture, vanilla: &Fixture) -> Outcome {
    let (mav_b, fnr_b, t_b) = c2_trials(blackcatt);
    let (mav_v, fnr_v, _) = c2_trials(vanilla);
    let pass = mav_v - mav_b >= 0.2 && fnr_b == 0.0 && fnr_v >= 0.8;
    outcome(
        pass,
        format!(
            "20 C2 averages: MAV blackcatt {mav_b:.3} vs vanilla {mav_v:.3} (gap {:.3}); FNR blackcatt {fnr_b:.2} \
             (mean t* {}), vanilla {fnr_v:.2}",
            mav_v - mav_b,
            t_b.map(|t| format!("{t:.1}")).unwrap_or_else(|| "none".into())
        ),
    )
}

fn single_traitor(fixtures: &[&Fixture]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for f in fixtures {
        let t = f.fed.codebook.n_triggers;
        let (mut misses, mut max_t, mut innocents) = (0, 0, 0);
        for (j, m) in f.fed.models.iter().enumerate() {
            let mut m = m.clone();
            let d = m.arch.input_dim;
            let r = verify(
                &mut m,
                f.fed.triggers.current(),
                d,
                &f.fed.codebook,
                &VerifyOptions::new(1e-6, VerifyMode::FullSet),
            )
            .unwrap();
            if !r.accused.contains(&j) || r.t_star >= t {
                misses += 1;
            }
            innocents += r.accused.iter().filter(|&&a| a != j).count();
            max_t = max_t.max(r.t_star);
        }
        pass &= misses == 0;
        parts.push(format!(
            "{}: {misses}/{} missed, max t* {max_t} of {t}, innocents accused {innocents}",
            f.fed.wm.scheme,
            f.fed.models.len()
        ));
    }
    outcome(pass, parts.join("; "))
}

fn fidelity(fr: &Fixture, no_wm: &Fixture) -> Outcome {
    let gap = no_wm.test_acc - fr.test_acc;
    outcome(
        gap.abs() <= 0.05,
        format!("test accuracy blackcatt-fr {:.4} vs no-wm {:.4} (gap {:.2}pp)", fr.test_acc, no_wm.test_acc, 100.0 * gap),
    )
}

// ---------------------------------------------------------- budget fuzzing

fn budget_fuzzing() -> Outcome {
    let mut rng = stream(901, &[]);
    let (mut steps, mut calls, mut violations, mut increases) = (0usize, 0usize, 0usize, 0usize);
    let mut worst_dev_excess = f64::NEG_INFINITY;
    while steps < 1000 {
        let arch = random_arch(&mut rng);
        let n = rng.random_range(2..=4);
        let t = rng.random_range(2..=6);
        let q = arch.num_classes;
        let models: Vec<ModelCopy> = (0..n)
            .map(|j| ModelCopy::init(&arch, calls as u64 * 10 + j as u64).unwrap())
            .collect();
        let cb = Codebook::generate(n, t, q, 0.5, 0.1 / q as f64, calls as u64).unwrap();
        let alpha = [0.0, 0.5, 4.0, 64.0, 300.0][rng.random_range(0..5)];
        let mut triggers = TriggerSet::init(t, arch.input_dim, alpha, calls as u64).unwrap();
        let cfg = EmbedConfig {
            lambda_ca: [0.0, 0.1, 1.0][rng.random_range(0..3)],
            partners: rng.random_range(1..n),
            min_mode: if rng.random_bool(0.5) {
                MinMode::PerTrigger
            } else {
                MinMode::PerDataset
            },
            ..EmbedConfig::default()
        };
        let partners: Vec<Vec<usize>> = (0..n)
            .map(|j| {
                let mut others: Vec<usize> = (0..n).filter(|&m| m != j).collect();
                others.truncate(cfg.partners);
                others
            })
            .collect();
        let plan = RoundPlan {
            partners,
            aux_batches: vec![Vec::new(); n],
        };
        // Several rounds on the same set so iterates drift to the budget edge.
        for _ in 0..rng.random_range(1..=5) {
            let opt = TriggerOptConfig {
                step: [0.5, 1.0, 8.0, 100.0][rng.random_range(0..4)],
                iterations: rng.random_range(1..=4),
                direction: if rng.random_bool(0.8) {
                    StepDirection::Descent
                } else {
                    StepDirection::Ascent
                },
            };
            let (before, _) = trigger_objective(triggers.current(), &models, &cb, &plan, &cfg, false).unwrap();
            optimize_triggers(&mut triggers, &models, &cb, &plan, &cfg, &opt).unwrap();
            let (after, _) = trigger_objective(triggers.current(), &models, &cb, &plan, &cfg, false).unwrap();
            steps += opt.iterations;
            calls += 1;
            let in_range = triggers.current().iter().all(|v| (0.0..=255.0).contains(v));
            worst_dev_excess = worst_dev_excess.max(triggers.max_deviation() - alpha);
            if !in_range || triggers.max_deviation() > alpha {
                violations += 1;
            }
            if after > before {
                increases += 1;
            }
        }
    }
    outcome(
        violations == 0 && increases == 0,
        format!(
            "{steps} sign-gradient steps in {calls} optimizations: {violations} budget/range violations \
             (max deviation minus alpha {worst_dev_excess:.3}), {increases} objective increases"
        ),
    )
}

// ------------------------------------------------------------- determinism

const CLI_CONFIG: &str = r#"
[federation]
n_owners = 5
participants = 3
rounds = 12
seed = 0

[model]
hidden = [24]

[watermark]
scheme = "blackcatt-fr"
triggers = 40
lr_wm = 0.01
partners = 2

[data]
samples_per_owner = 80
test_samples = 200
aux_samples = 64

[metrics]
every = 4
collusions = 5

[experiment]
snapshot_every = 6
fnr_trials = 4
clean_models = 2
clean_epochs = 1

[[attack]]
colluders = 2

[[attack]]
colluders = 3
merge = "layer-sample"
prune_ratio = 0.2
finetune_epochs = 1
"#;

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_blackcatt"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn cli_session(root: &Path, run: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let c = |extra: &[&str]| {
        let mut args = vec!["--config", "cfg.toml", "--out", run, "--jobs", "2"];
        args.extend_from_slice(extra);
        cli(root, &args)
    };
    c(&["train"])?;
    let merged = format!("{run}/attacks/m.bcat");
    c(&["attack", "--owners", "1,3", "--merge", "layer-sample", "--prune", "0.3", "--finetune-epochs", "1", "--output", &merged])?;
    c(&["accuse", "--suspect", &merged])?;
    c(&["accuse", "--suspect", &format!("{run}/12/owner_4.bcat"), "--mode", "stop-at-first"])?;
    c(&["fnr"])?;
    c(&["mismatch", "--leak-round", "6", "--trigger-version", "12"])?;
    c(&["fpr", "--kind", "wrong-owner", "-c", "3"])?;
    c(&["fpr", "--kind", "wrong-model"])?;
    let sweep = format!("{run}-sweep");
    cli(root, &["--config", "cfg.toml", "--out", &sweep, "--jobs", "2", "sweep", "--axis", "K", "--values", "0,2"])?;
    let sweep_c = format!("{run}-sweep-c");
    cli(root, &["--config", "cfg.toml", "--out", &sweep_c, "sweep", "--axis", "c", "--values", "1,2,4"])?;
    let mut files = Vec::new();
    for d in [run.to_string(), sweep, sweep_c] {
        collect_outputs(&root.join(&d), &root.join(&d), &d, &mut files);
    }
    files.sort();
    Ok(files)
}

fn collect_outputs(base: &Path, dir: &Path, prefix: &str, out: &mut Vec<(String, Vec<u8>)>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect_outputs(base, &p, prefix, out);
        } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")) {
            let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            out.push((format!("{prefix}/{rel}"), fs::read(&p).unwrap()));
        }
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("cfg.toml"), CLI_CONFIG).unwrap();
    let a = match cli_session(tmp.path(), "a") {
        Ok(f) => f,
        Err(e) => return outcome(false, e),
    };
    let b = match cli_session(tmp.path(), "b") {
        Ok(f) => f,
        Err(e) => return outcome(false, e),
    };
    let strip = |v: &[(String, Vec<u8>)]| v.iter().map(|(n, _)| n[1..].to_string()).collect::<Vec<_>>();
    if strip(&a) != strip(&b) {
        return outcome(false, "the two sessions wrote different file sets");
    }
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "train/attack/accuse/fnr/mismatch/fpr/sweep run twice: {} CSV/JSON files compared, {} differ{}",
            a.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    )
}

// -------------------------------------------------------------------- main

fn report(id: usize, name: &str, start: Instant, o: Outcome, failures: &mut usize) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    if !o.pass {
        *failures += 1;
    }
    println!("[{tag}] {id:>2} {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; only run on a
    // plain invocation or when filtered to this suite.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;
    let s = Instant::now();
    report(1, "coding-layer FPR bound", s, coding_fpr(), &mut failures);
    let s = Instant::now();
    report(2, "score moments", s, score_moments(), &mut failures);
    let s = Instant::now();
    report(3, "threshold oracle", s, threshold_oracle(), &mut failures);
    let s = Instant::now();
    report(4, "gradient suite", s, gradient_suite(), &mut failures);

    let s = Instant::now();
    eprintln!("  training desk-scale federations (N=10, P=5, R=200, T=100, seed {FED_SEED})");
    let no_wm = desk_fixture(Scheme::NoWm);
    let vanilla = desk_fixture(Scheme::Vanilla);
    let blackcatt = desk_fixture(Scheme::Blackcatt);
    let blackcatt_fr = desk_fixture(Scheme::BlackcattFr);
    eprintln!("  fixtures trained in {:.1}s", s.elapsed().as_secs_f64());

    let s = Instant::now();
    report(5, "FedAvg equivalence", s, fedavg_equivalence(&no_wm), &mut failures);
    let s = Instant::now();
    report(6, "collusion resistance (C2)", s, collusion_resistance(&blackcatt, &vanilla), &mut failures);
    let s = Instant::now();
    report(7, "single-traitor detection", s, single_traitor(&[&blackcatt, &vanilla]), &mut failures);
    let s = Instant::now();
    report(8, "fidelity", s, fidelity(&blackcatt_fr, &no_wm), &mut failures);
    let s = Instant::now();
    report(9, "trigger budget fuzzing", s, budget_fuzzing(), &mut failures);
    let s = Instant::now();
    report(10, "CLI determinism", s, determinism(), &mut failures);

    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
