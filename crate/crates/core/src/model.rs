//! Fully connected classifiers with a flat parameter view.
//!
//! A model's complete state is one flat vector: trainable parameters first,
//! then batch-norm running statistics. Averaging, task arithmetic and
//! serialization all operate on that vector, so BN statistics travel with the
//! weights.
//!
//! Parameter order, per layer: weight `[out, in]` row-major, bias `[out]`,
//! then for hidden layers with batch norm `gamma [out]`, `beta [out]`.
//! Statistics order, per BN layer: running mean `[out]`, running var `[out]`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tape, Tensor, Var};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Inputs live on `[0, 255]`; the network sees them divided by this.
pub const INPUT_SCALE: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchDescriptor {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub use_batchnorm: bool,
    pub num_classes: usize,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![128, 128],
            use_batchnorm: true,
            num_classes: 10,
        }
    }
}

/// Offsets of one layer inside the flat state vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    /// `(gamma, beta)` parameter ranges.
    pub bn_affine: Option<(Range<usize>, Range<usize>)>,
    /// `(running_mean, running_var)` ranges, already offset past the parameters.
    pub bn_stats: Option<(Range<usize>, Range<usize>)>,
}

impl LayerLayout {
    /// All parameter indices of the layer (weights, bias, BN affine).
    pub fn param_range(&self) -> Range<usize> {
        let end = self
            .bn_affine
            .as_ref()
            .map_or(self.bias.end, |(_, b)| b.end);
        self.weight.start..end
    }

    pub fn stats_range(&self) -> Option<Range<usize>> {
        self.bn_stats.as_ref().map(|(m, v)| m.start..v.end)
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter(format!(
                "all layer widths must be >= 1 ({self})"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.num_classes);
        let n_layers = dims.len() - 1;
        let mut off = 0;
        let mut out = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let weight = off..off + fan_in * fan_out;
            off = weight.end;
            let bias = off..off + fan_out;
            off = bias.end;
            let bn_affine = if self.use_batchnorm && l + 1 < n_layers {
                let g = off..off + fan_out;
                let b = g.end..g.end + fan_out;
                off = b.end;
                Some((g, b))
            } else {
                None
            };
            out.push(LayerLayout {
                fan_in,
                fan_out,
                weight,
                bias,
                bn_affine,
                bn_stats: None,
            });
        }
        let mut s = off;
        for layer in &mut out {
            if layer.bn_affine.is_some() {
                let m = s..s + layer.fan_out;
                let v = m.end..m.end + layer.fan_out;
                s = v.end;
                layer.bn_stats = Some((m, v));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, |l| l.bias.end)
    }

    pub fn bn_stat_count(&self) -> usize {
        if self.use_batchnorm {
            2 * self.hidden.iter().sum::<usize>()
        } else {
            0
        }
    }

    pub fn state_len(&self) -> usize {
        self.param_count() + self.bn_stat_count()
    }

    /// Mask over parameters that receive updates. With BN frozen only the
    /// linear layers train.
    pub fn trainable_mask(&self, bn_frozen: bool) -> Vec<bool> {
        let mut mask = vec![true; self.param_count()];
        if bn_frozen {
            for layer in self.layers() {
                if let Some((g, b)) = layer.bn_affine {
                    mask[g].fill(false);
                    mask[b].fill(false);
                }
            }
        }
        mask
    }
}

/// Canonical text form, e.g. `mlp;in=32;hidden=128x128;bn=1;q=10`.
impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        write!(
            f,
            "mlp;in={};hidden={};bn={};q={}",
            self.input_dim,
            hidden.join("x"),
            u8::from(self.use_batchnorm),
            self.num_classes
        )
    }
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::format("architecture string", format!("{why}: {s:?}"));
        let mut parts = s.split(';');
        if parts.next() != Some("mlp") {
            return Err(bad("expected mlp prefix"));
        }
        let mut field = |key: &str| -> Result<String> {
            let p = parts.next().ok_or_else(|| bad("missing field"))?;
            p.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected {key}=")))
        };
        let num = |v: String| v.parse::<usize>().map_err(|_| bad("bad integer"));
        let input_dim = num(field("in")?)?;
        let hidden_s = field("hidden")?;
        let hidden = if hidden_s.is_empty() {
            Vec::new()
        } else {
            hidden_s
                .split('x')
                .map(|h| h.parse::<usize>().map_err(|_| bad("bad width")))
                .collect::<Result<_>>()?
        };
        let use_batchnorm = match field("bn")?.as_str() {
            "0" => false,
            "1" => true,
            _ => return Err(bad("bn must be 0 or 1")),
        };
        let num_classes = num(field("q")?)?;
        let arch = Self {
            input_dim,
            hidden,
            use_batchnorm,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelTag {
    Owner(u32),
    Merged,
    Global,
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelTag::Owner(j) => write!(f, "owner:{j}"),
            ModelTag::Merged => f.write_str("merged"),
            ModelTag::Global => f.write_str("global"),
        }
    }
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merged" => Ok(ModelTag::Merged),
            "global" => Ok(ModelTag::Global),
            _ => s
                .strip_prefix("owner:")
                .and_then(|j| j.parse().ok())
                .map(ModelTag::Owner)
                .ok_or_else(|| Error::format("owner tag", s.to_string())),
        }
    }
}

/// How batch normalization behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; BN parameters receive no gradient.
    Frozen,
}

/// One model copy: architecture, flat state, tag and round.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCopy {
    pub arch: ArchDescriptor,
    state: Vec<f64>,
    pub tag: ModelTag,
    pub round: u32,
}

/// Output of a recorded forward pass.
pub struct Forward {
    pub logits: Var,
    /// Updated running statistics (train mode only).
    pub new_stats: Option<Vec<f64>>,
}

/// Records the network on `tape`.
///
/// `params` must hold the trainable parameters (length `param_count`).
/// `stats` are the BN running statistics used in frozen mode and as the base
/// for the running update in train mode. `input` is `[batch, input_dim]` on
/// the canonical `[0, 255]` scale.
pub fn forward_graph(
    tape: &mut Tape,
    arch: &ArchDescriptor,
    params: Var,
    stats: &[f64],
    input: Var,
    mode: BnMode,
) -> Result<Forward> {
    let (_, cols) = tape.value(input).rows_cols();
    if cols != arch.input_dim {
        return Err(Error::Shape {
            op: "forward",
            expected: vec![arch.input_dim],
            got: vec![cols],
        });
    }
    let pc = arch.param_count();
    let mut new_stats = match mode {
        BnMode::Train => Some(stats.to_vec()),
        BnMode::Frozen => None,
    };
    let layers = arch.layers();
    let mut h = tape.scale(input, 1.0 / INPUT_SCALE);
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let w = tape.slice(params, layer.weight.start, vec![layer.fan_out, layer.fan_in])?;
        let b = tape.slice(params, layer.bias.start, vec![layer.fan_out])?;
        h = tape.linear(h, w, b)?;
        if l == last {
            break;
        }
        if let (Some((g_r, b_r)), Some((m_r, v_r))) = (&layer.bn_affine, &layer.bn_stats) {
            let (m_r, v_r) = (m_r.start - pc..m_r.end - pc, v_r.start - pc..v_r.end - pc);
            match mode {
                BnMode::Train => {
                    let gamma = tape.slice(params, g_r.start, vec![layer.fan_out])?;
                    let beta = tape.slice(params, b_r.start, vec![layer.fan_out])?;
                    let batch = tape.value(h).rows_cols().0;
                    let (out, mean, var) = tape.batch_norm_train(h, gamma, beta, BN_EPS)?;
                    let ns = new_stats.as_mut().expect("train mode");
                    let unbias = if batch > 1 {
                        batch as f64 / (batch as f64 - 1.0)
                    } else {
                        1.0
                    };
                    for f in 0..layer.fan_out {
                        let rm = &mut ns[m_r.start + f];
                        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[f];
                        let rv = &mut ns[v_r.start + f];
                        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[f] * unbias;
                    }
                    h = out;
                }
                BnMode::Frozen => {
                    let pv = tape.value(params).data();
                    let gamma = &pv[g_r.clone()];
                    let beta = &pv[b_r.clone()];
                    let mean = &stats[m_r];
                    let var = &stats[v_r];
                    let scale: Vec<f64> = gamma
                        .iter()
                        .zip(var)
                        .map(|(g, v)| g / (v + BN_EPS).sqrt())
                        .collect();
                    let shift: Vec<f64> = beta
                        .iter()
                        .zip(mean)
                        .zip(&scale)
                        .map(|((b, m), s)| b - m * s)
                        .collect();
                    h = tape.feature_affine(h, scale, &shift)?;
                }
            }
        }
        h = tape.relu(h);
    }
    Ok(Forward {
        logits: h,
        new_stats,
    })
}

impl ModelCopy {
    /// Scaled-uniform fan-in initialization: weights and biases drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, BN `gamma = 1`, `beta = 0`,
    /// running mean 0 and variance 1.
    pub fn init(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, &[tag::INIT]);
        let mut state = vec![0.0; arch.state_len()];
        for layer in arch.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for i in layer.weight.clone().chain(layer.bias.clone()) {
                state[i] = rng.random_range(-bound..bound);
            }
            if let Some((g, _)) = &layer.bn_affine {
                state[g.clone()].fill(1.0);
            }
            if let Some((_, v)) = &layer.bn_stats {
                state[v.clone()].fill(1.0);
            }
        }
        Ok(Self {
            arch: arch.clone(),
            state,
            tag: ModelTag::Global,
            round: 0,
        })
    }

    /// Inverse of [`ModelCopy::flatten`].
    pub fn unflatten(arch: &ArchDescriptor, state: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if state.len() != arch.state_len() {
            return Err(Error::Length {
                op: "unflatten",
                left: arch.state_len(),
                right: state.len(),
            });
        }
        Ok(Self {
            arch: arch.clone(),
            state,
            tag: ModelTag::Global,
            round: 0,
        })
    }

    pub fn with_tag(mut self, tag: ModelTag, round: u32) -> Self {
        self.tag = tag;
        self.round = round;
        self
    }

    /// The full state: parameters then BN running statistics.
    pub fn flatten(&self) -> &[f64] {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut [f64] {
        &mut self.state
    }

    pub fn into_state(self) -> Vec<f64> {
        self.state
    }

    pub fn params(&self) -> &[f64] {
        &self.state[..self.arch.param_count()]
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        let pc = self.arch.param_count();
        &mut self.state[..pc]
    }

    pub fn bn_stats(&self) -> &[f64] {
        &self.state[self.arch.param_count()..]
    }

    pub fn ensure_same_arch(&self, other: &ModelCopy) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch(
                self.arch.to_string(),
                other.arch.to_string(),
            ));
        }
        Ok(())
    }

    /// Logits for `inputs: [batch * input_dim]` with BN in running-statistics
    /// mode, so each row's output is independent of the rest of the batch.
    pub fn forward(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let d = self.arch.input_dim;
        if inputs.len() % d != 0 {
            return Err(Error::Shape {
                op: "forward",
                expected: vec![d],
                got: vec![inputs.len()],
            });
        }
        let mut tape = Tape::new();
        let params = tape.constant(Tensor::vector(self.params().to_vec()));
        let x = tape.constant(Tensor::matrix(inputs.len() / d, d, inputs.to_vec())?);
        let fwd = forward_graph(&mut tape, &self.arch, params, self.bn_stats(), x, BnMode::Frozen)?;
        Ok(tape.value(fwd.logits).data().to_vec())
    }

    /// Hard label for a single input; ties go to the lowest class index.
    pub fn predict_label(&self, input: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(input)?))
    }

    pub fn predict_labels(&self, inputs: &[f64]) -> Result<Vec<usize>> {
        let q = self.arch.num_classes;
        Ok(self.forward(inputs)?.chunks(q).map(argmax).collect())
    }

    pub fn accuracy(&self, inputs: &[f64], labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::EmptyData("accuracy on empty set".into()));
        }
        let pred = self.predict_labels(inputs)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Snapshot encoding: magic `BCAT`, format version, canonical arch
    /// string, owner tag, round, parameter count, then little-endian `f64`
    /// parameters followed by BN running statistics.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(SNAPSHOT_MAGIC)
            .u32(SNAPSHOT_VERSION)
            .str(&self.arch.to_string())
            .str(&self.tag.to_string())
            .u32(self.round)
            .u64(self.arch.param_count() as u64)
            .f64s(&self.state);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "model snapshot");
        r.expect_magic(SNAPSHOT_MAGIC)?;
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::format(
                "model snapshot",
                format!("unsupported version {version}"),
            ));
        }
        let arch: ArchDescriptor = r.str()?.parse()?;
        let tag: ModelTag = r.str()?.parse()?;
        let round = r.u32()?;
        let pc = r.u64()? as usize;
        if pc != arch.param_count() {
            return Err(Error::format(
                "model snapshot",
                format!("param count {pc} does not match {arch}"),
            ));
        }
        let state = r.f64s(arch.state_len())?;
        r.expect_end()?;
        Ok(Self {
            arch,
            state,
            tag,
            round,
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

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"BCAT";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Componentwise mean of model states. All inputs must share an architecture.
pub fn average_states(models: &[&ModelCopy]) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::EmptyData("averaging zero models".into()))?;
    for m in &models[1..] {
        first.ensure_same_arch(m)?;
    }
    let mut acc = vec![0.0; first.state.len()];
    for m in models {
        for (a, v) in acc.iter_mut().zip(&m.state) {
            *a += v;
        }
    }
    let n = models.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{cross_entropy, grad_check_masked};
    use rand::Rng;
    use proptest::prelude::*;

    fn small_arch(bn: bool) -> ArchDescriptor {
        ArchDescriptor {
            input_dim: 4,
            hidden: vec![6, 5],
            use_batchnorm: bn,
            num_classes: 3,
        }
    }

    fn inputs(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, &[99]);
        (0..n * d).map(|_| rng.random_range(0.0..255.0)).collect()
    }

    #[test]
    fn init_is_deterministic() {
        let arch = ArchDescriptor::default();
        let a = ModelCopy::init(&arch, 3).unwrap();
        let b = ModelCopy::init(&arch, 3).unwrap();
        let c = ModelCopy::init(&arch, 4).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_ne!(a.flatten(), c.flatten());
        let copies: Vec<_> = (0..5).map(|_| ModelCopy::init(&arch, 9).unwrap()).collect();
        assert!(copies.windows(2).all(|w| w[0].flatten() == w[1].flatten()));
    }

    #[test]
    fn default_layout_counts() {
        let arch = ArchDescriptor::default();
        assert_eq!(
            arch.param_count(),
            32 * 128 + 128 + 256 + 128 * 128 + 128 + 256 + 128 * 10 + 10
        );
        assert_eq!(arch.bn_stat_count(), 512);
    }

    #[test]
    fn zero_model_outputs_uniform() {
        let arch = small_arch(true);
        let m = ModelCopy::unflatten(&arch, vec![0.0; arch.state_len()]).unwrap();
        let z = m.forward(&inputs(3, 4, 1)).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_forward_is_per_sample() {
        let arch = small_arch(true);
        let m = ModelCopy::init(&arch, 1).unwrap();
        let x = inputs(5, 4, 2);
        let batch = m.forward(&x).unwrap();
        for r in 0..5 {
            let single = m.forward(&x[r * 4..(r + 1) * 4]).unwrap();
            assert_eq!(&batch[r * 3..(r + 1) * 3], single.as_slice());
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = ModelCopy::init(&small_arch(false), 1).unwrap();
        assert!(matches!(m.forward(&[1.0; 5]), Err(Error::Shape { .. })));
    }

    #[test]
    fn predict_matches_argmax_of_softmax() {
        for seed in 0..10 {
            let m = ModelCopy::init(&small_arch(seed % 2 == 0), seed).unwrap();
            let x = inputs(8, 4, seed + 100);
            let z = m.forward(&x).unwrap();
            for r in 0..8 {
                let p = crate::autodiff::softmax(&z[r * 3..(r + 1) * 3]);
                let mut best = 0;
                for c in 1..3 {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                assert_eq!(m.predict_label(&x[r * 4..(r + 1) * 4]).unwrap(), best);
            }
        }
    }

    fn ce_through_model(arch: &ArchDescriptor, stats: &[f64], params: &[f64], x: &[f64], y: &[usize], mode: BnMode) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(params.to_vec()).with_grad());
        let xv = tape.constant(Tensor::matrix(y.len(), arch.input_dim, x.to_vec()).unwrap());
        let f = forward_graph(&mut tape, arch, p, stats, xv, mode).unwrap();
        let l = cross_entropy(&mut tape, f.logits, y).unwrap();
        let g = tape.backward(l);
        (tape.value(l).item(), g.get_or_zeros(p, params.len()))
    }

    #[test]
    fn model_gradients_pass_grad_check() {
        for (bn, mode) in [(false, BnMode::Frozen), (true, BnMode::Frozen), (true, BnMode::Train)] {
            let arch = small_arch(bn);
            let m = ModelCopy::init(&arch, 21).unwrap();
            let x = inputs(6, 4, 5);
            let y = [0, 1, 2, 2, 1, 0];
            let stats = m.bn_stats().to_vec();
            let mask = arch.trainable_mask(mode == BnMode::Frozen);
            let err = grad_check_masked(
                |p| ce_through_model(&arch, &stats, p, &x, &y, mode),
                m.params(),
                1e-5,
                Some(&mask),
            );
            assert!(err < 1e-4, "bn={bn} mode={mode:?}: {err}");
        }
    }

    #[test]
    fn frozen_bn_gives_no_gradient_to_bn_params() {
        let arch = small_arch(true);
        let m = ModelCopy::init(&arch, 2).unwrap();
        let (_, g) = ce_through_model(&arch, m.bn_stats(), m.params(), &inputs(3, 4, 1), &[0, 1, 2], BnMode::Frozen);
        let mask = arch.trainable_mask(true);
        for (i, gi) in g.iter().enumerate() {
            if !mask[i] {
                assert_eq!(*gi, 0.0);
            }
        }
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let arch = small_arch(true);
        let m = ModelCopy::init(&arch, 2).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(m.params().to_vec()));
        let x = tape.constant(Tensor::matrix(4, 4, inputs(4, 4, 8)).unwrap());
        let f = forward_graph(&mut tape, &arch, p, m.bn_stats(), x, BnMode::Train).unwrap();
        assert_ne!(f.new_stats.unwrap(), m.bn_stats());
    }

    #[test]
    fn snapshot_round_trip_bit_exact() {
        let arch = ArchDescriptor::default();
        let m = ModelCopy::init(&arch, 5).unwrap().with_tag(ModelTag::Owner(7), 42);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"BCAT");
        let back = ModelCopy::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn snapshot_rejects_garbage() {
        assert!(matches!(ModelCopy::from_bytes(b"nope"), Err(Error::Format { .. })));
        let m = ModelCopy::init(&small_arch(true), 5).unwrap();
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(ModelCopy::from_bytes(&bytes).is_err());
    }

    #[test]
    fn unflatten_length_mismatch() {
        let arch = small_arch(true);
        assert!(matches!(
            ModelCopy::unflatten(&arch, vec![0.0; 3]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn arch_string_round_trip() {
        for arch in [ArchDescriptor::default(), small_arch(false)] {
            assert_eq!(arch.to_string().parse::<ArchDescriptor>().unwrap(), arch);
        }
        assert!("mlp;in=3;hidden=0;bn=1;q=2".parse::<ArchDescriptor>().is_err());
    }

    #[test]
    fn layer_ranges_tile_state() {
        let arch = small_arch(true);
        let mut covered = vec![false; arch.state_len()];
        for l in arch.layers() {
            for i in l.param_range().chain(l.stats_range().unwrap_or(0..0)) {
                assert!(!covered[i]);
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|c| *c));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_bijection(seed in 0u64..1000, bn in any::<bool>()) {
            let arch = small_arch(bn);
            let m = ModelCopy::init(&arch, seed).unwrap();
            let back = ModelCopy::unflatten(&arch, m.flatten().to_vec()).unwrap();
            prop_assert_eq!(back.flatten(), m.flatten());
            let x = inputs(2, 4, seed);
            prop_assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
        }
    }
}
