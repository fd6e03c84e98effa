use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
        }
    }
}

/// One SGD step with heavy-ball momentum and L2 weight decay folded into the
/// gradient:
///
/// ```text
/// d   = grad + weight_decay * param
/// buf = momentum * buf + d
/// param -= lr * buf
/// ```
///
/// Buffers start at zero. Entries with `mask[i] == false` are left untouched,
/// including their buffers. Nothing is modified when any gradient is
/// non-finite.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    buffers: &mut [f64],
    cfg: &SgdConfig,
    mask: Option<&[bool]>,
) -> Result<()> {
    if grads.len() != params.len() || buffers.len() != params.len() {
        return Err(Error::Length {
            op: "sgd_step",
            left: params.len(),
            right: grads.len().min(buffers.len()),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient component {i} ({})",
            grads[i]
        )));
    }
    for i in 0..params.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let d = grads[i] + cfg.weight_decay * params[i];
        buffers[i] = cfg.momentum * buffers[i] + d;
        params[i] -= cfg.lr * buffers[i];
    }
    Ok(())
}

/// Stateful wrapper owning the momentum buffers.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    buffers: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig, len: usize) -> Self {
        Self {
            config,
            buffers: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], mask: Option<&[bool]>) -> Result<()> {
        sgd_step(params, grads, &mut self.buffers, &self.config, mask)
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut b = vec![0.0; 2];
        sgd_step(&mut p, &[3.0, 4.0], &mut b, &SgdConfig::new(0.0, 0.9, 1e-4), None).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_sgd() {
        let mut p = vec![1.0];
        let mut b = vec![0.0];
        sgd_step(&mut p, &[0.5], &mut b, &SgdConfig::new(0.1, 0.0, 0.0), None).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        // buf: 1 then 0.9 + 1 = 1.9; param: -0.1 then -0.1 - 0.19
        let mut opt = Sgd::new(SgdConfig::new(0.1, 0.9, 0.0), 1);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0], None).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        opt.step(&mut p, &[1.0], None).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = vec![1.0, 1.0];
        let mut b = vec![0.0; 2];
        let err = sgd_step(&mut p, &[0.1, f64::NAN], &mut b, &SgdConfig::new(0.1, 0.9, 0.0), None);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn masked_entries_skip_decay() {
        let mut p = vec![1.0, 1.0];
        let mut b = vec![0.0; 2];
        let cfg = SgdConfig::new(0.1, 0.9, 0.5);
        sgd_step(&mut p, &[0.0, 0.0], &mut b, &cfg, Some(&[true, false])).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn deterministic_bitwise() {
        let run = || {
            let mut opt = Sgd::new(SgdConfig::new(0.03, 0.9, 1e-4), 3);
            let mut p = vec![0.3, -1.7, 2.2];
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| (x * k as f64).sin()).collect();
                opt.step(&mut p, &g, None).unwrap();
            }
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
