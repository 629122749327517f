//! Central-difference verification of [`Network::loss_and_gradients`].

use serde::{Deserialize, Serialize};

use super::{Batch, LossConfig, Network};
use crate::error::{Error, Result};
use crate::par::Exec;

/// Smallest step tried when a probe straddles a kink, relative to `h`.
const MIN_STEP_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many entries per tensor (evenly spread, always
    /// including the first and last). `None` checks every entry.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            max_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// `max |g_analytic − g_numeric| / max(1, |g_numeric|)`
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Entries whose ±h probe straddled a ReLU or hinge kink and were
    /// re-measured with a smaller step.
    pub reduced_steps: usize,
}

fn sample_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < n && m >= 2 => (0..m).map(|i| i * (n - 1) / (m - 1)).collect(),
        Some(1) if n > 1 => vec![0],
        _ => (0..n).collect(),
    }
}

/// Compare analytic gradients against central differences with step `h`.
pub fn gradient_check(
    net: &Network,
    batch: &Batch,
    cfg: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let h = opts.step;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = net.loss_and_gradients(batch, cfg)?;

    let mut targets = Vec::new();
    for (pi, p) in net.params().iter().enumerate() {
        for idx in sample_indices(p.data.len(), opts.max_per_tensor) {
            targets.push((pi, idx));
        }
    }

    // Perturbed copies are independent; fan out over targets. A central
    // difference across a kink measures neither one-sided slope, so the
    // step shrinks until both probes take the same branches.
    let min_step = h * MIN_STEP_FRACTION;
    let numeric = Exec::default().map(&targets, |&(pi, idx)| -> Result<(f64, bool)> {
        let mut probe = net.clone();
        let orig = probe.params()[pi].data[idx];
        let mut step = h;
        loop {
            probe.params_mut()[pi].data[idx] = orig + step;
            let (plus, sig_plus) = probe.loss_and_signature(batch, cfg)?;
            probe.params_mut()[pi].data[idx] = orig - step;
            let (minus, sig_minus) = probe.loss_and_signature(batch, cfg)?;
            if sig_plus == sig_minus || step <= min_step {
                return Ok(((plus - minus) / (2.0 * step), step < h));
            }
            step /= 10.0;
        }
    });

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        checked: targets.len(),
        reduced_steps: 0,
    };
    for (&(pi, idx), num) in targets.iter().zip(numeric) {
        let (num, reduced) = num?;
        report.reduced_steps += usize::from(reduced);
        let ana = analytic.0[pi][idx];
        let err = (ana - num).abs() / num.abs().max(1.0);
        if err > report.max_relative_error || report.worst_parameter.is_empty() {
            report.max_relative_error = err;
            report.worst_parameter = net.params()[pi].name.clone();
            report.worst_index = idx;
        }
    }
    Ok(report)
}
