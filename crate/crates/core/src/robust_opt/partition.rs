use crate::error::{Error, Result};
use crate::numerics::Param;

/// How the criticality cutoff is derived from the scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// Nearest-rank quantile: the cutoff is the `ceil(tau·M)`-th smallest score.
    Quantile(f64),
    /// Fixed score cutoff.
    Absolute(f64),
}

impl ThresholdRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdRule::Quantile(tau) if !(tau > 0.0 && tau < 1.0) => {
                Err(Error::Argument(format!("quantile tau {tau} must lie in (0, 1)")))
            }
            ThresholdRule::Absolute(t) if !t.is_finite() => {
                Err(Error::Argument(format!("absolute threshold {t} must be finite")))
            }
            _ => Ok(()),
        }
    }
}

/// Split of the trainable scalars into crucial and non-crucial sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalityPartition {
    pub scores: Vec<f64>,
    pub crucial: Vec<bool>,
    pub rule: ThresholdRule,
    pub threshold_value: f64,
}

impl CriticalityPartition {
    pub fn len(&self) -> usize {
        self.crucial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crucial.is_empty()
    }

    pub fn crucial_count(&self) -> usize {
        self.crucial.iter().filter(|&&c| c).count()
    }

    pub fn crucial_fraction(&self) -> f64 {
        self.crucial_count() as f64 / self.len().max(1) as f64
    }

    pub fn noncrucial_mask(&self) -> Vec<bool> {
        self.crucial.iter().map(|c| !c).collect()
    }
}

/// Per-scalar criticality `|∂L/∂θ · θ|`, flattened across `params` in order.
pub fn criticality_scores(params: &[Param]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(params.iter().map(Param::len).sum());
    for p in params {
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::State(format!("parameter `{}` has no gradient", p.name)))?;
        scores.extend(p.value.data().iter().zip(grad.data()).map(|(v, g)| (g * v).abs()));
    }
    Ok(scores)
}

/// Nearest-rank index `k = ceil(tau·M)`, clamped to `[1, M]`.
///
/// A small slack absorbs representation error in `tau·M` (e.g. `0.6·5`
/// evaluates to `3.0000000000000004`).
pub fn nearest_rank(tau: f64, m: usize) -> usize {
    let raw = tau * m as f64;
    let k = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    k.clamp(1, m)
}

/// Marks every score `>= threshold` crucial; ties at the cutoff go crucial.
pub fn partition(scores: &[f64], rule: ThresholdRule) -> Result<CriticalityPartition> {
    if scores.is_empty() {
        return Err(Error::Argument("cannot partition an empty score set".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Argument("criticality scores must be finite".into()));
    }
    rule.validate()?;
    let threshold_value = match rule {
        ThresholdRule::Quantile(tau) => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted[nearest_rank(tau, sorted.len()) - 1]
        }
        ThresholdRule::Absolute(t) => t,
    };
    Ok(CriticalityPartition {
        scores: scores.to_vec(),
        crucial: scores.iter().map(|&s| s >= threshold_value).collect(),
        rule,
        threshold_value,
    })
}
