use super::partition::{CriticalityPartition, ThresholdRule};
use crate::error::{Error, Result};
use crate::numerics::Param;

/// Update applied to non-crucial scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinkRule {
    /// `sign(θ)·max(|θ| - η, 0)`: proximal shrinkage that settles at zero.
    SoftThreshold,
    /// `θ - η·sign(θ)`, which oscillates with amplitude `η` around zero.
    RawSign,
}

/// When the crucial/non-crucial split is recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repartition {
    EverySteps(usize),
    EveryEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptState {
    pub eta: f64,
    pub threshold: ThresholdRule,
    pub repartition: Repartition,
    pub rule: ShrinkRule,
}

impl Default for OptState {
    fn default() -> Self {
        Self {
            eta: 0.05,
            threshold: ThresholdRule::Quantile(0.4),
            repartition: Repartition::EverySteps(1),
            rule: ShrinkRule::SoftThreshold,
        }
    }
}

impl OptState {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Argument(format!("learning rate {} must be >= 0", self.eta)));
        }
        if let Repartition::EverySteps(0) = self.repartition {
            return Err(Error::Argument("repartition interval must be >= 1".into()));
        }
        self.threshold.validate()
    }
}

fn grads_of(params: &[Param]) -> Result<Vec<&[f64]>> {
    params
        .iter()
        .map(|p| {
            p.grad
                .as_ref()
                .map(|g| g.data())
                .ok_or_else(|| Error::State(format!("parameter `{}` has no gradient", p.name)))
        })
        .collect()
}

/// Gradient step on crucial scalars, shrinkage on the rest.
pub fn step(params: &mut [Param], partition: &CriticalityPartition, state: &OptState) -> Result<()> {
    let total: usize = params.iter().map(Param::len).sum();
    if partition.len() != total {
        return Err(Error::State(format!(
            "partition covers {} scalars, parameters hold {total}",
            partition.len()
        )));
    }
    let grads: Vec<Vec<f64>> = grads_of(params)?.into_iter().map(<[f64]>::to_vec).collect();
    let eta = state.eta;
    let mut flat = 0;
    for (p, g) in params.iter_mut().zip(&grads) {
        for (theta, &gi) in p.value.data_mut().iter_mut().zip(g) {
            *theta = if partition.crucial[flat] {
                *theta - eta * gi
            } else {
                shrink(*theta, eta, state.rule)
            };
            flat += 1;
        }
    }
    Ok(())
}

pub fn shrink(theta: f64, eta: f64, rule: ShrinkRule) -> f64 {
    match rule {
        ShrinkRule::SoftThreshold => theta.signum() * (theta.abs() - eta).max(0.0),
        ShrinkRule::RawSign => {
            let s = if theta > 0.0 {
                1.0
            } else if theta < 0.0 {
                -1.0
            } else {
                0.0
            };
            theta - eta * s
        }
    }
}

/// Plain gradient descent `θ ← θ - η·∂L/∂θ` on every scalar.
pub fn sgd_step(params: &mut [Param], eta: f64) -> Result<()> {
    let grads: Vec<Vec<f64>> = grads_of(params)?.into_iter().map(<[f64]>::to_vec).collect();
    for (p, g) in params.iter_mut().zip(&grads) {
        for (theta, &gi) in p.value.data_mut().iter_mut().zip(g) {
            *theta -= eta * gi;
        }
    }
    Ok(())
}

/// Mean `|θ|` over the scalars where `mask` is set; `None` when the set is empty.
pub fn masked_mean_abs(params: &[Param], mask: &[bool]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    let values = params.iter().flat_map(|p| p.value.data().iter());
    for (v, &m) in values.zip(mask) {
        if m {
            sum += v.abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::robust_opt::partition;

    fn single(v: f64, g: f64) -> Vec<Param> {
        let mut p = Param::new("t", Tensor::vector(vec![v]).unwrap());
        p.grad = Some(Tensor::vector(vec![g]).unwrap());
        vec![p]
    }

    fn forced(crucial: bool) -> CriticalityPartition {
        CriticalityPartition {
            scores: vec![0.0],
            crucial: vec![crucial],
            rule: ThresholdRule::Absolute(0.0),
            threshold_value: 0.0,
        }
    }

    fn state(rule: ShrinkRule) -> OptState {
        OptState {
            eta: 0.1,
            rule,
            ..OptState::default()
        }
    }

    #[test]
    fn crucial_update_is_gradient_descent() {
        let mut ps = single(1.0, 0.2);
        step(&mut ps, &forced(true), &state(ShrinkRule::SoftThreshold)).unwrap();
        assert!((ps[0].value.item() - 0.98).abs() < 1e-15);
    }

    #[test]
    fn noncrucial_shrinkage_rules() {
        let mut ps = single(0.3, 5.0);
        step(&mut ps, &forced(false), &state(ShrinkRule::SoftThreshold)).unwrap();
        assert!((ps[0].value.item() - 0.2).abs() < 1e-15);

        let mut ps = single(-0.05, 5.0);
        step(&mut ps, &forced(false), &state(ShrinkRule::SoftThreshold)).unwrap();
        assert_eq!(ps[0].value.item(), 0.0);

        let mut ps = single(-0.05, 5.0);
        step(&mut ps, &forced(false), &state(ShrinkRule::RawSign)).unwrap();
        assert!((ps[0].value.item() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn misaligned_or_missing_grads_are_state_errors() {
        let mut ps = single(1.0, 1.0);
        let p = partition(&[1.0, 2.0], ThresholdRule::Quantile(0.5)).unwrap();
        assert!(matches!(step(&mut ps, &p, &OptState::default()), Err(Error::State(_))));
        ps[0].grad = None;
        assert!(matches!(
            step(&mut ps, &forced(true), &OptState::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        for crucial in [true, false] {
            for rule in [ShrinkRule::SoftThreshold, ShrinkRule::RawSign] {
                let mut ps = single(-0.37, 1.3);
                let st = OptState {
                    eta: 0.0,
                    rule,
                    ..OptState::default()
                };
                step(&mut ps, &forced(crucial), &st).unwrap();
                assert_eq!(ps[0].value.item().to_bits(), (-0.37f64).to_bits());
            }
        }
    }
}
