//! SGD with momentum and weight decay, in both descent and ascent flavors.

use crate::error::{Error, Result};

use super::{GradientRecord, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDirection {
    Descent,
    Ascent,
}

/// One SGD step over every parameter named in `grads`:
/// `v <- momentum*v + (g + weight_decay*p)`, then `p <- p -/+ lr*v`.
///
/// Parameters without a gradient entry are left untouched; a gradient that
/// names an unknown or non-trainable parameter is a contract violation.
pub fn sgd_momentum_step(
    params: &mut ParameterSet,
    grads: &GradientRecord,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    direction: StepDirection,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::contract(format!("momentum must be in [0,1), got {momentum}")));
    }
    let sign = match direction {
        StepDirection::Descent => -1.0,
        StepDirection::Ascent => 1.0,
    };
    for (name, g) in &grads.grads {
        let param = params
            .get_mut(name)
            .map_err(|_| Error::contract(format!("gradient for unknown parameter {name:?}")))?;
        if !param.trainable {
            return Err(Error::contract(format!(
                "gradient supplied for non-trainable parameter {name:?}"
            )));
        }
        if g.len() != param.value.len() {
            return Err(Error::contract(format!(
                "gradient length {} vs parameter {:?} length {}",
                g.len(),
                name,
                param.value.len()
            )));
        }
        let velocity = param
            .velocity
            .get_or_insert_with(|| vec![0.0; g.len()]);
        let p = param.value.data_mut();
        for k in 0..g.len() {
            velocity[k] = momentum * velocity[k] + (g[k] + weight_decay * p[k]);
            p[k] += sign * lr * velocity[k];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use indexmap::IndexMap;

    fn one_param(p0: f64) -> ParameterSet {
        let mut set = ParameterSet::new();
        set.insert("p", Tensor::scalar(p0), true).unwrap();
        set
    }

    fn grad_of(v: f64) -> GradientRecord {
        let mut grads = IndexMap::new();
        grads.insert("p".to_string(), vec![v]);
        GradientRecord {
            grads,
            input_grad: None,
        }
    }

    #[test]
    fn plain_descent_and_ascent_steps() {
        let mut set = one_param(0.0);
        sgd_momentum_step(&mut set, &grad_of(1.0), 0.1, 0.0, 0.0, StepDirection::Descent).unwrap();
        assert!((set.value("p").unwrap().data()[0] + 0.1).abs() < 1e-15);

        let mut set = one_param(0.0);
        sgd_momentum_step(&mut set, &grad_of(1.0), 0.1, 0.0, 0.0, StepDirection::Ascent).unwrap();
        assert!((set.value("p").unwrap().data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_follow_velocity_recurrence() {
        // v1 = 1, p = -0.1; v2 = 0.9 + 1 = 1.9, p = -0.1 - 0.19 = -0.29
        let mut set = one_param(0.0);
        for _ in 0..2 {
            sgd_momentum_step(&mut set, &grad_of(1.0), 0.1, 0.9, 0.0, StepDirection::Descent)
                .unwrap();
        }
        assert!((set.value("p").unwrap().data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_feeds_velocity() {
        // g_eff = 0 + 0.5*2.0 = 1.0; p = 2.0 - 0.1
        let mut set = one_param(2.0);
        sgd_momentum_step(&mut set, &grad_of(0.0), 0.1, 0.0, 0.5, StepDirection::Descent).unwrap();
        assert!((set.value("p").unwrap().data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn unknown_parameter_gradient_is_contract_error() {
        let mut set = one_param(0.0);
        let mut grads = IndexMap::new();
        grads.insert("missing".to_string(), vec![1.0]);
        let record = GradientRecord {
            grads,
            input_grad: None,
        };
        let err =
            sgd_momentum_step(&mut set, &record, 0.1, 0.0, 0.0, StepDirection::Descent).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
