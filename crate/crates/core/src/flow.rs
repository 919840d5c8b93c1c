//! Rectified-flow objective and Euler sampling.
//!
//! Training pairs an action chunk `A` with Gaussian noise `ε` at a time
//! `τ ~ Beta(α, β)` clamped to `[0.02, 0.98]`, forms `A_τ = τA + (1−τ)ε`,
//! and regresses the velocity onto the constant target `u = A − ε`.
//! Inference integrates the learned field from `τ = 0` (pure noise) to
//! `τ = 1` with forward Euler.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{sample_gaussian, Rng};
use crate::tensor::{Scalar, Tensor};

pub const TRAIN_TAU_RANGE: [f64; 2] = [0.02, 0.98];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub beta_alpha: f64,
    pub beta_beta: f64,
    pub clamp: [f64; 2],
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            beta_alpha: 1.5,
            beta_beta: 1.0,
            clamp: TRAIN_TAU_RANGE,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_alpha > 0.0 && self.beta_beta > 0.0) {
            return Err(Error::Config("beta parameters must be positive".into()));
        }
        let [lo, hi] = self.clamp;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("invalid tau clamp {:?}", self.clamp)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 10 }
    }
}

/// Beta(α, β) draw clamped to the training range.
pub fn sample_tau(rng: &mut Rng, alpha: f64, beta: f64) -> Result<f64> {
    sample_tau_in(rng, alpha, beta, TRAIN_TAU_RANGE)
}

pub fn sample_tau_in(rng: &mut Rng, alpha: f64, beta: f64, clamp: [f64; 2]) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta shape parameters must be positive, got ({alpha}, {beta})"
        )));
    }
    Ok(rng.beta(alpha, beta)?.clamp(clamp[0], clamp[1]))
}

fn check_same<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `τ·A + (1−τ)·ε`.
pub fn interpolate<T: Scalar>(a: &Tensor<T>, eps: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    check_same("interpolate", a, eps)?;
    let one_minus = T::one() - tau;
    let data = a
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| tau * x + one_minus * e)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `u = A − ε`.
pub fn flow_target<T: Scalar>(a: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("flow_target", a, eps)?;
    let data = a.data().iter().zip(eps.data()).map(|(&x, &e)| x - e).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Mean squared error over every element of every chunk in the batch.
pub fn fm_loss<T: Scalar>(v_pred: &[Tensor<T>], u: &[Tensor<T>]) -> Result<T> {
    if v_pred.len() != u.len() || v_pred.is_empty() {
        return Err(Error::InvalidArgument("fm_loss batch sizes differ or empty".into()));
    }
    let mut sum = T::zero();
    let mut n = 0usize;
    for (v, t) in v_pred.iter().zip(u) {
        check_same("fm_loss", v, t)?;
        for (&a, &b) in v.data().iter().zip(t.data()) {
            sum += (a - b) * (a - b);
        }
        n += v.len();
    }
    Ok(sum / T::lit(n as f64))
}

/// One training triple for a single chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T = f32> {
    pub tau: f64,
    pub eps: Tensor<T>,
    pub a_noisy: Tensor<T>,
    pub target: Tensor<T>,
}

pub fn make_flow_sample<T: Scalar>(a: &Tensor<T>, rng: &mut Rng, cfg: &FlowConfig) -> Result<FlowSample<T>> {
    let tau = sample_tau_in(rng, cfg.beta_alpha, cfg.beta_beta, cfg.clamp)?;
    let eps = sample_gaussian(rng, a.shape());
    Ok(FlowSample {
        tau,
        a_noisy: interpolate(a, &eps, T::lit(tau))?,
        target: flow_target(a, &eps)?,
        eps,
    })
}

/// Forward Euler from τ=0 to τ=1 in `steps` uniform steps.
pub fn euler_integrate<T: Scalar>(
    init: Tensor<T>,
    steps: usize,
    mut velocity: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let dt_t = T::lit(dt);
    let mut a = init;
    for k in 0..steps {
        let tau = k as f64 * dt;
        let v = velocity(&a, tau)?;
        check_same("euler_integrate", &a, &v)?;
        if !v.all_finite() {
            return Err(Error::NonFiniteVelocity { tau });
        }
        for (x, &dv) in a.data_mut().iter_mut().zip(v.data()) {
            *x += dt_t * dv;
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = t(&[&[2., 4.], &[-1.5, 0.25]]);
        let e = t(&[&[0.3, -0.7], &[1e-3, 9.0]]);
        assert_eq!(interpolate(&a, &e, 1.0).unwrap(), a);
        assert_eq!(interpolate(&a, &e, 0.0).unwrap(), e);
        let m = interpolate(&t(&[&[2., 4.]]), &t(&[&[0., 0.]]), 0.5).unwrap();
        assert_eq!(m.data(), &[1., 2.]);
        assert!(interpolate(&a, &t(&[&[1.0]]), 0.5).is_err());
    }

    #[test]
    fn target_examples() {
        let a = t(&[&[1., 0.]]);
        assert!(flow_target(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(flow_target(&a, &t(&[&[0., 1.]])).unwrap().data(), &[1., -1.]);
    }

    #[test]
    fn loss_examples() {
        let u = t(&[&[0., 0.]]);
        assert_eq!(
            fm_loss(std::slice::from_ref(&u), std::slice::from_ref(&u)).unwrap(),
            0.0
        );
        assert_eq!(fm_loss(&[t(&[&[1., 1.]])], std::slice::from_ref(&u)).unwrap(), 1.0);
        let v = vec![t(&[&[1., 2.]]), t(&[&[0., -3.]])];
        let w = vec![t(&[&[0., 0.]]), t(&[&[1., 1.]])];
        let l1 = fm_loss(&v, &w).unwrap();
        let vr: Vec<_> = v.iter().rev().cloned().collect();
        let wr: Vec<_> = w.iter().rev().cloned().collect();
        assert_eq!(l1, fm_loss(&vr, &wr).unwrap());
    }

    #[test]
    fn constant_field_one_step_is_exact() {
        let target = t(&[&[0.5, -2.0], &[3.0, 0.125]]);
        let eps = t(&[&[1.0, 0.5], &[-1.0, 0.25]]);
        let u = flow_target(&target, &eps).unwrap();
        let out = euler_integrate(eps.clone(), 1, |_, _| Ok(u.clone())).unwrap();
        assert_eq!(out, target);
        for s in [2, 5, 10] {
            let out = euler_integrate(eps.clone(), s, |_, _| Ok(u.clone())).unwrap();
            assert!(out.max_abs_diff(&target) < 1e-12);
        }
    }

    #[test]
    fn euler_is_first_order_on_linear_decay() {
        let a0 = t(&[&[1.0, -0.5, 2.0]]);
        let exact = a0.map(|v| v * (-1.0f64).exp());
        let err = |s| {
            let out = euler_integrate(a0.clone(), s, |a, _| Ok(a.map(|v| -v))).unwrap();
            out.max_abs_diff(&exact)
        };
        for s in [5, 10, 20] {
            let ratio = err(s) / err(2 * s);
            assert!((1.7..=2.3).contains(&ratio), "S={s}: ratio {ratio}");
        }
    }

    #[test]
    fn nan_field_reports_tau() {
        let r = euler_integrate(t(&[&[1.0]]), 4, |a, tau| {
            Ok(if tau >= 0.5 { a.map(|_| f64::NAN) } else { a.clone() })
        });
        match r {
            Err(Error::NonFiniteVelocity { tau }) => assert_eq!(tau, 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_tau_mean_and_range() {
        let mut rng = Rng::new(21);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let tau = sample_tau(&mut rng, 1.0, 1.0).unwrap();
            assert!((0.02..=0.98).contains(&tau));
            sum += tau;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.01);
        assert!(sample_tau(&mut rng, 0.0, 1.0).is_err());
    }

    #[test]
    fn tau_sequence_reproducible() {
        let a: Vec<f64> = {
            let mut r = Rng::new(2);
            (0..10).map(|_| sample_tau(&mut r, 1.5, 1.0).unwrap()).collect()
        };
        let b: Vec<f64> = {
            let mut r = Rng::new(2);
            (0..10).map(|_| sample_tau(&mut r, 1.5, 1.0).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn one_parameter_model_recovers_target() {
        // v(θ) = θ fitted by gradient descent on (θ − u)²
        let a = 0.8f64;
        let e = -0.3f64;
        let u = a - e;
        let mut theta = 0.0f64;
        for _ in 0..200 {
            theta -= 0.1 * 2.0 * (theta - u);
        }
        assert!((theta - u).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn interpolant_plus_remaining_flow_is_data(
            a in -10.0f64..10.0, e in -10.0f64..10.0, tau in 0.0f64..=1.0
        ) {
            let at = interpolate(&Tensor::scalar(a), &Tensor::scalar(e), tau).unwrap();
            let u = flow_target(&Tensor::scalar(a), &Tensor::scalar(e)).unwrap();
            let back = at.data()[0] + (1.0 - tau) * u.data()[0];
            prop_assert!((back - a).abs() < 1e-6);
        }
    }
}
