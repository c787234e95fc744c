//! Construction of round-trip schedules with strictly negative execution cost.
//!
//! For an odd, continuous, nonlinear `h` there are `a, b` with
//! `s = h(a) + h(b) + h(−a−b) ≠ 0`. Trading `(a+ε, b, −a−b)` at almost the
//! same instant costs roughly `G(0)·ε·s`, which is negative once the signs are
//! chosen so that `s < 0` and `ε` is small. Spreading the trades over distinct
//! times keeps the sign by continuity of the kernel at lag zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impact::{continuous_cost, ImpactFunction, KernelFn, TradeSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulationSettings {
    pub a: f64,
    pub b: f64,
    pub start_time: f64,
    pub bin_seconds: f64,
    pub max_halvings: usize,
}

impl Default for ManipulationSettings {
    fn default() -> Self {
        Self {
            a: -1.0,
            b: -1.0,
            start_time: 0.0,
            bin_seconds: 1.0,
            max_halvings: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manipulation {
    pub schedule: TradeSchedule,
    pub cost: f64,
    pub epsilon: f64,
    pub delta_t: f64,
    /// `h(a) + h(b) + h(−a−b)` after the sign flip.
    pub s: f64,
}

/// Searches for a single-asset schedule with negative cost under `kernel`.
///
/// The kernel is evaluated at exact time differences, so it must be the
/// continuous-time kernel (parametric or interpolated), not a lag tensor.
pub fn construct_manipulation<K: KernelFn + ?Sized>(
    kernel: &K,
    h: &ImpactFunction,
    settings: &ManipulationSettings,
) -> Result<Manipulation> {
    let g0 = kernel.eval(0.0);
    if g0.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidInput(format!(
            "kernel must be positive at lag 0, got {g0}"
        )));
    }
    if settings.bin_seconds <= 0.0 {
        return Err(Error::out_of_range("bin_seconds", "must be > 0"));
    }

    let (mut a, mut b) = (settings.a, settings.b);
    let mut s = h.apply(a) + h.apply(b) + h.apply(-a - b);
    let scale = h.apply(a).abs() + h.apply(b).abs() + h.apply(-a - b).abs();
    if s.abs() <= 1e-14 * scale {
        return Err(Error::NoManipulation { iterations: 0 });
    }
    if s > 0.0 {
        a = -a;
        b = -b;
        s = -s;
    }

    let mut eps = a.abs() / 10.0;
    for _ in 0..=settings.max_halvings {
        let x = [a + eps, b, -a - b];
        // Negative at coincident times first; then separate the trades.
        let coincident = continuous_cost(kernel, h, &[0.0; 3], &x);
        if coincident < 0.0 {
            let mut dt = settings.bin_seconds / 10.0;
            for _ in 0..=settings.max_halvings {
                let times: Vec<f64> = (0..3).map(|i| settings.start_time + i as f64 * dt).collect();
                let cost = continuous_cost(kernel, h, &times, &x);
                if cost < 0.0 {
                    let schedule =
                        TradeSchedule::new(times, x.iter().map(|&v| vec![v]).collect())?;
                    return Ok(Manipulation {
                        schedule,
                        cost,
                        epsilon: eps,
                        delta_t: dt,
                        s,
                    });
                }
                dt *= 0.5;
            }
        }
        eps *= 0.5;
    }
    Err(Error::NoManipulation {
        iterations: settings.max_halvings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impact::{InterpolatedKernel, ParametricKernel};
    use crate::kernel::KernelTensor;

    #[test]
    fn sum_of_transforms_for_square_root() {
        let h = ImpactFunction::new(0.5).unwrap();
        let s = h.apply(-1.0) + h.apply(-1.0) + h.apply(2.0);
        assert!((s - (2.0f64.sqrt() - 2.0)).abs() < 1e-15);
        assert!((s + 0.585_786_437_626_905).abs() < 1e-12);
    }

    #[test]
    fn linear_impact_has_no_manipulation() {
        let k = ParametricKernel::one_exp(1.0, 0.01).unwrap();
        let err = construct_manipulation(&k, &ImpactFunction::linear(), &Default::default());
        assert!(matches!(err, Err(Error::NoManipulation { .. })));
    }

    #[test]
    fn exponential_kernel_square_root_is_manipulable() {
        let k = ParametricKernel::one_exp(1.0, 0.05).unwrap();
        let h = ImpactFunction::new(0.5).unwrap();
        let m = construct_manipulation(&k, &h, &Default::default()).unwrap();
        assert!(m.cost < 0.0);
        let x: Vec<f64> = m.schedule.volumes.iter().map(|v| v[0]).collect();
        assert!((continuous_cost(&k, &h, &m.schedule.times, &x) - m.cost).abs() < 1e-15);
        assert!(m.schedule.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn interpolated_tensor_kernel_works() {
        let t = KernelTensor::from_vec(4, 1, &[1.0, 0.6, 0.4, 0.3]).unwrap();
        let k = InterpolatedKernel::from_tensor(&t, 0, 0, 60.0).unwrap();
        let h = ImpactFunction::new(0.3).unwrap();
        let settings = ManipulationSettings {
            bin_seconds: 60.0,
            ..Default::default()
        };
        assert!(construct_manipulation(&k, &h, &settings).unwrap().cost < 0.0);
    }

    #[test]
    fn rejects_nonpositive_kernel_at_zero() {
        let k = ParametricKernel::one_exp(-1.0, 0.05).unwrap();
        let h = ImpactFunction::new(0.5).unwrap();
        assert!(construct_manipulation(&k, &h, &Default::default()).is_err());
    }
}
